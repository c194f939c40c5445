//! The full model: encoder → relational graph → modality balancing → heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::balance::{self, BalanceConfig, BalanceState};
use crate::classifier::{self, ClassifierConfig, LossBreakdown};
use crate::data::{DialogueBatch, Modality};
use crate::diffrgcn::{self, AttentionKind, DiffRgcnConfig, LayerTrace};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::build_subgraphs;
use crate::rng::StreamRng;

/// Which relational module sits between the encoder and the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphMode {
    DiffRgcn,
    /// Relation-blind single-branch graph attention over the same subgraphs.
    PlainGat,
    /// Encoder output goes straight to balancing and the heads.
    NoGraph,
}

impl GraphMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diffrgcn" => Ok(GraphMode::DiffRgcn),
            "plain-gat" => Ok(GraphMode::PlainGat),
            "no-graph" => Ok(GraphMode::NoGraph),
            _ => Err(Error::Config(format!("unknown graph mode `{s}` (diffrgcn, plain-gat, no-graph)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphMode::DiffRgcn => "diffrgcn",
            GraphMode::PlainGat => "plain-gat",
            GraphMode::NoGraph => "no-graph",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub graph_mode: GraphMode,
    pub gnn: DiffRgcnConfig,
    pub classifier: ClassifierConfig,
    pub window: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.graph_mode != GraphMode::NoGraph {
            self.gnn_config().validate()?;
            if self.gnn.hidden != self.encoder.hidden {
                return Err(Error::Config("graph and encoder widths differ".into()));
            }
        }
        if self.classifier.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Graph settings with the attention kind implied by the graph mode.
    pub fn gnn_config(&self) -> DiffRgcnConfig {
        let mut g = self.gnn.clone();
        g.kind = match self.graph_mode {
            GraphMode::PlainGat => AttentionKind::Plain,
            _ => AttentionKind::Differential,
        };
        g
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    encoder::init_params(&cfg.encoder, &mut store, rng);
    if cfg.graph_mode != GraphMode::NoGraph {
        diffrgcn::init_params(&cfg.gnn_config(), &mut store, rng);
    }
    classifier::init_params(&cfg.classifier, cfg.encoder.hidden, &mut store, rng);
    Ok(store)
}

/// How modality balancing participates in a forward pass.
pub enum BalanceMode<'a> {
    Off,
    /// Score modalities on this batch and drop adaptively.
    Adaptive {
        cfg: &'a BalanceConfig,
        rng: &'a mut StreamRng,
    },
    /// Use a given per-dialogue survival mask and compensation `θ`.
    Fixed { mask: Vec<[bool; 3]>, theta: Var },
}

/// Attention maps collected during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ModelTrace<T> {
    pub encoder: [Option<Tensor<T>>; 3],
    pub graph: [Vec<LayerTrace<T>>; 3],
}

pub struct ForwardOptions<'a, T> {
    /// Dropout stream for graph and head dropout; `None` disables dropout.
    pub dropout_rng: Option<&'a mut StreamRng>,
    pub balance: BalanceMode<'a>,
    pub alpha_override: Option<[f64; 3]>,
    pub trace: Option<&'a mut ModelTrace<T>>,
}

impl<T> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        ForwardOptions {
            dropout_rng: None,
            balance: BalanceMode::Off,
            alpha_override: None,
            trace: None,
        }
    }
}

pub struct ForwardOutput {
    /// `None` when no position of the (possibly filtered) batch has a label.
    pub loss: Option<Var>,
    pub breakdown: Option<LossBreakdown>,
    /// Fused logits `[B', L, C]` over the dialogues that survived balancing.
    pub fused_logits: Var,
    pub targets: Vec<Option<usize>>,
    pub balance: Option<BalanceState>,
}

/// Graph features `[B, L, d_h]` per modality.
pub fn represent<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &DialogueBatch<T>,
    mut dropout_rng: Option<&mut StreamRng>,
    mut trace: Option<&mut ModelTrace<T>>,
) -> Result<[Var; 3]> {
    let enc = encoder::encode(tape, store, &cfg.encoder, batch)?;
    if let Some(t) = trace.as_deref_mut() {
        t.encoder = enc.attention.clone();
    }
    if cfg.graph_mode == GraphMode::NoGraph {
        return Ok(enc.features);
    }
    let sub = build_subgraphs(&batch.speakers, &batch.mask, batch.batch, batch.len, cfg.window);
    let gnn = cfg.gnn_config();
    let gnn_rng = dropout_rng.as_deref_mut();
    diffrgcn::diff_rgcn_forward(
        tape,
        store,
        enc.features,
        &sub,
        &batch.mask,
        &gnn,
        gnn_rng,
        trace.map(|t| &mut t.graph),
    )
}

fn restrict<X: Clone>(rows: &[X], kept: &[usize], len: usize) -> Vec<X> {
    kept.iter().flat_map(|&b| rows[b * len..(b + 1) * len].iter().cloned()).collect()
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &DialogueBatch<T>,
    opts: ForwardOptions<'_, T>,
) -> Result<ForwardOutput> {
    let ForwardOptions {
        mut dropout_rng,
        balance: balance_mode,
        alpha_override,
        trace,
    } = opts;
    let g = represent(tape, store, cfg, batch, dropout_rng.as_deref_mut(), trace)?;
    let mut targets = batch.targets();
    let (feats, state) = match balance_mode {
        BalanceMode::Off => (g, None),
        BalanceMode::Adaptive { cfg: bcfg, rng } => {
            let mut p = [0.0; 3];
            for m in Modality::ALL {
                let z = classifier::modality_logits::<T, StreamRng>(tape, store, m, g[m.index()], 0.0, None)?;
                let (preds, labels) = balance::flatten_valid(tape.value(z), &targets);
                p[m.index()] = balance::modality_f1(&preds, &labels, bcfg.class_score);
            }
            let out = balance::apply_modality_dropout(tape, g, p, bcfg, rng)?;
            (out.features, Some(out.state))
        }
        BalanceMode::Fixed { mask, theta } => {
            if mask.len() != batch.batch {
                return Err(Error::Config(format!("fixed modality mask has {} rows for {} dialogues", mask.len(), batch.batch)));
            }
            let kept: Vec<usize> = (0..batch.batch).filter(|&b| mask[b].iter().any(|&k| k)).collect();
            let mut out = g;
            for m in 0..3 {
                let keep: Vec<bool> = mask.iter().map(|k| k[m]).collect();
                let scaled = balance::compensate(tape, g[m], &keep, theta)?;
                out[m] = if kept.len() == batch.batch { scaled } else { tape.index_select(scaled, &kept)? };
            }
            let state = BalanceState {
                theta: tape.value(theta).item().f64(),
                mask,
                kept,
                applied: true,
                ..Default::default()
            };
            (out, Some(state))
        }
    };
    if let Some(s) = &state {
        if s.applied && s.kept.len() != batch.batch {
            targets = restrict(&targets, &s.kept, batch.len);
        }
    }
    let mut logits = feats;
    for m in Modality::ALL {
        logits[m.index()] = classifier::modality_logits(
            tape,
            store,
            m,
            feats[m.index()],
            cfg.classifier.dropout,
            dropout_rng.as_deref_mut(),
        )?;
    }
    let fused = classifier::fuse(tape, logits)?;
    let (loss, breakdown) = if targets.iter().any(Option::is_some) {
        let lps = logits.map(|l| tape.log_softmax(l));
        let (l, bd) = classifier::total_loss(tape, fused.log_probs, lps, &targets, &cfg.classifier, alpha_override)?;
        (Some(l), Some(bd))
    } else {
        (None, None)
    };
    Ok(ForwardOutput {
        loss,
        breakdown,
        fused_logits: fused.logits,
        targets,
        balance: state,
    })
}
