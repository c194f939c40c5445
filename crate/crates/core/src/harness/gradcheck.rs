//! Finite-difference check of the full training loss on a tiny instance.

use std::time::Instant;

use crate::autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, TapeObjective, Tensor, Var};
use crate::balance::compensate;
use crate::data::{DialogueBatch, DialogueRecord, FeatureDims};
use crate::diffrgcn::DiffRgcnConfig;
use crate::encoder::EncoderConfig;
use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::model::{self, BalanceMode, ForwardOptions, GraphMode, ModelConfig};
use crate::rng;

pub const THETA_PARAM: &str = "balance.theta";

/// One named gradient check.
pub struct CaseReport {
    pub name: String,
    pub report: GradCheckReport,
}

/// The compensation contract checked directly: feature gradients equal the
/// upstream gradient times `1 / (1 − θ)` and `θ` receives nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractReport {
    pub theta: f64,
    /// `max |g_x / g_upstream − 1/(1−θ)|` over kept entries.
    pub max_scale_err: f64,
    /// Gradient reaching `θ`; `None` when the path is blocked.
    pub theta_grad: Option<f64>,
    /// Dropped entries must receive exactly zero.
    pub dropped_grad_max: f64,
}

impl ContractReport {
    pub fn passed(&self) -> bool {
        self.max_scale_err <= 1e-12 && self.theta_grad.is_none_or(|g| g == 0.0) && self.dropped_grad_max == 0.0
    }
}

pub struct GradcheckOutcome {
    pub cases: Vec<CaseReport>,
    pub contract: ContractReport,
    pub seconds: f64,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.contract.passed() && self.cases.iter().all(|c| c.report.passed())
    }
}

impl std::fmt::Display for GradcheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.cases {
            write!(f, "[{}] {}", c.name, c.report)?;
        }
        let k = &self.contract;
        writeln!(
            f,
            "[compensation θ={}] scale err {:.3e}, θ grad {}, dropped grad {:e} => {}",
            k.theta,
            k.max_scale_err,
            k.theta_grad.map_or("blocked".to_string(), |g| format!("{g:e}")),
            k.dropped_grad_max,
            if k.passed() { "PASS" } else { "FAIL" }
        )?;
        write!(f, "overall: {} in {:.2}s", if self.passed() { "PASS" } else { "FAIL" }, self.seconds)
    }
}

fn tiny_model(mode: GraphMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dims: FeatureDims { text: 4, visual: 3, audio: 5 },
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            n_speakers: 2,
            text_transformer: true,
            ln_eps: 1e-5,
        },
        graph_mode: mode,
        gnn: DiffRgcnConfig {
            hidden: 8,
            heads: 2,
            rel_dim: 3,
            dropout: 0.0,
            ..DiffRgcnConfig::default()
        },
        classifier: ClassifierConfig {
            classes: 3,
            dropout: 0.0,
            alpha_squared: false,
        },
        window: 2,
    }
}

fn tiny_batch(seed: u64) -> Result<DialogueBatch<f64>> {
    let mut r = rng::stream(seed, "gradcheck-data", 0);
    let row = |d: usize, r: &mut rng::StreamRng| Tensor::<f32>::randn(&[d], 1.0, r).into_data();
    let rec = DialogueRecord {
        id: "gradcheck".into(),
        speakers: vec![0, 1, 0],
        labels: vec![0, 2, 1],
        text: (0..3).map(|_| row(4, &mut r)).collect(),
        visual: (0..3).map(|_| row(3, &mut r)).collect(),
        audio: (0..3).map(|_| row(5, &mut r)).collect(),
    };
    DialogueBatch::collate(&[&rec], 2, FeatureDims { text: 4, visual: 3, audio: 5 })
}

fn check_case(name: &str, mode: GraphMode, fixed: Option<([bool; 3], f64)>, seed: u64, tol: f64) -> Result<CaseReport> {
    let mcfg = tiny_model(mode);
    let mut store: ParamStore<f64> = model::init_params(&mcfg, &mut rng::stream(seed, "init", 0))?;
    if let Some((_, theta)) = fixed {
        store.insert(THETA_PARAM, Tensor::scalar(theta));
    }
    let batch = tiny_batch(seed)?;
    let run = |tape: &mut Tape<f64>, store: &ParamStore<f64>, alpha: Option<[f64; 3]>| -> Result<(Var, [f64; 3])> {
        let balance = match fixed {
            Some((mask, _)) => BalanceMode::Fixed {
                mask: vec![mask],
                theta: tape.param(store, THETA_PARAM)?,
            },
            None => BalanceMode::Off,
        };
        let opts = ForwardOptions {
            balance,
            alpha_override: alpha,
            ..ForwardOptions::default()
        };
        let out = model::forward(tape, store, &mcfg, &batch, opts)?;
        let loss = out.loss.ok_or_else(|| Error::Internal("gradcheck instance has no labels".into()))?;
        Ok((loss, out.breakdown.map(|b| b.alpha).unwrap_or_default()))
    };
    // α_m = L_m/10 is a stop-gradient weight; pin it at the unperturbed point
    // so the finite differences see the same function the backward pass does.
    let alpha = run(&mut Tape::new(), &store, None)?.1;
    let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| run(tape, s, Some(alpha)).map(|x| x.0));
    let opts = GradCheckOptions {
        eps: 1e-6,
        tol,
        blocked: if fixed.is_some() { vec![THETA_PARAM.to_string()] } else { Vec::new() },
        max_elems_per_param: None,
    };
    let report = finite_diff_check(&mut obj, &store, &opts)?;
    Ok(CaseReport {
        name: name.to_string(),
        report,
    })
}

/// Check `x ↦ M ⊙ x / (1 − θ)` in isolation.
pub fn check_contract(theta: f64, seed: u64) -> Result<ContractReport> {
    let mut r = rng::stream(seed, "gradcheck-contract", 0);
    let mut tape = Tape::<f64>::new();
    let x = tape.var(Tensor::randn(&[3, 2, 4], 1.0, &mut r));
    let th = tape.var(Tensor::scalar(theta));
    let keep = [true, false, true];
    let y = compensate(&mut tape, x, &keep, th)?;
    let c = Tensor::randn(&[3, 2, 4], 1.0, &mut r);
    let cv = tape.constant(c.clone());
    let prod = tape.mul(y, cv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;
    let gx = grads.get_or_zeros(&tape, x);
    let want = 1.0 / (1.0 - theta);
    let (mut max_scale_err, mut dropped_grad_max) = (0.0f64, 0.0f64);
    for (i, (&g, &u)) in gx.data().iter().zip(c.data()).enumerate() {
        if keep[i / 8] {
            max_scale_err = max_scale_err.max((g / u - want).abs());
        } else {
            dropped_grad_max = dropped_grad_max.max(g.abs());
        }
    }
    Ok(ContractReport {
        theta,
        max_scale_err,
        theta_grad: grads.get(th).map(|g| g.item()),
        dropped_grad_max,
    })
}

/// Balance off, balance with fixed mask `(1, 0, 1)` and `θ = 0.3`, the
/// no-graph ablation and the plain-attention ablation; plus the direct
/// compensation contract.
pub fn run_gradcheck(seed: u64, tol: f64) -> Result<GradcheckOutcome> {
    let t0 = Instant::now();
    let cases = vec![
        check_case("full, balance off", GraphMode::DiffRgcn, None, seed, tol)?,
        check_case("full, fixed mask (1,0,1) θ=0.3", GraphMode::DiffRgcn, Some(([true, false, true], 0.3)), seed, tol)?,
        check_case("no-graph", GraphMode::NoGraph, None, seed, tol)?,
        check_case("plain-gat", GraphMode::PlainGat, None, seed, tol)?,
    ];
    let contract = check_contract(0.3, seed)?;
    Ok(GradcheckOutcome {
        cases,
        contract,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
