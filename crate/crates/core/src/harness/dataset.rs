//! Loading, splitting and sizing the dialogue data of a run.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::data::{read_jsonl, DialogueRecord, FeatureDims, Modality};
use crate::diffrgcn::{AttentionKind, DiffRgcnConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::ModelConfig;
use crate::rng;
use crate::synth;

/// Shape facts the model is sized from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataInfo {
    pub dims: FeatureDims,
    pub n_speakers: usize,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<DialogueRecord>,
    pub valid: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
    pub info: DataInfo,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[DialogueRecord]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split `{name}` (train, valid, test)"))),
        }
    }
}

/// Shuffle with a stream keyed by `seed` and cut at the configured fractions.
pub fn split_records(
    mut records: Vec<DialogueRecord>,
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> (Vec<DialogueRecord>, Vec<DialogueRecord>, Vec<DialogueRecord>) {
    records.shuffle(&mut rng::stream(seed, "split", 0));
    let n = records.len();
    let n_train = ((n as f64 * train_frac).round() as usize).min(n);
    let n_valid = ((n as f64 * valid_frac).round() as usize).min(n - n_train);
    let test = records.split_off(n_train + n_valid);
    let valid = records.split_off(n_train);
    (records, valid, test)
}

fn infer_info(cfg: &RunConfig, all: &[&DialogueRecord]) -> Result<DataInfo> {
    let first = all
        .iter()
        .find(|r| !r.is_empty())
        .ok_or_else(|| Error::Data("no non-empty dialogue in the data".into()))?;
    let dims = FeatureDims {
        text: first.text[0].len(),
        visual: first.visual[0].len(),
        audio: first.audio[0].len(),
    };
    let max_spk = all.iter().flat_map(|r| r.speakers.iter().copied()).max().unwrap_or(0);
    let max_label = all.iter().flat_map(|r| r.labels.iter().copied()).max().unwrap_or(-1);
    let n_speakers = match cfg.n_speakers {
        Some(n) if n <= max_spk => {
            return Err(Error::Data(format!("speaker id {max_spk} found but n_speakers = {n}")))
        }
        Some(n) => n,
        None => max_spk + 1,
    };
    let classes = match cfg.classes {
        Some(c) if (c as i64) <= max_label => {
            return Err(Error::Data(format!("label {max_label} found but classes = {c}")))
        }
        Some(c) => c,
        None => (max_label + 1).max(2) as usize,
    };
    for r in all {
        for m in Modality::ALL {
            if let Some(row) = r.features(m).iter().find(|row| row.len() != dims.get(m)) {
                return Err(Error::Data(format!(
                    "dialogue `{}`: {:?} width {} differs from {}",
                    r.id,
                    m,
                    row.len(),
                    dims.get(m)
                )));
            }
        }
    }
    Ok(DataInfo { dims, n_speakers, classes })
}

/// Resolve the data source of `cfg`: explicit split files, one file to
/// split, or the synthetic generator.
pub fn load(cfg: &RunConfig) -> Result<Dataset> {
    let (train, valid, test) = if let Some(tr) = &cfg.train_data {
        let need = |p: &Option<std::path::PathBuf>, what: &str| {
            p.as_ref()
                .ok_or_else(|| Error::Config(format!("train_data given without {what}")))
                .and_then(read_jsonl)
        };
        (read_jsonl(tr)?, need(&cfg.valid_data, "valid_data")?, need(&cfg.test_data, "test_data")?)
    } else if let Some(path) = &cfg.data {
        split_records(read_jsonl(path)?, cfg.train_frac, cfg.valid_frac, 0)
    } else if let Some(sc) = &cfg.synth {
        split_records(synth::generate(sc)?, cfg.train_frac, cfg.valid_frac, sc.seed)
    } else {
        return Err(Error::Config("no data: set `data`, `train_data`/`valid_data`/`test_data` or `synth`".into()));
    };
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let all: Vec<&DialogueRecord> = train.iter().chain(&valid).chain(&test).collect();
    let mut sized = cfg.clone();
    if let Some(sc) = cfg.synth.as_ref().filter(|_| cfg.train_data.is_none() && cfg.data.is_none()) {
        sized.classes = sized.classes.or(Some(sc.classes));
        sized.n_speakers = sized.n_speakers.or(Some(sc.n_speakers));
    }
    let info = infer_info(&sized, &all)?;
    Ok(Dataset { train, valid, test, info })
}

pub fn model_config(cfg: &RunConfig, info: &DataInfo) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dims: info.dims,
            hidden: cfg.hidden,
            heads: cfg.enc_heads,
            ffn_dim: cfg.ffn_dim.unwrap_or(2 * cfg.hidden),
            n_speakers: info.n_speakers,
            text_transformer: cfg.text_transformer,
            ln_eps: 1e-5,
        },
        graph_mode: cfg.graph_mode,
        gnn: DiffRgcnConfig {
            hidden: cfg.hidden,
            heads: cfg.heads,
            rel_dim: cfg.rel_dim,
            lambda_dim: cfg.lambda_dim,
            dropout: cfg.gnn_dropout,
            leaky_slope: 0.2,
            pairs: cfg.pairs,
            kind: AttentionKind::Differential,
            ln_eps: 1e-5,
        },
        classifier: ClassifierConfig {
            classes: info.classes,
            dropout: cfg.head_dropout,
            alpha_squared: cfg.alpha_squared,
        },
        window: cfg.window,
    }
}
