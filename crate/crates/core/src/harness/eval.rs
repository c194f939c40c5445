//! Checkpoint evaluation over a grid of feature-noise levels.
//!
//! `noise.csv` has columns `sigma,wa_acc,wa_f1,n`; `confusion.json` is a
//! list of `{sigma, confusion, per_class}` objects with `confusion[truth][pred]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::DialogueRecord;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::dataset;
use crate::harness::train::{evaluate_records, Checkpoint};
use crate::metrics::{ClassMetrics, EvalMetrics};
use crate::synth::inject_noise;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub metrics: EvalMetrics,
}

#[derive(Serialize)]
struct ConfusionEntry<'a> {
    sigma: f64,
    confusion: &'a [Vec<usize>],
    per_class: &'a [ClassMetrics],
}

/// Evaluate `ck` on `records` once per noise level. Noise std is `σ` times
/// each modality's global feature std, drawn from streams keyed by `noise_seed`.
pub fn noise_grid(ck: &Checkpoint, records: &[DialogueRecord], grid: &[f64], noise_seed: u64, batch_size: usize) -> Result<Vec<NoiseRow>> {
    match ck.precision.as_str() {
        "f32" => noise_grid_typed::<f32>(ck, records, grid, noise_seed, batch_size),
        "f64" => noise_grid_typed::<f64>(ck, records, grid, noise_seed, batch_size),
        other => Err(Error::Config(format!("checkpoint precision `{other}` is not f32 or f64"))),
    }
}

fn noise_grid_typed<T: Scalar>(
    ck: &Checkpoint,
    records: &[DialogueRecord],
    grid: &[f64],
    noise_seed: u64,
    batch_size: usize,
) -> Result<Vec<NoiseRow>> {
    let store = ck.param_store::<T>()?;
    grid.iter()
        .map(|&sigma| {
            if sigma < 0.0 {
                return Err(Error::Config(format!("noise level {sigma} is negative")));
            }
            let metrics = if sigma == 0.0 {
                evaluate_records(&store, &ck.model, records, batch_size)?
            } else {
                let noisy = inject_noise(records, [sigma; 3], noise_seed);
                evaluate_records(&store, &ck.model, &noisy, batch_size)?
            };
            Ok(NoiseRow { sigma, metrics })
        })
        .collect()
}

/// Load the split named `split` of `cfg`'s data and check it fits the checkpoint.
pub fn load_split(ck: &Checkpoint, cfg: &RunConfig, split: &str) -> Result<Vec<DialogueRecord>> {
    let data = dataset::load(cfg)?;
    let want = ck.model.encoder.dims;
    if data.info.dims != want {
        return Err(Error::Config(format!(
            "feature widths {:?} do not match the checkpoint's {:?}",
            data.info.dims, want
        )));
    }
    if data.info.classes > ck.model.classifier.classes {
        return Err(Error::Config(format!(
            "data has {} classes but the checkpoint predicts {}",
            data.info.classes, ck.model.classifier.classes
        )));
    }
    Ok(data.split(split)?.to_vec())
}

pub fn write_reports(dir: &Path, rows: &[NoiseRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("sigma,wa_acc,wa_f1,n\n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{},{}", r.sigma, r.metrics.wa_acc, r.metrics.wa_f1, r.metrics.n);
    }
    let p = dir.join("noise.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let entries: Vec<ConfusionEntry> = rows
        .iter()
        .map(|r| ConfusionEntry {
            sigma: r.sigma,
            confusion: &r.metrics.confusion,
            per_class: &r.metrics.per_class,
        })
        .collect();
    let p = dir.join("confusion.json");
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::json(&p, e))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}
