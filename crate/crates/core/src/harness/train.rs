//! The training loop, checkpoints and split evaluation.
//!
//! Run directory layout:
//!
//! | file            | content                                                        |
//! |-----------------|----------------------------------------------------------------|
//! | `config.txt`    | canonical `key = value` form of the run config                 |
//! | `metrics.jsonl` | one line per (epoch, split): accuracy, F1, per-class, confusion |
//! | `losses.csv`    | `epoch,batches,fusion,uni_t,uni_v,uni_a,total` (batch means)  |
//! | `balance.csv`   | `epoch,p_t,p_v,p_a,q_t,q_v,q_a,theta,applied_fraction`         |
//! | `lambda.csv`    | `epoch,modality,depth,head,lambda_full`                        |
//! | `checkpoint.json` | state after the last completed epoch                         |
//! | `best.json`     | checkpoint of the epoch with the best validation weighted F1   |
//! | `summary.json`  | best epoch and its test metrics                                |
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch)`,
//! so the generator state at an epoch boundary is implied by the epoch
//! number and resuming replays exactly the draws an uninterrupted run makes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor};
use crate::balance::warmup_gate;
use crate::data::{DialogueBatch, DialogueRecord, Modality};
use crate::diffrgcn::{layer_prefix, AttentionKind};
use crate::error::{Error, Result};
use crate::harness::config::{Precision, RunConfig};
use crate::harness::dataset::{self, Dataset};
use crate::harness::optim::{Adam, AdamConfig};
use crate::metrics::{EvalMetrics, Evaluator};
use crate::model::{self, BalanceMode, ForwardOptions, GraphMode, ModelConfig};
use crate::rng;

/// A tensor as stored on disk. `f32` values widen to `f64` losslessly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        StoredTensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.data.iter().map(|&x| T::of(x)).collect())
    }
}

fn store_tensors<T: Scalar>(it: impl Iterator<Item = (String, Tensor<T>)>) -> BTreeMap<String, StoredTensor> {
    it.map(|(k, v)| (k, StoredTensor::from_tensor(&v))).collect()
}

fn load_tensors<T: Scalar>(m: &BTreeMap<String, StoredTensor>) -> Result<BTreeMap<String, Tensor<T>>> {
    m.iter().map(|(k, v)| Ok((k.clone(), v.to_tensor()?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub valid_wa_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: String,
    pub config_hash: String,
    pub precision: String,
    pub model: ModelConfig,
    /// Epochs completed; training resumes at this epoch.
    pub next_epoch: usize,
    /// Random streams are derived from `(seed, purpose, epoch)`.
    pub seed: u64,
    pub adam_step: u64,
    pub params: BTreeMap<String, StoredTensor>,
    pub adam_m: BTreeMap<String, StoredTensor>,
    pub adam_v: BTreeMap<String, StoredTensor>,
    pub best: Option<BestRecord>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(&self.config)?;
        Ok(c)
    }

    pub fn param_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for (k, v) in load_tensors::<T>(&self.params)? {
            s.insert(k, v);
        }
        Ok(s)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct MetricsLine {
    epoch: usize,
    split: String,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_wa_f1: Option<f64>,
    /// Test metrics of the best-validation parameters (last parameters when
    /// there is no validation split).
    pub test: EvalMetrics,
    /// Training-split metrics after the last epoch.
    pub final_train: EvalMetrics,
}

/// Fused-logit predictions over every labelled utterance of `records`,
/// without dropout or balancing.
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    mcfg: &ModelConfig,
    records: &[DialogueRecord],
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&DialogueRecord> = chunk.iter().collect();
        let batch = DialogueBatch::<T>::collate(&refs, mcfg.encoder.n_speakers, mcfg.encoder.dims)?;
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, store, mcfg, &batch, ForwardOptions::default())?;
        let am = tape.value(out.fused_logits).argmax_last();
        for (p, t) in am.into_iter().zip(&out.targets) {
            if let Some(y) = t {
                preds.push(p);
                labels.push(*y);
            }
        }
    }
    Ok((preds, labels))
}

pub fn evaluate_records<T: Scalar>(
    store: &ParamStore<T>,
    mcfg: &ModelConfig,
    records: &[DialogueRecord],
    batch_size: usize,
) -> Result<EvalMetrics> {
    let (preds, labels) = predict(store, mcfg, records, batch_size)?;
    let mut e = Evaluator::new(mcfg.classifier.classes);
    e.push(&preds, &labels);
    Ok(e.finish())
}

/// Where a run writes; `None` keeps everything in memory.
struct RunFiles {
    dir: Option<PathBuf>,
}

const LOGS: [(&str, &str); 4] = [
    ("metrics.jsonl", ""),
    ("losses.csv", "epoch,batches,fusion,uni_t,uni_v,uni_a,total\n"),
    ("balance.csv", "epoch,p_t,p_v,p_a,q_t,q_v,q_a,theta,applied_fraction\n"),
    ("lambda.csv", "epoch,modality,depth,head,lambda_full\n"),
];

fn line_epoch(file: &str, line: &str) -> Option<usize> {
    if file.ends_with(".jsonl") {
        serde_json::from_str::<serde_json::Value>(line).ok()?.get("epoch")?.as_u64().map(|e| e as usize)
    } else {
        line.split(',').next()?.parse().ok()
    }
}

impl RunFiles {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn start(&self, cfg_text: &str, resume_at: Option<usize>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.txt"), cfg_text.as_bytes())?;
        for (name, header) in LOGS {
            let path = dir.join(name);
            let mut kept = header.to_string();
            if let Some(next) = resume_at {
                let old = fs::read_to_string(&path).unwrap_or_default();
                for line in old.lines().skip(usize::from(!header.is_empty())) {
                    if line_epoch(name, line).is_some_and(|e| e < next) {
                        let _ = writeln!(kept, "{line}");
                    }
                }
            }
            write_atomic(&path, kept.as_bytes())?;
        }
        Ok(())
    }

    fn append(&self, name: &str, text: &str) -> Result<()> {
        let Some(path) = self.path(name) else { return Ok(()) };
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }
}

/// Train per `cfg`, writing artifacts to `out_dir` when given.
///
/// With `resume`, state is restored from `out_dir/checkpoint.json` (which
/// must come from a run with the same trajectory hash) and training
/// continues to `cfg.epochs`.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>, resume: bool) -> Result<TrainSummary> {
    let data = dataset::load(cfg)?;
    train_on(cfg, &data, out_dir, resume)
}

pub fn train_on(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>, resume: bool) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => Trainer::<f32>::new(cfg, data, out_dir, resume)?.run(),
        Precision::F64 => Trainer::<f64>::new(cfg, data, out_dir, resume)?.run(),
    }
}

struct Trainer<'a, T: Scalar> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    mcfg: ModelConfig,
    files: RunFiles,
    store: ParamStore<T>,
    adam: Adam<T>,
    start_epoch: usize,
    best: Option<BestRecord>,
    best_store: Option<ParamStore<T>>,
    cfg_text: String,
    hash: String,
}

#[derive(Default)]
struct EpochStats {
    batches: usize,
    loss: [f64; 5],
    scored: usize,
    p: [f64; 3],
    q: [f64; 3],
    theta: f64,
    applied: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(cfg: &'a RunConfig, data: &'a Dataset, out_dir: Option<&Path>, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let mcfg = dataset::model_config(cfg, &data.info);
        mcfg.validate()?;
        let files = RunFiles {
            dir: out_dir.map(Path::to_path_buf),
        };
        let cfg_text = cfg.to_text();
        let hash = cfg.trajectory_hash();
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        };
        let mut t = Trainer {
            cfg,
            data,
            files,
            store: model::init_params(&mcfg, &mut rng::stream(cfg.seed, "init", 0))?,
            mcfg,
            adam: Adam::new(adam_cfg),
            start_epoch: 0,
            best: None,
            best_store: None,
            cfg_text,
            hash,
        };
        if resume {
            t.restore()?;
        }
        t.files.start(&t.cfg_text, resume.then_some(t.start_epoch))?;
        Ok(t)
    }

    fn restore(&mut self) -> Result<()> {
        let path = self
            .files
            .path("checkpoint.json")
            .ok_or_else(|| Error::Config("resume needs an output directory".into()))?;
        let ck = Checkpoint::load(&path)?;
        if ck.config_hash != self.hash {
            return Err(Error::Config(format!(
                "{}: checkpoint config hash {} does not match this run ({})",
                path.display(),
                ck.config_hash,
                self.hash
            )));
        }
        if ck.model != self.mcfg {
            return Err(Error::Config(format!("{}: model shape differs from this run", path.display())));
        }
        self.store = ck.param_store()?;
        self.adam.step = ck.adam_step;
        self.adam.m = load_tensors(&ck.adam_m)?;
        self.adam.v = load_tensors(&ck.adam_v)?;
        self.start_epoch = ck.next_epoch;
        self.best = ck.best;
        if let (Some(_), Some(bp)) = (ck.best, self.files.path("best.json")) {
            self.best_store = Some(Checkpoint::load(&bp)?.param_store()?);
        }
        log::info!("resumed from {} at epoch {}", path.display(), ck.next_epoch);
        Ok(())
    }

    fn checkpoint(&self, next_epoch: usize, store: &ParamStore<T>) -> Checkpoint {
        Checkpoint {
            config: self.cfg_text.clone(),
            config_hash: self.hash.clone(),
            precision: T::NAME.to_string(),
            model: self.mcfg.clone(),
            next_epoch,
            seed: self.cfg.seed,
            adam_step: self.adam.step,
            params: store_tensors(store.iter().map(|(k, v)| (k.to_string(), v.clone()))),
            adam_m: store_tensors(self.adam.m.clone().into_iter()),
            adam_v: store_tensors(self.adam.v.clone().into_iter()),
            best: self.best,
        }
    }

    fn run(mut self) -> Result<TrainSummary> {
        let cfg = self.cfg;
        for epoch in self.start_epoch..cfg.epochs {
            let stats = self.train_epoch(epoch)?;
            self.log_epoch(epoch, &stats)?;
            let metrics = self.eval_splits(epoch)?;
            if let Some(valid) = metrics.get("valid") {
                if self.best.is_none_or(|b| valid.wa_f1 > b.valid_wa_f1) {
                    self.best = Some(BestRecord {
                        epoch,
                        valid_wa_f1: valid.wa_f1,
                    });
                    self.best_store = Some(self.store.clone());
                    if let Some(p) = self.files.path("best.json") {
                        self.checkpoint(epoch + 1, &self.store).save(&p)?;
                    }
                }
            }
            if let Some(p) = self.files.path("checkpoint.json") {
                self.checkpoint(epoch + 1, &self.store).save(&p)?;
            }
        }
        let bs = cfg.batch_size;
        let chosen = self.best_store.as_ref().unwrap_or(&self.store);
        let summary = TrainSummary {
            epochs: cfg.epochs,
            best_epoch: self.best.map(|b| b.epoch),
            best_valid_wa_f1: self.best.map(|b| b.valid_wa_f1),
            test: evaluate_records(chosen, &self.mcfg, &self.data.test, bs)?,
            final_train: evaluate_records(&self.store, &self.mcfg, &self.data.train, bs)?,
        };
        if let Some(p) = self.files.path("summary.json") {
            let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&p, e))?;
            write_atomic(&p, text.as_bytes())?;
        }
        Ok(summary)
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, "shuffle", e));
        let mut drop_rng = rng::stream(seed, "dropout", e);
        let mut mod_rng = rng::stream(seed, "modality", e);
        let balance_on = warmup_gate(epoch, &cfg.balance);
        let mut stats = EpochStats::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&DialogueRecord> = chunk.iter().map(|&i| &self.data.train[i]).collect();
            let batch = DialogueBatch::<T>::collate(&refs, self.mcfg.encoder.n_speakers, self.mcfg.encoder.dims)?;
            let mut tape = Tape::new();
            let balance = if balance_on {
                BalanceMode::Adaptive {
                    cfg: &cfg.balance,
                    rng: &mut mod_rng,
                }
            } else {
                BalanceMode::Off
            };
            let opts = ForwardOptions {
                dropout_rng: Some(&mut drop_rng),
                balance,
                alpha_override: None,
                trace: None,
            };
            let out = model::forward(&mut tape, &self.store, &self.mcfg, &batch, opts)?;
            if let Some(s) = &out.balance {
                stats.scored += 1;
                for m in 0..3 {
                    stats.p[m] += s.p[m];
                    stats.q[m] += s.q[m];
                }
                stats.theta += s.theta;
                stats.applied += usize::from(s.applied);
            }
            let Some(loss) = out.loss else { continue };
            let value = tape.value(loss).item().f64();
            let grads = tape.backward(loss)?.param_grads(&tape);
            if !value.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(self.non_finite(epoch, bi));
            }
            self.adam.update(&mut self.store, &grads)?;
            if let Some(b) = out.breakdown {
                stats.loss[0] += b.fusion;
                for m in 0..3 {
                    stats.loss[1 + m] += b.unimodal[m];
                }
                stats.loss[4] += b.total;
            }
            stats.batches += 1;
        }
        Ok(stats)
    }

    fn non_finite(&self, epoch: usize, batch: usize) -> Error {
        let last_good = match (epoch, self.files.path("checkpoint.json")) {
            (0, _) | (_, None) => "no checkpoint yet".to_string(),
            (_, Some(p)) => format!("last good checkpoint: {} (epoch {})", p.display(), epoch - 1),
        };
        Error::NonFinite {
            context: format!("training loss or gradient at epoch {epoch}, batch {batch}; {last_good}"),
        }
    }

    fn log_epoch(&self, epoch: usize, s: &EpochStats) -> Result<()> {
        let nb = s.batches.max(1) as f64;
        self.files.append(
            "losses.csv",
            &format!(
                "{epoch},{},{},{},{},{},{}\n",
                s.batches,
                s.loss[0] / nb,
                s.loss[1] / nb,
                s.loss[2] / nb,
                s.loss[3] / nb,
                s.loss[4] / nb
            ),
        )?;
        let row = if s.scored == 0 {
            format!("{epoch},,,,,,,,0\n")
        } else {
            let k = s.scored as f64;
            format!(
                "{epoch},{},{},{},{},{},{},{},{}\n",
                s.p[0] / k,
                s.p[1] / k,
                s.p[2] / k,
                s.q[0] / k,
                s.q[1] / k,
                s.q[2] / k,
                s.theta / k,
                s.applied as f64 / k
            )
        };
        self.files.append("balance.csv", &row)?;
        if self.mcfg.graph_mode != GraphMode::NoGraph && self.mcfg.gnn_config().kind == AttentionKind::Differential {
            let mut rows = String::new();
            for m in Modality::ALL {
                for depth in 0..self.mcfg.gnn.num_layers() {
                    for h in 0..self.mcfg.gnn.heads {
                        let prefix = format!("{}.head{h}", layer_prefix(m, depth));
                        let lam = crate::diffrgcn::lambda_full(&self.store, &prefix, depth)?;
                        let _ = writeln!(rows, "{epoch},{},{depth},{h},{lam}", m.short());
                    }
                }
            }
            self.files.append("lambda.csv", &rows)?;
        }
        Ok(())
    }

    fn eval_splits(&self, epoch: usize) -> Result<BTreeMap<&'static str, EvalMetrics>> {
        let mut out = BTreeMap::new();
        let splits: [(&'static str, &[DialogueRecord], bool); 3] = [
            ("train", &self.data.train, self.cfg.eval_train),
            ("valid", &self.data.valid, true),
            ("test", &self.data.test, true),
        ];
        let mut lines = String::new();
        for (name, recs, on) in splits {
            if !on || recs.is_empty() {
                continue;
            }
            let m = evaluate_records(&self.store, &self.mcfg, recs, self.cfg.batch_size)?;
            let line = MetricsLine {
                epoch,
                split: name.to_string(),
                metrics: m.clone(),
            };
            lines.push_str(&serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?);
            lines.push('\n');
            out.insert(name, m);
        }
        self.files.append("metrics.jsonl", &lines)?;
        if let (Some(v), Some(t)) = (out.get("valid"), out.get("test")) {
            log::info!(
                "epoch {epoch}: valid wa_f1 {:.4} test wa_acc {:.4} wa_f1 {:.4}",
                v.wa_f1,
                t.wa_acc,
                t.wa_f1
            );
        }
        Ok(out)
    }
}
