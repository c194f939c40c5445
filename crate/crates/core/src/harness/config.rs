//! Run configuration: flat `key = value` text plus overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::balance::{BalanceConfig, ClassScore};
use crate::error::{Error, Result};
use crate::model::GraphMode;
use crate::rng::fnv1a;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// The four nested ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Balancing off.
    WithoutMd,
    /// Relation-blind graph attention instead of the differential one.
    WithoutDiffRgcn,
    /// No subgraphs and no graph module.
    NoGraph,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::WithoutMd, Ablation::WithoutDiffRgcn, Ablation::NoGraph];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "w/o-md" | "no-md" => Ok(Ablation::WithoutMd),
            "w/o-diffrgcn" | "no-diffrgcn" => Ok(Ablation::WithoutDiffRgcn),
            "no-graph" => Ok(Ablation::NoGraph),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (full, w/o-md, w/o-diffrgcn, no-graph)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutMd => "w/o-md",
            Ablation::WithoutDiffRgcn => "w/o-diffrgcn",
            Ablation::NoGraph => "no-graph",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// One dialogue file split into train/valid/test.
    pub data: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub n_speakers: Option<usize>,
    pub classes: Option<usize>,

    pub hidden: usize,
    pub enc_heads: usize,
    pub ffn_dim: Option<usize>,
    pub text_transformer: bool,
    pub graph_mode: GraphMode,
    pub heads: usize,
    pub rel_dim: usize,
    pub lambda_dim: Option<usize>,
    pub pairs: usize,
    pub window: usize,
    pub gnn_dropout: f64,
    pub head_dropout: f64,
    pub alpha_squared: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub balance: BalanceConfig,

    pub seed: u64,
    pub precision: Precision,
    pub eval_train: bool,
    pub noise_grid: Vec<f64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            train_data: None,
            valid_data: None,
            test_data: None,
            synth: None,
            train_frac: 0.7,
            valid_frac: 0.1,
            n_speakers: None,
            classes: None,
            hidden: 512,
            enc_heads: 4,
            ffn_dim: None,
            text_transformer: true,
            graph_mode: GraphMode::DiffRgcn,
            heads: 4,
            rel_dim: 8,
            lambda_dim: None,
            pairs: 1,
            window: 5,
            gnn_dropout: 0.1,
            head_dropout: 0.1,
            alpha_squared: false,
            lr: 6.8e-5,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 100,
            balance: BalanceConfig::default(),
            seed: 0,
            precision: Precision::F32,
            eval_train: true,
            noise_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7],
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let xs = parse_list(key, v)?;
    match xs[..] {
        [x] => Ok([x; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!("`{key}`: expected 1 or 3 comma-separated values"))),
    }
}

fn path_opt(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or("auto".into(), T::to_string)
}

fn show_path(x: &Option<PathBuf>) -> String {
    x.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Set one key. Keys under `synth.` edit the synthetic generator and
    /// create it from the defaults if needed.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        if let Some(sk) = key.strip_prefix("synth.") {
            let s = self.synth.get_or_insert_with(SynthConfig::default);
            match sk {
                "dialogues" | "n_dialogues" => s.n_dialogues = parse(key, v)?,
                "len_min" => s.len_min = parse(key, v)?,
                "len_max" => s.len_max = parse(key, v)?,
                "speakers" | "n_speakers" => s.n_speakers = parse(key, v)?,
                "classes" => s.classes = parse(key, v)?,
                "prior" => s.prior = if v == "uniform" { Vec::new() } else { parse_list(key, v)? },
                "rho" => s.rho = parse_triple(key, v)?,
                "kappa" => s.kappa = parse(key, v)?,
                "gamma" => s.gamma = parse(key, v)?,
                "sigma" => s.sigma = parse_triple(key, v)?,
                "switch_prob" => s.switch_prob = parse(key, v)?,
                "seed" => s.seed = parse(key, v)?,
                "dims" => {
                    let d = parse_list(key, v)?;
                    let [t, vv, a] = d[..] else {
                        return Err(Error::Config(format!("`{key}`: expected three widths")));
                    };
                    s.dims = crate::data::FeatureDims {
                        text: t as usize,
                        visual: vv as usize,
                        audio: a as usize,
                    };
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "synth" => {
                self.synth = match v {
                    "none" => None,
                    "default" => Some(SynthConfig::default()),
                    preset => Some(SynthConfig::preset(preset)?),
                }
            }
            "data" => self.data = path_opt(v),
            "train_data" => self.train_data = path_opt(v),
            "valid_data" => self.valid_data = path_opt(v),
            "test_data" => self.test_data = path_opt(v),
            "train_frac" => self.train_frac = parse(key, v)?,
            "valid_frac" => self.valid_frac = parse(key, v)?,
            "n_speakers" => self.n_speakers = parse_opt(key, v)?,
            "classes" => self.classes = parse_opt(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "enc_heads" => self.enc_heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_opt(key, v)?,
            "text_transformer" => self.text_transformer = parse_bool(key, v)?,
            "graph" => self.graph_mode = GraphMode::parse(v)?,
            "heads" => self.heads = parse(key, v)?,
            "rel_dim" => self.rel_dim = parse(key, v)?,
            "lambda_dim" => self.lambda_dim = parse_opt(key, v)?,
            "pairs" => self.pairs = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "gnn_dropout" => self.gnn_dropout = parse(key, v)?,
            "head_dropout" => self.head_dropout = parse(key, v)?,
            "alpha_squared" => self.alpha_squared = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "balance" => self.balance.enabled = parse_bool(key, v)?,
            "q_base" => self.balance.q_base = parse(key, v)?,
            "lambda_scale" => self.balance.lambda_scale = parse(key, v)?,
            "p_exe" => self.balance.p_exe = parse(key, v)?,
            "epsilon" => self.balance.epsilon = parse(key, v)?,
            "warmup" => self.balance.warmup_epochs = parse(key, v)?,
            "class_score" => {
                self.balance.class_score = match v {
                    "f1" => ClassScore::F1,
                    "precision-recall" => ClassScore::PrecisionRecall,
                    _ => return Err(Error::Config(format!("`{key}`: expected f1 or precision-recall"))),
                }
            }
            "ablate" => self.apply_ablation(Ablation::parse(v)?),
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("`{key}`: expected f32 or f64"))),
                }
            }
            "eval_train" => self.eval_train = parse_bool(key, v)?,
            "noise_grid" => self.noise_grid = parse_list(key, v)?,
            "out_dir" => self.out_dir = path_opt(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        let (mode, balance) = match a {
            Ablation::Full => (GraphMode::DiffRgcn, true),
            Ablation::WithoutMd => (GraphMode::DiffRgcn, false),
            Ablation::WithoutDiffRgcn => (GraphMode::PlainGat, true),
            Ablation::NoGraph => (GraphMode::NoGraph, true),
        };
        self.graph_mode = mode;
        self.balance.enabled = balance;
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", show_path(&self.data));
        kv("train_data", show_path(&self.train_data));
        kv("valid_data", show_path(&self.valid_data));
        kv("test_data", show_path(&self.test_data));
        match &self.synth {
            None => kv("synth", "none".into()),
            Some(sc) => {
                kv("synth", "default".into());
                kv("synth.dialogues", sc.n_dialogues.to_string());
                kv("synth.len_min", sc.len_min.to_string());
                kv("synth.len_max", sc.len_max.to_string());
                kv("synth.speakers", sc.n_speakers.to_string());
                kv("synth.classes", sc.classes.to_string());
                kv("synth.prior", if sc.prior.is_empty() { "uniform".into() } else { join(&sc.prior) });
                kv("synth.rho", join(&sc.rho));
                kv("synth.kappa", sc.kappa.to_string());
                kv("synth.gamma", sc.gamma.to_string());
                kv("synth.sigma", join(&sc.sigma));
                kv("synth.switch_prob", sc.switch_prob.to_string());
                kv("synth.dims", format!("{},{},{}", sc.dims.text, sc.dims.visual, sc.dims.audio));
                kv("synth.seed", sc.seed.to_string());
            }
        }
        kv("train_frac", self.train_frac.to_string());
        kv("valid_frac", self.valid_frac.to_string());
        kv("n_speakers", show_opt(&self.n_speakers));
        kv("classes", show_opt(&self.classes));
        kv("hidden", self.hidden.to_string());
        kv("enc_heads", self.enc_heads.to_string());
        kv("ffn_dim", show_opt(&self.ffn_dim));
        kv("text_transformer", self.text_transformer.to_string());
        kv("graph", self.graph_mode.name().into());
        kv("heads", self.heads.to_string());
        kv("rel_dim", self.rel_dim.to_string());
        kv("lambda_dim", show_opt(&self.lambda_dim));
        kv("pairs", self.pairs.to_string());
        kv("window", self.window.to_string());
        kv("gnn_dropout", self.gnn_dropout.to_string());
        kv("head_dropout", self.head_dropout.to_string());
        kv("alpha_squared", self.alpha_squared.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("balance", self.balance.enabled.to_string());
        kv("q_base", self.balance.q_base.to_string());
        kv("lambda_scale", self.balance.lambda_scale.to_string());
        kv("p_exe", self.balance.p_exe.to_string());
        kv("epsilon", self.balance.epsilon.to_string());
        kv("warmup", self.balance.warmup_epochs.to_string());
        kv(
            "class_score",
            match self.balance.class_score {
                ClassScore::F1 => "f1".into(),
                ClassScore::PrecisionRecall => "precision-recall".into(),
            },
        );
        kv("seed", self.seed.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        );
        kv("eval_train", self.eval_train.to_string());
        kv("noise_grid", join(&self.noise_grid));
        kv("out_dir", show_path(&self.out_dir));
        s
    }

    /// Hash of everything that affects the training trajectory except its
    /// length and where it is written.
    pub fn trajectory_hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("epochs ") && !l.starts_with("out_dir ") && !l.starts_with("noise_grid "))
            .map(|l| format!("{l}\n"))
            .collect();
        format!("{:016x}", fnv1a(&text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train_frac) || self.train_frac + self.valid_frac >= 1.0 || self.valid_frac < 0.0 {
            return Err(Error::Config("train_frac + valid_frac must leave room for a test split".into()));
        }
        self.balance.validate()
    }
}
