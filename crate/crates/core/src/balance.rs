//! Adaptive modality dropout.
//!
//! Per training batch: score each modality by its unimodal weighted F1,
//! turn relative scores into per-modality drop probabilities (stronger
//! modalities are dropped more often), and with probability `p_exe` zero
//! whole modalities per dialogue. Survivors are rescaled by `1 / (1 - θ)`
//! through an op whose gradient with respect to `θ` is blocked, and
//! dialogues that lost all three modalities are removed from the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGrad, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a class contributes to the modality score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassScore {
    /// Per-class F1.
    F1,
    /// `precision · recall`, the literal product form.
    PrecisionRecall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub q_base: f64,
    pub lambda_scale: f64,
    pub p_exe: f64,
    pub epsilon: f64,
    pub warmup_epochs: usize,
    pub enabled: bool,
    pub class_score: ClassScore,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            q_base: 0.3,
            lambda_scale: 0.9,
            p_exe: 0.5,
            epsilon: 1e-5,
            warmup_epochs: 60,
            enabled: true,
            class_score: ClassScore::F1,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q_base) {
            return Err(Error::Config(format!("q_base must lie in [0, 1], got {}", self.q_base)));
        }
        if !(0.0..=1.0).contains(&self.p_exe) {
            return Err(Error::Config(format!("p_exe must lie in [0, 1], got {}", self.p_exe)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

pub fn warmup_gate(epoch: usize, cfg: &BalanceConfig) -> bool {
    cfg.enabled && epoch >= cfg.warmup_epochs
}

/// Inverse-frequency weighted class score of `preds` against `labels`.
///
/// Classes absent from `labels` contribute nothing. Returns 0 (with a
/// warning) when there is nothing to score.
pub fn modality_f1(preds: &[usize], labels: &[usize], score: ClassScore) -> f64 {
    if labels.is_empty() {
        log::warn!("modality score requested on zero valid utterances; using 0");
        return 0.0;
    }
    let n_classes = preds.iter().chain(labels).max().map_or(0, |&c| c + 1);
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        pred_count[p] += 1;
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let n = labels.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for c in (0..n_classes).filter(|&c| support[c] > 0) {
        let w = n / support[c] as f64;
        let precision = if pred_count[c] > 0 { tp[c] as f64 / pred_count[c] as f64 } else { 0.0 };
        let recall = tp[c] as f64 / support[c] as f64;
        let s = match score {
            ClassScore::F1 if precision + recall > 0.0 => 2.0 * precision * recall / (precision + recall),
            ClassScore::F1 => 0.0,
            ClassScore::PrecisionRecall => precision * recall,
        };
        num += w * s;
        den += w;
    }
    num / den
}

/// Argmax predictions at valid positions of `[B, L, C]` logits, paired with targets.
pub fn flatten_valid<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>]) -> (Vec<usize>, Vec<usize>) {
    logits
        .argmax_last()
        .into_iter()
        .zip(targets)
        .filter_map(|(p, t)| t.map(|y| (p, y)))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutProbs {
    /// `r[m]` holds `r_{m,j}` for the other two modalities in index order.
    pub r: [[f64; 2]; 3],
    pub r_bar: [f64; 3],
    pub q: [f64; 3],
}

pub fn dropout_probabilities(p: [f64; 3], cfg: &BalanceConfig) -> DropoutProbs {
    let mut r = [[0.0; 2]; 3];
    let mut r_bar = [0.0; 3];
    let mut q = [0.0; 3];
    for m in 0..3 {
        let others = (0..3).filter(|&j| j != m);
        for (k, j) in others.enumerate() {
            r[m][k] = p[m] / (p[j] + cfg.epsilon) - 1.0;
        }
        let pos = r[m].map(|x| x.max(0.0));
        let top = pos[0].max(pos[1]);
        let e = pos.map(|x| (x - top).exp());
        let z = e[0] + e[1];
        r_bar[m] = (e[0] / z * r[m][0] + e[1] / z * r[m][1]) / 2.0;
        q[m] = (cfg.q_base * (1.0 + cfg.lambda_scale * r_bar[m])).clamp(0.0, 1.0);
    }
    DropoutProbs { r, r_bar, q }
}

/// `Σ d_m q_m / Σ d_m`.
pub fn theta(q: [f64; 3], dims: [usize; 3]) -> f64 {
    let total: usize = dims.iter().sum();
    q.iter().zip(dims).map(|(q, d)| q * d as f64).sum::<f64>() / total as f64
}

/// `x / (1 - θ)` with inputs `[x, θ]`; the gradient reaches `x` only.
pub struct ExpectationScale;

impl<T: Scalar> CustomGrad<T> for ExpectationScale {
    fn name(&self) -> &str {
        "expectation_scale"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [x, theta] = inputs else {
            return Err(Error::Internal("expectation_scale takes [x, theta]".into()));
        };
        if theta.numel() != 1 {
            return Err(Error::shape("expectation_scale", theta.shape(), &[]));
        }
        let k = T::one() / (T::one() - theta.data()[0]);
        Ok(x.map(|v| v * k))
    }

    fn backward(&self, upstream: &Tensor<T>, inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let k = T::one() / (T::one() - inputs[1].data()[0]);
        vec![Some(upstream.map(|g| g * k)), None]
    }
}

/// Zero modality features of dropped dialogues and rescale: `M ⊙ x / (1 - θ)`.
pub fn compensate<T: Scalar>(tape: &mut Tape<T>, x: Var, keep: &[bool], theta: Var) -> Result<Var> {
    let b = tape.shape(x)[0];
    if keep.len() != b {
        return Err(Error::shape("compensate", tape.shape(x), &[keep.len()]));
    }
    let m: Vec<T> = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
    let m = tape.constant(Tensor::from_vec(&[b, 1, 1], m));
    let masked = tape.mul(x, m)?;
    tape.custom(Box::new(ExpectationScale), &[masked, theta])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceState {
    pub p: [f64; 3],
    pub q: [f64; 3],
    pub r_bar: [f64; 3],
    pub theta: f64,
    /// `mask[b][m]` is true when modality `m` of dialogue `b` survived.
    pub mask: Vec<[bool; 3]>,
    /// Indices of dialogues kept in the batch.
    pub kept: Vec<usize>,
    pub applied: bool,
}

pub struct DropoutOutcome {
    pub features: [Var; 3],
    pub state: BalanceState,
}

/// Adaptive modality dropout on `[B, L, d]` features given modality scores `p`.
///
/// When the batch coin says no, or the draw is degenerate, the features come
/// back untouched with every dialogue kept and `applied == false`.
pub fn apply_modality_dropout<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    features: [Var; 3],
    p: [f64; 3],
    cfg: &BalanceConfig,
    rng: &mut R,
) -> Result<DropoutOutcome> {
    let probs = dropout_probabilities(p, cfg);
    let b = tape.shape(features[0])[0];
    let dims = features.map(|f| *tape.shape(f).last().expect("rank 3"));
    let th = theta(probs.q, dims);
    let mut state = BalanceState {
        p,
        q: probs.q,
        r_bar: probs.r_bar,
        theta: th,
        mask: vec![[true; 3]; b],
        kept: (0..b).collect(),
        applied: false,
    };
    let untouched = |state| Ok(DropoutOutcome { features, state });
    if rng.random::<f64>() >= cfg.p_exe {
        return untouched(state);
    }
    if th >= 1.0 {
        log::warn!("modality dropout skipped: every modality has drop probability 1");
        return untouched(state);
    }
    let mask: Vec<[bool; 3]> = (0..b)
        .map(|_| probs.q.map(|q| rng.random::<f64>() < 1.0 - q))
        .collect();
    let kept: Vec<usize> = (0..b).filter(|&i| mask[i].iter().any(|&k| k)).collect();
    if kept.is_empty() {
        log::warn!("modality dropout skipped: no dialogue kept any modality");
        return untouched(state);
    }
    let theta_var = tape.constant(Tensor::scalar(T::of(th)));
    let mut out = features;
    for m in 0..3 {
        let keep: Vec<bool> = mask.iter().map(|k| k[m]).collect();
        let scaled = compensate(tape, features[m], &keep, theta_var)?;
        out[m] = if kept.len() == b { scaled } else { tape.index_select(scaled, &kept)? };
    }
    state.mask = mask;
    state.kept = kept;
    state.applied = true;
    Ok(DropoutOutcome { features: out, state })
}
