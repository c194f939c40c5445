//! Per-modality classification heads, logit-sum fusion and the weighted loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Var};
use crate::data::Modality;
use crate::error::Result;
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub dropout: f64,
    /// Differentiate through `α_m = L_m / 10`, i.e. add `L_m² / 10`.
    pub alpha_squared: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            classes: 6,
            dropout: 0.1,
            alpha_squared: false,
        }
    }
}

pub fn head_prefix(m: Modality) -> String {
    format!("cls.{}", m.short())
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &ClassifierConfig, hidden: usize, store: &mut ParamStore<T>, rng: &mut R) {
    for m in Modality::ALL {
        nn::init_linear(store, &head_prefix(m), hidden, cfg.classes, true, rng);
    }
}

/// `Dropout(ReLU(g W + b))` for one modality; `[B, L, d_h] → [B, L, C]`.
pub fn modality_logits<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: Modality,
    g: Var,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let z = nn::linear(tape, store, &head_prefix(m), g)?;
    let z = tape.relu(z);
    Ok(nn::dropout(tape, z, dropout, rng))
}

pub struct Fused {
    /// `O = t + v + a`.
    pub logits: Var,
    pub log_probs: Var,
}

pub fn fuse<T: Scalar>(tape: &mut Tape<T>, logits: [Var; 3]) -> Result<Fused> {
    let tv = tape.add(logits[0], logits[1])?;
    let o = tape.add(tv, logits[2])?;
    let log_probs = tape.log_softmax(o);
    Ok(Fused { logits: o, log_probs })
}

/// Mean negative log-likelihood over positions with a target.
pub fn masked_cross_entropy<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.masked_nll(log_probs, targets)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fusion: f64,
    /// Unimodal losses in t, v, a order.
    pub unimodal: [f64; 3],
    pub alpha: [f64; 3],
    pub total: f64,
}

/// `L_fusion + Σ_m α_m L_m` with `α_m = L_m / 10` held constant.
///
/// `alpha_override` fixes `α` to given values (for gradient checks).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fused_log_probs: Var,
    modality_log_probs: [Var; 3],
    targets: &[Option<usize>],
    cfg: &ClassifierConfig,
    alpha_override: Option<[f64; 3]>,
) -> Result<(Var, LossBreakdown)> {
    let lf = masked_cross_entropy(tape, fused_log_probs, targets)?;
    let mut total = lf;
    let mut bd = LossBreakdown {
        fusion: tape.value(lf).item().f64(),
        ..Default::default()
    };
    for (i, &lp) in modality_log_probs.iter().enumerate() {
        let lm = masked_cross_entropy(tape, lp, targets)?;
        let lv = tape.value(lm).item().f64();
        let alpha = alpha_override.map_or(lv / 10.0, |a| a[i]);
        let term = if cfg.alpha_squared && alpha_override.is_none() {
            let sq = tape.mul(lm, lm)?;
            tape.scale(sq, T::of(0.1))
        } else {
            tape.scale(lm, T::of(alpha))
        };
        total = tape.add(total, term)?;
        bd.unimodal[i] = lv;
        bd.alpha[i] = alpha;
    }
    bd.total = tape.value(total).item().f64();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckOptions, TapeObjective, Tensor};
    use crate::rng::{self, StreamRng};

    #[test]
    fn constant_logits_from_zero_weights() {
        let mut s = ParamStore::<f64>::new();
        s.insert("cls.t.w", Tensor::zeros(&[3, 4]));
        s.insert("cls.t.b", Tensor::from_f64(&[4], &[0.5, 1.0, 0.0, 2.0]));
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::randn(&[2, 3, 3], 1.0, &mut rng::stream(0, "x", 0)));
        let z = modality_logits::<f64, StreamRng>(&mut tape, &s, Modality::Text, g, 0.0, None).unwrap();
        assert_eq!(tape.shape(z), &[2, 3, 4]);
        for row in tape.value(z).data().chunks(4) {
            assert_eq!(row, &[0.5, 1.0, 0.0, 2.0]);
        }
    }

    #[test]
    fn hand_weights_affine_relu() {
        let mut s = ParamStore::<f64>::new();
        s.insert("cls.a.w", Tensor::from_f64(&[2, 3], &[1.0, -1.0, 0.5, 2.0, 0.0, -3.0]));
        s.insert("cls.a.b", Tensor::from_f64(&[3], &[0.0, 0.1, 0.2]));
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 2.0]));
        let z = modality_logits::<f64, StreamRng>(&mut tape, &s, Modality::Audio, g, 0.0, None).unwrap();
        // [1 + 4, -1 + 0 + 0.1, 0.5 - 6 + 0.2] → relu
        assert_eq!(tape.value(z).data(), &[5.0, 0.0, 0.0]);
    }

    #[test]
    fn fusion_properties() {
        let mut r = rng::stream(1, "x", 0);
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::randn(&[2, 3, 6], 1.0, &mut r));
        let v = tape.constant(Tensor::randn(&[2, 3, 6], 1.0, &mut r));
        let a = tape.constant(Tensor::randn(&[2, 3, 6], 1.0, &mut r));
        let zero = tape.constant(Tensor::zeros(&[2, 3, 6]));
        let text_only = fuse(&mut tape, [t, zero, zero]).unwrap();
        assert_eq!(tape.value(text_only.logits).argmax_last(), tape.value(t).argmax_last());

        let f1 = fuse(&mut tape, [t, v, a]).unwrap();
        let f2 = fuse(&mut tape, [a, t, v]).unwrap();
        let (p1, p2) = (tape.value(f1.logits).argmax_last(), tape.value(f2.logits).argmax_last());
        assert_eq!(p1, p2);
        assert!(tape.value(f1.log_probs).max_abs_diff(tape.value(f2.log_probs)) < 1e-12);

        let shifted = tape.shift(v, 3.7);
        let f3 = fuse(&mut tape, [t, shifted, a]).unwrap();
        assert_eq!(tape.value(f3.logits).argmax_last(), p1);

        let probs = tape.exp(f1.log_probs);
        for row in tape.value(probs).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 2, 6]));
        let lp = tape.log_softmax(z);
        let l = masked_cross_entropy(&mut tape, lp, &[Some(0), Some(5)]).unwrap();
        assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);

        let z = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, 60.0, 0.0]));
        let lp = tape.log_softmax(z);
        let l = masked_cross_entropy(&mut tape, lp, &[Some(1)]).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        let z = tape.constant(Tensor::from_f64(&[1, 2, 2], &[0.3, -0.2, 1.0, 4.0]));
        let lp = tape.log_softmax(z);
        let base = masked_cross_entropy(&mut tape, lp, &[Some(1), Some(0)]).unwrap();
        let base = tape.value(base).item();
        let z2 = tape.constant(Tensor::from_f64(&[1, 4, 2], &[0.3, -0.2, 1.0, 4.0, 99.0, -5.0, 7.0, 7.0]));
        let lp2 = tape.log_softmax(z2);
        let padded = masked_cross_entropy(&mut tape, lp2, &[Some(1), Some(0), None, None]).unwrap();
        let padded = tape.value(padded).item();
        assert_eq!(base.to_bits(), padded.to_bits());

        assert!(masked_cross_entropy(&mut tape, lp, &[None, None]).is_err());
    }

    #[test]
    fn total_loss_with_equal_unimodal_losses() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 6]));
        let lp = tape.log_softmax(z);
        let fz = tape.constant(Tensor::from_f64(&[1, 3, 6], &[1.0; 18]));
        let flp = tape.log_softmax(fz);
        let targets = [Some(0), Some(2), Some(4)];
        let (_, bd) = total_loss(&mut tape, flp, [lp, lp, lp], &targets, &ClassifierConfig::default(), None).unwrap();
        let ell = 6f64.ln();
        assert!((bd.alpha[0] - 0.17918).abs() < 1e-5);
        assert!((bd.total - (bd.fusion + 3.0 * ell * ell / 10.0)).abs() < 1e-12);
        let sum = bd.fusion + (0..3).map(|i| bd.alpha[i] * bd.unimodal[i]).sum::<f64>();
        assert!((bd.total - sum).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_with_alpha_held() {
        let c = ClassifierConfig {
            classes: 3,
            dropout: 0.0,
            alpha_squared: false,
        };
        let mut s = ParamStore::<f64>::new();
        init_params(&c, 4, &mut s, &mut rng::stream(2, "init", 0));
        let gs: Vec<Tensor<f64>> = (0..3).map(|i| Tensor::randn(&[1, 3, 4], 1.0, &mut rng::stream(2, "g", i))).collect();
        let targets = [Some(0), None, Some(2)];
        let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>, alpha: Option<[f64; 3]>| -> Result<(Var, LossBreakdown)> {
            let mut logits = Vec::new();
            for m in Modality::ALL {
                let g = tape.constant(gs[m.index()].clone());
                logits.push(modality_logits::<f64, StreamRng>(tape, s, m, g, 0.0, None)?);
            }
            let logits = [logits[0], logits[1], logits[2]];
            let fused = fuse(tape, logits)?;
            let lps = logits.map(|l| tape.log_softmax(l));
            total_loss(tape, fused.log_probs, lps, &targets, &c, alpha)
        };
        let mut tape = Tape::new();
        let (_, bd) = build(&mut tape, &s, None).unwrap();
        let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| Ok(build(tape, s, Some(bd.alpha))?.0));
        let report = finite_diff_check(&mut obj, &s, &GradCheckOptions { tol: 1e-3, ..Default::default() }).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn squared_alpha_variant() {
        let c = ClassifierConfig {
            alpha_squared: true,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let z = tape.var(Tensor::randn(&[1, 2, 6], 1.0, &mut rng::stream(3, "z", 0)));
        let lp = tape.log_softmax(z);
        let (loss, bd) = total_loss(&mut tape, lp, [lp, lp, lp], &[Some(1), Some(3)], &c, None).unwrap();
        let l = bd.fusion;
        assert!((bd.total - (l + 3.0 * l * l / 10.0)).abs() < 1e-12);
        let g = tape.backward(loss).unwrap().get(z).unwrap().clone();

        let mut t2 = Tape::<f64>::new();
        let z2 = t2.var(tape.value(z).clone());
        let lp2 = t2.log_softmax(z2);
        let l2 = masked_cross_entropy(&mut t2, lp2, &[Some(1), Some(3)]).unwrap();
        let g2 = t2.backward(l2).unwrap().get(z2).unwrap().clone();
        // d/dz (L + 0.3 L²) = (1 + 0.6 L) dL/dz
        for (a, b) in g.data().iter().zip(g2.data()) {
            assert!((a - (1.0 + 0.6 * l) * b).abs() < 1e-12);
        }
    }
}
