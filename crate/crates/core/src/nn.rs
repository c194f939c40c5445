//! Small layer helpers shared by the model components.

use rand::Rng;

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Uniform `±1/sqrt(fan_in)` weight of shape `[fan_in, fan_out]`.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::uniform(&[fan_out], bound, rng));
    }
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

/// `x · W (+ b)` using parameters `{prefix}.w` / `{prefix}.b`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    let bname = format!("{prefix}.b");
    if store.contains(&bname) {
        let b = tape.param(store, &bname)?;
        tape.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gain"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, T::of(eps))
}

/// Inverted dropout; identity when `rng` is `None` or `rate == 0`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    let shape = tape.shape(x).to_vec();
    let mask: Vec<T> = (0..tape.value(x).numel())
        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let m = tape.constant(Tensor::from_vec(&shape, mask));
    tape.mul(x, m).expect("mask has the input's shape")
}

/// Multiply `[B, L, d]` features by a `[B, L]` validity mask.
pub fn apply_row_mask<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let m: Vec<T> = mask.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    let m = tape.constant(Tensor::from_vec(&[s[0], s[1], 1], m));
    tape.mul(x, m)
}
