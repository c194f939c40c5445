//! Utterance-level encoder: per-modality projection, positional and speaker
//! signals, and one transformer layer per modality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::data::{DialogueBatch, FeatureDims, Modality};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dims: FeatureDims,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_speakers: usize,
    /// Run the text modality through its own transformer (with positional and
    /// speaker signals) like audio and visual. Off: text is the bare projection.
    pub text_transformer: bool,
    pub ln_eps: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % 2 != 0 {
            return Err(Error::Config(format!("hidden size {} must be even for sinusoidal positions", self.hidden)));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} encoder heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    fn contextualized(&self, m: Modality) -> bool {
        m != Modality::Text || self.text_transformer
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) {
    let d = cfg.hidden;
    for m in Modality::ALL {
        let p = format!("enc.{}", m.short());
        nn::init_linear(store, &format!("{p}.proj"), cfg.dims.get(m), d, true, rng);
        if cfg.contextualized(m) {
            for name in ["q", "k", "v"] {
                nn::init_linear(store, &format!("{p}.tf.{name}"), d, d, false, rng);
            }
            nn::init_layer_norm(store, &format!("{p}.tf.ln"), d);
            nn::init_linear(store, &format!("{p}.tf.ffn1"), d, cfg.ffn_dim, true, rng);
            nn::init_linear(store, &format!("{p}.tf.ffn2"), cfg.ffn_dim, d, true, rng);
        }
    }
    // row n_speakers is the padding id
    store.insert("enc.speaker", Tensor::randn(&[cfg.n_speakers + 1, d], 1.0, rng));
}

/// Sinusoidal table `[len, dim]`: sin on even dims, cos on odd dims.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {dim}")));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let j2 = (i - i % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(j2 / dim as f64);
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Ok(Tensor::from_vec(&[len, dim], data))
}

/// `x = f · W + b` for one modality, with padded rows re-zeroed.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: Modality,
    features: &Tensor<T>,
    mask: &[bool],
) -> Result<Var> {
    let w = store.get(&format!("enc.{}.proj.w", m.short()))?;
    let want = w.shape()[0];
    let got = *features.shape().last().unwrap_or(&0);
    if got != want {
        return Err(Error::Config(format!(
            "{m:?} features have width {got}, encoder expects {want}"
        )));
    }
    let f = tape.constant(features.clone());
    let x = nn::linear(tape, store, &format!("enc.{}.proj", m.short()), f)?;
    nn::apply_row_mask(tape, x, mask)
}

pub fn project_modalities<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    batch: &DialogueBatch<T>,
) -> Result<[Var; 3]> {
    let t = project(tape, store, Modality::Text, &batch.text, &batch.mask)?;
    let v = project(tape, store, Modality::Visual, &batch.visual, &batch.mask)?;
    let a = project(tape, store, Modality::Audio, &batch.audio, &batch.mask)?;
    Ok([t, v, a])
}

/// `x + PE(i) + E_s[speaker_i]`, padded rows zeroed.
pub fn add_context_signals<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    speakers: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let pe = tape.constant(positional_encoding(l, d)?);
    let table = tape.param(store, "enc.speaker")?;
    let spk = tape.gather(table, speakers, &[b, l])?;
    let y = tape.add(x, pe)?;
    let y = tape.add(y, spk)?;
    nn::apply_row_mask(tape, y, mask)
}

/// Single-layer multi-head self-attention with key padding mask followed by
/// the position-wise FFN `W2 · GELU(W1 · LN(x)) + x`.
///
/// Returns the contextualized features and the attention weights `[B, h, L, L]`.
pub fn transformer_encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    mask: &[bool],
    heads: usize,
    ln_eps: f64,
) -> Result<(Var, Tensor<T>)> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let dk = d / heads;
    let split = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let w = tape.param(store, &format!("{prefix}.{name}.w"))?;
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[b, l, heads, dk])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::of(1.0 / (dk as f64).sqrt()));
    let mut att_mask = Vec::with_capacity(b * heads * l * l);
    for bi in 0..b {
        let valid = &mask[bi * l..(bi + 1) * l];
        for _ in 0..heads {
            for i in 0..l {
                att_mask.extend((0..l).map(|j| valid[i] && valid[j]));
            }
        }
    }
    let attn = tape.softmax_masked(scores, &att_mask)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, l, d])?;
    let h = tape.add(x, ctx)?;

    let n = nn::layer_norm(tape, store, &format!("{prefix}.ln"), h, ln_eps)?;
    let f = nn::linear(tape, store, &format!("{prefix}.ffn1"), n)?;
    let f = tape.gelu(f);
    let f = nn::linear(tape, store, &format!("{prefix}.ffn2"), f)?;
    let out = tape.add(f, h)?;
    let out = nn::apply_row_mask(tape, out, mask)?;
    Ok((out, tape.value(attn).clone()))
}

pub struct EncoderOutput<T> {
    /// Contextualized `[B, L, d_h]` features per modality (t, v, a).
    pub features: [Var; 3],
    /// Self-attention weights per modality; `None` for an uncontextualized text path.
    pub attention: [Option<Tensor<T>>; 3],
}

pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    batch: &DialogueBatch<T>,
) -> Result<EncoderOutput<T>> {
    let projected = project_modalities(tape, store, batch)?;
    let mut features = projected;
    let mut attention = [None, None, None];
    for m in Modality::ALL {
        if !cfg.contextualized(m) {
            continue;
        }
        let x = add_context_signals(tape, store, projected[m.index()], &batch.speakers, &batch.mask)?;
        let (y, a) = transformer_encode(
            tape,
            store,
            &format!("enc.{}.tf", m.short()),
            x,
            &batch.mask,
            cfg.heads,
            cfg.ln_eps,
        )?;
        features[m.index()] = y;
        attention[m.index()] = Some(a);
    }
    Ok(EncoderOutput { features, attention })
}
