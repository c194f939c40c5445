//! Multimodal conversational emotion recognition with differential
//! relational graph attention and adaptive modality balancing.
//!
//! The pipeline per batch of dialogues:
//!
//! 1. [`encoder`]: project text / visual / audio features to a shared width,
//!    add positional and speaker signals, contextualize with one transformer layer.
//! 2. [`graph`]: build intra-speaker and inter-speaker relational adjacency.
//! 3. [`diffrgcn`]: differential graph attention over the inter- then intra-speaker graph.
//! 4. [`balance`]: adaptive modality dropout driven by per-modality F1 (training only).
//! 5. [`classifier`]: per-modality heads, logit-sum fusion, masked cross-entropy.
//!
//! Everything is differentiated by the small engine in [`autodiff`].

pub mod autodiff;
pub mod balance;
pub mod classifier;
pub mod data;
pub mod diffrgcn;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;

pub use autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
