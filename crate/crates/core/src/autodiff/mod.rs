//! Dense tensors with reverse-mode differentiation.

pub mod edges;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use edges::EdgeList;
pub use gradcheck::{finite_diff_check, CheckStatus, GradCheckOptions, GradCheckReport, Objective, TapeObjective};
pub use params::{ParamGrads, ParamStore};
pub use tape::{CustomGrad, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

/// Record `spec` on `tape`; its backward is dispatched to `spec.backward`.
pub fn custom_grad_apply<T: Scalar>(
    tape: &mut Tape<T>,
    spec: Box<dyn CustomGrad<T>>,
    inputs: &[Var],
) -> crate::Result<Var> {
    tape.custom(spec, inputs)
}
