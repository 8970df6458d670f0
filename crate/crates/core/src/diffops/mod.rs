//! Differentiable primitives over `[C, D, H, W]` feature maps, a recording
//! tape for reverse-mode gradients, parameter storage, and a
//! finite-difference gradient checker.

pub mod conv;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Graph, Init, ParameterStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

/// Numeric precision for a run. Gradient checks always use `F64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
