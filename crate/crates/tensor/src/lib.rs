//! Minimal differentiable tensor substrate: dense `f64` tensors, a
//! reverse-mode [`Tape`], the layers needed by the cross-view pipeline, and
//! the `CVT1` tensor file format.

pub mod error;
mod gemm;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{GradCheck, GradCheckResult};
pub use params::{xavier_uniform, ParamId, ParamStore};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{FeatureMap, Tensor};
