//! Dense `f64` tensors with tape-based reverse-mode differentiation, span
//! pooling, classification/regression losses, Adam, and a finite-difference
//! gradient checker.

mod adam;
mod error;
mod gradcheck;
mod linalg;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{
    grad_check, grad_check_at, grad_check_branches, relative_error, GradCheckConfig,
    GradCheckReport,
};
pub use params::{Binding, ParamSet};
pub use tape::{softmax_row, AdjointFault, Gradients, OpKind, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
