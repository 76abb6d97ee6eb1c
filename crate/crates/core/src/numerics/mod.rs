//! Dense tensors, tape-based reverse-mode gradients, perceptrons and Adam.

mod adam;
mod gradcheck;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP};
pub use mlp::{mlp_forward, Activation, Linear, MlpSpec};
pub use params::{Gradients, Param, ParamSet};
pub use tape::{sigmoid, silu, Bound, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::center_rows;
