//! Minimal deterministic reverse-mode automatic differentiation.

pub mod kernels;
mod optim;
mod param;
mod tape;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use param::{Param, ParamId, ParamRole, ParamStore};
pub use tape::{BatchNormState, Conv2dParams, Grads, Tape, Var};
pub(crate) use tape::{smooth_max_weights, softmax_in_place};
