//! Minimal differentiable numeric kernel.

pub mod checkpoint;
pub mod gradcheck;
pub mod hungarian;
pub mod loss;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use hungarian::{assignment_cost, hungarian};
pub use loss::{cross_entropy, focal_loss, giou, l1_loss, FocalParams, LossWeights};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, sigmoid, Axis, Tensor};
