//! Dense tensors, a reverse-mode tape, and the layers built on top of it.

mod gradcheck;
pub mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{attention, matmul, rmsnorm, softmax, Tensor};
