//! Reverse-mode differentiable tensor engine.

pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;
mod params;
mod scalar;
pub mod serialize;
mod tape;
mod tensor;

pub use ops::{BatchMoments, Conv2dGeometry};
pub use params::{global_norm, GradStore, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Role, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::nchw_of;
