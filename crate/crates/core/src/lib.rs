//! Spatiotemporal sequence forecasting: ConvGRU and TrajGRU encoder-forecaster
//! networks, the MovingMNIST++ generator, radar codecs and denoising, skill
//! metrics and the offline/online streaming protocol.

pub mod cells;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod networks;
pub mod protocol;
pub mod suite;

pub use engine::{Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
