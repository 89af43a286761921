//! Simultaneous segmentation and recognition of ego hand gestures at desk
//! scale: a from-scratch tensor/autograd substrate, the encoder-decoder /
//! embedding / LSTM architecture built on it, a synthetic data pipeline,
//! the three-stage training procedure, and evaluation tooling.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, SsarModel};
pub use tensor::{Dtype, Scalar, Tensor};
