//! Neural-network layers, losses, initializers, and the optimizer.

pub mod adam;
pub mod conv;
pub mod init;
pub mod kernels;
pub mod linear;
pub mod loss;
pub mod lstm;
pub mod norm;
pub mod pool;

pub use adam::{adam_step, AdamSlot, AdamState};
pub use conv::{conv2d, deconv2d};
pub use init::{init_kaiming, init_orthogonal, init_xavier_normal, init_zeros};
pub use linear::linear;
pub use loss::{pixelwise_cross_entropy, softmax_cross_entropy, softmax_rows};
pub use lstm::{lstm_forward, lstm_step, LstmOutput, LstmWeights};
pub use norm::{batchnorm1d, batchnorm2d, BnMode, BnStatsUpdate};
pub use pool::maxpool2d;
