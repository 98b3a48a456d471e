//! A single shared convolution applied recurrently, interleaved with
//! per-iteration batch normalization and scheduled max pooling, followed
//! by global max pooling and a linear classifier.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod macs;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod planner;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ConvMode, DownsampleSchedule, Params, ThriftyConfig};
pub use scalar::Scalar;
pub use tensor::{Dims, Tensor4};
