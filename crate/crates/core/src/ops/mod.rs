//! Differentiable primitives. Every forward function has an explicit
//! backward counterpart; [`crate::tape::Tape`] strings them together.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pad;
pub mod pool;

pub use activation::{relu, relu_backward, tanh_act, tanh_backward, Activation};
pub use batchnorm::{batchnorm, BatchNormState, Mode};
pub use conv::{conv2d, conv2d_backward, conv2d_same, grouped_conv, ConvKernel};
pub use linear::{linear, linear_backward};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use pad::{channel_pad, channel_pad_backward};
pub use pool::{global_max_pool, maxpool2x2, pool_backward, pooled_size};
