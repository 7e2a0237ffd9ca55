//! Layer primitives and the optimizer.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod gemm;

pub use activation::{leaky_relu, sigmoid, sigmoid_scalar, LEAKY_SLOPE};
pub use adam::Adam;
pub(crate) use batchnorm::count_per_channel;
pub use batchnorm::{batch_norm_eval, batch_norm_train, BatchNorm, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use conv::{conv2d, transp_conv2d, ConvGeometry, Padding};
