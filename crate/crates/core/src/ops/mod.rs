//! Neural primitives shared by every layer: 1×1 projection, softmax, ReLU,
//! batch normalization, grid average pooling, channel concatenation, the
//! bilinear sampler and the pixel-wise cross-entropy loss.

mod activation;
mod batchnorm;
mod concat;
mod loss;
mod pool;
mod projection;
mod sampling;
mod softmax;

pub use activation::relu;
pub use batchnorm::{batch_norm, BatchNormParams, BatchStats, BoundBatchNorm};
pub use concat::concat_channels;
pub use loss::softmax_cross_entropy;
pub use pool::avg_pool_grid;
pub use projection::{project_1x1, BoundProjection, Projection1x1};
pub use sampling::bilinear_sample;
pub(crate) use sampling::taps;
pub(crate) use softmax::softmax_in_place;
pub use softmax::softmax_rows;
