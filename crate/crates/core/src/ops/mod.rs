//! Differentiable operators. Each submodule holds the raw kernels and the
//! corresponding [`Tape`](crate::autodiff::Tape) method.

pub mod blur;
pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;

pub use blur::{default_radius, gaussian_blur_forward, gaussian_kernel};
pub use conv::{conv2d_forward, ConvGeom};
pub use elementwise::BinaryOp;
pub use loss::{per_image_mse, MSE_FLOOR};
pub use norm::{layer_norm2d_forward, LAYER_NORM_EPS};
pub use pool::{avg_pool_global_forward, avg_pool_local_forward, window_covers};
pub use shape::{
    pixel_shuffle_forward, pixel_unshuffle_forward, reflect_pad_forward, resize_half_area_forward,
};
