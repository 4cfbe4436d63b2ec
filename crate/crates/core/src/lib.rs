//! Multi-scale color-attention restoration network for removing photo
//! filters, together with the CPU tensor engine it runs on.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`autodiff`], [`ops`], [`gradcheck`]: dense tensors, a
//!   reverse-mode tape and the differentiable operator set.
//! - [`nn`], [`color`], [`model`]: gated blocks, the color attention module and
//!   the full encoder-decoder.
//! - [`train`], [`inference`], [`metrics`]: optimization, test-time
//!   strategies and quality metrics.
//! - [`data`], [`weights`], [`config`]: synthetic filter corpus, image files,
//!   the weights container and the run configuration format.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod color;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{CairConfig, CairNet, ForwardOptions, Network, Variant};
pub use nn::{Ctx, PoolMode};
pub use params::{Binding, ParamBuilder, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
