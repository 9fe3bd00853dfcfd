//! Image-to-image rectified flow reformulation.
//!
//! A plain image-to-image regressor is fed `[x; y_t]`, the condition stacked
//! with a noise-corrupted target `y_t = (1 - t) y + t eps`, and trained with the
//! `t`-reweighted pixel loss `|y - f| / t`. Inference integrates the induced
//! velocity `(y_t - f) / t` from pure noise with a few explicit Euler steps.

// `!(a > b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod error;
pub mod experiment;
pub mod flowcore;
pub mod metrics;
pub mod pngio;
pub mod sampler;
pub mod stats;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, Real, Shape};
