//! Causal speech enhancement in the short-time DCT domain with a jointly
//! trained voice activity detector.
//!
//! The network is generic over [`Scalar`] (`f32` or `f64`). Signal
//! processing runs in `f64`. The aliases below fix the precision for the
//! common cases: `f32` for inference and training, `f64` for verification.

pub mod attention;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod stream;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Stream32 = stream::StreamState<f32>;
pub type Stream64 = stream::StreamState<f64>;
