//! Generative attention for sequential recommendation.
//!
//! Attention matrices are sampled from a VAE or produced by a reverse
//! diffusion chain, conditioned on a recurrent summary of the user's
//! history, instead of being computed from query/key projections.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pick the common instantiations.

pub mod attention;
pub mod bench;
pub mod checks;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
