//! Draft-conditioned latent refinement for non-autoregressive generation.
//! Everything is generic over [`numerics::Scalar`]; training runs in f32 and
//! finite-difference checks in f64.

pub mod alignment;
pub mod autoencoder;
pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod draftprior;
pub mod error;
pub mod flowfield;
pub mod layers;
pub mod metric;
pub mod numerics;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Autoencoder32 = autoencoder::Autoencoder<f32>;
pub type Autoencoder64 = autoencoder::Autoencoder<f64>;
pub type DraftPrior32 = draftprior::DraftPrior<f32>;
pub type DraftPrior64 = draftprior::DraftPrior<f64>;
pub type Stage2Model32 = flowfield::Stage2Model<f32>;
pub type Stage2Model64 = flowfield::Stage2Model<f64>;
