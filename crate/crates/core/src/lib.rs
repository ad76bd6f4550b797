//! Prototype-clustered style learning for sequence generation.
//!
//! The crate covers a synthetic stylized-trajectory corpus, a style encoder
//! with global and local pooling, non-learnable style prototypes assigned by
//! balanced Sinkhorn transport and updated by EMA, prototype contrastive
//! losses, a small sequence VAE, a latent diffusion denoiser with a style
//! modulation adapter, and the guidance / transfer samplers built on top.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prototypes;
pub mod training;

pub use error::{Error, Result};
