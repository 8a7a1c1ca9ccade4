//! Cancer tissue region detection from paired histology embeddings and
//! spatial gene expression.
//!
//! The pipeline has three trained stages:
//!
//! 1. [`align`]: two MLP encoders map image and gene features into a shared
//!    unit sphere under a bidirectional InfoNCE objective.
//! 2. [`fusion`]: bidirectional multi-head cross attention over each spot's
//!    spatial neighborhood fuses the two modalities; a variational
//!    autoencoder with learnable class-specific prior means shapes the
//!    latent space.
//! 3. [`discriminator`]: an MLP on the latent mean and log-variance scores
//!    cancer likelihood; a two-component Gaussian mixture fitted to the
//!    scores supplies the decision threshold.

// NaN-rejecting range checks are written as `!(x > 0.0)`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod config;
pub mod dataio;
pub mod diffcore;
pub mod discriminator;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod prepare;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
