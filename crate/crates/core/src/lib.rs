//! Part-aware generation of neural voxel fields.
//!
//! The pipeline fits explicit density/colour grids to posed renders,
//! compresses them with a 3D variational autoencoder, trains a decoupled
//! diffusion UNet in latent space together with an attention-based part
//! decoder, and samples, renders, interpolates and mixes part-labelled
//! shapes.
//!
//! Interchangeable algorithms (optimizers, sampler time schedules, gradient
//! alignment for the skipped decoder, procedural scene templates) are trait
//! objects registered by name in a [`registry::Registry`] and chosen from
//! the run configuration.

pub mod ae;
pub mod camera;
pub mod config;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod geom;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod registry;
pub mod seed;
pub mod render;
pub mod synth;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use voxpart_autodiff as autodiff;
