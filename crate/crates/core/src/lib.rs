//! Conditional latent diffusion on procedural brain phantoms.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod image_io;
pub mod label;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod train;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
pub use label::{CellGrid, ConditionLabel, Modality, Pathology};
