//! Multi-view parametric relighting with one-step latent bridge matching.
//!
//! Pipeline: OLAT scenes ([`datagen`]) are composed into source/target pairs,
//! encoded by an invertible [`codec`], and a multi-view transformer
//! ([`model::VelocityNet`]) conditioned on a Lab [`lightmap`] learns the bridge
//! velocity ([`bridge`]). Inference is one forward pass over all views.

pub mod bridge;
pub mod codec;
pub mod colorimetry;
pub mod datagen;
mod error;
pub mod image;
pub mod lightmap;
pub mod metrics;
pub mod model;
pub mod relight;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, LinearImage};
