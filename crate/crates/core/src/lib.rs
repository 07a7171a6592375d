//! Cross-domain video recognition from still-image supervision.
//!
//! The pipeline trains a small convolutional classifier on labeled still
//! images, converts its gradients into per-concept attention maps, and then
//! recognizes videos from a different visual domain by where the classifier
//! looks rather than what it scores. Two video classifiers build on the maps:
//! an untrained one that ranks concepts by peak attention evidence, and a
//! learned energy model that embeds map/concept pairs and is trained on a
//! handful of labeled videos with online hard negative mining.
//!
//! Everything is deterministic for a fixed seed: one RNG stream per purpose,
//! fixed iteration orders, and single-threaded numerics.

mod bytesio;

pub mod config;
pub mod embedding;
pub mod energy;
pub mod energynet;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod manifest;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
