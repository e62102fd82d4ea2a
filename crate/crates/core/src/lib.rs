//! Self-supervised image pretraining that joins masked image modeling with
//! teacher-student alignment of global embeddings (against a key queue) and
//! of position-matched local features (through learned prototypes).
//!
//! The crate covers the full workflow: configuration, image loading and a
//! synthetic corpus, view augmentation and masking, crop geometry, a small
//! convolutional encoder, the loss terms, the training loop with
//! checkpoints, and frozen-feature evaluation.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalharness;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod selftest;
pub mod trainer;

pub use config::{load_config, RunConfig};
pub use error::{CmidError, Result};
