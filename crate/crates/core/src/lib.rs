//! Multi-scale volumetric super-resolution transformer.
//!
//! The network tokenizes concentric low-resolution contexts at up to three
//! scales, exchanges information between attention windows through carrier
//! tokens, and reconstructs the innermost region at `s`-fold resolution.
//! Everything runs on the small reverse-mode autodiff in `mtv-autograd`.

pub mod analysis;
pub mod config;
pub mod dchat;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod svhat;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
pub mod volume;

pub use config::{ExperimentConfig, ModelConfig, Preset};
pub use error::{Error, Result};
pub use model::Mtvnet;
pub use volume::Volume;
