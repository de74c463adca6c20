//! Semantic-aware codebook underwater image enhancement: data handling,
//! synthetic data, quantization, networks, losses, training and metrics.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inspect;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod quantizer;
pub mod synth;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
pub use config::{parse_config, RunConfig};
pub use error::{Error, Result};
