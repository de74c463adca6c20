#![allow(dead_code)]

use std::path::Path;

use sucode_core::config::{ModelConfig, RunConfig};
use sucode_core::synth::{build_dataset, DegradationParams, SceneSpec};

/// Smallest configuration the full pipeline accepts: 16-pixel inputs, a 4x4
/// latent and a two-stage perceptual extractor.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 3;
    c.model = ModelConfig {
        class_count: 3,
        codebook_entries: 8,
        embed_dim: 4,
        image_size: 16,
        downsample_factor: 4,
        channels: vec![4, 8, 8],
        res_blocks: 1,
        disc_channels: 4,
        window_size: 2,
        attn_heads: 1,
        faff_every_scale: true,
    };
    c.perceptual.channels = vec![4, 4];
    c.perceptual.stage_weights = vec![0.5, 0.5];
    c.train.epochs = 2;
    c.train.batch_size = 2;
    c.train.lr_generator = 1e-3;
    c.data.test_fraction = 0.0;
    c
}

/// Synthetic triplets at `size` pixels for `tiny_config`.
pub fn tiny_dataset(root: &Path, count: usize, size: usize) {
    let spec = SceneSpec { canvas_size: size, object_count: 2, class_count: 3, seed: 17 };
    build_dataset(count, &spec, &DegradationParams::default(), root).unwrap();
}
