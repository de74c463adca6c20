//! Run configuration: a hierarchical TOML document with defaults for every
//! field. Unknown keys are logged as warnings and otherwise ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: u8,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub perceptual: PerceptualConfig,
    /// Old class id -> new class id, applied to masks on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_remap: Option<BTreeMap<String, u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub class_count: usize,
    pub codebook_entries: usize,
    pub embed_dim: usize,
    pub image_size: usize,
    pub downsample_factor: usize,
    /// Feature width at each resolution level, finest first; one entry per
    /// level, i.e. `log2(downsample_factor) + 1` entries.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub disc_channels: usize,
    pub window_size: usize,
    pub attn_heads: usize,
    /// Insert a frequency-aware fusion block at every decoder scale; when
    /// false only the finest tapped scale is fused.
    pub faff_every_scale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of all steps over which the adversarial weight ramps up.
    pub adv_warmup_fraction: f64,
    /// Stop after this many optimizer steps, regardless of epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub freeze_encoder_stage3: bool,
    pub stage1_images: Stage1Images,
}

/// Images reconstructed in stage one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Images {
    /// Raw images only.
    #[default]
    Raw,
    /// Raw or reference, drawn per sample with equal odds. Needs `ref/`.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_semantic: f64,
    pub lambda_adv: f64,
    pub lambda_adv_enhance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Trailing fraction of the sorted sample ids held out for evaluation.
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    pub channels: Vec<usize>,
    pub stage_weights: Vec<f64>,
    pub seed: u64,
    /// Checkpoint directory holding `phi/*` arrays of an external extractor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            perceptual: PerceptualConfig::default(),
            class_remap: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            class_count: 8,
            codebook_entries: 256,
            embed_dim: 256,
            image_size: 256,
            downsample_factor: 8,
            channels: vec![64, 128, 128, 256],
            res_blocks: 2,
            disc_channels: 64,
            window_size: 8,
            attn_heads: 4,
            faff_every_scale: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            adv_warmup_fraction: 0.1,
            max_steps: None,
            freeze_encoder_stage3: false,
            stage1_images: Stage1Images::Raw,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.25, lambda_semantic: 0.1, lambda_adv: 0.1, lambda_adv_enhance: 0.1 }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { test_fraction: 0.1 }
    }
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128, 128], stage_weights: vec![0.25; 4], seed: 1234, weights: None }
    }
}

impl ModelConfig {
    /// Number of resolution levels (`log2(downsample_factor) + 1`).
    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize + 1
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }
}

impl RunConfig {
    /// Small configuration used by tests and the synthetic end-to-end run.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            class_count: 3,
            codebook_entries: 32,
            embed_dim: 16,
            image_size: 64,
            downsample_factor: 4,
            channels: vec![8, 16, 32],
            res_blocks: 1,
            disc_channels: 16,
            window_size: 4,
            attn_heads: 2,
            faff_every_scale: true,
        };
        c.perceptual.channels = vec![8, 16, 16, 16];
        c.train.epochs = 40;
        c.train.stage1_images = Stage1Images::Mixed;
        c.loss.lambda_adv = 0.01;
        c.loss.lambda_adv_enhance = 0.01;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::invalid(&error_field(&e.to_string()), e.to_string()))?;
        for key in unknown {
            log::warn!("unknown configuration key `{key}` ignored");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Class remap as integer pairs.
    pub fn remap_table(&self) -> Result<Option<BTreeMap<u32, u32>>> {
        let Some(map) = &self.class_remap else { return Ok(None) };
        let mut out = BTreeMap::new();
        for (k, &v) in map {
            let key: u32 = k
                .trim()
                .parse()
                .map_err(|_| Error::invalid("class_remap", format!("key `{k}` is not a class id")))?;
            out.insert(key, v);
        }
        Ok(Some(out))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        if m.class_count < 1 {
            return Err(Error::invalid("class_count", "must be at least 1"));
        }
        if m.codebook_entries < 2 {
            return Err(Error::invalid("codebook_entries", "must be at least 2"));
        }
        if m.embed_dim < 1 {
            return Err(Error::invalid("embed_dim", "must be at least 1"));
        }
        if m.downsample_factor < 2 || !m.downsample_factor.is_power_of_two() {
            return Err(Error::invalid("downsample_factor", "must be a power of two >= 2"));
        }
        if m.image_size == 0 || m.image_size % m.downsample_factor != 0 {
            return Err(Error::invalid("image_size", "must be a positive multiple of downsample_factor"));
        }
        if m.channels.len() != m.levels() || m.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid(
                "channels",
                format!("need {} positive widths for downsample_factor {}", m.levels(), m.downsample_factor),
            ));
        }
        if m.channels.iter().any(|&c| c % 2 != 0) {
            return Err(Error::invalid("channels", "widths must be even (channel gating splits them in half)"));
        }
        if m.res_blocks < 1 {
            return Err(Error::invalid("res_blocks", "must be at least 1"));
        }
        if m.disc_channels == 0 {
            return Err(Error::invalid("disc_channels", "must be positive"));
        }
        if m.window_size == 0 || m.latent_size() % m.window_size.min(m.latent_size()) != 0 {
            return Err(Error::invalid("window_size", "must divide the latent grid"));
        }
        if m.attn_heads == 0 || m.embed_dim % m.attn_heads != 0 {
            return Err(Error::invalid("attn_heads", "must divide embed_dim"));
        }
        if !(1..=3).contains(&self.stage) {
            return Err(Error::invalid("stage", "must be 1, 2 or 3"));
        }
        if t.epochs < 1 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if t.batch_size < 1 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(t.lr_generator > 0.0) {
            return Err(Error::invalid("lr_generator", "must be positive"));
        }
        if !(t.lr_discriminator > 0.0) {
            return Err(Error::invalid("lr_discriminator", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::invalid("adam_beta1", "moment decay rates must be in [0, 1)"));
        }
        if !(t.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&t.adv_warmup_fraction) {
            return Err(Error::invalid("adv_warmup_fraction", "must be in [0, 1]"));
        }
        if !(l.beta > 0.0) {
            return Err(Error::invalid("beta", "must be positive"));
        }
        for (name, v) in [
            ("lambda_semantic", l.lambda_semantic),
            ("lambda_adv", l.lambda_adv),
            ("lambda_adv_enhance", l.lambda_adv_enhance),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::invalid("test_fraction", "must be in [0, 1)"));
        }
        let p = &self.perceptual;
        if p.channels.is_empty() || p.channels.len() != p.stage_weights.len() {
            return Err(Error::invalid("stage_weights", "need one weight per perceptual stage"));
        }
        if p.stage_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("stage_weights", "must be non-negative"));
        }
        if let Some(remap) = self.remap_table()? {
            if let Some((k, v)) = remap.iter().find(|(_, &v)| v as usize >= m.class_count) {
                return Err(Error::invalid("class_remap", format!("{k} -> {v} exceeds class_count {}", m.class_count)));
            }
        }
        Ok(())
    }
}

/// Best-effort extraction of the offending key from a deserializer message.
fn error_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

/// Read and validate a configuration file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::ConfigNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    RunConfig::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.model.class_count, c.model.codebook_entries, c.model.embed_dim), (8, 256, 256));
        assert_eq!((c.model.image_size, c.model.downsample_factor), (256, 8));
        assert_eq!((c.train.epochs, c.train.batch_size), (200, 4));
        assert_eq!((c.train.lr_generator, c.train.lr_discriminator), (1e-4, 4e-4));
        assert_eq!((c.loss.beta, c.loss.lambda_semantic, c.loss.lambda_adv), (0.25, 0.1, 0.1));
    }

    #[test]
    fn merged_class_config() {
        let text = r#"
            [model]
            class_count = 4
            [class_remap]
            0 = 0
            1 = 1
            4 = 1
            2 = 2
            3 = 2
            7 = 2
            5 = 3
            6 = 3
        "#;
        let c = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(c.model.class_count, 4);
        let remap = c.remap_table().unwrap().unwrap();
        assert_eq!(remap.len(), 8);
        assert_eq!(remap[&7], 2);
    }

    #[test]
    fn zero_codebook_entries_rejected() {
        let err = RunConfig::from_toml_str("[model]\ncodebook_entries = 0\n").unwrap_err();
        assert!(matches!(&err, Error::ConfigInvalid { field, .. } if field == "codebook_entries"), "{err}");
    }

    #[test]
    fn remap_target_out_of_range_rejected() {
        let err = RunConfig::from_toml_str("[model]\nclass_count = 2\n[class_remap]\n1 = 5\n").unwrap_err();
        assert!(matches!(&err, Error::ConfigInvalid { field, .. } if field == "class_remap"));
    }

    #[test]
    fn unknown_keys_are_not_errors() {
        let c = RunConfig::from_toml_str("colour = 3\n[model]\nflavour = 1\n").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn missing_file() {
        let err = parse_config("/definitely/not/here.toml").unwrap_err();
        assert_eq!(err.name(), "ConfigNotFound");
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
