//! Training objectives and the frozen perceptual feature extractor.
//!
//! Every term is mean-reduced over its elements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sucode_tensor::{Graph, Tensor, Var};

use crate::checkpoint::CheckpointBundle;
use crate::config::PerceptualConfig;
use crate::error::{Error, Result};
use crate::nn::LEAKY_SLOPE;
use crate::params::name_seed;

/// Pyramid of frozen 3x3 convolutions with leaky rectifiers. The first stage
/// keeps the input resolution, every later one halves it.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    kernels: Vec<Tensor>,
    stage_weights: Vec<f64>,
}

impl PerceptualExtractor {
    /// Seeded random weights with variance `2 / fan_in`.
    pub fn random(cfg: &PerceptualConfig) -> Self {
        let mut cin = 3;
        let kernels = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let fan_in = 9 * cin;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, &format!("phi/stage{i}")));
                let t = Tensor::from_fn(&[3, 3, cin, cout], |_| normal.sample(&mut rng));
                cin = cout;
                t
            })
            .collect();
        Self { kernels, stage_weights: cfg.stage_weights.clone() }
    }

    /// Extractor weights stored as `phi/stage<i>` arrays of a checkpoint.
    pub fn from_bundle(bundle: &CheckpointBundle, stage_weights: &[f64]) -> Result<Self> {
        let kernels: Vec<Tensor> = (0..stage_weights.len())
            .map(|i| {
                let name = format!("phi/stage{i}");
                bundle.get(&name).cloned().ok_or(Error::CheckpointIncomplete(name))
            })
            .collect::<Result<_>>()?;
        let mut cin = 3;
        for k in &kernels {
            if k.rank() != 4 || k.dim(0) != 3 || k.dim(1) != 3 || k.dim(2) != cin {
                return Err(Error::Shape(format!("extractor kernel {:?} does not chain from {cin} channels", k.shape())));
            }
            cin = k.dim(3);
        }
        Ok(Self { kernels, stage_weights: stage_weights.to_vec() })
    }

    pub fn from_config(cfg: &PerceptualConfig) -> Result<Self> {
        match &cfg.weights {
            Some(path) => Self::from_bundle(&crate::checkpoint::load_checkpoint(path)?, &cfg.stage_weights),
            None => Ok(Self::random(cfg)),
        }
    }

    pub fn deepest_channels(&self) -> usize {
        self.kernels.last().map_or(3, |k| k.dim(3))
    }

    pub fn stage_count(&self) -> usize {
        self.kernels.len()
    }

    /// Feature maps of every stage for `[B, H, W, 3]` images in `[0, 1]`.
    pub fn features<'g>(&self, x: &Var<'g>) -> Vec<Var<'g>> {
        let g = x.graph();
        let mut h = x.mul_scalar(2.0).add_scalar(-1.0);
        self.kernels
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let stride = if i == 0 { 1 } else { 2 };
                h = h.conv2d(&g.constant(k.clone()), None, stride, 1).leaky_relu(LEAKY_SLOPE);
                h
            })
            .collect()
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn pixel_l1<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    same_shape(a, b, "pixel loss")?;
    Ok(a.sub(b).abs().mean_all())
}

/// Stage-weighted sum of mean absolute feature differences.
pub fn perceptual_loss<'g>(a: &Var<'g>, b: &Var<'g>, phi: &PerceptualExtractor) -> Result<Var<'g>> {
    same_shape(a, b, "perceptual loss")?;
    let fa = phi.features(a);
    let fb = phi.features(b);
    let mut total = a.graph().constant(Tensor::scalar(0.0));
    for ((x, y), &w) in fa.iter().zip(&fb).zip(&phi.stage_weights) {
        total = total.add(&x.sub(y).abs().mean_all().mul_scalar(w));
    }
    Ok(total)
}

/// Non-saturating GAN objectives: `(generator, discriminator)` losses.
pub fn adversarial_losses<'g>(logits_fake: &Var<'g>, logits_real: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    same_shape(logits_fake, logits_real, "discriminator logits")?;
    let gen = generator_loss(logits_fake);
    let disc = logits_real.neg().softplus().mean_all().add(&logits_fake.softplus().mean_all());
    Ok((gen, disc))
}

/// `mean softplus(-logits_fake)`.
pub fn generator_loss<'g>(logits_fake: &Var<'g>) -> Var<'g> {
    logits_fake.neg().softplus().mean_all()
}

pub struct VqTerms<'g> {
    pub commit: Var<'g>,
    pub codebook: Var<'g>,
    pub semantic: Var<'g>,
    /// `codebook + β·commit + λ_s·semantic`.
    pub total: Var<'g>,
}

/// Vector-quantization objective. `codes` are the selected (or synthesized)
/// codes, `proj_zq` the projection of the straight-through quantized latent on
/// the grid of `phi_x`.
pub fn vq_loss<'g>(
    z_hat: &Var<'g>,
    codes: &Var<'g>,
    proj_zq: &Var<'g>,
    phi_x: &Var<'g>,
    beta: f64,
    lambda_s: f64,
) -> Result<VqTerms<'g>> {
    same_shape(z_hat, codes, "quantized latent")?;
    same_shape(proj_zq, phi_x, "semantic projection")?;
    let codebook = z_hat.detach().sub(codes).square().mean_all();
    let commit = z_hat.sub(&codes.detach()).square().mean_all();
    let semantic = proj_zq.sub(&phi_x.detach()).square().mean_all();
    let total = codebook.add(&commit.mul_scalar(beta)).add(&semantic.mul_scalar(lambda_s));
    Ok(VqTerms { commit, codebook, semantic, total })
}

/// `β · mean(ẑ − sg[z_gt])²`.
pub fn code_loss<'g>(z_hat: &Var<'g>, z_gt: &Var<'g>, beta: f64) -> Result<Var<'g>> {
    same_shape(z_hat, z_gt, "code loss")?;
    Ok(z_hat.sub(&z_gt.detach()).square().mean_all().mul_scalar(beta))
}

/// Component values feeding [`stage_total`]; `vq` is the weighted VQ
/// objective, the `vq_*` fields its unweighted terms (reporting only).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub pixel: Option<f64>,
    pub perceptual: Option<f64>,
    pub adversarial: Option<f64>,
    pub vq: Option<f64>,
    pub code: Option<f64>,
    pub vq_commit: f64,
    pub vq_codebook: f64,
    pub vq_semantic: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub vq_commit: f64,
    pub vq_codebook: f64,
    pub vq_semantic: f64,
    pub code: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,stage,pixel,perceptual,adversarial,vq_commit,vq_codebook,vq_semantic,code,total";

impl LossReport {
    pub fn csv_row(&self, step: usize, stage: u8) -> String {
        format!(
            "{step},{stage},{},{},{},{},{},{},{},{}",
            self.pixel,
            self.perceptual,
            self.adversarial,
            self.vq_commit,
            self.vq_codebook,
            self.vq_semantic,
            self.code,
            self.total
        )
    }
}

/// Stages 1 and 2: `L1 + L_per + λ_adv·L_adv + L_VQ`; stage 3:
/// `L1 + L_per + λ_adv·L_adv + L_code`.
pub fn stage_total(stage: u8, c: &LossComponents, lambda_adv: f64) -> Result<LossReport> {
    let need = |v: Option<f64>, what: &str| v.ok_or_else(|| Error::LossSpec(format!("stage {stage} needs the {what} term")));
    let pixel = need(c.pixel, "pixel")?;
    let perceptual = need(c.perceptual, "perceptual")?;
    let adversarial = need(c.adversarial, "adversarial")?;
    let base = pixel + perceptual + lambda_adv * adversarial;
    let mut report = LossReport { pixel, perceptual, adversarial, ..Default::default() };
    match stage {
        1 | 2 => {
            let vq = need(c.vq, "vector-quantization")?;
            report.vq_commit = c.vq_commit;
            report.vq_codebook = c.vq_codebook;
            report.vq_semantic = c.vq_semantic;
            report.total = base + vq;
        }
        3 => {
            let code = need(c.code, "code")?;
            report.code = code;
            report.total = base + code;
        }
        s => return Err(Error::LossSpec(format!("unknown stage {s}"))),
    }
    Ok(report)
}

/// Evaluates a scalar graph expression built from constant images.
pub fn eval_scalar(f: impl for<'g> FnOnce(&'g Graph) -> Result<Var<'g>>) -> Result<f64> {
    let g = Graph::new();
    Ok(f(&g)?.item())
}
