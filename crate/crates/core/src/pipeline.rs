//! Forward dataflow of each stage, built from the network blocks, quantizer
//! and losses.

use sucode_tensor::{Tensor, Var};

use crate::config::RunConfig;
use crate::data::SemanticMask;
use crate::error::Result;
use crate::losses::{code_loss, generator_loss, perceptual_loss, pixel_l1, vq_loss, PerceptualExtractor};
use crate::nn::{self, conv};
use crate::params::{Binder, Init};
use crate::quantizer::{
    aggregate_weighted_var, codebook_name, quantize_per_class_var, quantize_with_masks_var, stack_books, straight_through,
};

/// All codebooks as one `[C * N, n_z]` table.
pub fn codebook_table<'g>(b: &Binder<'g, '_>, cfg: &RunConfig) -> Result<Var<'g>> {
    let m = &cfg.model;
    let books = (0..m.class_count)
        .map(|c| {
            b.param(&codebook_name(c), &[m.codebook_entries, m.embed_dim], Init::Uniform(1.0 / m.codebook_entries as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_books(&books))
}

/// 1x1 projection of a quantized latent onto the grid and width of the
/// deepest perceptual features.
pub fn semantic_projection<'g>(b: &Binder<'g, '_>, encoder: &str, zq: &Var<'g>, target: &[usize]) -> Result<Var<'g>> {
    let p = conv(b, &format!("{encoder}/sem_proj"), zq, target[3], 1, 1, 0)?;
    Ok(p.resize_bilinear(target[1], target[2]))
}

/// Per-class quantization, predicted weights and their synthesis.
pub struct Synthesis<'g> {
    pub weights: Var<'g>,
    /// Weighted sum of straight-through per-class codes: value of the
    /// synthesized code, gradient to both the encoder and the weights.
    pub latent: Var<'g>,
    /// Weighted sum of the hard per-class codes.
    pub codes: Var<'g>,
}

pub fn synthesize<'g>(b: &Binder<'g, '_>, cfg: &RunConfig, z_hat: &Var<'g>) -> Result<Synthesis<'g>> {
    let table = codebook_table(b, cfg)?;
    let per_class = quantize_per_class_var(z_hat, &table, cfg.model.codebook_entries)?;
    let weights = nn::weight_predict(b, z_hat, &cfg.model)?;
    let ste: Vec<Var<'g>> = per_class.iter().map(|c| straight_through(z_hat, c)).collect();
    let latent = aggregate_weighted_var(&ste, &weights)?;
    let codes = aggregate_weighted_var(&per_class, &weights)?;
    Ok(Synthesis { weights, latent, codes })
}

/// Values of one generator step: the differentiable total and its terms.
pub struct GeneratorPass<'g> {
    pub total: Var<'g>,
    pub output: Var<'g>,
    pub target: Var<'g>,
    pub pixel: Var<'g>,
    pub perceptual: Var<'g>,
    pub adversarial: Var<'g>,
    pub vq: Option<crate::losses::VqTerms<'g>>,
    pub code: Option<Var<'g>>,
}

/// Batch of stacked `[B, H, W, 3]` images with optional latent-resolution masks.
pub struct Batch {
    pub raw: Tensor,
    pub reference: Option<Tensor>,
    pub masks: Option<Vec<SemanticMask>>,
}

fn finish<'g>(
    b: &Binder<'g, '_>,
    cfg: &RunConfig,
    phi: &PerceptualExtractor,
    output: Var<'g>,
    target: Var<'g>,
    lambda_adv: f64,
) -> Result<GeneratorPass<'g>> {
    let pixel = pixel_l1(&output, &target)?;
    let perceptual = perceptual_loss(&output, &target, phi)?;
    let adversarial = generator_loss(&nn::discriminate(b, &output, cfg.model.disc_channels)?);
    let total = pixel.add(&perceptual).add(&adversarial.mul_scalar(lambda_adv));
    Ok(GeneratorPass { total, output, target, pixel, perceptual, adversarial, vq: None, code: None })
}

/// Stage one: mask-guided quantization, reconstruction of the raw image.
pub fn stage1_pass<'g>(
    b: &Binder<'g, '_>,
    cfg: &RunConfig,
    phi: &PerceptualExtractor,
    batch: &Batch,
    lambda_adv: f64,
) -> Result<GeneratorPass<'g>> {
    let g = b.graph();
    let x = g.constant(batch.raw.clone());
    let z = nn::encode(b, "enc_q", &x, &cfg.model)?;
    let table = codebook_table(b, cfg)?;
    let masks: Vec<&SemanticMask> = batch
        .masks
        .as_ref()
        .ok_or_else(|| crate::error::Error::SampleInvalid("stage 1 needs semantic masks".into()))?
        .iter()
        .collect();
    let q = quantize_with_masks_var(&z, &masks, &table, cfg.model.codebook_entries)?;
    let recon = nn::decode_q(b, &q.ste, &cfg.model)?;
    let phi_x = phi.features(&x).pop().expect("extractor has stages");
    let proj = semantic_projection(b, "enc_q", &q.ste, &phi_x.shape())?;
    let vq = vq_loss(&z, &q.codes, &proj, &phi_x, cfg.loss.beta, cfg.loss.lambda_semantic)?;
    let mut pass = finish(b, cfg, phi, recon, x, lambda_adv)?;
    pass.total = pass.total.add(&vq.total);
    pass.vq = Some(vq);
    Ok(pass)
}

/// Stage two: per-class quantization and weighted synthesis, reconstruction
/// of the raw image through the gated decoder.
pub fn stage2_pass<'g>(
    b: &Binder<'g, '_>,
    cfg: &RunConfig,
    phi: &PerceptualExtractor,
    batch: &Batch,
    lambda_adv: f64,
) -> Result<GeneratorPass<'g>> {
    let g = b.graph();
    let x = g.constant(batch.raw.clone());
    let z = nn::encode(b, "enc_r", &x, &cfg.model)?;
    let s = synthesize(b, cfg, &z)?;
    let (recon, _) = nn::decode_r(b, &s.latent, &cfg.model)?;
    let phi_x = phi.features(&x).pop().expect("extractor has stages");
    let proj = semantic_projection(b, "enc_r", &s.latent, &phi_x.shape())?;
    let vq = vq_loss(&z, &s.codes, &proj, &phi_x, cfg.loss.beta, cfg.loss.lambda_semantic)?;
    let mut pass = finish(b, cfg, phi, recon, x, lambda_adv)?;
    pass.total = pass.total.add(&vq.total);
    pass.vq = Some(vq);
    Ok(pass)
}

/// Inference path: encode, synthesize, raw decoder taps, fused enhancement
/// decoder. Output is unclamped.
pub fn enhance_pass<'g>(b: &Binder<'g, '_>, cfg: &RunConfig, x: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let z = nn::encode(b, "enc_r", x, &cfg.model)?;
    let s = synthesize(b, cfg, &z)?;
    let (_, taps) = nn::decode_r(b, &s.latent, &cfg.model)?;
    Ok((nn::decode_e(b, &s.latent, &taps, &cfg.model)?, z))
}

/// Stage three: enhancement of the raw image towards the reference, with the
/// code loss pulling the raw latent towards the synthesized code of the
/// reference.
pub fn stage3_pass<'g>(
    b: &Binder<'g, '_>,
    cfg: &RunConfig,
    phi: &PerceptualExtractor,
    batch: &Batch,
    lambda_adv: f64,
) -> Result<GeneratorPass<'g>> {
    let g = b.graph();
    let x = g.constant(batch.raw.clone());
    let y = g.constant(
        batch
            .reference
            .clone()
            .ok_or_else(|| crate::error::Error::SampleInvalid("stage 3 needs reference images".into()))?,
    );
    let (out, z) = enhance_pass(b, cfg, &x)?;
    let z_ref = nn::encode(b, "enc_r", &y, &cfg.model)?.detach();
    let z_gt = synthesize(b, cfg, &z_ref)?.codes.detach();
    let code = code_loss(&z, &z_gt, cfg.loss.beta)?;
    let mut pass = finish(b, cfg, phi, out, y, lambda_adv)?;
    pass.total = pass.total.add(&code);
    pass.code = Some(code);
    Ok(pass)
}

/// Discriminator objective on a real and a generated batch.
pub fn discriminator_pass<'g>(b: &Binder<'g, '_>, cfg: &RunConfig, real: &Tensor, fake: &Tensor) -> Result<Var<'g>> {
    let g = b.graph();
    let lr = nn::discriminate(b, &g.constant(real.clone()), cfg.model.disc_channels)?;
    let lf = nn::discriminate(b, &g.constant(fake.clone()), cfg.model.disc_channels)?;
    Ok(crate::losses::adversarial_losses(&lf, &lr)?.1)
}
