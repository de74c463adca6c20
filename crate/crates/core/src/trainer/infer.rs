use sucode_tensor::{Graph, Tensor};

use crate::checkpoint::CheckpointBundle;
use crate::config::RunConfig;
use crate::data::{stack_images, unstack_images, ImageTensor, SemanticMask};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binder, ParamMap};
use crate::pipeline::{codebook_table, enhance_pass, synthesize};
use crate::quantizer::quantize_with_masks_var;

use super::is_model_array;

const ENHANCE_COMPONENTS: [&str; 6] = ["codebook", "enc_r", "wpred", "dec_r", "gcam", "dec_e"];

/// Mask-free enhancement with the weights of a stage-3 checkpoint.
pub struct Enhancer {
    cfg: RunConfig,
    store: ParamMap,
}

impl Enhancer {
    pub fn new(ckpt: &CheckpointBundle) -> Result<Self> {
        for c in ENHANCE_COMPONENTS {
            if !ckpt.has_component(c) {
                return Err(Error::CheckpointIncomplete(format!("enhancement needs `{c}` arrays")));
            }
        }
        let store = ckpt.arrays.iter().filter(|(n, _)| is_model_array(n)).map(|(n, e)| (n.clone(), e.clone())).collect();
        Ok(Self { cfg: ckpt.config.clone(), store })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Enhances a batch of images of equal size; output clamped to `[0, 1]`.
    pub fn enhance_batch(&mut self, raws: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        if raws.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.cfg.model.downsample_factor;
        let (h, w) = (raws[0].height(), raws[0].width());
        for r in raws {
            r.check_divisible(f)?;
            if (r.height(), r.width()) != (h, w) {
                return Err(Error::Shape(format!("batch mixes {h}x{w} and {}x{} images", r.height(), r.width())));
            }
        }
        let g = Graph::new();
        let b = Binder::frozen(&g, &mut self.store);
        let x = g.constant(stack_images(raws));
        let (out, _) = enhance_pass(&b, &self.cfg, &x)?;
        let out = out.value().map(|v| v.clamp(0.0, 1.0));
        Ok(unstack_images(&out))
    }

    pub fn enhance(&mut self, raw: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.enhance_batch(&[raw])?.pop().expect("one output per input"))
    }
}

/// Enhances one image with a stage-3 checkpoint.
pub fn enhance(raw: &ImageTensor, ckpt: &CheckpointBundle) -> Result<ImageTensor> {
    Enhancer::new(ckpt)?.enhance(raw)
}

/// Stage-1 reconstruction of an image quantized under its mask.
pub fn reconstruct_stage1(raw: &ImageTensor, mask: &SemanticMask, ckpt: &CheckpointBundle) -> Result<ImageTensor> {
    let cfg = &ckpt.config;
    let mut store: ParamMap = ckpt.arrays.iter().filter(|(n, _)| is_model_array(n)).map(|(n, e)| (n.clone(), e.clone())).collect();
    let f = cfg.model.downsample_factor;
    raw.check_divisible(f)?;
    let low = crate::quantizer::downsample_mask(mask, f)?;
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store);
    let x = g.constant(stack_images(&[raw]));
    let z = nn::encode(&b, "enc_q", &x, &cfg.model)?;
    let table = codebook_table(&b, cfg)?;
    let q = quantize_with_masks_var(&z, &[&low], &table, cfg.model.codebook_entries)?;
    let out = nn::decode_q(&b, &q.ste, &cfg.model)?.value().map(|v| v.clamp(0.0, 1.0));
    Ok(unstack_images(&out).pop().expect("one image"))
}

/// Parameter count and multiply-accumulate count of one inference pass at
/// `input_size x input_size`.
///
/// The pass is the enhancement path when the checkpoint has one, otherwise
/// the reconstruction path of the latest stage present. Parameters counted are
/// those the pass reads. Checkpoints holding no known network are costed as a
/// stack of stride-1 convolutions: every rank-4 `[kh, kw, cin, cout]` array
/// contributes `kh·kw·cin·cout` per output pixel and all arrays count as
/// parameters.
pub fn count_cost(ckpt: &CheckpointBundle, input_size: usize) -> Result<(u64, u64)> {
    let mut store: ParamMap = ckpt.arrays.iter().filter(|(n, _)| is_model_array(n)).map(|(n, e)| (n.clone(), e.clone())).collect();
    if store.is_empty() {
        return Ok((0, 0));
    }
    let cfg = &ckpt.config;
    let has = |c: &str| ckpt.has_component(c);
    let path = if ENHANCE_COMPONENTS.iter().all(|c| has(c)) {
        Some(3)
    } else if ["codebook", "enc_r", "wpred", "dec_r"].iter().all(|c| has(c)) {
        Some(2)
    } else if ["codebook", "enc_q", "dec_q"].iter().all(|c| has(c)) {
        Some(1)
    } else {
        None
    };
    let Some(path) = path else {
        let params = store.values().map(|e| e.tensor.numel() as u64).sum();
        let pixels = (input_size * input_size) as u64;
        let macs = store
            .values()
            .filter(|e| e.tensor.rank() == 4)
            .map(|e| e.tensor.shape().iter().product::<usize>() as u64 * pixels)
            .sum();
        return Ok((params, macs));
    };
    let f = cfg.model.downsample_factor;
    if input_size == 0 || input_size % f != 0 {
        return Err(Error::Shape(format!("input size {input_size} is not a positive multiple of {f}")));
    }
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store);
    let x = g.constant(Tensor::full(&[1, input_size, input_size, 3], 0.5));
    match path {
        3 => {
            enhance_pass(&b, cfg, &x)?;
        }
        2 => {
            let z = nn::encode(&b, "enc_r", &x, &cfg.model)?;
            let s = synthesize(&b, cfg, &z)?;
            nn::decode_r(&b, &s.latent, &cfg.model)?;
        }
        _ => {
            let z = nn::encode(&b, "enc_q", &x, &cfg.model)?;
            let table = codebook_table(&b, cfg)?;
            let l = input_size / f;
            let mask = SemanticMask::uniform(l, l, 0);
            let q = quantize_with_masks_var(&z, &[&mask], &table, cfg.model.codebook_entries)?;
            nn::decode_q(&b, &q.ste, &cfg.model)?;
        }
    }
    let names = b.bound_names();
    drop(b);
    let params = names.iter().map(|n| store[n].tensor.numel() as u64).sum();
    Ok((params, g.mult_adds()))
}
