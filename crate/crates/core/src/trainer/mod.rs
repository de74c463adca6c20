//! Three-stage training protocol and inference.

mod adam;
mod infer;
mod plan;

pub use adam::Adam;
pub use infer::{count_cost, enhance, reconstruct_stage1, Enhancer};
pub use plan::{component_of, is_model_array, StagePlan};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_tensor::{Graph, Tensor};

use crate::checkpoint::{load_checkpoint, resolve_checkpoint_dir, save_checkpoint, CheckpointBundle};
use crate::config::{RunConfig, Stage1Images};
use crate::data::{fit_sample, load_pair, stack_images, DatasetIndex, Fit, LoadOptions, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{LossComponents, LossReport, PerceptualExtractor, METRICS_HEADER};
use crate::params::{name_seed, ArrayEntry, Binder, ParamMap};
use crate::pipeline::{discriminator_pass, stage1_pass, stage2_pass, stage3_pass, Batch, GeneratorPass};
use crate::quantizer::{codebook_name, downsample_mask, init_codebooks};

/// Training samples at their native size; fitting to the model input size
/// happens per step.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub samples: Vec<PairedSample>,
}

impl TrainData {
    /// Loads `ids` from a dataset root, checking that each sample carries
    /// what `stage` consumes.
    pub fn load(index: &DatasetIndex, ids: &[String], cfg: &RunConfig, stage: u8) -> Result<Self> {
        let opts = LoadOptions {
            class_count: cfg.model.class_count,
            image_size: cfg.model.image_size,
            fit: Fit::Native,
            remap: cfg.remap_table()?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mixed = stage == 1 && cfg.train.stage1_images == Stage1Images::Mixed;
        let samples = ids
            .iter()
            .map(|id| {
                let mask = index.mask_path(id);
                let reference = index.ref_path(id);
                let mask = (stage < 3).then_some(mask.as_path());
                let reference = (stage == 3 || mixed).then_some(reference.as_path());
                load_pair(&index.raw_path(id), mask, reference, &opts, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::SampleInvalid(format!("no training samples under {}", index.root.display())));
        }
        Ok(Self { samples })
    }
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub disc_loss: f64,
}

pub struct Trainer {
    cfg: RunConfig,
    plan: StagePlan,
    store: ParamMap,
    gen_opt: Adam,
    disc_opt: Adam,
    step: usize,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    data: TrainData,
    phi: PerceptualExtractor,
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out
}

fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(Error::CheckpointCorrupt(format!("rng state has {} bytes, expected 56", bytes.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(bytes[48..56].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(bytes[32..48].try_into().unwrap()));
    Ok(rng)
}

fn require(bundle: &CheckpointBundle, stage: u8, components: &[&str]) -> Result<()> {
    for c in components {
        if !bundle.has_component(c) {
            return Err(Error::StagePrereq(format!("stage {stage} initialization checkpoint lacks `{c}` arrays")));
        }
    }
    Ok(())
}

/// Copies every `from/<rest>` array to `to/<rest>`.
fn copy_prefix(src: &ParamMap, dst: &mut ParamMap, from: &str, to: &str, stage: u8) {
    let prefix = format!("{from}/");
    for (name, e) in src.range(prefix.clone()..) {
        let Some(rest) = name.strip_prefix(&prefix) else { break };
        dst.insert(format!("{to}/{rest}"), ArrayEntry { tensor: e.tensor.clone(), frozen: false, stage_of_origin: stage });
    }
}

/// Model arrays a stage starts from.
fn initial_store(stage: u8, cfg: &RunConfig, init: Option<&CheckpointBundle>) -> Result<ParamMap> {
    let levels = cfg.model.levels();
    let model = |b: &CheckpointBundle| -> ParamMap {
        b.arrays.iter().filter(|(n, _)| is_model_array(n)).map(|(n, e)| (n.clone(), e.clone())).collect()
    };
    let mut store = ParamMap::new();
    match stage {
        1 => match init {
            Some(b) => store = model(b),
            None => {
                for (c, book) in init_codebooks(cfg, cfg.seed).split().into_iter().enumerate() {
                    store.insert(codebook_name(c), ArrayEntry { tensor: book, frozen: false, stage_of_origin: 1 });
                }
            }
        },
        2 => {
            let b = init.ok_or_else(|| Error::StagePrereq("stage 2 requires a stage-1 checkpoint (--init-from)".into()))?;
            require(b, 2, &["codebook", "enc_q", "dec_q"])?;
            let src = model(b);
            for (n, e) in src.iter().filter(|(n, _)| n.starts_with("codebook/")) {
                store.insert(n.clone(), e.clone());
            }
            copy_prefix(&src, &mut store, "enc_q", "enc_r", 2);
            copy_prefix(&src, &mut store, "dec_q", "dec_r", 2);
        }
        _ => {
            let b = init.ok_or_else(|| Error::StagePrereq("stage 3 requires a stage-2 checkpoint (--init-from)".into()))?;
            require(b, 3, &["codebook", "enc_r", "wpred", "dec_r", "gcam"])?;
            let src = model(b);
            for (n, e) in &src {
                let comp = component_of(n, levels);
                if matches!(comp, "codebooks" | "enc_r" | "wpred" | "dec_r") {
                    store.insert(n.clone(), e.clone());
                }
            }
            copy_prefix(&src, &mut store, "dec_r", "dec_e", 3);
            for i in 0..levels {
                copy_prefix(&src, &mut store, &format!("gcam/{i}"), &format!("gcam/{}", i + levels), 3);
            }
        }
    }
    Ok(store)
}

fn apply_plan(store: &mut ParamMap, plan: &StagePlan, levels: usize) {
    store.retain(|n, _| plan.components().any(|c| *c == component_of(n, levels)));
    for (n, e) in store.iter_mut() {
        e.frozen = plan.is_frozen(component_of(n, levels));
    }
}

impl Trainer {
    pub fn new(stage: u8, cfg: &RunConfig, data: TrainData, init: Option<&CheckpointBundle>) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.stage = stage;
        cfg.validate()?;
        let plan = StagePlan::for_stage(stage, cfg.train.freeze_encoder_stage3);
        let store = initial_store(stage, &cfg, init)?;
        let t = &cfg.train;
        let mut trainer = Self {
            gen_opt: Adam::new(t.lr_generator, t.adam_beta1, t.adam_beta2, t.adam_eps),
            disc_opt: Adam::new(t.lr_discriminator, t.adam_beta1, t.adam_beta2, t.adam_eps),
            phi: PerceptualExtractor::from_config(&cfg.perceptual)?,
            rng: ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, &format!("stage{stage}"))),
            step: 0,
            order: Vec::new(),
            plan,
            store,
            data,
            cfg,
        };
        trainer.materialize()?;
        Ok(trainer)
    }

    /// Resumes from a checkpoint written by [`Trainer::to_bundle`].
    pub fn resume(bundle: &CheckpointBundle, data: TrainData) -> Result<Self> {
        let cfg = bundle.config.clone();
        let stage = cfg.stage;
        let plan = StagePlan::for_stage(stage, cfg.train.freeze_encoder_stage3);
        let missing = |n: &str| Error::CheckpointIncomplete(n.to_string());
        let step = bundle.scalar("train/step").ok_or_else(|| missing("train/step"))? as usize;
        let order = bundle.get("train/order").map(|t| t.data().iter().map(|&v| v as usize).collect()).unwrap_or_default();
        let t = &cfg.train;
        let mut gen_opt = Adam::new(t.lr_generator, t.adam_beta1, t.adam_beta2, t.adam_eps);
        let mut disc_opt = Adam::new(t.lr_discriminator, t.adam_beta1, t.adam_beta2, t.adam_eps);
        for (tag, opt) in [("gen", &mut gen_opt), ("disc", &mut disc_opt)] {
            opt.t = bundle.scalar(&format!("train/{tag}_t")).ok_or_else(|| missing("optimizer step"))? as u64;
            for (moment, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let prefix = format!("optim/{tag}/{moment}/");
                for (n, e) in &bundle.arrays {
                    if let Some(rest) = n.strip_prefix(&prefix) {
                        map.insert(rest.to_string(), e.tensor.clone());
                    }
                }
            }
        }
        let store: ParamMap = bundle.arrays.iter().filter(|(n, _)| is_model_array(n)).map(|(n, e)| (n.clone(), e.clone())).collect();
        Ok(Self {
            phi: PerceptualExtractor::from_config(&cfg.perceptual)?,
            rng: rng_from_bytes(&bundle.rng_state)?,
            gen_opt,
            disc_opt,
            step,
            order,
            plan,
            store,
            data,
            cfg,
        })
    }

    /// Creates every parameter the stage touches by running one forward pass
    /// on a single sample.
    fn materialize(&mut self) -> Result<()> {
        let levels = self.cfg.model.levels();
        apply_plan(&mut self.store, &self.plan, levels);
        let batch = self.make_batch(&[0], &mut ChaCha8Rng::seed_from_u64(0))?;
        let stage = self.plan.stage;
        let fake = {
            let g = Graph::new();
            let b = Binder::frozen(&g, &mut self.store).creating(self.cfg.seed, stage);
            let pass = generator_pass(stage, &b, &self.cfg, &self.phi, &batch, 0.0)?;
            let fake = pass.output.value().as_ref().clone();
            discriminator_pass(&b, &self.cfg, &batch.raw, &fake)?;
            fake
        };
        drop(fake);
        apply_plan(&mut self.store, &self.plan, levels);
        Ok(())
    }

    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let m = &self.cfg.model;
        let opts = LoadOptions { class_count: m.class_count, image_size: m.image_size, fit: Fit::RandomCrop, remap: None };
        let mixed = self.plan.stage == 1 && self.cfg.train.stage1_images == Stage1Images::Mixed;
        let samples: Vec<PairedSample> = idx
            .iter()
            .map(|&i| {
                let mut s = self.data.samples[i].clone();
                if mixed {
                    let reference = s.reference.take();
                    if rng.gen_bool(0.5) {
                        s.raw = reference.expect("mixed stage-one samples carry references");
                    }
                }
                fit_sample(&mut s, &opts, rng);
                s
            })
            .collect();
        let raw = stack_images(&samples.iter().map(|s| &s.raw).collect::<Vec<_>>());
        let reference = samples
            .iter()
            .map(|s| s.reference.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|r| stack_images(&r));
        let masks = samples
            .iter()
            .map(|s| s.mask.as_ref().map(|mk| downsample_mask(mk, m.downsample_factor)))
            .collect::<Option<Result<Vec<_>>>>()
            .transpose()?;
        Ok(Batch { raw, reference, masks })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.samples.len().div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.train.epochs * self.steps_per_epoch();
        self.cfg.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch()
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamMap {
        &self.store
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.gen_opt, &self.disc_opt)
    }

    /// Adversarial weight, ramped linearly over the warm-up fraction of steps.
    pub fn adversarial_weight(&self) -> f64 {
        let lambda = if self.plan.stage == 3 { self.cfg.loss.lambda_adv_enhance } else { self.cfg.loss.lambda_adv };
        let warm = self.cfg.train.adv_warmup_fraction * self.total_steps() as f64;
        if warm <= 0.0 {
            lambda
        } else {
            lambda * (self.step as f64 / warm).min(1.0)
        }
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let spe = self.steps_per_epoch();
        if self.step % spe == 0 || self.order.len() != self.data.samples.len() {
            self.order = (0..self.data.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        let pos = self.step % spe;
        let bs = self.cfg.train.batch_size;
        let idx: Vec<usize> = self.order[pos * bs..((pos + 1) * bs).min(self.order.len())].to_vec();
        let mut step_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
        let batch = self.make_batch(&idx, &mut step_rng)?;
        let lambda_adv = self.adversarial_weight();
        let levels = self.cfg.model.levels();

        let plan = self.plan.clone();
        let (report, grads, fake, real) = {
            let g = Graph::new();
            let b = Binder::training(&g, &mut self.store, move |n| {
                let c = component_of(n, levels);
                c != "disc" && plan.is_trainable(c)
            });
            let pass = generator_pass(self.plan.stage, &b, &self.cfg, &self.phi, &batch, lambda_adv)?;
            let report = report_of(&pass, self.plan.stage, lambda_adv)?;
            if !report.total.is_finite() {
                return Err(Error::TrainingDiverged { reason: format!("non-finite loss at step {}", self.step), last_good: None });
            }
            let grads = b.gradients(&g.backward(pass.total));
            (report, grads, pass.output.value().as_ref().clone(), pass.target.value().as_ref().clone())
        };
        self.gen_opt.step(&mut self.store, &grads);

        let (disc_loss, grads) = {
            let g = Graph::new();
            let b = Binder::training(&g, &mut self.store, move |n| component_of(n, levels) == "disc");
            let loss = discriminator_pass(&b, &self.cfg, &real, &fake)?;
            (loss.item(), b.gradients(&g.backward(loss)))
        };
        if !disc_loss.is_finite() {
            return Err(Error::TrainingDiverged { reason: format!("non-finite discriminator loss at step {}", self.step), last_good: None });
        }
        self.disc_opt.step(&mut self.store, &grads);
        self.step += 1;
        Ok(StepOutcome { report, disc_loss })
    }

    /// Model arrays, optimizer moments, loop position, configuration and RNG.
    pub fn to_bundle(&self) -> CheckpointBundle {
        let stage = self.plan.stage;
        let mut bundle = CheckpointBundle::new(self.cfg.clone());
        bundle.arrays = self.store.clone();
        for (tag, opt) in [("gen", &self.gen_opt), ("disc", &self.disc_opt)] {
            for (moment, map) in [("m", &opt.m), ("v", &opt.v)] {
                for (n, t) in map {
                    bundle.insert(&format!("optim/{tag}/{moment}/{n}"), t.clone(), false, stage);
                }
            }
            bundle.insert(&format!("train/{tag}_t"), Tensor::scalar(opt.t as f64), false, stage);
        }
        bundle.insert("train/step", Tensor::scalar(self.step as f64), false, stage);
        let order: Vec<f64> = self.order.iter().map(|&i| i as f64).collect();
        bundle.insert("train/order", Tensor::new(&[order.len()], order), false, stage);
        bundle.rng_state = rng_bytes(&self.rng);
        bundle
    }
}

fn generator_pass<'g>(
    stage: u8,
    b: &Binder<'g, '_>,
    cfg: &RunConfig,
    phi: &PerceptualExtractor,
    batch: &Batch,
    lambda_adv: f64,
) -> Result<GeneratorPass<'g>> {
    match stage {
        1 => stage1_pass(b, cfg, phi, batch, lambda_adv),
        2 => stage2_pass(b, cfg, phi, batch, lambda_adv),
        _ => stage3_pass(b, cfg, phi, batch, lambda_adv),
    }
}

fn report_of(pass: &GeneratorPass<'_>, stage: u8, lambda_adv: f64) -> Result<LossReport> {
    let mut c = LossComponents {
        pixel: Some(pass.pixel.item()),
        perceptual: Some(pass.perceptual.item()),
        adversarial: Some(pass.adversarial.item()),
        code: pass.code.map(|v| v.item()),
        ..Default::default()
    };
    if let Some(vq) = &pass.vq {
        c.vq = Some(vq.total.item());
        c.vq_commit = vq.commit.item();
        c.vq_codebook = vq.codebook.item();
        c.vq_semantic = vq.semantic.item();
    }
    crate::losses::stage_total(stage, &c, lambda_adv)
}

/// Options of [`run_stage`] beyond the configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `<out>/checkpoint` when it exists.
    pub resume: bool,
}

/// Checkpoint directory inside a run directory.
pub fn run_checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

/// Trains one stage on the training split of `dataset_root`, writing
/// `<out>/metrics.csv` and `<out>/checkpoint` (after every epoch and at the end).
pub fn run_stage(
    stage: u8,
    config: &RunConfig,
    dataset_root: &Path,
    init_from: Option<&Path>,
    out: &Path,
    options: &RunOptions,
) -> Result<CheckpointBundle> {
    if stage > 1 && init_from.is_none() {
        return Err(Error::StagePrereq(format!("stage {stage} requires --init-from with a stage-{} checkpoint", stage - 1)));
    }
    let ckpt_dir = run_checkpoint_dir(out);
    let resuming = options.resume && ckpt_dir.join("manifest.csv").exists();
    let init = match init_from {
        Some(p) if !resuming => Some(load_checkpoint(resolve_checkpoint_dir(p))?),
        _ => None,
    };
    if let Some(b) = &init {
        let expected = stage - 1;
        if stage > 1 && b.config.stage != expected {
            return Err(Error::StagePrereq(format!(
                "stage {stage} needs a stage-{expected} checkpoint, got stage {}",
                b.config.stage
            )));
        }
    }
    let index = DatasetIndex::open(dataset_root, config.data.test_fraction)?;
    let mut cfg = config.clone();
    cfg.stage = stage;
    let data = TrainData::load(&index, &index.train, &cfg, stage)?;
    let mut trainer = if resuming {
        let mut bundle = load_checkpoint(&ckpt_dir)?;
        if bundle.config.stage != stage {
            return Err(Error::StagePrereq(format!("checkpoint in {} is for stage {}", out.display(), bundle.config.stage)));
        }
        // Step limits come from the current invocation.
        bundle.config.train.epochs = cfg.train.epochs;
        bundle.config.train.max_steps = cfg.train.max_steps;
        Trainer::resume(&bundle, data)?
    } else {
        Trainer::new(stage, &cfg, data, init.as_ref())?
    };
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let log_path = out.join("metrics.csv");
    let mut log = if resuming {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    if !resuming {
        writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io("writing metrics log", e))?;
    }
    let spe = trainer.steps_per_epoch();
    let mut epoch_pixel = 0.0;
    let mut saved = resuming;
    while !trainer.is_done() {
        let step = trainer.step_index();
        let outcome = trainer.step().map_err(|e| match e {
            Error::TrainingDiverged { reason, .. } => {
                Error::TrainingDiverged { reason, last_good: saved.then(|| ckpt_dir.clone()) }
            }
            other => other,
        })?;
        writeln!(log, "{}", outcome.report.csv_row(step, stage)).map_err(|e| Error::io("writing metrics log", e))?;
        epoch_pixel += outcome.report.pixel;
        if trainer.step_index() % spe == 0 || trainer.is_done() {
            let n = (trainer.step_index() - 1) % spe + 1;
            log::info!(
                "stage {stage} epoch {} step {}/{}: pixel {:.4} total {:.4} disc {:.4}",
                trainer.epoch().max(1),
                trainer.step_index(),
                trainer.total_steps(),
                epoch_pixel / n as f64,
                outcome.report.total,
                outcome.disc_loss
            );
            epoch_pixel = 0.0;
            log.flush().map_err(|e| Error::io("flushing metrics log", e))?;
            save_checkpoint(&trainer.to_bundle(), &ckpt_dir)?;
            saved = true;
        }
    }
    let bundle = trainer.to_bundle();
    if !saved {
        save_checkpoint(&bundle, &ckpt_dir)?;
    }
    Ok(bundle)
}
