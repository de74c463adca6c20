//! Ablation sweeps: codebook size, perturbed training masks and merged
//! classes. Every setting trains all three stages from scratch and is scored
//! on the held-out split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::CheckpointBundle;
use crate::config::RunConfig;
use crate::data::{load_image, load_mask, save_image, save_mask, DatasetIndex};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalReport, EvalRow};
use crate::synth::{merge_to_four, merge_to_six, perturb_mask, sample_seed};
use crate::trainer::{count_cost, run_stage, run_checkpoint_dir, Enhancer, RunOptions};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub metrics: EvalRow,
    pub params: u64,
    pub mult_adds: u64,
}

/// One comparison table: a row per setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub kind: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,psnr,ssim,uciqe,uiqm,params,mult_adds\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.setting,
                opt(m.psnr),
                opt(m.ssim),
                m.uciqe,
                m.uiqm,
                r.params,
                r.mult_adds
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Trained checkpoint and test-split evaluation of one configuration.
pub struct Evaluated {
    pub bundle: CheckpointBundle,
    pub report: EvalReport,
}

/// Runs stages 1-3 under `out/stage<k>`, enhances the held-out raw images
/// into `out/pred` and scores them against the references.
pub fn train_and_evaluate(cfg: &RunConfig, dataset_root: &Path, out: &Path) -> Result<Evaluated> {
    let mut prev: Option<PathBuf> = None;
    let mut bundle = None;
    for stage in 1..=3u8 {
        let dir = out.join(format!("stage{stage}"));
        bundle = Some(run_stage(stage, cfg, dataset_root, prev.as_deref(), &dir, &RunOptions::default())?);
        prev = Some(run_checkpoint_dir(&dir));
    }
    let bundle = bundle.expect("three stages ran");
    let index = DatasetIndex::open(dataset_root, cfg.data.test_fraction)?;
    if index.test.is_empty() {
        return Err(Error::EvalEmpty(format!("{} has no held-out samples", dataset_root.display())));
    }
    let pred = out.join("pred");
    fs::create_dir_all(&pred).map_err(|e| Error::io(format!("creating {}", pred.display()), e))?;
    let mut enhancer = Enhancer::new(&bundle)?;
    for id in &index.test {
        let raw = load_image(&index.raw_path(id))?;
        save_image(&enhancer.enhance(&raw)?, &pred.join(format!("{id}.png")))?;
    }
    let report = evaluate_dataset(&pred, Some(&dataset_root.join("ref")))?;
    Ok(Evaluated { bundle, report })
}

fn row(setting: String, cfg: &RunConfig, ev: &Evaluated) -> Result<AblationRow> {
    let (params, mult_adds) = count_cost(&ev.bundle, cfg.model.image_size)?;
    Ok(AblationRow { setting, metrics: ev.report.mean.clone(), params, mult_adds })
}

/// Sweeps `(entries, dim)` codebook shapes.
pub fn ablate_codebook_size(cfg: &RunConfig, dataset_root: &Path, out: &Path, sizes: &[(usize, usize)]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &(n, d) in sizes {
        let mut c = cfg.clone();
        c.model.codebook_entries = n;
        c.model.embed_dim = d;
        c.validate()?;
        let setting = format!("{n}x{d}");
        let ev = train_and_evaluate(&c, dataset_root, &out.join(&setting))?;
        rows.push(row(setting, &c, &ev)?);
    }
    Ok(AblationTable { kind: "codebook-size".into(), rows })
}

/// Parses `"0"`, `"3"` or `"1-5"` into an inclusive radius range.
pub fn parse_range(text: &str) -> Result<(u32, u32)> {
    let bad = || Error::invalid("ranges", format!("`{text}` is not N or LO-HI"));
    let (lo, hi) = match text.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let v = text.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(Error::invalid("ranges", format!("`{text}` has min > max")));
    }
    Ok((lo, hi))
}

fn range_label((lo, hi): (u32, u32)) -> String {
    if lo == hi {
        lo.to_string()
    } else {
        format!("{lo}-{hi}")
    }
}

/// Copy of a dataset whose masks are eroded or dilated per region.
pub fn perturbed_dataset(src: &Path, dst: &Path, range: (u32, u32), seed: u64) -> Result<()> {
    let index = DatasetIndex::open(src, 0.0)?;
    for sub in ["raw", "mask", "ref"] {
        let d = dst.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::DatasetWriteError(format!("{}: {e}", d.display())))?;
    }
    for (i, id) in index.train.iter().enumerate() {
        let file = format!("{id}.png");
        for sub in ["raw", "ref"] {
            let from = src.join(sub).join(&file);
            if from.exists() {
                fs::copy(&from, dst.join(sub).join(&file))
                    .map_err(|e| Error::DatasetWriteError(format!("{}: {e}", from.display())))?;
            }
        }
        let mask = load_mask(&index.mask_path(id))?;
        save_mask(&perturb_mask(&mask, range, sample_seed(seed, i)), &dst.join("mask").join(&file))?;
    }
    Ok(())
}

/// Trains on masks perturbed by each radius range; `(0, 0)` is the
/// unperturbed baseline.
pub fn ablate_mask(cfg: &RunConfig, dataset_root: &Path, out: &Path, ranges: &[(u32, u32)]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &range in ranges {
        let setting = range_label(range);
        let dir = out.join(format!("range_{setting}"));
        let data = dir.join("data");
        perturbed_dataset(dataset_root, &data, range, cfg.seed)?;
        let ev = train_and_evaluate(cfg, &data, &dir)?;
        rows.push(row(setting, cfg, &ev)?);
    }
    Ok(AblationTable { kind: "mask".into(), rows })
}

/// Class-merging schemes for [`ablate_classes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassScheme {
    /// Labels as stored, `class_count` from the configuration.
    Baseline,
    /// Explicit identity table over the configured classes.
    Identity,
    /// Divers with robots, reefs with fish.
    Six,
    /// Additionally plants, wrecks and sea-floor together.
    Four,
}

impl ClassScheme {
    pub fn parse(text: &str, class_count: usize) -> Result<Self> {
        match text {
            "identity" => Ok(Self::Identity),
            "6" => Ok(Self::Six),
            "4" => Ok(Self::Four),
            t if t == class_count.to_string() || t == "baseline" => Ok(Self::Baseline),
            t => Err(Error::invalid("schemes", format!("unknown class scheme `{t}`"))),
        }
    }

    fn apply(self, cfg: &RunConfig) -> (String, RunConfig) {
        let mut c = cfg.clone();
        let table = |m: std::collections::BTreeMap<u32, u32>| Some(m.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
        match self {
            Self::Baseline => {
                c.class_remap = None;
                (cfg.model.class_count.to_string(), c)
            }
            Self::Identity => {
                c.class_remap = table(crate::synth::identity_remap(cfg.model.class_count as u32));
                ("identity".into(), c)
            }
            Self::Six => {
                c.class_remap = table(merge_to_six());
                c.model.class_count = 6;
                ("6".into(), c)
            }
            Self::Four => {
                c.class_remap = table(merge_to_four());
                c.model.class_count = 4;
                ("4".into(), c)
            }
        }
    }
}

/// Trains with masks merged by each scheme.
pub fn ablate_classes(cfg: &RunConfig, dataset_root: &Path, out: &Path, schemes: &[ClassScheme]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &scheme in schemes {
        let (setting, c) = scheme.apply(cfg);
        c.validate()?;
        let ev = train_and_evaluate(&c, dataset_root, &out.join(format!("classes_{setting}")))?;
        rows.push(row(setting, &c, &ev)?);
    }
    Ok(AblationTable { kind: "classes".into(), rows })
}
