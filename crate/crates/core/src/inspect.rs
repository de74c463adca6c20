//! Codebook diagnostics: usage counts over a dataset and, per class, a grid
//! of the input patches whose latents lie nearest to the most used entries.

use std::fs;
use std::path::Path;

use sucode_tensor::{Graph, Tensor};

use crate::checkpoint::CheckpointBundle;
use crate::data::{load_pair, stack_images, DatasetIndex, Fit, ImageTensor, LoadOptions};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binder, ParamMap};
use crate::quantizer::{codebook_name, downsample_mask, quantize_with_mask, usage_stats, CodebookSet, UsageStats};
use crate::trainer::is_model_array;

/// Closest location seen so far for one codebook entry.
#[derive(Clone, Copy)]
struct Nearest {
    dist: f64,
    image: usize,
    y: usize,
    x: usize,
}

pub struct Inspection {
    pub usage: UsageStats,
    /// `[class][rank]` entry indices, most used first.
    pub top_entries: Vec<Vec<usize>>,
}

impl Inspection {
    pub fn usage_csv(&self) -> String {
        let mut out = String::from("class,entry,count\n");
        for (c, row) in self.usage.counts.iter().enumerate() {
            for (j, k) in row.iter().enumerate() {
                out.push_str(&format!("{c},{j},{k}\n"));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("class,locations,used_entries,perplexity\n");
        for (c, row) in self.usage.counts.iter().enumerate() {
            let used = row.iter().filter(|&&k| k > 0).count();
            let total: u64 = row.iter().sum();
            out.push_str(&format!("{c},{total},{used},{}\n", self.usage.perplexity_per_class[c]));
        }
        out
    }
}

/// Encodes every image of `dataset_root` with the checkpoint's encoder,
/// quantizes under its mask and writes `usage.csv`, `summary.csv` and one
/// `nearest_class<c>.png` grid per class into `out`.
pub fn inspect_codebooks(ckpt: &CheckpointBundle, dataset_root: &Path, out: &Path, top_k: usize) -> Result<Inspection> {
    let cfg = &ckpt.config;
    let m = &cfg.model;
    let encoder = ["enc_q", "enc_r"]
        .into_iter()
        .find(|e| ckpt.has_component(e))
        .ok_or_else(|| Error::CheckpointIncomplete("inspection needs an encoder".into()))?;
    let books = (0..m.class_count)
        .map(|c| ckpt.get(&codebook_name(c)).cloned().ok_or_else(|| Error::CheckpointIncomplete(codebook_name(c))))
        .collect::<Result<Vec<_>>>()?;
    let books = CodebookSet::from_books(&books)?;
    let mut store: ParamMap = ckpt.arrays.iter().filter(|(n, _)| is_model_array(n)).map(|(n, e)| (n.clone(), e.clone())).collect();

    let index = DatasetIndex::open(dataset_root, 0.0)?;
    let opts = LoadOptions { class_count: m.class_count, image_size: m.image_size, fit: Fit::Scale, remap: cfg.remap_table()? };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let f = m.downsample_factor;
    let mut results = Vec::new();
    let mut images: Vec<ImageTensor> = Vec::new();
    let mut nearest: Vec<Vec<Option<Nearest>>> = vec![vec![None; m.codebook_entries]; m.class_count];
    for id in &index.train {
        let s = load_pair(&index.raw_path(id), Some(&index.mask_path(id)), None, &opts, &mut rng)?;
        let low = downsample_mask(s.mask.as_ref().expect("mask requested"), f)?;
        let z = {
            let g = Graph::new();
            let b = Binder::frozen(&g, &mut store);
            let x = g.constant(stack_images(&[&s.raw]));
            nn::encode(&b, encoder, &x, m)?.value().as_ref().clone()
        };
        let (lh, lw) = (z.dim(1), z.dim(2));
        let z = Tensor::new(&[lh, lw, m.embed_dim], z.into_data());
        let q = quantize_with_mask(&z, &low, &books)?;
        for (loc, (&c, &j)) in q.class_of_location.iter().zip(&q.indices).enumerate() {
            let feat = &z.data()[loc * m.embed_dim..(loc + 1) * m.embed_dim];
            let dist: f64 = feat.iter().zip(books.entry(c, j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let slot = &mut nearest[c][j];
            if slot.map_or(true, |n| dist < n.dist) {
                *slot = Some(Nearest { dist, image: images.len(), y: loc / lw, x: loc % lw });
            }
        }
        results.push(q);
        images.push(s.raw);
    }
    let usage = usage_stats(&results, m.class_count, m.codebook_entries);
    let top_entries: Vec<Vec<usize>> = usage
        .counts
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0).collect();
            order.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(top_k);
            order
        })
        .collect();

    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let inspection = Inspection { usage, top_entries };
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write("usage.csv", inspection.usage_csv())?;
    write("summary.csv", inspection.summary_csv())?;
    for (c, entries) in inspection.top_entries.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let mut grid = vec![0.0; f * entries.len() * f * 3];
        let gw = f * entries.len();
        for (k, &j) in entries.iter().enumerate() {
            let n = nearest[c][j].expect("used entries have a nearest location");
            let img = &images[n.image];
            for dy in 0..f {
                for dx in 0..f {
                    for ch in 0..3 {
                        grid[(dy * gw + k * f + dx) * 3 + ch] = img.at(n.y * f + dy, n.x * f + dx, ch);
                    }
                }
            }
        }
        let tile = ImageTensor::new(Tensor::new(&[f, gw, 3], grid))?;
        crate::data::save_image(&tile, &out.join(format!("nearest_class{c}.png")))?;
    }
    Ok(inspection)
}
