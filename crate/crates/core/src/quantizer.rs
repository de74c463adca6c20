//! Per-class codebooks and the nearest-neighbour quantizers.
//!
//! Feature maps are `[h, w, n_z]` or batched `[B, h, w, n_z]`; locations are
//! enumerated in row-major order over all leading axes.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use sucode_tensor::{concat, Tensor, Var};

use crate::config::RunConfig;
use crate::data::SemanticMask;
use crate::error::{Error, Result};

/// `C` codebooks of `N` entries with `n_z` dimensions, stored as `[C, N, n_z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    pub books: Tensor,
    pub frozen: bool,
}

impl CodebookSet {
    pub fn new(books: Tensor) -> Result<Self> {
        if books.rank() != 3 {
            return Err(Error::Shape(format!("codebooks must be [C, N, n_z], got {:?}", books.shape())));
        }
        if !books.all_finite() {
            return Err(Error::CheckpointCorrupt("codebook contains non-finite entries".into()));
        }
        Ok(Self { books, frozen: false })
    }

    pub fn class_count(&self) -> usize {
        self.books.dim(0)
    }

    pub fn entries(&self) -> usize {
        self.books.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.books.dim(2)
    }

    /// Book `c` as a flat `[N * n_z]` slice.
    pub fn book(&self, c: usize) -> &[f64] {
        let n = self.entries() * self.dim();
        &self.books.data()[c * n..(c + 1) * n]
    }

    pub fn entry(&self, c: usize, j: usize) -> &[f64] {
        let d = self.dim();
        &self.book(c)[j * d..(j + 1) * d]
    }

    /// Split into per-class `[N, n_z]` tensors (checkpoint layout).
    pub fn split(&self) -> Vec<Tensor> {
        (0..self.class_count()).map(|c| Tensor::new(&[self.entries(), self.dim()], self.book(c).to_vec())).collect()
    }

    pub fn from_books(books: &[Tensor]) -> Result<Self> {
        let first = books.first().ok_or_else(|| Error::Shape("no codebooks".into()))?;
        let (n, d) = (first.dim(0), first.dim(1));
        let mut data = Vec::with_capacity(books.len() * n * d);
        for b in books {
            if b.shape() != [n, d] {
                return Err(Error::Shape(format!("codebook shape {:?} vs [{n}, {d}]", b.shape())));
            }
            data.extend_from_slice(b.data());
        }
        Self::new(Tensor::new(&[books.len(), n, d], data))
    }
}

/// Name under which book `c` is stored in checkpoints.
pub fn codebook_name(c: usize) -> String {
    format!("codebook/{c}")
}

/// Entries uniform in `[-1/N, 1/N]`.
pub fn init_codebooks(config: &RunConfig, seed: u64) -> CodebookSet {
    let m = &config.model;
    let (c, n, d) = (m.class_count, m.codebook_entries, m.embed_dim);
    let bound = 1.0 / n as f64;
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * n * d).map(|_| dist.sample(&mut rng)).collect();
    CodebookSet { books: Tensor::new(&[c, n, d], data), frozen: false }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `book` (flat `[N * n_z]`), lowest index on
/// ties, with its squared distance.
pub fn nearest_index(feature: &[f64], book: &[f64]) -> (usize, f64) {
    let d = feature.len();
    let mut best = (0, f64::INFINITY);
    for (j, row) in book.chunks_exact(d).enumerate() {
        let dist = sq_dist(feature, row);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Nearest entry of a `[N, n_z]` book.
pub fn nearest_code(feature: &[f64], book: &Tensor) -> (usize, Vec<f64>) {
    assert_eq!(book.dim(1), feature.len(), "feature/book dimension mismatch");
    let (j, _) = nearest_index(feature, book.data());
    let d = feature.len();
    (j, book.data()[j * d..(j + 1) * d].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub z_q: Tensor,
    pub indices: Vec<usize>,
    pub class_of_location: Vec<usize>,
    pub commit_term: f64,
    pub codebook_term: f64,
}

thread_local! {
    static WITH_MASK_CALLS: Cell<u64> = const { Cell::new(0) };
    static PER_CLASS_CALLS: Cell<u64> = const { Cell::new(0) };
    static AGGREGATE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Calls on the current thread to (mask-guided quantization, per-class
/// quantization, weighted aggregation), graph variants included.
pub fn call_counts() -> (u64, u64, u64) {
    (WITH_MASK_CALLS.get(), PER_CLASS_CALLS.get(), AGGREGATE_CALLS.get())
}

pub fn reset_call_counts() {
    WITH_MASK_CALLS.set(0);
    PER_CLASS_CALLS.set(0);
    AGGREGATE_CALLS.set(0);
}

fn bump(c: &'static std::thread::LocalKey<Cell<u64>>) {
    c.with(|v| v.set(v.get() + 1));
}

fn locations(z: &Tensor, d: usize) -> Result<usize> {
    if z.rank() < 3 || *z.shape().last().unwrap() != d {
        return Err(Error::Shape(format!("feature map {:?} does not end in n_z = {d}", z.shape())));
    }
    Ok(z.numel() / d)
}

/// Class of each location from per-sample low-resolution masks.
fn mask_classes(masks: &[&SemanticMask], z_shape: &[usize], class_count: usize) -> Result<Vec<usize>> {
    let (h, w) = (z_shape[z_shape.len() - 3], z_shape[z_shape.len() - 2]);
    let batch = if z_shape.len() == 4 { z_shape[0] } else { 1 };
    if masks.len() != batch {
        return Err(Error::MaskInvalid(format!("{} masks for a batch of {batch}", masks.len())));
    }
    let mut classes = Vec::with_capacity(batch * h * w);
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::MaskInvalid(format!(
                "mask {}x{} does not match latent {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        m.check_classes(class_count)?;
        classes.extend(m.labels().iter().map(|&l| l as usize));
    }
    Ok(classes)
}

fn assign(z: &[f64], d: usize, classes: &[usize], books: &CodebookSet) -> Vec<usize> {
    z.chunks_exact(d).zip(classes).map(|(f, &c)| nearest_index(f, books.book(c)).0).collect()
}

/// Quantizes each location against the book of its class.
pub fn quantize_with_mask(z_hat: &Tensor, mask_lowres: &SemanticMask, books: &CodebookSet) -> Result<QuantizationResult> {
    quantize_with_masks(z_hat, &[mask_lowres], books)
}

/// Batched form of [`quantize_with_mask`]: one mask per leading batch entry.
pub fn quantize_with_masks(z_hat: &Tensor, masks: &[&SemanticMask], books: &CodebookSet) -> Result<QuantizationResult> {
    bump(&WITH_MASK_CALLS);
    let d = books.dim();
    let n = locations(z_hat, d)?;
    let classes = mask_classes(masks, z_hat.shape(), books.class_count())?;
    let indices = assign(z_hat.data(), d, &classes, books);
    let mut zq = Vec::with_capacity(n * d);
    for (&c, &j) in classes.iter().zip(&indices) {
        zq.extend_from_slice(books.entry(c, j));
    }
    let z_q = Tensor::new(z_hat.shape(), zq);
    let mse = z_hat.zip_map(&z_q, |a, b| (a - b) * (a - b)).mean();
    Ok(QuantizationResult { z_q, indices, class_of_location: classes, commit_term: mse, codebook_term: mse })
}

/// The whole map quantized against each book in turn.
pub fn quantize_per_class(z_hat: &Tensor, books: &CodebookSet) -> Result<Vec<Tensor>> {
    bump(&PER_CLASS_CALLS);
    let d = books.dim();
    locations(z_hat, d)?;
    Ok((0..books.class_count())
        .map(|c| {
            let mut out = Vec::with_capacity(z_hat.numel());
            for f in z_hat.data().chunks_exact(d) {
                let (j, _) = nearest_index(f, books.book(c));
                out.extend_from_slice(books.entry(c, j));
            }
            Tensor::new(z_hat.shape(), out)
        })
        .collect())
}

fn check_weights(maps: &[&[usize]], weights: &[usize]) -> Result<()> {
    let c = maps.len();
    let first = maps.first().ok_or_else(|| Error::AggregateInvalid("no maps to aggregate".into()))?;
    if maps.iter().any(|m| m != first) {
        return Err(Error::AggregateInvalid("class maps differ in shape".into()));
    }
    let lead = &first[..first.len() - 1];
    if weights.len() != first.len() || &weights[..weights.len() - 1] != lead || weights[weights.len() - 1] != c {
        return Err(Error::AggregateInvalid(format!("weights {weights:?} do not match {c} maps of shape {first:?}")));
    }
    Ok(())
}

/// `out[i] = Σ_c weights[i, c] · maps[c][i]`.
pub fn aggregate_weighted(maps: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    bump(&AGGREGATE_CALLS);
    let shapes: Vec<&[usize]> = maps.iter().map(|m| m.shape()).collect();
    check_weights(&shapes, weights.shape())?;
    let c = maps.len();
    let d = *maps[0].shape().last().unwrap();
    let mut out = vec![0.0; maps[0].numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let loc = i / d;
        *o = (0..c).map(|k| weights.data()[loc * c + k] * maps[k].data()[i]).sum();
    }
    Ok(Tensor::new(maps[0].shape(), out))
}

/// Codebook usage counts `[C][N]` and per-class perplexity.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<Vec<u64>>,
    pub perplexity_per_class: Vec<f64>,
}

impl UsageStats {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn usage_stats<'a>(results: impl IntoIterator<Item = &'a QuantizationResult>, class_count: usize, entries: usize) -> UsageStats {
    let mut counts = vec![vec![0u64; entries]; class_count];
    for r in results {
        for (&c, &j) in r.class_of_location.iter().zip(&r.indices) {
            counts[c][j] += 1;
        }
    }
    let perplexity_per_class = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return 1.0;
            }
            let entropy: f64 = row
                .iter()
                .filter(|&&k| k > 0)
                .map(|&k| {
                    let p = k as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            entropy.exp().clamp(1.0, entries as f64)
        })
        .collect();
    UsageStats { counts, perplexity_per_class }
}

/// Majority label of each `factor x factor` block; ties go to the lowest label.
pub fn downsample_mask(mask: &SemanticMask, factor: usize) -> Result<SemanticMask> {
    let (h, w) = (mask.height(), mask.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::MaskInvalid(format!("{h}x{w} mask not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut labels = Vec::with_capacity(oh * ow);
    let mut votes: Vec<(u32, usize)> = Vec::new();
    for by in 0..oh {
        for bx in 0..ow {
            votes.clear();
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    let l = mask.at(y, x);
                    match votes.iter_mut().find(|(v, _)| *v == l) {
                        Some(e) => e.1 += 1,
                        None => votes.push((l, 1)),
                    }
                }
            }
            let best = votes.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
            labels.push(best.0);
        }
    }
    SemanticMask::new(oh, ow, labels)
}

/// Quantizer outputs inside a computation graph.
pub struct QuantizedVar<'g> {
    /// Straight-through output: value of the selected codes, gradient of the
    /// encoder output.
    pub ste: Var<'g>,
    /// Selected codes; differentiable with respect to the codebooks.
    pub codes: Var<'g>,
    pub commit: Var<'g>,
    pub codebook: Var<'g>,
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
}

/// `ẑ + sg[z_q − ẑ]`.
pub fn straight_through<'g>(z_hat: &Var<'g>, codes: &Var<'g>) -> Var<'g> {
    z_hat.add(&codes.sub(z_hat).detach())
}

/// Stacks per-class `[N, n_z]` book variables into the flat `[C * N, n_z]`
/// table used for row gathers.
pub fn stack_books<'g>(books: &[Var<'g>]) -> Var<'g> {
    concat(books, 0)
}

fn gather_codes<'g>(table: &Var<'g>, shape: &[usize], classes: &[usize], indices: &[usize], entries: usize) -> Var<'g> {
    let rows: Vec<usize> = classes.iter().zip(indices).map(|(&c, &j)| c * entries + j).collect();
    table.gather_rows(&rows).reshape(shape)
}

/// Mask-guided quantization with the loss terms
/// `codebook = mean(sg[ẑ] − z_q)²` and `commit = mean(ẑ − sg[z_q])²`.
pub fn quantize_with_masks_var<'g>(
    z_hat: &Var<'g>,
    masks: &[&SemanticMask],
    table: &Var<'g>,
    entries: usize,
) -> Result<QuantizedVar<'g>> {
    bump(&WITH_MASK_CALLS);
    let tv = table.value();
    let d = tv.dim(1);
    let set = CodebookSet::new(Tensor::new(&[tv.dim(0) / entries, entries, d], tv.data().to_vec()))?;
    let zv = z_hat.value();
    locations(&zv, d)?;
    let classes = mask_classes(masks, zv.shape(), set.class_count())?;
    let indices = assign(zv.data(), d, &classes, &set);
    let codes = gather_codes(table, zv.shape(), &classes, &indices, entries);
    Ok(QuantizedVar {
        ste: straight_through(z_hat, &codes),
        commit: z_hat.sub(&codes.detach()).square().mean_all(),
        codebook: z_hat.detach().sub(&codes).square().mean_all(),
        codes,
        indices,
        classes,
    })
}

/// Per-class hard codes (differentiable with respect to the books) for every
/// class in turn.
pub fn quantize_per_class_var<'g>(z_hat: &Var<'g>, table: &Var<'g>, entries: usize) -> Result<Vec<Var<'g>>> {
    bump(&PER_CLASS_CALLS);
    let tv = table.value();
    let d = tv.dim(1);
    let set = CodebookSet::new(Tensor::new(&[tv.dim(0) / entries, entries, d], tv.data().to_vec()))?;
    let zv = z_hat.value();
    let n = locations(&zv, d)?;
    Ok((0..set.class_count())
        .map(|c| {
            let classes = vec![c; n];
            let indices = assign(zv.data(), d, &classes, &set);
            gather_codes(table, zv.shape(), &classes, &indices, entries)
        })
        .collect())
}

/// Graph form of [`aggregate_weighted`]; `weights` is `[..., C]`.
pub fn aggregate_weighted_var<'g>(maps: &[Var<'g>], weights: &Var<'g>) -> Result<Var<'g>> {
    bump(&AGGREGATE_CALLS);
    let shapes: Vec<Vec<usize>> = maps.iter().map(|m| m.shape()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let ws = weights.shape();
    check_weights(&refs, &ws)?;
    let axis = ws.len() - 1;
    let mut acc: Option<Var<'g>> = None;
    for (c, m) in maps.iter().enumerate() {
        let term = m.mul(&weights.slice(axis, c, 1));
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    Ok(acc.expect("at least one map"))
}
