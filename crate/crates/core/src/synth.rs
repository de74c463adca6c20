//! Procedural underwater scenes: clean images with class masks, a
//! wavelength-dependent attenuation/backscatter degradation, dataset writing,
//! and the mask transforms used by the ablations.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sucode_tensor::Tensor;

use crate::data::{save_image, save_mask, ImageTensor, SemanticMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
    Speckle,
    Rings,
}

/// Base colour and texture of each class id; class 0 is the water body.
pub const PALETTE: [([f64; 3], Texture); 8] = [
    ([0.62, 0.78, 0.86], Texture::Flat),
    ([0.92, 0.78, 0.18], Texture::Stripes),
    ([0.22, 0.70, 0.28], Texture::Stripes),
    ([0.58, 0.40, 0.30], Texture::Checker),
    ([0.88, 0.20, 0.18], Texture::Rings),
    ([0.95, 0.52, 0.62], Texture::Speckle),
    ([0.96, 0.58, 0.10], Texture::Rings),
    ([0.82, 0.72, 0.52], Texture::Speckle),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub object_count: usize,
    /// Number of classes available for objects (ids `1..class_count`).
    pub class_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationParams {
    /// Per-channel attenuation (R, G, B) in 1/m.
    pub attenuation: [f64; 3],
    /// Backscatter colour (R, G, B).
    pub backscatter: [f64; 3],
    /// Depth range in metres.
    pub depth_range: (f64, f64),
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            attenuation: [0.55, 0.22, 0.10],
            backscatter: [0.08, 0.38, 0.48],
            depth_range: (1.5, 4.0),
            blur_sigma: 0.7,
            noise_sigma: 0.01,
        }
    }
}

impl DegradationParams {
    pub fn identity() -> Self {
        Self { attenuation: [0.0; 3], backscatter: [0.0; 3], depth_range: (0.0, 0.0), blur_sigma: 0.0, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [r, g, b] = self.attenuation;
        let all = self.attenuation.iter().chain(&self.backscatter).chain([&self.blur_sigma, &self.noise_sigma]);
        if all.clone().any(|v| !(*v >= 0.0)) || self.backscatter.iter().any(|&v| v > 1.0) {
            return Err(Error::invalid("degradation", "parameters must be non-negative, backscatter within [0, 1]"));
        }
        if !(r >= g && g >= b) {
            return Err(Error::invalid("attenuation", "must satisfy red >= green >= blue"));
        }
        let (lo, hi) = self.depth_range;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::invalid("depth_range", "need 0 <= min <= max"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { rx: f64, ry: f64, angle: f64 },
    Rect { hx: f64, hy: f64, angle: f64 },
    Blob { r: f64, lobes: f64, phase: f64 },
}

struct Object {
    class: u32,
    cy: f64,
    cx: f64,
    shape: Shape,
    period: f64,
    tint: f64,
}

impl Object {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.shape {
            Shape::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { hx, hy, angle } => {
                let (s, c) = angle.sin_cos();
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                u.abs() <= hx && v.abs() <= hy
            }
            Shape::Blob { r, lobes, phase } => {
                let theta = dy.atan2(dx);
                dy.hypot(dx) <= r * (1.0 + 0.3 * (lobes * theta + phase).sin())
            }
        }
    }

    fn color(&self, y: f64, x: f64, rng_val: f64) -> [f64; 3] {
        let (base, texture) = PALETTE[self.class as usize % PALETTE.len()];
        let (dy, dx) = (y - self.cy, x - self.cx);
        let k = match texture {
            Texture::Flat => 1.0,
            Texture::Stripes => 0.8 + 0.2 * ((dx + 0.5 * dy) / self.period * std::f64::consts::TAU).sin().signum(),
            Texture::Checker => {
                let a = ((dx / self.period).floor() + (dy / self.period).floor()) as i64;
                if a.rem_euclid(2) == 0 { 1.0 } else { 0.75 }
            }
            Texture::Speckle => 0.8 + 0.2 * rng_val,
            Texture::Rings => 0.85 + 0.15 * (dy.hypot(dx) / self.period * std::f64::consts::TAU).cos(),
        };
        base.map(|c| (c * k * self.tint).clamp(0.0, 1.0))
    }
}

/// Clean scene and its mask; deterministic in `spec.seed`.
pub fn generate_clean_scene(spec: &SceneSpec) -> (ImageTensor, SemanticMask) {
    let n = spec.canvas_size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let foreground = spec.class_count.saturating_sub(1);
    let objects: Vec<Object> = if foreground == 0 {
        Vec::new()
    } else {
        (0..spec.object_count)
            .map(|_| {
                let class = rng.gen_range(1..=foreground) as u32;
                let size = nf * rng.gen_range(0.10..0.26);
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let shape = match rng.gen_range(0..3) {
                    0 => Shape::Ellipse { rx: size, ry: size * rng.gen_range(0.5..1.0), angle },
                    1 => Shape::Rect { hx: size * 0.9, hy: size * rng.gen_range(0.4..0.9), angle },
                    _ => Shape::Blob { r: size, lobes: rng.gen_range(3..7) as f64, phase: rng.gen_range(0.0..6.3) },
                };
                Object {
                    class,
                    cy: rng.gen_range(0.15..0.85) * nf,
                    cx: rng.gen_range(0.15..0.85) * nf,
                    shape,
                    period: (nf * rng.gen_range(0.04..0.09)).max(2.0),
                    tint: rng.gen_range(0.8..1.0),
                }
            })
            .collect()
    };
    let (water, _) = PALETTE[0];
    let light = rng.gen_range(0.85..1.0);
    let mut img = vec![0.0; n * n * 3];
    let mut labels = vec![0u32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let speckle: f64 = rng.gen();
            // Water is brighter towards the surface (top rows).
            let mut rgb = water.map(|c| (c * light * (1.05 - 0.25 * yf / nf)).clamp(0.0, 1.0));
            for obj in objects.iter() {
                if obj.contains(yf, xf) {
                    rgb = obj.color(yf, xf, speckle);
                    labels[y * n + x] = obj.class;
                }
            }
            img[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&rgb);
        }
    }
    let image = ImageTensor::new(Tensor::new(&[n, n, 3], img)).expect("palette colours lie in [0, 1]");
    (image, SemanticMask::new(n, n, labels).expect("label count matches canvas"))
}

/// Per-pixel distance to the camera: a vertical gradient (top farther) with
/// objects pulled closer by a per-class amount.
pub fn depth_field(mask: &SemanticMask, range: (f64, f64), seed: u64) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_de97);
    let pull: Vec<f64> = (0..256).map(|_| rng.gen_range(0.3..0.7)).collect();
    let (lo, hi) = range;
    (0..h * w)
        .map(|i| {
            let y = i / w;
            let base = 1.0 - 0.6 * y as f64 / (h.max(2) - 1) as f64;
            let label = mask.labels()[i] as usize;
            let t = if label == 0 { base } else { base * pull[label.min(255)] };
            lo + (hi - lo) * t.clamp(0.0, 1.0)
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of an `[H, W, 3]` buffer with clamped borders.
fn blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                        kv * data[(y * w + xx) * 3 + c]
                    })
                    .sum();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                        kv * tmp[(yy * w + x) * 3 + c]
                    })
                    .sum();
            }
        }
    }
}

/// `I = J·exp(-β·d) + B·(1 - exp(-β·d))` per channel, then blur, additive
/// Gaussian noise and clipping to `[0, 1]`.
pub fn apply_degradation(clean: &ImageTensor, mask: &SemanticMask, p: &DegradationParams, seed: u64) -> Result<ImageTensor> {
    p.validate()?;
    let (h, w) = (clean.height(), clean.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!("mask {}x{} vs image {h}x{w}", mask.height(), mask.width())));
    }
    let depth = depth_field(mask, p.depth_range, seed);
    let src = clean.tensor().data();
    let mut out: Vec<f64> = (0..h * w * 3)
        .map(|i| {
            let c = i % 3;
            let t = (-p.attenuation[c] * depth[i / 3]).exp();
            src[i] * t + p.backscatter[c] * (1.0 - t)
        })
        .collect();
    if p.blur_sigma > 0.0 {
        blur(&mut out, h, w, p.blur_sigma);
    }
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0015_e000);
        let normal = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
        for v in &mut out {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    ImageTensor::new(Tensor::new(&[h, w, 3], out))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub radius: u32,
}

/// Seed of sample `index` of a dataset generated from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    crate::params::name_seed(base, &format!("sample/{index}"))
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("png.tmp");
    write(&tmp).map_err(|e| Error::DatasetWriteError(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::DatasetWriteError(format!("{}: {e}", path.display())))
}

/// Writes `count` (raw, mask, ref) triplets under `out_root` and a
/// `manifest.csv` listing `id,seed,erode_or_dilate_radius`.
pub fn build_dataset(count: usize, spec: &SceneSpec, p: &DegradationParams, out_root: &Path) -> Result<Vec<ManifestRow>> {
    p.validate()?;
    let dw = |e: std::io::Error| Error::DatasetWriteError(format!("{}: {e}", out_root.display()));
    for sub in ["raw", "mask", "ref"] {
        fs::create_dir_all(out_root.join(sub)).map_err(dw)?;
    }
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{i:05}");
        let seed = sample_seed(spec.seed, i);
        let (clean, mask) = generate_clean_scene(&SceneSpec { seed, ..spec.clone() });
        let raw = apply_degradation(&clean, &mask, p, seed)?;
        write_atomic(&out_root.join("raw").join(format!("{id}.png")), |t| save_image(&raw, t))?;
        write_atomic(&out_root.join("mask").join(format!("{id}.png")), |t| save_mask(&mask, t))?;
        write_atomic(&out_root.join("ref").join(format!("{id}.png")), |t| save_image(&clean, t))?;
        rows.push(ManifestRow { id, seed, radius: 0 });
    }
    let mut text = String::from("id,seed,erode_or_dilate_radius\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.id, r.seed, r.radius));
    }
    fs::write(out_root.join("manifest.csv"), text).map_err(dw)?;
    Ok(rows)
}

/// 4-connected regions of equal non-zero label, in scan order of their first
/// pixel.
pub fn foreground_regions(mask: &SemanticMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] == 0 {
            continue;
        }
        let label = labels[start];
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            region.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && labels[j] == label {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

fn disk(radius: u32) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut offs: Vec<(i64, i64)> =
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect();
    offs.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    offs
}

/// Randomly erodes or dilates every foreground region by a disk whose radius
/// is drawn uniformly from `pixel_range`.
///
/// Eroded pixels take the label of the nearest pixel outside their region;
/// dilation only grows into water (class 0). All changes are computed against
/// the input mask, and where two regions claim a pixel the earlier one wins.
pub fn perturb_mask(mask: &SemanticMask, pixel_range: (u32, u32), seed: u64) -> SemanticMask {
    let (lo, hi) = pixel_range;
    assert!(lo <= hi, "pixel range min must not exceed max");
    if hi == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let labels = mask.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut claims: BTreeMap<usize, u32> = BTreeMap::new();
    let mut region_of = vec![usize::MAX; labels.len()];
    let regions = foreground_regions(mask);
    for (r, pixels) in regions.iter().enumerate() {
        for &p in pixels {
            region_of[p] = r;
        }
    }
    for (r, pixels) in regions.iter().enumerate() {
        let radius = rng.gen_range(lo..=hi);
        let erode = rng.gen_bool(0.5);
        if radius == 0 {
            continue;
        }
        let offsets = disk(radius);
        let label = labels[pixels[0]];
        for &p in pixels {
            let (y, x) = (p as i64 / w, p as i64 % w);
            let in_image = |dy: i64, dx: i64| {
                let (yy, xx) = (y + dy, x + dx);
                (0 <= yy && yy < h && 0 <= xx && xx < w).then(|| (yy * w + xx) as usize)
            };
            if erode {
                // Nearest in-image pixel outside the region within the disk;
                // image borders do not erode.
                let outside = offsets.iter().filter_map(|&(dy, dx)| in_image(dy, dx)).find(|&q| region_of[q] != r);
                if let Some(q) = outside {
                    claims.entry(p).or_insert(labels[q]);
                }
            } else {
                for &(dy, dx) in &offsets {
                    if let Some(q) = in_image(dy, dx) {
                        if labels[q] == 0 {
                            claims.entry(q).or_insert(label);
                        }
                    }
                }
            }
        }
    }
    let mut out = mask.clone();
    for (p, l) in claims {
        out.labels_mut()[p] = l;
    }
    out
}

/// Merge table keeping 6 classes: divers and robots share an id, as do reefs
/// and fish.
pub fn merge_to_six() -> BTreeMap<u32, u32> {
    BTreeMap::from([(0, 0), (1, 1), (4, 1), (2, 2), (3, 3), (5, 4), (6, 4), (7, 5)])
}

/// Merge table keeping 4 classes: additionally plants, wrecks and seafloor
/// share an id.
pub fn merge_to_four() -> BTreeMap<u32, u32> {
    BTreeMap::from([(0, 0), (1, 1), (4, 1), (2, 2), (3, 2), (7, 2), (5, 3), (6, 3)])
}

pub fn identity_remap(class_count: u32) -> BTreeMap<u32, u32> {
    (0..class_count).map(|c| (c, c)).collect()
}
