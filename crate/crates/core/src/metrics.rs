//! Full-reference (PSNR, SSIM) and no-reference (UCIQE, UIQM) image quality
//! metrics, and directory-level evaluation reports.

use std::path::Path;

use serde::Serialize;

use crate::data::{list_ids, load_image, ImageTensor};
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const UCIQE_COEFFS: [f64; 3] = [0.4680, 0.2745, 0.2576];
/// Factor between the unscaled UCIQE and the magnitudes usually reported.
pub const UCIQE_DISPLAY_SCALE: f64 = 100.0;

pub const UIQM_COEFFS: [f64; 3] = [0.0282, 0.2953, 3.5753];
/// Block size of the sharpness and contrast measures.
pub const UIQM_BLOCK: usize = 8;
/// Fraction trimmed from each tail in the colorfulness means.
pub const UICM_TRIM: f64 = 0.1;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all pixels and channels, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let da = a.tensor().data();
    let mse = da.iter().zip(b.tensor().data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Rec. 601 luma.
pub fn luminance(img: &ImageTensor) -> Vec<f64> {
    img.tensor().data().chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes (Gaussian window, valid
/// region only, dynamic range 1).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let ya = luminance(a);
    let yb = luminance(b);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&ya, h, w, &k);
    let mu_b = filter_valid(&yb, h, w, &k);
    let e_aa = filter_valid(&prod(&ya, &ya), h, w, &k);
    let e_bb = filter_valid(&prod(&yb, &yb), h, w, &k);
    let e_ab = filter_valid(&prod(&ya, &yb), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

fn srgb_linear(c: f64) -> f64 {
    if c > 0.04045 {
        ((c + 0.055) / 1.055).powf(2.4)
    } else {
        c / 12.92
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIELab of an sRGB pixel. The white point is the image of RGB white, so
/// grays have zero chroma.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_linear);
    let mut f = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        let v: f64 = row.iter().zip(&lin).map(|(m, c)| m * c).sum();
        let white: f64 = row.iter().sum();
        f[i] = lab_f(v / white);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Underwater colour image quality evaluation on CIELab scaled by 1/100:
/// `c1·σ_chroma + c2·con_l + c3·μ_saturation`, where `con_l` is the mean of
/// the brightest 1% of lightness minus the mean of the darkest 1%, and
/// saturation is chroma over lightness (0 where lightness is 0).
pub fn uciqe(img: &ImageTensor) -> f64 {
    let lab: Vec<[f64; 3]> =
        img.tensor().data().chunks_exact(3).map(|p| srgb_to_lab([p[0], p[1], p[2]]).map(|v| v / 100.0)).collect();
    let n = lab.len() as f64;
    let chroma: Vec<f64> = lab.iter().map(|p| p[1].hypot(p[2])).collect();
    let mean_c = chroma.iter().sum::<f64>() / n;
    let sigma_c = (chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n).sqrt();
    let mut light: Vec<f64> = lab.iter().map(|p| p[0]).collect();
    light.sort_by(f64::total_cmp);
    let tail = ((0.01 * n).round() as usize).max(1);
    let top = light[light.len() - tail..].iter().sum::<f64>() / tail as f64;
    let bottom = light[..tail].iter().sum::<f64>() / tail as f64;
    let saturation = lab.iter().zip(&chroma).map(|(p, c)| if p[0] > 0.0 { c / p[0] } else { 0.0 }).sum::<f64>() / n;
    let [c1, c2, c3] = UCIQE_COEFFS;
    c1 * sigma_c + c2 * (top - bottom) + c3 * saturation
}

/// [`uciqe`], optionally multiplied by [`UCIQE_DISPLAY_SCALE`].
pub fn uciqe_scaled(img: &ImageTensor, scaled: bool) -> f64 {
    uciqe(img) * if scaled { UCIQE_DISPLAY_SCALE } else { 1.0 }
}

/// Components of [`uiqm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

fn trimmed_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let lo = (UICM_TRIM * k as f64).ceil() as usize;
    let hi = (UICM_TRIM * k as f64).floor() as usize;
    let kept = &v[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn variance_about(values: &[f64], mu: f64) -> f64 {
    values.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / values.len() as f64
}

/// Colorfulness from the trimmed means and spreads of the opponent channels
/// `R−G` and `(R+G)/2 − B`, on the 0-255 scale.
pub fn uicm(img: &ImageTensor) -> f64 {
    let px: Vec<[f64; 3]> = img.tensor().data().chunks_exact(3).map(|p| [p[0] * 255.0, p[1] * 255.0, p[2] * 255.0]).collect();
    let rg: Vec<f64> = px.iter().map(|p| p[0] - p[1]).collect();
    let yb: Vec<f64> = px.iter().map(|p| (p[0] + p[1]) / 2.0 - p[2]).collect();
    let (mrg, myb) = (trimmed_mean(&rg), trimmed_mean(&yb));
    let spread = (variance_about(&rg, mrg) + variance_about(&yb, myb)).sqrt();
    -0.0268 * mrg.hypot(myb) + 0.1586 * spread
}

/// Sobel gradient magnitude with replicated borders.
fn sobel_magnitude(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, xx: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let xx = xx.clamp(0, w as isize - 1) as usize;
        x[y * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let gx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
            let gy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
            out[y as usize * w + xx as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Visits the full `UIQM_BLOCK`-sized blocks of an `h x w` grid, yielding the
/// pixel indices of each. Trailing rows and columns are ignored.
fn blocks(h: usize, w: usize) -> impl Iterator<Item = Vec<usize>> {
    let (k1, k2) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    (0..k1 * k2).map(move |b| {
        let (by, bx) = (b / k2 * UIQM_BLOCK, b % k2 * UIQM_BLOCK);
        (0..UIQM_BLOCK * UIQM_BLOCK).map(|i| (by + i / UIQM_BLOCK) * w + bx + i % UIQM_BLOCK).collect()
    })
}

fn block_count(h: usize, w: usize) -> usize {
    (h / UIQM_BLOCK) * (w / UIQM_BLOCK)
}

/// Measure of enhancement: `2/(k1·k2) · Σ ln(max/min)` over blocks, skipping
/// blocks whose minimum is 0.
fn eme(x: &[f64], h: usize, w: usize) -> f64 {
    let n = block_count(h, w);
    if n == 0 {
        return 0.0;
    }
    let total: f64 = blocks(h, w)
        .map(|idx| {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(x[i]), hi.max(x[i])));
            if lo > 0.0 {
                (hi / lo).ln()
            } else {
                0.0
            }
        })
        .sum();
    2.0 / n as f64 * total
}

/// Sharpness: luma-weighted EME of each channel multiplied by its Sobel
/// magnitude. The usual rescaling of the edge map by its maximum cancels
/// inside the ratio and is omitted.
pub fn uism(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let d = img.tensor().data();
    [0.299, 0.587, 0.114]
        .iter()
        .enumerate()
        .map(|(c, lw)| {
            let ch: Vec<f64> = d.chunks_exact(3).map(|p| p[c] * 255.0).collect();
            let edges = sobel_magnitude(&ch, h, w);
            let grey: Vec<f64> = edges.iter().zip(&ch).map(|(e, v)| e * v).collect();
            lw * eme(&grey, h, w)
        })
        .sum()
}

/// Contrast: `−1/(k1·k2) · Σ r·ln r` with `r = (max−min)/(max+min)` over
/// blocks spanning all three channels; blocks with `r = 0` or `max+min = 0`
/// contribute 0.
pub fn uiconm(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let n = block_count(h, w);
    if n == 0 {
        return 0.0;
    }
    let d = img.tensor().data();
    let total: f64 = blocks(h, w)
        .map(|idx| {
            let (lo, hi) = idx
                .iter()
                .flat_map(|&i| &d[3 * i..3 * i + 3])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v * 255.0), hi.max(v * 255.0)));
            let (m, p) = (hi - lo, hi + lo);
            if m == 0.0 || p == 0.0 {
                0.0
            } else {
                (m / p) * (m / p).ln()
            }
        })
        .sum();
    -total / n as f64
}

pub fn uiqm_parts(img: &ImageTensor) -> UiqmParts {
    UiqmParts { uicm: uicm(img), uism: uism(img), uiconm: uiconm(img) }
}

/// Underwater image quality measure `c1·UICM + c2·UISM + c3·UIConM`.
pub fn uiqm(img: &ImageTensor) -> f64 {
    let p = uiqm_parts(img);
    let [c1, c2, c3] = UIQM_COEFFS;
    c1 * p.uicm + c2 * p.uism + c3 * p.uiconm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
}

/// Per-image metrics and their means. Full-reference columns are absent when
/// no reference directory was given.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    pub uciqe_scaled: bool,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EvalEmpty("no rows to aggregate".into()));
        }
        let n = rows.len() as f64;
        let mean_of = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Option<f64> {
            rows.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        let mean = EvalRow {
            id: "mean".into(),
            psnr: mean_of(&|r| r.psnr),
            ssim: mean_of(&|r| r.ssim),
            uciqe: mean_of(&|r| Some(r.uciqe)).unwrap_or(0.0),
            uiqm: mean_of(&|r| Some(r.uiqm)).unwrap_or(0.0),
        };
        Ok(Self { rows, mean, uciqe_scaled: false })
    }

    pub fn has_reference(&self) -> bool {
        self.mean.psnr.is_some()
    }

    /// Multiplies every UCIQE value by [`UCIQE_DISPLAY_SCALE`].
    pub fn with_scaled_uciqe(mut self) -> Self {
        if !self.uciqe_scaled {
            for r in self.rows.iter_mut().chain(std::iter::once(&mut self.mean)) {
                r.uciqe *= UCIQE_DISPLAY_SCALE;
            }
            self.uciqe_scaled = true;
        }
        self
    }

    pub fn csv_header(&self) -> &'static str {
        if self.has_reference() {
            "id,psnr,ssim,uciqe,uiqm"
        } else {
            "id,uciqe,uiqm"
        }
    }

    pub fn csv_line(&self, r: &EvalRow) -> String {
        match (r.psnr, r.ssim) {
            (Some(p), Some(s)) => format!("{},{p},{s},{},{}", r.id, r.uciqe, r.uiqm),
            _ => format!("{},{},{}", r.id, r.uciqe, r.uiqm),
        }
    }

    /// Header, one line per image, then the `mean` line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", self.csv_header());
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&self.csv_line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Metrics of one prediction against an optional reference.
pub fn evaluate_pair(id: &str, pred: &ImageTensor, reference: Option<&ImageTensor>) -> Result<EvalRow> {
    let (psnr_v, ssim_v) = match reference {
        Some(r) => (Some(psnr(pred, r, 1.0)?), Some(ssim(pred, r)?)),
        None => (None, None),
    };
    Ok(EvalRow { id: id.to_string(), psnr: psnr_v, ssim: ssim_v, uciqe: uciqe(pred), uiqm: uiqm(pred) })
}

/// Evaluates every PNG in `pred_dir`, pairing it by file name with
/// `ref_dir` when given.
pub fn evaluate_dataset(pred_dir: &Path, ref_dir: Option<&Path>) -> Result<EvalReport> {
    let ids = if pred_dir.is_dir() { list_ids(pred_dir)? } else { Vec::new() };
    if ids.is_empty() {
        return Err(Error::EvalEmpty(format!("no PNG images in {}", pred_dir.display())));
    }
    let rows = ids
        .iter()
        .map(|id| {
            let pred = load_image(&pred_dir.join(format!("{id}.png")))?;
            let reference = match ref_dir {
                Some(d) => {
                    let p = d.join(format!("{id}.png"));
                    if !p.exists() {
                        return Err(Error::SampleInvalid(format!("{id}: no reference image at {}", p.display())));
                    }
                    Some(load_image(&p)?)
                }
                None => None,
            };
            evaluate_pair(id, &pred, reference.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
