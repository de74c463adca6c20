//! Two-dimensional real FFT over the spatial axes of `[B, H, W, C]` tensors.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1 / (H * W)` factor, so `irfft2(rfft2(x)) == x`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::graph::Var;
use crate::tensor::Tensor;

/// Number of non-redundant frequency bins along a real axis of length `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// Unnormalized full 2-D DFT of an `h x w` row-major plane, in place.
    fn fft2(&self, plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
        let (rows, cols) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        rows.process(plane);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = plane[y * w + x];
            }
        }
        cols.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = t[x * h + y];
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "spectral ops expect [B,H,W,C], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Forward real FFT: returns (real, imaginary) parts, each `[B, H, W/2+1, C]`.
pub fn rfft2_tensor(x: &Tensor) -> (Tensor, Tensor) {
    let (b, h, w, c) = dims(x);
    let wh = half_width(w);
    let plans = Plans::new(h, w);
    let mut re = vec![0.0; b * h * wh * c];
    let mut im = vec![0.0; b * h * wh * c];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    plane[y * w + xx] = Complex64::new(x.data()[((bi * h + y) * w + xx) * c + ci], 0.0);
                }
            }
            plans.fft2(&mut plane, h, w, false);
            for y in 0..h {
                for l in 0..wh {
                    let o = ((bi * h + y) * wh + l) * c + ci;
                    re[o] = plane[y * w + l].re;
                    im[o] = plane[y * w + l].im;
                }
            }
        }
    }
    (Tensor::new(&[b, h, wh, c], re), Tensor::new(&[b, h, wh, c], im))
}

/// Inverse real FFT of a one-sided spectrum to spatial size `(h, w)`.
///
/// Imaginary parts of the zero and Nyquist columns are ignored, as for any
/// real-output inverse.
pub fn irfft2_tensor(re: &Tensor, im: &Tensor, h: usize, w: usize) -> Tensor {
    let (b, hs, wh, c) = dims(re);
    assert_eq!(re.shape(), im.shape(), "real/imaginary shape mismatch");
    assert_eq!(hs, h, "spectrum height {hs} does not match target {h}");
    assert_eq!(wh, half_width(w), "spectrum width {wh} does not match target width {w}");
    let plans = Plans::new(h, w);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; b * h * w * c];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for l in 0..wh {
                    let o = ((bi * h + y) * wh + l) * c + ci;
                    plane[y * w + l] = Complex64::new(re.data()[o], im.data()[o]);
                }
            }
            // Hermitian completion: X[y, l] = conj(X[-y, -l]) for the
            // columns the one-sided spectrum omits.
            for y in 0..h {
                let ym = (h - y) % h;
                for l in wh..w {
                    let src = plane[ym * w + (w - l)];
                    plane[y * w + l] = src.conj();
                }
            }
            plans.fft2(&mut plane, h, w, true);
            for y in 0..h {
                for xx in 0..w {
                    out[((bi * h + y) * w + xx) * c + ci] = plane[y * w + xx].re * norm;
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

/// Adjoint of the forward transform restricted to one output part.
fn rfft2_adjoint(g_re: Option<&Tensor>, g_im: Option<&Tensor>, b: usize, h: usize, w: usize, c: usize) -> Tensor {
    let wh = half_width(w);
    let plans = Plans::new(h, w);
    let mut out = vec![0.0; b * h * w * c];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for bi in 0..b {
        for ci in 0..c {
            plane.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for y in 0..h {
                for l in 0..wh {
                    let o = ((bi * h + y) * wh + l) * c + ci;
                    let r = g_re.map_or(0.0, |g| g.data()[o]);
                    let i = g_im.map_or(0.0, |g| g.data()[o]);
                    plane[y * w + l] = Complex64::new(r, i);
                }
            }
            plans.fft2(&mut plane, h, w, true);
            for y in 0..h {
                for xx in 0..w {
                    out[((bi * h + y) * w + xx) * c + ci] = plane[y * w + xx].re;
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

/// Weight of a one-sided column in the real inverse: 1 for the zero and
/// Nyquist columns, 2 for the others.
fn column_multiplicity(l: usize, w: usize) -> f64 {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        1.0
    } else {
        2.0
    }
}

impl<'g> Var<'g> {
    /// One-sided spectrum `(real, imaginary)` of the spatial axes.
    pub fn rfft2(&self) -> (Var<'g>, Var<'g>) {
        let x = self.value();
        let (b, h, w, c) = dims(&x);
        let (re, im) = rfft2_tensor(&x);
        let graph = self.graph();
        let re_var = graph.push(
            re,
            &[*self],
            Box::new(move |g, _| vec![Some(rfft2_adjoint(Some(g), None, b, h, w, c))]),
        );
        let im_var = graph.push(
            im,
            &[*self],
            Box::new(move |g, _| vec![Some(rfft2_adjoint(None, Some(g), b, h, w, c))]),
        );
        (re_var, im_var)
    }

    /// Modulus of a complex tensor given as separate parts.
    pub fn complex_abs(re: &Var<'g>, im: &Var<'g>) -> Var<'g> {
        let (r, i) = (re.value(), im.value());
        let a = r.zip_map(&i, f64::hypot);
        let ac = a.clone();
        re.graph().push(
            a,
            &[*re, *im],
            Box::new(move |g, need| {
                let part = |num: &Tensor| {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(num.data().iter().zip(ac.data()))
                        .map(|(&gv, (&n, &m))| if m > 0.0 { gv * n / m } else { 0.0 })
                        .collect();
                    Tensor::new(g.shape(), d)
                };
                vec![need[0].then(|| part(&r)), need[1].then(|| part(&i))]
            }),
        )
    }

    /// Argument in `(-pi, pi]` of a complex tensor given as separate parts.
    pub fn complex_angle(re: &Var<'g>, im: &Var<'g>) -> Var<'g> {
        let (r, i) = (re.value(), im.value());
        let phase = i.zip_map(&r, f64::atan2);
        re.graph().push(
            phase,
            &[*re, *im],
            Box::new(move |g, need| {
                let part = |sign: f64, num: &Tensor| {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| {
                            let m2 = r.data()[k] * r.data()[k] + i.data()[k] * i.data()[k];
                            if m2 > 1e-300 {
                                sign * gv * num.data()[k] / m2
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    Tensor::new(g.shape(), d)
                };
                // d atan2(i, r) / dr = -i / |z|^2, / di = r / |z|^2
                vec![need[0].then(|| part(-1.0, &i)), need[1].then(|| part(1.0, &r))]
            }),
        )
    }
}

/// Inverse real FFT of `(re, im)` to spatial size `(h, w)`.
pub fn irfft2<'g>(re: &Var<'g>, im: &Var<'g>, h: usize, w: usize) -> Var<'g> {
    let out = irfft2_tensor(&re.value(), &im.value(), h, w);
    let c = out.dim(3);
    let wh = half_width(w);
    re.graph().push(
        out,
        &[*re, *im],
        Box::new(move |g, need| {
            let (gr, gi) = rfft2_tensor(g);
            let scale = |t: Tensor| {
                let mut t = t;
                let norm = 1.0 / (h * w) as f64;
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    let l = (k / c) % wh;
                    *v *= column_multiplicity(l, w) * norm;
                }
                t
            };
            vec![need[0].then(|| scale(gr)), need[1].then(|| scale(gi))]
        }),
    )
}
