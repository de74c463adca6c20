use crate::graph::Var;
use crate::tensor::Tensor;

/// Source taps `(low, high, weight_of_high)` for bilinear resampling along
/// one axis with half-pixel centers.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<'g> Var<'g> {
    /// Bilinear resize of `[B, H, W, C]` to `[B, out_h, out_w, C]`.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if (h, w) == (out_h, out_w) {
            return *self;
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        // (source offset, weight) for each output pixel's four taps.
        let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                taps.push([
                    ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                    ((y0 * w + x1) * c, (1.0 - ly) * lx),
                    ((y1 * w + x0) * c, ly * (1.0 - lx)),
                    ((y1 * w + x1) * c, ly * lx),
                ]);
            }
        }
        let plane_in = h * w * c;
        let plane_out = out_h * out_w * c;
        let mut out = vec![0.0; b * plane_out];
        for bi in 0..b {
            let src = &x.data()[bi * plane_in..(bi + 1) * plane_in];
            for (p, tp) in taps.iter().enumerate() {
                let dst = &mut out[bi * plane_out + p * c..bi * plane_out + (p + 1) * c];
                for &(off, wt) in tp {
                    for (d, v) in dst.iter_mut().zip(&src[off..off + c]) {
                        *d += wt * v;
                    }
                }
            }
        }
        self.graph().push(
            Tensor::new(&[b, out_h, out_w, c], out),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; b * plane_in];
                for bi in 0..b {
                    let gsrc = &g.data()[bi * plane_out..(bi + 1) * plane_out];
                    let dplane = &mut dx[bi * plane_in..(bi + 1) * plane_in];
                    for (p, tp) in taps.iter().enumerate() {
                        let gv = &gsrc[p * c..(p + 1) * c];
                        for &(off, wt) in tp {
                            for (d, v) in dplane[off..off + c].iter_mut().zip(gv) {
                                *d += wt * v;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, h, w, c], dx))]
            }),
        )
    }

    /// Rows of a `[R, D]` table selected by `indices`, as `[indices.len(), D]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<'g> {
        let table = self.value();
        let ts = table.shape().to_vec();
        assert_eq!(ts.len(), 2, "gather_rows expects a [R, D] table");
        let (r, d) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < r, "row index {i} out of range {r}");
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        self.graph().push(
            Tensor::new(&[indices.len(), d], out),
            &[*self],
            Box::new(move |g, _| {
                let mut dt = vec![0.0; r * d];
                for (k, &i) in idx.iter().enumerate() {
                    for (a, v) in dt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::new(&[r, d], dt))]
            }),
        )
    }
}
