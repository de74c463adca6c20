use crate::graph::Var;
use crate::ops::linalg::{gemm, MatLayout};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.h * g.w * g.cin];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        for (d, s) in x[dst..dst + g.cin].iter_mut().zip(&cols[src..src + g.cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g> Var<'g> {
    /// 2-D convolution (cross-correlation) of a `[B, H, W, Cin]` input with a
    /// `[KH, KW, Cin, Cout]` kernel, zero padding on every side.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be [B,H,W,C], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [KH,KW,Cin,Cout], got {ws:?}");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch: input {xs:?}, kernel {ws:?}");
        assert!(stride >= 1);
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
            stride,
            pad,
            ho: conv_out_size(xs[1], ws[0], stride, pad),
            wo: conv_out_size(xs[2], ws[1], stride, pad),
        };
        let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
        let mut out = vec![0.0; rows * cout];
        {
            let owned;
            let cols: &[f64] = if geom.is_pointwise() {
                x.data()
            } else {
                owned = im2col(x.data(), &geom);
                &owned
            };
            gemm(1.0, cols, MatLayout::row_major(rows, patch), w.data(), MatLayout::row_major(patch, cout), 0.0, &mut out);
        }
        let graph = self.graph();
        graph.count_mult_adds((rows * patch * cout) as u64);
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[cout], "conv2d bias must be [Cout]");
            for row in out.chunks_exact_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(*b);
        }
        let out = Tensor::new(&[geom.batch, geom.ho, geom.wo, cout], out);
        graph.push(
            out,
            &parents,
            Box::new(move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(1.0, gd, MatLayout::row_major(rows, cout), w.data(), MatLayout::transposed(patch, cout), 0.0, &mut dcols);
                    let dx = if geom.is_pointwise() { dcols } else { col2im(&dcols, &geom) };
                    Tensor::new(&[geom.batch, geom.h, geom.w, geom.cin], dx)
                });
                let gw = need[1].then(|| {
                    let owned;
                    let cols: &[f64] = if geom.is_pointwise() {
                        x.data()
                    } else {
                        owned = im2col(x.data(), &geom);
                        &owned
                    };
                    let mut dw = vec![0.0; patch * cout];
                    gemm(1.0, cols, MatLayout::transposed(rows, patch), gd, MatLayout::row_major(rows, cout), 0.0, &mut dw);
                    Tensor::new(&[geom.kh, geom.kw, geom.cin, cout], dw)
                });
                let mut grads = vec![gx, gw];
                if need.len() == 3 {
                    grads.push(need[2].then(|| {
                        let mut db = vec![0.0; cout];
                        for row in gd.chunks_exact(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::new(&[cout], db)
                    }));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour upsampling of `[B, H, W, C]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = ((bi * h + oy / factor) * w + ox / factor) * c;
                    let dst = ((bi * ho + oy) * wo + ox) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
        self.graph().push(
            Tensor::new(&[b, ho, wo, c], out),
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let dst = ((bi * h + oy / factor) * w + ox / factor) * c;
                            let src = ((bi * ho + oy) * wo + ox) * c;
                            for (d, v) in dx[dst..dst + c].iter_mut().zip(&g.data()[src..src + c]) {
                                *d += v;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, h, w, c], dx))]
            }),
        )
    }
}
