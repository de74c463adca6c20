use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Group normalization of `[B, H, W, C]` over `(H, W, C / groups)` with a
    /// per-channel affine transform.
    pub fn group_norm(&self, groups: usize, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "group_norm expects [B,H,W,C]");
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cpg = c / groups;
        let n = (hw * cpg) as f64;
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.shape(), &[c]);
        assert_eq!(bt.shape(), &[c]);
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let mut sum = 0.0;
                for p in 0..hw {
                    let base = (bi * hw + p) * c + gi * cpg;
                    sum += xd[base..base + cpg].iter().sum::<f64>();
                }
                let mean = sum / n;
                let mut var = 0.0;
                for p in 0..hw {
                    let base = (bi * hw + p) * c + gi * cpg;
                    var += xd[base..base + cpg].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let is = 1.0 / (var / n + eps).sqrt();
                inv_std[bi * groups + gi] = is;
                for p in 0..hw {
                    let base = (bi * hw + p) * c + gi * cpg;
                    for k in base..base + cpg {
                        xhat[k] = (xd[k] - mean) * is;
                    }
                }
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gm.data()[i % c] + bt.data()[i % c])
            .collect();
        self.graph().push(
            Tensor::new(&s, out),
            &[*self, *gamma, *beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let dgamma = need[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, (&gv, &xh)) in gd.iter().zip(&xhat).enumerate() {
                        d[i % c] += gv * xh;
                    }
                    Tensor::new(&[c], d)
                });
                let dbeta = need[2].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[i % c] += gv;
                    }
                    Tensor::new(&[c], d)
                });
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for gi in 0..groups {
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for p in 0..hw {
                                let base = (bi * hw + p) * c + gi * cpg;
                                for k in base..base + cpg {
                                    let dxh = gd[k] * gm.data()[k % c];
                                    s1 += dxh;
                                    s2 += dxh * xhat[k];
                                }
                            }
                            let is = inv_std[bi * groups + gi];
                            for p in 0..hw {
                                let base = (bi * hw + p) * c + gi * cpg;
                                for k in base..base + cpg {
                                    let dxh = gd[k] * gm.data()[k % c];
                                    dx[k] = is / n * (n * dxh - s1 - xhat[k] * s2);
                                }
                            }
                        }
                    }
                    Tensor::new(&s, dx)
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Layer normalization over the last axis with a per-feature affine.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let c = *s.last().expect("layer_norm on rank-0 tensor");
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.shape(), &[c]);
        assert_eq!(bt.shape(), &[c]);
        let n = c as f64;
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gm.data()[i % c] + bt.data()[i % c])
            .collect();
        self.graph().push(
            Tensor::new(&s, out),
            &[*self, *gamma, *beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let dgamma = need[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, (&gv, &xh)) in gd.iter().zip(&xhat).enumerate() {
                        d[i % c] += gv * xh;
                    }
                    Tensor::new(&[c], d)
                });
                let dbeta = need[2].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[i % c] += gv;
                    }
                    Tensor::new(&[c], d)
                });
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let span = r * c..(r + 1) * c;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for k in span.clone() {
                            let dxh = gd[k] * gm.data()[k % c];
                            s1 += dxh;
                            s2 += dxh * xhat[k];
                        }
                        let is = inv_std[r];
                        for k in span {
                            let dxh = gd[k] * gm.data()[k % c];
                            dx[k] = is / n * (n * dxh - s1 - xhat[k] * s2);
                        }
                    }
                    Tensor::new(&s, dx)
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let c = *s.last().expect("softmax on rank-0 tensor");
        let mut y = vec![0.0; x.numel()];
        for (row, out) in x.data().chunks_exact(c).zip(y.chunks_exact_mut(c)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let yt = Tensor::new(&s, y);
        let yc = yt.clone();
        self.graph().push(
            yt,
            &[*self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.numel()];
                for ((gr, yr), dr) in g.data().chunks_exact(c).zip(yc.data().chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(yc.shape(), dx))]
            }),
        )
    }
}
