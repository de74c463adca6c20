use std::rc::Rc;

use crate::graph::Var;
use crate::tensor::{strides, Tensor};

/// Numpy-style broadcast of two shapes (aligned from the right).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    (0..rank)
        .map(|i| {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// For every element of `out_shape`, the linear offset of the element of an
/// input of `in_shape` that broadcasts onto it.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        let o = rank - in_shape.len() + i;
        if in_shape[i] != 1 {
            eff[o] = in_strides[i];
        }
    }
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// True when `inner` broadcasts against `outer` by plain cycling, i.e. after
/// dropping leading ones it equals a suffix of `outer`.
fn is_suffix(outer: &[usize], inner: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = inner.iter().take_while(|&&d| d == 1).count();
        &inner[lead..]
    };
    trimmed.len() <= outer.len() && outer[outer.len() - trimmed.len()..] == *trimmed
}

/// Elementwise binary map with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == out_shape.as_slice() && is_suffix(&out_shape, b.shape()) {
        let m = bd.len();
        ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % m])).collect()
    } else if b.shape() == out_shape.as_slice() && is_suffix(&out_shape, a.shape()) {
        let m = ad.len();
        bd.iter().enumerate().map(|(i, &y)| f(ad[i % m], y)).collect()
    } else {
        let oa = broadcast_offsets(&out_shape, a.shape());
        let ob = broadcast_offsets(&out_shape, b.shape());
        (0..n).map(|i| f(ad[oa[i]], bd[ob[i]])).collect()
    };
    Tensor::new(&out_shape, data)
}

/// Sum `t` down to `shape`, undoing a broadcast.
pub fn reduce_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = Tensor::zeros(shape);
    let m = out.numel();
    if is_suffix(t.shape(), shape) && t.rank() >= shape.len() {
        let od = out.data_mut();
        for (i, &v) in t.data().iter().enumerate() {
            od[i % m] += v;
        }
    } else {
        let offs = broadcast_offsets(t.shape(), shape);
        let od = out.data_mut();
        for (&o, &v) in offs.iter().zip(t.data()) {
            od[o] += v;
        }
    }
    out
}

/// Expand `t` to `shape` by broadcasting.
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    broadcast_binary(&Tensor::zeros(shape), t, |_, y| y)
}

impl<'g> Var<'g> {
    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph().push(
            out,
            &[*self, *other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(g, &sa)),
                    need[1].then(|| reduce_to_shape(g, &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph().push(
            out,
            &[*self, *other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(g, &sa)),
                    need[1].then(|| reduce_to_shape(g, &sb).scale(-1.0)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x * y);
        self.graph().push(
            out,
            &[*self, *other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(&broadcast_binary(g, &b, |x, y| x * y), a.shape())),
                    need[1].then(|| reduce_to_shape(&broadcast_binary(g, &a, |x, y| x * y), b.shape())),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(&a, &b, |x, y| x / y);
        self.graph().push(
            out,
            &[*self, *other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| reduce_to_shape(&broadcast_binary(g, &b, |x, y| x / y), a.shape()));
                let gb = need[1].then(|| {
                    // d(a/b)/db = -a / b^2
                    let q = broadcast_binary(&a, &b, |x, y| -x / (y * y));
                    reduce_to_shape(&broadcast_binary(g, &q, |x, y| x * y), b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Var<'g> {
        let out = self.value().map(|v| v + k);
        self.graph().push(out, &[*self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, k: f64) -> Var<'g> {
        let out = self.value().map(|v| v * k);
        self.graph().push(out, &[*self], Box::new(move |g, _| vec![Some(g.scale(k))]))
    }

    pub fn neg(&self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    /// Elementwise map with derivative `df(x, y)` given input `x` and output `y`.
    pub(crate) fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph().push(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data))]
            }),
        )
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sin(&self) -> Var<'g> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Var<'g> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<'g> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
