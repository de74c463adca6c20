use crate::graph::Var;
use crate::ops::elementwise::{broadcast_to, reduce_to_shape};
use crate::tensor::{strides, Tensor};

/// Permute axes of a tensor.
pub fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let rank = t.rank();
    assert_eq!(axes.len(), rank, "permutation rank mismatch");
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let src = t.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// Split a shape at `axis` into (outer, axis length, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(t.shape(), axis);
    assert!(start + len <= n, "slice {start}+{len} out of range {n}");
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

impl<'g> Var<'g> {
    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape);
        self.graph()
            .push(out, &[*self], Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let out = permute_tensor(&self.value(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph()
            .push(out, &[*self], Box::new(move |g, _| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let out = slice_tensor(&v, axis, start, len);
        self.graph().push(
            out,
            &[*self],
            Box::new(move |g, _| {
                let (outer, n, inner) = split_at_axis(&in_shape, axis);
                let mut gi = Tensor::zeros(&in_shape);
                let gd = gi.data_mut();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Var<'g> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out = reduce_to_shape(&v, &out_shape);
        self.graph()
            .push(out, &[*self], Box::new(move |g, _| vec![Some(broadcast_to(g, &in_shape))]))
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_keepdim(axes).mul_scalar(1.0 / n as f64)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Var<'g> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum());
        self.graph()
            .push(out, &[*self], Box::new(move |g, _| vec![Some(Tensor::full(&in_shape, g.item()))]))
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value().numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty(), "concat of nothing");
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    for v in &values {
        assert_eq!(v.rank(), first.len(), "concat rank mismatch");
        for (ax, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
            assert!(ax == axis || a == b, "concat shape mismatch {:?} vs {first:?}", v.shape());
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = split_at_axis(&first, axis);
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            let base = o * len * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
    }
    let graph = vars[0].graph();
    graph.push(
        Tensor::new(&out_shape, data),
        vars,
        Box::new(move |g, need| {
            let mut start = 0;
            lens.iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let part = n.then(|| slice_tensor(g, axis, start, len));
                    start += len;
                    part
                })
                .collect()
        }),
    )
}
