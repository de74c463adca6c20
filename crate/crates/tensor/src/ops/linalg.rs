use crate::graph::Var;
use crate::tensor::Tensor;

/// Row/column strides of a matrix operand stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_stride: cols as isize, col_stride: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix, viewed in place.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, row_stride: 1, col_stride: cols as isize }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is row-major.
pub fn gemm(alpha: f64, a: &[f64], la: MatLayout, b: &[f64], lb: MatLayout, beta: f64, c: &mut [f64]) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let max_off = |l: MatLayout| (l.rows as isize - 1) * l.row_stride + (l.cols as isize - 1) * l.col_stride;
    assert!((max_off(la) as usize) < a.len(), "gemm lhs out of bounds");
    assert!((max_off(lb) as usize) < b.len(), "gemm rhs out of bounds");
    // SAFETY: bounds of all three operands were checked above; strides are
    // non-negative so every accessed element lies inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'g> Var<'g> {
    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`. `other` is either `[k, n]` (shared across the
    /// batch) or `[..., k, n]` with the same leading dimensions.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let ash = a.shape().to_vec();
        let bsh = b.shape().to_vec();
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, kb, "matmul inner dimension mismatch {ash:?} x {bsh:?}");
        let graph = self.graph();
        if bsh.len() == 2 {
            // Fold every leading axis of `a` into the row count.
            let rows = a.numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(1.0, a.data(), MatLayout::row_major(rows, k), b.data(), MatLayout::row_major(k, n), 0.0, &mut out);
            graph.count_mult_adds((rows * k * n) as u64);
            let mut out_shape = ash.clone();
            *out_shape.last_mut().unwrap() = n;
            return graph.push(
                Tensor::new(&out_shape, out),
                &[*self, *other],
                Box::new(move |g, need| {
                    let ga = need[0].then(|| {
                        let mut d = vec![0.0; rows * k];
                        gemm(1.0, g.data(), MatLayout::row_major(rows, n), b.data(), MatLayout::transposed(k, n), 0.0, &mut d);
                        Tensor::new(&ash, d)
                    });
                    let gb = need[1].then(|| {
                        let mut d = vec![0.0; k * n];
                        gemm(1.0, a.data(), MatLayout::transposed(rows, k), g.data(), MatLayout::row_major(rows, n), 0.0, &mut d);
                        Tensor::new(&bsh, d)
                    });
                    vec![ga, gb]
                }),
            );
        }
        assert_eq!(ash[..ash.len() - 2], bsh[..bsh.len() - 2], "matmul batch dimensions differ");
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                1.0,
                &a.data()[i * m * k..(i + 1) * m * k],
                MatLayout::row_major(m, k),
                &b.data()[i * k * n..(i + 1) * k * n],
                MatLayout::row_major(k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        graph.count_mult_adds((batch * m * k * n) as u64);
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        graph.push(
            Tensor::new(&out_shape, out),
            &[*self, *other],
            Box::new(move |g, need| {
                let gd = g.data();
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            1.0,
                            &gd[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            &b.data()[i * k * n..(i + 1) * k * n],
                            MatLayout::transposed(k, n),
                            0.0,
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor::new(&ash, d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            1.0,
                            &a.data()[i * m * k..(i + 1) * m * k],
                            MatLayout::transposed(m, k),
                            &gd[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            0.0,
                            &mut d[i * k * n..(i + 1) * k * n],
                        );
                    }
                    Tensor::new(&bsh, d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x W + b` over the last axis, with `W: [in, out]` and `b: [out]`.
    pub fn linear(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Var<'g> {
        let y = self.matmul(weight);
        match bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Var<'g> {
        let r = self.shape().len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(1.0, &a, MatLayout::transposed(2, 2), &b, MatLayout::row_major(2, 2), 0.0, &mut c);
        // a^T b = [[1,3],[2,4]] [[5,6],[7,8]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
