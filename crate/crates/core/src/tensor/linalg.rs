//! Matrix products backed by a blocked GEMM kernel.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Strided read-only view of an `rows × cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose, without copying.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out ← a·b + beta·out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Float>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: the asserts above bound every addressed element of a, b and out.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<T: Float> Tensor<T> {
    /// Matrix product over the last two axes.
    ///
    /// Accepts `(m, k)·(k, n)`, batched `(.., m, k)·(.., k, n)` with equal
    /// batch extents, and `(.., m, k)·(k, n)` where the right operand is
    /// shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ls, rs) = (self.shape(), other.shape());
        let mismatch = || Error::shape("matmul", ls, rs);
        if ls.len() < 2 || rs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lhs_batch = &ls[..ls.len() - 2];
        let shared_rhs = rs.len() == 2;
        if !shared_rhs && lhs_batch != &rs[..rs.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = lhs_batch.to_vec();
        out_shape.extend([m, n]);

        let a = self.to_vec();
        let b = other.to_vec();
        let mut out;
        if shared_rhs {
            // Fold the batch into the row dimension: one large product.
            let rows = a.len() / k;
            out = vec![T::zero(); rows * n];
            gemm(
                MatRef::row_major(&a, rows, k),
                MatRef::row_major(&b, k, n),
                T::zero(),
                &mut out,
            );
        } else {
            let batch = a.len() / (m * k);
            out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                gemm(
                    MatRef::row_major(&a[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::row_major(&b[i * k * n..(i + 1) * k * n], k, n),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }

        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            out,
            out_shape,
            "matmul",
            &[self, other],
            move |g| {
                let mut ga = vec![T::zero(); a.len()];
                let mut gb = vec![T::zero(); b.len()];
                if shared_rhs {
                    let rows = a.len() / k;
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    gemm(
                        MatRef::row_major(g, rows, n),
                        MatRef::row_major(&b, k, n).t(),
                        T::zero(),
                        &mut ga,
                    );
                    gemm(
                        MatRef::row_major(&a, rows, k).t(),
                        MatRef::row_major(g, rows, n),
                        T::zero(),
                        &mut gb,
                    );
                } else {
                    let batch = a.len() / (m * k);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        gemm(
                            MatRef::row_major(gi, m, n),
                            MatRef::row_major(&b[i * k * n..(i + 1) * k * n], k, n).t(),
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                        gemm(
                            MatRef::row_major(&a[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::row_major(gi, m, n),
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
                vec![need_a.then_some(ga), need_b.then_some(gb)]
            },
        ))
    }
}
