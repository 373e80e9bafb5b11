//! Elementwise, reduction and shape operations.

use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

/// Sums `g` over its leading repeats of a trailing block of `inner` elements.
fn sum_leading<T: Float>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for chunk in g.chunks_exact(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn resolve_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<usize> {
    if axis < shape.len() {
        Ok(axis)
    } else {
        Err(Error::Index {
            op,
            index: axis,
            extent: shape.len(),
        })
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner) counts.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `data` (of `shape`) with its axes reordered so that output
/// axis `i` is input axis `perm[i]`.
fn permute_data<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += step[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    out
}

impl<T: Float> Tensor<T> {
    /// Elementwise sum. `other` may have the same shape or a trailing suffix
    /// of this shape, in which case it is broadcast over the leading axes.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if !is_suffix(self.shape(), other.shape()) {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        let inner = other.numel();
        let a = self.data();
        let b = other.data();
        let data: Vec<T> = a
            .chunks_exact(inner)
            .flat_map(|chunk| chunk.iter().zip(b.iter()).map(|(&x, &y)| x + y))
            .collect();
        drop((a, b));
        let broadcast = inner != self.numel();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add",
            &[self, other],
            move |g| {
                let gb = if broadcast {
                    sum_leading(g, inner)
                } else {
                    g.to_vec()
                };
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sub", self.shape(), other.shape()));
        }
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "sub",
            &[self, other],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mul", self.shape(), other.shape()));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let data: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul",
            &[self, other],
            move |g| {
                let ga = g.iter().zip(&b).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(&a).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(data, self.shape().to_vec(), "scale", &[self], move |g| {
            vec![Some(g.iter().map(|&v| v * factor).collect())]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let x = self.to_vec();
        let data = x.iter().map(|&v| v.max(T::zero())).collect();
        Tensor::from_op(data, self.shape().to_vec(), "relu", &[self], move |g| {
            let gx = g
                .iter()
                .zip(&x)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![1], "sum", &[self], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::from_usize(n).unwrap();
        let total: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![total * inv], vec![1], "mean", &[self], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Mean over one axis; the axis is removed from the shape (a rank-1
    /// input yields shape `[1]`).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let axis = resolve_axis("mean_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let inv = T::one() / T::from_usize(len).unwrap();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(out, shape, "mean_axis", &[self], move |g| {
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let row = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    gx.extend(row.iter().map(|&v| v * inv));
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            &[self],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.shape(), perm));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(&self.data(), &in_shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, "permute", &[self], move |g| {
            vec![Some(permute_data(g, &grad_shape, &inverse))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        resolve_axis("transpose", self.shape(), a.max(b))?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let axis = resolve_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (view, &len) in views.iter().zip(&lens) {
                    data.extend_from_slice(&view[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        Ok(Tensor::from_op(data, shape, "concat", parts, move |g| {
            let mut grads: Vec<Vec<T>> = lens
                .iter()
                .map(|&len| Vec::with_capacity(outer * len * inner))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (grad, &len) in grads.iter_mut().zip(&lens) {
                    grad.extend_from_slice(&g[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let axis = resolve_axis("narrow", self.shape(), axis)?;
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        if len == 0 || start + len > extent {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(data, shape, "narrow", &[self], move |g| {
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Repeats this tensor over new leading axes `leading`.
    pub fn broadcast_to(&self, leading: &[usize]) -> Tensor<T> {
        let inner = self.numel();
        let reps = numel(leading);
        let x = self.data();
        let mut data = Vec::with_capacity(reps * inner);
        for _ in 0..reps {
            data.extend_from_slice(&x);
        }
        drop(x);
        let mut shape = leading.to_vec();
        shape.extend_from_slice(self.shape());
        Tensor::from_op(data, shape, "broadcast_to", &[self], move |g| {
            vec![Some(sum_leading(g, inner))]
        })
    }
}
