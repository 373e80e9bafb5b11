//! Fused neural-network operations with hand-written backward rules.

use super::linalg::{gemm, MatRef};
use super::ops::split_at_axis;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution (same for both spatial axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeometry { stride, padding }
    }

    /// `floor((extent + 2p - kernel) / s) + 1`, or `None` when the kernel
    /// does not fit.
    pub fn output_extent(&self, extent: usize, kernel: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        (self.stride > 0 && kernel > 0 && padded >= kernel)
            .then(|| (padded - kernel) / self.stride + 1)
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and blend them into the running
    /// buffers with the given momentum.
    Train { momentum: f64 },
    /// Normalize with the stored running statistics.
    Eval,
}

impl<T: Float> Tensor<T> {
    /// Exponentially normalizes along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                extent: self.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (x[at(a)] - max).exp();
                    y[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    y[at(a)] = y[at(a)] / total;
                }
            }
        }
        drop(x);
        let probs = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), "softmax", &[self], move |g| {
            // dx = y ⊙ (g − Σ g⊙y)
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: T = (0..len).map(|a| g[at(a)] * probs[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = probs[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&self) -> Tensor<T> {
        let x = self.to_vec();
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        let cdf = move |v: T| half * (T::one() + (v * inv_sqrt2).erf());
        let data = x.iter().map(|&v| v * cdf(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), "gelu", &[self], move |g| {
            let gx = g
                .iter()
                .zip(&x)
                .map(|(&g, &v)| {
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    g * (cdf(v) + v * pdf)
                })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// (population) variance, then applies `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let x = self.data();
        let gamma = gain.to_vec();
        let beta = bias.data();
        let rows = x.len() / d;
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gamma[j] + beta[j];
            }
        }
        drop((x, beta));
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "layer_norm",
            &[self, gain, bias],
            move |g| {
                let mut gx = vec![T::zero(); g.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let dh = gr[j] * gamma[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        gx[r * d + j] =
                            inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                vec![Some(gx), Some(ggain), Some(gbias)]
            },
        ))
    }

    /// Per-channel normalization of an `(N, C, ...)` tensor over every axis
    /// except the channel axis.
    ///
    /// In training mode the running buffers are updated in place as
    /// `r ← (1 − momentum)·r + momentum·batch_stat`, using the unbiased batch
    /// variance.
    pub fn batch_norm(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: BatchNormMode,
        eps: T,
    ) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::shape("batch_norm", self.shape(), gain.shape()));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        let spatial: usize = self.shape()[2..].iter().product();
        for t in [gain, bias, running_mean, running_var] {
            if t.shape() != [c] {
                return Err(Error::shape("batch_norm", self.shape(), t.shape()));
            }
        }
        let count = n * spatial;
        let x = self.data();
        let at = |b: usize, ch: usize, s: usize| (b * c + ch) * spatial + s;

        let (mean, var) = match mode {
            BatchNormMode::Train { .. } => {
                let inv = T::one() / T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut total = T::zero();
                    for b in 0..n {
                        total += x[at(b, ch, 0)..at(b, ch, 0) + spatial].iter().copied().sum();
                    }
                    let m = total * inv;
                    let mut sq = T::zero();
                    for b in 0..n {
                        sq += x[at(b, ch, 0)..at(b, ch, 0) + spatial]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum();
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };

        if let BatchNormMode::Train { momentum } = mode {
            let mom = T::lit(momentum);
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            running_mean.update_data(|r| {
                r.iter_mut()
                    .zip(&mean)
                    .for_each(|(r, &m)| *r = (T::one() - mom) * *r + mom * m)
            });
            running_var.update_data(|r| {
                r.iter_mut()
                    .zip(&var)
                    .for_each(|(r, &v)| *r = (T::one() - mom) * *r + mom * v * unbias)
            });
        }

        let gamma = gain.to_vec();
        let beta = bias.data();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = at(b, ch, 0);
                for s in 0..spatial {
                    let h = (x[base + s] - mean[ch]) * inv_std[ch];
                    xhat[base + s] = h;
                    y[base + s] = h * gamma[ch] + beta[ch];
                }
            }
        }
        drop((x, beta));
        let training = matches!(mode, BatchNormMode::Train { .. });
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "batch_norm",
            &[self, gain, bias],
            move |g| {
                let at = |b: usize, ch: usize| (b * c + ch) * spatial;
                let mut gx = vec![T::zero(); g.len()];
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                let inv_count = T::one() / T::from_usize(count).unwrap();
                for ch in 0..c {
                    let (mut sum_g, mut sum_gh) = (T::zero(), T::zero());
                    for b in 0..n {
                        let base = at(b, ch);
                        for s in 0..spatial {
                            sum_g += g[base + s];
                            sum_gh += g[base + s] * xhat[base + s];
                        }
                    }
                    ggain[ch] = sum_gh;
                    gbias[ch] = sum_g;
                    let scale = gamma[ch] * inv_std[ch];
                    for b in 0..n {
                        let base = at(b, ch);
                        for s in 0..spatial {
                            gx[base + s] = if training {
                                scale
                                    * (g[base + s]
                                        - inv_count * sum_g
                                        - xhat[base + s] * inv_count * sum_gh)
                            } else {
                                scale * g[base + s]
                            };
                        }
                    }
                }
                vec![Some(gx), Some(ggain), Some(gbias)]
            },
        ))
    }

    /// 2-D cross-correlation of `(N, C, H, W)` input with `(O, C, kh, kw)`
    /// filters, optional per-output-channel bias.
    pub fn conv2d(
        &self,
        filters: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv2dGeometry,
    ) -> Result<Tensor<T>> {
        let mismatch = || Error::shape("conv2d", self.shape(), filters.shape());
        if self.rank() != 4 || filters.rank() != 4 || self.shape()[1] != filters.shape()[1] {
            return Err(mismatch());
        }
        let [n, c, h, w] = <[usize; 4]>::try_from(self.shape()).unwrap();
        let [o, _, kh, kw] = <[usize; 4]>::try_from(filters.shape()).unwrap();
        let (Some(oh), Some(ow)) = (geom.output_extent(h, kh), geom.output_extent(w, kw)) else {
            return Err(mismatch());
        };
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape("conv2d", filters.shape(), b.shape()));
            }
        }
        let patch = c * kh * kw;
        let positions = oh * ow;
        let rows = n * positions;
        let (s, p) = (geom.stride as isize, geom.padding as isize);

        // Row r = (b, oy, ox), column = (ch, ky, kx).
        let mut cols = vec![T::zero(); rows * patch];
        {
            let x = self.data();
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = &mut cols[((b * oh + oy) * ow + ox) * patch..][..patch];
                        for ch in 0..c {
                            let plane = &x[(b * c + ch) * h * w..][..h * w];
                            for ky in 0..kh {
                                let iy = oy as isize * s - p + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox as isize * s - p + kx as isize;
                                    if ix >= 0 && ix < w as isize {
                                        row[(ch * kh + ky) * kw + kx] =
                                            plane[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let wdata = filters.to_vec();
        // (rows × patch)·(patch × o); the filter bank viewed transposed.
        let mut flat = vec![T::zero(); rows * o];
        gemm(
            MatRef::row_major(&cols, rows, patch),
            MatRef::row_major(&wdata, o, patch).t(),
            T::zero(),
            &mut flat,
        );
        let bias_data = bias.map(|b| b.to_vec());
        let mut out = vec![T::zero(); n * o * positions];
        for b in 0..n {
            for pos in 0..positions {
                let src = &flat[(b * positions + pos) * o..][..o];
                for (oc, &v) in src.iter().enumerate() {
                    let shift = bias_data.as_ref().map_or(T::zero(), |bd| bd[oc]);
                    out[(b * o + oc) * positions + pos] = v + shift;
                }
            }
        }

        let mut inputs: Vec<&Tensor<T>> = vec![self, filters];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let need_x = self.requires_grad();
        Ok(Tensor::from_op(
            out,
            vec![n, o, oh, ow],
            "conv2d",
            &inputs,
            move |g| {
                // Gather the upstream gradient into (rows × o).
                let mut gflat = vec![T::zero(); rows * o];
                for b in 0..n {
                    for oc in 0..o {
                        let src = &g[(b * o + oc) * positions..][..positions];
                        for (pos, &v) in src.iter().enumerate() {
                            gflat[(b * positions + pos) * o + oc] = v;
                        }
                    }
                }
                let mut gw = vec![T::zero(); o * patch];
                gemm(
                    MatRef::row_major(&gflat, rows, o).t(),
                    MatRef::row_major(&cols, rows, patch),
                    T::zero(),
                    &mut gw,
                );
                let gx = need_x.then(|| {
                    let mut gcols = vec![T::zero(); rows * patch];
                    gemm(
                        MatRef::row_major(&gflat, rows, o),
                        MatRef::row_major(&wdata, o, patch),
                        T::zero(),
                        &mut gcols,
                    );
                    let mut gx = vec![T::zero(); n * c * h * w];
                    for b in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = &gcols[((b * oh + oy) * ow + ox) * patch..][..patch];
                                for ch in 0..c {
                                    let plane = &mut gx[(b * c + ch) * h * w..][..h * w];
                                    for ky in 0..kh {
                                        let iy = oy as isize * s - p + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ox as isize * s - p + kx as isize;
                                            if ix >= 0 && ix < w as isize {
                                                plane[iy as usize * w + ix as usize] +=
                                                    row[(ch * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gx
                });
                let mut grads = vec![gx, Some(gw)];
                if has_bias {
                    let mut gb = vec![T::zero(); o];
                    for row in gflat.chunks_exact(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    grads.push(Some(gb));
                }
                grads
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` for
    /// `(n, classes)` logits, computed through a fused log-sum-exp.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", self.shape(), &[labels.len()]));
        }
        let (n, classes) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: classes,
            });
        }
        let x = self.data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        drop(x);
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![total * inv_n],
            vec![1],
            "cross_entropy",
            &[self],
            move |g| {
                let scale = g[0] * inv_n;
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    gx[r * classes + label] -= scale;
                }
                vec![Some(gx)]
            },
        ))
    }
}
