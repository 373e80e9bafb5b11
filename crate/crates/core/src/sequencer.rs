//! Sequence construction: turns a `(B, M, C, D, H, W)` volume batch into a
//! flat batch of 3-channel patch images for the CNN, and regroups the
//! per-patch features into per-sample token sequences.
//!
//! Consecutive, non-overlapping slice triples `(0..3, 3..6, ...)` become the
//! three channels of one image. Each image is cut into a `K × K` grid of
//! `(H/K) × (W/K)` tiles.
//!
//! Canonical order (version [`ORDERING_VERSION`]), slowest-varying first:
//! sample, modality, channel, slice triple, grid row, grid column. Tokens of
//! one sample are contiguous, so regrouping is a reshape.

use ndarray::Array6;

use crate::error::{Error, Result};
use crate::preprocess::{BatchExtents, VolumeBatch};
use crate::tensor::{Float, Tensor};

pub const ORDERING_VERSION: u32 = 1;

/// Slices stacked into one patch image.
pub const SLICES_PER_IMAGE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SequencePlan {
    pub grid: usize,
    pub extents: BatchExtents,
    pub triples: usize,
    pub patch_height: usize,
    pub patch_width: usize,
}

impl SequencePlan {
    /// Validates divisibility of `extents` by the slice triple and the grid.
    pub fn new(extents: BatchExtents, grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::contract("grid divisor K must be at least 1"));
        }
        let check = |axis: &str, extent: usize, divisor: usize| {
            if extent % divisor == 0 {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "axis {axis} extent {extent} is not divisible by {divisor}"
                )))
            }
        };
        check("D", extents.depth, SLICES_PER_IMAGE)?;
        check("H", extents.height, grid)?;
        check("W", extents.width, grid)?;
        Ok(SequencePlan {
            grid,
            extents,
            triples: extents.depth / SLICES_PER_IMAGE,
            patch_height: extents.height / grid,
            patch_width: extents.width / grid,
        })
    }

    /// `M·C·(D/3)·K²`
    pub fn tokens_per_sample(&self) -> usize {
        self.extents.modalities * self.extents.channels * self.triples * self.grid * self.grid
    }

    /// `(1/3)·B·M·C·D·K²`
    pub fn patch_count(&self) -> usize {
        self.extents.batch * self.tokens_per_sample()
    }

    pub fn patch_shape(&self) -> [usize; 4] {
        [
            self.patch_count(),
            SLICES_PER_IMAGE,
            self.patch_height,
            self.patch_width,
        ]
    }

    /// Flat patch index in canonical order.
    pub fn patch_index(
        &self,
        sample: usize,
        modality: usize,
        channel: usize,
        triple: usize,
        grid_row: usize,
        grid_col: usize,
    ) -> usize {
        let e = &self.extents;
        ((((sample * e.modalities + modality) * e.channels + channel) * self.triples + triple)
            * self.grid
            + grid_row)
            * self.grid
            + grid_col
    }
}

/// Patch images `(count, 3, H/K, W/K)` with the plan that produced them.
#[derive(Debug, Clone)]
pub struct PatchBatch<T: Float = f64> {
    pub data: Tensor<T>,
    pub plan: SequencePlan,
}

impl<T: Float> PatchBatch<T> {
    pub fn count(&self) -> usize {
        self.data.shape()[0]
    }
}

pub fn build_patch_batch<T: Float>(batch: &VolumeBatch, grid: usize) -> Result<PatchBatch<T>> {
    let plan = SequencePlan::new(batch.extents(), grid)?;
    let e = plan.extents;
    let (ph, pw) = (plan.patch_height, plan.patch_width);
    let plane = ph * pw;
    let mut data = vec![T::zero(); plan.patch_count() * SLICES_PER_IMAGE * plane];
    let src = batch
        .data
        .as_slice()
        .map(std::borrow::Cow::Borrowed)
        .unwrap_or_else(|| std::borrow::Cow::Owned(batch.data.iter().copied().collect()));
    for b in 0..e.batch {
        for m in 0..e.modalities {
            for c in 0..e.channels {
                let volume_base = (((b * e.modalities + m) * e.channels) + c) * e.depth;
                for t in 0..plan.triples {
                    for gy in 0..grid {
                        for gx in 0..grid {
                            let patch = plan.patch_index(b, m, c, t, gy, gx);
                            for s in 0..SLICES_PER_IMAGE {
                                let slice = volume_base + t * SLICES_PER_IMAGE + s;
                                let dst = &mut data[(patch * SLICES_PER_IMAGE + s) * plane..][..plane];
                                for y in 0..ph {
                                    let row = (slice * e.height + gy * ph + y) * e.width + gx * pw;
                                    for (d, &v) in dst[y * pw..(y + 1) * pw]
                                        .iter_mut()
                                        .zip(&src[row..row + pw])
                                    {
                                        *d = T::lit(v as f64);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PatchBatch {
        data: Tensor::from_vec(data, &plan.patch_shape())?,
        plan,
    })
}

/// Inverse of [`build_patch_batch`]: scatters patch pixels back into a
/// `(B, M, C, D, H, W)` array.
pub fn reassemble<T: Float>(patches: &PatchBatch<T>) -> Array6<f32> {
    let plan = patches.plan;
    let e = plan.extents;
    let (ph, pw) = (plan.patch_height, plan.patch_width);
    let data = patches.data.data();
    Array6::from_shape_fn(
        (e.batch, e.modalities, e.channels, e.depth, e.height, e.width),
        |(b, m, c, d, h, w)| {
            let patch = plan.patch_index(b, m, c, d / SLICES_PER_IMAGE, h / ph, w / pw);
            let offset = ((patch * SLICES_PER_IMAGE + d % SLICES_PER_IMAGE) * ph + h % ph) * pw + w % pw;
            data[offset].to_f64().unwrap() as f32
        },
    )
}

/// Regroups per-patch features `(B·N, P)` into `(B, N, P)`.
pub fn regroup_tokens<T: Float>(features: &Tensor<T>, plan: &SequencePlan) -> Result<Tensor<T>> {
    let n = plan.tokens_per_sample();
    let b = plan.extents.batch;
    if features.rank() != 2 || features.shape()[0] != b * n {
        return Err(Error::contract(format!(
            "regroup_tokens: expected {} feature rows ({b} samples × {n} tokens), got shape {:?}",
            b * n,
            features.shape()
        )));
    }
    let p = features.shape()[1];
    features.reshape(&[b, n, p])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extents(b: usize, m: usize, c: usize, d: usize, h: usize, w: usize) -> BatchExtents {
        BatchExtents {
            batch: b,
            modalities: m,
            channels: c,
            depth: d,
            height: h,
            width: w,
        }
    }

    #[test]
    fn large_scale_counts() {
        let plan = SequencePlan::new(extents(1, 2, 1, 18, 448, 448), 2).unwrap();
        assert_eq!(plan.patch_count(), 48);
        assert_eq!(plan.patch_shape(), [48, 3, 224, 224]);
    }

    #[test]
    fn divisibility_errors_name_the_axis() {
        let err = SequencePlan::new(extents(1, 1, 1, 4, 8, 8), 2).unwrap_err();
        assert!(err.to_string().contains("axis D"), "{err}");
        let err = SequencePlan::new(extents(1, 1, 1, 6, 9, 8), 2).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
        let err = SequencePlan::new(extents(1, 1, 1, 6, 8, 10), 4).unwrap_err();
        assert!(err.to_string().contains("axis W"), "{err}");
    }

    #[test]
    fn minimal_case_stacks_three_slices() {
        let data = Array6::from_shape_fn((1, 1, 1, 3, 2, 2), |(_, _, _, d, h, w)| (d * 4 + h * 2 + w) as f32);
        let batch = VolumeBatch::new(data, vec![0], 1).unwrap();
        let pb = build_patch_batch::<f64>(&batch, 1).unwrap();
        assert_eq!(pb.data.shape(), &[1, 3, 2, 2]);
        assert_eq!(pb.data.to_vec(), (0..12).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn regroup_checks_count() {
        let plan = SequencePlan::new(extents(2, 1, 1, 3, 4, 4), 2).unwrap();
        let ok = Tensor::<f64>::zeros(&[8, 5]);
        assert_eq!(regroup_tokens(&ok, &plan).unwrap().shape(), &[2, 4, 5]);
        assert!(matches!(
            regroup_tokens(&Tensor::<f64>::zeros(&[7, 5]), &plan),
            Err(Error::Contract(_))
        ));
    }
}
