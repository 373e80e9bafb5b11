//! Volume ingestion and preprocessing: foreground extraction, resampling,
//! augmentation, and the on-disk volume container.

mod augment;
pub mod container;
mod otsu;
mod resample;

use ndarray::{Array3, Array5, Array6, ArrayView5, Axis};

pub use augment::{add_gaussian_noise, flip_mask, random_flip};
pub use otsu::{between_class_variance, foreground_crop, intensity_histogram, otsu_threshold};
pub use resample::resample;

use crate::error::{Error, Result};

/// A single 3-D intensity volume `(D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Physical voxel size per axis, when known.
    pub spacing: Option<[f64; 3]>,
    pub modality: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, modality: impl Into<String>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("volume intensities must be finite"));
        }
        if data.is_empty() {
            return Err(Error::contract("volume extents must be at least 1"));
        }
        Ok(Volume {
            data,
            spacing: None,
            modality: modality.into(),
        })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Extents of a `(B, M, C, D, H, W)` batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchExtents {
    pub batch: usize,
    pub modalities: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

/// Labeled batch of multi-modal volumes, shape `(B, M, C, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBatch {
    pub data: Array6<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl VolumeBatch {
    pub fn new(data: Array6<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "volume batch extents must be at least 1, got {:?}",
                data.shape()
            )));
        }
        if labels.len() != data.shape()[0] {
            return Err(Error::shape("VolumeBatch", data.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                op: "VolumeBatch",
                index: bad,
                extent: num_classes,
            });
        }
        Ok(VolumeBatch {
            data,
            labels,
            num_classes,
        })
    }

    /// Stacks per-sample `(M, C, D, H, W)` arrays; all must share extents.
    pub fn from_samples(samples: &[Array5<f32>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("volume batch needs at least one sample"))?;
        if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
            return Err(Error::shape("VolumeBatch", first.shape(), bad.shape()));
        }
        let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
        let data = ndarray::stack(Axis(0), &views).map_err(|e| Error::contract(e.to_string()))?;
        Self::new(data, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extents(&self) -> BatchExtents {
        let s = self.data.shape();
        BatchExtents {
            batch: s[0],
            modalities: s[1],
            channels: s[2],
            depth: s[3],
            height: s[4],
            width: s[5],
        }
    }

    pub fn sample(&self, index: usize) -> ArrayView5<'_, f32> {
        self.data.index_axis(Axis(0), index)
    }

    /// The sub-batch at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> VolumeBatch {
        VolumeBatch {
            data: self.data.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_validation() {
        let data = Array6::<f32>::zeros((2, 1, 1, 3, 2, 2));
        assert!(VolumeBatch::new(data.clone(), vec![0, 1], 2).is_ok());
        assert!(VolumeBatch::new(data.clone(), vec![0], 2).is_err());
        assert!(VolumeBatch::new(data, vec![0, 2], 2).is_err());
    }

    #[test]
    fn select_reorders() {
        let mut data = Array6::<f32>::zeros((3, 1, 1, 1, 1, 1));
        for i in 0..3 {
            data[[i, 0, 0, 0, 0, 0]] = i as f32;
        }
        let b = VolumeBatch::new(data, vec![0, 1, 2], 3).unwrap();
        let s = b.select(&[2, 0]);
        assert_eq!(s.labels, vec![2, 0]);
        assert_eq!(s.data[[0, 0, 0, 0, 0, 0]], 2.0);
    }

    #[test]
    fn volume_rejects_non_finite() {
        let mut data = Array3::<f32>::zeros((1, 1, 2));
        data[[0, 0, 1]] = f32::NAN;
        assert!(Volume::new(data, "t1").is_err());
    }
}
