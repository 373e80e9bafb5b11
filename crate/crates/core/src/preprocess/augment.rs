use ndarray::{s, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::VolumeBatch;
use crate::error::{Error, Result};
use crate::rng::sample_stream;

/// Per-sample flip decisions: sample `i` flips with probability `p`, drawn
/// from its own stream of `seed`.
pub fn flip_mask(len: usize, p: f64, seed: u64) -> Vec<bool> {
    (0..len)
        .map(|i| sample_stream(seed, i as u64).gen_bool(p.clamp(0.0, 1.0)))
        .collect()
}

/// Reverses the W axis of each selected sample, identically across all of
/// its modalities, channels and slices.
pub fn random_flip(batch: &VolumeBatch, p: f64, seed: u64) -> VolumeBatch {
    let mut out = batch.clone();
    for (i, flip) in flip_mask(batch.len(), p, seed).into_iter().enumerate() {
        if flip {
            let src = batch.data.index_axis(Axis(0), i);
            out.data
                .index_axis_mut(Axis(0), i)
                .assign(&src.slice(s![.., .., .., .., ..;-1]));
        }
    }
    out
}

/// Adds i.i.d. `N(mean, variance)` noise to every voxel. Intensities are
/// expected to be min-max normalized already.
pub fn add_gaussian_noise(batch: &VolumeBatch, mean: f64, variance: f64, seed: u64) -> Result<VolumeBatch> {
    if !(variance >= 0.0) {
        return Err(Error::contract(format!("noise variance must be >= 0, got {variance}")));
    }
    let mut out = batch.clone();
    if variance == 0.0 && mean == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(mean, variance.sqrt()).expect("finite parameters");
    for (i, mut sample) in out.data.outer_iter_mut().enumerate() {
        let mut rng = sample_stream(seed, i as u64);
        sample.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    Ok(out)
}
