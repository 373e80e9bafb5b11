use ndarray::s;

use super::Volume;
use crate::error::{Error, Result};

pub const BINS: usize = 256;

/// Between-class variance `ω₀ω₁(μ₀ − μ₁)²` of splitting the histogram into
/// bins `< threshold` and `>= threshold`. Zero when either class is empty.
pub fn between_class_variance(histogram: &[u64; BINS], threshold: usize) -> f64 {
    let (mut n0, mut s0, mut n, mut total) = (0u64, 0u128, 0u64, 0u128);
    for (bin, &count) in histogram.iter().enumerate() {
        if bin < threshold {
            n0 += count;
            s0 += bin as u128 * count as u128;
        }
        n += count;
        total += bin as u128 * count as u128;
    }
    split_variance(n0, s0, n, total)
}

/// With `N` voxels of intensity sum `S`, and `n₀`, `s₀` below the split,
/// `ω₀ω₁(μ₀ − μ₁)² = (s₀N − Sn₀)² / (N²·n₀·n₁)`.
fn split_variance(n0: u64, s0: u128, n: u64, total: u128) -> f64 {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let diff = ((s0 * n as u128) as i128 - (total * n0 as u128) as i128) as f64;
    let nf = n as f64;
    diff * diff / (nf * nf * n0 as f64 * n1 as f64)
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Returns the bin index `t ∈ [1, 255]` maximizing the between-class
/// variance of the split `[0, t) | [t, 255]`, the smallest such `t` on ties.
pub fn otsu_threshold(histogram: &[u64; BINS]) -> Result<usize> {
    let n: u64 = histogram.iter().sum();
    if n == 0 {
        return Err(Error::contract("otsu_threshold on an empty histogram"));
    }
    let total: u128 = histogram
        .iter()
        .enumerate()
        .map(|(bin, &c)| bin as u128 * c as u128)
        .sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best = (1usize, f64::NEG_INFINITY);
    for t in 1..BINS {
        n0 += histogram[t - 1];
        s0 += (t - 1) as u128 * histogram[t - 1] as u128;
        let v = split_variance(n0, s0, n, total);
        if v > best.1 {
            best = (t, v);
        }
    }
    Ok(best.0)
}

/// Histogram of intensities after min-max normalization to `[0, 255]`.
/// A constant volume lands entirely in bin 0.
pub fn intensity_histogram(volume: &Volume) -> [u64; BINS] {
    let range = value_range(volume);
    let mut hist = [0u64; BINS];
    for &v in &volume.data {
        hist[bin_of(v, range)] += 1;
    }
    hist
}

fn value_range(volume: &Volume) -> (f32, f32) {
    volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn bin_of(v: f32, (lo, hi): (f32, f32)) -> usize {
    if hi <= lo {
        return 0;
    }
    let scaled = ((v - lo) as f64 / (hi - lo) as f64 * 255.0).floor();
    (scaled as usize).min(BINS - 1)
}

/// Crops to the bounding box of voxels at or above the Otsu threshold.
/// Returns the volume unchanged when no voxel qualifies.
pub fn foreground_crop(volume: &Volume) -> Volume {
    let hist = intensity_histogram(volume);
    let Ok(threshold) = otsu_threshold(&hist) else {
        return volume.clone();
    };
    let range = value_range(volume);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((d, h, w), &v) in volume.data.indexed_iter() {
        if bin_of(v, range) >= threshold {
            any = true;
            for (axis, idx) in [d, h, w].into_iter().enumerate() {
                lo[axis] = lo[axis].min(idx);
                hi[axis] = hi[axis].max(idx);
            }
        }
    }
    if !any {
        return volume.clone();
    }
    Volume {
        data: volume
            .data
            .slice(s![lo[0]..=hi[0], lo[1]..=hi[1], lo[2]..=hi[2]])
            .to_owned(),
        spacing: volume.spacing,
        modality: volume.modality.clone(),
    }
}
