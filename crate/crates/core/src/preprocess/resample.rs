use ndarray::Array3;

use super::Volume;
use crate::error::{Error, Result};

/// Source coordinate of target index `i` under corner alignment: the first
/// and last samples of both grids coincide. A single-sample target sits at
/// the source center.
fn source_coord(i: usize, source: usize, target: usize) -> f64 {
    if target == 1 {
        (source - 1) as f64 / 2.0
    } else {
        (i * (source - 1)) as f64 / (target - 1) as f64
    }
}

/// Lower sample index and weight of the upper neighbor along one axis.
fn axis_taps(source: usize, target: usize) -> Vec<(usize, f64)> {
    (0..target)
        .map(|i| {
            let x = source_coord(i, source, target);
            let lo = (x.floor() as usize).min(source - 1);
            (lo, x - lo as f64)
        })
        .collect()
}

/// Trilinear resampling to `target = (D, H, W)`.
pub fn resample(volume: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    let (td, th, tw) = target;
    if td == 0 || th == 0 || tw == 0 {
        return Err(Error::contract(format!("resample target {target:?} has a zero extent")));
    }
    let (sd, sh, sw) = volume.extents();
    if (sd, sh, sw) == target {
        return Ok(volume.clone());
    }
    let (zd, zh, zw) = (axis_taps(sd, td), axis_taps(sh, th), axis_taps(sw, tw));
    let src = &volume.data;
    let at = |d: usize, h: usize, w: usize| src[[d.min(sd - 1), h.min(sh - 1), w.min(sw - 1)]] as f64;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let data = Array3::from_shape_fn(target, |(d, h, w)| {
        let ((d0, fd), (h0, fh), (w0, fw)) = (zd[d], zh[h], zw[w]);
        let plane = |dd: usize| {
            let r0 = lerp(at(dd, h0, w0), at(dd, h0, w0 + 1), fw);
            let r1 = lerp(at(dd, h0 + 1, w0), at(dd, h0 + 1, w0 + 1), fw);
            lerp(r0, r1, fh)
        };
        lerp(plane(d0), plane(d0 + 1), fd) as f32
    });
    let spacing = volume.spacing.map(|[a, b, c]| {
        [
            a * sd as f64 / td as f64,
            b * sh as f64 / th as f64,
            c * sw as f64 / tw as f64,
        ]
    });
    Ok(Volume {
        data,
        spacing,
        modality: volume.modality.clone(),
    })
}
