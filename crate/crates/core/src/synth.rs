//! Synthetic multi-modal volumes with known label mechanics.
//!
//! * `Unimodal`: five classes. Classes 0-3 place a bright square at the
//!   center of quadrant 0-3 (row-major) of every slice of modality 0; class 4
//!   has no marker. Any single patch covering the marker decides the class.
//! * `CrossmodalXor`: two latent bits `a`, `b`. `a` draws a marker somewhere
//!   in the top-left quadrant of modality 0's first slice triple, `b` one in
//!   the bottom-right quadrant of the last modality's last slice triple. The
//!   label is `a XOR b`. The two markers never share a patch, so a sum of
//!   per-patch indicators is affine in `(a, b)` and a linear readout of it
//!   cannot separate the classes.
//!
//! Background is zero plus i.i.d. Gaussian noise on every voxel.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array5, ArrayViewMut3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::VolumeBatch;
use crate::rng::sample_stream;
use crate::sequencer::SLICES_PER_IMAGE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Unimodal,
    #[serde(rename = "crossmodal")]
    CrossmodalXor,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Unimodal => 5,
            Task::CrossmodalXor => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Unimodal => "unimodal",
            Task::CrossmodalXor => "crossmodal",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(Task::Unimodal),
            "crossmodal" | "crossmodal-xor" => Ok(Task::CrossmodalXor),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

/// XOR marker regions that can be suppressed at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerRegion {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub samples: usize,
    pub modalities: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub marker_intensity: f64,
    /// Standard deviation of the background noise.
    pub noise: f64,
    pub seed: u64,
    /// Never draw this XOR marker (its latent bit still enters the label).
    #[serde(default)]
    pub mask: Option<MarkerRegion>,
}

impl SynthSpec {
    /// Two modalities, one channel, 6 × 64 × 64.
    pub fn new(task: Task, samples: usize, seed: u64) -> Self {
        SynthSpec {
            task,
            samples,
            modalities: 2,
            channels: 1,
            depth: 6,
            height: 64,
            width: 64,
            marker_intensity: 2.0,
            noise: 0.1,
            seed,
            mask: None,
        }
    }

    pub fn with_extents(mut self, depth: usize, height: usize, width: usize) -> Self {
        self.depth = depth;
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(msg));
        if self.samples == 0 || self.modalities == 0 || self.channels == 0 {
            return bad(format!("samples, modalities and channels must be positive: {self:?}"));
        }
        if self.depth == 0 || self.depth % SLICES_PER_IMAGE != 0 {
            return bad(format!("axis D extent {} is not a positive multiple of 3", self.depth));
        }
        for (axis, extent) in [("H", self.height), ("W", self.width)] {
            if extent == 0 || extent % 4 != 0 {
                return bad(format!("axis {axis} extent {extent} is not a positive multiple of 4"));
            }
        }
        if self.task == Task::CrossmodalXor && self.modalities < 2 {
            return bad("the cross-modal task needs at least two modalities".into());
        }
        if !(self.noise >= 0.0) || !self.marker_intensity.is_finite() {
            return bad(format!(
                "noise {} and marker intensity {} must be finite, noise >= 0",
                self.noise, self.marker_intensity
            ));
        }
        Ok(())
    }

    /// Marker side length: an eighth of the smaller in-plane extent, at least 2.
    pub fn marker_size(&self) -> usize {
        (self.height.min(self.width) / 8).max(2)
    }
}

fn paint(mut slices: ArrayViewMut3<'_, f32>, top: usize, left: usize, size: usize, value: f32) {
    slices
        .slice_mut(s![.., top..top + size, left..left + size])
        .mapv_inplace(|v| v + value);
}

fn generate_sample(spec: &SynthSpec, index: usize) -> (Array5<f32>, usize) {
    let (m, c, d, h, w) = (spec.modalities, spec.channels, spec.depth, spec.height, spec.width);
    let mut rng = sample_stream(spec.seed, index as u64);
    let mut sample = Array5::<f32>::zeros((m, c, d, h, w));
    let size = spec.marker_size();
    let value = spec.marker_intensity as f32;
    let (qh, qw) = (h / 2, w / 2);
    let label = match spec.task {
        Task::Unimodal => {
            let class = rng.gen_range(0..5);
            if class < 4 {
                let top = (class / 2) * qh + (qh - size) / 2;
                let left = (class % 2) * qw + (qw - size) / 2;
                for mut ch in sample.index_axis_mut(Axis(0), 0).outer_iter_mut() {
                    paint(ch.view_mut(), top, left, size, value);
                }
            }
            class
        }
        Task::CrossmodalXor => {
            let a = rng.gen_bool(0.5);
            let b = rng.gen_bool(0.5);
            let (ty, tx) = (rng.gen_range(0..=qh - size), rng.gen_range(0..=qw - size));
            let (by, bx) = (rng.gen_range(0..=qh - size), rng.gen_range(0..=qw - size));
            let first = 0..SLICES_PER_IMAGE;
            let last = d - SLICES_PER_IMAGE..d;
            if a && spec.mask != Some(MarkerRegion::First) {
                for mut ch in sample.index_axis_mut(Axis(0), 0).outer_iter_mut() {
                    paint(ch.slice_mut(s![first.clone(), .., ..]), ty, tx, size, value);
                }
            }
            if b && spec.mask != Some(MarkerRegion::Second) {
                for mut ch in sample.index_axis_mut(Axis(0), m - 1).outer_iter_mut() {
                    paint(ch.slice_mut(s![last.clone(), .., ..]), qh + by, qw + bx, size, value);
                }
            }
            usize::from(a ^ b)
        }
    };
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        sample.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    (sample, label)
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<VolumeBatch> {
    spec.validate()?;
    let (samples, labels): (Vec<_>, Vec<_>) = (0..spec.samples).map(|i| generate_sample(spec, i)).unzip();
    VolumeBatch::from_samples(&samples, labels, spec.task.num_classes())
}
