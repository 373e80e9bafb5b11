use std::collections::HashMap;

use modalfuse::preprocess::VolumeBatch;
use modalfuse::sequencer::SequencePlan;
use modalfuse::synth::{generate_dataset, MarkerRegion, SynthSpec, Task};
use ndarray::s;
use proptest::prelude::*;

fn xor(samples: usize, seed: u64) -> SynthSpec {
    SynthSpec::new(Task::CrossmodalXor, samples, seed).with_extents(6, 16, 16)
}

/// Whether each XOR marker is visible: first three slices of the first
/// modality, last three slices of the last modality.
fn visible_markers(data: &VolumeBatch, i: usize, threshold: f32) -> (bool, bool) {
    let v = &data.data;
    let (m, d) = (v.shape()[1], v.shape()[3]);
    let first = v.slice(s![i, 0, .., 0..3, .., ..]).iter().any(|&x| x > threshold);
    let second = v.slice(s![i, m - 1, .., d - 3..d, .., ..]).iter().any(|&x| x > threshold);
    (first, second)
}

/// Plug-in mutual information in bits between two discrete sequences.
fn mutual_information<A: Copy + Eq + std::hash::Hash, B: Copy + Eq + std::hash::Hash>(pairs: &[(A, B)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: HashMap<(A, B), f64> = HashMap::new();
    let mut left: HashMap<A, f64> = HashMap::new();
    let mut right: HashMap<B, f64> = HashMap::new();
    for &(a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1.0;
        *left.entry(a).or_default() += 1.0;
        *right.entry(b).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(a, b), &c)| {
            let p = c / n;
            p * (p / (left[&a] / n * right[&b] / n)).log2()
        })
        .sum()
}

#[test]
fn xor_labels_are_balanced() {
    for (samples, seed) in [(200, 1), (500, 2), (1000, 3)] {
        let data = generate_dataset(&xor(samples, seed)).unwrap();
        let ones = data.labels.iter().filter(|&&l| l == 1).count() as f64;
        let share = ones / samples as f64;
        assert!((share - 0.5).abs() <= 0.05, "{samples} samples: {share}");
    }
}

#[test]
fn label_is_the_xor_of_visible_markers() {
    let data = generate_dataset(&xor(300, 4)).unwrap();
    for i in 0..300 {
        let (a, b) = visible_markers(&data, i, 1.0);
        assert_eq!(data.labels[i], usize::from(a ^ b), "sample {i}");
    }
}

#[test]
fn either_modality_alone_carries_no_label_information() {
    let data = generate_dataset(&xor(4000, 5)).unwrap();
    let obs: Vec<(bool, bool, usize)> = (0..4000)
        .map(|i| {
            let (a, b) = visible_markers(&data, i, 1.0);
            (a, b, data.labels[i])
        })
        .collect();
    let both: Vec<_> = obs.iter().map(|&(a, b, l)| ((a, b), l)).collect();
    let first: Vec<_> = obs.iter().map(|&(a, _, l)| (a, l)).collect();
    let second: Vec<_> = obs.iter().map(|&(_, b, l)| (b, l)).collect();
    assert!((mutual_information(&both) - 1.0).abs() < 1e-3);
    assert!(mutual_information(&first) < 0.01);
    assert!(mutual_information(&second) < 0.01);
}

#[test]
fn masking_a_region_removes_all_label_information() {
    for mask in [MarkerRegion::First, MarkerRegion::Second] {
        let spec = SynthSpec {
            mask: Some(mask),
            ..xor(4000, 6)
        };
        let data = generate_dataset(&spec).unwrap();
        let pairs: Vec<_> = (0..4000).map(|i| (visible_markers(&data, i, 1.0), data.labels[i])).collect();
        let hidden = pairs.iter().filter(|((a, b), _)| match mask {
            MarkerRegion::First => *a,
            MarkerRegion::Second => *b,
        });
        assert_eq!(hidden.count(), 0);
        assert!(mutual_information(&pairs) < 0.01, "{mask:?}");
    }
}

#[test]
fn noiseless_unimodal_is_solved_by_nearest_centroid() {
    let spec = SynthSpec {
        noise: 0.0,
        ..SynthSpec::new(Task::Unimodal, 200, 7).with_extents(6, 16, 16)
    };
    let data = generate_dataset(&spec).unwrap();
    let flat: Vec<Vec<f32>> = (0..200).map(|i| data.sample(i).iter().copied().collect()).collect();
    let dim = flat[0].len();
    let mut centroids = vec![vec![0.0f64; dim]; 5];
    let mut counts = [0usize; 5];
    for i in 0..100 {
        counts[data.labels[i]] += 1;
        for (c, &x) in centroids[data.labels[i]].iter_mut().zip(&flat[i]) {
            *c += x as f64;
        }
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    for i in 100..200 {
        let dist = |c: &Vec<f64>| c.iter().zip(&flat[i]).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
        let best = (0..5).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        assert_eq!(best, data.labels[i]);
    }
}

#[test]
fn default_extents_divide_for_small_grids() {
    let data = generate_dataset(&SynthSpec::new(Task::CrossmodalXor, 2, 8)).unwrap();
    for k in [1, 2, 4] {
        assert!(SequencePlan::new(data.extents(), k).is_ok(), "K = {k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_reproducible(seed in 0u64..10_000, samples in 1usize..6, unimodal in any::<bool>()) {
        let task = if unimodal { Task::Unimodal } else { Task::CrossmodalXor };
        let spec = SynthSpec::new(task, samples, seed).with_extents(3, 8, 8);
        let a = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&a, &generate_dataset(&spec).unwrap());
        prop_assert_eq!(a.data.shape(), &[samples, 2, 1, 3, 8, 8]);
        prop_assert!(a.labels.iter().all(|&l| l < task.num_classes()));
    }
}
