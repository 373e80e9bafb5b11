use modalfuse::preprocess::container::{load_dataset, save_dataset, Split};
use modalfuse::preprocess::{
    add_gaussian_noise, between_class_variance, foreground_crop, intensity_histogram, otsu_threshold, random_flip,
    resample, Volume, VolumeBatch,
};
use modalfuse::rng::seeded;
use ndarray::{s, Array3, Array6, Axis};
use proptest::prelude::*;
use rand::Rng;

/// `ω₀ω₁(μ₀ − μ₁)²` from class weights and means, computed directly.
fn direct_variance(hist: &[u64; 256], t: usize) -> f64 {
    let n: u64 = hist.iter().sum();
    let (lower, upper) = hist.split_at(t);
    let (n0, n1) = (lower.iter().sum::<u64>(), upper.iter().sum::<u64>());
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let mean = |part: &[u64], offset: usize, count: u64| {
        part.iter().enumerate().map(|(i, &c)| ((i + offset) as f64) * c as f64).sum::<f64>() / count as f64
    };
    let (m0, m1) = (mean(lower, 0, n0), mean(upper, t, n1));
    let (w0, w1) = (n0 as f64 / n as f64, n1 as f64 / n as f64);
    w0 * w1 * (m0 - m1) * (m0 - m1)
}

fn random_histogram(rng: &mut impl Rng) -> [u64; 256] {
    let mut hist = [0u64; 256];
    let sparsity = rng.gen_range(0.0..0.9);
    for bin in hist.iter_mut() {
        if rng.gen_bool(1.0 - sparsity) {
            *bin = rng.gen_range(0..1000);
        }
    }
    hist[rng.gen_range(0..256)] += 1;
    hist
}

#[test]
fn otsu_matches_exhaustive_search_on_100_histograms() {
    let mut rng = seeded(11);
    for _ in 0..100 {
        let hist = random_histogram(&mut rng);
        let mut best = (1, f64::NEG_INFINITY);
        let mut best_exact = (1, f64::NEG_INFINITY);
        for t in 1..256 {
            let v = direct_variance(&hist, t);
            if v > best.1 * (1.0 + 1e-12) + 1e-300 {
                best = (t, v);
            }
            let exact = between_class_variance(&hist, t);
            if exact > best_exact.1 {
                best_exact = (t, exact);
            }
        }
        let got = otsu_threshold(&hist).unwrap();
        assert_eq!(got, best_exact.0);
        assert_eq!(got, best.0, "direct formula disagrees on {hist:?}");
    }
}

fn blob_volume(rng: &mut impl Rng) -> Volume {
    let (d, h, w) = (rng.gen_range(3..9), rng.gen_range(4..12), rng.gen_range(4..12));
    let mut data = Array3::from_shape_fn((d, h, w), |_| rng.gen_range(0.0f32..0.2));
    for _ in 0..rng.gen_range(1..3) {
        let (cd, ch, cw) = (rng.gen_range(0..d), rng.gen_range(0..h), rng.gen_range(0..w));
        let r = rng.gen_range(1.0..3.0f32);
        for ((z, y, x), v) in data.indexed_iter_mut() {
            let dist = ((z as f32 - cd as f32).powi(2) + (y as f32 - ch as f32).powi(2) + (x as f32 - cw as f32).powi(2)).sqrt();
            if dist <= r {
                *v += rng.gen_range(0.8f32..1.0);
            }
        }
    }
    Volume::new(data, "t1").unwrap()
}

#[test]
fn crop_equals_scanned_bounding_box() {
    let mut rng = seeded(12);
    for _ in 0..40 {
        let v = blob_volume(&mut rng);
        let t = otsu_threshold(&intensity_histogram(&v)).unwrap();
        let (lo, hi) = v.data.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let above = |x: f32| (((x - lo) as f64 / (hi - lo) as f64 * 255.0).floor() as usize).min(255) >= t;
        let mut bounds = [(usize::MAX, 0usize); 3];
        for ((z, y, x), &val) in v.data.indexed_iter() {
            if above(val) {
                for (axis, i) in [z, y, x].into_iter().enumerate() {
                    bounds[axis] = (bounds[axis].0.min(i), bounds[axis].1.max(i));
                }
            }
        }
        let expected = v
            .data
            .slice(s![bounds[0].0..=bounds[0].1, bounds[1].0..=bounds[1].1, bounds[2].0..=bounds[2].1])
            .to_owned();
        assert_eq!(foreground_crop(&v).data, expected);
    }
}

#[test]
fn noise_moments_over_a_million_draws() {
    let batch = VolumeBatch::new(Array6::zeros((4, 2, 1, 5, 100, 250)), vec![0; 4], 1).unwrap();
    let noisy = add_gaussian_noise(&batch, 0.0, 0.1, 7).unwrap();
    let n = noisy.data.len() as f64;
    assert_eq!(n, 1e6);
    let mean = noisy.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = noisy.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sigma = 0.1f64.sqrt();
    assert!(mean.abs() <= 3.0 * sigma / 1e3, "mean {mean}");
    assert!((var - 0.1).abs() <= 0.001, "variance {var}");
    assert!(add_gaussian_noise(&batch, 0.0, -0.1, 7).is_err());
}

#[test]
fn flips_are_whole_sample_and_label_preserving() {
    let mut rng = seeded(13);
    let data = Array6::from_shape_fn((16, 3, 1, 3, 4, 5), |_| rng.gen_range(0.0f32..1.0));
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let batch = VolumeBatch::new(data, labels.clone(), 3).unwrap();
    let flipped = random_flip(&batch, 0.5, 99);
    assert_eq!(flipped.labels, labels);
    assert_eq!(flipped.data.shape(), batch.data.shape());
    let mut flips = 0;
    for i in 0..16 {
        let (orig, out) = (batch.sample(i), flipped.sample(i));
        if out == orig {
            continue;
        }
        flips += 1;
        for m in 0..3 {
            let reversed = orig.index_axis(Axis(0), m).slice(s![.., .., .., ..;-1]).to_owned();
            assert_eq!(out.index_axis(Axis(0), m), reversed, "sample {i} modality {m}");
        }
    }
    assert!(flips > 0 && flips < 16, "{flips}");
}

#[test]
fn dataset_directory_round_trip() {
    let mut rng = seeded(14);
    let data = Array6::from_shape_fn((3, 2, 1, 3, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
    let batch = VolumeBatch::new(data, vec![1, 0, 1], 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let splits = [Split::Train, Split::Test, Split::Any];
    save_dataset(dir.path(), &batch, Some(&splits)).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.batch, batch);
    assert_eq!(back.splits, splits);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_ramp_upsample_interpolates_exactly(
        len in 2usize..8, axis in 0usize..3, slope in -3.0f32..3.0, offset in -2.0f32..2.0,
    ) {
        let mut dims = [2usize, 2, 2];
        dims[axis] = len;
        let data = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(d, h, w)| offset + slope * [d, h, w][axis] as f32);
        let v = Volume::new(data, "t2").unwrap();
        let mut target = dims;
        target[axis] = 2 * len - 1;
        let up = resample(&v, (target[0], target[1], target[2])).unwrap();
        for ((d, h, w), &val) in up.data.indexed_iter() {
            let x = [d, h, w][axis] as f32 / 2.0;
            prop_assert!((val - (offset + slope * x)).abs() < 1e-5);
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_labels(seed in 0u64..1000, p in 0.0f64..1.0, var in 0.0f64..0.5) {
        let batch = VolumeBatch::new(Array6::zeros((5, 2, 1, 3, 2, 3)), vec![0, 1, 1, 0, 1], 2).unwrap();
        for out in [random_flip(&batch, p, seed), add_gaussian_noise(&batch, 0.0, var, seed).unwrap()] {
            prop_assert_eq!(out.data.shape(), batch.data.shape());
            prop_assert_eq!(&out.labels, &batch.labels);
        }
    }
}
