use modalfuse::encoder::{attention_weights, msa, AttentionParams, Encoder, EncoderConfig, EncoderLayer};
use modalfuse::rng::seeded;
use modalfuse::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut seeded(seed))
}

fn config(dim: usize, heads: usize, depth: usize) -> EncoderConfig {
    EncoderConfig {
        depth,
        heads,
        dim,
        mlp_ratio: 2,
    }
}

/// Rows of the `(B, N, P)` feature tensor reordered per `perm` along N.
fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let [b, n, p] = <[usize; 3]>::try_from(x.shape()).unwrap();
    let v = x.to_vec();
    let mut out = Vec::with_capacity(v.len());
    for s in 0..b {
        for &t in perm {
            out.extend_from_slice(&v[(s * n + t) * p..(s * n + t + 1) * p]);
        }
    }
    Tensor::from_vec(out, &[b, n, p]).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(rows, cols)` row-major product.
fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            for j in 0..cols {
                out[i * cols + j] += a[i * inner + k] * b[k * cols + j];
            }
        }
    }
    out
}

/// Per-head loop over plain vectors for one sample `(L, P)`.
fn naive_msa(x: &[f64], l: usize, params: &AttentionParams<f64>) -> Vec<f64> {
    let p = params.dim();
    let h = params.heads;
    let dk = p / h;
    let q = matmul(x, &params.wq.to_vec(), l, p, p);
    let k = matmul(x, &params.wk.to_vec(), l, p, p);
    let v = matmul(x, &params.wv.to_vec(), l, p, p);
    let mut concat = vec![0.0; l * p];
    for head in 0..h {
        let col = |m: &[f64], i: usize, j: usize| m[i * p + head * dk + j];
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|t| (0..dk).map(|j| col(&q, i, j) * col(&k, t, j)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            for j in 0..dk {
                concat[i * p + head * dk + j] = (0..l).map(|t| exp[t] / z * col(&v, t, j)).sum();
            }
        }
    }
    matmul(&concat, &params.wo.to_vec(), l, p, p)
}

#[test]
fn msa_matches_per_head_loop() {
    let params = AttentionParams::<f64>::new(12, 3, &mut seeded(1)).unwrap();
    let (b, l) = (2, 5);
    let x = randn(&[b, l, 12], 1.0, 2);
    let got = msa(&x, &params).unwrap().to_vec();
    let xs = x.to_vec();
    for s in 0..b {
        let expected = naive_msa(&xs[s * l * 12..(s + 1) * l * 12], l, &params);
        assert!(max_abs_diff(&got[s * l * 12..(s + 1) * l * 12], &expected) < 1e-12);
    }
}

#[test]
fn head_count_must_divide_width() {
    assert!(AttentionParams::<f64>::new(10, 4, &mut seeded(0)).is_err());
    assert!(EncoderLayer::<f64>::new(&config(10, 3, 1), &mut seeded(0)).is_err());
}

#[test]
fn zeroed_output_weights_make_layers_exact_identities() {
    for depth in [1, 3] {
        let enc = Encoder::<f64>::new(&config(16, 4, depth), 6, 2, &mut seeded(3)).unwrap();
        for layer in &enc.layers {
            for t in [&layer.attn.wo, &layer.fc2.weight, &layer.fc2.bias] {
                t.set_data(vec![0.0; t.numel()]).unwrap();
            }
        }
        let x = randn(&[3, 7, 16], 2.0, 4);
        let mut y = x.clone();
        for layer in &enc.layers {
            y = layer.forward(&y).unwrap();
        }
        assert_eq!(max_abs_diff(&y.to_vec(), &x.to_vec()), 0.0, "depth {depth}");
    }
}

#[test]
fn permutation_invariance_without_position_embeddings() {
    let enc = Encoder::<f64>::new(&config(16, 4, 2), 8, 3, &mut seeded(5)).unwrap();
    let features = randn(&[2, 8, 16], 1.0, 6);
    let with_pos = enc.forward(&features).unwrap().to_vec();

    let pos = &enc.bundle.pos;
    pos.set_data(vec![0.0; pos.numel()]).unwrap();
    let base = enc.forward(&features).unwrap().to_vec();
    let mut rng = seeded(7);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let shuffled = enc.forward(&permute_tokens(&features, &perm)).unwrap().to_vec();
        assert!(max_abs_diff(&base, &shuffled) <= 1e-10);
    }
    assert_ne!(with_pos, base);
}

#[test]
fn position_embeddings_break_permutation_symmetry() {
    let enc = Encoder::<f64>::new(&config(16, 4, 2), 8, 3, &mut seeded(8)).unwrap();
    let pos = &enc.bundle.pos;
    pos.set_data(randn(pos.shape(), 1.0, 9).to_vec()).unwrap();
    let features = randn(&[2, 8, 16], 1.0, 10);
    let base = enc.forward(&features).unwrap().to_vec();
    let mut rng = seeded(11);
    let moved = (0..10).any(|_| {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        max_abs_diff(&base, &enc.forward(&permute_tokens(&features, &perm)).unwrap().to_vec()) > 1e-6
    });
    assert!(moved);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_on_the_simplex(
        batch in 1usize..4, l in 1usize..10, s in 1usize..10, dk in 1usize..9,
        scale in 0.1f64..30.0, seed in 0u64..1000,
    ) {
        let q = randn(&[batch, l, dk], scale, seed);
        let k = randn(&[batch, s, dk], scale, seed + 1);
        let w = attention_weights(&q, &k).unwrap();
        prop_assert_eq!(w.shape(), &[batch, l, s]);
        for row in w.to_vec().chunks(s) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn encoder_permutation_invariance(tokens in 1usize..7, heads in 1usize..4, seed in 0u64..1000) {
        let dim = 4 * heads;
        let enc = Encoder::<f64>::new(&config(dim, heads, 2), tokens, 2, &mut seeded(seed)).unwrap();
        let pos = &enc.bundle.pos;
        pos.set_data(vec![0.0; pos.numel()]).unwrap();
        let features = randn(&[2, tokens, dim], 1.0, seed + 1);
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(&mut seeded(seed + 2));
        let a = enc.forward(&features).unwrap().to_vec();
        let b = enc.forward(&permute_tokens(&features, &perm)).unwrap().to_vec();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-10);
    }
}
