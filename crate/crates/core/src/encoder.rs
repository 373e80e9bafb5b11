//! Transformer branch: token construction, pre-norm encoder layers and the
//! class-token head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, push_param, LayerNorm, Linear, Module, NamedTensor};
use crate::tensor::{Float, Tensor};

/// Standard deviation of the position table, class embedding and head.
pub const INIT_STD: f64 = 0.02;

/// `N(0, 1/fan_in)` for the attention and MLP matrices.
fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Depth 2, 4 heads, width 64, MLP expansion 4.
    pub fn tiny() -> Self {
        EncoderConfig {
            depth: 2,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
        }
    }

    pub fn small() -> Self {
        EncoderConfig {
            depth: 4,
            heads: 4,
            dim: 128,
            mlp_ratio: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(format!("degenerate encoder config {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Trainable scalars of the layer stack plus final norm.
    pub fn layers_param_count(&self) -> usize {
        let p = self.dim;
        let inner = self.mlp_ratio * p;
        let layer = 4 * p * p + 4 * p + (p * inner + inner) + (inner * p + p);
        self.depth * layer + 2 * p
    }

    /// Multiply-accumulates of the layer stack over one sequence of `len`
    /// tokens (projections, score and mixing products, MLP).
    pub fn macs(&self, len: usize) -> usize {
        let p = self.dim;
        let per_layer = 4 * len * p * p + 2 * len * len * p + 2 * len * p * self.mlp_ratio * p;
        self.depth * per_layer
    }
}

/// Row-stochastic weights `softmax(Q·Kᵀ/√d_k)` over the key axis.
pub fn attention_weights<T: Float>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let r = q.rank();
    if r < 2 || k.rank() != r || q.shape()[r - 1] != k.shape()[r - 1] {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let dk = q.shape()[r - 1];
    let scores = q.matmul(&k.transpose(r - 2, r - 1)?)?;
    scores.scale(T::lit(1.0 / (dk as f64).sqrt())).softmax(r - 1)
}

/// Scaled dot-product attention over the last two axes.
pub fn attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let r = k.rank();
    if v.rank() != r || v.shape()[..r - 1] != k.shape()[..r - 1] {
        return Err(Error::shape("attention", k.shape(), v.shape()));
    }
    attention_weights(q, k)?.matmul(v)
}

/// Projections of one multi-head self-attention block. Head `i` uses
/// columns `i·d_k .. (i+1)·d_k` of `wq`, `wk` and `wv`.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Float> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
}

impl<T: Float> AttentionParams<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut w = || Tensor::randn(&[dim, dim], fan_in_std(dim), rng).into_param();
        Ok(AttentionParams {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

impl<T: Float> Module<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        push_param(out, prefix, "wq", &self.wq);
        push_param(out, prefix, "wk", &self.wk);
        push_param(out, prefix, "wv", &self.wv);
        push_param(out, prefix, "wo", &self.wo);
    }
}

/// `(B, L, P)` to `(B·h, L, d_k)`.
fn split_heads<T: Float>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let [b, l, p] = <[usize; 3]>::try_from(x.shape()).unwrap();
    x.reshape(&[b, l, heads, p / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, l, p / heads])
}

/// Multi-head self-attention: `Concat(head_1, ..., head_h)·W^O`.
pub fn msa<T: Float>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    let p = params.dim();
    let h = params.heads;
    if h == 0 || p % h != 0 {
        return Err(Error::config(format!("embedding width {p} is not divisible by {h} heads")));
    }
    if x.rank() != 3 || x.shape()[2] != p {
        return Err(Error::shape("msa", x.shape(), params.wq.shape()));
    }
    let (b, l) = (x.shape()[0], x.shape()[1]);
    let q = split_heads(&x.matmul(&params.wq)?, h)?;
    let k = split_heads(&x.matmul(&params.wk)?, h)?;
    let v = split_heads(&x.matmul(&params.wv)?, h)?;
    let heads = attention(&q, &k, &v)?
        .reshape(&[b, h, l, p / h])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, l, p])?;
    heads.matmul(&params.wo)
}

/// Pre-norm layer: `x̂ = MSA(LN(x)) + x`, `y = MLP(LN(x̂)) + x̂`.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T: Float> {
    pub norm1: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Float> EncoderLayer<T> {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let p = config.dim;
        Ok(EncoderLayer {
            norm1: LayerNorm::new(p),
            attn: AttentionParams::new(p, config.heads, rng)?,
            norm2: LayerNorm::new(p),
            fc1: Linear::normal(p, config.mlp_ratio * p, fan_in_std(p), rng),
            fc2: Linear::normal(config.mlp_ratio * p, p, fan_in_std(config.mlp_ratio * p), rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = msa(&self.norm1.forward(x)?, &self.attn)?.add(x)?;
        let hidden = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu();
        self.fc2.forward(&hidden)?.add(&x)
    }
}

impl<T: Float> Module<T> for EncoderLayer<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
}

/// Learned position table `(N+1, P)` (row 0 belongs to the class token) and
/// class embedding `W^c` of width `P`.
#[derive(Debug, Clone)]
pub struct TokenBundle<T: Float> {
    pub pos: Tensor<T>,
    pub cls: Tensor<T>,
}

impl<T: Float> TokenBundle<T> {
    pub fn new(tokens: usize, dim: usize, rng: &mut impl Rng) -> Self {
        TokenBundle {
            pos: Tensor::randn(&[tokens + 1, dim], INIT_STD, rng).into_param(),
            cls: Tensor::randn(&[dim], INIT_STD, rng).into_param(),
        }
    }

    /// Patch tokens per sample.
    pub fn tokens(&self) -> usize {
        self.pos.shape()[0] - 1
    }
}

/// Adds position rows `1..=N` to the features and prepends `W^c + pos[0]`.
pub fn build_tokens<T: Float>(features: &Tensor<T>, bundle: &TokenBundle<T>) -> Result<Tensor<T>> {
    let n = bundle.tokens();
    let p = bundle.cls.shape()[0];
    if features.rank() != 3 || features.shape()[1] != n || features.shape()[2] != p {
        return Err(Error::contract(format!(
            "build_tokens: features {:?} do not match {n} tokens of width {p}",
            features.shape()
        )));
    }
    let b = features.shape()[0];
    let patches = features.add(&bundle.pos.narrow(0, 1, n)?)?;
    let class = bundle
        .cls
        .add(&bundle.pos.narrow(0, 0, 1)?.reshape(&[p])?)?
        .broadcast_to(&[b, 1]);
    Tensor::concat(&[&class, &patches], 1)
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Float> {
    pub config: EncoderConfig,
    pub bundle: TokenBundle<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Float> Encoder<T> {
    pub fn new(config: &EncoderConfig, tokens: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::config("at least one class is required"));
        }
        let bundle = TokenBundle::new(tokens, config.dim, rng);
        let layers = (0..config.depth)
            .map(|_| EncoderLayer::new(config, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config: config.clone(),
            bundle,
            layers,
            norm: LayerNorm::new(config.dim),
            head: Linear::normal(config.dim, num_classes, INIT_STD, rng),
        })
    }

    /// Layers, final norm, class token, head: `(B, N+1, P)` to `(B, classes)`.
    pub fn classify(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let x = self.norm.forward(&x)?;
        let b = x.shape()[0];
        let class = x.narrow(1, 0, 1)?.reshape(&[b, self.config.dim])?;
        self.head.forward(&class)
    }

    /// Features `(B, N, P)` to logits.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.classify(&build_tokens(features, &self.bundle)?)
    }
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        for (t, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("encoder.layer{t}")), out);
        }
        push_param(out, &join(prefix, "encoder"), "pos", &self.bundle.pos);
        push_param(out, &join(prefix, "encoder"), "cls", &self.bundle.cls);
        self.norm.visit(&join(prefix, "encoder.norm"), out);
        self.head.visit(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn zero_logits_average_values() {
        let out = attention(&t(&[0.0], &[1, 1]), &t(&[0.0, 0.0], &[2, 1]), &t(&[1.0, 3.0], &[2, 1])).unwrap();
        assert_eq!(out.to_vec(), vec![2.0]);
    }

    #[test]
    fn identical_keys_give_value_mean() {
        let mut rng = seeded(1);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let k = t(&[0.5, -1.0, 2.0, 0.25].repeat(5), &[5, 4]);
        let v = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
        let out = attention(&q, &k, &v).unwrap().to_vec();
        let vv = v.to_vec();
        for row in 0..3 {
            for c in 0..2 {
                let mean = (0..5).map(|r| vv[r * 2 + c]).sum::<f64>() / 5.0;
                assert!((out[row * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_scalar_evaluation() {
        let out = attention(
            &t(&[1.0, 0.0], &[1, 2]),
            &t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]),
            &t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]),
        )
        .unwrap()
        .to_vec();
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let (w0, w1) = (a / (a + 1.0), 1.0 / (a + 1.0));
        assert!((out[0] - w0).abs() < 1e-12 && (out[1] - w1).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatch() {
        assert!(attention(&t(&[0.0; 2], &[1, 2]), &t(&[0.0; 3], &[1, 3]), &t(&[0.0; 3], &[1, 3])).is_err());
        assert!(attention(&t(&[0.0; 2], &[1, 2]), &t(&[0.0; 4], &[2, 2]), &t(&[0.0; 3], &[3, 1])).is_err());
    }

    #[test]
    fn single_identity_head_reduces_to_attention() {
        let mut rng = seeded(2);
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let id = || t(&eye, &[4, 4]);
        let params = AttentionParams {
            wq: id(),
            wk: id(),
            wv: id(),
            wo: id(),
            heads: 1,
        };
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let got = msa(&x, &params).unwrap().to_vec();
        let want = attention(&x, &x, &x).unwrap().to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn msa_shape_and_head_divisibility() {
        let mut rng = seeded(3);
        let params = AttentionParams::<f64>::new(64, 4, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 7, 64], 1.0, &mut rng);
        assert_eq!(msa(&x, &params).unwrap().shape(), &[2, 7, 64]);
        assert!(matches!(AttentionParams::<f64>::new(10, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_output_weights_make_identity() {
        let mut rng = seeded(4);
        let layer = EncoderLayer::<f64>::new(&EncoderConfig { depth: 1, heads: 2, dim: 8, mlp_ratio: 4 }, &mut rng).unwrap();
        layer.attn.wo.update_data(|d| d.fill(0.0));
        layer.fc2.weight.update_data(|d| d.fill(0.0));
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        assert_eq!(layer.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn tokens_with_zero_embeddings() {
        let mut rng = seeded(5);
        let bundle = TokenBundle::<f64> {
            pos: Tensor::zeros(&[4, 2]),
            cls: Tensor::zeros(&[2]),
        };
        let f = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
        let tokens = build_tokens(&f, &bundle).unwrap();
        assert_eq!(tokens.shape(), &[2, 4, 2]);
        let v = tokens.to_vec();
        let fv = f.to_vec();
        assert_eq!(&v[0..2], &[0.0, 0.0]);
        assert_eq!(&v[2..8], &fv[0..6]);
        assert_eq!(&v[10..16], &fv[6..12]);
        assert!(build_tokens(&Tensor::zeros(&[2, 2, 2]), &bundle).is_err());
    }

    #[test]
    fn classify_is_pure() {
        let mut rng = seeded(6);
        let enc = Encoder::<f64>::new(&EncoderConfig::tiny(), 8, 5, &mut rng).unwrap();
        let f = Tensor::randn(&[3, 8, 64], 1.0, &mut rng);
        let a = enc.forward(&f).unwrap();
        assert_eq!(a.shape(), &[3, 5]);
        assert_eq!(a.to_vec(), enc.forward(&f).unwrap().to_vec());
    }

    #[test]
    fn param_count_formula() {
        let mut rng = seeded(7);
        let cfg = EncoderConfig::tiny();
        let enc = Encoder::<f64>::new(&cfg, 8, 5, &mut rng).unwrap();
        let extra = 9 * 64 + 64 + 64 * 5 + 5;
        assert_eq!(enc.param_count(), cfg.layers_param_count() + extra);
    }
}
