//! Parameterized building blocks shared by the CNN and transformer branches.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BatchNormMode, Conv2dGeometry, Float, Tensor};

/// Forward-pass mode. Only batch normalization behaves differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor owned by a module. Buffers (batch-norm running
/// statistics) are saved in checkpoints but never optimized.
#[derive(Debug, Clone)]
pub struct NamedTensor<T: Float> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Anything that owns parameters and buffers under hierarchical names.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>);

    fn named_tensors(&self, prefix: &str) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }

    fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_tensors("")
            .into_iter()
            .filter(|n| n.trainable)
            .map(|n| n.tensor)
            .collect()
    }

    /// Number of trainable scalars.
    fn param_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_param<T: Float>(out: &mut Vec<NamedTensor<T>>, prefix: &str, name: &str, t: &Tensor<T>) {
    out.push(NamedTensor {
        name: join(prefix, name),
        tensor: t.clone(),
        trainable: true,
    });
}

pub(crate) fn push_buffer<T: Float>(out: &mut Vec<NamedTensor<T>>, prefix: &str, name: &str, t: &Tensor<T>) {
    out.push(NamedTensor {
        name: join(prefix, name),
        tensor: t.clone(),
        trainable: false,
    });
}

/// `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    /// Weights `N(0, std²)`, bias zero.
    pub fn normal(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[input, output], std, rng).into_param(),
            bias: Tensor::zeros(&[output]).into_param(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        push_param(out, prefix, "weight", &self.weight);
        push_param(out, prefix, "bias", &self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Float> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones(&[dim]).into_param(),
            bias: Tensor::zeros(&[dim]).into_param(),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, T::lit(self.eps))
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        push_param(out, prefix, "gain", &self.gain);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// Bias-free convolution (always followed by batch normalization here).
#[derive(Debug, Clone)]
pub struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub geometry: Conv2dGeometry,
}

impl<T: Float> Conv2d<T> {
    /// He-normal initialization over fan-out, as for ReLU networks.
    pub fn kaiming(
        input: usize,
        output: usize,
        kernel: usize,
        geometry: Conv2dGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_out = (output * kernel * kernel) as f64;
        Conv2d {
            weight: Tensor::randn(&[output, input, kernel, kernel], (2.0 / fan_out).sqrt(), rng)
                .into_param(),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, None, self.geometry)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        push_param(out, prefix, "weight", &self.weight);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Float> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gain: Tensor::ones(&[channels]).into_param(),
            bias: Tensor::zeros(&[channels]).into_param(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train {
                momentum: self.momentum,
            },
            Mode::Eval => BatchNormMode::Eval,
        };
        x.batch_norm(
            &self.gain,
            &self.bias,
            &self.running_mean,
            &self.running_var,
            bn_mode,
            T::lit(self.eps),
        )
    }
}

impl<T: Float> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        push_param(out, prefix, "gain", &self.gain);
        push_param(out, prefix, "bias", &self.bias);
        push_buffer(out, prefix, "running_mean", &self.running_mean);
        push_buffer(out, prefix, "running_var", &self.running_var);
    }
}
