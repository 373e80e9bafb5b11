//! Residual CNN applied independently to every patch image, ending in a
//! linear projection to the token embedding width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm, Conv2d, Linear, Mode, Module, NamedTensor};
use crate::sequencer::SLICES_PER_IMAGE;
use crate::tensor::{Conv2dGeometry, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Width `P` of the projected feature of each patch.
    pub embedding_dim: usize,
}

impl BackboneConfig {
    /// Stem 3→16, stages (16, 32) with one block each, stride 2 into the
    /// second stage.
    pub fn tiny(embedding_dim: usize) -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: vec![16, 32],
            blocks_per_stage: 1,
            embedding_dim,
        }
    }

    /// A wider, deeper variant whose parameter budget dominates the encoder,
    /// as a ResNet-18 dominates DeiT-Tiny.
    pub fn small(embedding_dim: usize) -> Self {
        BackboneConfig {
            stem_channels: 64,
            stage_channels: vec![64, 128, 256],
            blocks_per_stage: 2,
            embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0
            || self.stage_channels.is_empty()
            || self.stage_channels.contains(&0)
            || self.blocks_per_stage == 0
            || self.embedding_dim == 0
        {
            return Err(Error::config(format!("degenerate backbone config {self:?}")));
        }
        Ok(())
    }

    /// `(in, out, stride)` of every residual block, in order.
    fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut blocks = Vec::new();
        let mut channels = self.stem_channels;
        for (stage, &width) in self.stage_channels.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push((channels, width, stride));
                channels = width;
            }
        }
        blocks
    }

    /// Trainable scalars, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let conv_bn = |i: usize, o: usize, k: usize| i * o * k * k + 2 * o;
        let mut total = conv_bn(SLICES_PER_IMAGE, self.stem_channels, 3);
        for (i, o, stride) in self.blocks() {
            total += conv_bn(i, o, 3) + conv_bn(o, o, 3);
            if stride != 1 || i != o {
                total += conv_bn(i, o, 1);
            }
        }
        let last = *self.stage_channels.last().unwrap();
        total + last * self.embedding_dim + self.embedding_dim
    }

    /// Multiply-accumulates of one forward pass over a single `h × w` patch
    /// (convolutions and the projection; normalization is not counted).
    pub fn macs_per_patch(&self, h: usize, w: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize, oh: usize, ow: usize| i * o * k * k * oh * ow;
        let mut total = conv(SLICES_PER_IMAGE, self.stem_channels, 3, h, w);
        let (mut h, mut w) = (h, w);
        for (i, o, stride) in self.blocks() {
            let g = Conv2dGeometry::new(stride, 1);
            let (oh, ow) = (g.output_extent(h, 3).unwrap_or(1), g.output_extent(w, 3).unwrap_or(1));
            total += conv(i, o, 3, oh, ow) + conv(o, o, 3, oh, ow);
            if stride != 1 || i != o {
                total += conv(i, o, 1, oh, ow);
            }
            (h, w) = (oh, ow);
        }
        total + self.stage_channels.last().unwrap() * self.embedding_dim
    }
}

/// conv→BN→ReLU→conv→BN, plus identity or 1×1-projected shortcut, then ReLU.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Float> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Float> ResidualBlock<T> {
    pub fn new(input: usize, output: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || input != output).then(|| {
            (
                Conv2d::kaiming(input, output, 1, Conv2dGeometry::new(stride, 0), rng),
                BatchNorm::new(output),
            )
        });
        ResidualBlock {
            conv1: Conv2d::kaiming(input, output, 3, Conv2dGeometry::new(stride, 1), rng),
            bn1: BatchNorm::new(output),
            conv2: Conv2d::kaiming(output, output, 3, Conv2dGeometry::new(1, 1), rng),
            bn2: BatchNorm::new(output),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.conv1.in_channels() {
            return Err(Error::shape("residual_block", x.shape(), self.conv1.weight.shape()));
        }
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

impl<T: Float> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.bn1.visit(&join(prefix, "bn1"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.bn2.visit(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), out);
            bn.visit(&join(prefix, "shortcut.bn"), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Float> {
    pub config: BackboneConfig,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub projection: Linear<T>,
}

impl<T: Float> Backbone<T> {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::kaiming(
            SLICES_PER_IMAGE,
            config.stem_channels,
            3,
            Conv2dGeometry::new(1, 1),
            rng,
        );
        let blocks = config
            .blocks()
            .into_iter()
            .map(|(i, o, s)| ResidualBlock::new(i, o, s, rng))
            .collect();
        let last = *config.stage_channels.last().unwrap();
        let projection = Linear::normal(last, config.embedding_dim, (1.0 / last as f64).sqrt(), rng);
        Ok(Backbone {
            config: config.clone(),
            stem,
            stem_bn: BatchNorm::new(config.stem_channels),
            blocks,
            projection,
        })
    }

    /// `(count, 3, h, w)` patch images to `(count, P)` features.
    pub fn forward(&self, patches: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if patches.rank() != 4 || patches.shape()[1] != SLICES_PER_IMAGE {
            return Err(Error::shape(
                "backbone_forward",
                patches.shape(),
                &[0, SLICES_PER_IMAGE, 0, 0],
            ));
        }
        let mut x = self.stem_bn.forward(&self.stem.forward(patches)?, mode)?.relu();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let pooled = x.reshape(&[n, c, h * w])?.mean_axis(2)?;
        self.projection.forward(&pooled)
    }
}

impl<T: Float> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.stem.visit(&join(prefix, "stem"), out);
        self.stem_bn.visit(&join(prefix, "stem_bn"), out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.projection.visit(&join(prefix, "proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_convs_pass_input_through() {
        let mut rng = seeded(1);
        let block = ResidualBlock::<f64>::new(4, 4, 1, &mut rng);
        block.conv1.weight.update_data(|d| d.fill(0.0));
        block.conv2.weight.update_data(|d| d.fill(0.0));
        let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
        let y = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.to_vec(), x.relu().to_vec());
    }

    #[test]
    fn stride_two_halves_extent() {
        let mut rng = seeded(2);
        let block = ResidualBlock::<f64>::new(4, 8, 2, &mut rng);
        let y = block
            .forward(&Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng), Mode::Train)
            .unwrap();
        assert_eq!(y.shape(), &[1, 8, 4, 4]);
        assert!(block
            .forward(&Tensor::zeros(&[1, 3, 8, 8]), Mode::Train)
            .is_err());
    }

    #[test]
    fn param_count_formula_matches_materialized() {
        let mut rng = seeded(3);
        for cfg in [BackboneConfig::tiny(64), BackboneConfig::small(128)] {
            let b = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
            assert_eq!(b.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn feature_shape_and_eval_purity() {
        let mut rng = seeded(4);
        let b = Backbone::<f64>::new(&BackboneConfig::tiny(64), &mut rng).unwrap();
        let one = Tensor::<f64>::randn(&[1, 3, 8, 8], 1.0, &mut rng).to_vec();
        let mut two = one.clone();
        two.extend(&one);
        let x = Tensor::from_vec(two, &[2, 3, 8, 8]).unwrap();
        let y = b.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 64]);
        let v = y.to_vec();
        assert_eq!(v[..64], v[64..]);
    }
}
