//! The hybrid classifier and its two ablations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::encoder::{Encoder, EncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::layers::{join, Linear, Mode, Module, NamedTensor};
use crate::preprocess::{BatchExtents, VolumeBatch};
use crate::sequencer::{build_patch_batch, regroup_tokens, PatchBatch, SequencePlan, SLICES_PER_IMAGE};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// CNN features as tokens of the transformer.
    #[serde(alias = "none")]
    Full,
    /// CNN features, mean pooled over tokens, linear head.
    NoTransformer,
    /// Raw patch pixels, one linear embedding, transformer.
    NoCnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoTransformer, Variant::NoCnn];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTransformer => "w/o transformer",
            Variant::NoCnn => "w/o CNN",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "none",
            Variant::NoTransformer => "no-transformer",
            Variant::NoCnn => "no-cnn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Variant::Full),
            "no-transformer" => Ok(Variant::NoTransformer),
            "no-cnn" => Ok(Variant::NoCnn),
            other => Err(Error::config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Tiny,
    Small,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Tiny => "tiny",
            Scale::Small => "small",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            other => Err(Error::config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub variant: Variant,
    /// Grid divisor `K`.
    pub grid: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn preset(scale: Scale, variant: Variant, grid: usize, num_classes: usize) -> Self {
        let encoder = match scale {
            Scale::Tiny => EncoderConfig::tiny(),
            Scale::Small => EncoderConfig::small(),
        };
        let backbone = match scale {
            Scale::Tiny => BackboneConfig::tiny(encoder.dim),
            Scale::Small => BackboneConfig::small(encoder.dim),
        };
        ModelConfig {
            backbone,
            encoder,
            variant,
            grid,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        if self.backbone.embedding_dim != self.encoder.dim {
            return Err(Error::config(format!(
                "backbone width {} differs from encoder width {}",
                self.backbone.embedding_dim, self.encoder.dim
            )));
        }
        if self.grid == 0 || self.num_classes == 0 {
            return Err(Error::config("grid divisor and class count must be positive"));
        }
        Ok(())
    }

    /// Sequence layout for one sample of the given extents (batch ignored).
    pub fn plan(&self, sample: BatchExtents) -> Result<SequencePlan> {
        SequencePlan::new(BatchExtents { batch: 1, ..sample }, self.grid)
    }

    fn pixel_dim(plan: &SequencePlan) -> usize {
        SLICES_PER_IMAGE * plan.patch_height * plan.patch_width
    }

    /// Trainable scalars for inputs of the given extents, from the
    /// configuration alone.
    pub fn param_count(&self, sample: BatchExtents) -> Result<usize> {
        self.validate()?;
        let plan = self.plan(sample)?;
        let p = self.encoder.dim;
        let c = self.num_classes;
        let n = plan.tokens_per_sample();
        let transformer = self.encoder.layers_param_count() + (n + 1) * p + p + p * c + c;
        Ok(match self.variant {
            Variant::Full => self.backbone.param_count() + transformer,
            Variant::NoTransformer => self.backbone.param_count() + p * c + c,
            Variant::NoCnn => Self::pixel_dim(&plan) * p + p + transformer,
        })
    }

    /// Forward multiply-accumulates for one sample.
    pub fn macs_per_sample(&self, sample: BatchExtents) -> Result<usize> {
        self.validate()?;
        let plan = self.plan(sample)?;
        let p = self.encoder.dim;
        let n = plan.tokens_per_sample();
        let cnn = n * self.backbone.macs_per_patch(plan.patch_height, plan.patch_width);
        let transformer = self.encoder.macs(n + 1) + p * self.num_classes;
        Ok(match self.variant {
            Variant::Full => cnn + transformer,
            Variant::NoTransformer => cnn + p * self.num_classes,
            Variant::NoCnn => n * Self::pixel_dim(&plan) * p + transformer,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TransMed<T: Float = f64> {
    pub config: ModelConfig,
    /// Layout for a single sample; batches differ only in `B`.
    pub plan: SequencePlan,
    pub backbone: Option<Backbone<T>>,
    pub embed: Option<Linear<T>>,
    pub encoder: Option<Encoder<T>>,
    pub pool_head: Option<Linear<T>>,
}

impl<T: Float> TransMed<T> {
    pub fn new(config: &ModelConfig, sample: BatchExtents, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let plan = config.plan(sample)?;
        let n = plan.tokens_per_sample();
        let p = config.encoder.dim;
        let mut model = TransMed {
            config: config.clone(),
            plan,
            backbone: None,
            embed: None,
            encoder: None,
            pool_head: None,
        };
        match config.variant {
            Variant::Full => {
                model.backbone = Some(Backbone::new(&config.backbone, rng)?);
                model.encoder = Some(Encoder::new(&config.encoder, n, config.num_classes, rng)?);
            }
            Variant::NoTransformer => {
                model.backbone = Some(Backbone::new(&config.backbone, rng)?);
                model.pool_head = Some(Linear::normal(p, config.num_classes, INIT_STD, rng));
            }
            Variant::NoCnn => {
                let pixels = ModelConfig::pixel_dim(&plan);
                model.embed = Some(Linear::normal(pixels, p, (1.0 / pixels as f64).sqrt(), rng));
                model.encoder = Some(Encoder::new(&config.encoder, n, config.num_classes, rng)?);
            }
        }
        Ok(model)
    }

    fn check_plan(&self, plan: &SequencePlan) -> Result<()> {
        let expect = BatchExtents {
            batch: plan.extents.batch,
            ..self.plan.extents
        };
        if plan.extents != expect || plan.grid != self.plan.grid {
            return Err(Error::contract(format!(
                "model built for sample extents {:?} with K={}, got {:?} with K={}",
                self.plan.extents, self.plan.grid, plan.extents, plan.grid
            )));
        }
        Ok(())
    }

    pub fn patches(&self, batch: &VolumeBatch) -> Result<PatchBatch<T>> {
        build_patch_batch(batch, self.config.grid)
    }

    /// Logits `(B, classes)` for a prepared patch batch.
    pub fn forward_patches(&self, patches: &PatchBatch<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_plan(&patches.plan)?;
        let plan = &patches.plan;
        let features = match (&self.backbone, &self.embed) {
            (Some(backbone), _) => backbone.forward(&patches.data, mode)?,
            (None, Some(embed)) => {
                let flat = patches.data.reshape(&[patches.count(), ModelConfig::pixel_dim(plan)])?;
                embed.forward(&flat)?
            }
            (None, None) => unreachable!("every variant has a patch feature extractor"),
        };
        let tokens = regroup_tokens(&features, plan)?;
        match (&self.encoder, &self.pool_head) {
            (Some(encoder), _) => encoder.forward(&tokens),
            (None, Some(head)) => head.forward(&tokens.mean_axis(1)?),
            (None, None) => unreachable!("every variant has a head"),
        }
    }

    pub fn forward(&self, batch: &VolumeBatch, mode: Mode) -> Result<Tensor<T>> {
        self.forward_patches(&self.patches(batch)?, mode)
    }
}

impl<T: Float> Module<T> for TransMed<T> {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        if let Some(b) = &self.backbone {
            b.visit(&join(prefix, "backbone"), out);
        }
        if let Some(e) = &self.embed {
            e.visit(&join(prefix, "embed"), out);
        }
        if let Some(e) = &self.encoder {
            e.visit(prefix, out);
        }
        if let Some(h) = &self.pool_head {
            h.visit(&join(prefix, "head"), out);
        }
    }
}
