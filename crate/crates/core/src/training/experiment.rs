use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::ConfusionMatrix;
use super::optim::Sgd;
use super::report::MetricsReport;
use super::split::{split_indices, validate_fraction, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module};
use crate::model::{ModelConfig, Scale, TransMed, Variant};
use crate::preprocess::container::Split;
use crate::preprocess::{add_gaussian_noise, random_flip, BatchExtents, VolumeBatch};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{no_grad, Float};

const TAG_INIT: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_FLIP: u64 = 4;
const TAG_NOISE: u64 = 5;
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub repeats: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    pub stratify: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            seed: 0,
            repeats: 10,
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            momentum: 0.7,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelChoice {
    pub scale: Scale,
    pub ablate: Variant,
    pub grid: usize,
    pub precision: Precision,
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice {
            scale: Scale::Tiny,
            ablate: Variant::Full,
            grid: 2,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub noise_mean: f64,
    pub noise_variance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            noise_mean: 0.0,
            noise_variance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ProtocolConfig,
    pub model: ModelChoice,
    pub augment: AugmentConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        validate_fraction(e.train_fraction)?;
        if e.repeats == 0 {
            return Err(Error::config("repeat count must be at least 1"));
        }
        if e.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(e.lr > 0.0 && e.lr.is_finite()) || !(0.0..1.0).contains(&e.momentum) {
            return Err(Error::config(format!(
                "need lr > 0 and momentum in [0, 1), got lr {} momentum {}",
                e.lr, e.momentum
            )));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_probability) || !(a.noise_variance >= 0.0) || !a.noise_mean.is_finite() {
            return Err(Error::config(format!("invalid augmentation settings {a:?}")));
        }
        if self.model.grid == 0 {
            return Err(Error::config("grid divisor K must be at least 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig::preset(self.model.scale, self.model.ablate, self.model.grid, num_classes)
    }

    /// Seed of repeat `run_id`, derived from the master seed.
    pub fn run_seed(&self, run_id: usize) -> u64 {
        derive_seed(self.experiment.seed, run_id as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// Training loss became non-finite during this epoch (1-based).
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub epochs_completed: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub status: RunStatus,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.succeeded().then(|| self.confusion.accuracy()).flatten()
    }

    pub fn precision(&self) -> Vec<Option<f64>> {
        if self.succeeded() {
            self.confusion.precision()
        } else {
            vec![None; self.confusion.num_classes]
        }
    }
}

/// Train/test indices for one repeat. Samples pinned to a split by the
/// dataset keep it; the rest are split randomly.
pub fn assign_split(
    cfg: &ExperimentConfig,
    data: &VolumeBatch,
    pinned: Option<&[Split]>,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = data.len();
    let free: Vec<usize> = match pinned {
        Some(s) if s.len() != n => return Err(Error::shape("assign_split", &[n], &[s.len()])),
        Some(s) => (0..n).filter(|&i| s[i] == Split::Any).collect(),
        None => (0..n).collect(),
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    if let Some(s) = pinned {
        train.extend((0..n).filter(|&i| s[i] == Split::Train));
        test.extend((0..n).filter(|&i| s[i] == Split::Test));
    }
    if !free.is_empty() {
        let labels: Vec<usize> = free.iter().map(|&i| data.labels[i]).collect();
        let strat = cfg.experiment.stratify.then_some(labels.as_slice());
        let (a, b) = split_indices(free.len(), cfg.experiment.train_fraction, derive_seed(seed, TAG_SPLIT), strat)?;
        train.extend(a.into_iter().map(|i| free[i]));
        test.extend(b.into_iter().map(|i| free[i]));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract(format!(
            "split left {} training and {} test samples",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

pub fn sample_extents(data: &VolumeBatch) -> BatchExtents {
    BatchExtents {
        batch: 1,
        ..data.extents()
    }
}

/// Arg-max predictions in evaluation mode.
pub fn predict<T: Float>(model: &TransMed<T>, data: &VolumeBatch, indices: &[usize]) -> Result<Vec<usize>> {
    no_grad(|| {
        let mut preds = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let logits = model.forward(&data.select(chunk), Mode::Eval)?;
            let classes = logits.shape()[1];
            let v = logits.data();
            for row in v.chunks(classes) {
                let best = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                preds.push(best);
            }
        }
        Ok(preds)
    })
}

pub fn evaluate<T: Float>(model: &TransMed<T>, data: &VolumeBatch, indices: &[usize]) -> Result<ConfusionMatrix> {
    let preds = predict(model, data, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    ConfusionMatrix::from_predictions(&preds, &labels, data.num_classes)
}

/// Trains for the configured epochs on `train`, returning the mean loss of
/// each epoch, or the 1-based epoch whose loss became non-finite.
pub fn train_model<T: Float>(
    cfg: &ExperimentConfig,
    model: &TransMed<T>,
    data: &VolumeBatch,
    train: &[usize],
    seed: u64,
) -> Result<std::result::Result<Vec<f64>, (usize, Vec<f64>)>> {
    let e = &cfg.experiment;
    let a = &cfg.augment;
    let mut opt = Sgd::new(model.parameters(), e.lr, e.momentum)?;
    let mut losses = Vec::with_capacity(e.epochs);
    let mut order = train.to_vec();
    for epoch in 0..e.epochs {
        let epoch_seed = derive_seed(seed, (epoch as u64) << 8);
        order.shuffle(&mut seeded(derive_seed(epoch_seed, TAG_ORDER)));
        let mut total = 0.0;
        for (step, chunk) in order.chunks(e.batch_size).enumerate() {
            let step_seed = derive_seed(epoch_seed, step as u64 + 1024);
            let mut batch = data.select(chunk);
            if a.flip_probability > 0.0 {
                batch = random_flip(&batch, a.flip_probability, derive_seed(step_seed, TAG_FLIP));
            }
            batch = add_gaussian_noise(&batch, a.noise_mean, a.noise_variance, derive_seed(step_seed, TAG_NOISE))?;
            let loss = model.forward(&batch, Mode::Train)?.cross_entropy(&batch.labels)?;
            let value = loss.item().to_f64().unwrap();
            if !value.is_finite() {
                return Ok(Err((epoch + 1, losses)));
            }
            loss.backward()?;
            opt.step()?;
            total += value * chunk.len() as f64;
        }
        losses.push(total / order.len() as f64);
    }
    Ok(Ok(losses))
}

/// One repeat: split, initialize, train, evaluate. Returns the trained model
/// alongside its result.
pub fn train_run<T: Float>(
    cfg: &ExperimentConfig,
    data: &VolumeBatch,
    pinned: Option<&[Split]>,
    run_id: usize,
) -> Result<(RunResult, TransMed<T>)> {
    cfg.validate()?;
    let seed = cfg.run_seed(run_id);
    let (train, test) = assign_split(cfg, data, pinned, seed)?;
    let model = TransMed::<T>::new(
        &cfg.model_config(data.num_classes),
        sample_extents(data),
        &mut seeded(derive_seed(seed, TAG_INIT)),
    )?;
    let (losses, status) = match train_model(cfg, &model, data, &train, seed)? {
        Ok(losses) => (losses, RunStatus::Completed),
        Err((epoch, losses)) => (losses, RunStatus::Diverged { epoch }),
    };
    let confusion = if status == RunStatus::Completed {
        evaluate(&model, data, &test)?
    } else {
        ConfusionMatrix::new(data.num_classes)
    };
    let result = RunResult {
        run_id,
        seed,
        epochs_completed: losses.len(),
        losses,
        confusion,
        status,
    };
    Ok((result, model))
}

fn run_one(cfg: &ExperimentConfig, data: &VolumeBatch, pinned: Option<&[Split]>, run_id: usize) -> Result<RunResult> {
    Ok(match cfg.model.precision {
        Precision::F32 => train_run::<f32>(cfg, data, pinned, run_id)?.0,
        Precision::F64 => train_run::<f64>(cfg, data, pinned, run_id)?.0,
    })
}

/// All repeats of the protocol. Repeats run on the current rayon pool with
/// isolated state; results are ordered by run id.
pub fn run_experiment(cfg: &ExperimentConfig, data: &VolumeBatch, pinned: Option<&[Split]>) -> Result<MetricsReport> {
    cfg.validate()?;
    cfg.model_config(data.num_classes).validate()?;
    let runs = (0..cfg.experiment.repeats)
        .into_par_iter()
        .map(|r| run_one(cfg, data, pinned, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(data.num_classes, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec, Task};

    fn quick() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.repeats = 2;
        cfg.experiment.epochs = 1;
        cfg
    }

    fn data() -> VolumeBatch {
        generate_dataset(&SynthSpec::new(Task::Unimodal, 10, 1).with_extents(3, 8, 8)).unwrap()
    }

    #[test]
    fn pinned_samples_stay_put() {
        let d = data();
        let mut pins = vec![Split::Any; 10];
        pins[0] = Split::Test;
        pins[1] = Split::Train;
        let (train, test) = assign_split(&quick(), &d, Some(&pins), 4).unwrap();
        assert!(test.contains(&0) && train.contains(&1));
        assert_eq!(train.len() + test.len(), 10);
    }

    #[test]
    fn repeats_are_deterministic() {
        let d = data();
        let a = run_experiment(&quick(), &d, None).unwrap();
        let b = run_experiment(&quick(), &d, None).unwrap();
        assert_eq!(a.runs.len(), 2);
        assert_eq!(a, b);
        assert_ne!(a.runs[0].seed, a.runs[1].seed);
    }

    #[test]
    fn zero_epochs_only_evaluates() {
        let mut cfg = quick();
        cfg.experiment.epochs = 0;
        cfg.experiment.repeats = 1;
        let r = run_experiment(&cfg, &data(), None).unwrap();
        assert!(r.runs[0].losses.is_empty());
        assert_eq!(r.runs[0].confusion.total(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = quick();
        cfg.experiment.repeats = 1;
        cfg.experiment.lr = 1e200;
        let r = run_experiment(&cfg, &data(), None).unwrap();
        assert!(matches!(r.runs[0].status, RunStatus::Diverged { .. }));
        assert_eq!(r.runs[0].accuracy(), None);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = quick();
        cfg.experiment.repeats = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = quick();
        cfg.experiment.train_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
