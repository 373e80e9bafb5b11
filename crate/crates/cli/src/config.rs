use std::fs;
use std::path::Path;

use modalfuse::model::Variant;
use modalfuse::training::ExperimentConfig;

use crate::args::ExperimentFlags;
use crate::error::{CliError, CliResult};

pub fn read_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io_at(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn render_config(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("experiment config serializes")
}

/// Config file (or defaults) overlaid with the given flags, validated.
pub fn resolve(flags: &ExperimentFlags, k: Option<usize>, ablate: Option<Variant>) -> CliResult<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    let e = &mut cfg.experiment;
    if let Some(v) = flags.seed {
        e.seed = v;
    }
    if let Some(v) = flags.epochs {
        e.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        e.batch_size = v;
    }
    if let Some(v) = flags.lr {
        e.lr = v;
    }
    if let Some(v) = flags.momentum {
        e.momentum = v;
    }
    if let Some(v) = flags.repeats {
        e.repeats = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = flags.variant {
        m.scale = v;
    }
    if let Some(v) = flags.precision {
        m.precision = v;
    }
    if let Some(v) = k {
        m.grid = v;
    }
    if let Some(v) = ablate {
        m.ablate = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
