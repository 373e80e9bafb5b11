use std::fs;
use std::path::Path;

use modalfuse::checkpoint;
use modalfuse::io::write_atomic;
use modalfuse::model::{ModelConfig, TransMed, Variant};
use modalfuse::preprocess::container::{load_dataset, save_dataset, Split};
use modalfuse::preprocess::{BatchExtents, VolumeBatch};
use modalfuse::rng::seeded;
use modalfuse::synth::{generate_dataset, SynthSpec, Task};
use modalfuse::tensor::fault::with_fault;
use modalfuse::training::{
    assign_split, evaluate, sample_extents, train_run, ConfusionMatrix, ExperimentConfig, MetricsReport, Precision,
    RunResult, RunStatus,
};
use modalfuse::verify::{run_suite, SuiteOptions};
use modalfuse::Float;
use rayon::prelude::*;

use crate::args::{EvalArgs, GradcheckArgs, ParamsArgs, SynthArgs, TrainArgs};
use crate::config::{read_config, render_config, resolve};
use crate::error::{CliError, CliResult};
use crate::table::render_table;

pub const CHECKPOINT_FILE: &str = "checkpoint.mfck";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const FAULT_ENV: &str = "MODALFUSE_FAULT_INJECT";

pub struct Dataset {
    pub batch: VolumeBatch,
    /// `None` when no sample is pinned to a split.
    pub pinned: Option<Vec<Split>>,
}

impl Dataset {
    pub fn pinned(&self) -> Option<&[Split]> {
        self.pinned.as_deref()
    }
}

pub fn load_data(path: &Path) -> CliResult<Dataset> {
    let stored = load_dataset(path).map_err(|e| CliError::io_at(path, e))?;
    let pinned = stored.splits.iter().any(|&s| s != Split::Any).then_some(stored.splits);
    Ok(Dataset {
        batch: stored.batch,
        pinned,
    })
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io_at(path, e))
}

pub fn write(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(|e| CliError::io_at(&path, e))
}

/// Rejects configurations whose model cannot consume this dataset before
/// any training starts.
pub fn check_model(cfg: &ExperimentConfig, data: &VolumeBatch) -> CliResult<ModelConfig> {
    let model = cfg.model_config(data.num_classes);
    model.param_count(sample_extents(data))?;
    Ok(model)
}

fn loss_log(report: &MetricsReport) -> String {
    let mut out = String::from("run_id,epoch,loss\n");
    for r in &report.runs {
        for (epoch, loss) in r.losses.iter().enumerate() {
            out.push_str(&format!("{},{},{loss}\n", r.run_id, epoch + 1));
        }
    }
    out
}

/// Every repeat in parallel; the checkpoint of repeat 0 is encoded inside
/// its worker because models are not shareable across threads.
fn train_all<T: Float>(
    cfg: &ExperimentConfig,
    data: &VolumeBatch,
    pinned: Option<&[Split]>,
) -> CliResult<(MetricsReport, Vec<u8>)> {
    let mut runs = (0..cfg.experiment.repeats)
        .into_par_iter()
        .map(|r| {
            let (result, model) = train_run::<T>(cfg, data, pinned, r)?;
            Ok((result, (r == 0).then(|| checkpoint::encode(&model))))
        })
        .collect::<modalfuse::Result<Vec<_>>>()?;
    let bytes = runs[0].1.take().expect("repeat 0 keeps its checkpoint");
    let results = runs.into_iter().map(|(r, _)| r).collect();
    Ok((MetricsReport::new(data.num_classes, results), bytes))
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let cfg = resolve(&args.experiment, args.k, args.ablate)?;
    let data = load_data(&args.data)?;
    check_model(&cfg, &data.batch)?;
    create_dir(&args.out)?;
    let (report, ckpt) = match cfg.model.precision {
        Precision::F32 => train_all::<f32>(&cfg, &data.batch, data.pinned())?,
        Precision::F64 => train_all::<f64>(&cfg, &data.batch, data.pinned())?,
    };
    write(&args.out, CONFIG_FILE, render_config(&cfg).as_bytes())?;
    write(&args.out, CHECKPOINT_FILE, &ckpt)?;
    write(&args.out, LOSS_LOG_FILE, loss_log(&report).as_bytes())?;
    write(&args.out, METRICS_FILE, report.to_csv().as_bytes())?;
    write(&args.out, SUMMARY_FILE, report.summary_json().as_bytes())?;
    let row = report.table_row();
    println!(
        "{} repeats, {} failed; acc {}; precision {}",
        report.runs.len(),
        report.failed_runs(),
        row[0],
        row[1..].join(", ")
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn restore_and_evaluate<T: Float>(
    cfg: &ExperimentConfig,
    data: &VolumeBatch,
    indices: &[usize],
    ckpt: &Path,
) -> CliResult<ConfusionMatrix> {
    let model = TransMed::<T>::new(&cfg.model_config(data.num_classes), sample_extents(data), &mut seeded(0))?;
    checkpoint::load(ckpt, &model).map_err(|e| CliError::io_at(ckpt, e))?;
    Ok(evaluate(&model, data, indices)?)
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = read_config(&args.run.join(CONFIG_FILE))?;
    cfg.validate()?;
    let data = load_data(&args.data)?;
    check_model(&cfg, &data.batch)?;
    let indices = if args.all {
        (0..data.batch.len()).collect()
    } else {
        assign_split(&cfg, &data.batch, data.pinned(), cfg.run_seed(0))?.1
    };
    let ckpt = args.run.join(CHECKPOINT_FILE);
    let confusion = match cfg.model.precision {
        Precision::F32 => restore_and_evaluate::<f32>(&cfg, &data.batch, &indices, &ckpt)?,
        Precision::F64 => restore_and_evaluate::<f64>(&cfg, &data.batch, &indices, &ckpt)?,
    };
    let run = RunResult {
        run_id: 0,
        seed: cfg.run_seed(0),
        epochs_completed: cfg.experiment.epochs,
        losses: Vec::new(),
        confusion,
        status: RunStatus::Completed,
    };
    let report = MetricsReport::new(data.batch.num_classes, vec![run]);
    let out = args.out.as_deref().unwrap_or(&args.run);
    create_dir(out)?;
    write(out, EVAL_METRICS_FILE, report.to_csv().as_bytes())?;
    write(out, EVAL_SUMMARY_FILE, report.summary_json().as_bytes())?;
    println!("{} samples; acc {}", indices.len(), report.table_row()[0]);
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    if args.mask.is_some() && args.task != Task::CrossmodalXor {
        return Err(CliError::config("--mask applies only to the crossmodal task"));
    }
    let spec = SynthSpec {
        noise: args.noise,
        marker_intensity: args.intensity,
        mask: args.mask,
        ..SynthSpec::new(args.task, args.samples, args.seed).with_extents(args.depth, args.height, args.width)
    };
    let batch = generate_dataset(&spec)?;
    create_dir(&args.out)?;
    save_dataset(&args.out, &batch, None).map_err(|e| CliError::io_at(&args.out, e))?;
    let mut counts = vec![0usize; batch.num_classes];
    batch.labels.iter().for_each(|&l| counts[l] += 1);
    println!(
        "wrote {} {} samples to {} (per-class counts {:?})",
        batch.len(),
        args.task,
        args.out.display(),
        counts
    );
    Ok(())
}

pub fn params(args: &ParamsArgs) -> CliResult<()> {
    let (extents, classes) = match &args.data {
        Some(path) => {
            let data = load_data(path)?;
            (sample_extents(&data.batch), data.batch.num_classes)
        }
        None => (
            BatchExtents {
                batch: 1,
                modalities: args.modalities,
                channels: 1,
                depth: args.depth,
                height: args.height,
                width: args.width,
            },
            args.classes,
        ),
    };
    let header = ["variant", "params", "MACs/sample", "GFLOPs/sample"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig::preset(args.variant, variant, args.k, classes);
        let macs = cfg.macs_per_sample(extents)?;
        rows.push(vec![
            variant.label().to_string(),
            cfg.param_count(extents)?.to_string(),
            macs.to_string(),
            format!("{:.4}", 2.0 * macs as f64 / 1e9),
        ]);
    }
    println!(
        "preset {}, K = {}, {} classes, sample {}×{}×{}×{}×{}",
        args.variant, args.k, classes, extents.modalities, extents.channels, extents.depth, extents.height, extents.width
    );
    print!("{}", render_table(&header, &rows));
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let opts = SuiteOptions {
        seed: args.seed,
        coords_per_tensor: args.coords,
        end_to_end: !args.ops_only,
    };
    let fault = std::env::var(FAULT_ENV).ok().filter(|s| !s.is_empty());
    let report = match &fault {
        Some(op) => {
            eprintln!("fault injected into the backward rule of {op}");
            with_fault(op, || run_suite(&opts))?
        }
        None => run_suite(&opts)?,
    };
    print!("{}", report.render());
    let worst = report.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks, tolerance {:e}, worst relative error {worst:.3e}",
        report.checks.len(),
        report.tolerance
    );
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
