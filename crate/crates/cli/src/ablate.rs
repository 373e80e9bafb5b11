use modalfuse::model::Variant;
use modalfuse::preprocess::container::Split;
use modalfuse::preprocess::VolumeBatch;
use modalfuse::training::{run_experiment, sample_extents, Aggregate, ExperimentConfig, MetricsReport};
use rayon::prelude::*;

use crate::args::AblateArgs;
use crate::commands::{create_dir, load_data, write};
use crate::config::resolve;
use crate::error::{CliError, CliResult};
use crate::table::render_table;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Debug, Clone)]
pub enum CellOutcome {
    Done { params: usize, report: MetricsReport },
    /// The configuration cannot be applied to this dataset, e.g. K does not
    /// divide the in-plane extents.
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub variant: Variant,
    pub k: usize,
    pub outcome: CellOutcome,
}

pub fn run_cell(
    base: &ExperimentConfig,
    data: &VolumeBatch,
    pinned: Option<&[Split]>,
    variant: Variant,
    k: usize,
) -> CliResult<Cell> {
    let mut cfg = base.clone();
    cfg.model.ablate = variant;
    cfg.model.grid = k;
    let params = match cfg.model_config(data.num_classes).param_count(sample_extents(data)) {
        Ok(p) => p,
        Err(e) => {
            return Ok(Cell {
                variant,
                k,
                outcome: CellOutcome::Invalid(e.to_string()),
            })
        }
    };
    let report = run_experiment(&cfg, data, pinned)?;
    Ok(Cell {
        variant,
        k,
        outcome: CellOutcome::Done { params, report },
    })
}

/// Variants in the given order, each across all K. Cells run in parallel.
pub fn run_grid(
    base: &ExperimentConfig,
    data: &VolumeBatch,
    pinned: Option<&[Split]>,
    variants: &[Variant],
    ks: &[usize],
) -> CliResult<Vec<Cell>> {
    let grid: Vec<(Variant, usize)> = variants.iter().flat_map(|&v| ks.iter().map(move |&k| (v, k))).collect();
    grid.par_iter().map(|&(v, k)| run_cell(base, data, pinned, v, k)).collect()
}

pub fn table(cells: &[Cell], num_classes: usize) -> String {
    let mut header = ["variant", "K", "params", "acc"].map(String::from).to_vec();
    header.extend((0..num_classes).map(|c| format!("precision[{c}]")));
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|cell| {
            let mut row = vec![cell.variant.label().to_string(), cell.k.to_string()];
            match &cell.outcome {
                CellOutcome::Done { params, report } => {
                    row.push(params.to_string());
                    row.extend(report.table_row());
                }
                CellOutcome::Invalid(reason) => {
                    row.push("invalid".into());
                    row.push(reason.clone());
                }
            }
            row
        })
        .collect();
    render_table(&header, &rows)
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn csv(cells: &[Cell], num_classes: usize) -> String {
    let mut out = String::from("variant,k,params,status,acc_mean,acc_std");
    for c in 0..num_classes {
        out.push_str(&format!(",precision_class_{c}_mean,precision_class_{c}_std"));
    }
    out.push('\n');
    for cell in cells {
        out.push_str(&format!("{},{}", cell.variant, cell.k));
        match &cell.outcome {
            CellOutcome::Done { params, report } => {
                out.push_str(&format!(",{params},ok"));
                let aggs: Vec<Aggregate> = std::iter::once(report.accuracy()).chain(report.precision()).collect();
                for a in aggs {
                    out.push_str(&format!(",{},{}", num(a.mean), num(a.std)));
                }
            }
            CellOutcome::Invalid(_) => {
                out.push_str(",NA,invalid");
                out.push_str(&",NA".repeat(2 * (num_classes + 1)));
            }
        }
        out.push('\n');
    }
    out
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    if args.k.is_empty() || args.ablate.is_empty() {
        return Err(CliError::config("the grid needs at least one variant and one K"));
    }
    let base = resolve(&args.experiment, None, None)?;
    let data = load_data(&args.data)?;
    create_dir(&args.out)?;
    let cells = run_grid(&base, &data.batch, data.pinned(), &args.ablate, &args.k)?;
    let classes = data.batch.num_classes;
    let rendered = table(&cells, classes);
    write(&args.out, ABLATION_CSV, csv(&cells, classes).as_bytes())?;
    write(&args.out, ABLATION_TABLE, rendered.as_bytes())?;
    print!("{rendered}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use modalfuse::synth::{generate_dataset, SynthSpec, Task};

    #[test]
    fn invalid_k_is_marked_and_grid_continues() {
        let data = generate_dataset(&SynthSpec::new(Task::CrossmodalXor, 10, 0).with_extents(3, 8, 8)).unwrap();
        let mut base = ExperimentConfig::default();
        base.experiment.repeats = 2;
        base.experiment.epochs = 1;
        let cells = run_grid(&base, &data, None, &[Variant::Full, Variant::NoCnn], &[3, 2]).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(matches!(cells[0].outcome, CellOutcome::Invalid(_)));
        assert!(matches!(cells[1].outcome, CellOutcome::Done { .. }));
        let csv = csv(&cells, 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("none,3,NA,invalid"));
        assert!(lines.iter().all(|l| l.split(',').count() == 10));
        let t = table(&cells, 2);
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("w/o CNN"));
    }
}
