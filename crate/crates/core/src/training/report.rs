use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiment::{RunResult, RunStatus};

/// Mean and population standard deviation of the defined values of one
/// metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Aggregate {
                mean: None,
                std: None,
                count: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Aggregate {
            mean: Some(mean),
            std: Some(var.sqrt()),
            count: v.len(),
        }
    }

    /// `0.9000 ± 0.0316`, or `n/a`.
    pub fn cell(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "n/a".to_string(),
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub runs: Vec<RunResult>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_id: usize,
    seed: u64,
    epoch_count: usize,
    status: &'a RunStatus,
    final_loss: Option<f64>,
    acc: Option<f64>,
    precision: Vec<Option<f64>>,
    confusion: &'a [Vec<u64>],
}

#[derive(Serialize)]
struct Summary<'a> {
    num_classes: usize,
    runs: Vec<RunSummary<'a>>,
    failed_runs: usize,
    acc: Aggregate,
    precision: Vec<Aggregate>,
}

impl MetricsReport {
    pub fn new(num_classes: usize, runs: Vec<RunResult>) -> Self {
        MetricsReport { num_classes, runs }
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| !r.succeeded()).count()
    }

    /// Over successful runs only.
    pub fn accuracy(&self) -> Aggregate {
        Aggregate::of(self.runs.iter().map(RunResult::accuracy))
    }

    /// Per class, over runs in which the class was predicted at least once.
    pub fn precision(&self) -> Vec<Aggregate> {
        (0..self.num_classes)
            .map(|c| Aggregate::of(self.runs.iter().map(|r| r.precision()[c])))
            .collect()
    }

    /// One row per run, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,seed,epoch_count,acc");
        for c in 0..self.num_classes {
            write!(out, ",precision_class_{c}").unwrap();
        }
        out.push_str(",status\n");
        for r in &self.runs {
            write!(out, "{},{},{},{}", r.run_id, r.seed, r.epochs_completed, num(r.accuracy())).unwrap();
            for p in r.precision() {
                write!(out, ",{}", num(p)).unwrap();
            }
            let status = match r.status {
                RunStatus::Completed => "ok".to_string(),
                RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
            };
            writeln!(out, ",{status}").unwrap();
        }
        let (acc, prec) = (self.accuracy(), self.precision());
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let get = |a: &Aggregate| if pick == 0 { a.mean } else { a.std };
            write!(out, "{label},,,{}", num(get(&acc))).unwrap();
            for p in &prec {
                write!(out, ",{}", num(get(p))).unwrap();
            }
            out.push_str(",\n");
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = Summary {
            num_classes: self.num_classes,
            runs: self
                .runs
                .iter()
                .map(|r| RunSummary {
                    run_id: r.run_id,
                    seed: r.seed,
                    epoch_count: r.epochs_completed,
                    status: &r.status,
                    final_loss: r.losses.last().copied(),
                    acc: r.accuracy(),
                    precision: r.precision(),
                    confusion: &r.confusion.counts,
                })
                .collect(),
            failed_runs: self.failed_runs(),
            acc: self.accuracy(),
            precision: self.precision(),
        };
        let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Accuracy and per-class precision as `mean ± std` cells.
    pub fn table_row(&self) -> Vec<String> {
        std::iter::once(self.accuracy().cell())
            .chain(self.precision().iter().map(Aggregate::cell))
            .collect()
    }
}
