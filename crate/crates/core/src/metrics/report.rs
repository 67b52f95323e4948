//! Run summaries and the tab-separated report tables.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{forgetting_rate, EvalResult, PerformanceMatrix};
use crate::detector::BackboneKind;
use crate::error::{ColtError, Result};
use crate::expansion::GapReport;
use crate::taskstream::CLASS_NAMES;

/// Detector family column; the one-stage anchor-free head stands in for the
/// two-stage detectors of the original comparison.
pub const DETECTOR_ANALOGUE: &str = "OneStage-AF";

/// Everything needed to rebuild the tables of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub backbone: BackboneKind,
    pub freeze_norm: bool,
    pub kd: bool,
    pub head_expanding: bool,
    pub seed: u64,
    pub dataset_digest: String,
    pub task_names: Vec<String>,
    pub matrix: PerformanceMatrix,
    /// Final-model evaluation per task.
    pub final_evals: Vec<Option<EvalResult>>,
    pub gap_reports: Vec<GapReport>,
    pub mean_ap: Option<f64>,
    pub forgetting_rate: Option<f64>,
}

impl RunSummary {
    /// Fills `mean_ap` and `forgetting_rate` from the matrix.
    pub fn finalize(&mut self) {
        self.mean_ap = self.matrix.final_mean_ap();
        self.forgetting_rate = forgetting_rate(&self.matrix).ok();
    }

    pub fn backbone_label(&self) -> String {
        backbone_label(self.backbone, self.freeze_norm)
    }

    /// Mean over tasks of each class's final AP, in percent.
    pub fn per_class_ap(&self) -> Vec<Option<f64>> {
        (0..CLASS_NAMES.len())
            .map(|c| {
                let v: Vec<f64> = self
                    .final_evals
                    .iter()
                    .flatten()
                    .filter_map(|e| e.per_class_ap.get(c).copied().flatten())
                    .collect();
                (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

fn backbone_label(kind: BackboneKind, freeze_norm: bool) -> String {
    match (kind, freeze_norm) {
        (BackboneKind::Transformer, _) => "Transformer".into(),
        (BackboneKind::Cnn, false) => "CNN-BN".into(),
        (BackboneKind::Cnn, true) => "CNN-BN-frozen".into(),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-sweep statistics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub backbone: String,
    pub kd: bool,
    pub head_expanding: bool,
    pub seeds: Vec<u64>,
    pub mean_ap: f64,
    pub mean_ap_std: f64,
    pub forgetting_rate: Option<f64>,
    pub forgetting_rate_std: Option<f64>,
    /// Mean final AP per task.
    pub task_ap: Vec<f64>,
}

/// Mean and sample standard deviation over runs of one configuration.
pub fn aggregate(runs: &[RunSummary]) -> Result<Aggregate> {
    let first = runs
        .first()
        .ok_or_else(|| ColtError::Report("no runs to aggregate".into()))?;
    let maps: Option<Vec<f64>> = runs.iter().map(|r| r.mean_ap).collect();
    let maps = maps.ok_or_else(|| ColtError::Report("run without final mean AP".into()))?;
    let (mean_ap, mean_ap_std) = mean_std(&maps);
    let frs: Option<Vec<f64>> = runs.iter().map(|r| r.forgetting_rate).collect();
    let (forgetting_rate, forgetting_rate_std) = match frs {
        Some(v) => {
            let (m, s) = mean_std(&v);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let t = first.matrix.t;
    let task_ap = (0..t)
        .map(|i| {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.matrix.get(i, t - 1)).collect();
            mean_std(&v).0
        })
        .collect();
    Ok(Aggregate {
        method: first.method.clone(),
        backbone: first.backbone_label(),
        kd: first.kd,
        head_expanding: first.head_expanding,
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_ap,
        mean_ap_std,
        forgetting_rate,
        forgetting_rate_std,
        task_ap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub method: String,
    pub detector: String,
    pub backbone: String,
    pub kd: bool,
    pub head_expanding: bool,
    pub mean_ap: f64,
    pub fr: Option<f64>,
}

impl From<&RunSummary> for Table1Row {
    fn from(r: &RunSummary) -> Self {
        Self {
            method: r.method.clone(),
            detector: DETECTOR_ANALOGUE.into(),
            backbone: r.backbone_label(),
            kd: r.kd,
            head_expanding: r.head_expanding,
            mean_ap: r.mean_ap.unwrap_or(f64::NAN),
            fr: r.forgetting_rate,
        }
    }
}

impl From<&Aggregate> for Table1Row {
    fn from(a: &Aggregate) -> Self {
        Self {
            method: a.method.clone(),
            detector: DETECTOR_ANALOGUE.into(),
            backbone: a.backbone.clone(),
            kd: a.kd,
            head_expanding: a.head_expanding,
            mean_ap: a.mean_ap,
            fr: a.forgetting_rate,
        }
    }
}

fn flag(on: bool) -> &'static str {
    if on {
        "w"
    } else {
        "w/o"
    }
}

fn num(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite())
        .map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

pub const TABLE1_HEADER: [&str; 7] = [
    "Method",
    "Detector",
    "Backbone",
    "KD",
    "Head Expanding",
    "Mean AP ↑",
    "FR ↓",
];

/// Ablation table: one row per configuration.
pub fn render_table1(rows: &[Table1Row]) -> String {
    let mut out = TABLE1_HEADER.join("\t");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.method,
            r.detector,
            r.backbone,
            flag(r.kd),
            flag(r.head_expanding),
            num(Some(r.mean_ap)),
            num(r.fr)
        );
    }
    out
}

/// Final mean AP, per-task AP and per-class AP of one run.
pub fn render_table2(r: &RunSummary) -> String {
    let t = r.matrix.t;
    let mut header = vec!["Method".to_string(), "Mean AP".to_string()];
    header.extend((1..=t).map(|i| format!("Task{i}")));
    header.extend(CLASS_NAMES.iter().map(|c| c.to_string()));
    let mut row = vec![r.method.clone(), num(r.mean_ap)];
    row.extend((0..t).map(|i| num(t.checked_sub(1).and_then(|last| r.matrix.get(i, last)))));
    row.extend(r.per_class_ap().into_iter().map(num));
    format!("{}\n{}\n", header.join("\t"), row.join("\t"))
}

/// `D[i][j]` with one row per task and one column per training stage.
pub fn render_matrix(m: &PerformanceMatrix) -> String {
    let mut out = String::from("task");
    for j in 0..m.t {
        let _ = write!(out, "\tafter_task{}", j + 1);
    }
    out.push('\n');
    for i in 0..m.t {
        let _ = write!(out, "task{}", i + 1);
        for j in 0..m.t {
            let _ = write!(out, "\t{}", num(m.get(i, j)));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table1: String,
    pub table2: String,
    pub matrix: String,
    pub warnings: Vec<String>,
}

/// Renders the tables of one run; an incomplete matrix yields a partial
/// report with warnings.
pub fn render_report(r: &RunSummary) -> Result<Report> {
    if r.matrix.t == 0 {
        return Err(ColtError::Report("run has no tasks".into()));
    }
    let mut warnings = Vec::new();
    if !r.matrix.is_complete() {
        let done = (0..r.matrix.t).filter(|&j| r.matrix.column_written(j)).count();
        warnings.push(format!("partial report: {done} of {} tasks completed", r.matrix.t));
    }
    if r.matrix.is_complete() && r.forgetting_rate.is_none() {
        warnings.push("forgetting rate undefined (a task scored zero right after training)".into());
    }
    Ok(Report {
        table1: render_table1(&[Table1Row::from(r)]),
        table2: render_table2(r),
        matrix: render_matrix(&r.matrix),
        warnings,
    })
}
