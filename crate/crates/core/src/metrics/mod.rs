//! Detection evaluation, the performance matrix and the forgetting rate.

mod records;
mod report;

pub use records::{
    evaluate_records, predictions_to_records, read_jsonl, samples_to_records, write_jsonl, GroundTruthRecord,
    PredictionRecord,
};
pub use report::{
    aggregate, render_matrix, render_report, render_table1, render_table2, Aggregate, Report, RunSummary, Table1Row,
    DETECTOR_ANALOGUE, TABLE1_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detector::Detector;
use crate::error::{ColtError, Result};
use crate::taskstream::{DetectionSample, NUM_CLASSES};

pub const DEFAULT_IOU: f64 = 0.5;
const EVAL_BATCH: usize = 16;

/// A scored detection of one class on image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// A ground-truth box of one class on image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub gt: usize,
    pub pred: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP in `[0, 1]` per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean of the defined per-class APs.
    pub mean_ap: f64,
    pub counts: Vec<ClassCounts>,
}

impl EvalResult {
    pub fn mean_ap_percent(&self) -> f64 {
        100.0 * self.mean_ap
    }

    pub fn defined_classes(&self) -> usize {
        self.per_class_ap.iter().flatten().count()
    }
}

fn check_box(b: &BBox, what: &str) -> Result<()> {
    if b.is_valid() {
        Ok(())
    } else {
        Err(ColtError::DegenerateBox(format!("{what} {b:?}")))
    }
}

/// Greedy matching followed by all-point interpolated AP. Returns the AP and
/// the number of true positives.
fn match_and_score(preds: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> Result<(f64, usize)> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(ColtError::InvalidConfig(format!(
            "iou threshold {iou_thresh} not in (0, 1)"
        )));
    }
    for p in preds {
        check_box(&p.bbox, "prediction")?;
        if !p.score.is_finite() {
            return Err(ColtError::InvalidConfig(format!("non-finite score {}", p.score)));
        }
    }
    for g in gts {
        check_box(&g.bbox, "ground truth")?;
    }
    if gts.is_empty() {
        return Ok((0.0, 0));
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for &i in &order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image != p.image {
                continue;
            }
            let iou = p.bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        tp_flags.push(best.is_some());
    }

    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / n_gt);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Ok((ap, tp))
}

/// All-point interpolated average precision of one class.
///
/// Predictions are visited by descending score (ties by lower index); each
/// takes the highest-IoU unmatched ground truth on its image with IoU at
/// least `iou_thresh`. Returns 0 when there is no ground truth.
pub fn average_precision(preds: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> Result<f64> {
    match_and_score(preds, gts, iou_thresh).map(|(ap, _)| ap)
}

/// Per-class evaluation of already-split predictions and ground truth.
pub fn evaluate_classes(preds: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], iou_thresh: f64) -> Result<EvalResult> {
    let mut per_class_ap = Vec::with_capacity(NUM_CLASSES);
    let mut counts = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let (p, g) = (&preds[c], &gts[c]);
        let (ap, matched) = match_and_score(p, g, iou_thresh)?;
        per_class_ap.push((!g.is_empty()).then_some(ap));
        counts.push(ClassCounts {
            gt: g.len(),
            pred: p.len(),
            matched,
        });
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let mean_ap = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalResult {
        per_class_ap,
        mean_ap,
        counts,
    })
}

/// Evaluates `det` on a task's test samples through the head routed to
/// `task_id`.
pub fn evaluate_task(
    det: &Detector,
    samples: &[DetectionSample],
    task_id: usize,
    iou_thresh: f64,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(ColtError::EmptyEvalSet);
    }
    let head = det.head_for_task(task_id)?;
    let mut preds = vec![Vec::new(); NUM_CLASSES];
    let mut gts = vec![Vec::new(); NUM_CLASSES];
    for (chunk_idx, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let out = det.predict_batch_with_head(&images, head)?;
        for (k, (s, p)) in chunk.iter().zip(out).enumerate() {
            let image = chunk_idx * EVAL_BATCH + k;
            for d in p.detections {
                preds[d.class].push(ScoredBox {
                    image,
                    bbox: d.bbox,
                    score: d.score,
                });
            }
            for (b, &l) in s.boxes.iter().zip(&s.labels) {
                gts[l].push(GtBox { image, bbox: *b });
            }
        }
    }
    evaluate_classes(&preds, &gts, iou_thresh)
}

/// `D[i][j]`: mean AP (percent) on task `i` after training task `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub t: usize,
    pub d: Vec<Vec<Option<f64>>>,
}

impl PerformanceMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            d: vec![vec![None; t]; t],
        }
    }

    /// Builds a full matrix from rows, for analysis and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self {
            t: rows.len(),
            d: rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.d.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn column_written(&self, j: usize) -> bool {
        self.d.iter().any(|r| r[j].is_some())
    }

    /// Writes column `j` with the APs of tasks `0..=j`. Each column is
    /// written once.
    pub fn set_column(&mut self, j: usize, values: &[f64]) -> Result<()> {
        if j >= self.t || values.len() != j + 1 {
            return Err(ColtError::Report(format!(
                "column {j} needs {} values in a {}-task matrix, got {}",
                j + 1,
                self.t,
                values.len()
            )));
        }
        if self.column_written(j) {
            return Err(ColtError::Report(format!("column {j} already written")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(ColtError::Report(format!("AP {v} outside [0, 100]")));
        }
        for (i, &v) in values.iter().enumerate() {
            self.d[i][j] = Some(v);
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.t > 0 && (0..self.t).all(|j| self.column_written(j))
    }

    /// Unweighted mean over tasks of the final column.
    pub fn final_mean_ap(&self) -> Option<f64> {
        let last = self.t.checked_sub(1)?;
        let col: Option<Vec<f64>> = (0..self.t).map(|i| self.get(i, last)).collect();
        col.map(|c| c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            t: self.t,
            d: self
                .d
                .iter()
                .map(|r| r.iter().map(|v| v.map(|x| x * c)).collect())
                .collect(),
        }
    }
}

/// Forgetting rate in percent:
/// `100 / (T-1) * sum_{i<T-1} (D[i][i] - D[i][T-1]) / D[i][i]`.
pub fn forgetting_rate(m: &PerformanceMatrix) -> Result<f64> {
    if m.t < 2 {
        return Err(ColtError::Report("forgetting rate needs at least two tasks".into()));
    }
    let last = m.t - 1;
    let mut sum = 0.0;
    for i in 0..last {
        let (Some(peak), Some(fin)) = (m.get(i, i), m.get(i, last)) else {
            return Err(ColtError::Report(format!("matrix entries for task {i} are missing")));
        };
        if peak == 0.0 {
            return Err(ColtError::UndefinedForgetting(i));
        }
        sum += (peak - fin) / peak;
    }
    Ok(100.0 * sum / last as f64)
}
