//! Line-delimited prediction / ground-truth records, so the evaluator also
//! works on results produced elsewhere.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{evaluate_classes, EvalResult, GtBox, ScoredBox};
use crate::bbox::BBox;
use crate::detector::Prediction;
use crate::error::{ColtError, Result};
use crate::taskstream::{DetectionSample, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub sample_id: String,
    pub class: usize,
    pub bbox: BBox,
}

pub fn predictions_to_records(samples: &[DetectionSample], preds: &[Prediction]) -> Vec<PredictionRecord> {
    samples
        .iter()
        .zip(preds)
        .flat_map(|(s, p)| {
            p.detections.iter().map(move |d| PredictionRecord {
                sample_id: s.sample_id.clone(),
                class: d.class,
                score: d.score,
                bbox: d.bbox,
            })
        })
        .collect()
}

pub fn samples_to_records(samples: &[DetectionSample]) -> Vec<GroundTruthRecord> {
    samples
        .iter()
        .flat_map(|s| {
            s.boxes.iter().zip(&s.labels).map(move |(b, &l)| GroundTruthRecord {
                sample_id: s.sample_id.clone(),
                class: l,
                bbox: *b,
            })
        })
        .collect()
}

fn check_class(class: usize, sample_id: &str) -> Result<()> {
    if class < NUM_CLASSES {
        Ok(())
    } else {
        Err(ColtError::InvalidSample {
            sample_id: sample_id.to_string(),
            reason: format!("class {class} outside [0, {NUM_CLASSES})"),
        })
    }
}

pub fn evaluate_records(preds: &[PredictionRecord], gts: &[GroundTruthRecord], iou_thresh: f64) -> Result<EvalResult> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut image = |id: &str| -> usize {
        let n = ids.len();
        *ids.entry(id.to_string()).or_insert(n)
    };
    let mut p = vec![Vec::new(); NUM_CLASSES];
    let mut g = vec![Vec::new(); NUM_CLASSES];
    for r in gts {
        check_class(r.class, &r.sample_id)?;
        g[r.class].push(GtBox {
            image: image(&r.sample_id),
            bbox: r.bbox,
        });
    }
    for r in preds {
        check_class(r.class, &r.sample_id)?;
        p[r.class].push(ScoredBox {
            image: image(&r.sample_id),
            bbox: r.bbox,
            score: r.score,
        });
    }
    evaluate_classes(&p, &g, iou_thresh)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ColtError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serialises");
        writeln!(w, "{line}").map_err(|e| ColtError::io(path, e))?;
    }
    w.flush().map_err(|e| ColtError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| ColtError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ColtError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| ColtError::CorruptRecord {
            line: i + 1,
            sample_id: None,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}
