//! Domain-gap estimation and adaptive head expansion.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, HeadInit};
use crate::error::{ColtError, Result};
use crate::taskstream::{derive_seed, DetectionSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionPolicy {
    pub enabled: bool,
    pub threshold: f64,
    /// Cap on validation samples used for the gap estimate.
    pub gap_samples: usize,
    pub init_mode: HeadInit,
}

impl Default for ExpansionPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 1.2,
            gap_samples: 64,
            init_mode: HeadInit::CopyLastHead,
        }
    }
}

impl ExpansionPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(ColtError::InvalidConfig(format!(
                "expansion threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.gap_samples == 0 {
            return Err(ColtError::InvalidConfig("gap_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub task_id: usize,
    pub avg_val_loss: f64,
    pub threshold: f64,
    pub expanded: bool,
    pub routed_head: usize,
}

/// Mean per-sample supervised loss of the default head on the first
/// `policy.gap_samples` validation samples. No parameters change.
pub fn estimate_domain_gap(det: &Detector, val: &[DetectionSample], policy: &ExpansionPolicy) -> Result<f64> {
    if val.is_empty() {
        return Err(ColtError::EmptyEvalSet);
    }
    let used = &val[..val.len().min(policy.gap_samples)];
    let head = det.default_head();
    let mut sum = 0.0;
    for s in used {
        sum += det.supervised_loss(&[s], head)?.total;
    }
    Ok(sum / used.len() as f64)
}

/// Routes `task_id` to a new head when `gap > threshold`, otherwise to the
/// current default head. The routed head becomes the default head.
pub fn maybe_expand(det: &mut Detector, task_id: usize, gap: f64, policy: &ExpansionPolicy) -> Result<GapReport> {
    if det.routing().contains_key(&task_id) {
        return Err(ColtError::AlreadyRouted(task_id));
    }
    let expanded = gap > policy.threshold;
    let head = if expanded {
        det.add_head(policy.init_mode, derive_seed(&[det.config().init_seed, task_id as u64]))?
    } else {
        det.default_head()
    };
    det.route_task(task_id, head)?;
    Ok(GapReport {
        task_id,
        avg_val_loss: gap,
        threshold: policy.threshold,
        expanded,
        routed_head: head,
    })
}
