//! Feature distillation between a frozen teacher and the student on
//! rehearsal samples.
//!
//! The loss is `sum_j ||F^t_j - F^s_j||^2 + sum_k ||G^t_k - G^s_k||^2` over
//! backbone maps `F` and neck maps `G`. Under `KdReduction::Mean` each stage
//! term is divided by its element count; `Sum` keeps raw squared norms.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::detector::{Detector, FeaturePyramid, Forward, Mode, Pyramid, Trainable};
use crate::error::{ColtError, Result};
use crate::replay::ReplayMemory;
use crate::taskstream::DetectionSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KDConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub distill_backbone: bool,
    pub distill_neck: bool,
    /// Rehearsal samples per step; `None` follows the supervised batch size.
    pub kd_batch_size: Option<usize>,
    pub kd_reduction: KdReduction,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 20.0,
            distill_backbone: true,
            distill_neck: true,
            kd_batch_size: None,
            kd_reduction: KdReduction::Mean,
        }
    }
}

impl KDConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ColtError::InvalidConfig(format!(
                "kd lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.enabled && !self.distill_backbone && !self.distill_neck {
            return Err(ColtError::InvalidConfig(
                "kd enabled but both distill_backbone and distill_neck are off".into(),
            ));
        }
        if self.kd_batch_size == Some(0) {
            return Err(ColtError::InvalidConfig("kd_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Stages taking part in distillation, as `(label, teacher, student)` pairs.
fn stage_pairs<'a, T>(
    teacher: (&'a [Tensor], &'a [Tensor]),
    student: (&'a [T], &'a [T]),
    cfg: &KDConfig,
) -> Result<Vec<(String, &'a Tensor, &'a T)>> {
    let mut out = Vec::new();
    for (group, on, t, s) in [
        ("backbone", cfg.distill_backbone, teacher.0, student.0),
        ("neck", cfg.distill_neck, teacher.1, student.1),
    ] {
        if t.len() != s.len() {
            return Err(ColtError::ShapeMismatch(format!(
                "{group}: teacher has {} stages, student {}",
                t.len(),
                s.len()
            )));
        }
        if on {
            out.extend(
                t.iter()
                    .zip(s)
                    .enumerate()
                    .map(|(j, (a, b))| (format!("{group} stage {j}"), a, b)),
            );
        }
    }
    Ok(out)
}

fn divisor(t: &Tensor, reduction: KdReduction) -> f64 {
    match reduction {
        KdReduction::Sum => 1.0,
        KdReduction::Mean => t.len() as f64,
    }
}

/// KD loss between two materialised pyramids.
pub fn kd_loss(teacher: &FeaturePyramid, student: &FeaturePyramid, cfg: &KDConfig) -> Result<f64> {
    let pairs = stage_pairs(
        (&teacher.backbone_maps, &teacher.neck_maps),
        (&student.backbone_maps, &student.neck_maps),
        cfg,
    )?;
    let mut total = 0.0;
    for (label, t, s) in pairs {
        if t.shape() != s.shape() {
            return Err(ColtError::ShapeMismatch(format!(
                "{label}: teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let sq: f64 = t.data().iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / divisor(t, cfg.kd_reduction);
    }
    Ok(total)
}

/// KD loss as a graph node; gradients reach only the student variables.
pub fn kd_loss_graph(g: &mut Graph, teacher: &FeaturePyramid, student: &Pyramid, cfg: &KDConfig) -> Result<Var> {
    let pairs = stage_pairs(
        (&teacher.backbone_maps, &teacher.neck_maps),
        (&student.backbone, &student.neck),
        cfg,
    )?;
    let mut total: Option<Var> = None;
    for (label, t, &s) in pairs {
        if t.shape() != g.shape(s) {
            return Err(ColtError::ShapeMismatch(format!(
                "{label}: teacher {:?} vs student {:?}",
                t.shape(),
                g.shape(s)
            )));
        }
        let tv = g.constant(t.clone());
        let term = g.squared_diff(s, tv, divisor(t, cfg.kd_reduction));
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// `sup + lambda * kd`, or `sup` when distillation is disabled.
pub fn total_loss(sup: f64, kd: f64, cfg: &KDConfig) -> f64 {
    if cfg.enabled {
        sup + cfg.lambda * kd
    } else {
        sup
    }
}

/// Teacher features of a batch, without gradient tracking.
pub fn teacher_features(teacher: &Detector, samples: &[&DetectionSample]) -> Result<FeaturePyramid> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = teacher.images_tensor(&images)?;
    let mut fwd = Forward::new(teacher, Mode::Eval, Trainable::none());
    let input = fwd.graph.constant(x);
    let pyr = fwd.features(input);
    Ok(pyr.values(&fwd.graph))
}

/// Paired features for one rehearsal batch.
pub struct KdStep<'d> {
    pub samples: Vec<DetectionSample>,
    pub teacher: FeaturePyramid,
    /// Student graph; `student` lives in it and tracks gradients for the
    /// shared trunk.
    pub forward: Forward<'d>,
    pub student: Pyramid,
}

impl KdStep<'_> {
    pub fn loss(&mut self, cfg: &KDConfig) -> Result<Var> {
        kd_loss_graph(&mut self.forward.graph, &self.teacher, &self.student, cfg)
    }
}

/// Draws `k` rehearsal samples and computes teacher and student pyramids.
/// Returns `Ok(None)` when the memory is empty so the caller skips KD.
pub fn kd_step_inputs<'d>(
    memory: &ReplayMemory,
    teacher: &Detector,
    student: &'d Detector,
    k: usize,
    seed: u64,
    mode: Mode,
) -> Result<Option<KdStep<'d>>> {
    if !teacher.is_frozen() {
        return Err(ColtError::InvalidConfig("kd teacher must be frozen".into()));
    }
    let samples: Vec<DetectionSample> = match memory.sample_batch(k, seed) {
        Ok(b) => b.into_iter().cloned().collect(),
        Err(ColtError::NoRehearsalData) => return Ok(None),
        Err(e) => return Err(e),
    };
    let refs: Vec<&DetectionSample> = samples.iter().collect();
    let teacher_pyr = teacher_features(teacher, &refs)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = student.images_tensor(&images)?;
    let trainable = Trainable {
        backbone: true,
        neck: true,
        head: None,
    };
    let mut forward = Forward::new(student, mode, trainable);
    let input = forward.graph.constant(x);
    let pyr = forward.features(input);
    Ok(Some(KdStep {
        samples,
        teacher: teacher_pyr,
        forward,
        student: pyr,
    }))
}
