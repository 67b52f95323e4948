//! Small one-stage detector: swappable backbone, FPN neck and a registry of
//! detection heads routed by task id.

mod checkpoint;
mod forward;
mod init;
mod predict;
mod targets;

pub use checkpoint::{DetectorCheckpoint, CHECKPOINT_VERSION};
pub use forward::{Forward, Mode, Pyramid, Trainable};
pub use predict::{nms, Detection, Prediction, NMS_IOU, SCORE_THRESHOLD};
pub use targets::{assign_targets, detection_loss, LevelGeometry, Targets};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColtError, Result};
use crate::taskstream::{DetectionSample, RgbFrame, NUM_CLASSES};
use crate::tensor::Tensor;

/// Foreground classes plus background.
pub const NUM_LOGITS: usize = NUM_CLASSES + 1;
pub const BACKGROUND: usize = NUM_CLASSES;
pub const STEM_STRIDE: usize = 4;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Transformer,
    Cnn,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Transformer => "transformer",
            BackboneKind::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels per stage; its length is the number of emitted maps.
    pub widths: Vec<usize>,
    /// Blocks per stage.
    pub depth: usize,
    /// Channels per attention head (transformer only).
    pub head_dim: usize,
    /// Keep batch-norm statistics and affine parameters fixed (cnn only).
    pub freeze_norm: bool,
    pub freeze_backbone: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Transformer,
            widths: vec![32, 64, 128],
            depth: 1,
            head_dim: 16,
            freeze_norm: false,
            freeze_backbone: false,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub neck_width: usize,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            backbone: BackboneConfig::default(),
            neck_width: 64,
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ColtError::InvalidConfig(m));
        let m = self.backbone.stages();
        if m == 0 {
            return bad("backbone needs at least one stage".into());
        }
        if self.backbone.widths.contains(&0) || self.neck_width == 0 || self.backbone.depth == 0 {
            return bad("widths and depth must be positive".into());
        }
        let min = STEM_STRIDE << (m - 1);
        if !self.input_size.is_multiple_of(min) {
            return bad(format!(
                "input_size {} must be a multiple of {min} for {m} stages",
                self.input_size
            ));
        }
        if self.backbone.kind == BackboneKind::Transformer
            && self
                .backbone
                .widths
                .iter()
                .any(|w| w % self.backbone.head_dim.max(1) != 0)
        {
            return bad("transformer widths must be multiples of head_dim".into());
        }
        Ok(())
    }

    /// Spatial side of each backbone / neck map.
    pub fn map_sizes(&self) -> Vec<usize> {
        (0..self.backbone.stages())
            .map(|s| self.input_size / (STEM_STRIDE << s))
            .collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.backbone.stages()).map(|s| STEM_STRIDE << s).collect()
    }
}

/// Output feature taps of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub backbone_maps: Vec<Tensor>,
    pub neck_maps: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// How a new head is initialised on expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    CopyLastHead,
    FreshRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    n_heads: usize,
    routing: BTreeMap<usize, usize>,
    default_head: usize,
    frozen: bool,
}

/// Parameter gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

pub fn head_prefix(head: usize) -> String {
    format!("heads.{head}.")
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        init::backbone(&config, &mut params, &mut buffers, &mut rng);
        init::neck(&config, &mut params, &mut rng);
        init::head(&config, 0, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            buffers,
            n_heads: 1,
            routing: BTreeMap::new(),
            default_head: 0,
            frozen: false,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn routing(&self) -> &BTreeMap<usize, usize> {
        &self.routing
    }

    pub fn default_head(&self) -> usize {
        self.default_head
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names of batch-statistics normalisation layers.
    pub fn batch_norm_layers(&self) -> Vec<String> {
        self.buffers
            .keys()
            .filter_map(|k| k.strip_suffix(".running_mean").map(str::to_string))
            .collect()
    }

    /// Deep copy with every parameter marked non-trainable.
    pub fn clone_frozen(&self) -> Detector {
        let mut teacher = self.clone();
        teacher.frozen = true;
        teacher
    }

    pub fn head_for_task(&self, task_id: usize) -> Result<usize> {
        self.routing
            .get(&task_id)
            .copied()
            .ok_or(ColtError::UnknownTask(task_id))
    }

    pub fn check_head(&self, head: usize) -> Result<()> {
        if head < self.n_heads {
            Ok(())
        } else {
            Err(ColtError::InvalidHead {
                head,
                count: self.n_heads,
            })
        }
    }

    /// Routes `task_id` to an existing head and makes it the default head.
    pub fn route_task(&mut self, task_id: usize, head: usize) -> Result<()> {
        self.check_head(head)?;
        if self.routing.contains_key(&task_id) {
            return Err(ColtError::AlreadyRouted(task_id));
        }
        self.routing.insert(task_id, head);
        self.default_head = head;
        Ok(())
    }

    /// Appends a head and returns its index. Existing heads are untouched.
    pub fn add_head(&mut self, init: HeadInit, seed: u64) -> Result<usize> {
        if self.frozen {
            return Err(ColtError::FrozenModel);
        }
        let new = self.n_heads;
        match init {
            HeadInit::CopyLastHead => {
                let src = head_prefix(self.default_head);
                let copies: Vec<(String, Tensor)> = self
                    .params
                    .iter()
                    .filter_map(|(k, v)| {
                        k.strip_prefix(&src)
                            .map(|rest| (format!("{}{rest}", head_prefix(new)), v.clone()))
                    })
                    .collect();
                self.params.extend(copies);
            }
            HeadInit::FreshRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                init::head(&self.config, new, &mut self.params, &mut rng);
            }
        }
        self.n_heads += 1;
        Ok(new)
    }

    pub fn head_params(&self, head: usize) -> BTreeMap<String, Tensor> {
        let prefix = head_prefix(head);
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn check_image(&self, image: &RgbFrame) -> Result<()> {
        let s = self.config.input_size;
        if image.width != s || image.height != s {
            return Err(ColtError::ShapeMismatch(format!(
                "image is {}x{}, detector expects {s}x{s}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    /// Stacks images into a `[b, 3, h, w]` tensor.
    pub fn images_tensor(&self, images: &[&RgbFrame]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(ColtError::EmptyBatch);
        }
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            self.check_image(img)?;
            data.extend(img.to_chw());
        }
        Ok(Tensor::new(vec![images.len(), 3, s, s], data))
    }

    /// Backbone and neck maps in inference mode.
    pub fn forward_features(&self, image: &RgbFrame) -> Result<FeaturePyramid> {
        let x = self.images_tensor(&[image])?;
        let mut fwd = Forward::new(self, Mode::Eval, Trainable::none());
        let input = fwd.graph.constant(x);
        let pyr = fwd.features(input);
        Ok(pyr.values(&fwd.graph))
    }

    /// Mean-reduced detection loss of `head` on `batch` in inference mode.
    pub fn supervised_loss(&self, batch: &[&DetectionSample], head: usize) -> Result<LossBreakdown> {
        let (loss, _) = self.loss_and_grads(batch, head, Mode::Eval, Trainable::none())?;
        Ok(loss)
    }

    /// Detection loss together with gradients for the `trainable` parameters.
    pub fn loss_and_grads(
        &self,
        batch: &[&DetectionSample],
        head: usize,
        mode: Mode,
        trainable: Trainable,
    ) -> Result<(LossBreakdown, ParamGrads)> {
        if batch.is_empty() {
            return Err(ColtError::EmptyBatch);
        }
        self.check_head(head)?;
        let images: Vec<&RgbFrame> = batch.iter().map(|s| &s.image).collect();
        let x = self.images_tensor(&images)?;
        let mut fwd = Forward::new(self, mode, trainable);
        let input = fwd.graph.constant(x);
        let pyr = fwd.features(input);
        let out = fwd.head(head, &pyr.neck);
        let targets = assign_targets(batch, &out.levels);
        let (total, cls, reg) = detection_loss(&mut fwd.graph, out.cls, out.reg, &targets);
        let breakdown = LossBreakdown {
            total: fwd.graph.value(total).item(),
            cls: fwd.graph.value(cls).item(),
            reg: fwd.graph.value(reg).item(),
        };
        let grads = fwd.grads(total);
        Ok((breakdown, grads))
    }

    /// Applies batch statistics gathered during a training forward pass.
    pub fn apply_bn_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) {
        if self.frozen || self.config.backbone.freeze_norm {
            return;
        }
        for (prefix, mean, var) in updates {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .expect("batch-norm buffer registered at init");
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut BTreeMap<String, Tensor>> {
        if self.frozen {
            return Err(ColtError::FrozenModel);
        }
        Ok(&mut self.params)
    }
}
