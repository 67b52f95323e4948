//! Graph construction for backbone, neck and heads.

use std::collections::HashMap;

use super::{head_prefix, BackboneKind, Detector, FeaturePyramid, LevelGeometry, ParamGrads, NUM_LOGITS, STEM_STRIDE};
use crate::autograd::{BatchNormMode, Graph, Var};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameter groups become gradient-carrying leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub neck: bool,
    /// The single head that may receive gradients.
    pub head: Option<usize>,
}

impl Trainable {
    pub fn none() -> Self {
        Self {
            backbone: false,
            neck: false,
            head: None,
        }
    }

    /// Shared trunk plus one routed head.
    pub fn routed(head: usize) -> Self {
        Self {
            backbone: true,
            neck: true,
            head: Some(head),
        }
    }
}

/// Graph variables of a pyramid.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub backbone: Vec<Var>,
    pub neck: Vec<Var>,
}

impl Pyramid {
    pub fn values(&self, g: &Graph) -> FeaturePyramid {
        FeaturePyramid {
            backbone_maps: self.backbone.iter().map(|&v| g.value(v).clone()).collect(),
            neck_maps: self.neck.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    /// Rows of the batch dimension, for every map.
    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Pyramid {
        Pyramid {
            backbone: self.backbone.iter().map(|&v| g.select_rows(v, rows)).collect(),
            neck: self.neck.iter().map(|&v| g.select_rows(v, rows)).collect(),
        }
    }
}

/// Head outputs flattened to one row per location, level-major then
/// batch, row, column.
pub struct HeadOutput {
    pub cls: Var,
    pub reg: Var,
    pub levels: Vec<LevelGeometry>,
}

pub struct Forward<'d> {
    pub graph: Graph,
    det: &'d Detector,
    mode: Mode,
    trainable: Trainable,
    leaves: HashMap<String, Var>,
    trainable_leaves: Vec<(String, Var)>,
    /// Batch statistics `(layer, mean, unbiased var)` from training-mode
    /// batch-norm layers.
    pub bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn is_norm_param(name: &str) -> bool {
    name.contains(".bn")
}

impl<'d> Forward<'d> {
    pub fn new(det: &'d Detector, mode: Mode, trainable: Trainable) -> Self {
        Self {
            graph: Graph::new(),
            det,
            mode,
            trainable,
            leaves: HashMap::new(),
            trainable_leaves: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        if self.det.frozen {
            return false;
        }
        let bb = &self.det.config.backbone;
        if name.starts_with("backbone.") {
            self.trainable.backbone && !bb.freeze_backbone && !(bb.freeze_norm && is_norm_param(name))
        } else if name.starts_with("neck.") {
            self.trainable.neck
        } else {
            self.trainable.head.is_some_and(|h| name.starts_with(&head_prefix(h)))
        }
    }

    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.leaves.get(name) {
            return v;
        }
        let t = self
            .det
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
            .clone();
        let rg = self.is_trainable(name);
        let v = self.graph.leaf(t, rg);
        if rg {
            self.trainable_leaves.push((name.to_string(), v));
        }
        self.leaves.insert(name.to_string(), v);
        v
    }

    fn has(&self, name: &str) -> bool {
        self.det.params.contains_key(name)
    }

    /// Gradients of `loss` for every trainable parameter that was used.
    pub fn grads(&self, loss: Var) -> ParamGrads {
        let mut out = ParamGrads::new();
        if self.trainable_leaves.is_empty() || !self.graph.requires_grad(loss) {
            return out;
        }
        let mut grads = self.graph.backward(loss);
        for (name, v) in &self.trainable_leaves {
            if let Some(g) = grads.take(*v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let bias_name = format!("{name}.bias");
        let b = self.has(&bias_name).then(|| self.p(&bias_name));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.graph.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    fn batch_norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let batch_stats = self.mode == Mode::Train && !self.det.frozen && !self.det.config.backbone.freeze_norm;
        let mode = if batch_stats {
            BatchNormMode::Batch
        } else {
            BatchNormMode::Running
        };
        let rm = &self.det.buffers[&format!("{name}.running_mean")];
        let rv = &self.det.buffers[&format!("{name}.running_var")];
        let (y, stats) = self.graph.batch_norm(x, g, b, rm.data(), rv.data(), mode, BN_EPS);
        if let Some((mean, var)) = stats {
            self.bn_updates.push((name.to_string(), mean, var));
        }
        y
    }

    /// `[b, c, h, w]` -> `[b, h*w, c]`
    fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.graph.shape(x).to_vec();
        let t = self.graph.permute(x, &[0, 2, 3, 1]);
        self.graph.reshape(t, &[s[0], s[2] * s[3], s[1]])
    }

    fn to_map(&mut self, x: Var, side: usize) -> Var {
        let s = self.graph.shape(x).to_vec();
        let t = self.graph.reshape(x, &[s[0], side, side, s[2]]);
        self.graph.permute(t, &[0, 3, 1, 2])
    }

    fn attention(&mut self, x: Var, name: &str) -> Var {
        let s = self.graph.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let dh = self.det.config.backbone.head_dim.min(c);
        let h = c / dh;
        let split = |this: &mut Self, proj: &str| {
            let y = this.linear(x, &format!("{name}.{proj}"));
            let y = this.graph.reshape(y, &[b, l, h, dh]);
            let y = this.graph.permute(y, &[0, 2, 1, 3]);
            this.graph.reshape(y, &[b * h, l, dh])
        };
        let q = split(self, "q");
        let k = split(self, "k");
        let v = split(self, "v");
        let scores = self.graph.bmm(q, k, true);
        let scores = self.graph.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = self.graph.softmax(scores);
        let y = self.graph.bmm(attn, v, false);
        let y = self.graph.reshape(y, &[b, h, l, dh]);
        let y = self.graph.permute(y, &[0, 2, 1, 3]);
        let y = self.graph.reshape(y, &[b, l, c]);
        self.linear(y, &format!("{name}.o"))
    }

    fn transformer_block(&mut self, x: Var, name: &str) -> Var {
        let n1 = self.layer_norm(x, &format!("{name}.ln1"));
        let a = self.attention(n1, &format!("{name}.attn"));
        let x = self.graph.add(x, a);
        let n2 = self.layer_norm(x, &format!("{name}.ln2"));
        let h = self.linear(n2, &format!("{name}.mlp.fc1"));
        let h = self.graph.gelu(h);
        let h = self.linear(h, &format!("{name}.mlp.fc2"));
        self.graph.add(x, h)
    }

    fn transformer_backbone(&mut self, images: Var) -> Vec<Var> {
        let cfg = &self.det.config;
        let batch = self.graph.shape(images)[0];
        let mut side = cfg.input_size / STEM_STRIDE;
        let stages = cfg.backbone.stages();
        let depth = cfg.backbone.depth;
        let mut maps = Vec::with_capacity(stages);

        let x = self.conv(images, "backbone.stem.conv", STEM_STRIDE, 0);
        let x = self.to_tokens(x);
        let x = self.layer_norm(x, "backbone.stem.ln");
        let c0 = self.graph.shape(x)[2];
        let flat = self.graph.reshape(x, &[batch, side * side * c0]);
        let pos = self.p("backbone.pos_embed");
        let flat = self.graph.add_bias(flat, pos);
        let mut tokens = self.graph.reshape(flat, &[batch, side * side, c0]);

        for s in 0..stages {
            let prefix = format!("backbone.stages.{s}");
            if s > 0 {
                let prev = *maps.last().expect("stage 0 emitted a map");
                let merged = self.conv(prev, &format!("{prefix}.merge.conv"), 2, 0);
                side /= 2;
                let t = self.to_tokens(merged);
                tokens = self.layer_norm(t, &format!("{prefix}.merge.ln"));
            }
            for b in 0..depth {
                tokens = self.transformer_block(tokens, &format!("{prefix}.blocks.{b}"));
            }
            let normed = self.layer_norm(tokens, &format!("{prefix}.norm"));
            maps.push(self.to_map(normed, side));
        }
        maps
    }

    fn cnn_backbone(&mut self, images: Var) -> Vec<Var> {
        let stages = self.det.config.backbone.stages();
        let depth = self.det.config.backbone.depth;
        let mut maps: Vec<Var> = Vec::with_capacity(stages);
        let x = self.conv(images, "backbone.stem.conv", STEM_STRIDE, 0);
        let x = self.batch_norm(x, "backbone.stem.bn");
        let mut x = self.graph.relu(x);
        for s in 0..stages {
            let prefix = format!("backbone.stages.{s}");
            if s > 0 {
                let y = self.conv(x, &format!("{prefix}.down.conv"), 2, 1);
                let y = self.batch_norm(y, &format!("{prefix}.down.bn"));
                x = self.graph.relu(y);
            }
            for b in 0..depth {
                let q = format!("{prefix}.blocks.{b}");
                let y = self.conv(x, &format!("{q}.conv1"), 1, 1);
                let y = self.batch_norm(y, &format!("{q}.bn1"));
                let y = self.graph.relu(y);
                let y = self.conv(y, &format!("{q}.conv2"), 1, 1);
                let y = self.batch_norm(y, &format!("{q}.bn2"));
                let y = self.graph.add(x, y);
                x = self.graph.relu(y);
            }
            maps.push(x);
        }
        maps
    }

    fn neck(&mut self, maps: &[Var]) -> Vec<Var> {
        let m = maps.len();
        let laterals: Vec<Var> = maps
            .iter()
            .enumerate()
            .map(|(s, &f)| self.conv(f, &format!("neck.lateral.{s}"), 1, 0))
            .collect();
        let mut merged = vec![laterals[m - 1]; m];
        for s in (0..m - 1).rev() {
            let up = self.graph.upsample2x(merged[s + 1]);
            merged[s] = self.graph.add(laterals[s], up);
        }
        merged
            .into_iter()
            .enumerate()
            .map(|(s, p)| self.conv(p, &format!("neck.out.{s}"), 1, 1))
            .collect()
    }

    /// Backbone maps (F) and neck maps (G) for `images[b, 3, h, w]`.
    pub fn features(&mut self, images: Var) -> Pyramid {
        let backbone = match self.det.config.backbone.kind {
            BackboneKind::Transformer => self.transformer_backbone(images),
            BackboneKind::Cnn => self.cnn_backbone(images),
        };
        let neck = self.neck(&backbone);
        Pyramid { backbone, neck }
    }

    /// Applies head `head` to every neck level.
    pub fn head(&mut self, head: usize, neck: &[Var]) -> HeadOutput {
        let p = head_prefix(head);
        let strides = self.det.config.strides();
        let mut cls_rows = Vec::with_capacity(neck.len());
        let mut reg_rows = Vec::with_capacity(neck.len());
        let mut levels = Vec::with_capacity(neck.len());
        for (l, &g) in neck.iter().enumerate() {
            let s = self.graph.shape(g).to_vec();
            let (b, h, w) = (s[0], s[2], s[3]);
            let t = self.conv(g, &format!("{p}conv"), 1, 1);
            let t = self.graph.relu(t);
            let cls = self.conv(t, &format!("{p}cls"), 1, 0);
            let reg = self.conv(t, &format!("{p}reg"), 1, 0);
            let cls = self.graph.permute(cls, &[0, 2, 3, 1]);
            cls_rows.push(self.graph.reshape(cls, &[b * h * w, NUM_LOGITS]));
            let reg = self.graph.permute(reg, &[0, 2, 3, 1]);
            reg_rows.push(self.graph.reshape(reg, &[b * h * w, 4]));
            levels.push(LevelGeometry {
                batch: b,
                height: h,
                width: w,
                stride: strides[l],
            });
        }
        let cls = self.graph.concat_rows(&cls_rows);
        let reg = self.graph.concat_rows(&reg_rows);
        HeadOutput { cls, reg, levels }
    }
}
