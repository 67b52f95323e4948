//! Parameter registration and initialisation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{head_prefix, BackboneKind, DetectorConfig, NUM_LOGITS, STEM_STRIDE};
use crate::tensor::Tensor;

type Params = BTreeMap<String, Tensor>;

fn conv(params: &mut Params, name: &str, cout: usize, cin: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) {
    let fan_in = (cin * k * k) as f64;
    params.insert(
        format!("{name}.weight"),
        Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng),
    );
    if bias {
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
}

fn linear(params: &mut Params, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    params.insert(
        format!("{name}.weight"),
        Tensor::randn(&[cin, cout], (1.0 / cin as f64).sqrt(), rng),
    );
    params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn norm(params: &mut Params, name: &str, c: usize) {
    params.insert(format!("{name}.weight"), Tensor::full(&[c], 1.0));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
}

fn batch_norm(params: &mut Params, buffers: &mut Params, name: &str, c: usize) {
    norm(params, name, c);
    buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
}

pub(super) fn backbone(cfg: &DetectorConfig, params: &mut Params, buffers: &mut Params, rng: &mut ChaCha8Rng) {
    let bb = &cfg.backbone;
    let w0 = bb.widths[0];
    match bb.kind {
        BackboneKind::Transformer => {
            conv(params, "backbone.stem.conv", w0, 3, STEM_STRIDE, true, rng);
            norm(params, "backbone.stem.ln", w0);
            let side = cfg.input_size / STEM_STRIDE;
            params.insert(
                "backbone.pos_embed".into(),
                Tensor::randn(&[side * side * w0], 0.02, rng),
            );
            for (s, &c) in bb.widths.iter().enumerate() {
                let p = format!("backbone.stages.{s}");
                if s > 0 {
                    conv(params, &format!("{p}.merge.conv"), c, bb.widths[s - 1], 2, true, rng);
                    norm(params, &format!("{p}.merge.ln"), c);
                }
                for b in 0..bb.depth {
                    let q = format!("{p}.blocks.{b}");
                    norm(params, &format!("{q}.ln1"), c);
                    for proj in ["q", "k", "v", "o"] {
                        linear(params, &format!("{q}.attn.{proj}"), c, c, rng);
                    }
                    norm(params, &format!("{q}.ln2"), c);
                    linear(params, &format!("{q}.mlp.fc1"), c, 2 * c, rng);
                    linear(params, &format!("{q}.mlp.fc2"), 2 * c, c, rng);
                }
                norm(params, &format!("{p}.norm"), c);
            }
        }
        BackboneKind::Cnn => {
            conv(params, "backbone.stem.conv", w0, 3, STEM_STRIDE, false, rng);
            batch_norm(params, buffers, "backbone.stem.bn", w0);
            for (s, &c) in bb.widths.iter().enumerate() {
                let p = format!("backbone.stages.{s}");
                if s > 0 {
                    conv(params, &format!("{p}.down.conv"), c, bb.widths[s - 1], 3, false, rng);
                    batch_norm(params, buffers, &format!("{p}.down.bn"), c);
                }
                for b in 0..bb.depth {
                    let q = format!("{p}.blocks.{b}");
                    conv(params, &format!("{q}.conv1"), c, c, 3, false, rng);
                    batch_norm(params, buffers, &format!("{q}.bn1"), c);
                    conv(params, &format!("{q}.conv2"), c, c, 3, false, rng);
                    batch_norm(params, buffers, &format!("{q}.bn2"), c);
                }
            }
        }
    }
}

pub(super) fn neck(cfg: &DetectorConfig, params: &mut Params, rng: &mut ChaCha8Rng) {
    let n = cfg.neck_width;
    for (s, &c) in cfg.backbone.widths.iter().enumerate() {
        conv(params, &format!("neck.lateral.{s}"), n, c, 1, true, rng);
        conv(params, &format!("neck.out.{s}"), n, n, 3, true, rng);
    }
}

pub(super) fn head(cfg: &DetectorConfig, index: usize, params: &mut Params, rng: &mut ChaCha8Rng) {
    let n = cfg.neck_width;
    let p = head_prefix(index);
    conv(params, &format!("{p}conv"), n, n, 3, true, rng);
    conv(params, &format!("{p}cls"), NUM_LOGITS, n, 1, true, rng);
    conv(params, &format!("{p}reg"), 4, n, 1, true, rng);
    // small output layers keep the initial loss near log(NUM_LOGITS)
    for out in ["cls", "reg"] {
        if let Some(w) = params.get_mut(&format!("{p}{out}.weight")) {
            w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }
}
