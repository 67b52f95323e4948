//! Location-to-object assignment and the one-stage detection loss.
//!
//! Each ground-truth box is assigned to one pyramid level by its longer
//! side: level `l` covers sides in `[2 s_l, 4 s_l)` where `s_l` is the
//! level stride (clamped to the available levels). On that level every cell
//! whose centre lies inside the box and within 1.5 cells of the box centre
//! is positive; the cell holding the centre is always positive. Overlapping
//! claims go to the smaller box.

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::taskstream::DetectionSample;

use super::BACKGROUND;

const CENTER_RADIUS: f64 = 1.5;
const SMOOTH_L1_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl LevelGeometry {
    pub fn cells(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Per-location targets in head-output row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub classes: Vec<usize>,
    pub cls_weights: Vec<f64>,
    pub boxes: Vec<f64>,
    pub reg_weights: Vec<f64>,
    pub positives: usize,
}

/// Pyramid level for a box with longer side `side`.
pub fn level_for(side: f64, base_stride: usize, levels: usize) -> usize {
    let ratio = side / (2.0 * base_stride as f64);
    if ratio < 2.0 {
        return 0;
    }
    (ratio.log2().floor() as usize).min(levels - 1)
}

/// Regression encoding of `b` relative to a cell centre.
pub fn encode(b: &BBox, cx: f64, cy: f64, stride: f64) -> [f64; 4] {
    let (gx, gy) = b.center();
    [
        (gx - cx) / stride,
        (gy - cy) / stride,
        (b.width() / stride).ln(),
        (b.height() / stride).ln(),
    ]
}

pub fn decode(t: &[f64], cx: f64, cy: f64, stride: f64) -> BBox {
    let gx = cx + t[0] * stride;
    let gy = cy + t[1] * stride;
    let w = t[2].clamp(-6.0, 6.0).exp() * stride;
    let h = t[3].clamp(-6.0, 6.0).exp() * stride;
    BBox::new(gx - w / 2.0, gy - h / 2.0, gx + w / 2.0, gy + h / 2.0)
}

pub fn assign_targets(batch: &[&DetectionSample], levels: &[LevelGeometry]) -> Targets {
    let total: usize = levels.iter().map(LevelGeometry::cells).sum();
    let mut classes = vec![BACKGROUND; total];
    let mut owner_area = vec![f64::INFINITY; total];
    let mut boxes = vec![0.0; total * 4];
    let base_stride = levels[0].stride;

    let mut offsets = Vec::with_capacity(levels.len());
    let mut acc = 0;
    for lv in levels {
        offsets.push(acc);
        acc += lv.cells();
    }

    for (bi, sample) in batch.iter().enumerate() {
        for (b, &label) in sample.boxes.iter().zip(&sample.labels) {
            let l = level_for(b.width().max(b.height()), base_stride, levels.len());
            let lv = levels[l];
            let s = lv.stride as f64;
            let (gx, gy) = b.center();
            let center_cell = (
                ((gx / s).floor() as usize).min(lv.width - 1),
                ((gy / s).floor() as usize).min(lv.height - 1),
            );
            for y in 0..lv.height {
                for x in 0..lv.width {
                    let cx = (x as f64 + 0.5) * s;
                    let cy = (y as f64 + 0.5) * s;
                    let inside = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
                    let near = (cx - gx).abs() <= CENTER_RADIUS * s && (cy - gy).abs() <= CENTER_RADIUS * s;
                    if !((inside && near) || (x, y) == center_cell) {
                        continue;
                    }
                    let row = offsets[l] + (bi * lv.height + y) * lv.width + x;
                    if b.area() >= owner_area[row] {
                        continue;
                    }
                    owner_area[row] = b.area();
                    classes[row] = label;
                    boxes[row * 4..row * 4 + 4].copy_from_slice(&encode(b, cx, cy, s));
                }
            }
        }
    }

    let positives = classes.iter().filter(|&&c| c != BACKGROUND).count();
    let negatives = total - positives;
    let mut cls_weights = vec![0.0; total];
    let mut reg_weights = vec![0.0; total];
    for (i, &c) in classes.iter().enumerate() {
        if c != BACKGROUND {
            cls_weights[i] = 1.0 / positives as f64;
            reg_weights[i] = 1.0 / positives as f64;
        } else {
            cls_weights[i] = 1.0 / negatives as f64;
        }
    }
    Targets {
        classes,
        cls_weights,
        boxes,
        reg_weights,
        positives,
    }
}

/// Mean positive cross-entropy + mean negative cross-entropy + mean
/// positive smooth-L1. Returns `(total, cls, reg)`.
pub fn detection_loss(g: &mut Graph, cls: Var, reg: Var, targets: &Targets) -> (Var, Var, Var) {
    let c = g.cross_entropy(cls, &targets.classes, &targets.cls_weights);
    let r = g.smooth_l1(reg, &targets.boxes, &targets.reg_weights, SMOOTH_L1_BETA);
    let total = g.add(c, r);
    (total, c, r)
}
