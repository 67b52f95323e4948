use serde::{Deserialize, Serialize};

use super::forward::{Forward, Mode, Trainable};
use super::targets::decode;
use super::{Detector, BACKGROUND, NUM_LOGITS};
use crate::bbox::BBox;
use crate::error::Result;
use crate::taskstream::RgbFrame;

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Detections of one image together with the head that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub head: usize,
    pub detections: Vec<Detection>,
}

/// Greedy non-maximum suppression over one class.
///
/// Candidates are visited by descending score, ties by lower index. Returns
/// kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

impl Detector {
    /// Detections for `image` through the head routed to `task_id`.
    pub fn predict(&self, image: &RgbFrame, task_id: usize) -> Result<Prediction> {
        let head = self.head_for_task(task_id)?;
        Ok(self.predict_batch_with_head(&[image], head)?.remove(0))
    }

    pub fn predict_batch(&self, images: &[&RgbFrame], task_id: usize) -> Result<Vec<Prediction>> {
        let head = self.head_for_task(task_id)?;
        self.predict_batch_with_head(images, head)
    }

    pub fn predict_batch_with_head(&self, images: &[&RgbFrame], head: usize) -> Result<Vec<Prediction>> {
        self.check_head(head)?;
        let x = self.images_tensor(images)?;
        let mut fwd = Forward::new(self, Mode::Eval, Trainable::none());
        let input = fwd.graph.constant(x);
        let pyr = fwd.features(input);
        let out = fwd.head(head, &pyr.neck);
        let logits = fwd.graph.value(out.cls).data();
        let reg = fwd.graph.value(out.reg).data();
        let side = self.config.input_size as f64;

        let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); images.len()];
        let mut row = 0;
        for lv in &out.levels {
            let s = lv.stride as f64;
            for dets in per_image.iter_mut().take(lv.batch) {
                for y in 0..lv.height {
                    for xx in 0..lv.width {
                        let l = &logits[row * NUM_LOGITS..(row + 1) * NUM_LOGITS];
                        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = l.iter().map(|v| (v - max).exp()).sum();
                        let (class, best) =
                            l[..BACKGROUND]
                                .iter()
                                .enumerate()
                                .fold(
                                    (0, f64::NEG_INFINITY),
                                    |acc, (c, &v)| {
                                        if v > acc.1 {
                                            (c, v)
                                        } else {
                                            acc
                                        }
                                    },
                                );
                        let score = (best - max).exp() / z;
                        if score >= SCORE_THRESHOLD {
                            let cx = (xx as f64 + 0.5) * s;
                            let cy = (y as f64 + 0.5) * s;
                            let bbox = decode(&reg[row * 4..row * 4 + 4], cx, cy, s).clip(side, side);
                            if bbox.is_valid() {
                                dets.push(Detection { bbox, class, score });
                            }
                        }
                        row += 1;
                    }
                }
            }
        }

        Ok(per_image
            .into_iter()
            .map(|dets| Prediction {
                head,
                detections: suppress(dets),
            })
            .collect())
    }
}

fn suppress(dets: Vec<Detection>) -> Vec<Detection> {
    let mut kept = Vec::new();
    for class in 0..BACKGROUND {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        kept.extend(nms(&boxes, &scores, NMS_IOU).into_iter().map(|k| dets[idx[k]]));
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(MAX_DETECTIONS);
    kept
}
