//! Deterministic synthetic multi-domain detection benchmark.
//!
//! Each task renders coloured geometric objects from six class templates on
//! a domain-styled background. Domains differ by palette, colour tint,
//! global brightness, sensor noise and occlusion rate. The default stream
//! has four tasks and puts a low-brightness night domain at index 2, which
//! makes it the largest shift in the stream.

mod io;

pub use io::{dataset_digest, load_dataset, save_dataset, MANIFEST_FILE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{ColtError, Result};

pub const NUM_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["pedestrian", "cyclist", "car", "truck", "tram", "tricycle"];

/// Training-pool sizes of the four driving scenarios at full scale.
pub const FULL_SCALE_TRAIN_SIZES: [usize; 4] = [4470, 1329, 1479, 524];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    /// Background gradient, top colour then bottom colour.
    pub palette: [[u8; 3]; 2],
    /// Global multiplier applied to every pixel.
    pub brightness: f64,
    /// Per-channel colour cast.
    #[serde(default = "unit_tint")]
    pub tint: [f64; 3],
    /// Standard deviation of additive Gaussian noise, in `[0, 1]` pixel units.
    pub noise: f64,
    /// Probability that an object is partially covered by an occluder.
    pub occlusion: f64,
}

fn unit_tint() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    /// Training-pool size before scaling.
    pub base_train_size: usize,
    pub domain: DomainParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub tasks: Vec<TaskConfig>,
    /// Multiplier applied to every `base_train_size`.
    pub scale: f64,
    pub image_size: usize,
    pub max_boxes: usize,
    pub num_classes: usize,
    /// Fraction of each training pool held out for validation.
    pub val_fraction: f64,
    /// Test split size as a fraction of the training pool.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        let tasks = default_tasks();
        Self {
            n_tasks: tasks.len(),
            tasks,
            scale: 0.1,
            image_size: 128,
            max_boxes: 3,
            num_classes: NUM_CLASSES,
            val_fraction: 0.15,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

/// The four driving scenarios, in presentation order.
pub fn default_tasks() -> Vec<TaskConfig> {
    let mk = |name: &str, size, palette, brightness, tint, noise, occlusion| TaskConfig {
        name: name.to_string(),
        base_train_size: size,
        domain: DomainParams {
            palette,
            brightness,
            tint,
            noise,
            occlusion,
        },
    };
    vec![
        mk(
            "day-citystreet-clear",
            FULL_SCALE_TRAIN_SIZES[0],
            [[150, 150, 155], [105, 105, 110]],
            1.0,
            [1.0, 1.0, 1.0],
            0.02,
            0.10,
        ),
        mk(
            "day-highway-overcast",
            FULL_SCALE_TRAIN_SIZES[1],
            [[175, 188, 200], [120, 124, 118]],
            0.95,
            [0.97, 1.0, 1.03],
            0.03,
            0.05,
        ),
        mk(
            "night",
            FULL_SCALE_TRAIN_SIZES[2],
            [[12, 14, 38], [40, 30, 26]],
            0.35,
            [1.15, 0.85, 0.55],
            0.06,
            0.10,
        ),
        mk(
            "day-rain",
            FULL_SCALE_TRAIN_SIZES[3],
            [[118, 124, 136], [88, 94, 102]],
            0.8,
            [0.95, 1.0, 1.08],
            0.09,
            0.25,
        ),
    ]
}

impl StreamConfig {
    /// Desk-scale stream with a given image size.
    pub fn with_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ColtError::InvalidConfig(m));
        if self.n_tasks == 0 || self.n_tasks != self.tasks.len() {
            return bad(format!(
                "n_tasks = {} but {} task entries given",
                self.n_tasks,
                self.tasks.len()
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is too small (min 16)", self.image_size));
        }
        if self.max_boxes == 0 {
            return bad("max_boxes must be positive".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(self.test_fraction > 0.0) {
            return bad("val_fraction must be in [0,1) and test_fraction > 0".into());
        }
        for t in &self.tasks {
            let d = &t.domain;
            if !(d.brightness > 0.0) || d.noise < 0.0 || !(0.0..=1.0).contains(&d.occlusion) {
                return bad(format!("task {}: invalid domain parameters", t.name));
            }
        }
        for spec in self.task_specs() {
            if spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0 || spec.n_val >= spec.n_train {
                return bad(format!(
                    "task {} has non-positive split sizes (train {}, val {}, test {})",
                    spec.task_id, spec.n_train, spec.n_val, spec.n_test
                ));
            }
        }
        Ok(())
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(task_id, t)| {
                let n_train = (t.base_train_size as f64 * self.scale).round() as usize;
                TaskSpec {
                    task_id,
                    name: t.name.clone(),
                    domain: t.domain.clone(),
                    n_train,
                    n_val: (n_train as f64 * self.val_fraction).round() as usize,
                    n_test: (n_train as f64 * self.test_fraction).round() as usize,
                }
            })
            .collect()
    }
}

/// One task of the stream.
///
/// `n_train` is the training pool; `n_val` of it is held out, so
/// `n_train - n_val` samples are used for gradient steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub domain: DomainParams,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 8-bit RGB image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbFrame {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    /// Channel-major `[3, h, w]` values in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / (self.pixels.len() as f64 * 255.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub sample_id: String,
    pub task_id: usize,
    pub split: Split,
    pub image: RgbFrame,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl DetectionSample {
    pub fn validate(&self, max_boxes: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(ColtError::InvalidSample {
                sample_id: self.sample_id.clone(),
                reason,
            })
        };
        if self.boxes.len() != self.labels.len() {
            return fail(format!("{} boxes but {} labels", self.boxes.len(), self.labels.len()));
        }
        if self.boxes.len() > max_boxes {
            return fail(format!("{} boxes exceeds max {max_boxes}", self.boxes.len()));
        }
        if self.image.pixels.len() != self.image.width * self.image.height * 3 {
            return fail("pixel buffer does not match image size".into());
        }
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if !b.is_valid() {
                return fail(format!("degenerate box {b:?}"));
            }
            if !b.within(w, h) {
                return fail(format!("box {b:?} outside {w}x{h} image"));
            }
            if l >= NUM_CLASSES {
                return fail(format!("label {l} outside [0, {NUM_CLASSES})"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<DetectionSample>,
    pub val: Vec<DetectionSample>,
    pub test: Vec<DetectionSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub seed: u64,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn samples(&self) -> impl Iterator<Item = &DetectionSample> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test))
    }

    pub fn find(&self, sample_id: &str) -> Option<&DetectionSample> {
        self.samples().find(|s| s.sample_id == sample_id)
    }
}

pub fn generate_task_stream(config: &StreamConfig, seed: u64) -> Result<TaskStream> {
    config.validate()?;
    let tasks = config
        .task_specs()
        .into_iter()
        .map(|spec| {
            let pool = spec.n_train - spec.n_val;
            let render = |split, n| -> Vec<DetectionSample> {
                (0..n).map(|i| render_sample(config, &spec, split, i, seed)).collect()
            };
            TaskData {
                train: render(Split::Train, pool),
                val: render(Split::Val, spec.n_val),
                test: render(Split::Test, spec.n_test),
                spec,
            }
        })
        .collect();
    Ok(TaskStream {
        config: config.clone(),
        seed,
        tasks,
    })
}

pub fn sample_id(task_id: usize, split: Split, index: usize) -> String {
    format!("t{task_id}-{}-{index:05}", split.as_str())
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc ^ mix(p.wrapping_add(0x632b_e59b)))
    })
}

const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [225.0, 55.0, 55.0],
    [55.0, 205.0, 80.0],
    [60.0, 90.0, 235.0],
    [235.0, 205.0, 40.0],
    [205.0, 75.0, 225.0],
    [40.0, 215.0, 215.0],
];

/// Width / height ratio per class.
const CLASS_ASPECT: [f64; NUM_CLASSES] = [0.5, 0.8, 1.6, 1.3, 2.2, 1.0];

fn render_sample(config: &StreamConfig, spec: &TaskSpec, split: Split, index: usize, seed: u64) -> DetectionSample {
    let split_tag = match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, spec.task_id as u64, split_tag, index as u64]));
    let size = config.image_size;
    let sf = size as f64;
    let d = &spec.domain;

    // linear-light canvas before the domain transform
    let mut canvas = vec![[0.0f64; 3]; size * size];
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-12.0..12.0));
    for y in 0..size {
        let t = y as f64 / (size - 1) as f64;
        for x in 0..size {
            for c in 0..3 {
                let top = d.palette[0][c] as f64;
                let bottom = d.palette[1][c] as f64;
                canvas[y * size + x][c] = top + (bottom - top) * t + jitter[c];
            }
        }
    }

    let n_objects = rng.gen_range(1..=config.max_boxes);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_objects);
    let mut labels = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let label = if k == 0 {
            index % NUM_CLASSES
        } else {
            rng.gen_range(0..NUM_CLASSES)
        };
        let mut placed = None;
        for _ in 0..12 {
            let side = rng.gen_range(0.22..0.5) * sf;
            let aspect = CLASS_ASPECT[label] * rng.gen_range(0.9..1.1);
            let w = (side * aspect.sqrt()).round().clamp(4.0, sf - 1.0);
            let h = (side / aspect.sqrt()).round().clamp(4.0, sf - 1.0);
            let x1 = rng.gen_range(0..=(size - w as usize)) as f64;
            let y1 = rng.gen_range(0..=(size - h as usize)) as f64;
            let b = BBox::new(x1, y1, x1 + w, y1 + h);
            if boxes.iter().all(|o| o.iou(&b) < 0.25) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else { continue };
        let color: [f64; 3] =
            std::array::from_fn(|c| (CLASS_COLORS[label][c] + rng.gen_range(-18.0..18.0)).clamp(0.0, 255.0));
        draw_object(&mut canvas, size, &b, label, color);
        if rng.gen_bool(d.occlusion) {
            let ow = (b.width() * rng.gen_range(0.3..0.5)).max(1.0);
            let oh = (b.height() * rng.gen_range(0.3..0.5)).max(1.0);
            let ox = if rng.gen_bool(0.5) { b.x1 } else { b.x2 - ow };
            let oy = if rng.gen_bool(0.5) { b.y1 } else { b.y2 - oh };
            let grey = rng.gen_range(70.0..140.0);
            fill_rect(&mut canvas, size, ox, oy, ox + ow, oy + oh, [grey, grey, grey]);
        }
        boxes.push(b);
        labels.push(label);
    }

    let noise = Normal::new(0.0, d.noise * 255.0).expect("noise std is validated");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for px in &canvas {
        for c in 0..3 {
            let v = px[c] * d.tint[c] * d.brightness + noise.sample(&mut rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }

    DetectionSample {
        sample_id: sample_id(spec.task_id, split, index),
        task_id: spec.task_id,
        split,
        image: RgbFrame {
            width: size,
            height: size,
            pixels,
        },
        boxes,
        labels,
    }
}

fn fill_rect(canvas: &mut [[f64; 3]], size: usize, x1: f64, y1: f64, x2: f64, y2: f64, color: [f64; 3]) {
    let (xa, xb) = (x1.max(0.0) as usize, (x2.min(size as f64)) as usize);
    let (ya, yb) = (y1.max(0.0) as usize, (y2.min(size as f64)) as usize);
    for y in ya..yb {
        for x in xa..xb {
            canvas[y * size + x] = color;
        }
    }
}

fn draw_object(canvas: &mut [[f64; 3]], size: usize, b: &BBox, label: usize, color: [f64; 3]) {
    let (x1, y1) = (b.x1 as usize, b.y1 as usize);
    let (w, h) = (b.width() as usize, b.height() as usize);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let dark = color.map(|v| v * 0.45);
    let light = color.map(|v| (v * 0.5 + 127.0).min(255.0));
    let ring = (w.min(h) as f64 / 4.0).max(1.0);
    for dy in 0..h {
        for dx in 0..w {
            let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
            let nx = (px - cx) / cx;
            let ny = (py - cy) / cy;
            let r2 = nx * nx + ny * ny;
            let paint = match label {
                // pedestrian: filled ellipse
                0 => (r2 <= 1.0).then_some(color),
                // cyclist: elliptical ring
                1 => {
                    let inner_x = (px - cx) / (cx - ring).max(0.5);
                    let inner_y = (py - cy) / (cy - ring).max(0.5);
                    (r2 <= 1.0 && inner_x * inner_x + inner_y * inner_y > 1.0).then_some(color)
                }
                // car: solid rectangle
                2 => Some(color),
                // truck: rectangle with a dark cab band
                3 => Some(if dx < w / 3 { dark } else { color }),
                // tram: rectangle with a light window stripe
                4 => Some(if dy >= h / 3 && dy < (2 * h) / 3 { light } else { color }),
                // tricycle: upward triangle
                _ => {
                    let half = (py / h as f64) * cx;
                    ((px - cx).abs() <= half).then_some(color)
                }
            };
            if let Some(c) = paint {
                canvas[(y1 + dy) * size + x1 + dx] = c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamConfig {
        StreamConfig {
            scale: 0.02,
            image_size: 32,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn default_sizes_are_a_tenth_of_full_scale() {
        let specs = StreamConfig::default().task_specs();
        let sizes: Vec<usize> = specs.iter().map(|s| s.n_train).collect();
        assert_eq!(sizes, vec![447, 133, 148, 52]);
        assert!(specs.iter().all(|s| s.n_val > 0 && s.n_test > 0));
        assert_eq!(specs[0].n_val, 67);
        assert_eq!(specs[0].n_test, 112);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = generate_task_stream(&cfg, 5).unwrap();
        let b = generate_task_stream(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_task_stream(&cfg, 6).unwrap();
        assert_ne!(a.tasks[0].train[0].image, c.tasks[0].train[0].image);
    }

    #[test]
    fn every_class_appears_in_every_train_split() {
        let stream = generate_task_stream(&StreamConfig::with_image_size(32), 1).unwrap();
        for task in &stream.tasks {
            let mut seen = [false; NUM_CLASSES];
            for s in &task.train {
                for &l in &s.labels {
                    seen[l] = true;
                }
            }
            assert!(seen.iter().all(|&x| x), "task {} misses a class", task.spec.task_id);
        }
    }

    #[test]
    fn night_task_is_darkest() {
        let stream = generate_task_stream(&small(), 3).unwrap();
        let mean: Vec<f64> = stream
            .tasks
            .iter()
            .map(|t| t.train.iter().map(|s| s.image.mean_intensity()).sum::<f64>() / t.train.len() as f64)
            .collect();
        for (i, m) in mean.iter().enumerate() {
            if i != 2 {
                assert!(mean[2] < *m, "night {} vs task {i} {}", mean[2], m);
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut cfg = small();
        cfg.scale = 0.0;
        assert!(generate_task_stream(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.image_size = 4;
        assert!(generate_task_stream(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.tasks[3].base_train_size = 0;
        assert!(matches!(
            generate_task_stream(&cfg, 0),
            Err(ColtError::InvalidConfig(_))
        ));
        let mut cfg = small();
        cfg.n_tasks = 3;
        assert!(generate_task_stream(&cfg, 0).is_err());
    }

    #[test]
    fn sample_ids_are_unique() {
        let stream = generate_task_stream(&small(), 0).unwrap();
        let mut ids: Vec<&str> = stream.samples().map(|s| s.sample_id.as_str()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }
}
