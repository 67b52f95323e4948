//! Dataset directory persistence.
//!
//! ```text
//! <dir>/stream.json          stream config + seed
//! <dir>/manifest.jsonl       one record per sample
//! <dir>/task_<t>/task.json   task spec
//! <dir>/images/<id>.png      lossless 8-bit RGB
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DetectionSample, RgbFrame, Split, StreamConfig, TaskData, TaskSpec, TaskStream};
use crate::bbox::BBox;
use crate::error::{ColtError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const STREAM_FILE: &str = "stream.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    version: u32,
    seed: u64,
    config: StreamConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    sample_id: String,
    task_id: usize,
    split: Split,
    image: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("dataset types serialise");
    fs::write(path, text).map_err(|e| ColtError::io(path, e))
}

/// Writes `stream` under `dir` and returns the manifest path.
pub fn save_dataset(stream: &TaskStream, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| ColtError::io(&images, e))?;
    write_json(
        &dir.join(STREAM_FILE),
        &StreamHeader {
            version: FORMAT_VERSION,
            seed: stream.seed,
            config: stream.config.clone(),
        },
    )?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| ColtError::io(&manifest_path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for task in &stream.tasks {
        let task_dir = dir.join(format!("task_{}", task.spec.task_id));
        fs::create_dir_all(&task_dir).map_err(|e| ColtError::io(&task_dir, e))?;
        write_json(&task_dir.join("task.json"), &task.spec)?;
        for s in task.train.iter().chain(&task.val).chain(&task.test) {
            let rel = format!("images/{}.png", s.sample_id);
            let path = dir.join(&rel);
            image::save_buffer(
                &path,
                &s.image.pixels,
                s.image.width as u32,
                s.image.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| ColtError::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let rec = ManifestRecord {
                sample_id: s.sample_id.clone(),
                task_id: s.task_id,
                split: s.split,
                image: rel,
                boxes: s.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
                labels: s.labels.clone(),
            };
            let line = serde_json::to_string(&rec).expect("manifest record serialises");
            writeln!(out, "{line}").map_err(|e| ColtError::io(&manifest_path, e))?;
        }
    }
    out.flush().map_err(|e| ColtError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ColtError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ColtError::CorruptRecord {
        line: e.line(),
        sample_id: None,
        reason: format!("{}: {e}", path.display()),
    })
}

pub fn load_dataset(dir: &Path) -> Result<TaskStream> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(ColtError::ManifestMissing(manifest_path));
    }
    let header: StreamHeader = read_json(&dir.join(STREAM_FILE))?;
    if header.version != FORMAT_VERSION {
        return Err(ColtError::CorruptRecord {
            line: 0,
            sample_id: None,
            reason: format!("unsupported dataset version {}", header.version),
        });
    }
    let config = header.config;
    let mut tasks: Vec<TaskData> = Vec::with_capacity(config.n_tasks);
    for t in 0..config.n_tasks {
        let spec: TaskSpec = read_json(&dir.join(format!("task_{t}")).join("task.json"))?;
        tasks.push(TaskData {
            spec,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        });
    }

    let file = fs::File::open(&manifest_path).map_err(|e| ColtError::io(&manifest_path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ColtError::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            let sample_id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("sample_id")?.as_str().map(str::to_string));
            ColtError::CorruptRecord {
                line: line_no,
                sample_id,
                reason: e.to_string(),
            }
        })?;
        let corrupt = |reason: String| ColtError::CorruptRecord {
            line: line_no,
            sample_id: Some(rec.sample_id.clone()),
            reason,
        };
        let Some(task) = tasks.get_mut(rec.task_id) else {
            return Err(corrupt(format!("task_id {} out of range", rec.task_id)));
        };
        let img_path = dir.join(&rec.image);
        let img = image::open(&img_path)
            .map_err(|e| ColtError::Image {
                path: img_path.clone(),
                reason: e.to_string(),
            })?
            .into_rgb8();
        let sample = DetectionSample {
            sample_id: rec.sample_id.clone(),
            task_id: rec.task_id,
            split: rec.split,
            image: RgbFrame {
                width: img.width() as usize,
                height: img.height() as usize,
                pixels: img.into_raw(),
            },
            boxes: rec.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
            labels: rec.labels.clone(),
        };
        if sample.image.width != config.image_size || sample.image.height != config.image_size {
            return Err(corrupt(format!(
                "image is {}x{}, expected {}",
                sample.image.width, sample.image.height, config.image_size
            )));
        }
        sample.validate(config.max_boxes)?;
        match rec.split {
            Split::Train => task.train.push(sample),
            Split::Val => task.val.push(sample),
            Split::Test => task.test.push(sample),
        }
    }
    Ok(TaskStream {
        config,
        seed: header.seed,
        tasks,
    })
}

/// SHA-256 over the stream header and manifest, hex encoded.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [STREAM_FILE, MANIFEST_FILE] {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(ColtError::ManifestMissing(path));
        }
        hasher.update(fs::read(&path).map_err(|e| ColtError::io(&path, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
