//! Self-describing detector container.
//!
//! Parameter and buffer blobs are little-endian `f64` bytes, base64
//! encoded, keyed by their stable parameter names. Decoding is exact.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::error::{ColtError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Blob {
    fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(bytes),
        }
    }

    fn decode(&self, name: &str) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| ColtError::CorruptCheckpoint(format!("{name}: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(ColtError::CorruptCheckpoint(format!(
                "{name}: {} bytes for shape {:?}",
                bytes.len(),
                self.shape
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Tensor::new(self.shape.clone(), data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCheckpoint {
    pub version: u32,
    pub config: DetectorConfig,
    pub head_count: usize,
    pub default_head: usize,
    /// `(task_id, head)` pairs.
    pub routing: Vec<(usize, usize)>,
    pub params: BTreeMap<String, Blob>,
    pub buffers: BTreeMap<String, Blob>,
}

impl DetectorCheckpoint {
    pub fn from_detector(det: &Detector) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: det.config.clone(),
            head_count: det.n_heads,
            default_head: det.default_head,
            routing: det.routing.iter().map(|(&t, &h)| (t, h)).collect(),
            params: det.params.iter().map(|(k, v)| (k.clone(), Blob::encode(v))).collect(),
            buffers: det.buffers.iter().map(|(k, v)| (k.clone(), Blob::encode(v))).collect(),
        }
    }

    pub fn into_detector(self) -> Result<Detector> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ColtError::CheckpointVersion {
                found: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        // a freshly built detector fixes the expected parameter set and shapes
        let mut det = Detector::new(self.config.clone())?;
        for h in 1..self.head_count {
            det.add_head(super::HeadInit::FreshRandom, h as u64)?;
        }
        for (store, blobs, kind) in [
            (&mut det.params, &self.params, "parameter"),
            (&mut det.buffers, &self.buffers, "buffer"),
        ] {
            if store.len() != blobs.len() {
                return Err(ColtError::CorruptCheckpoint(format!(
                    "expected {} {kind}s, found {}",
                    store.len(),
                    blobs.len()
                )));
            }
            for (name, slot) in store.iter_mut() {
                let blob = blobs
                    .get(name)
                    .ok_or_else(|| ColtError::CorruptCheckpoint(format!("missing {kind} {name}")))?;
                let t = blob.decode(name)?;
                if t.shape() != slot.shape() {
                    return Err(ColtError::CorruptCheckpoint(format!(
                        "{name}: shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        for (task, head) in self.routing {
            det.check_head(head)
                .map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))?;
            det.routing.insert(task, head);
        }
        det.check_head(self.default_head)
            .map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))?;
        det.default_head = self.default_head;
        Ok(det)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: Option<u32>,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))?;
        match probe.version {
            Some(CHECKPOINT_VERSION) => {}
            Some(found) => {
                return Err(ColtError::CheckpointVersion {
                    found,
                    expected: CHECKPOINT_VERSION,
                })
            }
            None => return Err(ColtError::CorruptCheckpoint("version field missing".into())),
        }
        serde_json::from_str(text).map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))
    }
}
