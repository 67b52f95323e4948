//! Whole-run checkpoints: model, memory identities, ledger and metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LossRecord, RunState, TrainConfig};
use crate::detector::DetectorCheckpoint;
use crate::error::{ColtError, Result};
use crate::expansion::GapReport;
use crate::metrics::{EvalResult, PerformanceMatrix};
use crate::replay::{MemoryEntry, ReplayMemory};
use crate::taskstream::TaskStream;

pub const RUN_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub detector: DetectorCheckpoint,
    pub memory_capacity: usize,
    pub memory_committed: Vec<usize>,
    pub memory: Vec<MemoryEntry>,
    pub completed_tasks: Vec<usize>,
    pub checkpoints: BTreeMap<usize, PathBuf>,
    pub ledger: Vec<LossRecord>,
    pub gap_reports: Vec<GapReport>,
    pub matrix: PerformanceMatrix,
    pub latest_evals: Vec<Option<EvalResult>>,
}

pub fn save_checkpoint(state: &RunState, path: &Path) -> Result<()> {
    let ck = RunCheckpoint {
        version: RUN_CHECKPOINT_VERSION,
        config: state.config.clone(),
        detector: DetectorCheckpoint::from_detector(&state.detector),
        memory_capacity: state.memory.capacity(),
        memory_committed: state.memory.committed().to_vec(),
        memory: state.memory.entries(),
        completed_tasks: state.completed_tasks.clone(),
        checkpoints: state.checkpoints.clone(),
        ledger: state.ledger.clone(),
        gap_reports: state.gap_reports.clone(),
        matrix: state.matrix.clone(),
        latest_evals: state.latest_evals.clone(),
    };
    let text = serde_json::to_string(&ck).expect("checkpoint serialises");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ColtError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| ColtError::io(path, e))
}

/// Restores a run; memory pixels are looked up in `stream`.
pub fn resume(path: &Path, stream: &TaskStream) -> Result<RunState> {
    let text = std::fs::read_to_string(path).map_err(|e| ColtError::io(path, e))?;
    #[derive(Deserialize)]
    struct Probe {
        version: Option<u32>,
    }
    let probe: Probe = serde_json::from_str(&text).map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))?;
    match probe.version {
        Some(RUN_CHECKPOINT_VERSION) => {}
        Some(found) => {
            return Err(ColtError::CheckpointVersion {
                found,
                expected: RUN_CHECKPOINT_VERSION,
            })
        }
        None => return Err(ColtError::CorruptCheckpoint("version field missing".into())),
    }
    let ck: RunCheckpoint = serde_json::from_str(&text).map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))?;
    ck.config
        .validate()
        .map_err(|e| ColtError::CorruptCheckpoint(e.to_string()))?;
    if ck.matrix.t != stream.n_tasks() {
        return Err(ColtError::CorruptCheckpoint(format!(
            "checkpoint covers {} tasks, dataset has {}",
            ck.matrix.t,
            stream.n_tasks()
        )));
    }
    let detector = ck.detector.into_detector()?;
    let memory = ReplayMemory::restore(ck.memory_capacity, ck.memory_committed, &ck.memory, |id| {
        stream.find(id)
    })?;
    Ok(RunState {
        config: ck.config,
        detector,
        memory,
        completed_tasks: ck.completed_tasks,
        checkpoints: ck.checkpoints,
        ledger: ck.ledger,
        gap_reports: ck.gap_reports,
        matrix: ck.matrix,
        latest_evals: ck.latest_evals,
    })
}
