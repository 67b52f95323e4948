//! Continual object detection over a stream of domains: bounded replay,
//! teacher-student feature distillation and adaptive head expansion.

pub mod autograd;
pub mod bbox;
pub mod detector;
pub mod distill;
pub mod error;
pub mod expansion;
pub mod metrics;
pub mod replay;
pub mod taskstream;
pub mod tensor;
pub mod trainer;

pub use bbox::BBox;
pub use detector::{BackboneConfig, BackboneKind, Detector, DetectorConfig, FeaturePyramid, HeadInit};
pub use distill::{KDConfig, KdReduction};
pub use error::{ColtError, Result};
pub use expansion::{ExpansionPolicy, GapReport};
pub use metrics::{EvalResult, PerformanceMatrix, RunSummary};
pub use replay::ReplayMemory;
pub use taskstream::{generate_task_stream, DetectionSample, StreamConfig, TaskSpec, TaskStream};
pub use tensor::Tensor;
pub use trainer::{RunState, TrainConfig};
