//! Sequential continual training: supervised loss on the new task, replay
//! through each old sample's own head, feature distillation against a
//! frozen teacher, head expansion between tasks and per-task evaluation.

mod checkpoint;

pub use checkpoint::{resume, save_checkpoint, RunCheckpoint, RUN_CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::detector::{assign_targets, detection_loss, Detector, DetectorConfig, Forward, Mode, ParamGrads, Trainable};
use crate::distill::{kd_loss_graph, teacher_features, KDConfig};
use crate::error::{ColtError, Result};
use crate::expansion::{estimate_domain_gap, maybe_expand, ExpansionPolicy, GapReport};
use crate::metrics::{evaluate_task, write_jsonl, EvalResult, PerformanceMatrix, RunSummary};
use crate::replay::{ReplayMemory, DEFAULT_CAPACITY};
use crate::taskstream::{derive_seed, DetectionSample, TaskStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub memory_capacity: usize,
    pub eval_iou: f64,
    pub seed: u64,
    /// Reproducible execution; evaluation runs on the calling thread only.
    pub deterministic: bool,
    pub kd: KDConfig,
    pub expansion: ExpansionPolicy,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.001,
            lr_decay_epochs: vec![7, 9],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: None,
            batch_size: 8,
            replay_batch_size: 2,
            memory_capacity: DEFAULT_CAPACITY,
            eval_iou: 0.5,
            seed: 0,
            deterministic: true,
            kd: KDConfig::default(),
            expansion: ExpansionPolicy::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full schedule: 50 epochs, decay after 33 and 44.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 50,
            lr_decay_epochs: vec![33, 44],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ColtError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("lr_decay_epochs must be below epochs".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        self.kd.validate()?;
        self.expansion.validate()?;
        self.detector.validate()
    }

    pub fn kd_batch_size(&self) -> usize {
        self.kd.kd_batch_size.unwrap_or(self.batch_size)
    }

    /// Row label for the ablation table.
    pub fn method_label(&self) -> String {
        match (self.kd.enabled, self.expansion.enabled) {
            (true, true) => "COLT".into(),
            (true, false) => "Replay+KD".into(),
            (false, true) => "Replay+Expand".into(),
            (false, false) => "Replay".into(),
        }
    }
}

/// Piecewise-constant step schedule.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(ColtError::InvalidConfig(format!(
            "epoch {epoch} outside [0, {})",
            cfg.epochs
        )));
    }
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    Ok(cfg.lr * cfg.lr_decay_factor.powi(decays as i32))
}

/// One optimiser step of the loss ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub sup_new: f64,
    /// `None` when no replay batch was drawn.
    pub sup_replay: Option<f64>,
    /// Unweighted KD loss; `None` when distillation did not run.
    pub kd: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: TrainConfig,
    pub detector: Detector,
    pub memory: ReplayMemory,
    pub completed_tasks: Vec<usize>,
    /// Relative to the run directory.
    pub checkpoints: BTreeMap<usize, PathBuf>,
    pub ledger: Vec<LossRecord>,
    pub gap_reports: Vec<GapReport>,
    pub matrix: PerformanceMatrix,
    /// Evaluation of every seen task by the latest model.
    pub latest_evals: Vec<Option<EvalResult>>,
}

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const GAP_FILE: &str = "gap_reports.jsonl";
pub const CONFIG_ECHO_FILE: &str = "train_config.json";

impl RunState {
    pub fn new(config: TrainConfig, n_tasks: usize) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(config.detector.clone())?;
        Ok(Self {
            memory: ReplayMemory::new(config.memory_capacity),
            detector,
            completed_tasks: Vec::new(),
            checkpoints: BTreeMap::new(),
            ledger: Vec::new(),
            gap_reports: Vec::new(),
            matrix: PerformanceMatrix::new(n_tasks),
            latest_evals: vec![None; n_tasks],
            config,
        })
    }

    pub fn next_task(&self) -> usize {
        self.completed_tasks.len()
    }

    pub fn is_finished(&self) -> bool {
        self.next_task() >= self.matrix.t
    }

    pub fn summary(&self, stream: &TaskStream, dataset_digest: &str) -> RunSummary {
        let mut s = RunSummary {
            method: self.config.method_label(),
            backbone: self.config.detector.backbone.kind,
            freeze_norm: self.config.detector.backbone.freeze_norm,
            kd: self.config.kd.enabled,
            head_expanding: self.config.expansion.enabled,
            seed: self.config.seed,
            dataset_digest: dataset_digest.to_string(),
            task_names: stream.tasks.iter().map(|t| t.spec.name.clone()).collect(),
            matrix: self.matrix.clone(),
            final_evals: self.latest_evals.clone(),
            gap_reports: self.gap_reports.clone(),
            mean_ap: None,
            forgetting_rate: None,
        };
        s.finalize();
        s
    }
}

struct Sgd {
    velocity: BTreeMap<String, Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            velocity: BTreeMap::new(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    fn step(&mut self, det: &mut Detector, grads: ParamGrads, lr: f64, clip: Option<f64>) -> Result<()> {
        let scale = match clip {
            Some(c) => {
                let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let params = det.params_mut()?;
        for (name, g) in grads {
            let p = params.get_mut(&name).expect("gradient for a registered parameter");
            let v = self.velocity.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = scale * gi + self.weight_decay * *w;
                *vi = self.momentum * *vi + d;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Weighted detection loss of `rows` of the pyramid through `head`.
fn head_loss(fwd: &mut Forward<'_>, neck: &[Var], samples: &[&DetectionSample], head: usize) -> Var {
    let out = fwd.head(head, neck);
    let targets = assign_targets(samples, &out.levels);
    detection_loss(&mut fwd.graph, out.cls, out.reg, &targets).0
}

fn select_neck(g: &mut Graph, neck: &[Var], rows: &[usize]) -> Vec<Var> {
    neck.iter().map(|&v| g.select_rows(v, rows)).collect()
}

struct StepOutcome {
    record: LossRecord,
    grads: ParamGrads,
    bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    det: &Detector,
    teacher: Option<&Detector>,
    cfg: &TrainConfig,
    head: usize,
    new: &[&DetectionSample],
    rehearsal: &[&DetectionSample],
    record: LossRecord,
) -> Result<StepOutcome> {
    let mut record = record;
    let n_new = new.len();
    let n_replay = cfg.replay_batch_size.min(rehearsal.len());
    let n_kd = if teacher.is_some() {
        cfg.kd_batch_size().min(rehearsal.len())
    } else {
        0
    };
    let all: Vec<&DetectionSample> = new.iter().chain(rehearsal).copied().collect();
    let images: Vec<_> = all.iter().map(|s| &s.image).collect();
    let x = det.images_tensor(&images)?;

    let mut fwd = Forward::new(det, Mode::Train, Trainable::routed(head));
    let input = fwd.graph.constant(x);
    let pyr = fwd.features(input);

    let new_neck = if rehearsal.is_empty() {
        pyr.neck.clone()
    } else {
        let rows: Vec<usize> = (0..n_new).collect();
        select_neck(&mut fwd.graph, &pyr.neck, &rows)
    };
    let sup_new = head_loss(&mut fwd, &new_neck, new, head);
    let mut total = sup_new;
    record.sup_new = fwd.graph.value(sup_new).item();

    if n_replay > 0 {
        // group replay rows by the head their task is routed to
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, s) in rehearsal[..n_replay].iter().enumerate() {
            groups.entry(det.head_for_task(s.task_id)?).or_default().push(k);
        }
        let mut replay: Option<Var> = None;
        for (h, ks) in groups {
            let rows: Vec<usize> = ks.iter().map(|k| n_new + k).collect();
            let samples: Vec<&DetectionSample> = ks.iter().map(|&k| rehearsal[k]).collect();
            let neck = select_neck(&mut fwd.graph, &pyr.neck, &rows);
            let l = head_loss(&mut fwd, &neck, &samples, h);
            let l = fwd.graph.scale(l, ks.len() as f64 / n_replay as f64);
            replay = Some(match replay {
                Some(acc) => fwd.graph.add(acc, l),
                None => l,
            });
        }
        let replay = replay.expect("at least one replay group");
        record.sup_replay = Some(fwd.graph.value(replay).item());
        total = fwd.graph.add(total, replay);
    }

    if let (Some(teacher), true) = (teacher, n_kd > 0) {
        let kd_samples = &rehearsal[..n_kd];
        let t_pyr = teacher_features(teacher, kd_samples)?;
        let rows: Vec<usize> = (n_new..n_new + n_kd).collect();
        let s_pyr = pyr.select(&mut fwd.graph, &rows);
        let kd = kd_loss_graph(&mut fwd.graph, &t_pyr, &s_pyr, &cfg.kd)?;
        record.kd = Some(fwd.graph.value(kd).item());
        let weighted = fwd.graph.scale(kd, cfg.kd.lambda);
        total = fwd.graph.add(total, weighted);
    }

    record.total = fwd.graph.value(total).item();
    let finite = record.total.is_finite()
        && record.sup_new.is_finite()
        && record.sup_replay.is_none_or(f64::is_finite)
        && record.kd.is_none_or(f64::is_finite);
    if !finite {
        return Err(ColtError::NonFiniteLoss {
            task: record.task,
            epoch: record.epoch,
            step: record.step,
            detail: format!(
                "sup_new={} sup_replay={:?} kd={:?} total={} lr={}",
                record.sup_new, record.sup_replay, record.kd, record.total, record.lr
            ),
        });
    }
    let grads = fwd.grads(total);
    Ok(StepOutcome {
        record,
        grads,
        bn_updates: std::mem::take(&mut fwd.bn_updates),
    })
}

/// The training objective of one step, `sup_new + sup_replay + lambda * kd`,
/// with gradients for the parameters a step would update. Rehearsal samples
/// must belong to tasks already routed on `det`.
pub fn step_objective(
    det: &Detector,
    teacher: Option<&Detector>,
    cfg: &TrainConfig,
    head: usize,
    new: &[&DetectionSample],
    rehearsal: &[&DetectionSample],
) -> Result<(LossRecord, ParamGrads)> {
    if new.is_empty() {
        return Err(ColtError::EmptyBatch);
    }
    det.check_head(head)?;
    let blank = LossRecord {
        task: 0,
        epoch: 0,
        step: 0,
        sup_new: 0.0,
        sup_replay: None,
        kd: None,
        total: 0.0,
        lr: 0.0,
    };
    let out = train_step(det, teacher, cfg, head, new, rehearsal, blank)?;
    Ok((out.record, out.grads))
}

fn evaluate_seen(state: &RunState, stream: &TaskStream, upto: usize) -> Result<Vec<EvalResult>> {
    let det = &state.detector;
    let iou = state.config.eval_iou;
    if state.config.deterministic {
        return (0..=upto)
            .map(|i| evaluate_task(det, &stream.tasks[i].test, i, iou))
            .collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..=upto)
            .map(|i| s.spawn(move || evaluate_task(det, &stream.tasks[i].test, i, iou)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}

/// Trains the next task of the stream. When `run_dir` is given, the ledger,
/// gap reports and a checkpoint are written there after the task.
pub fn train_task(state: &mut RunState, stream: &TaskStream, task_id: usize, run_dir: Option<&Path>) -> Result<()> {
    let expected = state.next_task();
    if task_id != expected {
        return Err(ColtError::OutOfOrder { expected, got: task_id });
    }
    let task = stream.tasks.get(task_id).ok_or(ColtError::UnknownTask(task_id))?;
    if stream.n_tasks() != state.matrix.t {
        return Err(ColtError::InvalidConfig(format!(
            "run expects {} tasks, stream has {}",
            state.matrix.t,
            stream.n_tasks()
        )));
    }
    if task.train.is_empty() {
        return Err(ColtError::EmptyBatch);
    }
    let cfg = state.config.clone();

    let teacher = if task_id == 0 {
        state.detector.route_task(0, 0)?;
        None
    } else {
        let teacher = cfg.kd.enabled.then(|| state.detector.clone_frozen());
        if cfg.expansion.enabled {
            let gap = estimate_domain_gap(&state.detector, &task.val, &cfg.expansion)?;
            let report = maybe_expand(&mut state.detector, task_id, gap, &cfg.expansion)?;
            state.gap_reports.push(report);
        } else {
            let h = state.detector.default_head();
            state.detector.route_task(task_id, h)?;
        }
        teacher
    };
    let head = state.detector.head_for_task(task_id)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, task_id as u64, 1]));
    let mut sgd = Sgd::new(&cfg);
    let rehearsal_k = if state.memory.is_empty() {
        0
    } else {
        cfg.replay_batch_size
            .max(if teacher.is_some() { cfg.kd_batch_size() } else { 0 })
    };
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &cfg)?;
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let new: Vec<&DetectionSample> = chunk.iter().map(|&i| &task.train[i]).collect();
            let rehearsal = if rehearsal_k > 0 {
                let seed = derive_seed(&[cfg.seed, task_id as u64, epoch as u64, step as u64]);
                state.memory.sample_batch(rehearsal_k, seed)?
            } else {
                Vec::new()
            };
            let blank = LossRecord {
                task: task_id,
                epoch,
                step,
                sup_new: 0.0,
                sup_replay: None,
                kd: None,
                total: 0.0,
                lr,
            };
            let out = train_step(&state.detector, teacher.as_ref(), &cfg, head, &new, &rehearsal, blank)?;
            sgd.step(&mut state.detector, out.grads, lr, cfg.grad_clip)?;
            state.detector.apply_bn_updates(&out.bn_updates);
            state.ledger.push(out.record);
        }
    }

    state
        .memory
        .commit_task(task_id, &task.train, derive_seed(&[cfg.seed, task_id as u64, 2]))?;

    let evals = evaluate_seen(state, stream, task_id)?;
    let column: Vec<f64> = evals.iter().map(EvalResult::mean_ap_percent).collect();
    state.matrix.set_column(task_id, &column)?;
    for (i, e) in evals.into_iter().enumerate() {
        state.latest_evals[i] = Some(e);
    }
    state.completed_tasks.push(task_id);

    if let Some(dir) = run_dir {
        write_run_files(state, dir)?;
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| ColtError::io(&ckpt_dir, e))?;
        let name = format!("task_{task_id}.json");
        // relative to the run directory, so runs written to different places stay byte-identical
        state.checkpoints.insert(task_id, Path::new("checkpoints").join(&name));
        save_checkpoint(state, &ckpt_dir.join(name))?;
    }
    Ok(())
}

/// Config echo, loss ledger and gap reports.
pub fn write_run_files(state: &RunState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ColtError::io(dir, e))?;
    let echo = dir.join(CONFIG_ECHO_FILE);
    let text = serde_json::to_string_pretty(&state.config).expect("config serialises");
    std::fs::write(&echo, text).map_err(|e| ColtError::io(&echo, e))?;
    write_jsonl(&dir.join(LEDGER_FILE), &state.ledger)?;
    write_jsonl(&dir.join(GAP_FILE), &state.gap_reports)
}

/// Trains every remaining task; with `stop_after`, stops once that task is
/// done.
pub fn run_stream(
    state: &mut RunState,
    stream: &TaskStream,
    run_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    while !state.is_finished() {
        let t = state.next_task();
        if stop_after.is_some_and(|s| t > s) {
            break;
        }
        train_task(state, stream, t, run_dir)?;
    }
    Ok(())
}
