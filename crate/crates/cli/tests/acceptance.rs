//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs the desk-scale experiments from
//! `configs/desk_scale.cfg`; expect roughly a quarter of an hour on one core.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use colt_cli::ExperimentConfig;
use colt_core::detector::{BackboneKind, Detector, HeadInit, Mode, Trainable};
use colt_core::expansion::maybe_expand;
use colt_core::metrics::{average_precision, forgetting_rate, GtBox, ScoredBox, TABLE1_HEADER};
use colt_core::replay::ReplayMemory;
use colt_core::taskstream::{dataset_digest, load_dataset, RgbFrame, Split, CLASS_NAMES};
use colt_core::trainer::{step_objective, train_task};
use colt_core::{
    generate_task_stream, BBox, ColtError, DetectionSample, ExpansionPolicy, FeaturePyramid, KDConfig, KdReduction,
    PerformanceMatrix, RunState, RunSummary, TaskStream, Tensor,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const KD_PYRAMIDS: usize = 200;
const KD_REL_TOL: f64 = 1e-6;
const KD_MAX_SECS: f64 = 10.0;
// criterion 2
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_MIN_PROBES: usize = 10;
const GRAD_PROBES: usize = 12;
const GRAD_EPS: f64 = 1e-4;
const GRAD_MAX_SECS: f64 = 120.0;
const KD_RATIO: f64 = 20.0;
// criterion 3
const FR_MATRICES: usize = 100;
const FR_TOL: f64 = 1e-9;
// criterion 4
const AP_INSTANCES: u32 = 500;
const AP_TOL: f64 = 1e-9;
const AP_IOU: f64 = 0.5;
// criterion 5
const MEMORY_CAPACITY: usize = 250;
const MEMORY_CASES: u32 = 200;
// criterion 6
const GAP_THRESHOLD: f64 = 1.2;
const GAP_TABLE: [(f64, bool); 3] = [(0.8, false), (1.2, false), (1.5, true)];
// criteria 7-9
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ESCALATED_SEEDS: u64 = 15;
const SIGN_TEST_ALPHA: f64 = 0.1;
const NIGHT: &str = "night";

const DESK_CONFIG: &str = include_str!("../../../configs/desk_scale.cfg");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Variant {
    Replay,
    ReplayKd,
    ReplayExpand,
    CnnReplay,
    CnnFrozenReplay,
}

impl Variant {
    fn label(self) -> &'static str {
        match self {
            Variant::Replay => "Replay/Transformer",
            Variant::ReplayKd => "Replay+KD/Transformer",
            Variant::ReplayExpand => "Replay+Expand/Transformer",
            Variant::CnnReplay => "Replay/CNN-BN",
            Variant::CnnFrozenReplay => "Replay/CNN-BN-frozen",
        }
    }

    fn config(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let a = &mut c.ablation;
        a.kd = Some(self == Variant::ReplayKd);
        a.expansion = Some(self == Variant::ReplayExpand);
        a.backbone = Some(match self {
            Variant::CnnReplay | Variant::CnnFrozenReplay => BackboneKind::Cnn,
            _ => BackboneKind::Transformer,
        });
        a.freeze_norm = Some(self == Variant::CnnFrozenReplay);
        c
    }
}

struct Outcome {
    summary: RunSummary,
    n_heads: usize,
    n_params: usize,
    /// Non-routed heads whose parameters changed while a task trained.
    head_violations: Vec<String>,
}

/// Desk-scale runs shared between criteria.
struct Lab {
    base: ExperimentConfig,
    stream: TaskStream,
    runs: HashMap<(Variant, u64), Outcome>,
}

impl Lab {
    fn new() -> Self {
        let base = ExperimentConfig::from_toml(DESK_CONFIG).expect("desk config parses");
        let cfg = base.dataset.stream.clone().expect("desk config renders a stream");
        let stream = generate_task_stream(&cfg, cfg.seed).expect("stream generates");
        Self {
            base,
            stream,
            runs: HashMap::new(),
        }
    }

    fn night(&self) -> usize {
        self.stream
            .tasks
            .iter()
            .position(|t| t.spec.name == NIGHT)
            .expect("stream has a night task")
    }

    fn run(&mut self, v: Variant, seed: u64) -> &Outcome {
        if !self.runs.contains_key(&(v, seed)) {
            let started = Instant::now();
            let cfg = v.config(&self.base).train_config(seed);
            let mut state = RunState::new(cfg, self.stream.n_tasks()).expect("valid desk config");
            let mut head_violations = Vec::new();
            for t in 0..self.stream.n_tasks() {
                let before: Vec<_> = (0..state.detector.n_heads())
                    .map(|h| state.detector.head_params(h))
                    .collect();
                train_task(&mut state, &self.stream, t, None).expect("desk run trains");
                let routed = state.detector.head_for_task(t).unwrap();
                for (h, params) in before.iter().enumerate() {
                    if h != routed && &state.detector.head_params(h) != params {
                        head_violations.push(format!("head {h} changed during task {t}"));
                    }
                }
            }
            let summary = state.summary(&self.stream, "");
            eprintln!(
                "    run {:<26} seed {seed:>2}: mAP {:6.2}  FR {:6.2}  ({:.0} s)",
                v.label(),
                summary.mean_ap.unwrap_or(f64::NAN),
                summary.forgetting_rate.unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
            let outcome = Outcome {
                summary,
                n_heads: state.detector.n_heads(),
                n_params: state.detector.num_parameters(),
                head_violations,
            };
            self.runs.insert((v, seed), outcome);
        }
        &self.runs[&(v, seed)]
    }

    fn metric(&mut self, v: Variant, seeds: &[u64], f: impl Fn(&Outcome) -> f64) -> Vec<f64> {
        seeds.iter().map(|&s| f(self.run(v, s))).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fr(o: &Outcome) -> f64 {
    o.summary.forgetting_rate.expect("complete run has a forgetting rate")
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_maps(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) {
    let stages = rng.gen_range(1..=3);
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    for _ in 0..stages {
        let shape = vec![
            rng.gen_range(1..=3),
            rng.gen_range(1..=5),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        ];
        let n: usize = shape.iter().product();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s: Vec<f64> = t.iter().map(|x| x + rng.gen_range(-1.0..1.0)).collect();
        teacher.push(Tensor::new(shape.clone(), t));
        student.push(Tensor::new(shape, s));
    }
    (teacher, student)
}

/// Squared distance between two NCHW maps, visiting every element by its
/// four indices.
fn naive_sq_dist(a: &Tensor, b: &Tensor) -> (f64, usize) {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let k = ((i * c + j) * h + y) * w + x;
                    let d = a.data()[k] - b.data()[k];
                    sum += d * d;
                }
            }
        }
    }
    (sum, n * c * h * w)
}

fn kd_oracle(t: &FeaturePyramid, s: &FeaturePyramid, reduction: KdReduction) -> f64 {
    let mut total = 0.0;
    for (a, b) in t
        .backbone_maps
        .iter()
        .zip(&s.backbone_maps)
        .chain(t.neck_maps.iter().zip(&s.neck_maps))
    {
        let (sq, n) = naive_sq_dist(a, b);
        total += match reduction {
            KdReduction::Sum => sq,
            KdReduction::Mean => sq / n as f64,
        };
    }
    total
}

fn criterion_kd_oracle() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut identical_nonzero = 0;
    for k in 0..KD_PYRAMIDS {
        let (tb, sb) = random_maps(&mut rng);
        let (tn, sn) = random_maps(&mut rng);
        let teacher = FeaturePyramid {
            backbone_maps: tb,
            neck_maps: tn,
        };
        let student = FeaturePyramid {
            backbone_maps: sb,
            neck_maps: sn,
        };
        let reduction = if k % 2 == 0 {
            KdReduction::Mean
        } else {
            KdReduction::Sum
        };
        let cfg = KDConfig {
            kd_reduction: reduction,
            ..KDConfig::default()
        };
        let got = colt_core::distill::kd_loss(&teacher, &student, &cfg).map_err(|e| e.to_string())?;
        let want = kd_oracle(&teacher, &student, reduction);
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        if colt_core::distill::kd_loss(&teacher, &teacher, &cfg).map_err(|e| e.to_string())? != 0.0 {
            identical_nonzero += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= KD_REL_TOL && identical_nonzero == 0 && secs < KD_MAX_SECS,
        format!(
            "{KD_PYRAMIDS} pyramids, worst relative error {worst:.2e} (tol {KD_REL_TOL:.0e}), identical inputs non-zero {identical_nonzero} times, {secs:.2} s (limit {KD_MAX_SECS} s)"
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Spread of `count` names over the sorted keys.
fn spread(names: &[String], count: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..count)
        .map(|i| names[i * (names.len() - 1) / (count - 1).max(1)].clone())
        .collect();
    out.dedup();
    out
}

fn argmax_abs(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, v) in t.data().iter().enumerate() {
        if v.abs() > t.data()[best].abs() {
            best = i;
        }
    }
    best
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn criterion_gradients(lab: &Lab) -> Verdict {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in [BackboneKind::Transformer, BackboneKind::Cnn] {
        let mut cfg = lab.base.train_config(0);
        cfg.detector.backbone.kind = kind;
        cfg.kd.enabled = true;
        cfg.kd.lambda = KD_RATIO;
        let mut det = Detector::new(cfg.detector.clone()).map_err(|e| e.to_string())?;
        det.route_task(0, 0).unwrap();
        let task0: Vec<&DetectionSample> = lab.stream.tasks[0].train.iter().take(4).collect();
        let task1: Vec<&DetectionSample> = lab.stream.tasks[1].train.iter().take(3).collect();

        // supervised loss of a single task
        let (_, grads) = det
            .loss_and_grads(&task0[..3], 0, Mode::Train, Trainable::routed(0))
            .map_err(|e| e.to_string())?;
        let names: Vec<String> = grads.keys().cloned().collect();
        let probes = spread(&names, GRAD_PROBES);
        let mut worst: f64 = 0.0;
        for name in &probes {
            let idx = argmax_abs(&grads[name]);
            let f = |delta: f64| {
                let mut d = det.clone();
                d.param_mut(name).unwrap().data_mut()[idx] += delta;
                d.loss_and_grads(&task0[..3], 0, Mode::Train, Trainable::none())
                    .unwrap()
                    .0
                    .total
            };
            let numeric = (f(GRAD_EPS) - f(-GRAD_EPS)) / (2.0 * GRAD_EPS);
            worst = worst.max(rel_err(grads[name].data()[idx], numeric));
        }
        ok &= probes.len() >= GRAD_MIN_PROBES && worst < GRAD_REL_TOL;
        lines.push(format!("{kind} supervised: {} probes, worst {worst:.1e}", probes.len()));

        // full objective: new task through a fresh head, replay, KD against a teacher
        let teacher = det.clone_frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let drift: Vec<String> = det
            .params()
            .keys()
            .filter(|k| !k.starts_with("heads."))
            .cloned()
            .collect();
        for name in drift {
            for v in det.param_mut(&name).unwrap().data_mut() {
                *v += rng.gen_range(-0.02..0.02);
            }
        }
        let head = det.add_head(HeadInit::CopyLastHead, 3).map_err(|e| e.to_string())?;
        det.route_task(1, head).unwrap();
        let (record, grads) =
            step_objective(&det, Some(&teacher), &cfg, head, &task1, &task0).map_err(|e| e.to_string())?;
        let kd = record.kd.unwrap_or(0.0);
        let recomposed = record.sup_new + record.sup_replay.unwrap_or(0.0) + KD_RATIO * kd;
        let old_head_grads = grads.keys().filter(|k| k.starts_with("heads.0.")).count();
        let names: Vec<String> = grads.keys().cloned().collect();
        let probes = spread(&names, GRAD_PROBES);
        let mut worst: f64 = 0.0;
        for name in &probes {
            let idx = argmax_abs(&grads[name]);
            let f = |delta: f64| {
                let mut d = det.clone();
                d.param_mut(name).unwrap().data_mut()[idx] += delta;
                step_objective(&d, Some(&teacher), &cfg, head, &task1, &task0)
                    .unwrap()
                    .0
                    .total
            };
            let numeric = (f(GRAD_EPS) - f(-GRAD_EPS)) / (2.0 * GRAD_EPS);
            worst = worst.max(rel_err(grads[name].data()[idx], numeric));
        }
        ok &= probes.len() >= GRAD_MIN_PROBES
            && worst < GRAD_REL_TOL
            && kd > 0.0
            && record.sup_replay.is_some()
            && (record.total - recomposed).abs() <= 1e-9 * record.total.abs()
            && old_head_grads == 0;
        lines.push(format!(
            "{kind} sup+{KD_RATIO}*kd (kd {kd:.3e}): {} probes, worst {worst:.1e}, old-head grads {old_head_grads}",
            probes.len()
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < GRAD_MAX_SECS;
    check(
        ok,
        format!(
            "{}; tol {GRAD_REL_TOL:.0e}, {secs:.1} s (limit {GRAD_MAX_SECS} s)",
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 3

fn upper_matrix(rows: &[Vec<f64>]) -> PerformanceMatrix {
    let t = rows.len();
    let mut m = PerformanceMatrix::new(t);
    for j in 0..t {
        let col: Vec<f64> = (0..=j).map(|i| rows[i][j]).collect();
        m.set_column(j, &col).unwrap();
    }
    m
}

fn criterion_forgetting() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    let mut no_forgetting_nonzero = 0;
    for _ in 0..FR_MATRICES {
        let t = rng.gen_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..t).map(|_| rng.gen_range(1.0..100.0)).collect())
            .collect();
        let m = upper_matrix(&rows);
        let mut direct = 0.0;
        for i in 0..t - 1 {
            direct += (rows[i][i] - rows[i][t - 1]) / rows[i][i];
        }
        direct = 100.0 * direct / (t - 1) as f64;
        let got = forgetting_rate(&m).map_err(|e| e.to_string())?;
        worst = worst.max((got - direct).abs());
        let c = rng.gen_range(0.01..10.0);
        let scaled = forgetting_rate(&m.scaled(c)).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max((scaled - got).abs());

        let mut flat = rows.clone();
        for (i, row) in flat.iter_mut().enumerate() {
            row[t - 1] = row[i];
        }
        if forgetting_rate(&upper_matrix(&flat)).map_err(|e| e.to_string())? != 0.0 {
            no_forgetting_nonzero += 1;
        }
    }
    let zero = upper_matrix(&[vec![0.0, 10.0, 5.0], vec![0.0, 50.0, 40.0], vec![0.0, 0.0, 30.0]]);
    let zero_rejected = matches!(forgetting_rate(&zero), Err(ColtError::UndefinedForgetting(0)));
    check(
        worst <= FR_TOL && worst_scale <= FR_TOL && no_forgetting_nonzero == 0 && zero_rejected,
        format!(
            "{FR_MATRICES} matrices, worst |FR - direct| {worst:.1e}, worst scaling drift {worst_scale:.1e} (tol {FR_TOL:.0e}), no-forgetting non-zero {no_forgetting_nonzero}, zero diagonal rejected {zero_rejected}"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Ranks predictions, recomputes the matching for every prefix from scratch
/// and integrates the interpolated precision over the recall steps.
fn brute_force_ap(preds: &[ScoredBox], gts: &[GtBox]) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<usize> = (0..preds.len()).collect();
    ranked.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0usize;
        for &p in &ranked[..k] {
            let p = &preds[p];
            let mut pick: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image != p.image {
                    continue;
                }
                let iou = p.bbox.iou(&g.bbox);
                if iou >= AP_IOU && pick.is_none_or(|(_, b)| iou > b) {
                    pick = Some((j, iou));
                }
            }
            if let Some((j, _)) = pick {
                used[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / k as f64, tp as f64 / gts.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..points.len() {
        let r = points[k].1;
        if r > prev {
            let p = points[k..].iter().map(|q| q.0).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

fn criterion_ap() -> Verdict {
    let bx = (0usize..3, 0.0f64..24.0, 0.0f64..24.0, 2.0f64..12.0, 2.0f64..12.0);
    let instance = (
        prop::collection::vec((bx.clone(), 0u8..5), 0..=8),
        prop::collection::vec(bx, 0..=5),
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: AP_INSTANCES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let worst = std::cell::Cell::new(0.0f64);
    let result = runner.run(&instance, |(p, g)| {
        let preds: Vec<ScoredBox> = p
            .into_iter()
            .map(|((image, x, y, w, h), s)| ScoredBox {
                image,
                bbox: BBox::new(x, y, x + w, y + h),
                score: s as f64 / 4.0,
            })
            .collect();
        let gts: Vec<GtBox> = g
            .into_iter()
            .map(|(image, x, y, w, h)| GtBox {
                image,
                bbox: BBox::new(x, y, x + w, y + h),
            })
            .collect();
        let got = average_precision(&preds, &gts, AP_IOU).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let err = (got - brute_force_ap(&preds, &gts)).abs();
        worst.set(worst.get().max(err));
        prop_assert!(err <= AP_TOL, "ap {got} differs from brute force by {err}");
        Ok(())
    });
    let detail = format!(
        "{AP_INSTANCES} instances (<=5 GT, <=8 predictions), worst error {:.1e} (tol {AP_TOL:.0e})",
        worst.get()
    );
    match result {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{detail}; {e}")),
    }
}

// ---------------------------------------------------------------- 5

fn fake_samples(task: usize, n: usize) -> Vec<DetectionSample> {
    (0..n)
        .map(|i| DetectionSample {
            sample_id: format!("t{task}-{i}"),
            task_id: task,
            split: Split::Train,
            image: RgbFrame {
                width: 1,
                height: 1,
                pixels: vec![0, 0, 0],
            },
            boxes: Vec::new(),
            labels: Vec::new(),
        })
        .collect()
}

fn criterion_memory() -> Verdict {
    let strategy = (
        prop::collection::vec(0usize..=400, 1..=8),
        prop::collection::vec(1usize..=300, 1..=8),
        any::<u64>(),
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: MEMORY_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let max_len = std::cell::Cell::new(0usize);
    let balanced_checks = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(sizes, draws, seed)| {
        let mut mem = ReplayMemory::new(MEMORY_CAPACITY);
        let mut pools = Vec::new();
        for (t, &n) in sizes.iter().enumerate() {
            pools.push(fake_samples(t, n));
            mem.commit_task(t, &pools[t], seed ^ t as u64).unwrap();
            max_len.set(max_len.get().max(mem.len()));
            prop_assert!(mem.len() <= MEMORY_CAPACITY);
            let counts = mem.per_task_counts();
            prop_assert_eq!(counts.values().sum::<usize>(), mem.len());
            for (&task, &c) in counts {
                prop_assert!(c <= sizes[task]);
            }
            let k = t + 1;
            let fair = MEMORY_CAPACITY as f64 / k as f64;
            if sizes[..k].iter().all(|&n| n as f64 >= fair.ceil()) {
                balanced_checks.set(balanced_checks.get() + 1);
                for &c in counts.values() {
                    prop_assert!((c as f64 - fair).abs() < 1.0, "count {} vs share {}", c, fair);
                }
            }
            let ids: std::collections::HashSet<&str> = mem.slots().iter().map(|s| s.sample_id.as_str()).collect();
            for (j, &d) in draws.iter().enumerate() {
                match mem.sample_batch(d, seed.wrapping_add(j as u64)) {
                    Ok(batch) => {
                        prop_assert_eq!(batch.len(), d);
                        prop_assert!(batch.iter().all(|s| ids.contains(s.sample_id.as_str())));
                        if d <= mem.len() {
                            let distinct: std::collections::HashSet<&str> =
                                batch.iter().map(|s| s.sample_id.as_str()).collect();
                            prop_assert_eq!(distinct.len(), d);
                        }
                    }
                    Err(ColtError::NoRehearsalData) => prop_assert!(mem.is_empty()),
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            }
        }
        Ok(())
    });
    let detail = format!(
        "{MEMORY_CASES} random commit/sample sequences, max size {} (capacity {MEMORY_CAPACITY}), {} equal-allocation checks within +-1",
        max_len.get(),
        balanced_checks.get()
    );
    match result {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{detail}; {e}")),
    }
}

// ---------------------------------------------------------------- 6

fn criterion_expansion(lab: &mut Lab) -> Verdict {
    let policy = ExpansionPolicy {
        threshold: GAP_THRESHOLD,
        ..ExpansionPolicy::default()
    };
    let mut det = Detector::new(lab.base.train_config(0).detector).map_err(|e| e.to_string())?;
    det.route_task(0, 0).unwrap();
    let mut table = Vec::new();
    let mut ok = true;
    for (gap, want) in GAP_TABLE {
        let mut d = det.clone();
        let r = maybe_expand(&mut d, 1, gap, &policy).map_err(|e| e.to_string())?;
        let heads_ok = d.n_heads() == 1 + usize::from(r.expanded);
        let untouched = d.head_params(0) == det.head_params(0);
        ok &= r.expanded == want && heads_ok && untouched && d.head_for_task(1).unwrap() == r.routed_head;
        table.push(format!("{gap}->{}", if r.expanded { "yes" } else { "no" }));
    }
    // every desk run of criteria 7-9 is checked for head isolation
    for v in [
        Variant::Replay,
        Variant::ReplayKd,
        Variant::ReplayExpand,
        Variant::CnnReplay,
        Variant::CnnFrozenReplay,
    ] {
        for &s in &SEEDS {
            lab.run(v, s);
        }
    }
    let mut count_mismatch = Vec::new();
    let mut violations = Vec::new();
    for &s in &SEEDS {
        let o = lab.run(Variant::ReplayExpand, s);
        let expanded = o.summary.gap_reports.iter().filter(|g| g.expanded).count();
        if o.n_heads != 1 + expanded {
            count_mismatch.push(s);
        }
    }
    let checked = lab.runs.len();
    violations.extend(lab.runs.iter().flat_map(|((v, s), o)| {
        o.head_violations
            .iter()
            .map(move |m| format!("{} seed {s}: {m}", v.label()))
    }));
    violations.sort();
    violations.dedup();
    ok &= count_mismatch.is_empty() && violations.is_empty();
    check(
        ok,
        format!(
            "gap table at tau {GAP_THRESHOLD}: {}; head count = 1 + expansions in {}/{} expansion runs; non-routed heads bit-identical in {checked} runs ({} violations{})",
            table.join(", "),
            SEEDS.len() - count_mismatch.len(),
            SEEDS.len(),
            violations.len(),
            violations.first().map(|v| format!(", e.g. {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_kd_forgetting(lab: &mut Lab) -> Verdict {
    let with = lab.metric(Variant::ReplayKd, &SEEDS, fr);
    let without = lab.metric(Variant::Replay, &SEEDS, fr);
    let (a, b) = (mean(&with), mean(&without));
    check(
        a < b,
        format!(
            "mean FR over {} seeds: KD {a:.2} {} no KD {b:.2} (KD {}, no KD {})",
            SEEDS.len(),
            if a < b { "<" } else { ">=" },
            fmt(&with),
            fmt(&without)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_expansion_night(lab: &mut Lab) -> Verdict {
    let night = lab.night();
    let last = lab.stream.n_tasks() - 1;
    let final_night = |o: &Outcome| o.summary.matrix.get(night, last).unwrap();
    let with = lab.metric(Variant::ReplayExpand, &SEEDS, final_night);
    let without = lab.metric(Variant::Replay, &SEEDS, final_night);
    let mut max_gap_seeds = 0;
    let mut gaps = Vec::new();
    for &s in &SEEDS {
        let reports = &lab.run(Variant::ReplayExpand, s).summary.gap_reports;
        let top = reports
            .iter()
            .max_by(|a, b| a.avg_val_loss.total_cmp(&b.avg_val_loss))
            .map(|g| g.task_id);
        if top == Some(night) {
            max_gap_seeds += 1;
        }
        let row: Vec<String> = reports.iter().map(|g| format!("{:.2}", g.avg_val_loss)).collect();
        gaps.push(format!("[{}]", row.join(" ")));
    }
    let (a, b) = (mean(&with), mean(&without));
    let threshold = lab.base.train.expansion.threshold;
    check(
        a > b && max_gap_seeds == SEEDS.len(),
        format!(
            "tau {threshold}: night final AP expansion {a:.2} {} no expansion {b:.2} ({} vs {}); night gap is the largest in {max_gap_seeds}/{} seeds, gaps {}",
            if a > b { ">" } else { "<=" },
            fmt(&with),
            fmt(&without),
            SEEDS.len(),
            gaps.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 9

/// One-sided sign test of `a[i] > b[i]`; ties are dropped.
fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = a.iter().zip(b).filter(|(x, y)| x != y).count();
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        p += c / 2f64.powi(n as i32);
    }
    (wins, n, p)
}

fn criterion_backbone_gap(lab: &mut Lab) -> Verdict {
    let cnn = lab.metric(Variant::CnnReplay, &SEEDS, fr);
    let vit = lab.metric(Variant::Replay, &SEEDS, fr);
    let frozen = lab.metric(Variant::CnnFrozenReplay, &SEEDS, fr);
    let params = (
        lab.run(Variant::CnnReplay, 0).n_params,
        lab.run(Variant::Replay, 0).n_params,
    );
    let first = mean(&cnn) > mean(&vit);
    let second = mean(&frozen) < mean(&cnn);
    let mut detail = format!(
        "mean FR over {} seeds: CNN-BN {:.2} vs Transformer {:.2} ({} / {} params), CNN-BN-frozen {:.2}",
        SEEDS.len(),
        mean(&cnn),
        mean(&vit),
        params.0,
        params.1,
        mean(&frozen)
    );
    if first && second {
        return Ok(detail);
    }
    let seeds: Vec<u64> = (0..ESCALATED_SEEDS).collect();
    let mut ok = true;
    if !first {
        let cnn = lab.metric(Variant::CnnReplay, &seeds, fr);
        let vit = lab.metric(Variant::Replay, &seeds, fr);
        let (w, n, p) = sign_test(&cnn, &vit);
        ok &= p < SIGN_TEST_ALPHA;
        detail.push_str(&format!(
            "; escalated CNN-BN > Transformer: {w}/{n} seeds, sign test p {p:.3} (alpha {SIGN_TEST_ALPHA})"
        ));
    }
    if !second {
        let cnn = lab.metric(Variant::CnnReplay, &seeds, fr);
        let frozen = lab.metric(Variant::CnnFrozenReplay, &seeds, fr);
        let (w, n, p) = sign_test(&cnn, &frozen);
        ok &= p < SIGN_TEST_ALPHA;
        detail.push_str(&format!(
            "; escalated CNN-BN > CNN-BN-frozen: {w}/{n} seeds, sign test p {p:.3} (alpha {SIGN_TEST_ALPHA})"
        ));
    }
    check(ok, detail)
}

// ---------------------------------------------------------------- 10, 11

fn colt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_colt"))
        .args(args)
        .env("COLT_DETERMINISTIC", "1")
        .output()
        .expect("colt binary runs")
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let o = colt(args);
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!(
            "`colt {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn criterion_reproducibility(lab: &Lab, tmp: &Path) -> Verdict {
    let mut exp = lab.base.clone();
    exp.seeds = vec![0];
    exp.output_dir = None;
    let cfg = tmp.join("colt.cfg");
    fs::write(&cfg, toml::to_string(&exp).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.join("colt_a"), tmp.join("colt_b"));
    run_ok(&["train", "--config", p(&cfg), "--out", p(&a)])?;
    run_ok(&["train", "--config", p(&cfg), "--out", p(&b)])?;
    let files = [
        "metrics.json",
        "ledger.jsonl",
        "gap_reports.jsonl",
        "checkpoints/task_3.json",
    ];
    let identical: Vec<bool> = files
        .iter()
        .map(|f| fs::read(a.join("seed_0").join(f)).ok() == fs::read(b.join("seed_0").join(f)).ok())
        .collect();

    // interrupt after the first task and resume from its checkpoint
    let c = tmp.join("colt_c");
    fs::create_dir_all(c.join("seed_0/checkpoints")).map_err(|e| e.to_string())?;
    for f in ["checkpoints/task_0.json", "train_config.json"] {
        fs::copy(a.join("seed_0").join(f), c.join("seed_0").join(f)).map_err(|e| e.to_string())?;
    }
    copy_dir(&a.join("dataset"), &c.join("dataset"))?;
    let log = colt(&["train", "--config", p(&cfg), "--out", p(&c), "--resume"]);
    if !log.status.success() {
        return Err(format!("resume failed: {}", String::from_utf8_lossy(&log.stderr)));
    }
    let resumed_from_1 = String::from_utf8_lossy(&log.stderr).contains("resuming after task 1");
    let full = colt_cli::commands::read_summary(&a.join("seed_0")).map_err(|e| e.to_string())?;
    let resumed = colt_cli::commands::read_summary(&c.join("seed_0")).map_err(|e| e.to_string())?;
    let same_matrix = full.matrix == resumed.matrix;
    let same_metrics = fs::read(a.join("seed_0/metrics.json")).ok() == fs::read(c.join("seed_0/metrics.json")).ok();
    check(
        identical.iter().all(|&x| x) && resumed_from_1 && same_matrix && same_metrics,
        format!(
            "two deterministic COLT runs byte-identical: {}; resume after task 1 ({resumed_from_1}): matrix identical {same_matrix}, metrics.json identical {same_metrics}",
            files
                .iter()
                .zip(&identical)
                .map(|(f, s)| format!("{f} {s}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn copy_dir(from: &Path, to: &Path) -> Result<(), String> {
    fs::create_dir_all(to).map_err(|e| e.to_string())?;
    for entry in fs::read_dir(from).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let dest = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &dest)?;
        } else {
            fs::copy(entry.path(), dest).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn two_dp(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.2}"))
}

fn criterion_report(lab: &mut Lab, tmp: &Path) -> Verdict {
    let colt_run = tmp.join("colt_a");
    let dataset = colt_run.join("dataset");
    let digest = dataset_digest(&dataset).map_err(|e| e.to_string())?;
    let loaded = load_dataset(&dataset).map_err(|e| e.to_string())?;
    if loaded != lab.stream {
        return Err("dataset written by the CLI differs from the in-process stream".into());
    }

    // the in-process Replay sweep becomes a second comparable run directory
    let sweep = tmp.join("replay_sweep");
    let mut replay = Vec::new();
    for &s in &SEEDS {
        let mut summary = lab.run(Variant::Replay, s).summary.clone();
        summary.dataset_digest = digest.clone();
        let dir = sweep.join(format!("seed_{s}"));
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&summary).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        replay.push(summary);
    }
    let out = tmp.join("compare");
    let table = run_ok(&["compare", p(&colt_run), p(&sweep), "--out", p(&out)])?;
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split('\t').collect()).collect();
    let colt = colt_cli::commands::read_summary(&colt_run.join("seed_0")).map_err(|e| e.to_string())?;
    let replay_map = mean(&replay.iter().map(|r| r.mean_ap.unwrap()).collect::<Vec<_>>());
    let replay_fr = mean(&replay.iter().map(|r| r.forgetting_rate.unwrap()).collect::<Vec<_>>());
    let want_rows = [
        vec![
            "COLT".to_string(),
            colt_core::metrics::DETECTOR_ANALOGUE.into(),
            "Transformer".into(),
            "w".into(),
            "w".into(),
            two_dp(colt.mean_ap),
            two_dp(colt.forgetting_rate),
        ],
        vec![
            "Replay".to_string(),
            colt_core::metrics::DETECTOR_ANALOGUE.into(),
            "Transformer".into(),
            "w/o".into(),
            "w/o".into(),
            format!("{replay_map:.2}"),
            format!("{replay_fr:.2}"),
        ],
    ];
    let header_ok = rows.first().map(|h| h.as_slice()) == Some(&TABLE1_HEADER[..]);
    let body_ok = rows.len() == 3
        && rows[1..]
            .iter()
            .zip(&want_rows)
            .all(|(got, want)| got.iter().map(|s| s.to_string()).collect::<Vec<_>>() == *want);
    let plots = ["table1.tsv", "ap_trajectory.svg", "fr_bars.svg"]
        .iter()
        .all(|f| out.join(f).is_file());

    let report = run_ok(&["report", p(&colt_run.join("seed_0")), "--out", p(&tmp.join("report"))])?;
    let t = colt.matrix.t;
    let mut want_header = vec!["Method".to_string(), "Mean AP".to_string()];
    want_header.extend((1..=t).map(|i| format!("Task{i}")));
    want_header.extend(CLASS_NAMES.iter().map(|c| c.to_string()));
    let mut want_row = vec!["COLT".to_string(), two_dp(colt.mean_ap)];
    want_row.extend((0..t).map(|i| two_dp(colt.matrix.get(i, t - 1))));
    for c in 0..CLASS_NAMES.len() {
        let v: Vec<f64> = colt
            .final_evals
            .iter()
            .flatten()
            .filter_map(|e| e.per_class_ap[c])
            .collect();
        want_row.push(if v.is_empty() {
            "-".into()
        } else {
            format!("{:.2}", 100.0 * mean(&v))
        });
    }
    let lines: Vec<Vec<String>> = report
        .lines()
        .take(2)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    let table2_ok = lines.len() == 2 && lines[0] == want_header && lines[1] == want_row;
    check(
        header_ok && body_ok && plots && table2_ok,
        format!(
            "compare header matches Table 1 {header_ok}, rows {body_ok} ({} rows), plots written {plots}; report Table 2 ({} columns: Mean AP, {t} tasks, {} classes) {table2_ok}",
            rows.len().saturating_sub(1),
            want_header.len(),
            CLASS_NAMES.len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut lab = Lab::new();
    let mut results: BTreeMap<usize, (String, Verdict)> = BTreeMap::new();
    let mut record = |n: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(panic) => Err(format!(
                "panicked: {}",
                panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{n:>2}] {name}: {detail} ({:.0} s)", t.elapsed().as_secs_f64());
        results.insert(n, (name.to_string(), verdict));
    };

    record(1, "KD loss oracle", &mut || criterion_kd_oracle());
    record(2, "gradient checks", &mut || criterion_gradients(&lab));
    record(3, "forgetting-rate oracle", &mut || criterion_forgetting());
    record(4, "AP oracle", &mut || criterion_ap());
    record(5, "memory bound", &mut || criterion_memory());
    record(6, "expansion semantics", &mut || criterion_expansion(&mut lab));
    record(7, "KD reduces forgetting", &mut || criterion_kd_forgetting(&mut lab));
    record(8, "expansion helps the night task", &mut || {
        criterion_expansion_night(&mut lab)
    });
    record(9, "backbone forgetting gap", &mut || criterion_backbone_gap(&mut lab));
    record(10, "reproducibility", &mut || {
        criterion_reproducibility(&lab, tmp.path())
    });
    record(11, "report fidelity", &mut || criterion_report(&mut lab, tmp.path()));

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, (_, v))| v.is_err())
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
