use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use colt_core::metrics::{
    aggregate, evaluate_records, predictions_to_records, read_jsonl, render_matrix, render_report, render_table1,
    samples_to_records, write_jsonl, Aggregate, GroundTruthRecord, PredictionRecord, Table1Row,
};
use colt_core::taskstream::{dataset_digest, load_dataset, save_dataset, CLASS_NAMES};
use colt_core::trainer::{resume, train_task};
use colt_core::{generate_task_stream, RunState, RunSummary, StreamConfig, TaskStream};

use crate::config::{deterministic_override, ExperimentConfig};
use crate::plot;

pub const METRICS_FILE: &str = "metrics.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const EXPERIMENT_ECHO_FILE: &str = "experiment.toml";
pub const DATASET_DIR: &str = "dataset";

/// Failure of a subcommand. Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<colt_core::ColtError> for CliError {
    fn from(e: colt_core::ColtError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    if !path.is_file() {
        return usage(format!("config file {} not found", path.display()));
    }
    ExperimentConfig::load(path).map_err(|e| CliError::Usage(format!("{e:#}")))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Refuses a non-empty `dir` unless `force`; with `force` the directory is
/// cleared first.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return usage(format!("{} exists and is not a directory", dir.display()));
    }
    if is_nonempty_dir(dir) {
        if !force {
            return usage(format!("{} is not empty (use --force to overwrite)", dir.display()));
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn stream_config_from_file(path: &Path) -> CliResult<StreamConfig> {
    if !path.is_file() {
        return usage(format!("config file {} not found", path.display()));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if value.contains_key("dataset") {
        let exp = ExperimentConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{e:#}")))?;
        return exp
            .dataset
            .stream
            .ok_or_else(|| CliError::Usage(format!("{} has no [dataset.stream] table", path.display())));
    }
    let cfg: StreamConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// `gen`: renders a stream and writes it as a dataset directory.
pub fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>, force: bool) -> CliResult<()> {
    let mut cfg = stream_config_from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out_dir(out, force)?;
    let stream = generate_task_stream(&cfg, cfg.seed)?;
    save_dataset(&stream, out)?;
    let digest = dataset_digest(out)?;
    println!("dataset {} (seed {}, digest {digest})", out.display(), cfg.seed);
    println!("task\tname\ttrain\tval\ttest");
    for t in &stream.tasks {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            t.spec.task_id,
            t.spec.name,
            t.train.len(),
            t.val.len(),
            t.test.len()
        );
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: Option<&'a Path>,
    pub force: bool,
    pub resume: bool,
    pub deterministic: Option<bool>,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Latest checkpoint in a run directory, if any.
fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(t) = name
            .strip_prefix("task_")
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| t > *b) {
            best = Some((t, entry.path()));
        }
    }
    best.map(|(_, p)| p)
}

fn write_summary(state: &RunState, stream: &TaskStream, digest: &str, dir: &Path) -> CliResult<RunSummary> {
    let summary = state.summary(stream, digest);
    let text = serde_json::to_string_pretty(&summary).context("serialising metrics")?;
    write_text(&dir.join(METRICS_FILE), &text)?;
    write_text(&dir.join("matrix.tsv"), &render_matrix(&summary.matrix))?;
    Ok(summary)
}

fn train_one(
    exp: &ExperimentConfig,
    seed: u64,
    stream: &TaskStream,
    digest: &str,
    dir: &Path,
    deterministic: Option<bool>,
    resume_run: bool,
) -> CliResult<RunSummary> {
    let mut cfg = exp.train_config(seed);
    if let Some(d) = deterministic {
        cfg.deterministic = d;
    }
    let mut state = match latest_checkpoint(dir).filter(|_| resume_run) {
        Some(ck) => {
            let st = resume(&ck, stream)?;
            if st.config != cfg {
                return Err(CliError::Runtime(anyhow!(
                    "checkpoint {} was written with a different training config",
                    ck.display()
                )));
            }
            eprintln!("seed {seed}: resuming after task {}", st.next_task());
            st
        }
        None => RunState::new(cfg, stream.n_tasks()).map_err(|e| CliError::Usage(e.to_string()))?,
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    while !state.is_finished() {
        let t = state.next_task();
        if let Err(e) = train_task(&mut state, stream, t, Some(dir)) {
            // keep whatever finished so a partial report is still possible
            write_summary(&state, stream, digest, dir)?;
            return Err(CliError::Runtime(anyhow!(e).context(format!("seed {seed}, task {t}"))));
        }
        let col: Vec<String> = (0..=t)
            .map(|i| state.matrix.get(i, t).map_or("-".into(), |v| format!("{v:.2}")))
            .collect();
        let routed = state.detector.head_for_task(t)?;
        eprintln!(
            "seed {seed}: task {} ({}) done, head {routed}, AP on seen tasks [{}]",
            t + 1,
            stream.tasks[t].spec.name,
            col.join(", ")
        );
    }
    write_summary(&state, stream, digest, dir)
}

/// `train`: one run per seed under `<out>/seed_<s>`, plus `aggregate.json`.
pub fn cmd_train(args: TrainArgs<'_>) -> CliResult<Vec<RunSummary>> {
    let exp = load_experiment(args.config)?;
    let out = match (args.out, &exp.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => return usage("no output directory: set `output_dir` or pass --out"),
    };
    let deterministic = match args.deterministic {
        Some(d) => Some(d),
        None => deterministic_override().map_err(|e| CliError::Usage(e.to_string()))?,
    };
    if args.resume && args.force {
        return usage("--resume and --force are mutually exclusive");
    }
    if args.resume {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    } else {
        prepare_out_dir(&out, args.force)?;
    }
    let echo = toml::to_string(&exp).context("serialising experiment")?;
    write_text(&out.join(EXPERIMENT_ECHO_FILE), &echo)?;

    let (stream, digest) = match (&exp.dataset.path, &exp.dataset.stream) {
        (Some(path), _) => {
            if !path.join(colt_core::taskstream::MANIFEST_FILE).is_file() {
                return usage(format!(
                    "dataset {} has no manifest; run `colt gen` first",
                    path.display()
                ));
            }
            (load_dataset(path)?, dataset_digest(path)?)
        }
        (None, Some(cfg)) => {
            let dir = out.join(DATASET_DIR);
            let stream = if dir.join(colt_core::taskstream::MANIFEST_FILE).is_file() {
                load_dataset(&dir)?
            } else {
                let s = generate_task_stream(cfg, cfg.seed)?;
                save_dataset(&s, &dir)?;
                s
            };
            (stream, dataset_digest(&dir)?)
        }
        (None, None) => unreachable!("validated config has a dataset source"),
    };

    let mut summaries = Vec::new();
    for &seed in &exp.seeds {
        let dir = seed_dir(&out, seed);
        summaries.push(train_one(
            &exp,
            seed,
            &stream,
            &digest,
            &dir,
            deterministic,
            args.resume,
        )?);
    }
    let agg = aggregate(&summaries)?;
    let text = serde_json::to_string_pretty(&agg).context("serialising aggregate")?;
    write_text(&out.join(AGGREGATE_FILE), &text)?;
    print!("{}", render_table1(&[Table1Row::from(&agg)]));
    if summaries.len() > 1 {
        println!(
            "seeds {:?}: mean AP {:.2} ± {:.2}, FR {}",
            agg.seeds,
            agg.mean_ap,
            agg.mean_ap_std,
            match (agg.forgetting_rate, agg.forgetting_rate_std) {
                (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
                _ => "-".into(),
            }
        );
    }
    Ok(summaries)
}

pub fn read_summary(run_dir: &Path) -> CliResult<RunSummary> {
    let path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let s = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(s)
}

/// The runs behind one `compare` argument: a run directory, or a sweep
/// directory whose `seed_*` subdirectories are runs.
fn runs_in(dir: &Path) -> CliResult<Vec<RunSummary>> {
    if dir.join(METRICS_FILE).is_file() {
        return Ok(vec![read_summary(dir)?]);
    }
    let mut seeds: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")) && p.join(METRICS_FILE).is_file()
        })
        .collect();
    seeds.sort();
    if seeds.is_empty() {
        return Err(CliError::Runtime(anyhow!("{} holds no completed run", dir.display())));
    }
    seeds.iter().map(|p| read_summary(p)).collect()
}

/// Mean AP over the seen tasks after each training stage.
fn trajectory(runs: &[RunSummary]) -> Vec<f64> {
    let t = runs[0].matrix.t;
    (0..t)
        .map(|j| {
            let per_run: Vec<f64> = runs
                .iter()
                .filter_map(|r| {
                    let col: Option<Vec<f64>> = (0..=j).map(|i| r.matrix.get(i, j)).collect();
                    col.map(|c| c.iter().sum::<f64>() / c.len() as f64)
                })
                .collect();
            if per_run.is_empty() {
                f64::NAN
            } else {
                per_run.iter().sum::<f64>() / per_run.len() as f64
            }
        })
        .collect()
}

/// `compare`: Table-1 TSV plus the AP trajectory and FR bar charts.
pub fn cmd_compare(dirs: &[PathBuf], out: &Path) -> CliResult<String> {
    if dirs.len() < 2 {
        return usage("compare needs at least two run directories");
    }
    let groups: Vec<Vec<RunSummary>> = dirs.iter().map(|d| runs_in(d)).collect::<CliResult<_>>()?;
    let digest = &groups[0][0].dataset_digest;
    for (d, g) in dirs.iter().zip(&groups) {
        if let Some(r) = g.iter().find(|r| &r.dataset_digest != digest) {
            return Err(CliError::Runtime(anyhow!(
                "dataset mismatch: {} was trained on {}, {} on {}",
                dirs[0].display(),
                digest,
                d.display(),
                r.dataset_digest
            )));
        }
    }
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut bars = Vec::new();
    for g in &groups {
        let agg: Aggregate = aggregate(g)?;
        let row = Table1Row::from(&agg);
        let name = format!("{} ({})", row.method, row.backbone);
        series.push((name.clone(), trajectory(g)));
        bars.push((name, row.fr));
        rows.push(row);
    }
    let table = render_table1(&rows);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("table1.tsv"), &table)?;
    write_text(&out.join("ap_trajectory.svg"), &plot::ap_trajectory(&series))?;
    write_text(&out.join("fr_bars.svg"), &plot::fr_bars(&bars))?;
    Ok(table)
}

/// `report`: Table 2 and the performance matrix of one run.
pub fn cmd_report(run_dir: &Path, out: Option<&Path>) -> CliResult<String> {
    if !run_dir.join(METRICS_FILE).is_file() {
        return usage(format!("{} has no {METRICS_FILE}", run_dir.display()));
    }
    let summary = read_summary(run_dir)?;
    let report = render_report(&summary)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("table1.tsv"), &report.table1)?;
    write_text(&out.join("table2.tsv"), &report.table2)?;
    write_text(&out.join("matrix.tsv"), &report.matrix)?;
    Ok(format!("{}\n{}", report.table2, report.matrix))
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

fn eval_lines(label: &str, r: &colt_core::EvalResult) -> String {
    let per_class: Vec<String> = r
        .per_class_ap
        .iter()
        .map(|a| a.map_or("-".into(), |v| format!("{:.2}", 100.0 * v)))
        .collect();
    format!("{label}\t{:.2}\t{}\n", r.mean_ap_percent(), per_class.join("\t"))
}

fn eval_header(first: &str) -> String {
    format!("{first}\tmAP\t{}\n", CLASS_NAMES.join("\t"))
}

/// `eval` from a checkpoint: predicts every trained task's test split and
/// writes the records.
pub fn cmd_eval_checkpoint(checkpoint: &Path, data: &Path, out: &Path, iou: f64) -> CliResult<String> {
    if !checkpoint.is_file() {
        return usage(format!("checkpoint {} not found", checkpoint.display()));
    }
    if !data.join(colt_core::taskstream::MANIFEST_FILE).is_file() {
        return usage(format!("dataset {} has no manifest", data.display()));
    }
    let stream = load_dataset(data)?;
    let state = resume(checkpoint, &stream)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut text = eval_header("task");
    for &t in &state.completed_tasks {
        let samples = &stream.tasks[t].test;
        let head = state.detector.head_for_task(t)?;
        let mut task_preds = Vec::new();
        for chunk in samples.chunks(16) {
            let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let p = state.detector.predict_batch_with_head(&images, head)?;
            task_preds.extend(predictions_to_records(chunk, &p));
        }
        let task_gts = samples_to_records(samples);
        let r = evaluate_records(&task_preds, &task_gts, iou)?;
        text.push_str(&eval_lines(&format!("{} {}", t + 1, stream.tasks[t].spec.name), &r));
        preds.extend(task_preds);
        gts.extend(task_gts);
    }
    write_jsonl(&out.join(PREDICTIONS_FILE), &preds)?;
    write_jsonl(&out.join(GROUND_TRUTH_FILE), &gts)?;
    Ok(text)
}

/// `eval` from interchange files.
pub fn cmd_eval_records(predictions: &Path, ground_truth: &Path, iou: f64) -> CliResult<String> {
    for p in [predictions, ground_truth] {
        if !p.is_file() {
            return usage(format!("{} not found", p.display()));
        }
    }
    let preds: Vec<PredictionRecord> = read_jsonl(predictions)?;
    let gts: Vec<GroundTruthRecord> = read_jsonl(ground_truth)?;
    let r = evaluate_records(&preds, &gts, iou)?;
    Ok(format!("{}{}", eval_header("records"), eval_lines("all", &r)))
}
