//! Experiment files and the `run`, `compare` and `bound-check` commands.
//!
//! An experiment file is JSON: either a single run config, or
//!
//! ```json
//! { "name": "...", "output_dir": "out", "runs": [ {...}, {...} ],
//!   "groups": [ { "name": "ma-vs-bmuf", "labels": ["MA", "gossip-bmuf"] } ] }
//! ```
//!
//! Every run writes `<label>.csv` (trial-mean series) and
//! `<label>.summary.json`, whose `config` field is the fully resolved run
//! config and can be fed back in as an experiment file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{GradientOracle, ObjectiveConfig};
use crate::simulator::{run_trials, Algorithm, RunConfig, RunMetrics};
use crate::theory::{check_bound, rounding_floor, BoundParams, BoundReport, EXCURSION_TOLERANCE, MIN_TRIALS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonGroup {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: Option<PathBuf>,
    /// Overrides `trials` of every run when set.
    pub trials: Option<usize>,
    pub runs: Vec<RunConfig>,
    pub groups: Vec<ComparisonGroup>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: None,
            trials: None,
            runs: Vec::new(),
            groups: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn single(run: RunConfig) -> Self {
        Self {
            runs: vec![run],
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("malformed spec: {e}")))?;
        let spec = if value.get("runs").is_some() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value::<RunConfig>(value).map(Self::single)
        };
        spec.map_err(|e| Error::config(format!("malformed spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct CommandOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    /// Worker threads; the rayon default when absent.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub final_loss: f64,
    pub final_avg_model_loss: f64,
    /// Standard error of the final averaged-model loss across trials.
    pub final_avg_model_loss_stderr: f64,
    pub final_sq_dist: f64,
    pub total_bytes: u64,
    pub wall_time_secs: f64,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub mean: RunMetrics,
    pub trials: Vec<RunMetrics>,
    pub csv_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub algorithm: Algorithm,
    pub workers: usize,
    pub trials: usize,
    pub final_loss: f64,
    pub final_avg_model_loss: f64,
    pub final_avg_model_loss_stderr: f64,
    pub final_sq_dist: f64,
    pub total_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{}\n{:<24} {:>18} {:>8} {:>7} {:>14} {:>14} {:>12} {:>14} {:>14}\n",
            self.name, "label", "algorithm", "workers", "trials", "final_loss", "avg_model_loss",
            "stderr", "sq_dist", "bytes"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>18} {:>8} {:>7} {:>14.6e} {:>14.6e} {:>12.3e} {:>14.6e} {:>14}\n",
                r.label,
                r.algorithm.name(),
                r.workers,
                r.trials,
                r.final_loss,
                r.final_avg_model_loss,
                r.final_avg_model_loss_stderr,
                r.final_sq_dist,
                r.total_bytes
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct BoundCheckOutput {
    pub label: String,
    pub report: BoundReport,
}

impl BoundCheckOutput {
    pub fn passed(&self) -> bool {
        self.report.pass_fraction >= 1.0 - EXCURSION_TOLERANCE
    }
}

/// File-name-safe form of a run label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

struct Prepared {
    out_dir: PathBuf,
    runs: Vec<RunConfig>,
    groups: Vec<ComparisonGroup>,
    threads: Option<usize>,
}

fn prepare(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<Prepared> {
    if spec.runs.is_empty() {
        return Err(Error::config("spec has no runs"));
    }
    let mut runs = Vec::with_capacity(spec.runs.len());
    let mut labels = BTreeSet::new();
    for run in &spec.runs {
        let mut run = run.clone();
        if let Some(t) = opts.trials.or(spec.trials) {
            run.trials = t;
        }
        if let Some(seed) = opts.seed {
            run.seed = seed;
        }
        let run = run.resolved()?;
        if !labels.insert(file_stem(run.label())) {
            return Err(Error::config(format!("duplicate run label '{}'", run.label())));
        }
        runs.push(run);
    }
    for g in &spec.groups {
        for l in &g.labels {
            if !runs.iter().any(|r| r.label() == l) {
                return Err(Error::config(format!("group '{}' names unknown run '{l}'", g.name)));
            }
        }
    }
    if opts.threads == Some(0) {
        return Err(Error::config("--threads must be >= 1"));
    }
    let out_dir = opts
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let groups = if spec.groups.is_empty() {
        vec![ComparisonGroup {
            name: spec.name.clone(),
            labels: runs.iter().map(|r| r.label().to_string()).collect(),
        }]
    } else {
        spec.groups.clone()
    };
    Ok(Prepared {
        out_dir,
        runs,
        groups,
        threads: opts.threads,
    })
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?
            .install(f),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn execute(run: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    let start = Instant::now();
    let oracle = run.objective.build()?;
    let trials = run_trials(run, &oracle)?;
    let mean = RunMetrics::trial_mean(&trials)?;
    let finals: Vec<f64> = trials.iter().filter_map(|m| m.final_avg_model_loss()).collect();
    let k = finals.len() as f64;
    let avg = finals.iter().sum::<f64>() / k;
    let stderr = if finals.len() > 1 {
        (finals.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        0.0
    };
    let stem = file_stem(run.label());
    let csv_path = out_dir.join(format!("{stem}.csv"));
    mean.write_csv(fs::File::create(&csv_path)?)?;
    let summary = RunSummary {
        label: run.label().to_string(),
        algorithm: run.algorithm,
        trials: trials.len(),
        final_loss: mean.final_loss().unwrap_or(f64::NAN),
        final_avg_model_loss: mean.final_avg_model_loss().unwrap_or(f64::NAN),
        final_avg_model_loss_stderr: stderr,
        final_sq_dist: mean.final_sq_dist().unwrap_or(f64::NAN),
        total_bytes: mean.cum_bytes.last().copied().unwrap_or(0),
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: run.clone(),
    };
    write_json(&out_dir.join(format!("{stem}.summary.json")), &summary)?;
    Ok(RunOutput {
        summary,
        mean,
        trials,
        csv_path,
    })
}

/// Executes every run; writes one CSV and one summary per run.
pub fn cmd_run(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<Vec<RunOutput>> {
    let prep = prepare(spec, opts)?;
    fs::create_dir_all(&prep.out_dir)?;
    with_pool(prep.threads, || {
        prep.runs.iter().map(|r| execute(r, &prep.out_dir)).collect()
    })
}

/// [`cmd_run`], then one comparison table per group
/// (`<group>.comparison.{csv,json,txt}`).
pub fn cmd_compare(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<(Vec<RunOutput>, Vec<Comparison>)> {
    let prep = prepare(spec, opts)?;
    let outputs = cmd_run(spec, opts)?;
    let mut comparisons = Vec::new();
    for group in &prep.groups {
        let rows: Vec<ComparisonRow> = group
            .labels
            .iter()
            .filter_map(|l| outputs.iter().find(|o| &o.summary.label == l))
            .map(|o| {
                let s = &o.summary;
                ComparisonRow {
                    label: s.label.clone(),
                    algorithm: s.algorithm,
                    workers: s.config.workers,
                    trials: s.trials,
                    final_loss: s.final_loss,
                    final_avg_model_loss: s.final_avg_model_loss,
                    final_avg_model_loss_stderr: s.final_avg_model_loss_stderr,
                    final_sq_dist: s.final_sq_dist,
                    total_bytes: s.total_bytes,
                }
            })
            .collect();
        let cmp = Comparison {
            name: group.name.clone(),
            rows,
        };
        let stem = file_stem(&cmp.name);
        let mut w = csv::Writer::from_path(prep.out_dir.join(format!("{stem}.comparison.csv")))?;
        for row in &cmp.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        write_json(&prep.out_dir.join(format!("{stem}.comparison.json")), &cmp)?;
        fs::write(prep.out_dir.join(format!("{stem}.comparison.txt")), cmp.to_table())?;
        comparisons.push(cmp);
    }
    Ok((outputs, comparisons))
}

/// Bound parameters for a Simple-MA quadratic run, validated.
pub fn bound_params_for(run: &RunConfig, initial_sq_dist: f64) -> Result<BoundParams> {
    let run = run.resolved()?;
    if run.algorithm != Algorithm::SimpleMa {
        return Err(Error::config(format!(
            "bound-check needs simple-ma, run '{}' is {}",
            run.label(),
            run.algorithm.name()
        )));
    }
    let ObjectiveConfig::Quadratic(q) = &run.objective else {
        return Err(Error::config("bound-check needs the quadratic objective"));
    };
    if !run.learning_rate.is_constant() {
        return Err(Error::config("bound-check needs a constant learning rate"));
    }
    if run.trials < MIN_TRIALS {
        return Err(Error::config(format!(
            "bound-check needs at least {MIN_TRIALS} trials, run '{}' has {}",
            run.label(),
            run.trials
        )));
    }
    let oracle = run.objective.build()?;
    let optimum = oracle
        .optimum()
        .ok_or_else(|| Error::config("bound-check needs an objective with a known optimum"))?;
    let params = BoundParams {
        mu: q.mu,
        lipschitz: q.lipschitz,
        alpha: run.learning_rate.initial,
        workers: run.workers,
        sigma2: q.sigma2,
        init_dist: initial_sq_dist,
        rounding_floor: rounding_floor(run.workers, optimum),
    };
    params.validate().map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidConfig(m),
        other => other,
    })?;
    Ok(params)
}

/// Runs every (Simple MA) run's trials and checks them against the bound.
/// Writes `<label>.bound.json` and `<label>.bound.txt` per run.
pub fn cmd_bound_check(spec: &ExperimentSpec, opts: &CommandOptions) -> Result<Vec<BoundCheckOutput>> {
    let prep = prepare(spec, opts)?;
    // Validate everything before spending time on trials.
    for run in &prep.runs {
        bound_params_for(run, 0.0)?;
    }
    fs::create_dir_all(&prep.out_dir)?;
    with_pool(prep.threads, || {
        prep.runs
            .iter()
            .map(|run| {
                let out = execute(run, &prep.out_dir)?;
                let params = bound_params_for(run, out.mean.initial_sq_dist)?;
                let report = check_bound(&out.trials, &params)?;
                let stem = file_stem(run.label());
                write_json(&prep.out_dir.join(format!("{stem}.bound.json")), &report)?;
                fs::write(prep.out_dir.join(format!("{stem}.bound.txt")), report.to_table(20))?;
                Ok(BoundCheckOutput {
                    label: run.label().to_string(),
                    report,
                })
            })
            .collect()
    })
}

/// Process exit status for an error: 2 for bad input, 3 for divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::InsufficientTrials { .. } | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}
