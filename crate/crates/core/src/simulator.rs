//! Lockstep multi-worker engine.
//!
//! Every step runs three phases:
//!
//! - **A**: each worker draws a mini-batch from its shard and takes a local
//!   SGD step.
//! - **B**: barrier; the post-step θ of every worker is snapshotted.
//! - **C**: for each component whose period divides the step, each worker
//!   averages its snapshot with the snapshots of its chosen neighbors and
//!   folds the result back in (plain averaging or block-momentum filter).
//!
//! Phases A and C may fan workers out over a rayon pool. No phase reads
//! anything another worker writes in the same phase, and every reduction
//! runs in worker-id order, so results do not depend on the thread count.

use std::io::Write;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{DataShard, GradientOracle, ObjectiveConfig};
use crate::partition::{ComponentLayout, ParameterVector};
use crate::topology::{Purpose, RingTopology, RngStream, StreamId};
use crate::worker::{gossip_average, BmufParams, SyncRule, WorkerState};

/// Record every step up to this many steps; beyond it, only sync steps and
/// the final step are recorded.
pub const DENSE_RECORDING_LIMIT: u64 = 10_000;

const BYTES_PER_VALUE: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    GossipMa,
    GossipBmuf,
    LocalMa,
    LocalBmuf,
    SimpleMa,
    CentralBmufNbm,
    SingleSgd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::GossipMa => "gossip-ma",
            Algorithm::GossipBmuf => "gossip-bmuf",
            Algorithm::LocalMa => "local-ma",
            Algorithm::LocalBmuf => "local-bmuf",
            Algorithm::SimpleMa => "simple-ma",
            Algorithm::CentralBmufNbm => "central-bmuf-nbm",
            Algorithm::SingleSgd => "single-sgd",
        }
    }

    /// Sync rule for the periodic-averaging family, `None` otherwise.
    pub fn sync_rule(self) -> Option<SyncRule> {
        match self {
            Algorithm::GossipMa | Algorithm::LocalMa => Some(SyncRule::Ma),
            Algorithm::GossipBmuf | Algorithm::LocalBmuf | Algorithm::CentralBmufNbm => {
                Some(SyncRule::Bmuf)
            }
            Algorithm::SimpleMa | Algorithm::SingleSgd => None,
        }
    }
}

/// `α_t = initial · decay^⌊(t−1)/interval⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRate {
    pub initial: f64,
    pub decay: f64,
    pub interval: u64,
}

impl Default for LearningRate {
    fn default() -> Self {
        Self {
            initial: 0.05,
            decay: 1.0,
            interval: 1,
        }
    }
}

impl LearningRate {
    pub fn constant(alpha: f64) -> Self {
        Self {
            initial: alpha,
            ..Self::default()
        }
    }

    pub fn at(&self, t: u64) -> f64 {
        if self.decay == 1.0 {
            return self.initial;
        }
        let epochs = (t.saturating_sub(1) / self.interval) as i32;
        self.initial * self.decay.powi(epochs)
    }

    pub fn is_constant(&self) -> bool {
        self.decay == 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: Option<String>,
    pub algorithm: Algorithm,
    pub workers: usize,
    /// Per-side ring degree `p`; defaults to `max(1, log2(n) − 1)`.
    pub symmetric_degree: Option<usize>,
    /// Neighbors averaged per sync `q`. Forced to the full degree for
    /// local-* and to `n − 1` for central-BMUF-NBM.
    pub fan_in: Option<usize>,
    /// Explicit component layout. When absent the dimension is split evenly
    /// into one component per entry of `sync_periods`.
    pub layout: Option<ComponentLayout>,
    pub sync_periods: Option<Vec<u64>>,
    pub bmuf: BmufParams,
    pub learning_rate: LearningRate,
    pub steps: u64,
    pub seed: u64,
    pub trials: usize,
    pub objective: ObjectiveConfig,
    /// Shared starting point θ₀; zeros when absent.
    pub initial: Option<Vec<f64>>,
    /// Standard deviation of an independent per-worker perturbation of θ₀.
    pub init_spread: f64,
    /// single-SGD takes `n` mini-batches per step (one per simulated worker)
    /// when true, one when false.
    pub matched_sgd_batches: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: None,
            algorithm: Algorithm::GossipBmuf,
            workers: 4,
            symmetric_degree: None,
            fan_in: None,
            layout: None,
            sync_periods: None,
            bmuf: BmufParams::default(),
            learning_rate: LearningRate::default(),
            steps: 1000,
            seed: 0,
            trials: 1,
            objective: ObjectiveConfig::default(),
            initial: None,
            init_spread: 0.0,
            matched_sgd_batches: true,
        }
    }
}

impl RunConfig {
    /// Validates the config and fills every implicit field, so the result
    /// describes the run completely.
    pub fn resolved(&self) -> Result<RunConfig> {
        let n = self.workers;
        if n == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        let lr = self.learning_rate;
        if !(lr.initial >= 0.0 && lr.initial.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", lr.initial)));
        }
        if !(lr.decay > 0.0 && lr.decay.is_finite()) || lr.interval == 0 {
            return Err(Error::config("learning-rate decay must be > 0 with interval >= 1"));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return Err(Error::config("init_spread must be >= 0"));
        }
        self.bmuf.validate()?;

        let objective = self.objective.resolved()?;
        let dim = objective.dim();
        if dim == 0 {
            return Err(Error::config("objective dimension must be >= 1"));
        }
        if let Some(init) = &self.initial {
            if init.len() != dim {
                return Err(Error::config(format!(
                    "initial point has {} entries, objective dimension is {dim}",
                    init.len()
                )));
            }
        }

        let layout = match (&self.layout, &self.sync_periods) {
            (Some(layout), _) => layout.clone(),
            (None, Some(periods)) => ComponentLayout::even_split(dim, periods)?,
            (None, None) => ComponentLayout::even_split(dim, &[8])?,
        };
        if layout.dim() != dim {
            return Err(Error::config(format!(
                "layout covers {} entries, objective dimension is {dim}",
                layout.dim()
            )));
        }

        let p = self
            .symmetric_degree
            .unwrap_or_else(|| (n.ilog2() as usize).saturating_sub(1).max(1));
        let degree = (2 * p).min(n - 1);
        let fan_in = match self.algorithm {
            Algorithm::GossipMa | Algorithm::GossipBmuf => {
                let q = self.fan_in.unwrap_or_else(|| p.min(2).min(degree));
                if q > degree {
                    return Err(Error::config(format!(
                        "gossip fan-in q = {q} violates q <= min(2p, n-1) = {degree} (p = {p}, n = {n})"
                    )));
                }
                Some(q)
            }
            Algorithm::LocalMa | Algorithm::LocalBmuf => {
                if let Some(q) = self.fan_in {
                    if q != degree {
                        return Err(Error::config(format!(
                            "{} averages all neighbors: q must equal min(2p, n-1) = {degree}, got {q}",
                            self.algorithm.name()
                        )));
                    }
                }
                Some(degree)
            }
            Algorithm::CentralBmufNbm => {
                if let Some(q) = self.fan_in {
                    if q != n - 1 {
                        return Err(Error::config(format!(
                            "central-bmuf-nbm averages all n-1 = {} peers, got q = {q}",
                            n - 1
                        )));
                    }
                }
                Some(n - 1)
            }
            Algorithm::SimpleMa | Algorithm::SingleSgd => None,
        };

        Ok(RunConfig {
            label: Some(self.label.clone().unwrap_or_else(|| self.algorithm.name().to_string())),
            symmetric_degree: Some(p),
            fan_in,
            layout: Some(layout),
            sync_periods: None,
            objective,
            ..self.clone()
        })
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.algorithm.name())
    }

    /// Seed used by trial `trial`; trial 0 uses the configured seed.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        if trial == 0 {
            return self.seed;
        }
        RngStream::new(StreamId::new(self.seed, 0, 0, trial as u64), Purpose::Trial).next_u64()
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.clone()
        }
    }

    fn resolved_layout(&self) -> &ComponentLayout {
        self.layout.as_ref().expect("resolved config has a layout")
    }

    fn resolved_fan_in(&self) -> usize {
        self.fan_in.unwrap_or(0)
    }

    fn topology(&self) -> Result<RingTopology> {
        RingTopology::new(self.workers, self.symmetric_degree.unwrap_or(1))
    }
}

/// Bytes received across all workers at step `t`.
///
/// Gossip and local variants pull `q` component copies per worker per due
/// component; central BMUF is modelled as an all-gather (`n − 1` copies per
/// worker); Simple MA all-gathers the full vector every step.
pub fn comm_bytes(config: &RunConfig, t: u64) -> Result<u64> {
    let config = config.resolved()?;
    Ok(comm_bytes_resolved(&config, t))
}

fn comm_bytes_resolved(config: &RunConfig, t: u64) -> u64 {
    let n = config.workers as u64;
    let layout = config.resolved_layout();
    let per_value = match config.algorithm {
        Algorithm::SingleSgd => return 0,
        Algorithm::SimpleMa => return n * (n - 1) * layout.dim() as u64 * BYTES_PER_VALUE,
        Algorithm::CentralBmufNbm => n * (n - 1),
        _ => n * config.resolved_fan_in() as u64,
    };
    layout
        .due_components(t)
        .into_iter()
        .map(|i| per_value * layout.components()[i].length as u64 * BYTES_PER_VALUE)
        .sum()
}

/// Elementwise mean of the workers' θ, summed in worker-id order.
pub fn final_model(states: &[WorkerState]) -> Result<ParameterVector> {
    let thetas: Vec<&[f64]> = states.iter().map(|s| &s.theta[..]).collect();
    mean_vector(&thetas)
}

fn mean_vector(vs: &[&[f64]]) -> Result<ParameterVector> {
    let (first, rest) = vs.split_first().ok_or_else(|| Error::arg("no workers to average"))?;
    let mut sum = first.to_vec();
    for v in rest {
        if v.len() != sum.len() {
            return Err(Error::arg("workers disagree on dimension"));
        }
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let n = vs.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(sum.into())
}

/// Mean over coordinates of the across-worker (population) variance.
pub fn consensus_variance(thetas: &[&[f64]]) -> f64 {
    let Ok(mean) = mean_vector(thetas) else {
        return 0.0;
    };
    let n = thetas.len() as f64;
    let d = mean.len();
    let total: f64 = (0..d)
        .map(|j| thetas.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n)
        .sum();
    total / d as f64
}

/// Per-step time series of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<u64>,
    /// Mean over workers of the noiseless loss at each worker's θ.
    pub mean_loss: Vec<f64>,
    /// Loss of the worker-averaged model.
    pub avg_model_loss: Vec<f64>,
    /// `Σ_k |θ_k − θ*|²`; NaN when the optimum is unknown.
    pub sq_dist: Vec<f64>,
    pub consensus_var: Vec<f64>,
    pub cum_bytes: Vec<u64>,
    /// `Σ_k |θ₀_k − θ*|²` before the first step.
    pub initial_sq_dist: f64,
    pub final_model: Vec<f64>,
}

pub const CSV_HEADER: [&str; 5] = ["step", "mean_loss", "sq_dist", "consensus_var", "cum_bytes"];

impl RunMetrics {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn record(&mut self, step: u64, thetas: &[&[f64]], oracle: &dyn GradientOracle, cum_bytes: u64) {
        let n = thetas.len() as f64;
        let loss = thetas.iter().map(|t| oracle.loss(t)).sum::<f64>() / n;
        let avg = mean_vector(thetas).expect("at least one worker");
        let sq = match oracle.optimum() {
            Some(star) => sq_dist_sum(thetas, star),
            None => f64::NAN,
        };
        self.steps.push(step);
        self.mean_loss.push(loss);
        self.avg_model_loss.push(oracle.loss(&avg));
        self.sq_dist.push(sq);
        self.consensus_var.push(consensus_variance(thetas));
        self.cum_bytes.push(cum_bytes);
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.mean_loss.last().copied()
    }

    pub fn final_avg_model_loss(&self) -> Option<f64> {
        self.avg_model_loss.last().copied()
    }

    pub fn final_sq_dist(&self) -> Option<f64> {
        self.sq_dist.last().copied()
    }

    /// True when every series matches bit for bit.
    pub fn bitwise_eq(&self, other: &RunMetrics) -> bool {
        fn bits(v: &[f64]) -> Vec<u64> {
            v.iter().map(|x| x.to_bits()).collect()
        }
        self.steps == other.steps
            && self.cum_bytes == other.cum_bytes
            && bits(&self.mean_loss) == bits(&other.mean_loss)
            && bits(&self.avg_model_loss) == bits(&other.avg_model_loss)
            && bits(&self.sq_dist) == bits(&other.sq_dist)
            && bits(&self.consensus_var) == bits(&other.consensus_var)
            && bits(&self.final_model) == bits(&other.final_model)
            && self.initial_sq_dist.to_bits() == other.initial_sq_dist.to_bits()
    }

    /// Elementwise mean of independent trials of the same config, summed in
    /// trial order.
    pub fn trial_mean(trials: &[RunMetrics]) -> Result<RunMetrics> {
        let first = trials.first().ok_or_else(|| Error::arg("no trials to aggregate"))?;
        if trials.iter().any(|m| m.steps != first.steps) {
            return Err(Error::arg("trials recorded different steps"));
        }
        let k = trials.len() as f64;
        let mean_series = |get: fn(&RunMetrics) -> &Vec<f64>| -> Vec<f64> {
            let mut acc = vec![0.0; get(first).len()];
            for m in trials {
                for (a, x) in acc.iter_mut().zip(get(m)) {
                    *a += x;
                }
            }
            acc.into_iter().map(|a| a / k).collect()
        };
        Ok(RunMetrics {
            steps: first.steps.clone(),
            mean_loss: mean_series(|m| &m.mean_loss),
            avg_model_loss: mean_series(|m| &m.avg_model_loss),
            sq_dist: mean_series(|m| &m.sq_dist),
            consensus_var: mean_series(|m| &m.consensus_var),
            cum_bytes: first.cum_bytes.clone(),
            initial_sq_dist: trials.iter().map(|m| m.initial_sq_dist).sum::<f64>() / k,
            final_model: mean_series(|m| &m.final_model),
        })
    }

    /// CSV with header `step,mean_loss,sq_dist,consensus_var,cum_bytes`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for i in 0..self.steps.len() {
            w.write_record([
                self.steps[i].to_string(),
                self.mean_loss[i].to_string(),
                self.sq_dist[i].to_string(),
                self.consensus_var[i].to_string(),
                self.cum_bytes[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn sq_dist_sum(thetas: &[&[f64]], star: &[f64]) -> f64 {
    thetas
        .iter()
        .map(|t| t.iter().zip(star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

fn should_record(t: u64, total: u64, synced: bool) -> bool {
    total <= DENSE_RECORDING_LIMIT || synced || t == total
}

/// Starting points for every worker: θ₀, optionally perturbed per worker.
fn initial_states(config: &RunConfig, dim: usize) -> Vec<WorkerState> {
    let base = config.initial.clone().unwrap_or_else(|| vec![0.0; dim]);
    (0..config.workers)
        .map(|k| {
            let mut theta = base.clone();
            if config.init_spread > 0.0 {
                let mut rng = RngStream::new(StreamId::new(config.seed, k as u64, 0, 0), Purpose::Init);
                for x in &mut theta {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += config.init_spread * z;
                }
            }
            WorkerState::new(k, theta.into())
        })
        .collect()
}

/// Runs `f` on every worker, in parallel when asked, and returns the first
/// error in worker-id order.
fn for_each_worker<F>(workers: &mut [WorkerState], parallel: bool, f: F) -> Result<()>
where
    F: Fn(&mut WorkerState) -> Result<()> + Sync + Send,
{
    let results: Vec<Result<()>> = if parallel {
        workers.par_iter_mut().map(&f).collect()
    } else {
        workers.iter_mut().map(&f).collect()
    };
    results.into_iter().collect()
}

/// Engine for the periodic-averaging family: gossip-MA, gossip-BMUF,
/// local-MA, local-BMUF and central BMUF-NBM.
pub struct GossipSim<'a> {
    config: RunConfig,
    oracle: &'a dyn GradientOracle,
    topology: RingTopology,
    rule: SyncRule,
    workers: Vec<WorkerState>,
    shards: Vec<DataShard>,
    t: u64,
    cum_bytes: u64,
    parallel: bool,
}

impl<'a> GossipSim<'a> {
    pub fn new(config: &RunConfig, oracle: &'a dyn GradientOracle) -> Result<Self> {
        let config = config.resolved()?;
        let rule = config.algorithm.sync_rule().filter(|_| config.algorithm != Algorithm::SimpleMa);
        let Some(rule) = rule else {
            return Err(Error::config(format!(
                "{} is not a periodic-averaging algorithm",
                config.algorithm.name()
            )));
        };
        if oracle.dim() != config.resolved_layout().dim() {
            return Err(Error::config("oracle dimension does not match the layout"));
        }
        let topology = config.topology()?;
        let workers = initial_states(&config, oracle.dim());
        let shards = (0..config.workers)
            .map(|k| DataShard::new(config.seed, k, config.workers, oracle.data_len()))
            .collect();
        Ok(Self {
            config,
            oracle,
            topology,
            rule,
            workers,
            shards,
            t: 0,
            cum_bytes: 0,
            parallel: false,
        })
    }

    /// Fan phases A and C out over the current rayon pool.
    pub fn parallel(mut self, yes: bool) -> Self {
        self.parallel = yes;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn cum_bytes(&self) -> u64 {
        self.cum_bytes
    }

    fn thetas(&self) -> Vec<&[f64]> {
        self.workers.iter().map(|w| &w.theta[..]).collect()
    }

    /// Phase A of the next step: advance the step counter and take one local
    /// SGD step on every worker.
    pub fn local_phase(&mut self) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let alpha = self.config.learning_rate.at(t);
        let oracle = self.oracle;
        let shards = &self.shards;
        let dim = oracle.dim();
        for_each_worker(&mut self.workers, self.parallel, |w| {
            let mut g = vec![0.0; dim];
            oracle.stochastic_gradient(&w.theta, &shards[w.id()], t, &mut g);
            w.local_step(&g, alpha)
        })
        .map_err(|e| e.at_step(t))
    }

    /// Phases B and C of the current step. Returns the components that synced.
    pub fn sync_phase(&mut self) -> Result<Vec<usize>> {
        let t = self.t;
        let layout = self.config.resolved_layout().clone();
        let due = layout.due_components(t);
        if due.is_empty() {
            return Ok(due);
        }
        let snapshot: Vec<ParameterVector> = self.workers.iter().map(|w| w.theta.clone()).collect();
        let params = self.config.bmuf;
        let rule = self.rule;
        let seed = self.config.seed;
        let q = self.config.resolved_fan_in();
        let topology = self.topology;
        let central = self.config.algorithm == Algorithm::CentralBmufNbm;

        for &i in &due {
            let period = layout.components()[i].sync_period;
            let sync_index = t / period;
            let range = layout.components()[i].range();
            // Central BMUF: one global average, identical on every worker.
            let global = if central {
                let views: Vec<&[f64]> = snapshot.iter().map(|s| &s[range.clone()]).collect();
                Some(mean_vector(&views)?)
            } else {
                None
            };
            for_each_worker(&mut self.workers, self.parallel, |w| {
                let avg = match &global {
                    Some(g) => g.to_vec(),
                    None => {
                        let mut stream = w.neighbor_stream(seed, i, sync_index);
                        let picked = topology.sample_neighbors(w.id(), q, &mut stream)?;
                        let nbrs: Vec<&[f64]> =
                            picked.iter().map(|&j| &snapshot[j][range.clone()]).collect();
                        gossip_average(&snapshot[w.id()][range.clone()], &nbrs)?
                    }
                };
                w.apply_sync(&layout, i, &avg, rule, &params)
            })
            .map_err(|e| e.at_step(t))?;
        }
        self.cum_bytes += comm_bytes_resolved(&self.config, t);
        Ok(due)
    }

    /// One full step; returns the components that synced.
    pub fn step(&mut self) -> Result<Vec<usize>> {
        self.local_phase()?;
        self.sync_phase()
    }

    pub fn final_model(&self) -> ParameterVector {
        final_model(&self.workers).expect("at least one worker")
    }

    pub fn run(mut self) -> Result<RunMetrics> {
        let total = self.config.steps;
        let mut metrics = RunMetrics {
            initial_sq_dist: self.initial_sq_dist(),
            ..RunMetrics::default()
        };
        while self.t < total {
            let synced = self.step()?;
            if should_record(self.t, total, !synced.is_empty()) {
                metrics.record(self.t, &self.thetas(), self.oracle, self.cum_bytes);
            }
        }
        metrics.final_model = self.final_model().into_inner();
        Ok(metrics)
    }

    fn initial_sq_dist(&self) -> f64 {
        self.oracle
            .optimum()
            .map_or(f64::NAN, |star| sq_dist_sum(&self.thetas(), star))
    }
}

/// Periodic-averaging family (gossip/local MA and BMUF, central BMUF-NBM).
pub fn run_gossip(config: &RunConfig, oracle: &dyn GradientOracle) -> Result<RunMetrics> {
    GossipSim::new(config, oracle)?.run()
}

/// Averaging every step with gradients taken at the average:
/// `θ̄_t = mean_j θ_t^j`, `θ_{t+1}^i = θ̄_t − α_t ∇f_i(θ̄_t; X_{t,i})`.
pub fn run_simple_ma(config: &RunConfig, oracle: &dyn GradientOracle) -> Result<RunMetrics> {
    let config = config.resolved()?;
    if config.algorithm != Algorithm::SimpleMa {
        return Err(Error::config(format!(
            "run_simple_ma called with {}",
            config.algorithm.name()
        )));
    }
    let n = config.workers;
    let dim = oracle.dim();
    let mut workers = initial_states(&config, dim);
    let shards: Vec<DataShard> = (0..n)
        .map(|k| DataShard::new(config.seed, k, n, oracle.data_len()))
        .collect();
    let total = config.steps;
    let per_step_bytes = comm_bytes_resolved(&config, 1);
    let mut metrics = RunMetrics::default();
    {
        let thetas: Vec<&[f64]> = workers.iter().map(|w| &w.theta[..]).collect();
        metrics.initial_sq_dist = oracle.optimum().map_or(f64::NAN, |s| sq_dist_sum(&thetas, s));
    }
    let mut g = vec![0.0; dim];
    for t in 1..=total {
        let alpha = config.learning_rate.at(t);
        let avg = final_model(&workers)?;
        for w in &mut workers {
            oracle.stochastic_gradient(&avg, &shards[w.id()], t, &mut g);
            w.theta.copy_from_slice(&avg);
            w.local_step(&g, alpha).map_err(|e| e.at_step(t))?;
        }
        if should_record(t, total, true) {
            let thetas: Vec<&[f64]> = workers.iter().map(|w| &w.theta[..]).collect();
            metrics.record(t, &thetas, oracle, per_step_bytes * t);
        }
    }
    metrics.final_model = final_model(&workers)?.into_inner();
    Ok(metrics)
}

/// Single-worker SGD baseline on the unsharded data. With matched batches
/// it takes `n` updates per recorded step, so it sees as many mini-batches
/// as the `n`-worker runs it is compared against.
pub fn run_single_sgd(config: &RunConfig, oracle: &dyn GradientOracle) -> Result<RunMetrics> {
    let config = config.resolved()?;
    if config.algorithm != Algorithm::SingleSgd {
        return Err(Error::config(format!(
            "run_single_sgd called with {}",
            config.algorithm.name()
        )));
    }
    let per_round = if config.matched_sgd_batches { config.workers as u64 } else { 1 };
    let dim = oracle.dim();
    let base = config.initial.clone().unwrap_or_else(|| vec![0.0; dim]);
    let mut w = WorkerState::new(0, base.into());
    let shard = DataShard::unsharded(config.seed, oracle.data_len());
    let mut metrics = RunMetrics {
        initial_sq_dist: oracle.optimum().map_or(f64::NAN, |s| sq_dist_sum(&[&w.theta[..]], s)),
        ..RunMetrics::default()
    };
    let mut g = vec![0.0; dim];
    let mut batch = 0u64;
    for t in 1..=config.steps {
        let alpha = config.learning_rate.at(t);
        for _ in 0..per_round {
            batch += 1;
            oracle.stochastic_gradient(&w.theta, &shard, batch, &mut g);
            w.local_step(&g, alpha).map_err(|e| e.at_step(t))?;
        }
        if should_record(t, config.steps, false) {
            metrics.record(t, &[&w.theta[..]], oracle, 0);
        }
    }
    metrics.final_model = w.theta.into_inner();
    Ok(metrics)
}

/// Dispatches on the configured algorithm.
pub fn run(config: &RunConfig, oracle: &dyn GradientOracle, parallel: bool) -> Result<RunMetrics> {
    match config.algorithm {
        Algorithm::SimpleMa => run_simple_ma(config, oracle),
        Algorithm::SingleSgd => run_single_sgd(config, oracle),
        _ => GossipSim::new(config, oracle)?.parallel(parallel).run(),
    }
}

/// Runs every trial of `config` (trial `k` seeded by [`RunConfig::trial_seed`]),
/// trials spread over the current rayon pool. Output is in trial order.
pub fn run_trials(config: &RunConfig, oracle: &dyn GradientOracle) -> Result<Vec<RunMetrics>> {
    let config = config.resolved()?;
    if config.trials == 1 {
        return Ok(vec![run(&config, oracle, true)?]);
    }
    (0..config.trials)
        .into_par_iter()
        .map(|k| run(&config.with_seed(config.trial_seed(k)), oracle, false))
        .collect()
}
