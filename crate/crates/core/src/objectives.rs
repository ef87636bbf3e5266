//! Gradient oracles with known curvature constants, and the per-worker data
//! shards they draw mini-batches from.
//!
//! The quadratic oracle is `f(θ) = ½(θ−θ*)ᵀA(θ−θ*)` with `A = Q diag(λ) Qᵀ`
//! for a seeded random rotation `Q`. Its stochastic gradient adds isotropic
//! Gaussian noise whose total variance `E[ξᵀξ]` is exactly `sigma2`.
//!
//! The logistic oracle is ridge-regularised logistic regression on a
//! synthetic dataset; its reference optimum is solved once at construction.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{Purpose, RngStream, StreamId};

/// Curvature and noise constants of an objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConstants {
    /// Strong-convexity constant.
    pub mu: f64,
    /// Lipschitz constant of the gradient.
    pub lipschitz: f64,
    /// Bound on `E[ξᵀξ]`, when the noise is additive and known.
    pub sigma2: Option<f64>,
}

pub trait GradientOracle: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of examples in the underlying dataset; 0 when the oracle has
    /// no dataset and its randomness is pure additive noise.
    fn data_len(&self) -> usize;

    /// Noiseless objective value.
    fn loss(&self, theta: &[f64]) -> f64;

    /// Noiseless full gradient.
    fn gradient(&self, theta: &[f64], out: &mut [f64]);

    /// Mini-batch gradient for `shard` at local step `step`.
    fn stochastic_gradient(&self, theta: &[f64], shard: &DataShard, step: u64, out: &mut [f64]);

    fn optimum(&self) -> Option<&[f64]>;

    fn constants(&self) -> OracleConstants;
}

/// A worker's split of the data, plus the key of its mini-batch streams.
///
/// Shard `k` of `n` covers a contiguous block of example indices; block sizes
/// differ by at most one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataShard {
    pub worker_id: usize,
    pub seed: u64,
    pub examples: Range<usize>,
}

impl DataShard {
    pub fn new(seed: u64, worker_id: usize, workers: usize, data_len: usize) -> Self {
        let (base, extra) = (data_len / workers, data_len % workers);
        let start = worker_id * base + worker_id.min(extra);
        let len = base + usize::from(worker_id < extra);
        Self {
            worker_id,
            seed,
            examples: start..start + len,
        }
    }

    /// The whole dataset as one shard, keyed as worker 0.
    pub fn unsharded(seed: u64, data_len: usize) -> Self {
        Self::new(seed, 0, 1, data_len)
    }

    pub fn batch_stream(&self, step: u64) -> RngStream {
        RngStream::new(
            StreamId::new(self.seed, self.worker_id as u64, 0, step),
            Purpose::Batch,
        )
    }
}

#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    dim: usize,
    eigenvalues: Vec<f64>,
    /// Row-major `dim × dim`.
    hessian: Vec<f64>,
    theta_star: Vec<f64>,
    sigma2: f64,
}

impl QuadraticOracle {
    /// Builds `A = Q diag(eigenvalues) Qᵀ` with `Q` drawn from `problem_seed`,
    /// and a standard-normal optimum from the same seed.
    pub fn new(eigenvalues: Vec<f64>, sigma2: f64, problem_seed: u64) -> Result<Self> {
        let dim = eigenvalues.len();
        if dim == 0 {
            return Err(Error::config("quadratic needs at least one eigenvalue"));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::config("quadratic eigenvalues must be positive and finite"));
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::config(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        let mut rng = RngStream::new(StreamId::new(problem_seed, 0, 0, 0), Purpose::Problem);
        let gauss = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        let q = gauss.qr().q();
        let mut hessian = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in r..dim {
                let v: f64 = (0..dim).map(|m| q[(r, m)] * eigenvalues[m] * q[(c, m)]).sum();
                hessian[r * dim + c] = v;
                hessian[c * dim + r] = v;
            }
        }
        let mut rng = RngStream::new(StreamId::new(problem_seed, 0, 0, 1), Purpose::Problem);
        let theta_star = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            dim,
            eigenvalues,
            hessian,
            theta_star,
            sigma2,
        })
    }

    /// `dim` eigenvalues spaced geometrically from `mu` to `lipschitz`.
    pub fn log_spaced(dim: usize, mu: f64, lipschitz: f64) -> Vec<f64> {
        match dim {
            0 => vec![],
            1 => vec![mu],
            _ => (0..dim)
                .map(|j| {
                    if j == dim - 1 {
                        lipschitz
                    } else {
                        mu * (lipschitz / mu).powf(j as f64 / (dim - 1) as f64)
                    }
                })
                .collect(),
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    fn apply_hessian(&self, theta: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.hessian[r * d..(r + 1) * d];
            *o = row
                .iter()
                .zip(theta.iter().zip(&self.theta_star))
                .map(|(a, (t, s))| a * (t - s))
                .sum();
        }
    }
}

impl GradientOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn data_len(&self) -> usize {
        0
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim];
        self.apply_hessian(theta, &mut g);
        0.5 * g
            .iter()
            .zip(theta.iter().zip(&self.theta_star))
            .map(|(gi, (t, s))| gi * (t - s))
            .sum::<f64>()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        self.apply_hessian(theta, out);
    }

    fn stochastic_gradient(&self, theta: &[f64], shard: &DataShard, step: u64, out: &mut [f64]) {
        self.apply_hessian(theta, out);
        if self.sigma2 > 0.0 {
            let sd = (self.sigma2 / self.dim as f64).sqrt();
            let mut rng = shard.batch_stream(step);
            for o in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *o += sd * z;
            }
        }
    }

    fn optimum(&self) -> Option<&[f64]> {
        Some(&self.theta_star)
    }

    fn constants(&self) -> OracleConstants {
        let mu = self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let lipschitz = self.eigenvalues.iter().copied().fold(0.0, f64::max);
        OracleConstants {
            mu,
            lipschitz,
            sigma2: Some(self.sigma2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogisticOracle {
    dim: usize,
    /// Row-major `examples × dim`.
    features: Vec<f64>,
    /// Labels in {−1, +1}.
    labels: Vec<f64>,
    l2: f64,
    batch_size: usize,
    optimum: Vec<f64>,
    lipschitz: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LogisticOracle {
    pub fn new(dim: usize, examples: usize, batch_size: usize, l2: f64, problem_seed: u64) -> Result<Self> {
        if dim == 0 || examples == 0 || batch_size == 0 {
            return Err(Error::config("logistic oracle needs dim, examples and batch_size >= 1"));
        }
        if !(l2 > 0.0 && l2.is_finite()) {
            return Err(Error::config(format!("logistic l2 must be positive, got {l2}")));
        }
        let mut rng = RngStream::new(StreamId::new(problem_seed, 0, 0, 0), Purpose::Problem);
        let truth: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut features = Vec::with_capacity(examples * dim);
        let mut labels = Vec::with_capacity(examples);
        for _ in 0..examples {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let z: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let u: f64 = rng.random();
            labels.push(if u < sigmoid(z) { 1.0 } else { -1.0 });
            features.extend(x);
        }

        let design = DMatrix::from_row_slice(examples, dim, &features);
        let gram = design.transpose() * &design / examples as f64;
        let top = gram.symmetric_eigenvalues().max();

        let mut oracle = Self {
            dim,
            features,
            labels,
            l2,
            batch_size,
            optimum: vec![0.0; dim],
            lipschitz: 0.25 * top + l2,
        };
        oracle.optimum = oracle.solve_reference()?;
        Ok(oracle)
    }

    /// Full-batch Newton iterations from the origin down to gradient norm 1e−12.
    fn solve_reference(&self) -> Result<Vec<f64>> {
        let d = self.dim;
        let n = self.labels.len() as f64;
        let mut w = DVector::<f64>::zeros(d);
        let mut grad = vec![0.0; d];
        for _ in 0..100 {
            self.gradient(w.as_slice(), &mut grad);
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-12 {
                break;
            }
            let mut hess = DMatrix::<f64>::identity(d, d) * self.l2;
            for (x, _) in self.examples() {
                let z: f64 = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                let s = sigmoid(z);
                let weight = s * (1.0 - s) / n;
                for r in 0..d {
                    for c in 0..d {
                        hess[(r, c)] += weight * x[r] * x[c];
                    }
                }
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::config("logistic Hessian is not positive definite"))?
                .solve(&DVector::from_column_slice(&grad));
            w -= step;
        }
        Ok(w.as_slice().to_vec())
    }

    fn examples(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    fn example(&self, i: usize) -> (&[f64], f64) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    fn accumulate(&self, theta: &[f64], x: &[f64], y: f64, weight: f64, out: &mut [f64]) {
        let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        let coef = -y * sigmoid(-y * z) * weight;
        for (o, xi) in out.iter_mut().zip(x) {
            *o += coef * xi;
        }
    }
}

impl GradientOracle for LogisticOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn data_len(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.labels.len() as f64;
        let data: f64 = self
            .examples()
            .map(|(x, y)| {
                let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
                softplus(-y * z)
            })
            .sum::<f64>()
            / n;
        data + 0.5 * self.l2 * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        let w = 1.0 / self.labels.len() as f64;
        for (o, t) in out.iter_mut().zip(theta) {
            *o = self.l2 * t;
        }
        for (x, y) in self.examples() {
            self.accumulate(theta, x, y, w, out);
        }
    }

    /// Mean gradient over `batch_size` examples drawn with replacement from
    /// the shard, plus the ridge term.
    fn stochastic_gradient(&self, theta: &[f64], shard: &DataShard, step: u64, out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(theta) {
            *o = self.l2 * t;
        }
        let range = shard.examples.clone();
        if range.is_empty() {
            return;
        }
        let mut rng = shard.batch_stream(step);
        let w = 1.0 / self.batch_size as f64;
        for _ in 0..self.batch_size {
            let i = rng.random_range(range.clone());
            let (x, y) = self.example(i);
            self.accumulate(theta, x, y, w, out);
        }
    }

    fn optimum(&self) -> Option<&[f64]> {
        Some(&self.optimum)
    }

    fn constants(&self) -> OracleConstants {
        OracleConstants {
            mu: self.l2,
            lipschitz: self.lipschitz,
            sigma2: None,
        }
    }
}

/// Serialized description of an objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObjectiveConfig {
    Quadratic(QuadraticConfig),
    Logistic(LogisticConfig),
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::Quadratic(QuadraticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticConfig {
    pub dim: usize,
    /// Explicit spectrum; when absent, `dim` values log-spaced in `[mu, lipschitz]`.
    pub eigenvalues: Option<Vec<f64>>,
    pub mu: f64,
    pub lipschitz: f64,
    pub sigma2: f64,
    pub problem_seed: u64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            eigenvalues: None,
            mu: 1.0,
            lipschitz: 10.0,
            sigma2: 0.04,
            problem_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub dim: usize,
    pub examples: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub problem_seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            examples: 2000,
            batch_size: 16,
            l2: 0.01,
            problem_seed: 1,
        }
    }
}

impl ObjectiveConfig {
    /// Fills implicit fields so the config states everything it means.
    pub fn resolved(&self) -> Result<Self> {
        Ok(match self {
            ObjectiveConfig::Quadratic(q) => {
                let eig = match &q.eigenvalues {
                    Some(e) => {
                        if e.len() != q.dim {
                            return Err(Error::config(format!(
                                "quadratic has dim {} but {} eigenvalues",
                                q.dim,
                                e.len()
                            )));
                        }
                        e.clone()
                    }
                    None => {
                        if !(q.mu > 0.0 && q.mu <= q.lipschitz) {
                            return Err(Error::config(format!(
                                "need 0 < mu <= lipschitz, got mu={} lipschitz={}",
                                q.mu, q.lipschitz
                            )));
                        }
                        QuadraticOracle::log_spaced(q.dim, q.mu, q.lipschitz)
                    }
                };
                let mu = eig.iter().copied().fold(f64::INFINITY, f64::min);
                let lipschitz = eig.iter().copied().fold(0.0, f64::max);
                ObjectiveConfig::Quadratic(QuadraticConfig {
                    eigenvalues: Some(eig),
                    mu,
                    lipschitz,
                    ..q.clone()
                })
            }
            ObjectiveConfig::Logistic(l) => ObjectiveConfig::Logistic(l.clone()),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ObjectiveConfig::Quadratic(q) => q.dim,
            ObjectiveConfig::Logistic(l) => l.dim,
        }
    }

    pub fn build(&self) -> Result<Objective> {
        Ok(match self.resolved()? {
            ObjectiveConfig::Quadratic(q) => Objective::Quadratic(QuadraticOracle::new(
                q.eigenvalues.unwrap_or_default(),
                q.sigma2,
                q.problem_seed,
            )?),
            ObjectiveConfig::Logistic(l) => Objective::Logistic(LogisticOracle::new(
                l.dim,
                l.examples,
                l.batch_size,
                l.l2,
                l.problem_seed,
            )?),
        })
    }
}

/// Any of the built-in oracles.
#[derive(Clone, Debug)]
pub enum Objective {
    Quadratic(QuadraticOracle),
    Logistic(LogisticOracle),
}

impl Objective {
    fn inner(&self) -> &dyn GradientOracle {
        match self {
            Objective::Quadratic(q) => q,
            Objective::Logistic(l) => l,
        }
    }
}

impl GradientOracle for Objective {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn data_len(&self) -> usize {
        self.inner().data_len()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        self.inner().loss(theta)
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        self.inner().gradient(theta, out)
    }

    fn stochastic_gradient(&self, theta: &[f64], shard: &DataShard, step: u64, out: &mut [f64]) {
        self.inner().stochastic_gradient(theta, shard, step, out)
    }

    fn optimum(&self) -> Option<&[f64]> {
        self.inner().optimum()
    }

    fn constants(&self) -> OracleConstants {
        self.inner().constants()
    }
}
