//! Convergence bound for Simple MA on a strongly convex objective, and an
//! empirical check of Monte-Carlo runs against it.
//!
//! For a `mu`-strongly convex objective with `lipschitz`-Lipschitz gradients,
//! additive gradient noise with `E[ξᵀξ] ≤ σ²`, and constant step
//! `0 < α ≤ 2/(mu + lipschitz)`, the stacked worker parameters satisfy
//!
//! ```text
//! E|θ_t − θ*·1|² ≤ ρᵗ·|θ_0 − θ*·1|² + n·(mu + L)/(2·mu·L)·α·σ²
//! ρ = 1 − 2α·mu·L/(mu + L)
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::RunMetrics;

/// Minimum number of trials [`check_bound`] accepts.
pub const MIN_TRIALS: usize = 30;

/// Single-step excursions above the bound are flagged, not failed, while
/// they stay under this fraction of steps.
pub const EXCURSION_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub mu: f64,
    pub lipschitz: f64,
    pub alpha: f64,
    pub workers: usize,
    pub sigma2: f64,
    /// `|θ_0 − θ*·1|²` over all workers.
    pub init_dist: f64,
    /// Squared distance below which f64 iterates cannot resolve the optimum.
    /// Added to the bound when checking, so a converged deterministic run is
    /// not failed for sitting at machine precision.
    #[serde(default)]
    pub rounding_floor: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= self.lipschitz && self.lipschitz.is_finite()) {
            return Err(Error::arg(format!(
                "need 0 < mu <= L, got mu = {}, L = {}",
                self.mu, self.lipschitz
            )));
        }
        let max_alpha = self.max_step();
        if !(self.alpha > 0.0 && self.alpha <= max_alpha) {
            return Err(Error::arg(format!(
                "step size alpha = {} violates 0 < alpha <= 2/(mu+L) = {max_alpha}",
                self.alpha
            )));
        }
        if self.workers == 0 || !(self.sigma2 >= 0.0) || !(self.init_dist >= 0.0) || !(self.rounding_floor >= 0.0) {
            return Err(Error::arg("need workers >= 1 and non-negative sigma2, init_dist and rounding_floor"));
        }
        Ok(())
    }

    /// Largest admissible constant step, `2/(mu + L)`.
    pub fn max_step(&self) -> f64 {
        2.0 / (self.mu + self.lipschitz)
    }

    /// Contraction factor `ρ = 1 − 2α·mu·L/(mu + L)`.
    pub fn rate(&self) -> f64 {
        1.0 - 2.0 * self.alpha * self.mu * self.lipschitz / (self.mu + self.lipschitz)
    }

    /// Non-vanishing term `n·(mu + L)/(2·mu·L)·α·σ²`.
    pub fn bias(&self) -> f64 {
        self.workers as f64 * (self.mu + self.lipschitz) / (2.0 * self.mu * self.lipschitz)
            * self.alpha
            * self.sigma2
    }
}

/// Upper bound on `E|θ_t − θ*·1|²` after `t` steps.
pub fn ma_bound(params: &BoundParams, t: u64) -> Result<f64> {
    params.validate()?;
    Ok(params.rate().powf(t as f64) * params.init_dist + params.bias())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub step: u64,
    pub mean_sq_dist: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub params: BoundParams,
    pub trials: usize,
    pub slack: f64,
    pub steps: Vec<StepCheck>,
    pub pass_fraction: f64,
    /// Trial mean averaged over the last 10% of recorded steps.
    pub steady_state_mean: f64,
    /// Steps where the trial mean exceeded the slackened bound.
    pub excursions: Vec<u64>,
    /// Some steps failed, but fewer than [`EXCURSION_TOLERANCE`] of them.
    pub flagged: bool,
    pub passed: bool,
}

impl BoundReport {
    /// Human-readable summary with roughly `rows` evenly spaced steps.
    pub fn to_table(&self, rows: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "bound check: n={} alpha={} mu={} L={} sigma2={} trials={} slack={:.4}",
            self.params.workers,
            self.params.alpha,
            self.params.mu,
            self.params.lipschitz,
            self.params.sigma2,
            self.trials,
            self.slack
        );
        let _ = writeln!(s, "{:>8}  {:>14}  {:>14}  {:>4}", "step", "mean |e|^2", "bound", "ok");
        let stride = (self.steps.len() / rows.max(1)).max(1);
        for (i, c) in self.steps.iter().enumerate() {
            if i % stride == 0 || i + 1 == self.steps.len() {
                let _ = writeln!(
                    s,
                    "{:>8}  {:>14.6e}  {:>14.6e}  {:>4}",
                    c.step,
                    c.mean_sq_dist,
                    c.bound,
                    if c.pass { "yes" } else { "NO" }
                );
            }
        }
        let _ = writeln!(
            s,
            "pass fraction {:.4}  steady-state mean {:.6e}  bias term {:.6e}  {}",
            self.pass_fraction,
            self.steady_state_mean,
            self.params.bias(),
            if self.passed { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Compares the trial mean of `sq_dist` at every recorded step with the
/// bound, using slack `4/√trials` (zero when the noise is zero).
pub fn check_bound(trials: &[RunMetrics], params: &BoundParams) -> Result<BoundReport> {
    params.validate()?;
    if trials.len() < MIN_TRIALS {
        return Err(Error::InsufficientTrials {
            required: MIN_TRIALS,
            got: trials.len(),
        });
    }
    let mean = RunMetrics::trial_mean(trials)?;
    if mean.is_empty() {
        return Err(Error::arg("trials recorded no steps"));
    }
    let slack = if params.sigma2 == 0.0 {
        0.0
    } else {
        4.0 / (trials.len() as f64).sqrt()
    };
    let steps: Vec<StepCheck> = mean
        .steps
        .iter()
        .zip(&mean.sq_dist)
        .map(|(&step, &m)| {
            let bound = params.rate().powf(step as f64) * params.init_dist + params.bias();
            StepCheck {
                step,
                mean_sq_dist: m,
                bound,
                pass: m <= bound * (1.0 + slack) + params.rounding_floor,
            }
        })
        .collect();
    let excursions: Vec<u64> = steps.iter().filter(|c| !c.pass).map(|c| c.step).collect();
    let pass_fraction = 1.0 - excursions.len() as f64 / steps.len() as f64;
    let tail = steady_state_mean(&mean.sq_dist);
    Ok(BoundReport {
        params: *params,
        trials: trials.len(),
        slack,
        pass_fraction,
        steady_state_mean: tail,
        flagged: !excursions.is_empty() && pass_fraction >= 1.0 - EXCURSION_TOLERANCE,
        passed: pass_fraction >= 1.0 - EXCURSION_TOLERANCE,
        excursions,
        steps,
    })
}

/// Squared-distance floor for `workers` copies of an iterate converging to
/// `optimum`: a few ulps per coordinate.
pub fn rounding_floor(workers: usize, optimum: &[f64]) -> f64 {
    let ulp = 4.0 * f64::EPSILON;
    workers as f64 * optimum.iter().map(|x| (ulp * x.abs().max(1.0)).powi(2)).sum::<f64>()
}

/// Mean over the last 10% of a series (at least one entry).
pub fn steady_state_mean(series: &[f64]) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let tail = series.len().div_ceil(10);
    series[series.len() - tail..].iter().sum::<f64>() / tail as f64
}

/// Exact stationary value of `E|θ_t − θ*·1|²` for Simple MA on a quadratic
/// with the given Hessian spectrum, isotropic noise of total variance
/// `sigma2`, constant step `alpha`, and `workers` workers.
///
/// Each worker lands at `θ̄ − α(A(θ̄ − θ*) + ξ_i)`, so the stacked error is
/// `n·|(I − αA)ē|² + α²Σ|ξ_i|²`, while the average error `ē` is an AR(1)
/// process per eigenmode driven by the mean noise (variance `σ²/(d·n)` per
/// coordinate). Summing the stationary mode variances gives
///
/// ```text
/// α²σ²·( (1/d)·Σ_λ (1−αλ)²/(1−(1−αλ)²) + n )
/// ```
pub fn simple_ma_steady_state(eigenvalues: &[f64], alpha: f64, sigma2: f64, workers: usize) -> Result<f64> {
    if eigenvalues.is_empty() {
        return Err(Error::arg("empty spectrum"));
    }
    let d = eigenvalues.len() as f64;
    let mut modes = 0.0;
    for &lambda in eigenvalues {
        let r = 1.0 - alpha * lambda;
        if r.abs() >= 1.0 {
            return Err(Error::arg(format!(
                "mode with eigenvalue {lambda} does not contract at alpha = {alpha}"
            )));
        }
        modes += r * r / (1.0 - r * r);
    }
    Ok(alpha * alpha * sigma2 * (modes / d + workers as f64))
}
