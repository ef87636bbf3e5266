//! Per-node state machine: local SGD step, neighbor averaging, and the
//! block-momentum (BMUF) filter with Nesterov lookahead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{ComponentLayout, ParameterVector};
use crate::topology::{Purpose, RngStream, StreamId};

/// How an averaged component is folded back into a worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncRule {
    /// Block momentum filter (`θ ← ω + ηΔ` after the update).
    Bmuf,
    /// Plain model averaging: take the average as-is.
    Ma,
}

/// Block momentum `eta` and block learning rate `zeta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmufParams {
    pub eta: f64,
    pub zeta: f64,
}

impl Default for BmufParams {
    fn default() -> Self {
        Self { eta: 0.9, zeta: 1.0 }
    }
}

impl BmufParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::config(format!(
                "block momentum eta must lie in [0, 1), got {}",
                self.eta
            )));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::config(format!(
                "block learning rate zeta must be positive, got {}",
                self.zeta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WorkerState {
    id: usize,
    pub theta: ParameterVector,
    pub omega: ParameterVector,
    pub delta: ParameterVector,
    pub block_grad: ParameterVector,
    /// θ of each component right after its most recent sync (θ₀ before the
    /// first one), stored at the component's own offsets.
    pub anchor: ParameterVector,
}

impl WorkerState {
    pub fn new(id: usize, theta0: ParameterVector) -> Self {
        let d = theta0.len();
        Self {
            id,
            omega: theta0.clone(),
            anchor: theta0.clone(),
            theta: theta0,
            delta: ParameterVector::zeros(d),
            block_grad: ParameterVector::zeros(d),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `θ ← θ − α·g` over the whole vector.
    pub fn local_step(&mut self, grad: &[f64], alpha: f64) -> Result<()> {
        if grad.len() != self.dim() {
            return Err(Error::arg(format!(
                "gradient has {} entries, worker has {}",
                grad.len(),
                self.dim()
            )));
        }
        if !(alpha >= 0.0) {
            return Err(Error::arg(format!("learning rate must be >= 0, got {alpha}")));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(self.diverged());
        }
        for (p, g) in self.theta.iter_mut().zip(grad) {
            *p -= alpha * g;
        }
        if !self.theta.is_finite() {
            return Err(self.diverged());
        }
        Ok(())
    }

    /// Random stream this worker uses to pick neighbors for `component` at
    /// its `sync_index`-th synchronization.
    pub fn neighbor_stream(&self, seed: u64, component: usize, sync_index: u64) -> RngStream {
        RngStream::new(
            StreamId::new(seed, self.id as u64, component as u64, sync_index),
            Purpose::NeighborSampling,
        )
    }

    pub fn apply_sync(
        &mut self,
        layout: &ComponentLayout,
        i: usize,
        avg: &[f64],
        rule: SyncRule,
        params: &BmufParams,
    ) -> Result<()> {
        match rule {
            SyncRule::Bmuf => self.bmuf_filter(layout, i, avg, params),
            SyncRule::Ma => self.ma_update(layout, i, avg),
        }
    }

    /// Block momentum update of component `i` from its neighborhood average:
    ///
    /// ```text
    /// G ← avg − anchor
    /// Δ ← ηΔ + ζG
    /// ω ← ω + Δ
    /// θ ← ω + ηΔ
    /// anchor ← θ
    /// ```
    pub fn bmuf_filter(
        &mut self,
        layout: &ComponentLayout,
        i: usize,
        avg: &[f64],
        params: &BmufParams,
    ) -> Result<()> {
        let range = self.component_range(layout, i, avg.len())?;
        let BmufParams { eta, zeta } = *params;
        for (j, &a) in range.zip(avg) {
            let g = a - self.anchor[j];
            let momentum = eta * self.delta[j];
            let delta = momentum + zeta * g;
            // ω + Δ expanded around the average: with η = 0, ζ = 1 and ω equal
            // to the anchor this lands on `a` exactly, matching plain MA bit for bit.
            let omega = a + (self.omega[j] - self.anchor[j]) + (momentum + (zeta - 1.0) * g);
            let theta = omega + eta * delta;
            self.block_grad[j] = g;
            self.delta[j] = delta;
            self.omega[j] = omega;
            self.theta[j] = theta;
            self.anchor[j] = theta;
        }
        self.check_component(layout, i)
    }

    /// Plain averaging: component `i` of θ (and its anchor) becomes `avg`.
    pub fn ma_update(&mut self, layout: &ComponentLayout, i: usize, avg: &[f64]) -> Result<()> {
        let range = self.component_range(layout, i, avg.len())?;
        self.theta[range.clone()].copy_from_slice(avg);
        self.anchor[range].copy_from_slice(avg);
        self.check_component(layout, i)
    }

    fn component_range(
        &self,
        layout: &ComponentLayout,
        i: usize,
        avg_len: usize,
    ) -> Result<std::ops::Range<usize>> {
        let range = layout.component(i)?.range();
        if avg_len != range.len() {
            return Err(Error::arg(format!(
                "average has {avg_len} entries, component {i} has {}",
                range.len()
            )));
        }
        if range.end > self.dim() {
            return Err(Error::arg("layout exceeds worker dimension"));
        }
        Ok(range)
    }

    fn check_component(&self, layout: &ComponentLayout, i: usize) -> Result<()> {
        let r = layout.component(i)?.range();
        let finite = [&self.theta, &self.omega, &self.delta]
            .iter()
            .all(|v| v[r.clone()].iter().all(|x| x.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(self.diverged())
        }
    }

    fn diverged(&self) -> Error {
        Error::Divergence {
            step: 0,
            worker: self.id,
        }
    }
}

/// Elementwise mean of `own` and the neighbor slices, accumulated in the
/// given order (self first, then neighbors as passed).
pub fn gossip_average(own: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    let mut sum = own.to_vec();
    for nb in neighbors {
        if nb.len() != own.len() {
            return Err(Error::arg(format!(
                "neighbor component has {} entries, expected {}",
                nb.len(),
                own.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(nb.iter()) {
            *s += x;
        }
    }
    let count = (neighbors.len() + 1) as f64;
    for s in &mut sum {
        *s /= count;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_worker(v: f64) -> (WorkerState, ComponentLayout) {
        let layout = ComponentLayout::from_lengths([("x", 1, 1)]).unwrap();
        (WorkerState::new(0, vec![v].into()), layout)
    }

    #[test]
    fn construction_fills_slots() {
        let w = WorkerState::new(2, vec![1.0, -2.0].into());
        assert_eq!(&*w.theta, &[1.0, -2.0]);
        assert_eq!(w.omega, w.theta);
        assert_eq!(w.anchor, w.theta);
        assert_eq!(&*w.delta, &[0.0, 0.0]);
        assert_eq!(&*w.block_grad, &[0.0, 0.0]);
        assert_eq!(w.id(), 2);
    }

    #[test]
    fn local_step_arithmetic() {
        let mut w = WorkerState::new(0, vec![1.0, 2.0].into());
        w.local_step(&[1.0, 1.0], 0.1).unwrap();
        assert!((w.theta[0] - 0.9).abs() < 1e-15 && (w.theta[1] - 1.9).abs() < 1e-15);

        let before = w.theta.clone();
        w.local_step(&[3.0, -7.0], 0.0).unwrap();
        assert_eq!(w.theta, before);

        let mut w = WorkerState::new(0, vec![0.0, 0.0].into());
        for _ in 0..5 {
            w.local_step(&[1.0, 0.0], 0.1).unwrap();
        }
        assert!((w.theta[0] + 0.5).abs() < 1e-12);
        assert_eq!(w.theta[1], 0.0);
    }

    #[test]
    fn local_step_rejects_bad_input() {
        let mut w = WorkerState::new(4, vec![0.0, 0.0].into());
        assert!(matches!(
            w.local_step(&[f64::NAN, 0.0], 0.1),
            Err(Error::Divergence { worker: 4, .. })
        ));
        assert!(matches!(w.local_step(&[1.0], 0.1), Err(Error::InvalidArgument(_))));
        assert!(w.local_step(&[1.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn averaging_edge_cases() {
        assert_eq!(gossip_average(&[3.0, 4.0], &[]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(gossip_average(&[0.0], &[&[1.0]]).unwrap(), vec![0.5]);
        let v = [0.1, -7.25];
        assert_eq!(gossip_average(&v, &[&v, &v, &v]).unwrap(), v.to_vec());
        assert!(gossip_average(&[1.0, 2.0], &[&[1.0]]).is_err());
    }

    #[test]
    fn bmuf_filter_single_step() {
        let (mut w, layout) = scalar_worker(0.0);
        let p = BmufParams { eta: 0.5, zeta: 1.0 };
        w.bmuf_filter(&layout, 0, &[1.0], &p).unwrap();
        assert_eq!(w.block_grad[0], 1.0);
        assert_eq!(w.delta[0], 1.0);
        assert_eq!(w.omega[0], 1.0);
        assert_eq!(w.theta[0], 1.5);
        assert_eq!(w.anchor[0], 1.5);
    }

    #[test]
    fn bmuf_filter_two_syncs() {
        // Hand-stepped: after sync 1 θ = 1.5 becomes the anchor, so
        // G = 1 − 1.5, Δ = 0.5·1 − 0.5 = 0, ω = 1, θ = 1.
        let (mut w, layout) = scalar_worker(0.0);
        let p = BmufParams { eta: 0.5, zeta: 1.0 };
        w.bmuf_filter(&layout, 0, &[1.0], &p).unwrap();
        w.bmuf_filter(&layout, 0, &[1.0], &p).unwrap();
        assert_eq!(w.delta[0], 0.0);
        assert_eq!(w.omega[0], 1.0);
        assert_eq!(w.theta[0], 1.0);
    }

    #[test]
    fn zero_momentum_unit_rate_is_plain_averaging() {
        let (mut w, layout) = scalar_worker(0.3);
        let p = BmufParams { eta: 0.0, zeta: 1.0 };
        w.local_step(&[0.7], 0.1).unwrap();
        w.bmuf_filter(&layout, 0, &[0.123456789], &p).unwrap();
        assert_eq!(w.theta[0], 0.123456789);
    }

    #[test]
    fn ma_update_is_component_local() {
        let layout = ComponentLayout::from_lengths([("a", 2, 1), ("b", 2, 1)]).unwrap();
        let mut w = WorkerState::new(0, vec![1.0, 2.0, 3.0, 4.0].into());
        w.ma_update(&layout, 0, &[1.0, 2.0]).unwrap();
        assert_eq!(&*w.theta, &[1.0, 2.0, 3.0, 4.0]);
        w.ma_update(&layout, 0, &[9.0, 8.0]).unwrap();
        assert_eq!(&*w.theta, &[9.0, 8.0, 3.0, 4.0]);
        assert_eq!(&w.anchor[..2], &[9.0, 8.0]);
        assert_eq!(&w.anchor[2..], &[3.0, 4.0]);
        assert!(w.ma_update(&layout, 1, &[1.0]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(BmufParams::default().validate().is_ok());
        assert!(BmufParams { eta: 1.0, zeta: 1.0 }.validate().is_err());
        assert!(BmufParams { eta: 0.5, zeta: 0.0 }.validate().is_err());
    }

    fn slot_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, d)
    }

    proptest! {
        #[test]
        fn filter_touches_only_its_component(
            theta in slot_vec(7), omega in slot_vec(7), delta in slot_vec(7),
            avg in slot_vec(3), eta in 0.0f64..0.99, zeta in 0.1f64..2.0,
        ) {
            let layout = ComponentLayout::from_lengths([("a", 2, 1), ("b", 3, 1), ("c", 2, 1)]).unwrap();
            let mut w = WorkerState::new(0, theta.into());
            w.omega = omega.into();
            w.delta = delta.into();
            let before = w.clone();
            w.bmuf_filter(&layout, 1, &avg, &BmufParams { eta, zeta }).unwrap();
            for j in (0..2).chain(5..7) {
                prop_assert_eq!(w.theta[j].to_bits(), before.theta[j].to_bits());
                prop_assert_eq!(w.omega[j].to_bits(), before.omega[j].to_bits());
                prop_assert_eq!(w.delta[j].to_bits(), before.delta[j].to_bits());
                prop_assert_eq!(w.block_grad[j].to_bits(), before.block_grad[j].to_bits());
                prop_assert_eq!(w.anchor[j].to_bits(), before.anchor[j].to_bits());
            }
            for j in 2..5 {
                let lhs = w.theta[j] - w.omega[j];
                let rhs = eta * w.delta[j];
                let scale = w.theta[j].abs().max(w.omega[j].abs()).max(1.0);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
            }
        }
    }
}
