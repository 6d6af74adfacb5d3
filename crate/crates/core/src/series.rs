//! Piecewise-linear conditioning interpolation over mid-month nodes.
//!
//! Nodes are `(tau_i, c_i)` pairs with tau a continuous day count (day of
//! the year plus the day fraction; `tau = 1.5` is January 1st 12:00 UTC).
//! Queries between nodes interpolate linearly; queries outside the node
//! range are hard errors — the underlying dataset has fixed coverage and
//! extrapolation would be silent invention.

use crate::error::{Error, Result};
use crate::state::StateVector;

/// Ordered `(tau, c)` nodes, strictly increasing in tau with consecutive
/// gaps under 31 days, all values the same shape.
#[derive(Debug, Clone)]
pub struct ConditioningSeries {
    taus: Vec<f64>,
    values: Vec<StateVector>,
}

impl ConditioningSeries {
    pub fn new(nodes: Vec<(f64, StateVector)>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Contract("series needs at least two nodes".into()));
        }
        for w in nodes.windows(2) {
            let (t0, t1) = (w[0].0, w[1].0);
            if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
                return Err(Error::Contract(format!(
                    "node taus must be strictly increasing, got {t0} then {t1}"
                )));
            }
            // consecutive 31-day months (e.g. July 16 to August 16) put
            // mid-month nodes exactly 31 days apart, so the bound is
            // inclusive
            if t1 > t0 + 31.0 {
                return Err(Error::Contract(format!(
                    "node gap {} exceeds the 31-day mid-month limit",
                    t1 - t0
                )));
            }
            if !w[0].1.same_shape(&w[1].1) {
                return Err(Error::Contract("node values must share one shape".into()));
            }
        }
        let (taus, values) = nodes.into_iter().unzip();
        Ok(ConditioningSeries { taus, values })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn values(&self) -> &[StateVector] {
        &self.values
    }

    pub fn tau_first(&self) -> f64 {
        self.taus[0]
    }

    pub fn tau_last(&self) -> f64 {
        *self.taus.last().unwrap()
    }

    pub fn value_shape(&self) -> &[usize] {
        self.values[0].shape()
    }

    /// Index of the segment containing tau: the largest `i` with
    /// `tau_i <= tau` and `i + 1` still a node (so the last node maps to
    /// the final segment).
    fn segment(&self, tau: f64) -> Result<usize> {
        if !(tau >= self.tau_first() && tau <= self.tau_last()) {
            return Err(Error::Range(format!(
                "tau {tau} outside series coverage [{}, {}]",
                self.tau_first(),
                self.tau_last()
            )));
        }
        let i = self.taus.partition_point(|t| *t <= tau);
        Ok(i.saturating_sub(1).min(self.taus.len() - 2))
    }

    /// `c(tau)` by linear interpolation from the two surrounding nodes.
    /// At a node, the node value is returned bit-exactly.
    pub fn interp(&self, tau: f64) -> Result<StateVector> {
        let i = self.segment(tau)?;
        if tau == self.taus[i] {
            return Ok(self.values[i].clone());
        }
        if tau == self.taus[i + 1] {
            return Ok(self.values[i + 1].clone());
        }
        let frac = (tau - self.taus[i]) / (self.taus[i + 1] - self.taus[i]);
        let delta = self.values[i + 1].sub(&self.values[i]);
        Ok(self.values[i].add_scaled(frac, &delta))
    }

    /// Elementwise slope of the containing segment. At an interior node the
    /// right segment's slope is returned (documented tie-break); at the
    /// last node, the final segment's.
    pub fn interp_derivative(&self, tau: f64) -> Result<StateVector> {
        let mut i = self.segment(tau)?;
        if tau == self.taus[i + 1] && i + 2 < self.taus.len() {
            i += 1;
        }
        let dt = self.taus[i + 1] - self.taus[i];
        Ok(self.values[i + 1].sub(&self.values[i]).scaled(1.0 / dt))
    }

    /// Consecutive deltas along a sorted tau list:
    /// `(interp(tau_{k+1}) - interp(tau_k), tau_{k+1} - tau_k)`.
    pub fn series_deltas(&self, taus: &[f64]) -> Result<Vec<(StateVector, f64)>> {
        if taus.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract("evaluation taus must be sorted".into()));
        }
        let cs: Vec<StateVector> = taus.iter().map(|t| self.interp(*t)).collect::<Result<_>>()?;
        Ok(cs
            .windows(2)
            .zip(taus.windows(2))
            .map(|(c, t)| (c[1].sub(&c[0]), t[1] - t[0]))
            .collect())
    }
}

/// Evaluation times `start + k * cadence_days` for every `k` with the time
/// still within `[start, end]`.
pub fn cadence_times(start: f64, end: f64, cadence_days: f64) -> Result<Vec<f64>> {
    if !(cadence_days > 0.0 && cadence_days.is_finite()) {
        return Err(Error::Config(format!("cadence must be positive, got {cadence_days}")));
    }
    if end < start {
        return Err(Error::Config("time range end precedes start".into()));
    }
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = start + k as f64 * cadence_days;
        if t > end {
            break;
        }
        out.push(t);
        k += 1;
    }
    Ok(out)
}

/// Hours-to-days conversion for cadence flags (169 h -> 169/24 days).
pub fn hours_to_days(hours: f64) -> f64 {
    hours / 24.0
}
