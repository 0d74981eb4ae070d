//! Domain types for the N-state Gaussian regime-switching return model.
//!
//! The transition matrix is stored column-stochastic: `transition[j][i]` is
//! the probability of moving to state `j` given the chain is in state `i`.
//! Every consumer in this crate indexes it that way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeModel {
    transition: Vec<Vec<f64>>,
    drift: Vec<f64>,
    vol: Vec<f64>,
}

impl RegimeModel {
    /// `transition[j][i]` = P(next = j | current = i); columns must sum to one.
    pub fn new(transition: Vec<Vec<f64>>, drift: Vec<f64>, vol: Vec<f64>) -> Result<Self> {
        let n = drift.len();
        if n == 0 {
            return Err(Error::InvalidModel("model needs at least one state".into()));
        }
        if vol.len() != n || transition.len() != n || transition.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidModel(format!(
                "dimension mismatch: {} drifts, {} vols, {}x? transition",
                n,
                vol.len(),
                transition.len()
            )));
        }
        for (i, s) in vol.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::InvalidModel(format!("vol[{i}] = {s} must be positive")));
            }
        }
        for (i, f) in drift.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::InvalidModel(format!("drift[{i}] is not finite")));
            }
        }
        for i in 0..n {
            let mut sum = 0.0;
            for row in &transition {
                let p = row[i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidModel(format!("transition entry {p} in column {i} outside [0,1]")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidModel(format!("transition column {i} sums to {sum}")));
            }
        }
        Ok(Self { transition, drift, vol })
    }

    /// Renormalizes each column before validating. Used by estimators whose
    /// quotients are stochastic only up to rounding.
    pub fn with_normalized_columns(mut transition: Vec<Vec<f64>>, drift: Vec<f64>, vol: Vec<f64>) -> Result<Self> {
        let n = transition.len();
        for i in 0..n {
            let sum: f64 = transition.iter().map(|row| row.get(i).copied().unwrap_or(0.0)).sum();
            if sum > 0.0 && sum.is_finite() {
                for row in transition.iter_mut() {
                    if let Some(p) = row.get_mut(i) {
                        *p = (*p / sum).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Self::new(transition, drift, vol)
    }

    pub fn n_states(&self) -> usize {
        self.drift.len()
    }

    /// π_ji = P(x_{k+1} = e_j | x_k = e_i).
    #[inline]
    pub fn pi(&self, j: usize, i: usize) -> f64 {
        self.transition[j][i]
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    pub fn vol(&self) -> &[f64] {
        &self.vol
    }

    /// Π·x for a column vector x.
    pub fn propagate(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_states();
        (0..n).map(|j| (0..n).map(|i| self.pi(j, i) * x[i]).sum()).collect()
    }

    /// Mean and standard deviation of one observation when the driving state
    /// has law `dist`.
    pub fn mixture_moments(&self, dist: &StateDistribution) -> (f64, f64) {
        let p = dist.probs();
        let mean: f64 = p.iter().zip(&self.drift).map(|(p, f)| p * f).sum();
        let second: f64 = p
            .iter()
            .zip(self.drift.iter().zip(&self.vol))
            .map(|(p, (f, s))| p * (s * s + f * f))
            .sum();
        (mean, (second - mean * mean).max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    probs: Vec<f64>,
}

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty state distribution".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative or non-finite probability in {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Scales a non-negative vector onto the simplex.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::ZeroWeights);
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn point_mass(n: usize, state: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[state] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    values: Vec<f64>,
    timestamps: Option<Vec<String>>,
}

impl ReturnSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("return series is empty".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values, timestamps: None })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.values.len() {
            return Err(Error::InvalidArgument("timestamp count does not match values".into()));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Log-returns y_{k+1} = ln(S_{k+1}/S_k).
pub fn returns_from_prices(prices: &[f64]) -> Result<ReturnSeries> {
    if prices.len() < 2 {
        return Err(Error::InvalidArgument("need at least two prices".into()));
    }
    if let Some((index, &value)) = prices.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::NonPositivePrice { index, value });
    }
    ReturnSeries::new(prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

const POWER_MAX_ITER: usize = 100_000;
const POWER_TOL: f64 = 1e-13;

/// Invariant law of the chain by power iteration from the uniform vector.
pub fn stationary_distribution(model: &RegimeModel) -> Result<StateDistribution> {
    let n = model.n_states();
    let mut x = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITER {
        let next = model.propagate(&x);
        residual = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if residual < POWER_TOL {
            return StateDistribution::normalized(x);
        }
    }
    Err(Error::StationaryNotConverged { residual })
}
