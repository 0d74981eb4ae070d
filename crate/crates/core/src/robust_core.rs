//! Robust-statistics primitives shared by initialization, the M-step and the
//! clipped likelihood ratios: Huber-type clipping, weighted medians and MADs,
//! their Monte-Carlo consistency factor, finite-sample breakdown point and the
//! influence function of the most bias-robust location/scale estimator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `z · min(1, b/|z|)`. Saturates cleanly for infinite input.
#[inline]
pub fn huber_clip(z: f64, b: f64) -> f64 {
    debug_assert!(b >= 0.0);
    if z.abs() <= b {
        z
    } else {
        b * z.signum()
    }
}

/// Euclidean-norm version of [`huber_clip`].
pub fn huber_clip_vec<const D: usize>(z: [f64; D], b: f64) -> [f64; D] {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= b {
        z
    } else {
        z.map(|v| v * b / norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() || values.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "weighted sample needs matching non-empty lengths ({} values, {} weights)",
                values.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("values must be finite".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        Ok(Self { values, weights })
    }

    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Minimizer of `Σ w_j |y_j - f|`; the midpoint when the minimizer is an interval.
pub fn weighted_median(s: &WeightedSample) -> f64 {
    let mut pairs: Vec<(f64, f64)> = s
        .values
        .iter()
        .zip(&s.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(v, w)| (*v, *w))
        .collect();
    weighted_median_of_pairs(&mut pairs)
}

fn weighted_median_of_pairs(pairs: &mut [(f64, f64)]) -> f64 {
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let half = 0.5 * total;
    let tol = 1e-12 * total;
    let mut cum = 0.0;
    for (idx, &(v, w)) in pairs.iter().enumerate() {
        cum += w;
        if cum >= half - tol {
            if (cum - half).abs() <= tol {
                // Flat stretch of the objective up to the next value.
                if let Some(&(next, _)) = pairs[idx + 1..].iter().find(|p| p.0 > v) {
                    return 0.5 * (v + next);
                }
            }
            return v;
        }
    }
    pairs.last().map(|p| p.0).unwrap_or(f64::NAN)
}

/// Weighted median of `|y_j - center|`, divided by `consistency`.
/// Returns 0 for a degenerate sample; flooring is the caller's business.
pub fn weighted_mad(s: &WeightedSample, center: f64, consistency: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = s
        .values
        .iter()
        .zip(&s.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(v, w)| ((v - center).abs(), *w))
        .collect();
    weighted_median_of_pairs(&mut pairs) / consistency
}

/// Φ⁻¹(3/4), the large-sample MAD consistency constant at the normal.
pub const MAD_NORMAL_CONSISTENCY: f64 = 0.674_489_750_196_081_7;

/// Unweighted MAD about the median, scaled to estimate σ at the normal.
pub fn scaled_mad(values: &[f64]) -> f64 {
    match WeightedSample::uniform(values.to_vec()) {
        Ok(s) => {
            let m = weighted_median(&s);
            weighted_mad(&s, m, MAD_NORMAL_CONSISTENCY)
        }
        Err(_) => 0.0,
    }
}

/// Monte-Carlo consistency factor for the weighted MAD: the average over
/// `mc_reps` replicates of the weighted median of `|z_j|`, `z_j` i.i.d. N(0,1).
pub fn mc_consistency_factor(weights: &[f64], mc_reps: usize, seed: u64) -> Result<f64> {
    if mc_reps < 1000 {
        return Err(Error::InvalidArgument(format!("mc_reps = {mc_reps} < 1000")));
    }
    let active: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    if active.is_empty() {
        return Err(Error::ZeroWeights);
    }
    let per_rep: Vec<f64> = (0..mc_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let mut pairs: Vec<(f64, f64)> = active
                .iter()
                .map(|w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z.abs(), *w)
                })
                .collect();
            weighted_median_of_pairs(&mut pairs)
        })
        .collect();
    Ok(per_rep.iter().sum::<f64>() / mc_reps as f64)
}

/// Finite-sample breakdown point `j0 / k` of the weighted median and MAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fsbp {
    /// Fewest replacements (at the heaviest weights) that can carry the estimate away.
    pub replacements: usize,
    pub k: usize,
}

impl Fsbp {
    pub fn fraction(&self) -> f64 {
        self.replacements as f64 / self.k as f64
    }
}

/// Smallest `j0` such that the `j0` largest normalized weights carry at least
/// half of the mass.
pub fn fsbp(weights: &[f64]) -> Result<Fsbp> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroWeights);
    }
    let mut sorted: Vec<f64> = weights.iter().map(|w| w / total).collect();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    for (j, w) in sorted.iter().enumerate() {
        cum += w;
        if cum >= 0.5 - 1e-12 {
            return Ok(Fsbp { replacements: j + 1, k: weights.len() });
        }
    }
    Ok(Fsbp { replacements: weights.len(), k: weights.len() })
}

/// Constants of the MBRE influence function at N(0,1), tabulated for the
/// normal location-scale model to four digits: `A` (slope of the scale
/// coordinate), `a` (its offset) and the bias bound `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbreConstants {
    pub slope: f64,
    pub offset: f64,
    pub bound: f64,
}

impl Default for MbreConstants {
    fn default() -> Self {
        Self { slope: 0.7917, offset: -0.4970, bound: 1.8546 }
    }
}

/// `ψ(u) = b·Y(u)/|Y(u)|` with `Y(u) = (u, A(u² − 1) − a)`; returns
/// (location, scale) coordinates.
#[inline]
pub fn mbre_if(u: f64, c: &MbreConstants) -> (f64, f64) {
    let y_loc = u;
    let y_scale = c.slope * (u * u - 1.0) - c.offset;
    let norm = y_loc.hypot(y_scale);
    debug_assert!(norm > 0.0);
    if !norm.is_finite() {
        // |u| → ∞: Y/|Y| → (0, 1) since the quadratic coordinate dominates.
        return (0.0, c.bound);
    }
    (c.bound * y_loc / norm, c.bound * y_scale / norm)
}
