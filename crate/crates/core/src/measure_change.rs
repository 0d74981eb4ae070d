//! Change of measure: per-state density ratios Γ^i, the mixed likelihood
//! ratio λ̃ against a data-driven N(0, σ̄²) reference, and its clipped,
//! mean-one version λ̄⁰.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::{RegimeModel, StateDistribution};
use crate::robust_core::{huber_clip, scaled_mad};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
#[inline]
pub fn phi(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// Standard normal distribution function.
#[inline]
pub fn big_phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn big_phi_inv(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};
    StatrsNormal::standard().inverse_cdf(p)
}

/// How σ̄ is chosen when building a [`ReferenceMeasure`] from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceScale {
    /// σ̄ = 1: the textbook N(0,1) reference.
    Standard,
    SampleSd,
    /// Normal-consistent MAD of all observations.
    Mad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeasure {
    sigma_bar: f64,
}

impl ReferenceMeasure {
    pub fn new(sigma_bar: f64) -> Result<Self> {
        if !(sigma_bar.is_finite() && sigma_bar > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_bar = {sigma_bar} must be positive")));
        }
        Ok(Self { sigma_bar })
    }

    pub fn standard() -> Self {
        Self { sigma_bar: 1.0 }
    }

    pub fn from_data(scale: ReferenceScale, ys: &[f64]) -> Result<Self> {
        match scale {
            ReferenceScale::Standard => Ok(Self::standard()),
            ReferenceScale::SampleSd => {
                let n = ys.len() as f64;
                let mean = ys.iter().sum::<f64>() / n;
                let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                Self::new(var.sqrt())
            }
            ReferenceScale::Mad => Self::new(scaled_mad(ys)),
        }
    }

    pub fn sigma_bar(&self) -> f64 {
        self.sigma_bar
    }

    /// log of σ̄⁻¹φ(y/σ̄).
    #[inline]
    fn log_density(&self, y: f64) -> f64 {
        let z = y / self.sigma_bar;
        -0.5 * z * z - LN_SQRT_2PI - self.sigma_bar.ln()
    }
}

/// ln Γ^i(y) against the given reference.
#[inline]
pub fn log_gamma(model: &RegimeModel, reference: &ReferenceMeasure, y: f64, i: usize) -> f64 {
    let s = model.vol()[i];
    let z = (y - model.drift()[i]) / s;
    (-0.5 * z * z - LN_SQRT_2PI - s.ln()) - reference.log_density(y)
}

/// Γ^i(y) = σ_i⁻¹φ((y − f_i)/σ_i) / (σ̄⁻¹φ(y/σ̄)). Fails on overflow. Underflow
/// to 0 is returned as is: the state becomes impossible for this step, and
/// the filter only breaks down once every state does.
pub fn gamma(model: &RegimeModel, reference: &ReferenceMeasure, y: f64, i: usize) -> Result<f64> {
    let value = log_gamma(model, reference, y, i).exp();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Gamma { state: i, y, value })
    }
}

/// Classical per-state factors for one observation.
pub fn gamma_vector(model: &RegimeModel, reference: &ReferenceMeasure, y: f64) -> Result<Vec<f64>> {
    (0..model.n_states()).map(|i| gamma(model, reference, y, i)).collect()
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// ln λ̃(y) with the state mixture `state_dist`.
pub fn log_lambda_tilde(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    y: f64,
    state_dist: &StateDistribution,
) -> f64 {
    log_sum_exp(
        state_dist
            .probs()
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| p.ln() + log_gamma(model, reference, y, i)),
    )
}

/// λ̃(y) = Σ_i p_i σ_i⁻¹φ((y − f_i)/σ_i) / (σ̄⁻¹φ(y/σ̄)).
pub fn lambda_tilde(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    y: f64,
    state_dist: &StateDistribution,
) -> Result<f64> {
    let value = log_lambda_tilde(model, reference, y, state_dist).exp();
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::NonFiniteLambda { y })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaCalibration {
    pub alpha: f64,
    /// Clipping height for √λ̃; infinite means no clipping.
    pub clip_b: f64,
    /// c′ with E λ̄⁰ = 1.
    pub consistency: f64,
    /// E√λ̃ under the reference law.
    pub mean_sqrt: f64,
}

impl LambdaCalibration {
    /// No clipping and no rescaling; λ̄⁰ = λ̃.
    pub fn identity() -> Self {
        Self { alpha: 1.0, clip_b: f64::INFINITY, consistency: 1.0, mean_sqrt: 1.0 }
    }

    /// Upper bound of λ̄⁰ over all y.
    pub fn ceiling(&self) -> f64 {
        self.consistency * (self.mean_sqrt + self.clip_b).powi(2)
    }

    /// ln of `(m + H_b(√λ̃ − m))²` given ln λ̃. Unclipped values keep the exact
    /// logarithm so tiny ratios do not underflow.
    fn log_clipped(&self, log_lt: f64) -> f64 {
        let s = (0.5 * log_lt).exp();
        let dev = s - self.mean_sqrt;
        if dev.abs() <= self.clip_b {
            log_lt
        } else {
            2.0 * (self.mean_sqrt + huber_clip(dev, self.clip_b)).ln()
        }
    }
}

/// One Monte-Carlo draw, pre-digested for weighted reference-law means.
struct CalibrationDraw {
    sqrt_lt: f64,
    /// q/r with r = (q + p)/2, p the model mixture and q the reference.
    weight: f64,
    /// λ̃·weight, kept finite when λ̃ overflows.
    lt_weight: f64,
}

/// Draws from the half/half mixture of the reference law N(0, σ̄²) and the
/// model mixture. Reference-law expectations are recovered by the weights
/// 2/(1 + λ̃), which keep every integrand bounded even when λ̃ has no
/// second moment under the reference.
fn calibration_draws(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    state_dist: &StateDistribution,
    mc_size: usize,
    seed: u64,
) -> Vec<CalibrationDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference_law = Normal::new(0.0, reference.sigma_bar()).expect("positive sigma_bar");
    let states = rand_distr::weighted::WeightedIndex::new(state_dist.probs()).expect("valid state distribution");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..mc_size)
        .map(|_| {
            let y = if rng.random::<bool>() {
                reference_law.sample(&mut rng)
            } else {
                let i = states.sample(&mut rng);
                model.drift()[i] + model.vol()[i] * std_normal.sample(&mut rng)
            };
            let log_lt = log_lambda_tilde(model, reference, y, state_dist);
            let sigmoid = if log_lt > 0.0 { 1.0 / (1.0 + (-log_lt).exp()) } else { let e = log_lt.exp(); e / (1.0 + e) };
            CalibrationDraw {
                sqrt_lt: (0.5 * log_lt).exp(),
                weight: 2.0 * (1.0 - sigmoid),
                lt_weight: 2.0 * sigmoid,
            }
        })
        .collect()
}

fn clipped_mean(draws: &[CalibrationDraw], total_weight: f64, m: f64, b: f64) -> f64 {
    draws
        .iter()
        .map(|d| {
            let dev = d.sqrt_lt - m;
            if dev.abs() <= b {
                d.lt_weight
            } else if dev > 0.0 {
                // (m + b)²·q/r written against λ̃·q/r so a huge b cannot overflow.
                ((m + b) / d.sqrt_lt).powi(2) * d.lt_weight
            } else {
                (m - b).powi(2) * d.weight
            }
        })
        .sum::<f64>()
        / total_weight
}

/// Monte-Carlo calibration of the clipping height `b` (E λ̄ = α) and of the
/// consistency factor c′ (E λ̄⁰ = 1) for the given state mixture. Expectations
/// are under the reference law, where E λ̃ = 1.
///
/// Clipping can only lower E λ̄ to (E√λ̃)²; when α is below that the
/// calibration fails with [`Error::Bracket`].
pub fn calibrate_clipping(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    state_dist: &StateDistribution,
    alpha: f64,
    mc_size: usize,
    seed: u64,
) -> Result<LambdaCalibration> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} outside (0, 1]")));
    }
    if mc_size < 10_000 {
        return Err(Error::InvalidArgument(format!("mc_size = {mc_size} < 10000")));
    }
    let draws = calibration_draws(model, reference, state_dist, mc_size, seed);
    let total_weight: f64 = draws.iter().map(|d| d.weight).sum();
    let m = draws.iter().map(|d| d.sqrt_lt * d.weight).filter(|v| v.is_finite()).sum::<f64>() / total_weight;

    if alpha >= 1.0 {
        let mean = clipped_mean(&draws, total_weight, m, f64::INFINITY);
        return Ok(LambdaCalibration { alpha, clip_b: f64::INFINITY, consistency: 1.0 / mean, mean_sqrt: m });
    }

    let mut lo: f64 = 0.0;
    let mut hi = draws.iter().map(|d| (d.sqrt_lt - m).abs()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let f_lo = clipped_mean(&draws, total_weight, m, lo) - alpha;
    let f_hi = clipped_mean(&draws, total_weight, m, hi) - alpha;
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(Error::Bracket { lo, hi, f_lo, f_hi });
    }
    for _ in 0..400 {
        // Geometric steps while the bracket spans orders of magnitude.
        let mid = if lo > 0.0 && hi > 4.0 * lo {
            (lo * hi).sqrt()
        } else if lo == 0.0 && hi > 1.0 {
            hi.sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if clipped_mean(&draws, total_weight, m, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let b = 0.5 * (lo + hi);
    let mean = clipped_mean(&draws, total_weight, m, b);
    Ok(LambdaCalibration { alpha, clip_b: b, consistency: 1.0 / mean, mean_sqrt: m })
}

/// λ̄⁰(y) = c′·(E√λ̃ + H_b(√λ̃(y) − E√λ̃))².
pub fn lambda_bar(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    calib: &LambdaCalibration,
    y: f64,
    state_dist: &StateDistribution,
) -> f64 {
    calib.consistency * calib.log_clipped(log_lambda_tilde(model, reference, y, state_dist)).exp()
}

/// Relative per-state factors are kept within e^{±REL_LOG_LIMIT}.
const REL_LOG_LIMIT: f64 = 640.0;
/// Common-factor window for the whole gamma vector.
const ABS_LOG_LIMIT: f64 = 60.0;

/// Per-state factors for the robust filter: the classical Γ^i rescaled by
/// λ̄⁰/λ̃, so that their `state_dist` mixture equals λ̄⁰.
///
/// Computed in log space; ratios between states are confined to
/// e^{±640} and, if λ̄⁰ itself falls outside e^{±60}, the vector is shifted by
/// a common factor. Neither changes normalized filter output beyond the
/// e^{-640} relative floor.
pub fn robust_gamma_vector(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    calib: &LambdaCalibration,
    y: f64,
    state_dist: &StateDistribution,
) -> Vec<f64> {
    let n = model.n_states();
    let log_lt = log_lambda_tilde(model, reference, y, state_dist);
    let log_bar = calib.consistency.ln() + calib.log_clipped(log_lt);
    let shift = if log_bar > ABS_LOG_LIMIT {
        ABS_LOG_LIMIT - log_bar
    } else if log_bar < -ABS_LOG_LIMIT {
        -ABS_LOG_LIMIT - log_bar
    } else {
        0.0
    };
    (0..n)
        .map(|i| {
            let rel = (log_gamma(model, reference, y, i) - log_lt).clamp(-REL_LOG_LIMIT, REL_LOG_LIMIT);
            (log_bar + shift + rel).exp()
        })
        .collect()
}
