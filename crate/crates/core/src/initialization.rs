//! Starting values from a univariate Gaussian mixture fit: N components for
//! the classical run, N + 1 with a noise component for the robust run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure_change::phi;
use crate::model::{RegimeModel, StateDistribution};
use crate::robust_core::{mc_consistency_factor, scaled_mad, weighted_mad, weighted_median, WeightedSample};

const EM_MAX_ITER: usize = 2000;
const SD_FLOOR_REL: f64 = 1e-6;
const CONSISTENCY_REPS: usize = 2000;
/// A component carrying less than this many observations, or sitting on the
/// sd floor, has collapsed onto isolated points.
const MIN_COMPONENT_MASS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureFit {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub frequencies: Vec<f64>,
    /// `responsibilities[l][c]`, rows sum to one.
    pub responsibilities: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    /// Log-likelihood after every EM iteration of the selected restart.
    pub log_likelihood_path: Vec<f64>,
}

impl MixtureFit {
    pub fn n_components(&self) -> usize {
        self.means.len()
    }
}

fn component_log_density(y: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.918_938_533_204_672_8
}

/// E-step; returns responsibilities and the log-likelihood.
fn e_step(ys: &[f64], means: &[f64], sds: &[f64], freqs: &[f64]) -> (Vec<Vec<f64>>, f64) {
    let k = means.len();
    let mut ll = 0.0;
    let resp = ys
        .iter()
        .map(|&y| {
            let logs: Vec<f64> = (0..k)
                .map(|c| if freqs[c] > 0.0 { freqs[c].ln() + component_log_density(y, means[c], sds[c]) } else { f64::NEG_INFINITY })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = w.iter().sum();
            ll += max + s.ln();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect();
    (resp, ll)
}

fn kmeans_pp_centers(ys: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![ys[rng.random_range(0..ys.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = ys
            .iter()
            .map(|y| centers.iter().map(|c| (y - c) * (y - c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(ys[rng.random_range(0..ys.len())]);
            continue;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = ys.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(ys[pick]);
    }
    centers
}

struct Restart {
    means: Vec<f64>,
    sds: Vec<f64>,
    freqs: Vec<f64>,
    path: Vec<f64>,
    collapsed: bool,
}

/// Starting point for one EM run.
enum Seeding {
    /// Hard assignment to the nearest of these centers.
    Centers(Vec<f64>),
    /// Explicit parameters; the first M-step sees their responsibilities.
    Params { means: Vec<f64>, sds: Vec<f64>, freqs: Vec<f64> },
}

fn em_from(ys: &[f64], seeding: Seeding, sd_floor: f64, tol: f64) -> Option<Restart> {
    let n = ys.len() as f64;
    let (mut means, mut resp) = match seeding {
        Seeding::Centers(centers) => {
            let k = centers.len();
            let resp: Vec<Vec<f64>> = ys
                .iter()
                .map(|y| {
                    let best = (0..k)
                        .min_by(|&a, &b| (y - centers[a]).abs().total_cmp(&(y - centers[b]).abs()))
                        .unwrap_or(0);
                    let mut row = vec![0.0; k];
                    row[best] = 1.0;
                    row
                })
                .collect();
            (centers, resp)
        }
        Seeding::Params { means, sds, freqs } => {
            let (resp, _) = e_step(ys, &means, &sds, &freqs);
            (means, resp)
        }
    };
    let k = means.len();
    let mut sds = vec![0.0; k];
    let mut freqs = vec![0.0; k];
    let mut path = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITER {
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            freqs[c] = nk / n;
            if nk > 0.0 {
                means[c] = resp.iter().zip(ys).map(|(r, y)| r[c] * y).sum::<f64>() / nk;
                let var = resp.iter().zip(ys).map(|(r, y)| r[c] * (y - means[c]).powi(2)).sum::<f64>() / nk;
                sds[c] = var.sqrt().max(sd_floor);
            } else {
                sds[c] = sds[c].max(sd_floor);
            }
        }
        let (next, ll) = e_step(ys, &means, &sds, &freqs);
        if !ll.is_finite() {
            return None;
        }
        resp = next;
        path.push(ll);
        if ll - prev <= tol * (1.0 + ll.abs()) {
            break;
        }
        prev = ll;
    }
    let collapsed = (0..k).any(|c| freqs[c] * n < MIN_COMPONENT_MASS || sds[c] <= sd_floor);
    Some(Restart { means, sds, freqs, path, collapsed })
}

/// Restarts cycle through three seedings: k-means++; k-means++ for all but
/// one component plus a wide low-weight component at the median (a natural
/// home for scattered outliers); and evenly spaced quantiles.
fn seeding_for(restart: usize, ys: &[f64], k: usize, spread: f64, rng: &mut ChaCha8Rng) -> Seeding {
    match restart % 3 {
        1 if k >= 2 => {
            let mut means = kmeans_pp_centers(ys, k - 1, rng);
            let mut sorted = ys.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            let sd_all = {
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt()
            };
            means.push(median);
            let mut sds = vec![spread; k - 1];
            sds.push((3.0 * sd_all).max(spread));
            let mut freqs = vec![0.95 / (k - 1) as f64; k - 1];
            freqs.push(0.05);
            Seeding::Params { means, sds, freqs }
        }
        2 => {
            let mut sorted = ys.to_vec();
            sorted.sort_by(f64::total_cmp);
            let last = sorted.len() - 1;
            Seeding::Centers((0..k).map(|c| sorted[((c as f64 + 0.5) / k as f64 * last as f64).round() as usize]).collect())
        }
        _ => Seeding::Centers(kmeans_pp_centers(ys, k, rng)),
    }
}

/// EM for a univariate Gaussian mixture; the best of `restarts` runs by
/// log-likelihood, components ordered by ascending mean.
pub fn fit_gmm(ys: &[f64], n_components: usize, restarts: usize, seed: u64, tol: f64) -> Result<MixtureFit> {
    if n_components == 0 || ys.len() < 2 * n_components {
        return Err(Error::InvalidArgument(format!(
            "{} observations cannot support {} mixture components",
            ys.len(),
            n_components
        )));
    }
    let mad = scaled_mad(ys);
    let spread = if mad > 0.0 {
        mad
    } else {
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt()
    };
    let sd_floor = if spread > 0.0 { SD_FLOOR_REL * spread } else { f64::MIN_POSITIVE.sqrt() };

    let mut best: Option<Restart> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let seeding = seeding_for(r, ys, n_components, spread.max(sd_floor), &mut rng);
        if let Some(fit) = em_from(ys, seeding, sd_floor, tol) {
            // Non-collapsed fits first, then log-likelihood.
            let better = match &best {
                None => true,
                Some(b) => (!fit.collapsed, fit.path.last()) > (!b.collapsed, b.path.last()),
            };
            if better {
                best = Some(fit);
            }
        }
    }
    let best = best.ok_or(Error::DegenerateFit)?;

    let mut order: Vec<usize> = (0..n_components).collect();
    order.sort_by(|&a, &b| best.means[a].total_cmp(&best.means[b]).then(a.cmp(&b)));
    let means: Vec<f64> = order.iter().map(|&c| best.means[c]).collect();
    let sds: Vec<f64> = order.iter().map(|&c| best.sds[c]).collect();
    let frequencies: Vec<f64> = order.iter().map(|&c| best.freqs[c]).collect();
    let (responsibilities, log_likelihood) = e_step(ys, &means, &sds, &frequencies);
    Ok(MixtureFit { means, sds, frequencies, responsibilities, log_likelihood, log_likelihood_path: best.path })
}

/// Starting model and state law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Initialization {
    pub model: RegimeModel,
    pub x0: StateDistribution,
    /// `weights[l][i]`: membership of observation l in state i.
    pub weights: Vec<Vec<f64>>,
    /// Index of the noise component in the N+1 fit (robust only).
    pub noise_component: Option<usize>,
    pub fit: MixtureFit,
}

const GMM_RESTARTS: usize = 10;
const GMM_TOL: f64 = 1e-10;

/// Π with every column equal to `freqs`.
fn independent_transition(freqs: &[f64]) -> Vec<Vec<f64>> {
    freqs.iter().map(|&p| vec![p; freqs.len()]).collect()
}

/// Component moments as drifts and vols; Π and x₀ from the frequencies.
pub fn classical_init(ys: &[f64], n: usize, seed: u64) -> Result<Initialization> {
    let fit = fit_gmm(ys, n, GMM_RESTARTS, seed, GMM_TOL)?;
    let model =
        RegimeModel::with_normalized_columns(independent_transition(&fit.frequencies), fit.means.clone(), fit.sds.clone())?;
    let x0 = StateDistribution::normalized(fit.frequencies.clone())?;
    Ok(Initialization { model, x0, weights: fit.responsibilities.clone(), noise_component: None, fit })
}

/// How the noise component's responsibility is handed to the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReassignment {
    /// Each point's noise share goes to one retained component, drawn with
    /// probabilities proportional to the component frequencies.
    #[default]
    Random,
    /// Split by posterior probability under the retained components.
    Posterior,
}

/// Lowest frequency wins; ties go to the widest component.
fn noise_index(fit: &MixtureFit) -> usize {
    (0..fit.n_components())
        .min_by(|&a, &b| {
            fit.frequencies[a]
                .total_cmp(&fit.frequencies[b])
                .then(fit.sds[b].total_cmp(&fit.sds[a]))
        })
        .unwrap_or(0)
}

/// N + 1 component fit; the noise component is folded into the others and
/// each state gets the weighted median and consistency-scaled weighted MAD
/// of the data.
pub fn robust_init(ys: &[f64], n: usize, seed: u64, reassignment: NoiseReassignment) -> Result<Initialization> {
    let fit = fit_gmm(ys, n + 1, GMM_RESTARTS, seed, GMM_TOL)?;
    let noise = noise_index(&fit);
    let kept: Vec<usize> = (0..n + 1).filter(|&c| c != noise).collect();
    let kept_freq: Vec<f64> = kept.iter().map(|&c| fit.frequencies[c]).collect();
    let kept_total: f64 = kept_freq.iter().sum();
    if !(kept_total > 0.0) {
        return Err(Error::DegenerateFit);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(ys.len());
    for (l, &y) in ys.iter().enumerate() {
        let r = &fit.responsibilities[l];
        let mut row: Vec<f64> = kept.iter().map(|&c| r[c]).collect();
        let share = r[noise];
        match reassignment {
            NoiseReassignment::Random => {
                let mut u = rng.random::<f64>() * kept_total;
                let mut pick = n - 1;
                for (i, f) in kept_freq.iter().enumerate() {
                    if u < *f {
                        pick = i;
                        break;
                    }
                    u -= f;
                }
                row[pick] += share;
            }
            NoiseReassignment::Posterior => {
                let post: Vec<f64> = kept
                    .iter()
                    .map(|&c| fit.frequencies[c] * phi((y - fit.means[c]) / fit.sds[c]) / fit.sds[c])
                    .collect();
                let total: f64 = post.iter().sum();
                for (i, p) in post.iter().enumerate() {
                    row[i] += if total > 0.0 { share * p / total } else { share * kept_freq[i] / kept_total };
                }
            }
        }
        let s: f64 = row.iter().sum();
        weights.push(row.into_iter().map(|w| w / s).collect());
    }

    let floor = SD_FLOOR_REL * scaled_mad(ys).max(f64::MIN_POSITIVE);
    let mut drift = Vec::with_capacity(n);
    let mut vol = Vec::with_capacity(n);
    let mut freqs = Vec::with_capacity(n);
    for i in 0..n {
        let w: Vec<f64> = weights.iter().map(|row| row[i]).collect();
        freqs.push(w.iter().sum::<f64>() / ys.len() as f64);
        match WeightedSample::new(ys.to_vec(), w.clone()) {
            Ok(sample) => {
                let center = weighted_median(&sample);
                let c = mc_consistency_factor(&w, CONSISTENCY_REPS, seed.wrapping_add(i as u64))?;
                drift.push(center);
                vol.push(weighted_mad(&sample, center, c).max(floor));
            }
            Err(Error::ZeroWeights) => {
                let c = kept[i];
                drift.push(fit.means[c]);
                vol.push(fit.sds[c].max(floor));
            }
            Err(e) => return Err(e),
        }
    }
    let model = RegimeModel::with_normalized_columns(independent_transition(&freqs), drift, vol)?;
    let x0 = StateDistribution::normalized(freqs)?;
    Ok(Initialization { model, x0, weights, noise_component: Some(noise), fit })
}
