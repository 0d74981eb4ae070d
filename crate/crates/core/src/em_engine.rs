//! Batch-recursive EM: filters over each batch, then parameter updates from
//! the filtered sums (classical) or from weighted robust estimators fed by
//! the same filters (robust).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Breakdown, Error, Result};
use crate::initialization::{classical_init, robust_init, Initialization, NoiseReassignment};
use crate::measure_change::{
    calibrate_clipping, gamma_vector, robust_gamma_vector, LambdaCalibration, ReferenceMeasure, ReferenceScale,
};
use crate::model::{RegimeModel, ReturnSeries, StateDistribution};
use crate::recursive_filters::{homogeneous, init_filters, FilterBank, FilterEstimates};
use crate::robust_core::{
    fsbp, mbre_if, mc_consistency_factor, scaled_mad, weighted_mad, weighted_median, MbreConstants, WeightedSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Classical,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// N-component mixture moments.
    Mixture,
    /// N+1 components with a noise component, weighted median and MAD.
    RobustMixture,
}

/// Drift/vol update used in robust mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustUpdate {
    /// Weighted median/MAD on the first batch, then one MBRE step per batch.
    OneStepMbre,
    /// Weighted mean and variance, i.e. no clipping at all.
    WeightedMle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_len: usize,
    pub mode: Mode,
    /// Target E λ̄ for the clipped likelihood ratio.
    pub alpha: f64,
    /// σ̂ floor relative to the MAD of the initialization window.
    pub mad_floor_rel: f64,
    pub seed: u64,
    pub init: InitKind,
    pub update: RobustUpdate,
    pub reference: ReferenceScale,
    pub calibration_draws: usize,
    pub mbre: MbreConstants,
    pub reassignment: NoiseReassignment,
    /// Tail probability for outlier flags.
    pub flag_quantile: f64,
    /// Number of leading batches used for the starting values; `None` uses
    /// the whole series.
    pub init_batches: Option<usize>,
}

/// Starting values come from the first five batches.
pub const DEFAULT_INIT_BATCHES: usize = 5;

impl BatchConfig {
    pub fn classical(batch_len: usize, seed: u64) -> Self {
        Self {
            batch_len,
            mode: Mode::Classical,
            alpha: 1.0,
            mad_floor_rel: 1e-4,
            seed,
            init: InitKind::Mixture,
            update: RobustUpdate::WeightedMle,
            reference: ReferenceScale::Standard,
            calibration_draws: 200_000,
            mbre: MbreConstants::default(),
            reassignment: NoiseReassignment::Random,
            flag_quantile: 0.01,
            init_batches: Some(DEFAULT_INIT_BATCHES),
        }
    }

    pub fn robust(batch_len: usize, seed: u64) -> Self {
        Self {
            mode: Mode::Robust,
            alpha: 0.95,
            init: InitKind::RobustMixture,
            update: RobustUpdate::OneStepMbre,
            reference: ReferenceScale::Mad,
            ..Self::classical(batch_len, seed)
        }
    }

    pub fn for_mode(mode: Mode, batch_len: usize, seed: u64) -> Self {
        match mode {
            Mode::Classical => Self::classical(batch_len, seed),
            Mode::Robust => Self::robust(batch_len, seed),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_len < 2 {
            return Err(Error::InvalidArgument(format!("batch_len = {} < 2", self.batch_len)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.flag_quantile > 0.0 && self.flag_quantile < 1.0) {
            return Err(Error::InvalidArgument(format!("flag quantile {} outside (0, 1)", self.flag_quantile)));
        }
        if self.init_batches == Some(0) {
            return Err(Error::InvalidArgument("init_batches must be positive".into()));
        }
        if !(self.mad_floor_rel > 0.0) {
            return Err(Error::InvalidArgument("mad_floor_rel must be positive".into()));
        }
        Ok(())
    }
}

/// Smoothed occupation contributions v_l^i of each observation in the
/// current batch, carried forward with the filters: Σ_l v_l^i = η(O^i X)
/// and Σ_i v_l^i = η(X) at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTriangle {
    n: usize,
    /// `v[l][i]` is a length-N unnormalized vector.
    v: Vec<Vec<Vec<f64>>>,
}

impl WeightTriangle {
    pub fn new(n: usize) -> Self {
        Self { n, v: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Adds observation l = k and advances the earlier rows; `prev_eta_x`
    /// is η_{k-1}(X), the bank state before the step.
    pub fn step(&mut self, model: &RegimeModel, gammas: &[f64], prev_eta_x: &[f64]) {
        for row in self.v.iter_mut() {
            for vi in row.iter_mut() {
                *vi = homogeneous(model, gammas, vi);
            }
        }
        let new_row = (0..self.n)
            .map(|r| {
                let a = gammas[r] * prev_eta_x[r];
                (0..self.n).map(|j| a * model.pi(j, r)).collect()
            })
            .collect();
        self.v.push(new_row);
    }

    /// Divides every entry by `c`, matching a bank rescale.
    pub fn rescale(&mut self, c: f64) {
        for x in self.v.iter_mut().flatten().flatten() {
            *x /= c;
        }
    }

    fn totals(&self) -> Vec<Vec<f64>> {
        self.v.iter().map(|row| row.iter().map(|vi| vi.iter().sum()).collect()).collect()
    }

    /// w⁰_{i,l}: `weights()[i][l]`, each state's row summing to one. A state
    /// with no occupation gets all-zero weights.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let t = self.totals();
        (0..self.n)
            .map(|i| {
                let s: f64 = t.iter().map(|row| row[i]).sum();
                t.iter().map(|row| if s > 0.0 { row[i] / s } else { 0.0 }).collect()
            })
            .collect()
    }

    /// P(x_{l-1} = e_i | batch observations): `memberships()[l][i]`.
    pub fn memberships(&self) -> Vec<Vec<f64>> {
        self.totals()
            .into_iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| if s > 0.0 { x / s } else { 0.0 }).collect()
            })
            .collect()
    }
}

/// Weights ⟨X̂_{l-1}, e_i⟩ from the filtered (not smoothed) state path,
/// normalized per state. Reported for comparison only.
pub fn filtered_path_weights(x_hat_path: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x_hat_path.first().map(|x| x.len()).unwrap_or(0);
    (0..n)
        .map(|i| {
            let s: f64 = x_hat_path.iter().map(|x| x[i]).sum();
            x_hat_path.iter().map(|x| if s > 0.0 { x[i] / s } else { 0.0 }).collect()
        })
        .collect()
}

/// Per-state parameters after an M-step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateUpdate {
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
    pub frozen: Vec<bool>,
}

fn freeze_threshold(k: usize) -> f64 {
    1e-6 * k as f64
}

/// f̂_i = T̂^i(y)/Ô^i, σ̂_i² = (T̂^i(y²) − 2f̂_i T̂^i(y) + f̂_i² Ô^i)/Ô^i; states
/// with Ô^i ≤ 1e-6·k keep `prev`.
pub fn m_step_classical(est: &FilterEstimates, k: usize, prev: &RegimeModel) -> Result<StateUpdate> {
    let n = est.o_hat.len();
    let eps = freeze_threshold(k);
    let mut out = StateUpdate { drift: prev.drift().to_vec(), vol: prev.vol().to_vec(), frozen: vec![false; n] };
    for i in 0..n {
        let o = est.o_hat[i];
        if !(o > eps) {
            out.frozen[i] = true;
            continue;
        }
        let f = est.t1_hat[i] / o;
        let rad = (est.t2_hat[i] - 2.0 * f * est.t1_hat[i] + f * f * o) / o;
        let scale = (est.t2_hat[i] / o).abs().max(f64::MIN_POSITIVE);
        if rad < -1e-12 * scale {
            return Err(Error::NegativeRadicand { state: i, value: rad });
        }
        out.drift[i] = f;
        out.vol[i] = rad.max(0.0).sqrt();
    }
    Ok(out)
}

/// The same estimates as weighted sums over the batch: f̂_i = Σ_l w_{i,l} y_l,
/// σ̂_i² = Σ_l w_{i,l}(y_l − f̂_i)².
pub fn m_step_weighted(weights: &[Vec<f64>], ys: &[f64], o_hat: &[f64], k: usize, prev: &RegimeModel) -> StateUpdate {
    let n = weights.len();
    let eps = freeze_threshold(k);
    let mut out = StateUpdate { drift: prev.drift().to_vec(), vol: prev.vol().to_vec(), frozen: vec![false; n] };
    for i in 0..n {
        if !(o_hat[i] > eps) {
            out.frozen[i] = true;
            continue;
        }
        let f: f64 = weights[i].iter().zip(ys).map(|(w, y)| w * y).sum();
        let var: f64 = weights[i].iter().zip(ys).map(|(w, y)| w * (y - f) * (y - f)).sum();
        out.drift[i] = f;
        out.vol[i] = var.sqrt();
    }
    out
}

/// Robust drift/vol update. On the first batch: weighted median and weighted
/// MAD with a Monte-Carlo consistency factor for the actual weights. After
/// that: one MBRE step from `prev`, σ̂ = σ⁰·exp(Σ w ψ_scale). σ̂ ≥ `vol_floor`.
#[allow(clippy::too_many_arguments)]
pub fn m1_robust(
    weights: &[Vec<f64>],
    ys: &[f64],
    o_hat: &[f64],
    prev: &RegimeModel,
    consts: &MbreConstants,
    first_batch: bool,
    vol_floor: f64,
    seed: u64,
) -> Result<StateUpdate> {
    let n = weights.len();
    let k = ys.len();
    let eps = freeze_threshold(k);
    let mut out = StateUpdate { drift: prev.drift().to_vec(), vol: prev.vol().to_vec(), frozen: vec![false; n] };
    for i in 0..n {
        if !(o_hat[i] > eps) {
            out.frozen[i] = true;
            continue;
        }
        let w = &weights[i];
        if first_batch {
            let sample = WeightedSample::new(ys.to_vec(), w.clone())?;
            let center = weighted_median(&sample);
            let c = mc_consistency_factor(w, 2000, seed.wrapping_add(i as u64))?;
            out.drift[i] = center;
            out.vol[i] = weighted_mad(&sample, center, c).max(vol_floor);
        } else {
            let (f0, s0) = (prev.drift()[i], prev.vol()[i]);
            let (mut loc, mut scale) = (0.0, 0.0);
            for (wl, y) in w.iter().zip(ys) {
                let (pl, ps) = mbre_if((y - f0) / s0, consts);
                loc += wl * pl;
                scale += wl * ps;
            }
            out.drift[i] = f0 + s0 * loc;
            out.vol[i] = (s0 * scale.exp()).max(vol_floor);
        }
    }
    Ok(out)
}

/// π̂_ji = Ĵ^{ji}/Ô^i with columns renormalized; columns of states with
/// Ô^i ≤ 1e-6·k are copied from `prev`.
pub fn m2_pi(est: &FilterEstimates, k: usize, prev: &RegimeModel) -> Vec<Vec<f64>> {
    let n = est.o_hat.len();
    let eps = freeze_threshold(k);
    let mut pi: Vec<Vec<f64>> = prev.transition().to_vec();
    for i in 0..n {
        let o = est.o_hat[i];
        if !(o > eps) {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|j| (est.j_hat[j][i] / o).max(0.0)).collect();
        let s: f64 = col.iter().sum();
        if s > 0.0 && s.is_finite() {
            for j in 0..n {
                pi[j][i] = col[j] / s;
            }
        }
    }
    pi
}

/// Norm of the unclipped maximum-likelihood influence function
/// (u, (u² − 1)/2) at the standard normal.
#[inline]
pub fn mle_if_norm(u: f64) -> f64 {
    u.hypot(0.5 * (u * u - 1.0))
}

const FLAG_CALIBRATION_DRAWS: usize = 200_000;

/// (1 − q) quantile of the IF norm when the observation follows its own
/// state's normal law, by Monte Carlo.
pub fn flag_threshold(q: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut norms: Vec<f64> = (0..FLAG_CALIBRATION_DRAWS)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mle_if_norm(z)
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    let idx = (((1.0 - q) * FLAG_CALIBRATION_DRAWS as f64).ceil() as usize).clamp(1, FLAG_CALIBRATION_DRAWS) - 1;
    norms[idx]
}

/// Outlier scores Σ_i m_{i,l}·|IF(u_{i,l})| with u = (y − f̂_i)/σ̂_i.
pub fn outlier_scores(memberships: &[Vec<f64>], ys: &[f64], model: &RegimeModel) -> Vec<f64> {
    memberships
        .iter()
        .zip(ys)
        .map(|(m, y)| {
            m.iter()
                .enumerate()
                .map(|(i, mi)| if *mi > 0.0 { mi * mle_if_norm((y - model.drift()[i]) / model.vol()[i]) } else { 0.0 })
                .sum()
        })
        .collect()
}

pub fn flag_outliers(memberships: &[Vec<f64>], ys: &[f64], model: &RegimeModel, threshold: f64) -> (Vec<f64>, Vec<bool>) {
    let scores = outlier_scores(memberships, ys, model);
    let flags = scores.iter().map(|s| *s > threshold).collect();
    (scores, flags)
}

/// max_l w² / Σ_l w² per state.
pub fn noether_ratio(weights: &[Vec<f64>]) -> Vec<f64> {
    weights
        .iter()
        .map(|w| {
            let s2: f64 = w.iter().map(|x| x * x).sum();
            if s2 > 0.0 {
                w.iter().map(|x| x * x).fold(0.0, f64::max) / s2
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based position in the series.
    pub k: usize,
    pub batch: usize,
    pub y: f64,
    /// X̂_k after observing y_k.
    pub state_probs: Vec<f64>,
    /// ⟨f, X̂_k⟩ with the parameters in force, a forecast of y_{k+1}.
    pub forecast_next: f64,
    pub score: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub index: usize,
    /// 1-based position of the first observation.
    pub start: usize,
    pub len: usize,
    pub model: RegimeModel,
    pub frozen: Vec<bool>,
    pub calibration: Option<LambdaCalibration>,
    /// True when α was below (E√λ̃)² and b = 0 was used.
    pub calibration_fallback: bool,
    pub noether: Vec<f64>,
    pub fsbp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationTrace {
    pub config: BatchConfig,
    pub n_states: usize,
    pub sigma_bar: f64,
    pub vol_floor: f64,
    pub flag_threshold: f64,
    pub initial_model: RegimeModel,
    pub initial_x0: StateDistribution,
    pub noise_component: Option<usize>,
    pub batches: Vec<BatchRecord>,
    pub steps: Vec<StepRecord>,
    pub breakdown: Option<Breakdown>,
}

impl EstimationTrace {
    pub fn final_model(&self) -> &RegimeModel {
        self.batches.last().map(|b| &b.model).unwrap_or(&self.initial_model)
    }

    pub fn completed(&self) -> bool {
        self.breakdown.is_none()
    }
}

fn breakdown_at(k: usize, y: f64, quantity: String) -> Breakdown {
    Breakdown { k, y, quantity }
}

/// Re-keys a breakdown raised inside a batch to the global index.
fn globalize(err: Error, offset: usize) -> Error {
    match err {
        Error::Breakdown(mut b) => {
            b.k += offset;
            Error::Breakdown(b)
        }
        other => other,
    }
}

fn calibrate_batch(
    model: &RegimeModel,
    reference: &ReferenceMeasure,
    x_hat: &StateDistribution,
    cfg: &BatchConfig,
    batch: usize,
) -> Result<(LambdaCalibration, bool)> {
    let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(batch as u64);
    match calibrate_clipping(model, reference, x_hat, cfg.alpha, cfg.calibration_draws, seed) {
        Ok(c) => Ok((c, false)),
        Err(Error::Bracket { .. }) => {
            // α below (E√λ̃)²: clip everything to the mean.
            let m = calibrate_clipping(model, reference, x_hat, 1.0, cfg.calibration_draws, seed)?.mean_sqrt;
            Ok((LambdaCalibration { alpha: cfg.alpha, clip_b: 0.0, consistency: 1.0 / (m * m), mean_sqrt: m }, true))
        }
        Err(e) => Err(e),
    }
}

/// Everything a run derives before the first batch: starting values, the
/// reference scale, the σ̂ floor and the flag threshold. All of them come from
/// the initialization window only.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub init: Initialization,
    pub reference: ReferenceMeasure,
    pub vol_floor: f64,
    pub flag_threshold: f64,
}

pub fn prepare(ys: &[f64], n: usize, cfg: &BatchConfig) -> Result<RunSetup> {
    cfg.validate()?;
    let window = cfg.init_batches.map_or(ys.len(), |b| (b * cfg.batch_len).min(ys.len()));
    let ys = &ys[..window];
    let reference = ReferenceMeasure::from_data(cfg.reference, ys)?;
    let global_mad = scaled_mad(ys);
    let vol_floor = cfg.mad_floor_rel * if global_mad > 0.0 { global_mad } else { reference.sigma_bar() };
    let init = match cfg.init {
        InitKind::Mixture => classical_init(ys, n, cfg.seed)?,
        InitKind::RobustMixture => robust_init(ys, n, cfg.seed, cfg.reassignment)?,
    };
    let flag_threshold = flag_threshold(cfg.flag_quantile, cfg.seed);
    Ok(RunSetup { init, reference, vol_floor, flag_threshold })
}

/// Runs the batch-recursive estimator over the whole series. A classical
/// breakdown ends the run and is recorded in the trace; other failures are
/// returned as errors.
pub fn run(series: &ReturnSeries, n: usize, cfg: &BatchConfig) -> Result<EstimationTrace> {
    if series.len() < cfg.batch_len {
        return Err(Error::InvalidArgument(format!("{} observations < batch_len {}", series.len(), cfg.batch_len)));
    }
    let setup = prepare(series.values(), n, cfg)?;
    run_with_setup(series, cfg, &setup)
}

/// Batch loop from a fixed setup. Batch m only sees observations up to the
/// end of batch m.
pub fn run_with_setup(series: &ReturnSeries, cfg: &BatchConfig, setup: &RunSetup) -> Result<EstimationTrace> {
    cfg.validate()?;
    let ys = series.values();
    let RunSetup { init, reference, vol_floor, flag_threshold: threshold } = setup.clone();
    let n = init.model.n_states();
    let mut trace = EstimationTrace {
        config: cfg.clone(),
        n_states: n,
        sigma_bar: reference.sigma_bar(),
        vol_floor,
        flag_threshold: threshold,
        initial_model: init.model.clone(),
        initial_x0: init.x0.clone(),
        noise_component: init.noise_component,
        batches: Vec::new(),
        steps: Vec::new(),
        breakdown: None,
    };

    let mut model = init.model.clone();
    let mut x_hat = init.x0.clone();
    for (b, chunk) in ys.chunks(cfg.batch_len).enumerate() {
        let offset = b * cfg.batch_len;
        match run_batch(&model, &x_hat, chunk, offset, b, &reference, vol_floor, threshold, cfg) {
            Ok((record, steps, next_x)) => {
                model = record.model.clone();
                x_hat = next_x;
                trace.batches.push(record);
                trace.steps.extend(steps);
            }
            Err(Error::Breakdown(bd)) => {
                trace.breakdown = Some(bd);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}

type BatchOutcome = (BatchRecord, Vec<StepRecord>, StateDistribution);

#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &RegimeModel,
    x_start: &StateDistribution,
    ys: &[f64],
    offset: usize,
    batch: usize,
    reference: &ReferenceMeasure,
    vol_floor: f64,
    threshold: f64,
    cfg: &BatchConfig,
) -> Result<BatchOutcome> {
    let n = model.n_states();
    let k = ys.len();
    let (calibration, fallback) = match cfg.mode {
        Mode::Robust => {
            let (c, f) = calibrate_batch(model, reference, x_start, cfg, batch)?;
            (Some(c), f)
        }
        Mode::Classical => (None, false),
    };

    let mut bank: FilterBank = init_filters(x_start);
    let mut triangle = WeightTriangle::new(n);
    let mut state_path = Vec::with_capacity(k);
    for (l, &y) in ys.iter().enumerate() {
        let global_k = offset + l + 1;
        let gammas = match &calibration {
            None => gamma_vector(model, reference, y)
                .map_err(|e| Error::Breakdown(breakdown_at(global_k, y, e.to_string())))?,
            Some(c) => {
                let current = StateDistribution::normalized(bank.eta_x.clone())
                    .map_err(|_| Error::Breakdown(breakdown_at(global_k, y, "state estimate lost mass".into())))?;
                robust_gamma_vector(model, reference, c, y, &current)
            }
        };
        let prev_x = bank.eta_x.clone();
        bank = bank.step(model, &gammas, y).map_err(|e| globalize(e, offset))?;
        let c = bank.mass();
        bank = bank.rescale();
        triangle.step(model, &gammas, &prev_x);
        triangle.rescale(c);
        state_path.push(bank.eta_x.clone());
    }

    let est = bank.normalize().map_err(|e| globalize(e, offset))?;
    let weights = triangle.weights();
    let update = match (cfg.mode, cfg.update) {
        (Mode::Classical, _) => m_step_classical(&est, k, model)?,
        (Mode::Robust, RobustUpdate::WeightedMle) => m_step_weighted(&weights, ys, &est.o_hat, k, model),
        (Mode::Robust, RobustUpdate::OneStepMbre) => m1_robust(
            &weights,
            ys,
            &est.o_hat,
            model,
            &cfg.mbre,
            batch == 0,
            vol_floor,
            cfg.seed.wrapping_add(0x51_0000 + batch as u64),
        )?,
    };
    let pi = m2_pi(&est, k, model);
    let next = match RegimeModel::with_normalized_columns(pi, update.drift.clone(), update.vol.clone()) {
        Ok(m) => m,
        Err(Error::InvalidModel(msg)) => {
            let y_last = ys[k - 1];
            return Err(Error::Breakdown(breakdown_at(offset + k, y_last, format!("M-step produced {msg}"))));
        }
        Err(e) => return Err(e),
    };

    let memberships = triangle.memberships();
    let (scores, flags) = flag_outliers(&memberships, ys, &next, threshold);
    let steps = (0..k)
        .map(|l| {
            let probs: Vec<f64> = {
                let s: f64 = state_path[l].iter().sum();
                state_path[l].iter().map(|x| x / s).collect()
            };
            let forecast_next = probs.iter().zip(model.drift()).map(|(p, f)| p * f).sum();
            StepRecord {
                k: offset + l + 1,
                batch,
                y: ys[l],
                state_probs: probs,
                forecast_next,
                score: scores[l],
                flagged: flags[l],
            }
        })
        .collect();

    let fsbp_fraction = weights.iter().map(|w| fsbp(w).map(|f| f.fraction()).unwrap_or(0.0)).collect();
    let record = BatchRecord {
        index: batch,
        start: offset + 1,
        len: k,
        model: next,
        frozen: update.frozen,
        calibration,
        calibration_fallback: fallback,
        noether: noether_ratio(&weights),
        fsbp: fsbp_fraction,
    };
    Ok((record, steps, est.state))
}

/// Per-step CSV: k, batch, y, p_1..p_N, forecast_next, score, flagged.
pub fn write_steps_csv<W: Write>(trace: &EstimationTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv { line: 0, message: e.to_string() };
    let mut header = vec!["k".to_string(), "batch".into(), "y".into()];
    header.extend((1..=trace.n_states).map(|i| format!("p_{i}")));
    header.extend(["forecast_next".to_string(), "score".into(), "flagged".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for s in &trace.steps {
        let mut row = vec![s.k.to_string(), s.batch.to_string(), s.y.to_string()];
        row.extend(s.state_probs.iter().map(|p| p.to_string()));
        row.extend([s.forecast_next.to_string(), s.score.to_string(), s.flagged.to_string()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-batch CSV: batch, start, len, f_i, sigma_i, pi_j_i (column-major),
/// noether_i, frozen_i, clip_b.
pub fn write_batches_csv<W: Write>(trace: &EstimationTrace, out: W) -> Result<()> {
    let n = trace.n_states;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv { line: 0, message: e.to_string() };
    let mut header = vec!["batch".to_string(), "start".into(), "len".into()];
    header.extend((1..=n).map(|i| format!("f_{i}")));
    header.extend((1..=n).map(|i| format!("sigma_{i}")));
    for i in 1..=n {
        header.extend((1..=n).map(|j| format!("pi_{j}_{i}")));
    }
    header.extend((1..=n).map(|i| format!("noether_{i}")));
    header.extend((1..=n).map(|i| format!("frozen_{i}")));
    header.push("clip_b".into());
    w.write_record(&header).map_err(csv_err)?;
    for b in &trace.batches {
        let mut row = vec![b.index.to_string(), b.start.to_string(), b.len.to_string()];
        row.extend(b.model.drift().iter().map(|v| v.to_string()));
        row.extend(b.model.vol().iter().map(|v| v.to_string()));
        for i in 0..n {
            row.extend((0..n).map(|j| b.model.pi(j, i).to_string()));
        }
        row.extend(b.noether.iter().map(|v| v.to_string()));
        row.extend(b.frozen.iter().map(|v| v.to_string()));
        row.push(b.calibration.map(|c| c.clip_b.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
