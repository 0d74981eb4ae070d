//! Synthetic regime-switching return paths and exogenous (substitutive)
//! outlier injection.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{stationary_distribution, RegimeModel, ReturnSeries, StateDistribution};
use crate::so_optimal::{DiscrepancyMoments, LeastFavorable};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedPath {
    /// x_0..x_T.
    pub states: Vec<usize>,
    pub clean_returns: ReturnSeries,
    pub observed_returns: ReturnSeries,
    pub outlier_mask: Vec<bool>,
}

/// Law of the distortion Y^di; drawn independently of the chain.
pub trait DistortionLaw: Send + Sync + std::fmt::Debug {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMass(pub f64);

impl DistortionLaw for PointMass {
    fn sample(&self, _rng: &mut ChaCha8Rng) -> f64 {
        self.0
    }
    fn describe(&self) -> String {
        format!("point({})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalDistortion {
    pub mean: f64,
    pub sd: f64,
}

impl DistortionLaw for NormalDistortion {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }
    fn describe(&self) -> String {
        format!("normal({}, {})", self.mean, self.sd)
    }
}

#[derive(Debug, Clone)]
pub enum Mechanism {
    None,
    /// 1-based positions and the values written there.
    FixedPositions(Vec<(usize, f64)>),
    /// Each observation is replaced with probability `rate`.
    IidSwitch(Arc<dyn DistortionLaw>),
}

#[derive(Debug, Clone)]
pub struct ContaminationSpec {
    pub rate: f64,
    pub mechanism: Mechanism,
}

impl ContaminationSpec {
    pub fn none() -> Self {
        Self { rate: 0.0, mechanism: Mechanism::None }
    }

    pub fn fixed(positions: Vec<(usize, f64)>) -> Self {
        Self { rate: 0.0, mechanism: Mechanism::FixedPositions(positions) }
    }

    pub fn iid(rate: f64, law: Arc<dyn DistortionLaw>) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("contamination rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, mechanism: Mechanism::IidSwitch(law) })
    }

    pub fn describe(&self) -> String {
        match &self.mechanism {
            Mechanism::None => "none".into(),
            Mechanism::FixedPositions(p) => {
                let items: Vec<String> = p.iter().map(|(i, v)| format!("{i}={v}")).collect();
                format!("fixed:{}", items.join(","))
            }
            Mechanism::IidSwitch(law) => format!("iid:{}:{}", self.rate, law.describe()),
        }
    }
}

/// Sixteen years of monthly returns.
pub const DEMO_HORIZON: usize = 192;

/// Two-regime monthly model: a volatile bear state and a calm bull state.
pub fn demo_model() -> RegimeModel {
    RegimeModel::new(vec![vec![0.9, 0.05], vec![0.1, 0.95]], vec![-0.02, 0.01], vec![0.06, 0.02])
        .expect("demo parameters are valid")
}

/// Outlier positions used by the planted-outlier experiments (1-based).
pub const PLANTED_POSITIONS: [usize; 4] = [40, 80, 130, 140];
pub const CONSIDERABLE_SDS: f64 = 6.0;
pub const SEVERE_SDS: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Considerable,
    Severe,
}

/// Planted outliers at [`PLANTED_POSITIONS`], each at the stationary mean
/// plus 6 (considerable) or 25 (severe) stationary standard deviations.
pub fn preset(model: &RegimeModel, kind: Preset) -> Result<ContaminationSpec> {
    let pi = stationary_distribution(model)?;
    let (mean, sd) = model.mixture_moments(&pi);
    let k = match kind {
        Preset::Considerable => CONSIDERABLE_SDS,
        Preset::Severe => SEVERE_SDS,
    };
    Ok(ContaminationSpec::fixed(PLANTED_POSITIONS.iter().map(|&p| (p, mean + k * sd)).collect()))
}

/// y_{k+1} = f_{x_k} + σ_{x_k} w_{k+1} with x_{k+1} drawn from column x_k of Π.
pub fn simulate_hmm(model: &RegimeModel, x0: &StateDistribution, horizon: usize, seed: u64) -> Result<SimulatedPath> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    if x0.len() != model.n_states() {
        return Err(Error::InvalidArgument("x0 length does not match the model".into()));
    }
    let n = model.n_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<WeightedIndex<f64>> = (0..n)
        .map(|i| WeightedIndex::new((0..n).map(|j| model.pi(j, i))).expect("stochastic column"))
        .collect();
    let mut state = WeightedIndex::new(x0.probs()).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(&mut rng);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut ys = Vec::with_capacity(horizon);
    states.push(state);
    for _ in 0..horizon {
        let w: f64 = StandardNormal.sample(&mut rng);
        ys.push(model.drift()[state] + model.vol()[state] * w);
        state = columns[state].sample(&mut rng);
        states.push(state);
    }
    let clean = ReturnSeries::new(ys)?;
    Ok(SimulatedPath {
        states,
        observed_returns: clean.clone(),
        clean_returns: clean,
        outlier_mask: vec![false; horizon],
    })
}

/// Replaces observations according to `spec`. Only `observed_returns` and
/// `outlier_mask` change; draws come from their own RNG stream.
pub fn contaminate(path: &SimulatedPath, spec: &ContaminationSpec, seed: u64) -> Result<SimulatedPath> {
    let len = path.clean_returns.len();
    let mut observed = path.observed_returns.values().to_vec();
    let mut mask = path.outlier_mask.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    match &spec.mechanism {
        Mechanism::None => {}
        Mechanism::FixedPositions(positions) => {
            for &(position, value) in positions {
                if position == 0 || position > len {
                    return Err(Error::PositionOutOfRange { position, len });
                }
                observed[position - 1] = value;
                mask[position - 1] = true;
            }
        }
        Mechanism::IidSwitch(law) => {
            for (y, m) in observed.iter_mut().zip(mask.iter_mut()) {
                if rng.random::<f64>() < spec.rate {
                    *y = law.sample(&mut rng);
                    *m = true;
                }
            }
        }
    }
    let mut observed_returns = ReturnSeries::new(observed)?;
    if let Some(ts) = path.observed_returns.timestamps() {
        observed_returns = observed_returns.with_timestamps(ts.to_vec())?;
    }
    Ok(SimulatedPath {
        states: path.states.clone(),
        clean_returns: path.clean_returns.clone(),
        observed_returns,
        outlier_mask: mask,
    })
}

/// Owned least-favorable distortion law for scalar ideal laws.
#[derive(Debug, Clone)]
pub struct LeastFavorableDistortion<L> {
    law: L,
    rate: f64,
    rho: f64,
}

impl<L: DiscrepancyMoments<1> + Clone + Send + std::fmt::Debug> DistortionLaw for LeastFavorableDistortion<L> {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let lf = LeastFavorable::new(&self.law, self.rate, self.rho).expect("rho checked at construction");
        lf.sample(rng)[0]
    }
    fn describe(&self) -> String {
        format!("least_favorable(rate={}, rho={})", self.rate, self.rho)
    }
}

/// Sampler for the least-favorable contamination of the given ideal law;
/// fails if `rho` does not satisfy the unit-mass condition to 1e-6.
pub fn least_favorable_contaminator<L>(law: L, rate: f64, rho: f64) -> Result<LeastFavorableDistortion<L>>
where
    L: DiscrepancyMoments<1> + Clone + Send + std::fmt::Debug,
{
    LeastFavorable::new(&law, rate, rho)?;
    Ok(LeastFavorableDistortion { law, rate, rho })
}

/// CSV with columns index, state, clean, observed, is_outlier. `state` is
/// the regime x_{k-1} that generated observation k.
pub fn write_path_csv<W: Write>(path: &SimulatedPath, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv { line: 0, message: e.to_string() };
    w.write_record(["index", "state", "clean", "observed", "is_outlier"]).map_err(csv_err)?;
    for k in 0..path.clean_returns.len() {
        w.write_record([
            (k + 1).to_string(),
            path.states[k].to_string(),
            path.clean_returns.values()[k].to_string(),
            path.observed_returns.values()[k].to_string(),
            path.outlier_mask[k].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
