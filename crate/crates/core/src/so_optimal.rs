//! Minimax reconstruction under substitutive (SO) contamination: the clipped
//! reconstruction f₀, its Lagrange radius ρ, the least-favorable
//! contamination weight and the saddle-point risk.
//!
//! Everything is stated in terms of the discrepancy D(y) = y − E Y^id and
//! works for scalar and 2-vector observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure_change::{big_phi, phi};
use crate::robust_core::huber_clip_vec;

/// Ideal law P^{Y^id} of a D-dimensional observation.
pub trait IdealLaw<const D: usize>: Sync {
    fn mean(&self) -> [f64; D];
    /// tr Cov Y^id.
    fn trace_cov(&self) -> f64;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; D];
    /// Density of |D(Y^id)| at t ≥ 0, if known in closed form.
    fn radial_density(&self, _t: f64) -> Option<f64> {
        None
    }
    /// Typical size of |D|; used for search brackets and integration range.
    fn radial_scale(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalLaw {
    pub mean: f64,
    pub sd: f64,
}

impl IdealLaw<1> for NormalLaw {
    fn mean(&self) -> [f64; 1] {
        [self.mean]
    }
    fn trace_cov(&self) -> f64 {
        self.sd * self.sd
    }
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 1] {
        let z: f64 = StandardNormal.sample(rng);
        [self.mean + self.sd * z]
    }
    fn radial_density(&self, t: f64) -> Option<f64> {
        Some(2.0 * phi(t / self.sd) / self.sd)
    }
    fn radial_scale(&self) -> f64 {
        self.sd
    }
}

/// N(μ, s²I) in two dimensions; |D| is Rayleigh(s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsotropicNormal2 {
    pub mean: [f64; 2],
    pub sd: f64,
}

impl IdealLaw<2> for IsotropicNormal2 {
    fn mean(&self) -> [f64; 2] {
        self.mean
    }
    fn trace_cov(&self) -> f64 {
        2.0 * self.sd * self.sd
    }
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        [self.mean[0] + self.sd * a, self.mean[1] + self.sd * b]
    }
    fn radial_density(&self, t: f64) -> Option<f64> {
        let s2 = self.sd * self.sd;
        Some(t / s2 * (-0.5 * t * t / s2).exp())
    }
    fn radial_scale(&self) -> f64 {
        self.sd
    }
}

/// Equally weighted sample standing in for an ideal law without a density.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw<const D: usize> {
    points: Vec<[f64; D]>,
    mean: [f64; D],
    trace_cov: f64,
}

impl<const D: usize> EmpiricalLaw<D> {
    pub fn new(points: Vec<[f64; D]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("empirical law needs at least two points".into()));
        }
        let n = points.len() as f64;
        let mut mean = [0.0; D];
        for p in &points {
            for d in 0..D {
                mean[d] += p[d] / n;
            }
        }
        let trace_cov = points.iter().map(|p| dist2(p, &mean)).sum::<f64>() / n;
        Ok(Self { points, mean, trace_cov })
    }

    pub fn from_law<L: IdealLaw<D>>(law: &L, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new((0..size).map(|_| law.sample(&mut rng)).collect())
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }
}

impl<const D: usize> IdealLaw<D> for EmpiricalLaw<D> {
    fn mean(&self) -> [f64; D] {
        self.mean
    }
    fn trace_cov(&self) -> f64 {
        self.trace_cov
    }
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; D] {
        self.points[rng.random_range(0..self.points.len())]
    }
    fn radial_scale(&self) -> f64 {
        self.trace_cov.sqrt()
    }
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Radius beyond which radial densities are treated as zero.
const RADIAL_CUTOFF_SCALES: f64 = 40.0;

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 40)
}

/// E g(|D(Y^id)|), by quadrature over the radial density when there is one
/// and by the sample mean otherwise. `kink` is a point where g is not smooth.
fn radial_expectation<const D: usize, L: IdealLaw<D>>(law: &L, g: impl Fn(f64) -> f64, kink: f64) -> f64 {
    if law.radial_density(0.0).is_some() {
        let upper = RADIAL_CUTOFF_SCALES * law.radial_scale();
        let integrand = |t: f64| g(t) * law.radial_density(t).unwrap_or(0.0);
        let tol = 1e-14 * (1.0 + g(law.radial_scale()).abs());
        // Fixed panels of half a scale so the first Simpson pass cannot miss
        // the bulk of the density; the kink is an extra breakpoint.
        let width = 0.5 * law.radial_scale();
        let mut cuts: Vec<f64> = (0..=(upper / width).ceil() as usize).map(|i| (i as f64 * width).min(upper)).collect();
        if kink > 0.0 && kink < upper {
            cuts.push(kink);
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2).map(|w| adaptive_simpson(&integrand, w[0], w[1], tol)).sum()
    } else {
        let mean = law.mean();
        let mc = MonteCarloSample::from_law(law, &mean);
        mc.radii.iter().map(|&t| g(t)).sum::<f64>() / mc.radii.len() as f64
    }
}

struct MonteCarloSample {
    radii: Vec<f64>,
}

impl MonteCarloSample {
    /// Fixed-seed draw for laws without a radial density.
    fn from_law<const D: usize, L: IdealLaw<D>>(law: &L, mean: &[f64; D]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let radii = (0..MC_FALLBACK_SIZE).map(|_| dist2(&law.sample(&mut rng), mean).sqrt()).collect();
        Self { radii }
    }
}

const MC_FALLBACK_SIZE: usize = 200_000;

fn empirical_expectation<const D: usize>(law: &EmpiricalLaw<D>, g: impl Fn(f64) -> f64) -> f64 {
    let mean = law.mean();
    law.points.iter().map(|p| g(dist2(p, &mean).sqrt())).sum::<f64>() / law.points.len() as f64
}

/// Expectations the theorem needs; empirical laws are averaged exactly.
pub trait DiscrepancyMoments<const D: usize>: IdealLaw<D> {
    fn expect_radial(&self, g: impl Fn(f64) -> f64, kink: f64) -> f64
    where
        Self: Sized,
    {
        radial_expectation(self, g, kink)
    }
}

impl DiscrepancyMoments<1> for NormalLaw {}
impl DiscrepancyMoments<2> for IsotropicNormal2 {}
impl<const D: usize> DiscrepancyMoments<D> for EmpiricalLaw<D> {
    fn expect_radial(&self, g: impl Fn(f64) -> f64, _kink: f64) -> f64 {
        empirical_expectation(self, g)
    }
}

/// H(ρ) = (1−r)/r · E(|D|/ρ − 1)₊; ρ solves H(ρ) = 1.
pub fn mass_map<const D: usize, L: DiscrepancyMoments<D>>(law: &L, rate: f64, rho: f64) -> f64 {
    (1.0 - rate) / rate * law.expect_radial(|t| (t / rho - 1.0).max(0.0), rho)
}

pub fn solve_rho<const D: usize, L: DiscrepancyMoments<D>>(law: &L, rate: f64, tol: f64) -> Result<f64> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("contamination rate {rate} outside (0, 1)")));
    }
    let scale = law.radial_scale();
    let mut lo = 1e-8 * scale;
    let mut hi = scale;
    while mass_map(law, rate, hi) > 1.0 {
        hi *= 2.0;
        if hi > 1e8 * scale {
            break;
        }
    }
    let (f_lo, f_hi) = (mass_map(law, rate, lo) - 1.0, mass_map(law, rate, hi) - 1.0);
    if !(f_lo > 0.0 && f_hi <= 0.0) {
        return Err(Error::Bracket { lo, hi, f_lo, f_hi });
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        let h = mass_map(law, rate, mid);
        if (h - 1.0).abs() < tol {
            return Ok(mid);
        }
        if h > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A solved instance of the minimax problem.
#[derive(Debug, Clone)]
pub struct SoProblem<const D: usize, L> {
    pub law: L,
    pub rate: f64,
    pub rho: f64,
}

impl<const D: usize, L: DiscrepancyMoments<D>> SoProblem<D, L> {
    pub fn solve(law: L, rate: f64) -> Result<Self> {
        let rho = solve_rho(&law, rate, 1e-10)?;
        Ok(Self { law, rate, rho })
    }

    /// f₀(y) = E Y^id + H_ρ(D(y)).
    pub fn reconstruct(&self, y: [f64; D]) -> [f64; D] {
        let mean = self.law.mean();
        let mut d = [0.0; D];
        for i in 0..D {
            d[i] = y[i] - mean[i];
        }
        let c = huber_clip_vec(d, self.rho);
        let mut out = [0.0; D];
        for i in 0..D {
            out[i] = mean[i] + c[i];
        }
        out
    }

    pub fn mass_residual(&self) -> f64 {
        mass_map(&self.law, self.rate, self.rho) - 1.0
    }

    /// E min(|D|, ρ)².
    pub fn clipped_second_moment(&self) -> f64 {
        let rho = self.rho;
        self.law.expect_radial(|t| t.min(rho).powi(2), rho)
    }

    /// Risk of f₀ under the least-favorable contamination:
    /// tr Cov − (1−r)·E min(|D|,ρ)² − r·ρ².
    pub fn saddle_risk(&self) -> f64 {
        self.law.trace_cov() - (1.0 - self.rate) * self.clipped_second_moment() - self.rate * self.rho * self.rho
    }

    /// The same expression without the −r·ρ² term.
    pub fn saddle_risk_without_boundary_term(&self) -> f64 {
        self.law.trace_cov() - (1.0 - self.rate) * self.clipped_second_moment()
    }

    pub fn least_favorable(&self) -> Result<LeastFavorable<'_, D, L>> {
        LeastFavorable::new(&self.law, self.rate, self.rho)
    }
}

/// Sampler for P₀(dy) ∝ (|D(y)|/ρ − 1)₊ P^{Y^id}(dy), by rejection from the
/// ideal law. The acceptance bound is taken at |D| = 12 scales; draws beyond
/// that are always accepted.
#[derive(Debug, Clone)]
pub struct LeastFavorable<'a, const D: usize, L> {
    law: &'a L,
    rho: f64,
    envelope: f64,
}

const ENVELOPE_SCALES: f64 = 12.0;
const RHO_CONSISTENCY_TOL: f64 = 1e-6;

impl<'a, const D: usize, L: DiscrepancyMoments<D>> LeastFavorable<'a, D, L> {
    pub fn new(law: &'a L, rate: f64, rho: f64) -> Result<Self> {
        let residual = mass_map(law, rate, rho) - 1.0;
        if !(residual.abs() <= RHO_CONSISTENCY_TOL) {
            return Err(Error::InconsistentRho { residual });
        }
        let reach = (ENVELOPE_SCALES * law.radial_scale()).max(2.0 * rho);
        Ok(Self { law, rho, envelope: reach / rho - 1.0 })
    }

    /// Unnormalized weight (|D(y)|/ρ − 1)₊.
    pub fn weight(&self, y: &[f64; D]) -> f64 {
        (dist2(y, &self.law.mean()).sqrt() / self.rho - 1.0).max(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; D] {
        loop {
            let y = self.law.sample(rng);
            let w = self.weight(&y);
            if w > 0.0 && rng.random::<f64>() * self.envelope < w {
                return y;
            }
        }
    }
}

/// Mean squared reconstruction error with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub mse: f64,
    pub std_error: f64,
}

/// E|f(Y^re) − Y^id|² for Y^re = (1−U)Y^id + U·Y^di, U ~ Bernoulli(rate),
/// with Y^di drawn independently by `contaminator`.
pub fn empirical_risk<const D: usize, L, F, C>(
    law: &L,
    rate: f64,
    reconstruct: F,
    contaminator: C,
    draws: usize,
    seed: u64,
) -> RiskEstimate
where
    L: IdealLaw<D>,
    F: Fn(&[f64; D]) -> [f64; D] + Sync,
    C: Fn(&mut ChaCha8Rng) -> [f64; D] + Sync,
{
    const CHUNK: usize = 10_000;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(draws - c * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let ideal = law.sample(&mut rng);
                let observed = if rng.random::<f64>() < rate { contaminator(&mut rng) } else { ideal };
                let loss = dist2(&reconstruct(&observed), &ideal);
                s += loss;
                s2 += loss * loss;
            }
            (s, s2, count)
        })
        .collect();
    let (s, s2, n) = sums.iter().fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = n as f64;
    let mse = s / n;
    let var = (s2 / n - mse * mse).max(0.0);
    RiskEstimate { mse, std_error: (var / n).sqrt() }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContaminatorCheck {
    pub name: String,
    pub risk: RiskEstimate,
    /// Least-favorable risk + 2 standard errors − this risk; negative means
    /// the alternative beat the least-favorable contaminator.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionCheck {
    pub name: String,
    pub risk: RiskEstimate,
    /// This risk + 2 standard errors − risk of f₀ under P₀.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaddleReport {
    pub rate: f64,
    pub rho: f64,
    pub mass_residual: f64,
    pub saddle_risk: f64,
    pub saddle_risk_without_boundary_term: f64,
    pub least_favorable_risk: RiskEstimate,
    pub contaminators: Vec<ContaminatorCheck>,
    pub reconstructions: Vec<ReconstructionCheck>,
    pub draws: usize,
    pub holds: bool,
}

pub type Contaminator<'a, const D: usize> = (String, Box<dyn Fn(&mut ChaCha8Rng) -> [f64; D] + Sync + 'a>);
pub type Reconstruction<'a, const D: usize> = (String, Box<dyn Fn(&[f64; D]) -> [f64; D] + Sync + 'a>);

/// Checks both halves of the saddle-point property empirically: f₀ loses
/// most under P₀ among the given contaminators, and under P₀ no given
/// reconstruction beats f₀.
pub fn verify_saddle_point<const D: usize, L: DiscrepancyMoments<D>>(
    problem: &SoProblem<D, L>,
    contaminators: &[Contaminator<'_, D>],
    reconstructions: &[Reconstruction<'_, D>],
    draws: usize,
    seed: u64,
) -> Result<SaddleReport> {
    let lf = problem.least_favorable()?;
    let f0 = |y: &[f64; D]| problem.reconstruct(*y);
    let p0 = |rng: &mut ChaCha8Rng| lf.sample(rng);
    let base = empirical_risk(&problem.law, problem.rate, f0, p0, draws, seed);

    let contaminator_checks: Vec<ContaminatorCheck> = contaminators
        .iter()
        .enumerate()
        .map(|(i, (name, c))| {
            let risk = empirical_risk(&problem.law, problem.rate, f0, c, draws, seed.wrapping_add(1 + i as u64));
            let se = (base.std_error.powi(2) + risk.std_error.powi(2)).sqrt();
            let margin = base.mse + 2.0 * se - risk.mse;
            ContaminatorCheck { name: name.clone(), risk, margin, holds: margin >= 0.0 }
        })
        .collect();
    // Same seed as the base run: the comparison is paired.
    let reconstruction_checks: Vec<ReconstructionCheck> = reconstructions
        .iter()
        .map(|(name, f)| {
            let risk = empirical_risk(&problem.law, problem.rate, f, p0, draws, seed);
            let se = (base.std_error.powi(2) + risk.std_error.powi(2)).sqrt();
            let margin = risk.mse + 2.0 * se - base.mse;
            ReconstructionCheck { name: name.clone(), risk, margin, holds: margin >= 0.0 }
        })
        .collect();
    let holds = contaminator_checks.iter().all(|c| c.holds) && reconstruction_checks.iter().all(|c| c.holds);
    Ok(SaddleReport {
        rate: problem.rate,
        rho: problem.rho,
        mass_residual: problem.mass_residual(),
        saddle_risk: problem.saddle_risk(),
        saddle_risk_without_boundary_term: problem.saddle_risk_without_boundary_term(),
        least_favorable_risk: base,
        contaminators: contaminator_checks,
        reconstructions: reconstruction_checks,
        draws,
        holds,
    })
}

/// Alternative contaminators and reconstructions for a scalar normal ideal
/// law: point masses inside and beyond ρ, wide and heavy-tailed laws, and
/// differently clipped or unclipped reconstructions.
pub fn normal_battery(problem: &SoProblem<1, NormalLaw>) -> (Vec<Contaminator<'_, 1>>, Vec<Reconstruction<'_, 1>>) {
    let NormalLaw { mean, sd } = problem.law;
    let rho = problem.rho;
    let mut contaminators: Vec<Contaminator<'_, 1>> = Vec::new();
    for k in [0.0, 0.5, 1.0, 2.0, 10.0] {
        let y = mean + k * rho;
        contaminators.push((format!("point mass at mean + {k}·rho"), Box::new(move |_: &mut ChaCha8Rng| [y])));
    }
    contaminators.push((
        "point mass at mean - 3·rho".into(),
        Box::new(move |_: &mut ChaCha8Rng| [mean - 3.0 * rho]),
    ));
    contaminators.push((
        "normal with 3x sd".into(),
        Box::new(move |rng: &mut ChaCha8Rng| {
            let z: f64 = StandardNormal.sample(rng);
            [mean + 3.0 * sd * z]
        }),
    ));
    contaminators.push((
        "uniform on mean ± 5 sd".into(),
        Box::new(move |rng: &mut ChaCha8Rng| [mean + sd * (10.0 * rng.random::<f64>() - 5.0)]),
    ));
    contaminators.push((
        "cauchy".into(),
        Box::new(move |rng: &mut ChaCha8Rng| {
            let u: f64 = rng.random::<f64>() - 0.5;
            [mean + sd * (std::f64::consts::PI * u).tan()]
        }),
    ));

    let clip_at = move |c: f64| move |y: &[f64; 1]| [mean + (y[0] - mean).clamp(-c, c)];
    let reconstructions: Vec<Reconstruction<'_, 1>> = vec![
        ("identity".into(), Box::new(|y: &[f64; 1]| *y)),
        ("constant mean".into(), Box::new(move |_: &[f64; 1]| [mean])),
        ("clip at rho/2".into(), Box::new(clip_at(0.5 * rho))),
        ("clip at 2·rho".into(), Box::new(clip_at(2.0 * rho))),
        ("shrunk clip 0.8·H_rho".into(), Box::new(move |y: &[f64; 1]| [mean + 0.8 * (y[0] - mean).clamp(-rho, rho)])),
    ];
    (contaminators, reconstructions)
}

/// Closed form of E(|Z|·s − ρ)₊ for Z standard normal.
pub fn normal_excess(sd: f64, rho: f64) -> f64 {
    2.0 * (sd * phi(rho / sd) - rho * (1.0 - big_phi(rho / sd)))
}
