//! Unnormalized recursive filters for the state, jump counts J^{sr},
//! occupation times O^r and the level sums T^r(y), T^r(y²), plus an
//! exhaustive path-enumeration oracle for small instances.

use serde::Serialize;

use crate::error::{Breakdown, Error, Result};
use crate::model::{RegimeModel, StateDistribution};

const ORACLE_MAX_PATHS: f64 = 1e6;

/// Unnormalized filtered vectors η_k(·X_k) after k observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub eta_x: Vec<f64>,
    /// `eta_j[s][r]`: jumps r → s.
    pub eta_j: Vec<Vec<Vec<f64>>>,
    pub eta_o: Vec<Vec<f64>>,
    pub eta_t1: Vec<Vec<f64>>,
    pub eta_t2: Vec<Vec<f64>>,
    pub k: usize,
}

/// Conditional expectations given the observations so far.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterEstimates {
    pub state: StateDistribution,
    /// `j_hat[s][r]`: expected number of jumps r → s.
    pub j_hat: Vec<Vec<f64>>,
    pub o_hat: Vec<f64>,
    pub t1_hat: Vec<f64>,
    pub t2_hat: Vec<f64>,
}

pub fn init_filters(x0: &StateDistribution) -> FilterBank {
    let n = x0.len();
    FilterBank {
        eta_x: x0.probs().to_vec(),
        eta_j: vec![vec![vec![0.0; n]; n]; n],
        eta_o: vec![vec![0.0; n]; n],
        eta_t1: vec![vec![0.0; n]; n],
        eta_t2: vec![vec![0.0; n]; n],
        k: 0,
    }
}

/// Σ_i Γ^i ⟨v, e_i⟩ Π e_i.
pub fn homogeneous(model: &RegimeModel, gammas: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let a = gammas[i] * v[i];
        if a != 0.0 {
            for (j, o) in out.iter_mut().enumerate() {
                *o += model.pi(j, i) * a;
            }
        }
    }
    out
}

impl FilterBank {
    pub fn n_states(&self) -> usize {
        self.eta_x.len()
    }

    /// ⟨1, η_k(X)⟩.
    pub fn mass(&self) -> f64 {
        self.eta_x.iter().sum()
    }

    /// Advances by one observation `y` with per-state factors `gammas`.
    pub fn step(&self, model: &RegimeModel, gammas: &[f64], y: f64) -> Result<FilterBank> {
        let n = self.n_states();
        let k = self.k + 1;
        let breakdown = |quantity: String| Error::Breakdown(Breakdown { k, y, quantity });
        if let Some(i) = gammas.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(breakdown(format!("gamma[{i}] = {}", gammas[i])));
        }

        // a_r = Γ^r ⟨η_{k-1}(X), e_r⟩
        let a: Vec<f64> = (0..n).map(|r| gammas[r] * self.eta_x[r]).collect();
        let eta_x = homogeneous(model, gammas, &self.eta_x);

        let mut eta_j = Vec::with_capacity(n);
        for s in 0..n {
            let mut row = Vec::with_capacity(n);
            for r in 0..n {
                let mut v = homogeneous(model, gammas, &self.eta_j[s][r]);
                v[s] += a[r] * model.pi(s, r);
                row.push(v);
            }
            eta_j.push(row);
        }

        let with_source = |prev: &[f64], r: usize, g: f64| {
            let mut v = homogeneous(model, gammas, prev);
            for (j, o) in v.iter_mut().enumerate() {
                *o += g * a[r] * model.pi(j, r);
            }
            v
        };
        let eta_o: Vec<Vec<f64>> = (0..n).map(|r| with_source(&self.eta_o[r], r, 1.0)).collect();
        let eta_t1: Vec<Vec<f64>> = (0..n).map(|r| with_source(&self.eta_t1[r], r, y)).collect();
        let eta_t2: Vec<Vec<f64>> = (0..n).map(|r| with_source(&self.eta_t2[r], r, y * y)).collect();

        let next = FilterBank { eta_x, eta_j, eta_o, eta_t1, eta_t2, k };
        let mass = next.mass();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(breakdown(format!("<1, eta_x> = {mass}")));
        }
        if let Some(name) = next.first_non_finite() {
            return Err(breakdown(format!("{name} is not finite")));
        }
        Ok(next)
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        let bad = |vs: &[Vec<f64>]| vs.iter().flatten().any(|v| !v.is_finite());
        if self.eta_x.iter().any(|v| !v.is_finite()) {
            Some("eta_x")
        } else if self.eta_j.iter().any(|row| bad(row)) {
            Some("eta_j")
        } else if bad(&self.eta_o) {
            Some("eta_o")
        } else if bad(&self.eta_t1) {
            Some("eta_t1")
        } else if bad(&self.eta_t2) {
            Some("eta_t2")
        } else {
            None
        }
    }

    /// Divides every stored vector by ⟨1, η_k(X)⟩.
    pub fn rescale(&self) -> FilterBank {
        let c = self.mass();
        let div = |v: &Vec<f64>| v.iter().map(|x| x / c).collect::<Vec<f64>>();
        FilterBank {
            eta_x: div(&self.eta_x),
            eta_j: self.eta_j.iter().map(|row| row.iter().map(div).collect()).collect(),
            eta_o: self.eta_o.iter().map(div).collect(),
            eta_t1: self.eta_t1.iter().map(div).collect(),
            eta_t2: self.eta_t2.iter().map(div).collect(),
            k: self.k,
        }
    }

    pub fn normalize(&self) -> Result<FilterEstimates> {
        let c = self.mass();
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Breakdown(Breakdown {
                k: self.k,
                y: f64::NAN,
                quantity: format!("<1, eta_x> = {c}"),
            }));
        }
        let scalar = |v: &Vec<f64>| v.iter().sum::<f64>() / c;
        Ok(FilterEstimates {
            state: StateDistribution::normalized(self.eta_x.clone())?,
            j_hat: self.eta_j.iter().map(|row| row.iter().map(scalar).collect()).collect(),
            o_hat: self.eta_o.iter().map(scalar).collect(),
            t1_hat: self.eta_t1.iter().map(scalar).collect(),
            t2_hat: self.eta_t2.iter().map(scalar).collect(),
        })
    }
}

/// Runs the filters over `ys`, rescaling after every step.
pub fn run_filters(
    model: &RegimeModel,
    x0: &StateDistribution,
    ys: &[f64],
    mut gammas_fn: impl FnMut(usize, f64) -> Result<Vec<f64>>,
) -> Result<FilterBank> {
    let mut bank = init_filters(x0);
    for (l, &y) in ys.iter().enumerate() {
        let g = gammas_fn(l, y)?;
        bank = bank.step(model, &g, y)?.rescale();
    }
    Ok(bank)
}

/// Exact conditional expectations by summing over all N^{k+1} state paths
/// x_0..x_k. Observation y_l is driven by x_{l-1}.
pub fn brute_force_oracle(
    model: &RegimeModel,
    x0: &StateDistribution,
    ys: &[f64],
    mut gammas_fn: impl FnMut(usize, f64) -> Result<Vec<f64>>,
) -> Result<FilterEstimates> {
    let n = model.n_states();
    let k = ys.len();
    let paths = (n as f64).powi(k as i32 + 1);
    if paths > ORACLE_MAX_PATHS {
        return Err(Error::InstanceTooLarge { paths });
    }
    let gammas: Vec<Vec<f64>> = ys.iter().enumerate().map(|(l, &y)| gammas_fn(l, y)).collect::<Result<_>>()?;

    let mut total = 0.0;
    let mut x = vec![0.0; n];
    let mut j = vec![vec![0.0; n]; n];
    let mut o = vec![0.0; n];
    let mut t1 = vec![0.0; n];
    let mut t2 = vec![0.0; n];

    let mut path = vec![0usize; k + 1];
    for code in 0..paths as usize {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % n;
            c /= n;
        }
        let mut weight = x0.probs()[path[0]];
        for l in 1..=k {
            weight *= model.pi(path[l], path[l - 1]) * gammas[l - 1][path[l - 1]];
        }
        if weight == 0.0 {
            continue;
        }
        total += weight;
        x[path[k]] += weight;
        for l in 1..=k {
            let (from, to) = (path[l - 1], path[l]);
            let y = ys[l - 1];
            j[to][from] += weight;
            o[from] += weight;
            t1[from] += weight * y;
            t2[from] += weight * y * y;
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroWeights);
    }
    let div = |v: Vec<f64>| v.into_iter().map(|a| a / total).collect::<Vec<f64>>();
    Ok(FilterEstimates {
        state: StateDistribution::normalized(x)?,
        j_hat: j.into_iter().map(div).collect(),
        o_hat: div(o),
        t1_hat: div(t1),
        t2_hat: div(t2),
    })
}
