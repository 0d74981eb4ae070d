//! Replicate study behind the demo settings of the planted-outlier check.
//! Slow; run with `cargo test --release --test pilot -- --ignored --nocapture`.
//! `REPS` and `BLS` (comma-separated batch lengths) override the defaults.

use rayon::prelude::*;
use robust_hmm::em_engine::{run, BatchConfig, EstimationTrace};
use robust_hmm::model::stationary_distribution;
use robust_hmm::simulator::{contaminate, demo_model, preset, simulate_hmm, Preset, DEMO_HORIZON};

fn env_list(name: &str, default: &str) -> Vec<usize> {
    std::env::var(name).unwrap_or_else(|_| default.into()).split(',').map(|x| x.trim().parse().unwrap()).collect()
}

fn quantiles(mut v: Vec<f64>) -> String {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    format!("med {:.3} p75 {:.3} p90 {:.3} max {:.3}", q(0.5), q(0.75), q(0.9), q(1.0))
}

fn finals(t: &EstimationTrace) -> [f64; 4] {
    let m = t.final_model();
    [m.drift()[0], m.drift()[1], m.vol()[0], m.vol()[1]]
}

fn rel(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [0, 1, 2, 3].map(|i| ((b[i] - a[i]) / a[i]).abs())
}

/// Per batch length: how often the classical run breaks down (or distorts a
/// volatility 3x) under the severe preset, and how often every robust final
/// estimate stays within 25% of the robust clean-run value.
#[test]
#[ignore]
fn severe_outlier_pass_rates() {
    let model = demo_model();
    let x0 = stationary_distribution(&model).unwrap();
    let spec = preset(&model, Preset::Severe).unwrap();
    let reps = env_list("REPS", "100")[0] as u64;
    for bl in env_list("BLS", "10,16,24,32,48") {
        let rows: Vec<_> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let clean = simulate_hmm(&model, &x0, DEMO_HORIZON, 1000 + rep).unwrap();
                let dirty = contaminate(&clean, &spec, rep).unwrap();
                let cc = run(&clean.observed_returns, 2, &BatchConfig::classical(bl, rep)).unwrap();
                let cd = run(&dirty.observed_returns, 2, &BatchConfig::classical(bl, rep)).unwrap();
                let classical_pass = !cd.completed()
                    || (0..2).any(|i| {
                        let r = cd.final_model().vol()[i] / cc.final_model().vol()[i];
                        r >= 3.0 || r <= 1.0 / 3.0
                    });
                let rc = run(&clean.observed_returns, 2, &BatchConfig::robust(bl, rep)).unwrap();
                let rd = run(&dirty.observed_returns, 2, &BatchConfig::robust(bl, rep)).unwrap();
                (classical_pass, rel(finals(&rc), finals(&rd)), rc.completed() && rd.completed())
            })
            .collect();
        let robust_pass = rows.iter().filter(|r| r.2 && r.1.iter().all(|v| *v <= 0.25)).count();
        let per: Vec<usize> = (0..4).map(|c| rows.iter().filter(|r| r.1[c] <= 0.25).count()).collect();
        let worst: Vec<f64> = rows.iter().map(|r| r.1.iter().copied().fold(0.0, f64::max)).collect();
        println!(
            "bl {bl}: classical pass {}/{reps}, robust pass {robust_pass}/{reps}, within 25% f1 {} f2 {} s1 {} s2 {}, worst component {}",
            rows.iter().filter(|r| r.0).count(),
            per[0],
            per[1],
            per[2],
            per[3],
            quantiles(worst)
        );
    }
}
