use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use robust_hmm::cli::{EXIT_BREAKDOWN, MANIFEST_FILE, SCENARIOS};

fn tool(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-hmm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ROBUST_HMM_OUT")
        .output()
        .expect("binary runs")
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn assert_same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let x = fs::read(a.join(&name)).unwrap();
        let y = fs::read(b.join(&name)).unwrap_or_else(|_| panic!("{name:?} missing in replay"));
        assert!(x == y, "{name:?} differs");
    }
}

#[test]
fn simulate_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(tool(&["simulate", "--seed", "9"], &a).status.success());
    assert!(tool(&["simulate", "--seed", "9"], &b).status.success());
    assert_same_files(&a, &b);
    let replay = tool(&["replay", "--manifest", a.join(MANIFEST_FILE).to_str().unwrap()], &c);
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert_same_files(&a, &c);
}

#[test]
fn no_contamination_leaves_mask_empty() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tool(&["simulate", "--contamination", "none"], dir.path()).status.success());
    let rows = read_rows(&dir.path().join("path.csv"));
    assert_eq!(rows.len(), 192);
    assert!(rows.iter().all(|r| &r[4] == "false" && r[2] == r[3]));
}

#[test]
fn severe_outliers_break_classical_but_not_robust() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(tool(&["simulate", "--seed", "1", "--contamination", "severe"], &sim).status.success());
    let input = sim.join("returns.csv");
    let input = input.to_str().unwrap();

    let classical = tool(&["estimate", "--input", input, "--mode", "classical"], &dir.path().join("c"));
    assert_eq!(classical.status.code(), Some(EXIT_BREAKDOWN), "{}", String::from_utf8_lossy(&classical.stderr));
    assert!(String::from_utf8_lossy(&classical.stderr).contains("breakdown"));
    let steps = read_rows(&dir.path().join("c/steps.csv"));
    assert!(steps.len() < 192);

    let robust = tool(&["estimate", "--input", input, "--mode", "robust"], &dir.path().join("r"));
    assert!(robust.status.success(), "{}", String::from_utf8_lossy(&robust.stderr));
    let steps = read_rows(&dir.path().join("r/steps.csv"));
    assert_eq!(steps.len(), 192);
    assert!(steps.iter().all(|r| &r[7] == "true" || &r[7] == "false"));
    let flagged: Vec<String> = steps.iter().filter(|r| &r[7] == "true").map(|r| r[0].to_string()).collect();
    // The first planted outlier is caught; later ones may be absorbed into an inflated volatility.
    assert!(flagged.iter().any(|f| f == "40"), "{flagged:?}");
    let batches = read_rows(&dir.path().join("r/batches.csv"));
    assert!(batches.iter().all(|r| r.iter().skip(3).take(4).all(|v| v.parse::<f64>().unwrap().is_finite())));
}

#[test]
fn clean_classical_run_completes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(tool(&["simulate", "--seed", "1", "--contamination", "none"], &sim).status.success());
    let out = tool(&["estimate", "--input", sim.join("returns.csv").to_str().unwrap(), "--mode", "classical"], &dir.path().join("c"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_input_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "date,return\n2001-01,0.01\n2001-02,0.02\n2001-03,oops\n").unwrap();
    let out = tool(&["estimate", "--input", input.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 4"), "{stderr}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tool(&["estimate", "--mode", "sideways"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn robust_mode_with_alpha_one_matches_classical() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(tool(&["simulate", "--seed", "3", "--contamination", "none"], &sim).status.success());
    let input = sim.join("returns.csv");
    let input = input.to_str().unwrap();
    let c = tool(&["estimate", "--input", input, "--mode", "classical", "--batch-len", "24"], &dir.path().join("c"));
    assert!(c.status.success());
    let r = tool(
        &[
            "estimate", "--input", input, "--mode", "robust", "--batch-len", "24", "--alpha", "1", "--init", "mixture",
            "--update", "mle", "--reference", "standard",
        ],
        &dir.path().join("r"),
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let a = read_rows(&dir.path().join("c/batches.csv"));
    let b = read_rows(&dir.path().join("r/batches.csv"));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        // f, sigma and transition columns.
        for col in 3..11 {
            let (u, v): (f64, f64) = (x[col].parse().unwrap(), y[col].parse().unwrap());
            assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()), "column {col}: {u} vs {v}");
        }
    }
}

#[test]
fn figures_emit_all_panels() {
    let dir = tempfile::tempdir().unwrap();
    let out = tool(&["figures", "--seed", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for scenario in SCENARIOS {
        for mode in ["classical", "robust"] {
            for panel in ["returns", "estimates", "forecast"] {
                assert!(dir.path().join(format!("{scenario}_{mode}_{panel}.csv")).exists(), "{scenario} {mode} {panel}");
            }
        }
        assert_eq!(read_rows(&dir.path().join(format!("{scenario}_robust_forecast.csv"))).len(), 192);
    }
    assert_eq!(read_rows(&dir.path().join("clean_classical_forecast.csv")).len(), 192);
    let severe = read_rows(&dir.path().join("severe_classical_forecast.csv"));
    assert!(severe.len() < 192, "classical severe panel should stop at the breakdown");
}

#[test]
fn estimate_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(tool(&["simulate", "--seed", "5", "--contamination", "considerable"], &sim).status.success());
    let first = dir.path().join("first");
    let out = tool(&["estimate", "--input", sim.join("returns.csv").to_str().unwrap()], &first);
    assert!(out.status.success());
    let second = dir.path().join("second");
    let out = tool(&["replay", "--manifest", first.join(MANIFEST_FILE).to_str().unwrap()], &second);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_same_files(&first, &second);
}
