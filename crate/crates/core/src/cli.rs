//! Command-line front end: simulation, estimation, the minimax check, figure
//! tables and manifest replay.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::em_engine::{
    run, write_batches_csv, write_steps_csv, BatchConfig, EstimationTrace, InitKind, Mode, RobustUpdate,
    DEFAULT_INIT_BATCHES,
};
use crate::error::{Breakdown, Error};
use crate::initialization::NoiseReassignment;
use crate::measure_change::ReferenceScale;
use crate::model::{returns_from_prices, stationary_distribution, RegimeModel, ReturnSeries};
use crate::simulator::{
    contaminate, demo_model, preset, simulate_hmm, write_path_csv, ContaminationSpec, NormalDistortion, Preset,
    SimulatedPath, DEMO_HORIZON,
};
use crate::so_optimal::{normal_battery, verify_saddle_point, NormalLaw, SoProblem};

/// Exit status of `estimate` when the classical filters break down.
pub const EXIT_BREAKDOWN: i32 = 3;
/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "ROBUST_HMM_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Bumped whenever a CSV or manifest layout changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "robust-hmm", version, about = "Filter-based EM for regime-switching returns, classical and robust")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a return path from the demo model, optionally with outliers.
    Simulate(SimulateArgs),
    /// Run the batch EM on a CSV of prices or returns.
    Estimate(EstimateArgs),
    /// Solve the minimax reconstruction problem and check the saddle point.
    VerifyTheorem(TheoremArgs),
    /// Emit plot-ready tables for clean, considerable and severe scenarios.
    Figures(FiguresArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEMO_HORIZON)]
    pub horizon: usize,
    /// none | considerable | severe | fixed:POS=VALUE,... | iid:RATE:MEAN:SD
    #[arg(long, default_value = "severe")]
    pub contamination: String,
    /// JSON file with `transition` (column-stochastic), `drift` and `vol`;
    /// defaults to the built-in two-regime model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Classical,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Mixture,
    RobustMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdateArg {
    Mbre,
    Mle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReassignArg {
    Random,
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    Standard,
    Sd,
    Mad,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    #[arg(long, default_value_t = 2)]
    pub states: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_len: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Robust)]
    pub mode: ModeArg,
    /// Target mean of the clipped likelihood ratio (robust mode; default 0.95).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Starting values (default: mixture in classical, robust-mixture in robust mode).
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Drift/vol update in robust mode (default: mbre).
    #[arg(long, value_enum)]
    pub update: Option<UpdateArg>,
    /// Reference scale (default: standard in classical, mad in robust mode).
    #[arg(long, value_enum)]
    pub reference: Option<ReferenceArg>,
    #[arg(long, value_enum, default_value_t = ReassignArg::Random)]
    pub reassignment: ReassignArg,
    /// Leading batches used for starting values; 0 uses the whole series.
    #[arg(long, default_value_t = DEFAULT_INIT_BATCHES)]
    pub init_batches: usize,
    #[arg(long, default_value_t = 0.01)]
    pub flag_quantile: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// CSV with a header row: optional `date`, and `price` or `return`.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Clone, Args)]
pub struct TheoremArgs {
    /// Contamination rate r.
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sd: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Clone, Args)]
pub struct FiguresArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub batch_len: usize,
    #[arg(long, default_value_t = DEMO_HORIZON)]
    pub horizon: usize,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

/// How a command finished when it did not fail.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    Breakdown(Breakdown),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed => 0,
            Outcome::Breakdown(_) => EXIT_BREAKDOWN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub command: String,
    /// Fully resolved arguments, without `--out`.
    pub args: Vec<String>,
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

impl Manifest {
    fn new(command: &str, args: Vec<String>, outputs: Vec<String>, details: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            args,
            outputs,
            details,
        }
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::VerifyTheorem(a) => cmd_verify_theorem(&a),
        Command::Figures(a) => cmd_figures(&a),
        Command::Replay(a) => cmd_replay(&a),
    }
}

/// Parses `none`, `considerable`, `severe`, `fixed:40=0.5,80=-0.3` or
/// `iid:0.05:0:0.5` (rate, mean, sd of a normal distortion).
pub fn parse_contamination(text: &str, model: &RegimeModel) -> anyhow::Result<ContaminationSpec> {
    let text = text.trim();
    match text {
        "none" => return Ok(ContaminationSpec::none()),
        "considerable" => return Ok(preset(model, Preset::Considerable)?),
        "severe" => return Ok(preset(model, Preset::Severe)?),
        _ => {}
    }
    if let Some(list) = text.strip_prefix("fixed:") {
        let mut positions = Vec::new();
        for item in list.split(',').filter(|s| !s.trim().is_empty()) {
            let (pos, value) = item.split_once('=').with_context(|| format!("expected POS=VALUE, got `{item}`"))?;
            let pos: usize = pos.trim().parse().with_context(|| format!("bad position `{pos}`"))?;
            let value: f64 = value.trim().parse().with_context(|| format!("bad value `{value}`"))?;
            positions.push((pos, value));
        }
        return Ok(ContaminationSpec::fixed(positions));
    }
    if let Some(rest) = text.strip_prefix("iid:") {
        let parts: Vec<f64> = rest
            .split(':')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad iid spec `{rest}`"))?;
        let [rate, mean, sd] = parts[..] else { bail!("iid contamination needs RATE:MEAN:SD, got `{rest}`") };
        if !(sd > 0.0) {
            bail!("iid contamination sd must be positive");
        }
        return Ok(ContaminationSpec::iid(rate, Arc::new(NormalDistortion { mean, sd }))?);
    }
    bail!("unknown contamination `{text}`; expected none, considerable, severe, fixed:... or iid:...")
}

#[derive(Deserialize)]
struct ModelFile {
    transition: Vec<Vec<f64>>,
    drift: Vec<f64>,
    vol: Vec<f64>,
}

fn load_model(path: Option<&Path>) -> anyhow::Result<RegimeModel> {
    match path {
        None => Ok(demo_model()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let m: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(RegimeModel::new(m.transition, m.drift, m.vol)?)
        }
    }
}

/// Reads a series from CSV: header row, optional `date`, exactly one of
/// `price` and `return`. Prices become log returns. Errors carry the line.
pub fn read_series(path: &Path) -> Result<ReturnSeries, Error> {
    let file = File::open(path)?;
    read_series_from(file)
}

pub fn read_series_from<R: std::io::Read>(input: R) -> Result<ReturnSeries, Error> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Csv { line, message: e.to_string() }
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let mut date_col = None;
    let mut price_col = None;
    let mut return_col = None;
    for (i, h) in headers.iter().enumerate() {
        let slot = match h.trim() {
            "date" => &mut date_col,
            "price" => &mut price_col,
            "return" => &mut return_col,
            other => return Err(Error::Csv { line: 1, message: format!("unexpected column `{other}`") }),
        };
        if slot.replace(i).is_some() {
            return Err(Error::Csv { line: 1, message: format!("duplicate column `{}`", h.trim()) });
        }
    }
    let (value_col, is_price) = match (price_col, return_col) {
        (Some(c), None) => (c, true),
        (None, Some(c)) => (c, false),
        (Some(_), Some(_)) => {
            return Err(Error::Csv { line: 1, message: "both `price` and `return` columns present".into() })
        }
        (None, None) => return Err(Error::Csv { line: 1, message: "need a `price` or `return` column".into() }),
    };

    let mut values = Vec::new();
    let mut dates = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = record.get(value_col).unwrap_or("").trim();
        let v: f64 = field
            .parse()
            .map_err(|_| Error::Csv { line, message: format!("cannot parse `{field}` as a number") })?;
        if !v.is_finite() {
            return Err(Error::Csv { line, message: format!("non-finite value `{field}`") });
        }
        if is_price && v <= 0.0 {
            return Err(Error::Csv { line, message: format!("price {v} is not strictly positive") });
        }
        values.push(v);
        lines.push(line);
        if let Some(c) = date_col {
            dates.push(record.get(c).unwrap_or("").trim().to_string());
        }
    }
    if values.is_empty() {
        return Err(Error::Csv { line: 1, message: "no data rows".into() });
    }
    let series = if is_price {
        if values.len() < 2 {
            return Err(Error::Csv { line: lines[0], message: "need at least two prices".into() });
        }
        let s = returns_from_prices(&values)?;
        if date_col.is_some() {
            dates.remove(0);
        }
        s
    } else {
        ReturnSeries::new(values)?
    };
    if date_col.is_some() {
        Ok(series.with_timestamps(dates)?)
    } else {
        Ok(series)
    }
}

fn write_returns_csv(series: &ReturnSeries, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["return"])?;
    for v in series.values() {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn simulate_args(a: &SimulateArgs) -> Vec<String> {
    let mut v = vec![
        "simulate".into(),
        "--seed".into(),
        a.seed.to_string(),
        "--horizon".into(),
        a.horizon.to_string(),
        "--contamination".into(),
        a.contamination.clone(),
    ];
    if let Some(m) = &a.model {
        v.extend(["--model".into(), m.display().to_string()]);
    }
    v
}

/// Simulated path from a model, started from its stationary law.
pub fn simulate_scenario(
    model: &RegimeModel,
    horizon: usize,
    seed: u64,
    spec: &ContaminationSpec,
) -> anyhow::Result<SimulatedPath> {
    let x0 = stationary_distribution(model)?;
    let clean = simulate_hmm(model, &x0, horizon, seed)?;
    Ok(contaminate(&clean, spec, seed)?)
}

fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<Outcome> {
    let model = load_model(a.model.as_deref())?;
    let spec = parse_contamination(&a.contamination, &model)?;
    let path = simulate_scenario(&model, a.horizon, a.seed, &spec)?;
    let dir = &a.out.out;
    prepare_dir(dir)?;
    write_path_csv(&path, create(&dir.join("path.csv"))?)?;
    write_returns_csv(&path.observed_returns, &dir.join("returns.csv"))?;
    let details = json!({
        "model": model,
        "seed": a.seed,
        "horizon": a.horizon,
        "contamination": spec.describe(),
        "outliers": path.outlier_mask.iter().filter(|m| **m).count(),
    });
    Manifest::new("simulate", simulate_args(a), vec!["path.csv".into(), "returns.csv".into()], details).write(dir)?;
    Ok(Outcome::Completed)
}

impl EngineArgs {
    pub fn config(&self) -> anyhow::Result<BatchConfig> {
        let mode = match self.mode {
            ModeArg::Classical => Mode::Classical,
            ModeArg::Robust => Mode::Robust,
        };
        let mut cfg = BatchConfig::for_mode(mode, self.batch_len, self.seed);
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if let Some(init) = self.init {
            cfg.init = match init {
                InitArg::Mixture => InitKind::Mixture,
                InitArg::RobustMixture => InitKind::RobustMixture,
            };
        }
        if let Some(update) = self.update {
            cfg.update = match update {
                UpdateArg::Mbre => RobustUpdate::OneStepMbre,
                UpdateArg::Mle => RobustUpdate::WeightedMle,
            };
        }
        if let Some(r) = self.reference {
            cfg.reference = match r {
                ReferenceArg::Standard => ReferenceScale::Standard,
                ReferenceArg::Sd => ReferenceScale::SampleSd,
                ReferenceArg::Mad => ReferenceScale::Mad,
            };
        }
        cfg.reassignment = match self.reassignment {
            ReassignArg::Random => NoiseReassignment::Random,
            ReassignArg::Posterior => NoiseReassignment::Posterior,
        };
        cfg.init_batches = if self.init_batches == 0 { None } else { Some(self.init_batches) };
        cfg.flag_quantile = self.flag_quantile;
        if self.states == 0 {
            bail!("--states must be positive");
        }
        Ok(cfg)
    }

    fn to_args(&self) -> Vec<String> {
        let name = |v: &dyn ValueEnumName| v.name();
        let mut v = vec![
            "--states".into(),
            self.states.to_string(),
            "--batch-len".into(),
            self.batch_len.to_string(),
            "--mode".into(),
            name(&self.mode),
            "--seed".into(),
            self.seed.to_string(),
            "--reassignment".into(),
            name(&self.reassignment),
            "--init-batches".into(),
            self.init_batches.to_string(),
            "--flag-quantile".into(),
            self.flag_quantile.to_string(),
        ];
        if let Some(alpha) = self.alpha {
            v.extend(["--alpha".into(), alpha.to_string()]);
        }
        if let Some(x) = &self.init {
            v.extend(["--init".into(), name(x)]);
        }
        if let Some(x) = &self.update {
            v.extend(["--update".into(), name(x)]);
        }
        if let Some(x) = &self.reference {
            v.extend(["--reference".into(), name(x)]);
        }
        v
    }
}

trait ValueEnumName {
    fn name(&self) -> String;
}

impl<T: ValueEnum> ValueEnumName for T {
    fn name(&self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

fn trace_details(trace: &EstimationTrace) -> serde_json::Value {
    json!({
        "config": trace.config,
        "sigma_bar": trace.sigma_bar,
        "vol_floor": trace.vol_floor,
        "flag_threshold": trace.flag_threshold,
        "initial_model": trace.initial_model,
        "initial_x0": trace.initial_x0,
        "noise_component": trace.noise_component,
        "calibration": trace.batches.iter().map(|b| json!({
            "batch": b.index,
            "calibration": b.calibration,
            "fallback": b.calibration_fallback,
        })).collect::<Vec<_>>(),
        "final_model": trace.final_model(),
        "breakdown": trace.breakdown,
    })
}

fn cmd_estimate(a: &EstimateArgs) -> anyhow::Result<Outcome> {
    let series = read_series(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let cfg = a.engine.config()?;
    let trace = run(&series, a.engine.states, &cfg)?;
    let dir = &a.out.out;
    prepare_dir(dir)?;
    write_steps_csv(&trace, create(&dir.join("steps.csv"))?)?;
    write_batches_csv(&trace, create(&dir.join("batches.csv"))?)?;
    let mut args = vec!["estimate".to_string(), "--input".into(), a.input.display().to_string()];
    args.extend(a.engine.to_args());
    let mut details = trace_details(&trace);
    details["observations"] = json!(series.len());
    Manifest::new("estimate", args, vec!["steps.csv".into(), "batches.csv".into()], details).write(dir)?;
    Ok(match trace.breakdown {
        Some(b) => Outcome::Breakdown(b),
        None => Outcome::Completed,
    })
}

fn cmd_verify_theorem(a: &TheoremArgs) -> anyhow::Result<Outcome> {
    let law = NormalLaw { mean: a.mean, sd: a.sd };
    if !(a.sd > 0.0) {
        bail!("--sd must be positive");
    }
    let problem = SoProblem::solve(law, a.rate)?;
    let (contaminators, reconstructions) = normal_battery(&problem);
    let report = verify_saddle_point(&problem, &contaminators, &reconstructions, a.draws, a.seed)?;
    let dir = &a.out.out;
    prepare_dir(dir)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(dir.join("theorem.json"), text)?;
    let args = vec![
        "verify-theorem".into(),
        "--rate".into(),
        a.rate.to_string(),
        "--mean".into(),
        a.mean.to_string(),
        "--sd".into(),
        a.sd.to_string(),
        "--draws".into(),
        a.draws.to_string(),
        "--seed".into(),
        a.seed.to_string(),
    ];
    let details = json!({ "rho": report.rho, "saddle_risk": report.saddle_risk, "holds": report.holds });
    Manifest::new("verify-theorem", args, vec!["theorem.json".into()], details).write(dir)?;
    Ok(Outcome::Completed)
}

pub const SCENARIOS: [&str; 3] = ["clean", "considerable", "severe"];

/// Panel tables for one estimated scenario: observed returns, per-batch
/// estimates and one-step forecasts. The estimate and forecast tables stop
/// where a classical run broke down.
pub fn write_panels(dir: &Path, stem: &str, path: &SimulatedPath, trace: &EstimationTrace) -> anyhow::Result<Vec<String>> {
    let n = trace.n_states;
    let returns = format!("{stem}_returns.csv");
    let mut w = csv::Writer::from_path(dir.join(&returns))?;
    w.write_record(["k", "observed", "clean", "is_outlier"])?;
    for k in 0..path.observed_returns.len() {
        w.write_record([
            (k + 1).to_string(),
            path.observed_returns.values()[k].to_string(),
            path.clean_returns.values()[k].to_string(),
            path.outlier_mask[k].to_string(),
        ])?;
    }
    w.flush()?;

    let estimates = format!("{stem}_estimates.csv");
    let mut w = csv::Writer::from_path(dir.join(&estimates))?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("f_{i}")));
    header.extend((1..=n).map(|i| format!("sigma_{i}")));
    header.extend((1..=n).map(|i| format!("pi_{i}_{i}")));
    w.write_record(&header)?;
    for b in &trace.batches {
        let mut row = vec![(b.start + b.len - 1).to_string()];
        row.extend(b.model.drift().iter().map(|v| v.to_string()));
        row.extend(b.model.vol().iter().map(|v| v.to_string()));
        row.extend((0..n).map(|i| b.model.pi(i, i).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let forecast = format!("{stem}_forecast.csv");
    let mut w = csv::Writer::from_path(dir.join(&forecast))?;
    w.write_record(["k", "observed", "forecast", "flagged"])?;
    for s in &trace.steps {
        // Forecast made after y_k, compared with y_{k+1}.
        let next = path.observed_returns.values().get(s.k).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([(s.k + 1).to_string(), next, s.forecast_next.to_string(), s.flagged.to_string()])?;
    }
    w.flush()?;
    Ok(vec![returns, estimates, forecast])
}

fn cmd_figures(a: &FiguresArgs) -> anyhow::Result<Outcome> {
    let model = demo_model();
    let dir = &a.out.out;
    prepare_dir(dir)?;
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for scenario in SCENARIOS {
        let spec = parse_contamination(if scenario == "clean" { "none" } else { scenario }, &model)?;
        let path = simulate_scenario(&model, a.horizon, a.seed, &spec)?;
        for mode in [Mode::Classical, Mode::Robust] {
            let cfg = BatchConfig::for_mode(mode, a.batch_len, a.seed);
            let trace = run(&path.observed_returns, model.n_states(), &cfg)?;
            let mode_name = match mode {
                Mode::Classical => "classical",
                Mode::Robust => "robust",
            };
            outputs.extend(write_panels(dir, &format!("{scenario}_{mode_name}"), &path, &trace)?);
            summary.push(json!({
                "scenario": scenario,
                "mode": mode_name,
                "contamination": spec.describe(),
                "batches": trace.batches.len(),
                "breakdown": trace.breakdown,
                "final_model": trace.final_model(),
            }));
        }
    }
    let args = vec![
        "figures".into(),
        "--seed".into(),
        a.seed.to_string(),
        "--batch-len".into(),
        a.batch_len.to_string(),
        "--horizon".into(),
        a.horizon.to_string(),
    ];
    Manifest::new("figures", args, outputs, json!({ "model": model, "runs": summary })).write(dir)?;
    Ok(Outcome::Completed)
}

fn cmd_replay(a: &ReplayArgs) -> anyhow::Result<Outcome> {
    let manifest = Manifest::read(&a.manifest)?;
    if manifest.command == "replay" {
        bail!("manifest records a replay");
    }
    let mut argv = vec![env!("CARGO_PKG_NAME").to_string()];
    argv.extend(manifest.args.iter().cloned());
    argv.extend(["--out".to_string(), a.out.out.display().to_string()]);
    let cli = Cli::try_parse_from(argv).context("manifest arguments no longer parse")?;
    execute(cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_returns_and_prices() {
        let s = read_series_from("return\n0.1\n-0.2\n".as_bytes()).unwrap();
        assert_eq!(s.values(), &[0.1, -0.2]);
        let p = read_series_from("date,price\n2020-01,100\n2020-02,110\n2020-03,99\n".as_bytes()).unwrap();
        assert!((p.values()[0] - (1.1f64).ln()).abs() < 1e-15);
        assert_eq!(p.timestamps().unwrap(), &["2020-02".to_string(), "2020-03".to_string()]);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = read_series_from("return\n0.1\nabc\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let err = read_series_from("price\n1\n0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let err = read_series_from("price,return\n1,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 1, .. }), "{err}");
        let err = read_series_from("value\n1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 1, .. }), "{err}");
    }

    #[test]
    fn contamination_specs_parse() {
        let m = demo_model();
        assert!(matches!(parse_contamination("none", &m).unwrap().mechanism, crate::simulator::Mechanism::None));
        let fixed = parse_contamination("fixed:3=0.5, 7=-1", &m).unwrap();
        assert_eq!(fixed.describe(), "fixed:3=0.5,7=-1");
        assert!(parse_contamination("iid:0.1:0:1", &m).is_ok());
        assert!(parse_contamination("iid:0.1:0", &m).is_err());
        assert!(parse_contamination("bogus", &m).is_err());
    }

    #[test]
    fn engine_args_round_trip() {
        let cli = Cli::try_parse_from([
            "robust-hmm", "estimate", "--input", "x.csv", "--mode", "robust", "--alpha", "1", "--init", "mixture",
            "--update", "mle", "--out", "o",
        ])
        .unwrap();
        let Command::Estimate(a) = cli.command else { panic!() };
        let mut argv = vec!["robust-hmm".to_string(), "estimate".into(), "--input".into(), "x.csv".into()];
        argv.extend(a.engine.to_args());
        let Command::Estimate(b) = Cli::try_parse_from(argv).unwrap().command else { panic!() };
        assert_eq!(a.engine.config().unwrap(), b.engine.config().unwrap());
        let cfg = b.engine.config().unwrap();
        assert_eq!(cfg.update, RobustUpdate::WeightedMle);
        assert_eq!(cfg.alpha, 1.0);
    }
}
