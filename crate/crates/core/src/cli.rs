//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bsde::{self, BsdeError, ZIntegrand};
use crate::control::{self, ControlError, ControlModel, FeedbackPolicy};
use crate::mc;
use crate::model::ModelError;
use crate::pde::{self, PdeError, ValueFunction};
use crate::report::{self, CheckRecord, Format, RunReport};
use crate::simulate::{self, FnIntegrand, Quadrature, SimulateError};
use crate::spec::{self, ProblemSpec, SpecError};

const EXIT_CODES: &str = "\
Exit codes:
  0  success, every check passed
  1  at least one check failed
  2  usage error (bad flags)
  3  parse error (problem file or policy CSV)
  4  validation error (inconsistent or out-of-domain data)
  5  numerical failure in the backward solver
  6  control error (bad policy, reduction not absolutely continuous)
  7  I/O error
  8  simulation error or start point out of range";

#[derive(Debug, Parser)]
#[command(name = "jumpbsde", version, about = "Solve and verify backward equations for pure-jump Markov processes")]
#[command(after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Kolmogorov equation for the problem's driver; writes value.csv
    Solve(RunArgs),
    /// Solve the HJB equation; writes value.csv and policy.csv
    SolveHjb(RunArgs),
    /// Simulate paths from the start point; writes paths.csv
    Simulate(RunArgs),
    /// Estimate a policy's cost directly and by reweighting
    EvaluatePolicy(PolicyArgs),
    /// Run every pathwise and Monte Carlo check that applies to the problem
    Verify(PolicyArgs),
    /// Compute the control density from controlled rates; writes reduction.json
    Reduce(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Problem file (JSON)
    #[arg(long)]
    pub spec: PathBuf,
    /// Base seed; overrides run.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo path count; overrides run.n_paths
    #[arg(long)]
    pub paths: Option<usize>,
    /// Time step; overrides run.step
    #[arg(long)]
    pub step: Option<f64>,
    /// Start point `T,X`; overrides run.start
    #[arg(long, value_parser = parse_start)]
    pub start: Option<(f64, usize)>,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Report format
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Feedback policy CSV (cell_index,state,action); defaults to the HJB policy
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

fn parse_start(s: &str) -> Result<(f64, usize), String> {
    let (t, x) = s.split_once(',').ok_or_else(|| format!("expected T,X, got {s:?}"))?;
    let t = t.trim().parse::<f64>().map_err(|e| format!("bad time {t:?}: {e}"))?;
    let x = x.trim().parse::<usize>().map_err(|e| format!("bad state {x:?}: {e}"))?;
    Ok((t, x))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        match e {
            SpecError::Io { .. } => CliError::Io(e.to_string()),
            SpecError::Parse(m) => CliError::Parse(m),
            SpecError::Validation { .. } => CliError::Validation(e.to_string()),
        }
    }
}

fn pde_code(e: &PdeError) -> i32 {
    match e {
        PdeError::NonFiniteValue { .. } => 5,
        PdeError::Model(ModelError::OutOfRange(_)) => 8,
        _ => 4,
    }
}

fn simulate_code(e: &SimulateError) -> i32 {
    match e {
        SimulateError::Model(ModelError::OutOfRange(_)) | SimulateError::RateBoundExceeded { .. } => 8,
        SimulateError::Model(_) => 4,
        SimulateError::Invalid(_) => 8,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 3,
            CliError::Validation(_) => 4,
            CliError::Pde(e) => pde_code(e),
            CliError::Control(e) => match e {
                ControlError::Pde(p) => pde_code(p),
                ControlError::Simulate(s) => simulate_code(s),
                ControlError::Model(_) | ControlError::Dimension(_) | ControlError::NonFinite(_) => 4,
                ControlError::NegativeDensity { .. } => 4,
                ControlError::OutOfRange(_) => 8,
                _ => 6,
            },
            CliError::Simulate(e) => simulate_code(e),
            CliError::Bsde(e) => match e {
                BsdeError::Pde(p) => pde_code(p),
                BsdeError::Simulate(s) => simulate_code(s),
                _ => 4,
            },
            CliError::Io(_) => 7,
        }
    }
}

/// Files produced by a command, written together once it finishes.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs { dir: dir.to_path_buf(), files: Vec::new() }
    }

    fn add(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    fn flush(self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::Io(format!("{}: {e}", self.dir.display())))?;
        for (name, bytes) in self.files {
            let path = self.dir.join(&name);
            std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

/// Independent seed for the `k`-th Monte Carlo experiment of a run.
pub fn derived_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn load(args: &RunArgs) -> Result<ProblemSpec, CliError> {
    let mut spec = spec::load_spec(&args.spec)?;
    if let Some(s) = args.seed {
        spec.run.seed = Some(s);
    }
    if let Some(n) = args.paths {
        spec.run.n_paths = Some(n);
    }
    if let Some(h) = args.step {
        if !(h.is_finite() && h > 0.0) {
            return Err(CliError::Validation(format!("--step {h} must be positive")));
        }
        spec.run.step = Some(h);
    }
    if let Some((t, x)) = args.start {
        if !(t >= 0.0 && t <= spec.model.horizon()) || x >= spec.model.n_states() {
            return Err(SimulateError::Model(ModelError::OutOfRange(format!("--start {t},{x} outside the domain"))).into());
        }
        spec.run.start = Some((t, x));
    }
    Ok(spec)
}

fn new_report(command: &str, spec: &ProblemSpec) -> RunReport {
    let (t, x) = spec.start();
    RunReport {
        command: command.to_string(),
        spec_hash: spec.hash.clone(),
        seed: spec.seed(),
        step: spec.step(),
        n_paths: spec.n_paths(),
        start_time: t,
        start_state: x,
        outputs: Vec::new(),
        quantities: Vec::new(),
        checks: Vec::new(),
    }
}

fn require_terminal(spec: &ProblemSpec, command: &str) -> Result<Vec<f64>, CliError> {
    spec.terminal()
        .map(|g| g.to_vec())
        .ok_or_else(|| CliError::Validation(format!("{command} requires a `g` or `control` section")))
}

fn require_control<'a>(spec: &'a ProblemSpec, command: &str) -> Result<&'a ControlModel, CliError> {
    spec.control
        .as_deref()
        .ok_or_else(|| CliError::Validation(format!("{command} requires a `control` section")))
}

fn require_paths(spec: &ProblemSpec) -> Result<usize, CliError> {
    match spec.n_paths() {
        n if n >= 2 => Ok(n),
        n => Err(CliError::Validation(format!("path count {n} must be at least 2"))),
    }
}

fn value_quantities(report: &mut RunReport, v: &ValueFunction, t: f64) {
    for x in 0..v.n_states() {
        report.push_quantity(&format!("v({t},{x})"), v.at(t, x));
    }
}

/// Policy from `--policy`, else the one extracted from the HJB solve.
fn policy_for(
    spec: &ProblemSpec,
    cm: &ControlModel,
    file: Option<&Path>,
) -> Result<(ValueFunction, FeedbackPolicy, bool), CliError> {
    let (v, extracted) = control::solve_hjb(&spec.model, cm, spec.step())?;
    match file {
        None => Ok((v, extracted, true)),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let policy = FeedbackPolicy::read_csv(&text, cm).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
            Ok((v, policy, false))
        }
    }
}

/// Runs one command and writes its outputs; the report is also written to
/// the output directory as `report.json` or `report.csv`.
pub fn run(cli: &Cli) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let (name, args) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::SolveHjb(a) => ("solve-hjb", a),
        Command::Simulate(a) => ("simulate", a),
        Command::EvaluatePolicy(p) => ("evaluate-policy", &p.run),
        Command::Verify(p) => ("verify", &p.run),
        Command::Reduce(a) => ("reduce", a),
    };
    let spec = load(args)?;
    let mut report = new_report(name, &spec);
    let mut out = Outputs::new(&args.out);
    match &cli.command {
        Command::Solve(_) => solve(&spec, &mut report, &mut out)?,
        Command::SolveHjb(_) => solve_hjb(&spec, &mut report, &mut out)?,
        Command::Simulate(_) => simulate_paths(&spec, &mut report, &mut out)?,
        Command::EvaluatePolicy(p) => evaluate_policy(&spec, p.policy.as_deref(), &mut report)?,
        Command::Verify(p) => verify(&spec, p.policy.as_deref(), &mut report)?,
        Command::Reduce(_) => reduce(&spec, &mut report, &mut out)?,
    }
    let report_name = match args.format {
        Format::Json => "report.json",
        Format::Csv => "report.csv",
    };
    report.outputs = out.names();
    report.outputs.push(report_name.to_string());
    let format = args.format;
    out.add(report_name, |buf| report::emit(&report, format, buf))?;
    out.flush()?;
    eprintln!("{name}: {:.3} s", started.elapsed().as_secs_f64());
    Ok(report)
}

fn solve(spec: &ProblemSpec, report: &mut RunReport, out: &mut Outputs) -> Result<(), CliError> {
    let g = require_terminal(spec, "solve")?;
    let v = pde::solve_kolmogorov(&spec.model, &spec.driver, &g, spec.step())?;
    value_quantities(report, &v, spec.start().0);
    out.add("value.csv", |buf| v.write_csv(buf))
}

fn solve_hjb(spec: &ProblemSpec, report: &mut RunReport, out: &mut Outputs) -> Result<(), CliError> {
    let cm = require_control(spec, "solve-hjb")?;
    let (v, policy) = control::solve_hjb(&spec.model, cm, spec.step())?;
    value_quantities(report, &v, spec.start().0);
    out.add("value.csv", |buf| v.write_csv(buf))?;
    out.add("policy.csv", |buf| policy.write_csv(buf))
}

fn simulate_paths(spec: &ProblemSpec, report: &mut RunReport, out: &mut Outputs) -> Result<(), CliError> {
    let (t, x) = spec.start();
    let n = spec.n_paths();
    let model = &spec.model;
    let paths = mc::collect_paths(n, spec.seed(), |stream| simulate::simulate_path(model, t, x, &mut stream.rng()));
    let paths: Vec<_> = paths.into_iter().collect::<Result<_, _>>()?;
    let counts: Vec<f64> = paths.iter().map(|p| p.n_jumps() as f64).collect();
    report.push_quantity("mean_jump_count", mc::summarize(&counts).mean);
    out.add("paths.csv", |buf| simulate::write_paths_csv(&paths, buf))
}

fn evaluate_policy(spec: &ProblemSpec, file: Option<&Path>, report: &mut RunReport) -> Result<(), CliError> {
    let cm = require_control(spec, "evaluate-policy")?;
    let n = require_paths(spec)?;
    let (t, x) = spec.start();
    let (v, policy, _) = policy_for(spec, cm, file)?;
    let (s1, s2) = (derived_seed(spec.seed(), 1), derived_seed(spec.seed(), 2));
    let direct = control::cost_direct(&spec.model, cm, &policy, t, x, n, s1)?;
    let reweighted = control::cost_reweighted(&spec.model, cm, &policy, t, x, n, s2)?;
    report.push_quantity("value", v.at(t, x));
    report.push_quantity("cost_direct", direct.mean);
    report.push_quantity("cost_direct_se", direct.se);
    report.push_quantity("cost_reweighted", reweighted.mean);
    report.push_quantity("cost_reweighted_se", reweighted.se);
    let se = mc::combined_se(&direct, &reweighted);
    report.checks.push(CheckRecord::monte_carlo("estimator_agreement", direct.mean, reweighted.mean, se, 3.0 * se, n, s1));
    Ok(())
}

/// Pathwise checks are run on at most this many paths.
pub const PATHWISE_PATHS: usize = 1000;

fn verify(spec: &ProblemSpec, file: Option<&Path>, report: &mut RunReport) -> Result<(), CliError> {
    let model = &spec.model;
    let driver = &spec.driver;
    let g = require_terminal(spec, "verify")?;
    let n = require_paths(spec)?;
    let h = spec.step();
    let (t, x) = spec.start();
    let seed = spec.seed();
    let v = pde::solve_kolmogorov(model, driver, &g, h)?;
    let vtx = v.at(t, x);
    report.push_quantity("value", vtx);

    let np = n.min(PATHWISE_PATHS);
    let s = derived_seed(seed, 1);
    let pathwise = mc::collect_paths(np, s, |stream| -> Result<(f64, f64), CliError> {
        let path = simulate::simulate_path(model, t, x, &mut stream.rng())?;
        let residual = bsde::bsde_residual(model, driver, &g, &v, &path)?;
        let ito = bsde::verify_ito(model, &v, &path)?;
        Ok((residual, ito))
    });
    let pathwise: Vec<(f64, f64)> = pathwise.into_iter().collect::<Result<_, _>>()?;
    let max_residual = pathwise.iter().map(|p| p.0).fold(0.0, f64::max);
    let max_ito = pathwise.iter().map(|p| p.1).fold(0.0, f64::max);
    let tol = 10.0 * h * h;
    report.checks.push(CheckRecord::exact("bsde_residual", max_residual, 0.0, tol).at_most().with_paths(np, s));
    report.checks.push(CheckRecord::exact("ito_formula", max_ito, 0.0, tol).at_most().with_paths(np, s));

    for (k, beta) in [(2, 0.0), (3, 2.0)] {
        let s = derived_seed(seed, k);
        let e = bsde::energy_identity_gap(model, &v, driver, t, x, beta, n, s)?;
        let name = format!("energy_identity_beta_{beta}");
        report.checks.push(CheckRecord::monte_carlo(&name, e.lhs.mean, e.rhs.mean, e.gap.se, 3.0 * e.gap.se, n, s));
    }

    let s = derived_seed(seed, 4);
    let one = FnIntegrand::new(|_, _, _| 1.0, Quadrature::CellConstant);
    let c = simulate::martingale_mean(model, &one, t, x, n, s)?;
    report.checks.push(CheckRecord::monte_carlo("compensator", c.mean, 0.0, c.se, 3.0 * c.se, n, s));

    let s = derived_seed(seed, 5);
    let fk = bsde::feynman_kac_mean(model, driver, &g, &v, t, x, n, s)?;
    let tol = 3.0 * fk.se + 10.0 * h * h;
    report.checks.push(CheckRecord::monte_carlo("feynman_kac", fk.mean, vtx, fk.se, tol, n, s));

    let s = derived_seed(seed, 6);
    let zm = simulate::martingale_mean(model, &ZIntegrand { v: &v }, t, x, n, s)?;
    report.checks.push(CheckRecord::monte_carlo("z_martingale", zm.mean, 0.0, zm.se, 3.0 * zm.se, n, s));

    if let Some(cm) = spec.control.as_deref() {
        let (vh, policy, extracted) = policy_for(spec, cm, file)?;
        let vh_tx = vh.at(t, x);
        report.push_quantity("hjb_value", vh_tx);

        let s = derived_seed(seed, 7);
        let w = control::girsanov_mean(model, cm, &policy, t, x, n, s)?;
        report.checks.push(CheckRecord::monte_carlo("girsanov_mean", w.mean, 1.0, w.se, 3.0 * w.se, n, s));

        let s = derived_seed(seed, 8);
        let fg = control::fundamental_gap(model, cm, &policy, &vh, t, x, n, s)?;
        let tol = 3.0 * fg.total.se + 10.0 * h;
        report.checks.push(CheckRecord::monte_carlo("fundamental_relation", vh_tx, fg.total.mean, fg.total.se, tol, n, s));
        report.checks.push(
            CheckRecord::exact("gap_integrand_nonpositive", fg.max_integrand, 0.0, 1e-9).at_most().with_paths(n, s),
        );
        if extracted {
            let tol = (3.0 * fg.gap.se).max(10.0 * h);
            report.checks.push(CheckRecord::monte_carlo("fundamental_gap", fg.gap.mean, 0.0, fg.gap.se, tol, n, s));
            let tol = (3.0 * fg.cost.se).max(10.0 * h);
            report.checks.push(CheckRecord::monte_carlo("optimality", fg.cost.mean, vh_tx, fg.cost.se, tol, n, s));
        } else {
            let tol = 3.0 * fg.cost.se;
            report
                .checks
                .push(CheckRecord::monte_carlo("value_dominance", vh_tx, fg.cost.mean, fg.cost.se, tol, n, s).at_most());
        }
    }
    Ok(())
}

fn reduce(spec: &ProblemSpec, report: &mut RunReport, out: &mut Outputs) -> Result<(), CliError> {
    let raw = spec
        .reduction
        .as_ref()
        .ok_or_else(|| CliError::Validation("reduce requires a `reduction` section".into()))?;
    let red = control::reduce_model(raw, &spec.model)?;
    report.push_quantity("c_r", red.c_r);
    out.add("reduction.json", |buf| {
        serde_json::to_writer_pretty(&mut *buf, &red)?;
        buf.push(b'\n');
        Ok(())
    })
}
