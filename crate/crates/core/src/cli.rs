//! Command-line interface of the `clustermf` binary.
//!
//! Exit status: 0 on success, 1 on invalid input, 2 when an exhaustive
//! procedure exceeds its budget, 3 when a checked property fails.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::benchmarks;
use crate::empirical;
use crate::error::{Error, Result};
use crate::exact;
use crate::induction::{self, DecentralizedPolicy, Feedback, RepresentativeSystem};
use crate::meanfield::{self, Interpolation, MeanFieldSolution};
use crate::measure::MeasureArray;
use crate::model::{Horizon, PopulationLayout, TeamSpec};
use crate::output::{num, read_csv, read_json, sha256_hex, write_csv, write_json, Meta, Table};
use crate::verify;

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;
pub const EXIT_ASSERTION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "clustermf", version, about = "Solvers and experiments for teams of exchangeable agent clusters")]
pub struct Cli {
    /// Worker threads; defaults to the machine parallelism.
    #[arg(long, global = true, env = "CLUSTERMF_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dynamic programming over joint states of a finite team.
    SolveExact(SolveExactArgs),
    /// Dynamic programming over per-cluster state counts.
    SolveEmpirical(SolveEmpiricalArgs),
    /// Mean-field dynamic programming on a simplex grid.
    SolveMf(SolveMfArgs),
    /// Per-agent kernels along the flow of a mean-field solution.
    Induce(InduceArgs),
    /// Finite populations driven by an induced policy.
    SimulateInduced(SimulateArgs),
    /// Property experiments.
    Verify(VerifyArgs),
    /// Index of the artifacts in one or more output directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Instance JSON file.
    #[arg(long)]
    pub instance: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveExactArgs {
    #[command(flatten)]
    pub common: Common,
    /// Agents per cluster, e.g. `2,3`.
    #[arg(long)]
    pub layout: String,
    /// Steps, or `inf`; defaults to the instance horizon.
    #[arg(long)]
    pub horizon: Option<Horizon>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Largest number of joint state-action pairs.
    #[arg(long, default_value_t = exact::DEFAULT_BUDGET)]
    pub budget: u128,
}

#[derive(Debug, Args)]
pub struct SolveEmpiricalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub layout: String,
    #[arg(long)]
    pub horizon: Option<Horizon>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = exact::DEFAULT_BUDGET)]
    pub budget: u128,
    /// Also solve over joint states and compare the value functions.
    #[arg(long = "check-thm5")]
    pub check_thm5: bool,
}

#[derive(Debug, Args)]
pub struct SolveMfArgs {
    #[command(flatten)]
    pub common: Common,
    /// Simplex grid resolution K.
    #[arg(long)]
    pub grid: u32,
    /// Action grid resolution L.
    #[arg(long = "action-grid")]
    pub action_grid: u32,
    #[arg(long)]
    pub horizon: Option<Horizon>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = Interpolation::Kuhn)]
    pub interpolation: Interpolation,
    #[arg(long, default_value_t = meanfield::DEFAULT_BUDGET)]
    pub budget: u128,
}

#[derive(Debug, Args)]
pub struct InduceArgs {
    #[command(flatten)]
    pub common: Common,
    /// `mf_solution.json` written by `solve-mf`.
    #[arg(long)]
    pub solution: PathBuf,
    /// Defaults to the horizon of the solution.
    #[arg(long)]
    pub horizon: Option<Horizon>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// `induced_policy.json` written by `induce`.
    #[arg(long)]
    pub policy: PathBuf,
    /// Population sizes, split evenly across clusters.
    #[arg(long = "N-sweep", value_delimiter = ',', default_value = "8,32,128,512")]
    pub n_sweep: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub rollouts: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Feedback::Flow)]
    pub feedback: Feedback,
    /// Mean-field solution, required for empirical feedback.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Largest accepted gap at the largest N, as a fraction of `c_max M / (1 - beta)`.
    #[arg(long, default_value_t = 0.02)]
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Thm8,
    Chaos,
    Values,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Random laws per (shape, symbols, concentration) cell.
    #[arg(long, default_value_t = 2)]
    pub laws_per_cell: usize,
    /// Instance for the chaos suite; defaults to the two-cluster benchmark.
    #[arg(long)]
    pub chaos_instance: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    pub chaos_sizes: Vec<usize>,
    /// Last step included in the chaos averages.
    #[arg(long, default_value_t = 50)]
    pub chaos_steps: usize,
    #[arg(long, default_value_t = 500)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 0.05)]
    pub chaos_threshold: f64,
    /// Instance for the values suite; defaults to the one-cluster benchmark.
    #[arg(long)]
    pub values_instance: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    pub value_sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub grid: u32,
    #[arg(long = "action-grid", default_value_t = 10)]
    pub action_grid: u32,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories holding artifacts.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Failure of a run, mapped to an exit status.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    Assertion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Error(Error::Budget { .. }) => EXIT_BUDGET,
            Failure::Error(_) => EXIT_INVALID,
            Failure::Assertion(_) => EXIT_ASSERTION,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Error(e) => write!(f, "{e}"),
            Failure::Assertion(m) => write!(f, "assertion failed: {m}"),
        }
    }
}

type Run = std::result::Result<(), Failure>;

/// Parses `args` and runs the subcommand, returning the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Run {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("threads", "must be at least 1").into());
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::SolveExact(a) => solve_exact(a),
        Command::SolveEmpirical(a) => solve_empirical(a),
        Command::SolveMf(a) => solve_mf(a),
        Command::Induce(a) => induce(a),
        Command::SimulateInduced(a) => simulate_induced(a),
        Command::Verify(a) => run_verify(a),
        Command::Report(a) => report(a),
    }
}

fn load(path: &Path) -> Result<(TeamSpec, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::invalid(path.display().to_string(), e.to_string()))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::invalid(path.display().to_string(), e.to_string()))?;
    Ok((TeamSpec::from_json_str(text)?, bytes))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn tuple(xs: &[usize]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("({})", parts.join(","))
}

fn measure_header(spec: &TeamSpec, prefix: &str) -> Vec<String> {
    (0..spec.clusters())
        .flat_map(|j| (0..spec.state_sizes()[j]).map(move |x| format!("{prefix}{j}_{x}")))
        .collect()
}

fn measure_cells(mu: &MeasureArray) -> impl Iterator<Item = String> + '_ {
    mu.iter().flat_map(|c| c.as_slice().iter().map(|&p| num(p)))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::invalid(name, format!("must be positive, got {v}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct ExactPolicyDoc {
    horizon: Horizon,
    layout: Vec<usize>,
    /// Radices of the joint action index, agent 0 most significant.
    action_radices: Vec<usize>,
    /// `selectors[t][state]`: joint action index.
    selectors: Vec<Vec<usize>>,
    iterations: usize,
    expected_cost: f64,
}

fn solve_exact(a: SolveExactArgs) -> Run {
    check_positive("tol", a.tol)?;
    let (spec, bytes) = load(&a.common.instance)?;
    let layout = PopulationLayout::parse(&a.layout)?;
    let horizon = a.horizon.unwrap_or(spec.horizon());
    let model = exact::ExactModel::new(&spec, &layout, a.budget)?;
    let res = match horizon {
        Horizon::Finite(t) => exact::solve_finite_with(&model, t),
        Horizon::Infinite => exact::solve_infinite_with(&model, a.tol),
    };
    let space = model.space();
    let cost = space.average_over_initial_law(spec.nu0(), res.initial_values());
    let meta = Meta::new("solve-exact")
        .instance(&bytes)
        .flag("layout", &a.layout)
        .flag("horizon", horizon)
        .flag("tol", a.tol)
        .flag("budget", a.budget);
    out_dir(&a.common.out)?;
    let mut t = Table::new(["t", "state", "value"]);
    for (step, vals) in res.values.iter().enumerate() {
        for (s, &v) in vals.iter().enumerate() {
            t.push(vec![step.to_string(), tuple(&space.states().digits(s)), num(v)]);
        }
    }
    write_csv(&a.common.out.join("exact_values.csv"), &meta, &t)?;
    let doc = ExactPolicyDoc {
        horizon,
        layout: layout.sizes().to_vec(),
        action_radices: space.actions().radices().to_vec(),
        selectors: res.policy.clone(),
        iterations: res.iterations,
        expected_cost: cost,
    };
    write_json(&a.common.out.join("exact_policy.json"), &meta, &doc)?;
    println!("expected cost from nu0: {}", num(cost));
    Ok(())
}

fn solve_empirical(a: SolveEmpiricalArgs) -> Run {
    check_positive("tol", a.tol)?;
    let (spec, bytes) = load(&a.common.instance)?;
    let layout = PopulationLayout::parse(&a.layout)?;
    let horizon = a.horizon.unwrap_or(spec.horizon());
    let res = empirical::solve_dp(&spec, &layout, horizon, a.tol, a.budget)?;
    let meta = Meta::new("solve-empirical")
        .instance(&bytes)
        .flag("layout", &a.layout)
        .flag("horizon", horizon)
        .flag("tol", a.tol)
        .flag("budget", a.budget)
        .flag("check-thm5", a.check_thm5);
    out_dir(&a.common.out)?;
    let mut t = Table::new(["t", "state", "value"]);
    for (step, vals) in res.values.iter().enumerate() {
        for (s, &v) in res.states.iter().zip(vals) {
            t.push(vec![step.to_string(), s.to_string(), num(v)]);
        }
    }
    write_csv(&a.common.out.join("empirical_values.csv"), &meta, &t)?;
    let selectors: Vec<Vec<String>> = res.policy.iter().map(|p| p.iter().map(|x| x.to_string()).collect()).collect();
    write_json(&a.common.out.join("empirical_policy.json"), &meta, &serde_json::json!({
        "horizon": horizon,
        "layout": layout.sizes(),
        "states": res.states.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "actions": selectors,
        "iterations": res.iterations,
    }))?;
    if a.check_thm5 {
        let rep = empirical::check_representation_equivalence(&spec, &layout, horizon, a.tol, a.budget)?;
        write_json(&a.common.out.join("equivalence.json"), &meta, &rep)?;
        println!("max |J - J_hat| = {:e} (threshold {:e})", rep.max_discrepancy, rep.threshold);
        if !rep.passed {
            return Err(Failure::Assertion(format!(
                "joint and empirical value functions differ by {:e}",
                rep.max_discrepancy
            )));
        }
    }
    Ok(())
}

fn solve_mf(a: SolveMfArgs) -> Run {
    check_positive("tol", a.tol)?;
    if a.grid == 0 || a.action_grid == 0 {
        return Err(Error::invalid("grid", "resolutions must be at least 1").into());
    }
    let (spec, bytes) = load(&a.common.instance)?;
    let horizon = a.horizon.unwrap_or(spec.horizon());
    let model = meanfield::MeanFieldModel::new(&spec, a.grid, a.action_grid, a.interpolation, a.budget)?;
    let sol = match horizon {
        Horizon::Finite(t) => meanfield::finite_horizon_dp_with(&model, t),
        Horizon::Infinite => meanfield::value_iteration_with(&model, a.tol)?,
    };
    let roll = meanfield::rollout_flow(&spec, &sol, spec.nu0(), horizon)?;
    let meta = Meta::new("solve-mf")
        .instance(&bytes)
        .flag("grid", a.grid)
        .flag("action-grid", a.action_grid)
        .flag("horizon", horizon)
        .flag("tol", a.tol)
        .flag("interpolation", format!("{:?}", a.interpolation).to_lowercase())
        .flag("budget", a.budget);
    out_dir(&a.common.out)?;
    let grid = model.grid();
    let mut header = vec!["t".to_string(), "point".to_string()];
    header.extend(measure_header(&spec, "mu"));
    header.push("value".into());
    let mut t = Table::new(header);
    let points: Vec<MeasureArray> = (0..grid.len()).map(|i| grid.point(i)).collect();
    for (step, vals) in sol.values.iter().enumerate() {
        for (i, &v) in vals.iter().enumerate() {
            let mut row = vec![step.to_string(), i.to_string()];
            row.extend(measure_cells(&points[i]));
            row.push(num(v));
            t.push(row);
        }
    }
    write_csv(&a.common.out.join("mf_values.csv"), &meta, &t)?;
    write_json(&a.common.out.join("mf_solution.json"), &meta, &sol)?;
    let mut header = vec!["t".to_string()];
    header.extend(measure_header(&spec, "mu"));
    header.push("stage_cost".into());
    let mut r = Table::new(header);
    for step in &roll.steps {
        let mut row = vec![step.t.to_string()];
        row.extend(measure_cells(&step.mu));
        row.push(num(step.stage_cost));
        r.push(row);
    }
    write_csv(&a.common.out.join("mf_rollout.csv"), &meta, &r)?;
    println!("value at nu0: {}", num(sol.value_at(&spec, spec.nu0())?));
    println!("cost along the flow: {}", num(roll.discounted_cost));
    Ok(())
}

fn induce(a: InduceArgs) -> Run {
    let (spec, bytes) = load(&a.common.instance)?;
    let (_, sol): (Meta, MeanFieldSolution) = read_json(&a.solution)?;
    let horizon = a.horizon.unwrap_or(sol.horizon);
    let policy = induction::induce_policy(&spec, &sol, spec.nu0(), horizon)?;
    let meta = Meta::new("induce")
        .instance(&bytes)
        .flag("solution", sha256_hex(&fs::read(&a.solution)?))
        .flag("horizon", horizon);
    out_dir(&a.common.out)?;
    write_json(&a.common.out.join("induced_policy.json"), &meta, &policy)?;
    let mut header = vec!["t".to_string()];
    header.extend(measure_header(&spec, "mu"));
    for j in 0..spec.clusters() {
        for x in 0..spec.state_sizes()[j] {
            for u in 0..spec.action_sizes()[j] {
                header.push(format!("pi{j}_{x}_{u}"));
            }
        }
    }
    let mut t = Table::new(header);
    for (step, (mu, k)) in policy.flow.iter().zip(&policy.kernels).enumerate() {
        let mut row = vec![step.to_string()];
        row.extend(measure_cells(mu));
        row.extend(k.rows().iter().flatten().flatten().map(|&p| num(p)));
        t.push(row);
    }
    write_csv(&a.common.out.join("flow.csv"), &meta, &t)?;
    let rep = RepresentativeSystem::new(policy.clone(), spec.nu0().clone());
    println!("mean-field cost: {}", num(policy.mean_field_cost));
    println!("representative cost: {}", num(rep.exact_cost(&spec)));
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    feedback: Feedback,
    report: induction::CostPreservationReport,
    representative_cost: f64,
    consistency_defect: f64,
}

fn simulate_induced(a: SimulateArgs) -> Run {
    let (spec, bytes) = load(&a.common.instance)?;
    let (_, mut policy): (Meta, DecentralizedPolicy) = read_json(&a.policy)?;
    if a.rollouts < 2 {
        return Err(Error::invalid("rollouts", "need at least 2").into());
    }
    if a.feedback == Feedback::Empirical {
        let path = a.solution.as_ref().ok_or_else(|| Error::invalid("solution", "empirical feedback needs --solution"))?;
        let (_, sol): (Meta, MeanFieldSolution) = read_json(path)?;
        policy = policy.with_source(sol);
    }
    let scale = spec.max_cluster_cost() * spec.clusters() as f64 / (1.0 - spec.beta());
    let threshold = a.threshold * scale;
    let meta = Meta::new("simulate-induced")
        .instance(&bytes)
        .seed(a.seed)
        .flag("policy", sha256_hex(&fs::read(&a.policy)?))
        .flag("N-sweep", a.n_sweep.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","))
        .flag("rollouts", a.rollouts)
        .flag("feedback", format!("{:?}", a.feedback).to_lowercase())
        .flag("threshold", a.threshold);
    let report = if a.feedback == Feedback::Flow {
        induction::check_cost_preservation(&spec, &policy, &a.n_sweep, a.rollouts, a.seed, threshold)?
    } else {
        // same sweep with measure feedback
        let rows = a
            .n_sweep
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let layout = PopulationLayout::even(n, spec.clusters())?;
                let tp = induction::truncate_policy(&policy, &layout)?.with_feedback(Feedback::Empirical)?;
                let rep = induction::simulate_truncated(&spec, &tp, a.rollouts, a.seed.wrapping_add((k as u64) << 32))?;
                Ok(induction::SweepRow {
                    n,
                    layout: layout.sizes().to_vec(),
                    gap: (rep.mean - policy.mean_field_cost).abs(),
                    mean: rep.mean,
                    std_err: rep.std_err,
                    mean_tv: rep.mean_tv,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        induction::CostPreservationReport::from_rows(policy.mean_field_cost, rows, threshold)?
    };
    out_dir(&a.common.out)?;
    let mut t = Table::new(["N", "layout", "mean", "std_err", "target", "gap", "mean_tv"]);
    for r in &report.rows {
        t.push(vec![r.n.to_string(), tuple(&r.layout), num(r.mean), num(r.std_err), num(report.target), num(r.gap), num(r.mean_tv)]);
    }
    write_csv(&a.common.out.join("simulate.csv"), &meta, &t)?;
    let sys = RepresentativeSystem::new(policy.clone(), spec.nu0().clone());
    let ok = report.non_increasing && report.last_below_threshold;
    let summary = SimulateSummary {
        feedback: a.feedback,
        representative_cost: sys.exact_cost(&spec),
        consistency_defect: sys.consistency_defect(&spec),
        report,
    };
    write_json(&a.common.out.join("simulate_summary.json"), &meta, &summary)?;
    for r in &summary.report.rows {
        println!("N={:<6} J={:.6} +- {:.6}  gap={:.6}", r.n, r.mean, r.std_err, r.gap);
    }
    if !ok {
        return Err(Failure::Assertion("cost gap is not shrinking to below the threshold".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct SuiteResult {
    suite: &'static str,
    passed: bool,
    detail: serde_json::Value,
}

fn instance_or(path: &Option<PathBuf>, default: &str) -> Result<(TeamSpec, Vec<u8>)> {
    match path {
        Some(p) => load(p),
        None => Ok((TeamSpec::from_json_str(default)?, default.as_bytes().to_vec())),
    }
}

fn run_verify(a: VerifyArgs) -> Run {
    out_dir(&a.out)?;
    let base = Meta::new("verify").seed(a.seed);
    let wants = |s: Suite| a.suite == s || a.suite == Suite::All;
    let mut results = Vec::new();
    if wants(Suite::Thm8) {
        let sweep = verify::bound_sweep(a.seed, a.laws_per_cell, &[0.05, 0.3, 1.0])?;
        let meta = base.clone().flag("suite", "thm8").flag("laws-per-cell", a.laws_per_cell);
        let mut t = Table::new(["law", "symbols", "N", "alpha", "k", "tv", "bound", "pass", "collision_bound", "collision_pass"]);
        for r in &sweep.records {
            t.push(vec![
                r.law.to_string(),
                r.symbols.to_string(),
                tuple(&r.sizes),
                num(r.alpha),
                tuple(&r.k),
                num(r.check.tv),
                num(r.check.bound),
                r.check.pass.to_string(),
                num(r.check.collision_bound),
                r.check.collision_pass.to_string(),
            ]);
        }
        write_csv(&a.out.join("thm8.csv"), &meta, &t)?;
        println!("extension bound: {} laws, {} checks, {} violations of the stated bound, {} of the collision bound",
            sweep.laws, sweep.records.len(), sweep.failures, sweep.collision_failures);
        results.push(SuiteResult {
            suite: "thm8",
            passed: sweep.failures == 0 && sweep.max_tv_single == 0.0,
            detail: serde_json::json!({
                "laws": sweep.laws,
                "checks": sweep.records.len(),
                "failures": sweep.failures,
                "collision_failures": sweep.collision_failures,
                "max_tv_single": sweep.max_tv_single,
            }),
        });
    }
    if wants(Suite::Chaos) {
        let (spec, bytes) = instance_or(&a.chaos_instance, benchmarks::TWO_CLUSTER_COUPLED)?;
        let sol = meanfield::value_iteration(&spec, a.grid, a.action_grid, 1e-6, Interpolation::Kuhn, meanfield::DEFAULT_BUDGET)?;
        let policy = induction::induce_policy(&spec, &sol, spec.nu0(), Horizon::Infinite)?;
        let rep = verify::chaos_experiment(&spec, &policy, &a.chaos_sizes, a.chaos_steps, a.rollouts, a.seed, a.chaos_threshold)?;
        let meta = base
            .clone()
            .instance(&bytes)
            .flag("suite", "chaos")
            .flag("grid", a.grid)
            .flag("action-grid", a.action_grid)
            .flag("steps", a.chaos_steps)
            .flag("rollouts", a.rollouts);
        let mut t = Table::new(["N", "layout", "mean_tv", "std_err", "sqrtN_tv"]);
        for r in &rep.rows {
            t.push(vec![r.n.to_string(), tuple(&r.layout), num(r.mean_tv), num(r.std_err), num(r.scaled_tv)]);
            println!("chaos N={:<6} mean TV {:.5} +- {:.5}", r.n, r.mean_tv, r.std_err);
        }
        write_csv(&a.out.join("chaos.csv"), &meta, &t)?;
        results.push(SuiteResult {
            suite: "chaos",
            passed: rep.non_increasing && rep.last_below_threshold,
            detail: serde_json::to_value(&rep)?,
        });
    }
    if wants(Suite::Values) {
        let (spec, bytes) = instance_or(&a.values_instance, benchmarks::SINGLE_CLUSTER_BINARY)?;
        let horizon = match spec.horizon() {
            Horizon::Finite(t) => t,
            Horizon::Infinite => return Err(Error::invalid("horizon", "the values suite needs a finite-horizon instance").into()),
        };
        let mf = verify::MeanFieldGrid { grid: a.grid, action_grid: a.action_grid, interpolation: Interpolation::Kuhn };
        let rep = verify::value_convergence_experiment(&spec, &a.value_sizes, horizon, mf, exact::DEFAULT_BUDGET)?;
        let meta = base.clone().instance(&bytes).flag("suite", "values").flag("grid", a.grid).flag("action-grid", a.action_grid);
        let mut t = Table::new(["N", "layout", "optimal", "induced", "mean_field", "gap"]);
        for r in &rep.rows {
            t.push(vec![r.n.to_string(), tuple(&r.layout), num(r.optimal), num(r.truncated), num(r.mean_field), num(r.gap)]);
            println!("values N={:<3} J*={:.6} J(induced)={:.6} J_mf={:.6}", r.n, r.optimal, r.truncated, r.mean_field);
        }
        write_csv(&a.out.join("values.csv"), &meta, &t)?;
        results.push(SuiteResult {
            suite: "values",
            passed: rep.lower_holds,
            detail: serde_json::to_value(&rep)?,
        });
    }
    write_json(&a.out.join("verify_summary.json"), &base.flag("suite", format!("{:?}", a.suite).to_lowercase()), &results)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.suite).collect();
    if !failed.is_empty() {
        return Err(Failure::Assertion(format!("suites failed: {}", failed.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    sha256: String,
    command: Option<String>,
    rows: Option<usize>,
}

fn report(a: ReportArgs) -> Run {
    let mut artifacts = Vec::new();
    let mut summaries = Vec::new();
    for dir in &a.inputs {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for path in entries {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext != "csv" && ext != "json" {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "report.json" || name == "report.csv" {
                continue;
            }
            let bytes = fs::read(&path)?;
            let (command, rows) = if ext == "csv" {
                let text = String::from_utf8_lossy(&bytes);
                let meta_text: String = text.lines().take_while(|l| l.starts_with("# ")).map(|l| &l[2..]).collect::<Vec<_>>().join("\n");
                let meta: Option<Meta> = serde_json::from_str(&meta_text).ok();
                (meta.map(|m| m.command), Some(read_csv(&path)?.rows.len()))
            } else {
                let v: serde_json::Value = serde_json::from_slice(&bytes)?;
                if name.ends_with("summary.json") || name == "equivalence.json" {
                    summaries.push(serde_json::json!({ "file": path.display().to_string(), "data": v["data"] }));
                }
                (v["meta"]["command"].as_str().map(String::from), None)
            };
            artifacts.push(Artifact {
                file: path.display().to_string(),
                sha256: sha256_hex(&bytes),
                command,
                rows,
            });
        }
    }
    out_dir(&a.out)?;
    let meta = Meta::new("report").flag("inputs", a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
    let mut t = Table::new(["file", "command", "rows", "sha256"]);
    for x in &artifacts {
        t.push(vec![
            x.file.clone(),
            x.command.clone().unwrap_or_default(),
            x.rows.map(|r| r.to_string()).unwrap_or_default(),
            x.sha256.clone(),
        ]);
    }
    write_csv(&a.out.join("report.csv"), &meta, &t)?;
    write_json(&a.out.join("report.json"), &meta, &serde_json::json!({ "artifacts": artifacts, "summaries": summaries }))?;
    println!("{} artifacts, {} summaries", artifacts.len(), summaries.len());
    Ok(())
}
