use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use superadj::checks::{self, CheckReport, SkewedFlatGradient, SkewedGradient};
use superadj::config::{ConfigError, Scenario};
use superadj::descent::{baseline_gradient_solve, solve};
use superadj::meanfield::{mf_descent, particle_flow, MeanFieldProblem};
use superadj::report::{control_csv, num, GridInfo, RunReport, SolveSummary};
use superadj::ControlProblem;

#[derive(Parser)]
#[command(name = "superadj", version, about = "Mayer optimal control by exact increments and feedback descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run feedback descent and write trace, control, trajectory and report files.
    Solve(RunArgs),
    /// Run the invariant battery and print a pass/fail table.
    Check(RunArgs),
    /// Compare feedback descent with the gradient baseline on every matching scenario.
    Bench {
        /// Glob of scenario files.
        pattern: String,
        #[command(flatten)]
        common: Common,
    },
    /// Feedback descent on a mean-field scenario; also writes the final ensemble.
    MfSolve(RunArgs),
    /// Pretty-print a report.json.
    Report {
        path: PathBuf,
        /// Re-emit the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also run the conditional-gradient baseline.
    #[arg(long)]
    baseline: bool,
    /// Test-only fault injection (`grad_bug`).
    #[arg(long)]
    inject: Option<String>,
}

#[derive(Args)]
struct Common {
    /// Override the number of grid steps.
    #[arg(long)]
    n_steps: Option<usize>,
    /// Override the particle count of a mean-field scenario.
    #[arg(long)]
    particles: Option<usize>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable output on stdout.
    #[arg(long)]
    json: bool,
}

enum Failure {
    /// Bad input: unreadable or invalid configuration, bad flags.
    Config(String),
    /// The numerics broke down.
    Numeric(String),
    /// Invariant checks did not pass.
    Check(Vec<String>),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numeric(m) => write!(f, "numerical failure: {m}"),
            Failure::Check(names) => write!(f, "failed checks: {}", names.join(", ")),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<superadj::Error> for Failure {
    fn from(e: superadj::Error) -> Self {
        Failure::Numeric(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(&args, false),
        Command::MfSolve(args) => cmd_solve(&args, true),
        Command::Check(args) => cmd_check(&args),
        Command::Bench { pattern, common } => cmd_bench(&pattern, &common),
        Command::Report { path, json } => cmd_report(&path, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("superadj: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load(path: &Path, common: &Common) -> Outcome<Scenario> {
    let mut scenario = Scenario::load(path)?;
    if let Some(n) = common.n_steps {
        scenario = scenario.with_steps(n)?;
    }
    if let Some(n) = common.particles {
        scenario = scenario.with_particles(n)?;
    }
    if let Some(s) = common.seed {
        scenario = scenario.with_seed(s);
    }
    Ok(scenario)
}

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    None,
    GradBug,
}

fn fault(inject: &Option<String>) -> Outcome<Fault> {
    match inject.as_deref() {
        None => Ok(Fault::None),
        Some("grad_bug") => Ok(Fault::GradBug),
        Some(other) => Err(Failure::Config(format!("unknown fault `{other}` (known: grad_bug)"))),
    }
}

fn classical(scenario: &Scenario, fault: Fault) -> Outcome<ControlProblem> {
    let problem = scenario.classical_problem()?;
    Ok(match fault {
        Fault::None => problem,
        Fault::GradBug => problem.with_cost(Arc::new(SkewedGradient(problem.cost.clone()))),
    })
}

fn meanfield(scenario: &Scenario, fault: Fault) -> Outcome<MeanFieldProblem> {
    let problem = scenario.meanfield_problem()?;
    Ok(match fault {
        Fault::None => problem,
        Fault::GradBug => problem.with_cost(Arc::new(SkewedFlatGradient(problem.cost.clone()))),
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Outcome {
    std::fs::write(dir.join(name), contents)
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn cmd_solve(args: &RunArgs, require_meanfield: bool) -> Outcome {
    let scenario = load(&args.config, &args.common)?;
    let fault = fault(&args.inject)?;
    if require_meanfield && !scenario.is_meanfield() {
        return Err(Failure::Config(format!("{} has no [meanfield] section", args.config.display())));
    }
    if args.baseline && scenario.is_meanfield() {
        return Err(Failure::Config("--baseline is only available for ODE scenarios".into()));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", args.out.display())))?;
    let started = Instant::now();
    let u0 = scenario.initial_control(&scenario.grid)?;
    let report = if scenario.is_meanfield() {
        let mfp = meanfield(&scenario, fault)?;
        let (control, trace) = mf_descent(&mfp, &u0, &scenario.descent)?;
        let path = particle_flow(&mfp.detached(), &control, &mfp.initial, 0, scenario.grid.n_steps())?;
        write(&args.out, "trace.csv", &trace.to_csv())?;
        write(&args.out, "control.csv", &control_csv(&control))?;
        write(&args.out, "trajectory.csv", &path.to_csv())?;
        if require_meanfield {
            write(&args.out, "ensemble.csv", &snapshot_csv(path.last(), mfp.state_dim()))?;
        }
        RunReport {
            scenario: scenario.id.clone(),
            problem: scenario.name.clone(),
            command: if require_meanfield { "mf-solve" } else { "solve" }.into(),
            seed: scenario.seed,
            grid: GridInfo::from(&scenario.grid),
            particles: Some(mfp.particles()),
            final_cost: trace.final_cost,
            feedback: SolveSummary::new("feedback", &trace),
            baseline: None,
        }
    } else {
        let problem = classical(&scenario, fault)?;
        let (control, trace) = solve(&problem, &u0, &scenario.descent)?;
        let trajectory = superadj::flow::simulate(&problem.detached(), &control)?;
        write(&args.out, "trace.csv", &trace.to_csv())?;
        write(&args.out, "control.csv", &control_csv(&control))?;
        write(&args.out, "trajectory.csv", &trajectory.to_csv("x"))?;
        let baseline = if args.baseline {
            let fresh = problem.detached();
            let (_, base) = baseline_gradient_solve(&fresh, &u0, &scenario.descent)?;
            write(&args.out, "trace_baseline.csv", &base.to_csv())?;
            Some(SolveSummary::new("baseline", &base))
        } else {
            None
        };
        RunReport {
            scenario: scenario.id.clone(),
            problem: scenario.name.clone(),
            command: "solve".into(),
            seed: scenario.seed,
            grid: GridInfo::from(&scenario.grid),
            particles: None,
            final_cost: trace.final_cost,
            feedback: SolveSummary::new("feedback", &trace),
            baseline,
        }
    };
    write(&args.out, "report.json", &report.to_json())?;
    let timing = serde_json::json!({ "wall_clock_seconds": started.elapsed().as_secs_f64() });
    write(&args.out, "timing.json", &(serde_json::to_string_pretty(&timing).expect("timing serialises") + "\n"))?;
    if args.common.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn snapshot_csv(points: &[f64], dim: usize) -> String {
    let mut s = String::from("particle");
    for i in 1..=dim {
        s.push_str(&format!(",x_{i}"));
    }
    s.push('\n');
    for (i, p) in points.chunks(dim).enumerate() {
        s.push_str(&i.to_string());
        for v in p {
            s.push(',');
            s.push_str(&num(*v));
        }
        s.push('\n');
    }
    s
}

fn cmd_check(args: &RunArgs) -> Outcome {
    let scenario = load(&args.config, &args.common)?;
    let fault = fault(&args.inject)?;
    let outcomes = if scenario.is_meanfield() {
        checks::run_meanfield(&meanfield(&scenario, fault)?, scenario.seed)?
    } else {
        checks::run_classical(&classical(&scenario, fault)?, scenario.seed)?
    };
    let report = CheckReport { scenario: scenario.id.clone(), seed: scenario.seed, checks: outcomes };
    if args.common.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.table());
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(report.failures().into_iter().map(String::from).collect()))
    }
}

#[derive(serde::Serialize)]
struct BenchRow {
    scenario: String,
    method: String,
    initial_cost: f64,
    final_cost: f64,
    iterations: usize,
    integrations: f64,
}

impl BenchRow {
    fn new(scenario: &str, summary: SolveSummary) -> Self {
        Self {
            scenario: scenario.into(),
            method: summary.method,
            initial_cost: summary.initial_cost,
            final_cost: summary.final_cost,
            iterations: summary.iterations,
            integrations: summary.integrations,
        }
    }
}

fn cmd_bench(pattern: &str, common: &Common) -> Outcome {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Failure::Config(format!("bad glob `{pattern}`: {e}")))?
        .filter_map(|p| p.ok())
        .collect();
    if paths.is_empty() {
        return Err(Failure::Config(format!("no scenario matches `{pattern}`")));
    }
    let mut rows = Vec::new();
    for path in &paths {
        let scenario = load(path, common)?;
        let u0 = scenario.initial_control(&scenario.grid)?;
        if scenario.is_meanfield() {
            let mfp = scenario.meanfield_problem()?;
            let (_, trace) = mf_descent(&mfp, &u0, &scenario.descent)?;
            rows.push(BenchRow::new(&scenario.id, SolveSummary::new("feedback", &trace)));
            continue;
        }
        let problem = scenario.classical_problem()?;
        let (_, trace) = solve(&problem, &u0, &scenario.descent)?;
        rows.push(BenchRow::new(&scenario.id, SolveSummary::new("feedback", &trace)));
        if problem.control_set.is_box() {
            let (_, base) = baseline_gradient_solve(&problem.detached(), &u0, &scenario.descent)?;
            rows.push(BenchRow::new(&scenario.id, SolveSummary::new("baseline", &base)));
        }
    }
    if common.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialise"));
    } else {
        println!(
            "{:<20} {:<9} {:>14} {:>14} {:>6} {:>13}",
            "scenario", "method", "initial", "final", "iters", "integrations"
        );
        for r in &rows {
            println!(
                "{:<20} {:<9} {:>14.6e} {:>14.6e} {:>6} {:>13.1}",
                r.scenario, r.method, r.initial_cost, r.final_cost, r.iterations, r.integrations
            );
        }
    }
    Ok(())
}

fn cmd_report(path: &Path, json: bool) -> Outcome {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let report =
        RunReport::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.render());
    }
    Ok(())
}
