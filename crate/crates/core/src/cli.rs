//! Batch front end: JSON run configurations, dispatch, and report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::constraints::{assemble, check_feasible};
use crate::error::{Error, Result};
use crate::lattice::{build_lattice, Domain};
use crate::problem::{
    builtin_problem, CostModel, Density, DensityTable, Dirichlet, Gaussian, GradientBox,
    ProblemSpec, Sense, BUILTIN_NAMES,
};
use crate::pwa::{self, DEFAULT_SUBDIVISIONS};
use crate::risk::{solve_risk, RiskProblem, RiskSolution};
use crate::solver::{
    convergence_study, solve_on_lattice, DecisionState, SolveReport, SolverSettings, StudyRow,
};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "CONVEX_SCREEN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "convex-screen", version, about = "Solve variational problems over convex functions on a lattice")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one problem at one resolution.
    Solve(RunArgs),
    /// Solve at increasing resolutions and tabulate discrete against continuous values.
    Converge(RunArgs),
    /// Solve the finite-state risk-transfer problem.
    Risk(RunArgs),
    /// Print the builtin problem names.
    ListProblems,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Builtin problem name; overrides the config's problem.
    #[arg(long)]
    pub problem: Option<String>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub subdivisions: Option<usize>,
    /// Print the Newton trace to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Solve,
    Converge,
    Risk,
    ListProblems,
}

impl CommandName {
    fn as_str(self) -> &'static str {
        match self {
            CommandName::Solve => "solve",
            CommandName::Converge => "converge",
            CommandName::Risk => "risk",
            CommandName::ListProblems => "list-problems",
        }
    }
}

/// The JSON configuration document. Every key is optional; flags win over keys.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When present, must agree with the subcommand.
    pub command: Option<CommandName>,
    pub problem: Option<ProblemRef>,
    pub k: Option<usize>,
    pub k_list: Option<Vec<usize>>,
    #[serde(default)]
    pub solver: SolverSettings,
    pub out: Option<PathBuf>,
    pub subdivisions: Option<usize>,
    pub risk: Option<RiskProblem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemRef {
    Builtin(String),
    Inline(Box<ProblemConfig>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub domain: Domain,
    pub cost: CostConfig,
    #[serde(default)]
    pub density: DensityConfig,
    pub gradient_set: GradientBox,
    #[serde(default = "default_sense")]
    pub sense: Sense,
    #[serde(default)]
    pub dirichlet: Option<Dirichlet>,
    #[serde(default)]
    pub upper_bound_v: Option<f64>,
    /// Lattice resolution used when neither `k` nor `--k` is given.
    #[serde(default)]
    pub recommended_k: Option<usize>,
}

fn default_name() -> String {
    "custom".into()
}

fn default_sense() -> Sense {
    Sense::MinimizeI
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    Quadratic {
        #[serde(default = "one")]
        scale: f64,
    },
    SqrtNegativeSlope {
        #[serde(default = "one")]
        xi: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    #[default]
    Uniform,
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    /// Node-ordered CSV values on a `k^n` lattice; relative paths resolve
    /// against the config file's directory.
    CustomTable { path: PathBuf, k: usize },
}

impl ProblemConfig {
    pub fn to_spec(&self, base: &Path) -> Result<ProblemSpec> {
        let cost = match self.cost {
            CostConfig::Quadratic { scale } => CostModel::QuadraticHalfNorm { scale },
            CostConfig::SqrtNegativeSlope { xi } => CostModel::SqrtNegativeSlope { xi },
        };
        let density = match &self.density {
            DensityConfig::Uniform => Density::Uniform,
            DensityConfig::Gaussian { mean, covariance } => {
                Density::Gaussian(Gaussian::new(mean.clone(), covariance.clone())?)
            }
            DensityConfig::CustomTable { path, k } => {
                Density::Table(DensityTable::from_csv(&base.join(path), self.domain, *k)?)
            }
        };
        let spec = ProblemSpec {
            name: self.name.clone(),
            domain: self.domain,
            gradient_set: self.gradient_set.clone(),
            cost,
            density,
            sense: self.sense,
            dirichlet: self.dirichlet.clone(),
            upper_bound_v: self.upper_bound_v,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// A fully resolved invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: CommandName,
    pub config: RunConfig,
    /// Directory that relative paths in the config resolve against.
    pub base: PathBuf,
}

impl Invocation {
    /// Merges flags over the config file, if any.
    pub fn resolve(command: CommandName, args: &RunArgs) -> Result<Self> {
        let (mut config, base) = match &args.config {
            Some(path) => {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (RunConfig::from_path(path)?, base)
            }
            None => (RunConfig::default(), PathBuf::from(".")),
        };
        if let Some(named) = config.command {
            if named != command {
                return Err(Error::Config(format!(
                    "config is for `{}` but the command is `{}`",
                    named.as_str(),
                    command.as_str()
                )));
            }
        }
        if let Some(p) = &args.problem {
            config.problem = Some(ProblemRef::Builtin(p.clone()));
        }
        if args.k.is_some() {
            config.k = args.k;
        }
        if args.k_list.is_some() {
            config.k_list = args.k_list.clone();
        }
        if args.out.is_some() {
            config.out = args.out.clone();
        }
        if args.subdivisions.is_some() {
            config.subdivisions = args.subdivisions;
        }
        config.solver.verbose |= args.verbose;
        config.solver.validate()?;
        Ok(Invocation {
            command,
            config,
            base,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.config.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn subdivisions(&self) -> Result<usize> {
        match self.config.subdivisions.unwrap_or(DEFAULT_SUBDIVISIONS) {
            0 => Err(Error::Config("subdivisions must be at least 1".into())),
            s => Ok(s),
        }
    }

    /// The problem and its default resolution.
    fn problem(&self) -> Result<(ProblemSpec, Option<usize>)> {
        match &self.config.problem {
            None => Err(Error::Config("no problem given; use --problem or a config".into())),
            Some(ProblemRef::Builtin(name)) => {
                let b = builtin_problem(name)?;
                Ok((b.spec, Some(b.recommended_k)))
            }
            Some(ProblemRef::Inline(p)) => Ok((p.to_spec(&self.base)?, p.recommended_k)),
        }
    }
}

/// Parses `std::env::args`, runs, and maps failures to an error record.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        emit_error(&e, None);
        return ExitCode::FAILURE;
    }
    let (command, args) = match cli.command {
        Command::ListProblems => {
            for name in BUILTIN_NAMES {
                println!("{name}");
            }
            return ExitCode::SUCCESS;
        }
        Command::Solve(a) => (CommandName::Solve, a),
        Command::Converge(a) => (CommandName::Converge, a),
        Command::Risk(a) => (CommandName::Risk, a),
    };
    let invocation = match Invocation::resolve(command, &args) {
        Ok(inv) => inv,
        Err(e) => {
            emit_error(&e, args.out.as_deref());
            return ExitCode::FAILURE;
        }
    };
    match run(&invocation) {
        Ok(dir) => {
            println!("{}", dir.join("report.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(&e, Some(&invocation.out_dir()));
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Machine-readable failure record.
pub fn error_record(e: &Error) -> Value {
    let mut record = json!({
        "status": "error",
        "kind": e.kind(),
        "message": e.to_string(),
    });
    if let Error::LineSearch { report } | Error::NotConverged { report } = e {
        record["report"] = serde_json::to_value(report.as_ref()).unwrap_or(Value::Null);
    }
    record
}

fn emit_error(e: &Error, out: Option<&Path>) {
    let record = error_record(e);
    eprintln!("{record}");
    if let Some(dir) = out {
        if fs::create_dir_all(dir).is_ok() {
            let _ = write_json(&dir.join("error.json"), &record);
        }
    }
}

/// Runs the invocation and returns the directory holding `report.json`.
pub fn run(inv: &Invocation) -> Result<PathBuf> {
    let dir = inv.out_dir();
    fs::create_dir_all(&dir)?;
    let report = match inv.command {
        CommandName::Solve => run_solve(inv, &dir)?,
        CommandName::Converge => run_converge(inv, &dir)?,
        CommandName::Risk => run_risk(inv, &dir)?,
        CommandName::ListProblems => json!({ "problems": BUILTIN_NAMES }),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(file)?;
    Ok(())
}

fn solver_fields(report: &SolveReport) -> Value {
    json!({
        "kkt_residual": report.kkt_residual,
        "barrier_stages": report.barrier_stages,
        "newton_iterations": report.newton_iterations,
        "wall_time": report.wall_time,
        "duality_gap_estimate": report.duality_gap_estimate,
        "final_mu": report.final_mu,
    })
}

fn run_solve(inv: &Invocation, dir: &Path) -> Result<Value> {
    let (spec, recommended) = inv.problem()?;
    let k = inv
        .config
        .k
        .or(recommended)
        .ok_or_else(|| Error::Config("no k given and the problem has no default".into()))?;
    let subdivisions = inv.subdivisions()?;
    let lattice = build_lattice(spec.domain, k)?;
    let system = assemble(&lattice, &spec)?;
    let (report, state) = solve_on_lattice(&spec, &lattice, &inv.config.solver)?;
    let feasibility = check_feasible(&system, &report.x_opt, 0.0);
    let envelope = pwa::reconstruct(&state, &lattice)?;
    let functional = pwa::functional_value(&envelope, &spec, subdivisions)?;

    write_solution_csv(&lattice, &state, fs::File::create(dir.join("solution.csv"))?)?;
    let envelope_file = if spec.dim() <= 2 {
        let cells = subdivisions * k;
        pwa::write_csv(&envelope, cells, fs::File::create(dir.join("envelope.csv"))?)?;
        Some("envelope.csv")
    } else {
        None
    };

    let mut out = json!({
        "status": "ok",
        "command": "solve",
        "problem": spec.name,
        "sense": spec.sense,
        "k": k,
        "dim": spec.dim(),
        "nodes": lattice.len(),
        "rows": system.len(),
        "objective": spec.sense.sign() * report.objective,
        "objective_minimized": report.objective,
        "functional_value": functional,
        "subdivisions": subdivisions,
        "min_v": state.min_value(),
        "max_constraint_violation": feasibility.max_violation.max(0.0),
        "files": {
            "solution": "solution.csv",
            "envelope": envelope_file,
        },
    });
    merge(&mut out, solver_fields(&report));
    Ok(out)
}

/// `theta_1..theta_n,v,grad_1..grad_n`, one row per lattice node.
pub fn write_solution_csv<W: Write>(
    lattice: &crate::lattice::Lattice,
    state: &DecisionState,
    out: W,
) -> Result<()> {
    let n = lattice.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=n).map(|j| format!("theta_{j}")).collect();
    header.push("v".into());
    header.extend((1..=n).map(|j| format!("grad_{j}")));
    w.write_record(&header)?;
    for i in 0..lattice.len() {
        let mut record: Vec<String> = lattice.center(i).iter().map(|t| t.to_string()).collect();
        record.push(state.values[i].to_string());
        record.extend(state.slope(i).iter().map(|d| d.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn run_converge(inv: &Invocation, dir: &Path) -> Result<Value> {
    let (spec, _) = inv.problem()?;
    let k_list = inv
        .config
        .k_list
        .clone()
        .ok_or_else(|| Error::Config("converge needs --k-list or k_list".into()))?;
    let subdivisions = inv.subdivisions()?;
    let rows = convergence_study(&spec, &k_list, &inv.config.solver, subdivisions)?;
    write_study_csv(&rows, fs::File::create(dir.join("convergence.csv"))?)?;
    Ok(json!({
        "status": "ok",
        "command": "converge",
        "problem": spec.name,
        "sense": spec.sense,
        "subdivisions": subdivisions,
        "levels": rows,
        "files": { "table": "convergence.csv" },
    }))
}

/// `k,nodes,discrete,functional,gap,delta_discrete,delta_functional,newton_iterations,wall_time`;
/// the deltas are empty on the first row.
pub fn write_study_csv<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "k",
        "nodes",
        "discrete",
        "functional",
        "gap",
        "delta_discrete",
        "delta_functional",
        "newton_iterations",
        "wall_time",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.nodes.to_string(),
            r.discrete.to_string(),
            r.functional.to_string(),
            r.discretization_gap.to_string(),
            opt(r.delta_discrete),
            opt(r.delta_functional),
            r.newton_iterations.to_string(),
            r.wall_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_risk(inv: &Invocation, dir: &Path) -> Result<Value> {
    let problem = inv
        .config
        .risk
        .as_ref()
        .ok_or_else(|| Error::Config("risk needs a `risk` section in the config".into()))?;
    let solution = solve_risk(problem, &inv.config.solver)?;
    write_risk_table(&solution, &solution.v, "v", fs::File::create(dir.join("values.csv"))?)?;
    write_risk_table(
        &solution,
        &solution.strikes,
        "strike",
        fs::File::create(dir.join("strikes.csv"))?,
    )?;
    let mut out = json!({
        "status": "ok",
        "command": "risk",
        "orientation": problem.orientation,
        "beta": problem.market.beta,
        "types": solution.types,
        "v": solution.v,
        "slope": solution.slope,
        "strikes": solution.strikes,
        "risk_before": solution.risk_before,
        "risk_after": solution.risk_after,
        "income": solution.income,
        "objective": solution.objective,
        "min_v": solution.v.iter().copied().fold(f64::INFINITY, f64::min),
        "files": { "values": "values.csv", "strikes": "strikes.csv" },
    });
    merge(&mut out, solver_fields(&solution.report));
    Ok(out)
}

/// `index,theta,<column>`, one row per type, 1-based index.
fn write_risk_table<W: Write>(s: &RiskSolution, column: &[f64], name: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "theta", name])?;
    for (i, (t, x)) in s.types.iter().zip(column).enumerate() {
        w.write_record([(i + 1).to_string(), t.to_string(), x.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

