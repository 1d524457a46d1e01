mod commands;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgm_core::dynamics::Schedule;
use lgm_core::utilities::FamilyKind;

use crate::error::{CliError, ErrorReport};

/// Budget-balanced mechanism for local public goods on directed networks.
#[derive(Debug, Parser)]
#[command(name = "lgm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Exit 1 whenever a reported check fails, also for `audit` and `dynamics`.
    #[arg(long, global = true)]
    strict: bool,
    /// Floating-point type used for every computation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Directory for report files; the report goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for deviation sampling and random schedules (default: the scenario's).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Command-specific tolerance (see README).
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Message-profile JSON file.
    #[arg(long)]
    pub profile: PathBuf,
    /// Random deviations sampled per user.
    #[arg(long)]
    pub deviations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DynamicsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Initial message profile (default: all zeros).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::RoundRobin)]
    pub schedule: ScheduleArg,
    /// Weight on the best response in each update, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub damping: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Keep every n-th profile snapshot.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    /// Random deviations per user when checking the final profile.
    #[arg(long)]
    pub deviations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    RoundRobin,
    Random,
    Simultaneous,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::RoundRobin => Schedule::RoundRobin,
            ScheduleArg::Random => Schedule::Random,
            ScheduleArg::Simultaneous => Schedule::Simultaneous,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Number of users.
    #[arg(long)]
    pub n: usize,
    /// Probability of each off-diagonal edge.
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    #[arg(long, value_enum, default_value_t = FamilyArg::Quadratic)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory to write `scenario.json` into; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Power,
    Linear,
    Quadratic,
}

impl From<FamilyArg> for FamilyKind {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Power => FamilyKind::Power,
            FamilyArg::Linear => FamilyKind::Linear,
            FamilyArg::Quadratic => FamilyKind::Quadratic,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the centralized welfare problem.
    Solve(Common),
    /// Build the equilibrium message profile from the welfare optimum.
    ConstructNe(Common),
    /// Search a message profile for profitable unilateral deviations.
    Verify(VerifyArgs),
    /// Run damped best-response dynamics.
    Dynamics(DynamicsArgs),
    /// Budget, participation, optimality, KKT and Nash checks for a profile.
    Audit(VerifyArgs),
    /// Write a random valid scenario.
    Gen(GenArgs),
}

/// Whether the checks passed, and whether that decides the exit status.
pub struct Outcome {
    pub passed: bool,
    pub gating: bool,
}

fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    macro_rules! run {
        ($f:ident, $args:expr) => {
            match cli.precision {
                Precision::F64 => commands::$f::<f64>($args),
                Precision::F32 => commands::$f::<f32>($args),
            }
        };
    }
    match &cli.command {
        Command::Solve(a) => run!(solve, a),
        Command::ConstructNe(a) => run!(construct_ne, a),
        Command::Verify(a) => run!(verify, a),
        Command::Dynamics(a) => run!(dynamics, a),
        Command::Audit(a) => run!(audit, a),
        Command::Gen(a) => commands::gen(a),
    }
}

fn fail(report: ErrorReport) -> ExitCode {
    eprintln!("{}", serde_json::to_string(&serde_json::json!({ "error": report })).expect("error serializes"));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LGM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let message = e.render().to_string().trim().to_string();
            return fail(ErrorReport { kind: "usage", message, field: None, line: None, column: None });
        }
    };
    match dispatch(&cli) {
        Ok(o) if o.passed || (!o.gating && !cli.strict) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            log::debug!("{e:?}");
            fail(e.report())
        }
    }
}
