use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lgm_core::audit::{full_audit, AuditConfig};
use lgm_core::centralized::{solve_centralized, CentralizedSolution, SolveError};
use lgm_core::dynamics::{run_dynamics, DynamicsConfig, Trajectory};
use lgm_core::mechanism::{compute_outcome, Message, MessageProfile};
use lgm_core::ne::{self, equilibrium_conditions, personalized_prices_from_optimum, verify_ne, VerifyConfig};
use lgm_core::scenario::{generate, load_scenario, parse_json, GenParams, ScenarioError};
use lgm_core::{ExtReal, Scalar, Scenario};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::report::{to_json, write_json, CentralizedSection, DynamicsSection, Report};
use crate::{Common, DynamicsArgs, GenArgs, Outcome, VerifyArgs};

/// On-disk message profile; the same shape `MessageProfile` serializes to.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    messages: Vec<Message<f64>>,
}

/// `x`, raised to a small multiple of machine epsilon for `f32` runs.
fn tolerance<T: Scalar>(x: f64) -> T {
    T::from_f64(x).unwrap().max(T::epsilon() * T::from_f64(1000.0).unwrap())
}

fn load<T: Scalar>(common: &Common) -> Result<Scenario<T>, CliError> {
    let scenario = load_scenario(&common.scenario)?;
    log::info!("loaded scenario `{}` with {} users", scenario.name(), scenario.topology().n());
    Ok(scenario)
}

fn load_profile<T: Scalar>(scenario: &Scenario<T>, path: &Path) -> Result<MessageProfile<T>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CliError::Scenario(ScenarioError::Io { path: path.to_path_buf(), source }))?;
    let file: ProfileFile =
        parse_json(&text).map_err(|e| CliError::ProfileParse { path: path.to_path_buf(), message: e.to_string() })?;
    let cast = |v: Vec<f64>| v.into_iter().map(|x| T::from_f64(x).unwrap()).collect();
    let messages = file
        .messages
        .into_iter()
        .map(|m| Message { action_proposals: cast(m.action_proposals), price_proposals: cast(m.price_proposals) })
        .collect();
    Ok(MessageProfile::new(scenario.topology(), messages)?)
}

fn out_dir(out: &Option<PathBuf>) -> Result<Option<&Path>, CliError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.clone(), source })?;
    }
    Ok(out.as_deref())
}

/// Report to `<out>/report.json`, or to stdout.
fn emit<S: Serialize>(report: &S, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(dir) => write_json(report, &dir.join("report.json")),
        None => {
            print!("{}", to_json(report));
            Ok(())
        }
    }
}

fn verify_config<T: Scalar>(scenario: &Scenario<T>, common: &Common, deviations: Option<usize>) -> VerifyConfig<T> {
    let defaults = VerifyConfig::default();
    VerifyConfig {
        random_deviations: deviations.unwrap_or(defaults.random_deviations),
        seed: common.seed.unwrap_or(scenario.seed()),
        gain_tol: common.tol.map(|t| T::from_f64(t).unwrap()).unwrap_or(defaults.gain_tol),
        ..defaults
    }
}

fn centralized<T: Scalar>(scenario: &Scenario<T>, tol: Option<f64>) -> Result<CentralizedSection<T>, CliError> {
    let mut config = *scenario.solver();
    if let Some(t) = tol {
        config.tol = T::from_f64(t).unwrap();
    }
    let section = |solution: CentralizedSolution<T>, converged| CentralizedSection { converged, solution };
    match solve_centralized(scenario, &config) {
        Ok(s) => Ok(section(s, true)),
        Err(SolveError::NotConverged { best }) => {
            log::warn!("centralized solve stopped before the tolerance was met");
            Ok(section(*best, false))
        }
        Err(e) => Err(CliError::Solve(e.to_string())),
    }
}

pub fn solve<T: Scalar + Serialize>(common: &Common) -> Result<Outcome, CliError> {
    let scenario = load::<T>(common)?;
    let out = out_dir(&common.out)?;
    let mut report = Report::new("solve", scenario.name());
    let section = centralized(&scenario, common.tol)?;
    report.passed = section.converged;
    report.actions = Some(section.solution.actions.clone());
    report.centralized = Some(section);
    emit(&report, out)?;
    Ok(Outcome { passed: report.passed, gating: true })
}

pub fn construct_ne<T: Scalar + Serialize>(common: &Common) -> Result<Outcome, CliError> {
    let scenario = load::<T>(common)?;
    let out = out_dir(&common.out)?;
    let section = centralized(&scenario, None)?;
    let a_star = section.solution.actions.clone();
    let kkt_tol = common.tol.map(|t| T::from_f64(t).unwrap()).unwrap_or_else(|| tolerance(1e-6));
    let prices = personalized_prices_from_optimum(&scenario, &a_star, kkt_tol)?;
    let profile = ne::construct_ne(&scenario, &a_star, &prices)?;
    let conditions = equilibrium_conditions(&scenario, &profile, &a_star, &prices);
    let alloc = compute_outcome(&profile, scenario.topology(), scenario.index_table());

    let scale = prices.rows().iter().flatten().fold(T::one(), |m, &l| m.max(l.abs()));
    let scale_a = a_star.iter().fold(T::one(), |m, &a| m.max(a.abs()));
    let passed = conditions.averaging_error <= tolerance::<T>(1e-8) * scale_a
        && conditions.price_difference_error <= tolerance::<T>(1e-9) * scale
        && conditions.complementarity == T::zero()
        && conditions.min_price >= T::zero();

    let mut report = Report::new("construct-ne", scenario.name()).with_allocation(scenario.topology(), &alloc);
    report = report.with_personalized_prices(scenario.topology(), &prices);
    report.passed = passed;
    report.centralized = Some(section);
    report.equilibrium_conditions = Some(conditions);
    if let Some(dir) = out {
        write_json(&profile, &dir.join("profile.json"))?;
    }
    report.profile = Some(profile);
    emit(&report, out)?;
    Ok(Outcome { passed, gating: true })
}

pub fn verify<T: Scalar + Serialize>(args: &VerifyArgs) -> Result<Outcome, CliError> {
    let scenario = load::<T>(&args.common)?;
    let profile = load_profile(&scenario, &args.profile)?;
    let out = out_dir(&args.common.out)?;
    let config = verify_config(&scenario, &args.common, args.deviations);
    let ne = verify_ne(&scenario, &profile, &config);
    let alloc = compute_outcome(&profile, scenario.topology(), scenario.index_table());
    let mut report = Report::new("verify", scenario.name()).with_allocation(scenario.topology(), &alloc);
    report.passed = ne.is_equilibrium;
    report.nash_verification = Some(ne);
    emit(&report, out)?;
    Ok(Outcome { passed: report.passed, gating: true })
}

pub fn audit<T: Scalar + Serialize>(args: &VerifyArgs) -> Result<Outcome, CliError> {
    let scenario = load::<T>(&args.common)?;
    let profile = load_profile(&scenario, &args.profile)?;
    let out = out_dir(&args.common.out)?;
    let config =
        AuditConfig { verify: verify_config(&scenario, &args.common, args.deviations), ..AuditConfig::default() };
    let run = full_audit(&scenario, &profile, &config)?;
    let mut report = Report::new("audit", scenario.name()).with_allocation(scenario.topology(), &run.allocation);
    report.passed = run.report.passed;
    report.centralized = match run.centralized {
        Ok(solution) => Some(CentralizedSection { converged: true, solution }),
        Err(SolveError::NotConverged { best }) => Some(CentralizedSection { converged: false, solution: *best }),
        Err(_) => None,
    };
    report.nash_verification = Some(run.report.ne_report.clone());
    report.audit = Some(run.report);
    emit(&report, out)?;
    Ok(Outcome { passed: report.passed, gating: false })
}

fn format_float<T: Scalar>(x: T) -> String {
    format!("{:.16e}", x.to_f64().unwrap())
}

fn write_csv<T: Scalar>(trajectory: &Trajectory<T>, path: &Path) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Write { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["iteration", "user", "payoff", "message_delta"]).map_err(err)?;
    for row in trajectory.rows() {
        let payoff = match row.payoff {
            ExtReal::Finite(v) => format_float(v),
            ExtReal::NegInfinity => "-inf".to_string(),
        };
        w.write_record([row.iteration.to_string(), row.user.to_string(), payoff, format_float(row.message_delta)])
            .map_err(err)?;
    }
    w.flush().map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

pub fn dynamics<T: Scalar + Serialize>(args: &DynamicsArgs) -> Result<Outcome, CliError> {
    let scenario = load::<T>(&args.common)?;
    let init = match &args.profile {
        Some(p) => load_profile(&scenario, p)?,
        None => MessageProfile::zeros(scenario.topology()),
    };
    if !(args.damping > 0.0 && args.damping <= 1.0) {
        return Err(CliError::Usage(format!("--damping must lie in (0, 1], got {}", args.damping)));
    }
    let out = out_dir(&args.common.out)?;
    let defaults = DynamicsConfig::<T>::default();
    let config = DynamicsConfig {
        schedule: args.schedule.into(),
        damping: T::from_f64(args.damping).unwrap(),
        max_iter: args.max_iter,
        tol: args.common.tol.map(|t| T::from_f64(t).unwrap()).unwrap_or(defaults.tol),
        seed: args.common.seed.unwrap_or(scenario.seed()),
        stride: args.stride,
        best_response: defaults.best_response,
        // --tol is the stopping tolerance here, not the deviation-gain tolerance.
        verify: verify_config(&scenario, &Common { tol: None, ..args.common.clone() }, args.deviations),
    };
    let trajectory = run_dynamics(&scenario, &init, &config);
    let alloc = compute_outcome(&trajectory.final_profile, scenario.topology(), scenario.index_table());

    let mut report = Report::new("dynamics", scenario.name()).with_allocation(scenario.topology(), &alloc);
    report.passed = trajectory.converged;
    report.dynamics = Some(DynamicsSection {
        schedule: config.schedule,
        damping: config.damping,
        iterations: trajectory.iterations,
        converged: trajectory.converged,
        profile_delta: trajectory.profile_delta,
        final_payoffs: trajectory.payoffs.last().cloned().unwrap_or_default(),
    });
    report.nash_verification = trajectory.ne_report.clone();
    if let Some(dir) = out {
        write_csv(&trajectory, &dir.join("trajectory.csv"))?;
        write_json(&trajectory.final_profile, &dir.join("final_profile.json"))?;
        write_json(&trajectory.iterates, &dir.join("iterates.json"))?;
    }
    report.profile = Some(trajectory.final_profile);
    emit(&report, out)?;
    Ok(Outcome { passed: report.passed, gating: false })
}

pub fn gen(args: &GenArgs) -> Result<Outcome, CliError> {
    let params = GenParams { n: args.n, density: args.density, family: args.family.into(), seed: args.seed };
    let file = generate(&params)?;
    let text = serde_json::to_string_pretty(&file).expect("scenario serializes") + "\n";
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.clone(), source })?;
            let path = dir.join("scenario.json");
            fs::write(&path, text).map_err(|source| CliError::Write { path, source })?;
        }
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|source| CliError::Write { path: "-".into(), source })?;
        }
    }
    Ok(Outcome { passed: true, gating: true })
}
