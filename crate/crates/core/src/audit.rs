//! One-call check bundle for a scenario and a message profile: budget
//! balance, participation, optimality, KKT and the Nash deviation search.

use serde::Serialize;
use thiserror::Error;

use crate::centralized::{kkt_residual, solve_centralized, welfare_in_boxes, CentralizedSolution, SolveError};
use crate::mechanism::{
    compute_outcome, payoff_from_allocation, zero_baseline, Allocation, MechanismError, MessageProfile,
};
use crate::ne::{verify_ne, NeReport, VerifyConfig};
use crate::scalar::{lit, ExtReal, Scalar};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditError {
    #[error("profile does not match the scenario: {0}")]
    Profile(#[from] MechanismError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditConfig<T> {
    /// `|Σ t̂_i| ≤ budget_tol · max(1, Σ |t̂_i|)`
    pub budget_tol: T,
    /// Smallest acceptable participation margin is `−ir_tol`.
    pub ir_tol: T,
    /// Largest acceptable `F(a_centralized) − F(a_mechanism)`.
    pub optimality_tol: T,
    pub kkt_tol: T,
    pub verify: VerifyConfig<T>,
}

impl<T: Scalar> Default for AuditConfig<T> {
    fn default() -> Self {
        Self {
            budget_tol: lit(1e-9),
            ir_tol: lit(1e-9),
            optimality_tol: lit(1e-6),
            kkt_tol: lit(1e-6),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AuditChecks {
    pub budget_balanced: bool,
    pub individually_rational: bool,
    pub allocation_feasible: bool,
    pub optimal: bool,
    pub kkt: bool,
    pub nash: bool,
}

impl AuditChecks {
    pub fn all(&self) -> bool {
        self.budget_balanced
            && self.individually_rational
            && self.allocation_feasible
            && self.optimal
            && self.kkt
            && self.nash
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport<T> {
    /// `|Σ t̂_i|`
    pub budget_residual: T,
    /// `u_i^A(alloc) − u_i^A(0, 0)` per user.
    pub ir_margins: Vec<ExtReal<T>>,
    /// `F(a_centralized) − F(a_mechanism)`; absent when either side is
    /// infeasible or the centralized solve failed outright.
    pub optimality_gap: Option<T>,
    /// Largest KKT residual of the welfare problem at the mechanism's actions.
    pub kkt_max_residual: Option<T>,
    pub ne_report: NeReport<T>,
    pub checks: AuditChecks,
    pub passed: bool,
}

/// Everything computed along the way, for callers that also report it.
#[derive(Debug, Clone)]
pub struct AuditRun<T: std::fmt::Debug> {
    pub report: AuditReport<T>,
    pub allocation: Allocation<T>,
    pub centralized: Result<CentralizedSolution<T>, SolveError<T>>,
}

/// Runs every check; property failures are recorded in the report, only a
/// malformed profile is an error. Reads its inputs without modifying them.
pub fn full_audit<T: Scalar>(
    scenario: &Scenario<T>,
    profile: &MessageProfile<T>,
    config: &AuditConfig<T>,
) -> Result<AuditRun<T>, AuditError> {
    let topo = scenario.topology();
    MessageProfile::new(topo, profile.messages().to_vec())?;

    let allocation = compute_outcome(profile, topo, scenario.index_table());
    let budget_residual = allocation.budget_residual();
    let ir_margins: Vec<ExtReal<T>> = (0..topo.n())
        .map(|i| {
            ExtReal::from_float(payoff_from_allocation(scenario, &allocation, i).gain_over(zero_baseline(scenario, i)))
        })
        .collect();
    let allocation_feasible =
        allocation.actions.iter().enumerate().all(|(i, &a)| scenario.user(i).action_box.contains(a));

    let centralized = solve_centralized(scenario, scenario.solver());
    let optimum = match &centralized {
        Ok(sol) => Some(sol.actions.clone()),
        Err(SolveError::NotConverged { best }) => Some(best.actions.clone()),
        Err(e) => {
            log::warn!("audit: centralized solve failed: {e}");
            None
        }
    };
    let optimality_gap = optimum.and_then(|a| {
        let best = welfare_in_boxes(scenario, &a).finite()?;
        let ours = welfare_in_boxes(scenario, &allocation.actions).finite()?;
        Some(best - ours)
    });
    let kkt_max_residual = if allocation_feasible {
        kkt_residual(scenario, &allocation.actions).ok().map(|k| k.max_residual)
    } else {
        None
    };

    let ne_report = verify_ne(scenario, profile, &config.verify);
    let checks = AuditChecks {
        budget_balanced: budget_residual <= config.budget_tol * allocation.abs_tax_sum().max(T::one()),
        individually_rational: ir_margins.iter().all(|m| *m >= ExtReal::Finite(-config.ir_tol)),
        allocation_feasible,
        optimal: optimality_gap.is_some_and(|g| g <= config.optimality_tol),
        kkt: kkt_max_residual.is_some_and(|r| r <= config.kkt_tol),
        nash: ne_report.is_equilibrium,
    };
    let report = AuditReport {
        budget_residual,
        ir_margins,
        optimality_gap,
        kkt_max_residual,
        ne_report,
        passed: checks.all(),
        checks,
    };
    Ok(AuditRun { report, allocation, centralized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::Message;
    use crate::ne::{construct_ne, personalized_prices_from_optimum};
    use crate::scenario::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AuditConfig<f64> {
        AuditConfig {
            verify: VerifyConfig { random_deviations: 500, ..VerifyConfig::default() },
            ..AuditConfig::default()
        }
    }

    #[test]
    fn three_user_equilibrium_passes() {
        let sc = fixtures::appendix_c();
        let prices = personalized_prices_from_optimum(&sc, &[0.25; 3], 1e-8).unwrap();
        let profile = construct_ne(&sc, &[0.25; 3], &prices).unwrap();
        let before = profile.clone();
        let run = full_audit(&sc, &profile, &cfg()).unwrap();
        let r = &run.report;
        assert!(r.budget_residual <= 1e-9);
        assert!(r.ir_margins.iter().all(|m| *m >= ExtReal::Finite(-1e-9)));
        assert!(r.optimality_gap.unwrap().abs() <= 1e-6);
        assert!(r.ne_report.is_equilibrium);
        assert!(r.passed, "{r:?}");
        assert_eq!(profile, before);
    }

    #[test]
    fn random_profile_balances_but_fails_nash() {
        let sc = fixtures::appendix_c();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let msgs = (0..3)
            .map(|_| Message {
                action_proposals: (0..3).map(|_| rng.random_range(0.0..0.6)).collect(),
                price_proposals: (0..3).map(|_| rng.random_range(0.0..2.0)).collect(),
            })
            .collect();
        let profile = MessageProfile::new(sc.topology(), msgs).unwrap();
        let r = full_audit(&sc, &profile, &cfg()).unwrap().report;
        assert!(r.budget_residual <= 1e-9);
        assert!(r.checks.budget_balanced);
        assert!(!r.ne_report.is_equilibrium);
        assert!(!r.passed);
        assert!(r.optimality_gap.unwrap() >= -1e-6);
    }

    #[test]
    fn zero_profile_has_zero_margins() {
        let sc = fixtures::appendix_c();
        let r = full_audit(&sc, &MessageProfile::zeros(sc.topology()), &cfg()).unwrap().report;
        assert!(r.ir_margins.iter().all(|m| *m == ExtReal::Finite(0.0)));
        assert_eq!(r.budget_residual, 0.0);
    }

    #[test]
    fn mismatched_profile_is_structural_error() {
        let sc = fixtures::appendix_c();
        let other = fixtures::advertising();
        let profile = MessageProfile::zeros(other.topology());
        assert!(full_audit(&sc, &profile, &cfg()).is_err());
    }
}
