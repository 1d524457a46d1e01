//! Budget-balanced mechanism for local public goods on directed networks.
//!
//! Users announce action proposals and price proposals for every good that
//! affects them. The outcome function turns any message profile into
//! actions, personalized prices and taxes that always sum to zero; its Nash
//! equilibria implement the welfare optimum.
//!
//! The outcome function is generic over [`Field`] (floats and exact
//! rationals); everything involving utilities is generic over [`Scalar`].

pub mod audit;
pub mod centralized;
pub mod dynamics;
pub mod mechanism;
pub mod ne;
pub mod network;
pub mod scalar;
pub mod scenario;
pub mod utilities;

pub use audit::{full_audit, AuditConfig, AuditReport};
pub use centralized::{solve_centralized, CentralizedSolution, KktReport, SolverConfig};
pub use dynamics::{best_response, run_dynamics, DynamicsConfig, Schedule, Trajectory};
pub use mechanism::{compute_outcome, compute_tax, payoff, Allocation, Message, MessageProfile};
pub use ne::{construct_ne, personalized_prices_from_optimum, verify_ne, NeReport, VerifyConfig};
pub use network::{CyclicIndexTable, IndexPolicy, NetworkTopology};
pub use scalar::{ExtReal, Field, Scalar};
pub use scenario::{load_scenario, Scenario, ScenarioError, ScenarioFile};
pub use utilities::{ActionBox, UtilitySpec};

/// Exact arithmetic for the outcome function.
pub type Rational = num_rational::Ratio<i128>;

pub type ScenarioF64 = Scenario<f64>;
pub type ScenarioF32 = Scenario<f32>;
pub type ProfileF64 = MessageProfile<f64>;
pub type ExactProfile = MessageProfile<Rational>;
pub type ExactAllocation = Allocation<Rational>;
