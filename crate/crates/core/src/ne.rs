//! Nash equilibria of the induced game: construction from a welfare optimum
//! and a deviation-search verifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::centralized::{kkt_residual, utility_gradient_at};
use crate::dynamics::{best_response, BestResponseConfig, DynamicsError};
use crate::mechanism::{
    compute_outcome, payoff, payoff_from_allocation, personalized_price, Deviation, Message, MessageProfile,
};
use crate::network::NetworkTopology;
use crate::scalar::{lit, ExtReal, Scalar};
use crate::scenario::Scenario;
use crate::utilities::UtilityError;

/// Column sums of personalized prices must vanish to this (relative) level.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NeError {
    #[error("KKT residual {residual} exceeds tolerance {tolerance}; not an optimum")]
    KktNotSatisfied { residual: f64, tolerance: f64 },
    #[error("price column sums to {sum}, expected 0")]
    InconsistentColumn { sum: f64 },
    #[error("price system needs at least 3 cycle members, got {0}")]
    CycleTooShort(usize),
    #[error("action profile has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// `l*_ij` for every `j ∈ R_i`, aligned with `R_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonalizedPrices<T> {
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> PersonalizedPrices<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn get(&self, topology: &NetworkTopology, i: usize, j: usize) -> Option<T> {
        topology.slot(i, j).map(|s| self.rows[i][s])
    }

    /// `Σ_{k ∈ C_j} l*_kj`.
    pub fn column_sum(&self, topology: &NetworkTopology, j: usize) -> T {
        topology.c_set(j).iter().map(|&k| self.get(topology, k, j).unwrap()).fold(T::zero(), |a, b| a + b)
    }

    /// `Σ_{j ∈ R_i} l*_ij a_j`: user `i`'s equilibrium tax at actions `a`.
    pub fn linear_tax(&self, topology: &NetworkTopology, i: usize, a: &[T]) -> T {
        topology.r_set(i).iter().zip(&self.rows[i]).fold(T::zero(), |acc, (&j, &l)| acc + l * a[j])
    }
}

/// Lindahl-type prices supporting `a_star`: off-diagonal entries are the
/// marginal utilities `∂u_i/∂a_j`, the own-good entry closes the column sum
/// to zero.
pub fn personalized_prices_from_optimum<T: Scalar>(
    scenario: &Scenario<T>,
    a_star: &[T],
    kkt_tolerance: T,
) -> Result<PersonalizedPrices<T>, NeError> {
    let topo = scenario.topology();
    if a_star.len() != topo.n() {
        return Err(NeError::DimensionMismatch { expected: topo.n(), got: a_star.len() });
    }
    let kkt = kkt_residual(scenario, a_star)?;
    if kkt.max_residual.is_nan() || kkt.max_residual > kkt_tolerance {
        return Err(NeError::KktNotSatisfied {
            residual: kkt.max_residual.to_f64().unwrap_or(f64::NAN),
            tolerance: kkt_tolerance.to_f64().unwrap_or(f64::NAN),
        });
    }
    let mut rows: Vec<Vec<T>> =
        (0..topo.n()).map(|i| utility_gradient_at(scenario, a_star, i)).collect::<Result<_, _>>()?;
    for j in 0..topo.n() {
        let others = topo
            .c_set(j)
            .iter()
            .filter(|&&k| k != j)
            .fold(T::zero(), |acc, &k| acc + rows[k][topo.slot(k, j).unwrap()]);
        let own = topo.slot(j, j).unwrap();
        rows[j][own] = -others;
    }
    Ok(PersonalizedPrices { rows })
}

/// Solves `π_{k+1} − π_{k+2} = l_k` around a cycle (positions 0-based,
/// indices mod len) for nonnegative `π`. Position 0 anchors the free
/// constant; the result is then shifted so its minimum is zero.
pub fn solve_price_system<T: Scalar>(l_by_position: &[T]) -> Result<Vec<T>, NeError> {
    let len = l_by_position.len();
    if len < 3 {
        return Err(NeError::CycleTooShort(len));
    }
    let sum = l_by_position.iter().fold(T::zero(), |a, &b| a + b);
    let scale = l_by_position.iter().fold(T::one(), |a, &b| a + b.abs());
    if sum.is_nan() || sum.abs() > lit::<T>(COLUMN_SUM_TOLERANCE) * scale {
        return Err(NeError::InconsistentColumn { sum: sum.to_f64().unwrap_or(f64::NAN) });
    }
    let mut pi = vec![T::zero(); len];
    // l_{len-1} = π_0 − π_1
    pi[1] = pi[0] - l_by_position[len - 1];
    for k in 0..len - 2 {
        pi[k + 2] = pi[k + 1] - l_by_position[k];
    }
    let min = pi.iter().fold(T::infinity(), |m, &p| m.min(p));
    Ok(pi.into_iter().map(|p| p - min).collect())
}

/// Canonical equilibrium message profile: every proposer of `a_i` proposes
/// `a*_i`; price proposals solve the cyclic difference system per good.
pub fn construct_ne<T: Scalar>(
    scenario: &Scenario<T>,
    a_star: &[T],
    prices: &PersonalizedPrices<T>,
) -> Result<MessageProfile<T>, NeError> {
    let topo = scenario.topology();
    let table = scenario.index_table();
    let n = topo.n();
    if a_star.len() != n {
        return Err(NeError::DimensionMismatch { expected: n, got: a_star.len() });
    }
    let mut messages: Vec<Message<T>> = (0..n)
        .map(|i| Message {
            action_proposals: topo.r_set(i).iter().map(|&j| a_star[j]).collect(),
            price_proposals: vec![T::zero(); topo.r_set(i).len()],
        })
        .collect();
    for j in 0..n {
        let cycle = table.cycle(j);
        let column: Vec<T> = cycle.iter().map(|&k| prices.get(topo, k, j).unwrap()).collect();
        let pi = solve_price_system(&column)?;
        for (&k, p) in cycle.iter().zip(pi) {
            messages[k].price_proposals[topo.slot(k, j).unwrap()] = p;
        }
    }
    Ok(MessageProfile::new(topo, messages).expect("constructed profile is well formed"))
}

/// How far a profile is from the equilibrium characterization for a
/// given optimum and price set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumConditions<T> {
    /// `max_i |mean_k ᵏa_i − a*_i|`
    pub averaging_error: T,
    /// `max_{i,j} |l_ij(m) − l*_ij|`
    pub price_difference_error: T,
    /// `max_{i,j} |ⁱπ_j (ⁱa_j − ˢ¹a_j)²|`
    pub complementarity: T,
    /// `min_{i,j} ⁱπ_j`
    pub min_price: T,
}

pub fn equilibrium_conditions<T: Scalar>(
    scenario: &Scenario<T>,
    profile: &MessageProfile<T>,
    a_star: &[T],
    prices: &PersonalizedPrices<T>,
) -> EquilibriumConditions<T> {
    let topo = scenario.topology();
    let table = scenario.index_table();
    let alloc = compute_outcome(profile, topo, table);
    let averaging_error = alloc.actions.iter().zip(a_star).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    let mut price_difference_error = T::zero();
    let mut complementarity = T::zero();
    let mut min_price = T::infinity();
    for i in 0..topo.n() {
        let msg = &profile.messages()[i];
        for (s, &j) in topo.r_set(i).iter().enumerate() {
            let l = personalized_price(profile, topo, table, i, j).unwrap();
            price_difference_error = price_difference_error.max((l - prices.rows[i][s]).abs());
            let succ = table.successor(j, i, 1).unwrap();
            let gap = msg.action_proposals[s] - profile.messages()[succ].action_proposals[topo.slot(succ, j).unwrap()];
            complementarity = complementarity.max((msg.price_proposals[s] * gap * gap).abs());
            min_price = min_price.min(msg.price_proposals[s]);
        }
    }
    EquilibriumConditions { averaging_error, price_difference_error, complementarity, min_price }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig<T> {
    /// Random unilateral deviations sampled per user.
    pub random_deviations: usize,
    pub seed: u64,
    /// Relative gain tolerance, scaled by `max(1, max_i |payoff_i|)`.
    pub gain_tol: T,
    /// Radius of the action-proposal ball around the current message.
    pub action_radius: T,
    /// Deviating prices are drawn from `[0, price_factor · max price]`.
    pub price_factor: T,
    pub best_response: BestResponseConfig<T>,
}

impl<T: Scalar> Default for VerifyConfig<T> {
    fn default() -> Self {
        Self {
            random_deviations: 4_000,
            seed: 0,
            gain_tol: lit(1e-6),
            action_radius: T::one(),
            price_factor: lit(2.0),
            best_response: BestResponseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeReport<T> {
    pub is_equilibrium: bool,
    /// Largest payoff improvement found by any unilateral deviation.
    pub worst_gain: T,
    pub per_user_gains: Vec<T>,
    pub deviations_tested: usize,
    /// Absolute threshold `worst_gain` was compared against.
    pub tolerance: T,
}

fn sample_deviation<T: Scalar>(rng: &mut ChaCha8Rng, current: &Message<T>, radius: f64, price_hi: f64) -> Message<T> {
    let d = current.action_proposals.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    Message {
        action_proposals: current
            .action_proposals
            .iter()
            .zip(&dir)
            .map(|(&a, &v)| a + lit::<T>(r * v / norm))
            .collect(),
        price_proposals: (0..d).map(|_| lit::<T>(rng.random::<f64>() * price_hi)).collect(),
    }
}

/// Searches for profitable unilateral deviations: random messages around
/// the current one, plus an inner best response per user. A pass means no
/// improving deviation was found, not a proof.
pub fn verify_ne<T: Scalar>(
    scenario: &Scenario<T>,
    profile: &MessageProfile<T>,
    config: &VerifyConfig<T>,
) -> NeReport<T> {
    let topo = scenario.topology();
    let alloc = compute_outcome(profile, topo, scenario.index_table());
    let current: Vec<ExtReal<T>> = (0..topo.n()).map(|i| payoff_from_allocation(scenario, &alloc, i)).collect();
    let scale = current.iter().filter_map(|p| p.finite()).fold(T::one(), |m, p| m.max(p.abs()));
    let tolerance = config.gain_tol * scale;

    let max_price = profile.max_price();
    let price_base = if max_price > T::zero() { max_price } else { T::one() };
    let price_hi = (config.price_factor * price_base).to_f64().unwrap();
    let radius = config.action_radius.to_f64().unwrap();

    let per_user_gains: Vec<T> = (0..topo.n())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let own = &profile.messages()[i];
            let mut best = T::zero();
            for _ in 0..config.random_deviations {
                let dev = sample_deviation(&mut rng, own, radius, price_hi);
                let view = Deviation { base: profile, user: i, replacement: &dev };
                best = best.max(payoff(scenario, &view, i).gain_over(current[i]));
            }
            let candidate = match best_response(scenario, profile, i, &config.best_response) {
                Ok(m) => m,
                Err(DynamicsError::InnerNotConverged { best, .. }) => *best,
            };
            let view = Deviation { base: profile, user: i, replacement: &candidate };
            best.max(payoff(scenario, &view, i).gain_over(current[i]))
        })
        .collect();

    let worst_gain = per_user_gains.iter().fold(T::zero(), |m, &g| m.max(g));
    NeReport {
        is_equilibrium: worst_gain <= tolerance,
        worst_gain,
        per_user_gains,
        deviations_tested: topo.n() * (config.random_deviations + 1),
        tolerance,
    }
}
