//! Best-response iteration over the induced game.
//!
//! Holding the others' messages fixed, user `i`'s payoff depends on its own
//! action proposal `ⁱa_j` only through `â_j = (ⁱa_j + S_j) / |C_j|`, where
//! `S_j` sums the other proposals. With own prices at zero the tax reduces
//! to `Σ_j l_ij â_j` plus a term `i` cannot affect, so the inner problem is
//! a concave maximization over the proposals alone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centralized::{ARMIJO_SLOPE, GRADIENT_CAP, POWER_FLOOR, STEP_SHRINK};
use crate::mechanism::{
    compute_outcome, payoff, payoff_from_allocation, personalized_price, Deviation, Message, MessageProfile,
};
use crate::ne::{verify_ne, NeReport, VerifyConfig};
use crate::scalar::{lit, ExtReal, Scalar};
use crate::scenario::Scenario;

const MAX_BACKTRACKS: usize = 60;
const MAX_STEP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError<T: std::fmt::Debug> {
    #[error("best response of user {user} did not converge (projected gradient {projected_gradient:?})")]
    InnerNotConverged { user: usize, best: Box<Message<T>>, projected_gradient: T },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestResponseConfig<T> {
    /// Initial ascent step; grows after accepted steps.
    pub step: T,
    pub max_iter: usize,
    pub tol: T,
    /// Per-step cap on each coordinate's move.
    pub trust_radius: T,
    /// The current message is kept unless the candidate improves the payoff
    /// by more than this, relative to `max(1, |payoff|)`.
    pub min_gain: T,
}

impl<T: Scalar> Default for BestResponseConfig<T> {
    fn default() -> Self {
        Self { step: T::one(), max_iter: 2_000, tol: lit(1e-10), trust_radius: lit(10.0), min_gain: lit(1e-12) }
    }
}

/// The inner problem for one user, in the coordinates of its own proposals.
struct Inner<'a, T> {
    scenario: &'a Scenario<T>,
    user: usize,
    others: Vec<T>,
    counts: Vec<T>,
    prices: Vec<T>,
    bounds: Vec<(T, T)>,
}

impl<'a, T: Scalar> Inner<'a, T> {
    fn new(scenario: &'a Scenario<T>, profile: &MessageProfile<T>, i: usize) -> Self {
        let topo = scenario.topology();
        let table = scenario.index_table();
        let user = scenario.user(i);
        let power = user.utility.nonnegative_domain();
        let r = topo.r_set(i);
        let mut others = Vec::with_capacity(r.len());
        let mut counts = Vec::with_capacity(r.len());
        let mut prices = Vec::with_capacity(r.len());
        let mut bounds = Vec::with_capacity(r.len());
        for &j in r {
            let c = topo.c_set(j);
            let sum = c
                .iter()
                .filter(|&&k| k != i)
                .fold(T::zero(), |acc, &k| acc + profile.messages()[k].action_proposals[topo.slot(k, j).unwrap()]);
            let count = T::from_count(c.len());
            let (lo, hi) = if j == i {
                let lo = if power { user.action_box.lo.max(T::zero()) } else { user.action_box.lo };
                (lo, user.action_box.hi)
            } else if power {
                (T::zero(), T::infinity())
            } else {
                (T::neg_infinity(), T::infinity())
            };
            bounds.push((count * lo - sum, count * hi - sum));
            others.push(sum);
            counts.push(count);
            prices.push(personalized_price(profile, topo, table, i, j).unwrap());
        }
        Self { scenario, user: i, others, counts, prices, bounds }
    }

    fn hat(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.others).zip(&self.counts).map(|((&x, &s), &c)| (x + s) / c).collect()
    }

    fn project(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.bounds).map(|(&v, &(lo, hi))| v.max(lo).min(hi)).collect()
    }

    /// Payoff up to a constant; `None` outside the utility's domain.
    fn objective(&self, x: &[T]) -> Option<T> {
        let a = self.hat(x);
        let u = self.scenario.user(self.user).utility.raw_value(&a).ok()??;
        Some(a.iter().zip(&self.prices).fold(u, |acc, (&a, &l)| acc - l * a))
    }

    fn gradient(&self, x: &[T]) -> Vec<T> {
        let spec = &self.scenario.user(self.user).utility;
        let floor = lit::<T>(POWER_FLOOR);
        let cap = lit::<T>(GRADIENT_CAP);
        let mut a = self.hat(x);
        if spec.nonnegative_domain() {
            a.iter_mut().for_each(|v| *v = v.max(floor));
        }
        let g = spec.gradient(&a).expect("floored point lies in the utility domain");
        g.into_iter().zip(&self.prices).zip(&self.counts).map(|((d, &l), &c)| (d.max(-cap).min(cap) - l) / c).collect()
    }

    fn projected_gradient_norm(&self, x: &[T], g: &[T]) -> T {
        let unit: Vec<T> = x.iter().zip(g).map(|(&a, &b)| a + b).collect();
        self.project(&unit).iter().zip(x).fold(T::zero(), |m, (&p, &v)| m.max((p - v).abs()))
    }
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&p, &q)| acc + p * q)
}

/// Approximate payoff-maximizing message for user `i`, others held fixed.
///
/// Own price proposals are zeroed, except where the new action proposal
/// coincides exactly with the first successor's, in which case the current
/// price is kept (the price is then payoff-irrelevant, and keeping it makes
/// equilibria exact fixed points). A candidate that does not beat the
/// current message by more than `min_gain` is discarded in favour of it.
pub fn best_response<T: Scalar>(
    scenario: &Scenario<T>,
    profile: &MessageProfile<T>,
    i: usize,
    config: &BestResponseConfig<T>,
) -> Result<Message<T>, DynamicsError<T>> {
    let inner = Inner::new(scenario, profile, i);
    let current = &profile.messages()[i];
    let sigma = lit::<T>(ARMIJO_SLOPE);
    let shrink = lit::<T>(STEP_SHRINK);
    let radius = config.trust_radius;

    let mut x = inner.project(&current.action_proposals);
    let mut fx = inner.objective(&x).expect("projected proposals lie in the utility domain");
    let mut step = config.step;
    let mut pg = T::infinity();
    for _ in 0..config.max_iter {
        let g = inner.gradient(&x);
        pg = inner.projected_gradient_norm(&x, &g);
        if pg <= config.tol {
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<T> = x.iter().zip(&g).map(|(&v, &d)| v + (step * d).max(-radius).min(radius)).collect();
            let y = inner.project(&trial);
            let d: Vec<T> = y.iter().zip(&x).map(|(&a, &b)| a - b).collect();
            if let Some(fy) = inner.objective(&y) {
                if (fy > fx && fy >= fx + sigma * dot(&g, &d)) || dot(&inner.gradient(&y), &d) >= T::zero() {
                    accepted = Some((y, fy));
                    break;
                }
            }
            step = step * shrink;
        }
        match accepted {
            Some((y, fy)) => {
                x = y;
                fx = fy;
                step = (step + step).min(lit(MAX_STEP));
            }
            None => break,
        }
    }

    let topo = scenario.topology();
    let table = scenario.index_table();
    let price_proposals = topo
        .r_set(i)
        .iter()
        .enumerate()
        .map(|(s, &j)| {
            let succ = table.successor(j, i, 1).unwrap();
            let theirs = profile.messages()[succ].action_proposals[topo.slot(succ, j).unwrap()];
            if x[s] == theirs {
                current.price_proposals[s]
            } else {
                T::zero()
            }
        })
        .collect();
    let mut message = Message { action_proposals: x, price_proposals };
    let before = payoff(scenario, profile, i);
    let after = payoff(scenario, &Deviation { base: profile, user: i, replacement: &message }, i);
    let scale = before.finite().map_or(T::one(), |p| p.abs().max(T::one()));
    if after.gain_over(before) <= config.min_gain * scale {
        message = current.clone();
    }
    if pg <= config.tol {
        Ok(message)
    } else {
        Err(DynamicsError::InnerNotConverged { user: i, best: Box::new(message), projected_gradient: pg })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Users update in index order within a sweep.
    #[default]
    RoundRobin,
    /// A fresh seeded permutation per sweep.
    Random,
    /// All best responses from the same snapshot, applied together.
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsConfig<T> {
    pub schedule: Schedule,
    /// Weight θ on the best response: new = (1 − θ)·old + θ·br.
    pub damping: T,
    pub max_iter: usize,
    /// Stop once no message moves by more than this in a sweep.
    pub tol: T,
    pub seed: u64,
    /// Keep every `stride`-th profile snapshot (the final one is always kept).
    pub stride: usize,
    pub best_response: BestResponseConfig<T>,
    pub verify: VerifyConfig<T>,
}

impl<T: Scalar> Default for DynamicsConfig<T> {
    fn default() -> Self {
        Self {
            schedule: Schedule::RoundRobin,
            damping: lit(0.5),
            max_iter: 1_000,
            tol: lit(1e-9),
            seed: 0,
            stride: 10,
            best_response: BestResponseConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot<T> {
    pub iteration: usize,
    pub profile: MessageProfile<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    pub iterates: Vec<Snapshot<T>>,
    /// Payoffs after each sweep.
    pub payoffs: Vec<Vec<ExtReal<T>>>,
    /// Per-user message change in each sweep.
    pub deltas: Vec<Vec<T>>,
    /// Number of sweeps whose change exceeded the tolerance.
    pub iterations: usize,
    pub converged: bool,
    /// Largest message change in the last sweep.
    pub profile_delta: T,
    pub final_profile: MessageProfile<T>,
    /// Deviation check of the final profile, run when the sweep change fell
    /// below the tolerance.
    pub ne_report: Option<NeReport<T>>,
}

/// One `(iteration, user, payoff, message_delta)` row per user and sweep.
pub struct TrajectoryRow<T> {
    pub iteration: usize,
    pub user: usize,
    pub payoff: ExtReal<T>,
    pub message_delta: T,
}

impl<T: Scalar> Trajectory<T> {
    pub fn rows(&self) -> impl Iterator<Item = TrajectoryRow<T>> + '_ {
        self.payoffs.iter().zip(&self.deltas).enumerate().flat_map(|(k, (p, d))| {
            p.iter().zip(d).enumerate().map(move |(user, (&payoff, &message_delta))| TrajectoryRow {
                iteration: k,
                user,
                payoff,
                message_delta,
            })
        })
    }
}

fn respond<T: Scalar>(
    scenario: &Scenario<T>,
    profile: &MessageProfile<T>,
    i: usize,
    config: &BestResponseConfig<T>,
) -> Message<T> {
    match best_response(scenario, profile, i, config) {
        Ok(m) => m,
        Err(DynamicsError::InnerNotConverged { user, best, projected_gradient }) => {
            log::debug!("dynamics: inner ascent for user {user} stopped at projected gradient {projected_gradient}");
            *best
        }
    }
}

fn damp<T: Scalar>(old: &Message<T>, br: &Message<T>, theta: T) -> Message<T> {
    let mix = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| x + theta * (y - x)).collect() };
    Message {
        action_proposals: mix(&old.action_proposals, &br.action_proposals),
        price_proposals: mix(&old.price_proposals, &br.price_proposals),
    }
}

/// Damped best-response iteration. Non-convergence is reported, not an error.
pub fn run_dynamics<T: Scalar>(
    scenario: &Scenario<T>,
    init: &MessageProfile<T>,
    config: &DynamicsConfig<T>,
) -> Trajectory<T> {
    let topo = scenario.topology();
    let n = topo.n();
    let stride = config.stride.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut profile = init.clone();
    let mut iterates = vec![Snapshot { iteration: 0, profile: profile.clone() }];
    let mut payoffs = Vec::new();
    let mut deltas = Vec::new();
    let mut profile_delta = T::infinity();
    let mut iterations = 0;
    let mut settled = false;

    for sweep in 0..config.max_iter {
        let mut delta = vec![T::zero(); n];
        match config.schedule {
            Schedule::Simultaneous => {
                let responses: Vec<Message<T>> =
                    (0..n).into_par_iter().map(|i| respond(scenario, &profile, i, &config.best_response)).collect();
                for (i, br) in responses.into_iter().enumerate() {
                    let next = damp(&profile.messages()[i], &br, config.damping);
                    delta[i] = next.max_abs_diff(&profile.messages()[i]);
                    profile.set(i, next).expect("damped message stays well formed");
                }
            }
            Schedule::RoundRobin | Schedule::Random => {
                let mut order: Vec<usize> = (0..n).collect();
                if config.schedule == Schedule::Random {
                    order.shuffle(&mut rng);
                }
                for i in order {
                    let br = respond(scenario, &profile, i, &config.best_response);
                    let next = damp(&profile.messages()[i], &br, config.damping);
                    delta[i] = next.max_abs_diff(&profile.messages()[i]);
                    profile.set(i, next).expect("damped message stays well formed");
                }
            }
        }
        profile_delta = delta.iter().fold(T::zero(), |m, &d| m.max(d));
        let alloc = compute_outcome(&profile, topo, scenario.index_table());
        payoffs.push((0..n).map(|i| payoff_from_allocation(scenario, &alloc, i)).collect());
        deltas.push(delta);
        if profile_delta <= config.tol {
            settled = true;
            break;
        }
        iterations = sweep + 1;
        if iterations % stride == 0 {
            iterates.push(Snapshot { iteration: iterations, profile: profile.clone() });
        }
    }
    if iterates.last().map(|s| s.iteration) != Some(iterations) {
        iterates.push(Snapshot { iteration: iterations, profile: profile.clone() });
    }

    let ne_report = settled.then(|| verify_ne(scenario, &profile, &config.verify));
    let converged = ne_report.as_ref().is_some_and(|r| r.is_equilibrium);
    log::info!("dynamics: {iterations} sweeps, delta {profile_delta}, converged {converged}");
    Trajectory { iterates, payoffs, deltas, iterations, converged, profile_delta, final_profile: profile, ne_report }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centralized::{solve_centralized, SolverConfig};
    use crate::mechanism::allocate_action;
    use crate::ne::{construct_ne, personalized_prices_from_optimum};
    use crate::scenario::fixtures;

    fn three_user_ne() -> (Scenario<f64>, MessageProfile<f64>) {
        let sc = fixtures::appendix_c();
        let prices = personalized_prices_from_optimum(&sc, &[0.25; 3], 1e-8).unwrap();
        let profile = construct_ne(&sc, &[0.25; 3], &prices).unwrap();
        (sc, profile)
    }

    fn quick() -> DynamicsConfig<f64> {
        DynamicsConfig {
            verify: VerifyConfig { random_deviations: 300, ..VerifyConfig::default() },
            ..DynamicsConfig::default()
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let (sc, profile) = three_user_ne();
        for i in 0..3 {
            let br = best_response(&sc, &profile, i, &BestResponseConfig::default()).unwrap();
            assert_eq!(br, profile.messages()[i]);
        }
        let traj = run_dynamics(&sc, &profile, &quick());
        assert!(traj.converged);
        assert_eq!(traj.iterations, 0);
        assert_eq!(traj.profile_delta, 0.0);
        assert_eq!(traj.final_profile, profile);
    }

    #[test]
    fn numerically_solved_equilibrium_is_a_fixed_point() {
        // The solver's optimum carries ~1e-9 gradient noise; that must not
        // make anyone move.
        let sc = fixtures::appendix_c();
        let sol = solve_centralized(&sc, &SolverConfig::default()).unwrap();
        assert_ne!(sol.actions, vec![0.25; 3]);
        let prices = personalized_prices_from_optimum(&sc, &sol.actions, 1e-6).unwrap();
        let profile = construct_ne(&sc, &sol.actions, &prices).unwrap();
        let traj = run_dynamics(&sc, &profile, &quick());
        assert!(traj.converged);
        assert_eq!(traj.iterations, 0);
        assert_eq!(traj.profile_delta, 0.0);
    }

    #[test]
    fn restores_feasibility() {
        let sc = fixtures::appendix_c();
        let mut profile = MessageProfile::zeros(sc.topology());
        for k in 1..3 {
            let mut m = profile.messages()[k].clone();
            m.action_proposals[0] = 5.0;
            profile.set(k, m).unwrap();
        }
        assert!(allocate_action(&profile, sc.topology(), 0) > 1.0);
        assert_eq!(payoff(&sc, &profile, 0), ExtReal::NegInfinity);
        let br = respond(&sc, &profile, 0, &BestResponseConfig::default());
        let view = Deviation { base: &profile, user: 0, replacement: &br };
        let a0 = allocate_action(&view, sc.topology(), 0);
        assert!((0.0..=1.0).contains(&a0), "{a0}");
        assert!(payoff(&sc, &view, 0).is_finite());
    }

    #[test]
    fn single_good_argmax() {
        // u_0 = a_0 − a_0², no cross effects, no prices: â_0 = 1/2.
        let p = vec![vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0; 3]];
        let q = vec![vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0; 3]];
        let sc = fixtures::quadratic_complete(&p, &q);
        let mut profile = MessageProfile::zeros(sc.topology());
        let mut m = profile.messages()[1].clone();
        m.action_proposals[0] = 0.3;
        profile.set(1, m).unwrap();
        let br = best_response(&sc, &profile, 0, &BestResponseConfig::default()).unwrap();
        let view = Deviation { base: &profile, user: 0, replacement: &br };
        assert!((allocate_action(&view, sc.topology(), 0) - 0.5).abs() <= 1e-6);
        assert!((br.action_proposals[0] - 1.2).abs() <= 1e-6);
    }

    #[test]
    fn best_response_never_lowers_payoff() {
        let sc = fixtures::advertising();
        let mut profile = MessageProfile::zeros(sc.topology());
        for i in 0..sc.topology().n() {
            let before = payoff(&sc, &profile, i);
            let br = respond(&sc, &profile, i, &BestResponseConfig::default());
            let view = Deviation { base: &profile, user: i, replacement: &br };
            assert!(payoff(&sc, &view, i) >= before);
            profile.set(i, br).unwrap();
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let sc = fixtures::appendix_c();
        let cfg = DynamicsConfig { schedule: Schedule::Random, max_iter: 30, seed: 9, ..quick() };
        let init = MessageProfile::zeros(sc.topology());
        let a = run_dynamics(&sc, &init, &cfg);
        let b = run_dynamics(&sc, &init, &cfg);
        assert_eq!(a, b);
        let cfg = DynamicsConfig { schedule: Schedule::Simultaneous, ..cfg };
        assert_eq!(run_dynamics(&sc, &init, &cfg), run_dynamics(&sc, &init, &cfg));
    }

    #[test]
    fn zero_start_on_three_users() {
        let sc = fixtures::appendix_c();
        let traj = run_dynamics(&sc, &MessageProfile::zeros(sc.topology()), &quick());
        assert_eq!(traj.payoffs.len(), traj.deltas.len());
        assert_eq!(traj.rows().count(), traj.payoffs.len() * 3);
        if traj.converged {
            let alloc = compute_outcome(&traj.final_profile, sc.topology(), sc.index_table());
            for a in alloc.actions {
                assert!((a - 0.25).abs() <= 1e-4);
            }
        }
        let sol = solve_centralized(&sc, &SolverConfig::default()).unwrap();
        assert!(sol.objective.is_finite());
    }
}
