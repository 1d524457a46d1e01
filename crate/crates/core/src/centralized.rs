//! Welfare maximization `max Σ_i u_i(a_{R_i})` over the product of action
//! boxes, plus KKT residuals for arbitrary points.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, ExtReal, Scalar};
use crate::scenario::Scenario;
use crate::utilities::{UtilityError, BOX_TOLERANCE};

/// Gradient evaluation floor for coordinates inside a power-family domain.
pub const POWER_FLOOR: f64 = 1e-12;
/// Cap applied to reported partial derivatives.
pub const GRADIENT_CAP: f64 = 1e12;
pub const ARMIJO_SLOPE: f64 = 1e-4;
pub const STEP_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 100;
const CONCAVITY_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig<T> {
    /// Initial step length of every backtracking search.
    pub step: T,
    pub max_iter: usize,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub tol: T,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        let tol = lit::<T>(1e-8).max(T::epsilon() * lit(100.0));
        Self { step: T::one(), max_iter: 50_000, tol }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn cast<U: Scalar>(&self) -> SolverConfig<U> {
        SolverConfig { step: U::from(self.step).unwrap(), max_iter: self.max_iter, tol: U::from(self.tol).unwrap() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveBound {
    Lower,
    Upper,
}

/// Box multiplier for one user; `bound` is `None` when the action is interior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Multiplier<T> {
    pub value: T,
    pub bound: Option<ActiveBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport<T> {
    pub multipliers: Vec<Multiplier<T>>,
    /// `∂F/∂a_i` (capped), kept for downstream price construction.
    pub welfare_gradient: Vec<T>,
    pub stationarity_residuals: Vec<T>,
    pub complementarity_residuals: Vec<T>,
    pub max_residual: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentralizedSolution<T> {
    pub actions: Vec<T>,
    pub objective: T,
    pub kkt: KktReport<T>,
    pub iterations: usize,
    pub projected_gradient_norm: T,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError<T: std::fmt::Debug> {
    #[error("projected gradient ascent stopped after {} iterations at projected-gradient norm {:?}", .best.iterations, .best.projected_gradient_norm)]
    NotConverged { best: Box<CentralizedSolution<T>> },
    #[error("utility of user {user} failed the concavity check (violation {violation:?})")]
    NonConcaveUtility { user: usize, violation: T },
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// Per-coordinate solver bounds: the action box, tightened to `a ≥ 0` where
/// some power-family utility reads the coordinate.
pub fn solver_bounds<T: Scalar>(scenario: &Scenario<T>) -> Vec<(T, T)> {
    let topo = scenario.topology();
    (0..topo.n())
        .map(|j| {
            let b = scenario.user(j).action_box;
            let lo = if nonnegative_coordinate(scenario, j) { b.lo.max(T::zero()) } else { b.lo };
            (lo, b.hi)
        })
        .collect()
}

fn nonnegative_coordinate<T: Scalar>(scenario: &Scenario<T>, j: usize) -> bool {
    scenario.topology().c_set(j).iter().any(|&k| scenario.user(k).utility.nonnegative_domain())
}

fn local<T: Scalar>(scenario: &Scenario<T>, a: &[T], i: usize) -> Vec<T> {
    scenario.topology().r_set(i).iter().map(|&j| a[j]).collect()
}

/// `F(a) = Σ_i u_i(a_{R_i})` ignoring boxes; `None` outside a family domain.
pub fn welfare<T: Scalar>(scenario: &Scenario<T>, a: &[T]) -> Option<T> {
    let mut total = T::zero();
    for i in 0..scenario.topology().n() {
        total = total + scenario.user(i).utility.raw_value(&local(scenario, a, i)).ok()??;
    }
    Some(total)
}

/// `F(a)` with each user's box enforced.
pub fn welfare_in_boxes<T: Scalar>(scenario: &Scenario<T>, a: &[T]) -> ExtReal<T> {
    let mut total = T::zero();
    for i in 0..scenario.topology().n() {
        let user = scenario.user(i);
        match user.utility.evaluate(&user.action_box, &local(scenario, a, i)) {
            Ok(ExtReal::Finite(v)) => total = total + v,
            _ => return ExtReal::NegInfinity,
        }
    }
    ExtReal::Finite(total)
}

/// Partials `∂u_i/∂a_j` for `j ∈ R_i`, evaluated with power-domain
/// coordinates floored at [`POWER_FLOOR`] and capped at [`GRADIENT_CAP`].
pub fn utility_gradient_at<T: Scalar>(scenario: &Scenario<T>, a: &[T], i: usize) -> Result<Vec<T>, UtilityError> {
    let u = &scenario.user(i).utility;
    let floor = lit::<T>(POWER_FLOOR);
    let cap = lit::<T>(GRADIENT_CAP);
    let mut x = local(scenario, a, i);
    if u.nonnegative_domain() {
        x.iter_mut().for_each(|v| *v = v.max(floor));
    }
    Ok(u.gradient(&x)?.into_iter().map(|g| g.max(-cap).min(cap)).collect())
}

/// `∂F/∂a_j = Σ_{k ∈ C_j} ∂u_k/∂a_j`.
pub fn welfare_gradient<T: Scalar>(scenario: &Scenario<T>, a: &[T]) -> Result<Vec<T>, UtilityError> {
    let topo = scenario.topology();
    let mut g = vec![T::zero(); topo.n()];
    for i in 0..topo.n() {
        for (&j, d) in topo.r_set(i).iter().zip(utility_gradient_at(scenario, a, i)?) {
            g[j] = g[j] + d;
        }
    }
    Ok(g)
}

fn project<T: Scalar>(bounds: &[(T, T)], x: &[T]) -> Vec<T> {
    x.iter().zip(bounds).map(|(&v, &(lo, hi))| v.max(lo).min(hi)).collect()
}

fn projected_gradient_norm<T: Scalar>(bounds: &[(T, T)], x: &[T], g: &[T]) -> T {
    let unit: Vec<T> = x.iter().zip(g).map(|(&xi, &gi)| xi + gi).collect();
    project(bounds, &unit).iter().zip(x).fold(T::zero(), |m, (&p, &xi)| m.max((p - xi).abs()))
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&p, &q)| acc + p * q)
}

/// Projected gradient ascent with Armijo backtracking, started from the
/// projection of the zero profile.
pub fn solve_centralized<T: Scalar>(
    scenario: &Scenario<T>,
    config: &SolverConfig<T>,
) -> Result<CentralizedSolution<T>, SolveError<T>> {
    for i in 0..scenario.topology().n() {
        let user = scenario.user(i);
        let check = user.utility.check_concavity(&user.action_box, CONCAVITY_SAMPLES, scenario.seed() ^ i as u64);
        if !check.concave {
            return Err(SolveError::NonConcaveUtility { user: i, violation: check.worst_violation });
        }
    }

    let bounds = solver_bounds(scenario);
    let n = bounds.len();
    let sigma = lit::<T>(ARMIJO_SLOPE);
    let shrink = lit::<T>(STEP_SHRINK);

    let mut x = project(&bounds, &vec![T::zero(); n]);
    let mut fx = welfare(scenario, &x).expect("projected zero lies in every family domain");
    let mut iterations = 0;
    let mut pg_norm = T::infinity();

    while iterations < config.max_iter {
        let g = welfare_gradient(scenario, &x)?;
        pg_norm = projected_gradient_norm(&bounds, &x, &g);
        if pg_norm <= config.tol {
            break;
        }

        let mut step = config.step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<T> = x.iter().zip(&g).map(|(&xi, &gi)| xi + step * gi).collect();
            let y = project(&bounds, &trial);
            let d: Vec<T> = y.iter().zip(&x).map(|(&yi, &xi)| yi - xi).collect();
            if let Some(fy) = welfare(scenario, &y) {
                // Armijo with a strict increase, or the concavity certificate
                // F(y) ≥ F(x) + ∇F(y)·d which stays reliable when F
                // differences sink below rounding.
                let armijo = fy > fx && fy >= fx + sigma * dot(&g, &d);
                let certified = || welfare_gradient(scenario, &y).map(|gy| dot(&gy, &d) >= T::zero()).unwrap_or(false);
                if armijo || certified() {
                    accepted = Some((y, fy));
                    break;
                }
            }
            step = step * shrink;
        }
        iterations += 1;
        match accepted {
            Some((y, fy)) => {
                x = y;
                fx = fy;
            }
            None => {
                log::debug!("centralized: no acceptable step at iteration {iterations}");
                break;
            }
        }
    }

    if iterations == config.max_iter {
        pg_norm = projected_gradient_norm(&bounds, &x, &welfare_gradient(scenario, &x)?);
    }
    let kkt = kkt_residual(scenario, &x)?;
    let solution = CentralizedSolution { actions: x, objective: fx, kkt, iterations, projected_gradient_norm: pg_norm };
    if pg_norm <= config.tol {
        log::debug!("centralized: converged in {iterations} iterations");
        Ok(solution)
    } else {
        Err(SolveError::NotConverged { best: Box::new(solution) })
    }
}

/// KKT residuals of the box-constrained welfare problem at `a`.
pub fn kkt_residual<T: Scalar>(scenario: &Scenario<T>, a: &[T]) -> Result<KktReport<T>, UtilityError> {
    let bounds = solver_bounds(scenario);
    let s = welfare_gradient(scenario, a)?;
    let tol = lit::<T>(BOX_TOLERANCE);
    let n = a.len();
    let mut multipliers = Vec::with_capacity(n);
    let mut stationarity = Vec::with_capacity(n);
    let mut complementarity = Vec::with_capacity(n);
    for j in 0..n {
        let (lo, hi) = bounds[j];
        let (m, r, slack) = if a[j] >= hi - tol {
            (
                Multiplier { value: s[j].max(T::zero()), bound: Some(ActiveBound::Upper) },
                (-s[j]).max(T::zero()),
                a[j] - hi,
            )
        } else if a[j] <= lo + tol {
            (
                Multiplier { value: (-s[j]).max(T::zero()), bound: Some(ActiveBound::Lower) },
                s[j].max(T::zero()),
                lo - a[j],
            )
        } else {
            (Multiplier { value: T::zero(), bound: None }, s[j].abs(), T::zero())
        };
        complementarity.push((m.value * slack).abs());
        multipliers.push(m);
        stationarity.push(r);
    }
    let max_residual = stationarity.iter().chain(&complementarity).fold(T::zero(), |m, &v| m.max(v));
    Ok(KktReport {
        multipliers,
        welfare_gradient: s,
        stationarity_residuals: stationarity,
        complementarity_residuals: complementarity,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::fixtures;

    #[test]
    fn power_instance_reaches_closed_form() {
        let sc = fixtures::appendix_c();
        let sol = solve_centralized(&sc, &SolverConfig::default()).unwrap();
        let closed = (0.5_f64 / 4.0).powf(1.0 / 1.5);
        assert!((closed - 0.25).abs() < 1e-15);
        for &a in &sol.actions {
            assert!((a - 0.25).abs() <= 1e-6, "{a}");
        }
        assert!(sol.kkt.max_residual <= 1e-7);
        assert!(sol.kkt.multipliers.iter().all(|m| m.value == 0.0 && m.bound.is_none()));
    }

    #[test]
    fn power_kkt_at_closed_form_and_at_zero() {
        let sc = fixtures::appendix_c();
        let k = kkt_residual(&sc, &[0.25; 3]).unwrap();
        assert!(k.max_residual <= 1e-8);
        let k0 = kkt_residual(&sc, &[0.0; 3]).unwrap();
        assert!(k0.max_residual > 1e3);
        assert!(k0.max_residual <= GRADIENT_CAP);
    }

    #[test]
    fn linear_instance_hits_upper_bound() {
        let sc = fixtures::advertising();
        let sol = solve_centralized(&sc, &SolverConfig::default()).unwrap();
        let topo = sc.topology();
        for j in 0..topo.n() {
            let total: f64 =
                topo.c_set(j).iter().map(|&k| sc.user(k).utility.partial(topo.slot(k, j).unwrap(), 0.0).unwrap()).sum();
            let b = sc.user(j).action_box;
            if total > 0.0 {
                assert_eq!(sol.actions[j], b.hi);
                assert_eq!(sol.kkt.multipliers[j].bound, Some(ActiveBound::Upper));
                assert!((sol.kkt.multipliers[j].value - total).abs() <= 1e-12);
            } else if total < 0.0 {
                assert_eq!(sol.actions[j], b.lo);
            }
        }
        assert!(sol.kkt.max_residual <= 1e-12);
    }

    #[test]
    fn single_good_parabola() {
        let z = vec![0.0; 3];
        let sc = fixtures::quadratic_complete(
            &[vec![1.0, 0.0, 0.0], z.clone(), z.clone()],
            &[vec![1.0, 0.0, 0.0], z.clone(), z],
        );
        let sol = solve_centralized(&sc, &SolverConfig::default()).unwrap();
        assert!((sol.actions[0] - 0.5).abs() <= 1e-9);
        assert_eq!(&sol.actions[1..], &[0.0, 0.0]);
    }

    #[test]
    fn monotone_and_feasible_iterates() {
        let sc = fixtures::appendix_c();
        let bounds = solver_bounds(&sc);
        let mut last = f64::NEG_INFINITY;
        for iters in 1..40 {
            let cfg = SolverConfig { max_iter: iters, ..SolverConfig::default() };
            let sol = match solve_centralized(&sc, &cfg) {
                Ok(s) => s,
                Err(SolveError::NotConverged { best }) => *best,
                Err(e) => panic!("{e}"),
            };
            for (a, (lo, hi)) in sol.actions.iter().zip(&bounds) {
                assert!(a >= lo && a <= hi);
            }
            assert!(sol.objective >= last - 1e-14);
            last = sol.objective;
        }
    }

    #[test]
    fn non_concave_rejected() {
        let sc = fixtures::non_concave();
        assert!(matches!(solve_centralized(&sc, &SolverConfig::default()), Err(SolveError::NonConcaveUtility { .. })));
    }

    #[test]
    fn f32_solve() {
        let sc: Scenario<f32> = fixtures::appendix_c().cast();
        let sol = solve_centralized(&sc, &SolverConfig::default()).unwrap();
        for &a in &sol.actions {
            assert!((a - 0.25).abs() <= 1e-3);
        }
    }
}
