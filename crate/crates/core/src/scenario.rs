//! Scenario: topology, per-user utilities and boxes, solver settings.
//!
//! On disk a scenario is JSON. Utility coefficient maps are keyed by user
//! id and must cover exactly `R_i` (the power family's `neighbor_exponents`
//! covers `R_i \ {i}`):
//!
//! ```json
//! {
//!   "name": "appendix_c",
//!   "adjacency": [[1,1,1],[1,1,1],[1,1,1]],
//!   "users": [
//!     {"box": {"lo": 0.0, "hi": 1.0},
//!      "utility": {"family": "power", "own_exponent": 0.5,
//!                  "neighbor_exponents": {"1": 2.0, "2": 2.0}}}
//!   ],
//!   "solver": {"step": 1.0, "max_iter": 50000, "tol": 1e-8},
//!   "index_policy": {"kind": "ascending"},
//!   "seed": 0
//! }
//! ```
//!
//! `adjacency` may be replaced by `adjacency_file`, a path (relative to the
//! scenario file) to a JSON array of rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centralized::SolverConfig;
use crate::network::{CyclicIndexTable, IndexPolicy, NetworkTopology, MIN_CYCLE_LEN};
use crate::scalar::Scalar;
use crate::utilities::{ActionBox, FamilyKind, UtilityFamily, UtilitySpec};

const LOAD_CONCAVITY_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at `{field}` (line {line}, column {column}): {message}")]
    Parse { field: String, line: usize, column: usize, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

impl ScenarioError {
    fn invalid(msg: impl Into<String>) -> Self {
        ScenarioError::Validation(msg.into())
    }
}

/// A user's private data: utility over `R_i` and own action box.
#[derive(Debug, Clone, PartialEq)]
pub struct UserModel<T> {
    pub utility: UtilitySpec<T>,
    pub action_box: ActionBox<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    name: String,
    topology: NetworkTopology,
    table: CyclicIndexTable,
    index_policy: IndexPolicy,
    users: Vec<UserModel<T>>,
    solver: SolverConfig<T>,
    seed: u64,
}

impl<T: Scalar> Scenario<T> {
    pub fn new(
        name: impl Into<String>,
        topology: NetworkTopology,
        index_policy: IndexPolicy,
        users: Vec<UserModel<T>>,
        solver: SolverConfig<T>,
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        if users.len() != topology.n() {
            return Err(ScenarioError::invalid(format!(
                "{} users described but the adjacency matrix has {}",
                users.len(),
                topology.n()
            )));
        }
        for (i, u) in users.iter().enumerate() {
            if u.utility.owner() != i {
                return Err(ScenarioError::invalid(format!(
                    "utility in slot {i} belongs to user {}",
                    u.utility.owner()
                )));
            }
            if u.utility.support() != topology.r_set(i) {
                return Err(ScenarioError::invalid(format!(
                    "utility of user {i} is defined over {:?} but R_{i} = {:?}",
                    u.utility.support(),
                    topology.r_set(i)
                )));
            }
        }
        let table = CyclicIndexTable::assign(&topology, index_policy);
        Ok(Self { name: name.into(), topology, table, index_policy, users, solver, seed })
    }

    /// Runs the sampled concavity test on every utility.
    pub fn check_concavity(&self) -> Result<(), ScenarioError> {
        for (i, u) in self.users.iter().enumerate() {
            let c = u.utility.check_concavity(&u.action_box, LOAD_CONCAVITY_SAMPLES, self.seed ^ i as u64);
            if !c.concave {
                return Err(ScenarioError::invalid(format!(
                    "utility of user {i} must be concave: midpoint violation {}",
                    c.worst_violation
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn index_table(&self) -> &CyclicIndexTable {
        &self.table
    }

    pub fn index_policy(&self) -> IndexPolicy {
        self.index_policy
    }

    pub fn user(&self, i: usize) -> &UserModel<T> {
        &self.users[i]
    }

    pub fn users(&self) -> &[UserModel<T>] {
        &self.users
    }

    pub fn solver(&self) -> &SolverConfig<T> {
        &self.solver
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same scenario with a different cyclic index assignment.
    pub fn with_index_policy(&self, policy: IndexPolicy) -> Self {
        Self { table: CyclicIndexTable::assign(&self.topology, policy), index_policy: policy, ..self.clone() }
    }

    pub fn cast<U: Scalar>(&self) -> Scenario<U> {
        Scenario {
            name: self.name.clone(),
            topology: self.topology.clone(),
            table: self.table.clone(),
            index_policy: self.index_policy,
            users: self
                .users
                .iter()
                .map(|u| UserModel { utility: u.utility.cast(), action_box: u.action_box.cast() })
                .collect(),
            solver: self.solver.cast(),
            seed: self.seed,
        }
    }

    /// Serializable form with inline adjacency.
    pub fn to_file(&self) -> ScenarioFile {
        let f = |x: T| x.to_f64().unwrap();
        let users = self
            .users
            .iter()
            .map(|u| {
                let spec = &u.utility;
                let keyed =
                    |v: &[T]| spec.support().iter().zip(v).map(|(&k, &x)| (k, f(x))).collect::<BTreeMap<_, _>>();
                let utility = match spec.family() {
                    UtilityFamily::Power { exponents } => {
                        let mut neighbor_exponents = keyed(exponents);
                        neighbor_exponents.remove(&spec.owner());
                        UtilityFile::power(f(exponents[spec.own_slot()]), neighbor_exponents)
                    }
                    UtilityFamily::Linear { coefficients, bid } => UtilityFile::linear(keyed(coefficients), f(*bid)),
                    UtilityFamily::Quadratic { linear, curvature } => {
                        UtilityFile::quadratic(keyed(linear), keyed(curvature))
                    }
                };
                UserFile { action_box: u.action_box.cast(), utility }
            })
            .collect();
        ScenarioFile {
            name: Some(self.name.clone()),
            adjacency: Some(self.topology.adjacency()),
            adjacency_file: None,
            users,
            solver: self.solver.cast(),
            index_policy: self.index_policy,
            seed: self.seed,
        }
    }

    /// Builds and validates from the file form. `base_dir` resolves
    /// `adjacency_file`.
    pub fn from_file(file: &ScenarioFile, base_dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let adjacency = match (&file.adjacency, &file.adjacency_file) {
            (Some(a), None) => a.clone(),
            (None, Some(p)) => {
                let path = base_dir.map(|d| d.join(p)).unwrap_or_else(|| PathBuf::from(p));
                let text =
                    fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
                parse_json::<Vec<Vec<u8>>>(&text)?
            }
            (Some(_), Some(_)) => {
                return Err(ScenarioError::invalid("give either `adjacency` or `adjacency_file`, not both"))
            }
            (None, None) => return Err(ScenarioError::invalid("missing `adjacency` (or `adjacency_file`)")),
        };
        let topology = NetworkTopology::build(&adjacency).map_err(|e| ScenarioError::Validation(e.to_string()))?;
        if file.users.len() != topology.n() {
            return Err(ScenarioError::invalid(format!(
                "{} users described but the adjacency matrix has {}",
                file.users.len(),
                topology.n()
            )));
        }
        let t = |x: f64| T::from_f64(x).unwrap();
        let mut users = Vec::with_capacity(topology.n());
        for (i, u) in file.users.iter().enumerate() {
            let r = topology.r_set(i);
            let aligned = |what: &str, map: &BTreeMap<usize, f64>, expect: &[usize]| -> Result<Vec<T>, ScenarioError> {
                if !map.keys().copied().eq(expect.iter().copied()) {
                    return Err(ScenarioError::invalid(format!(
                        "user {i}: `{what}` keys {:?} must be exactly {:?}",
                        map.keys().collect::<Vec<_>>(),
                        expect
                    )));
                }
                Ok(map.values().map(|&x| t(x)).collect())
            };
            let uf = &u.utility;
            uf.check_fields(i)?;
            let family = match uf.family {
                FamilyKind::Power => {
                    let others: Vec<usize> = r.iter().copied().filter(|&k| k != i).collect();
                    let mut exps = aligned("neighbor_exponents", uf.neighbor_exponents.as_ref().unwrap(), &others)?;
                    let own = r.iter().position(|&k| k == i).unwrap();
                    exps.insert(own, t(uf.own_exponent.unwrap()));
                    UtilityFamily::Power { exponents: exps }
                }
                FamilyKind::Linear => UtilityFamily::Linear {
                    coefficients: aligned("coefficients", uf.coefficients.as_ref().unwrap(), r)?,
                    bid: t(uf.bid.unwrap()),
                },
                FamilyKind::Quadratic => UtilityFamily::Quadratic {
                    linear: aligned("linear", uf.linear.as_ref().unwrap(), r)?,
                    curvature: aligned("curvature", uf.curvature.as_ref().unwrap(), r)?,
                },
            };
            let utility = UtilitySpec::new(i, r.to_vec(), family)
                .map_err(|e| ScenarioError::Validation(format!("user {i}: {e}")))?;
            let action_box = ActionBox::new(t(u.action_box.lo), t(u.action_box.hi))
                .map_err(|e| ScenarioError::Validation(format!("user {i}: {e}")))?;
            users.push(UserModel { utility, action_box });
        }
        let solver = file.solver.cast();
        if !(solver.step > T::zero() && solver.tol > T::zero()) {
            return Err(ScenarioError::invalid("solver step and tol must be positive"));
        }
        let name = file.name.clone().unwrap_or_else(|| "scenario".to_string());
        Scenario::new(name, topology, file.index_policy, users, solver, file.seed)
    }
}

/// On-disk scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency_file: Option<String>,
    pub users: Vec<UserFile>,
    #[serde(default)]
    pub solver: SolverConfig<f64>,
    #[serde(default)]
    pub index_policy: IndexPolicy,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserFile {
    #[serde(rename = "box")]
    pub action_box: ActionBox<f64>,
    pub utility: UtilityFile,
}

/// One utility. `family` selects which of the parameter fields are
/// required; the rest must be absent. Maps are keyed by user id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityFile {
    pub family: FamilyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub own_exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbor_exponents: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<BTreeMap<usize, f64>>,
}

impl UtilityFile {
    pub fn power(own_exponent: f64, neighbor_exponents: BTreeMap<usize, f64>) -> Self {
        Self {
            family: FamilyKind::Power,
            own_exponent: Some(own_exponent),
            neighbor_exponents: Some(neighbor_exponents),
            ..Self::default()
        }
    }

    pub fn linear(coefficients: BTreeMap<usize, f64>, bid: f64) -> Self {
        Self { family: FamilyKind::Linear, coefficients: Some(coefficients), bid: Some(bid), ..Self::default() }
    }

    pub fn quadratic(linear: BTreeMap<usize, f64>, curvature: BTreeMap<usize, f64>) -> Self {
        Self { family: FamilyKind::Quadratic, linear: Some(linear), curvature: Some(curvature), ..Self::default() }
    }

    fn present(&self) -> [(&'static str, bool); 6] {
        [
            ("own_exponent", self.own_exponent.is_some()),
            ("neighbor_exponents", self.neighbor_exponents.is_some()),
            ("coefficients", self.coefficients.is_some()),
            ("bid", self.bid.is_some()),
            ("linear", self.linear.is_some()),
            ("curvature", self.curvature.is_some()),
        ]
    }

    /// Checks that exactly the family's parameters are given.
    fn check_fields(&self, user: usize) -> Result<(), ScenarioError> {
        let wanted: &[&str] = match self.family {
            FamilyKind::Power => &["own_exponent", "neighbor_exponents"],
            FamilyKind::Linear => &["coefficients", "bid"],
            FamilyKind::Quadratic => &["linear", "curvature"],
        };
        for (name, given) in self.present() {
            let needed = wanted.contains(&name);
            if needed && !given {
                return Err(ScenarioError::invalid(format!("user {user}: {:?} utility needs `{name}`", self.family)));
            }
            if given && !needed {
                return Err(ScenarioError::invalid(format!(
                    "user {user}: `{name}` is not a parameter of the {:?} family",
                    self.family
                )));
            }
        }
        Ok(())
    }
}

/// Deserializes with the failing field path and position attached.
pub fn parse_json<D: serde::de::DeserializeOwned>(text: &str) -> Result<D, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Parse { field, line: inner.line(), column: inner.column(), message: inner.to_string() }
    })
}

pub fn read_scenario_file(path: &Path) -> Result<ScenarioFile, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_json(&text)
}

/// Reads, parses, validates and concavity-checks a scenario.
pub fn load_scenario<T: Scalar>(path: &Path) -> Result<Scenario<T>, ScenarioError> {
    let file = read_scenario_file(path)?;
    let scenario = Scenario::from_file(&file, path.parent())?;
    scenario.check_concavity()?;
    Ok(scenario)
}

pub fn save_scenario_file(file: &ScenarioFile, path: &Path) -> Result<(), ScenarioError> {
    let text = serde_json::to_string_pretty(file).expect("scenario serializes");
    fs::write(path, text + "\n").map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })
}

/// Inputs for random scenario synthesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub n: usize,
    /// Probability of each off-diagonal influence edge.
    pub density: f64,
    pub family: FamilyKind,
    pub seed: u64,
}

/// Random scenario, a pure function of `params`. Columns with fewer than
/// three members are topped up with randomly chosen extra rows.
pub fn generate(params: &GenParams) -> Result<ScenarioFile, ScenarioError> {
    let GenParams { n, density, family, seed } = *params;
    if n < MIN_CYCLE_LEN {
        return Err(ScenarioError::invalid(format!("need at least {MIN_CYCLE_LEN} users, got {n}")));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(ScenarioError::invalid(format!("density {density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = vec![vec![0u8; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (i == j || rng.random_bool(density)) as u8;
        }
    }
    #[allow(clippy::needless_range_loop)]
    for j in 0..n {
        let mut members = (0..n).filter(|&i| adj[i][j] == 1).count();
        while members < MIN_CYCLE_LEN {
            let candidates: Vec<usize> = (0..n).filter(|&i| adj[i][j] == 0).collect();
            let pick = candidates[rng.random_range(0..candidates.len())];
            adj[pick][j] = 1;
            members += 1;
        }
    }
    let topology = NetworkTopology::build(&adj).expect("generator output satisfies the model");

    let mut draw = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let users = (0..n)
        .map(|i| {
            let r = topology.r_set(i);
            let (action_box, utility) = match family {
                FamilyKind::Power => {
                    let hi = draw(0.5, 2.0);
                    let own_exponent = draw(0.2, 0.8);
                    let neighbor_exponents = r.iter().filter(|&&k| k != i).map(|&k| (k, draw(1.2, 3.0))).collect();
                    (ActionBox { lo: 0.0, hi }, UtilityFile::power(own_exponent, neighbor_exponents))
                }
                FamilyKind::Linear => {
                    let hi = draw(0.5, 2.0);
                    let coefficients = r.iter().map(|&k| (k, draw(0.0, 1.0))).collect();
                    let bid = draw(0.0, 0.5 * r.len() as f64);
                    (ActionBox { lo: 0.0, hi }, UtilityFile::linear(coefficients, bid))
                }
                FamilyKind::Quadratic => {
                    let lo = -draw(0.0, 1.0);
                    let hi = draw(0.5, 2.0);
                    let linear = r.iter().map(|&k| (k, draw(-1.0, 1.0))).collect();
                    let curvature = r.iter().map(|&k| (k, draw(0.1, 1.0))).collect();
                    (ActionBox { lo, hi }, UtilityFile::quadratic(linear, curvature))
                }
            };
            UserFile { action_box, utility }
        })
        .collect();

    let tag = match family {
        FamilyKind::Power => "power",
        FamilyKind::Linear => "linear",
        FamilyKind::Quadratic => "quadratic",
    };
    Ok(ScenarioFile {
        name: Some(format!("gen-{tag}-n{n}-s{seed}")),
        adjacency: Some(adj),
        adjacency_file: None,
        users,
        solver: SolverConfig::default(),
        index_policy: IndexPolicy::Ascending,
        seed,
    })
}

/// Ready-made instances.
pub mod examples {
    use super::*;

    fn complete(n: usize) -> NetworkTopology {
        NetworkTopology::build(&vec![vec![1; n]; n]).expect("complete graph")
    }

    /// Three users on a complete graph, `u_i = a_i^α − Σ_{j≠i} a_j^β`,
    /// boxes `[0, 1]`. Welfare optimum `(α/(2β))^{1/(β−α)}` per user.
    pub fn power_triangle(alpha: [f64; 3], beta: [f64; 3]) -> Scenario<f64> {
        let users = (0..3)
            .map(|i| {
                let exps = (0..3).map(|j| if j == i { alpha[i] } else { beta[j] }).collect();
                UserModel {
                    utility: UtilitySpec::power(i, vec![0, 1, 2], exps).expect("valid exponents"),
                    action_box: ActionBox::new(0.0, 1.0).unwrap(),
                }
            })
            .collect();
        Scenario::new("power-triangle", complete(3), IndexPolicy::Ascending, users, SolverConfig::default(), 0)
            .expect("consistent scenario")
    }

    /// `α_i = 0.5`, `β_i = 2`: optimum at `a_i = 1/4`.
    pub fn appendix_c() -> Scenario<f64> {
        let mut s = power_triangle([0.5; 3], [2.0; 3]);
        s.name = "appendix_c".into();
        s
    }

    /// Clustered display-ad network: user 0 is the publisher (earns the
    /// bids), users 1, 2 and 4 own clusters, users 0 and 3 carry dummy
    /// actions. Zero-valued links pad every `C_j` to three members.
    pub fn advertising() -> Scenario<f64> {
        let bids = [(1, 1.0), (2, 1.5), (4, 0.8)];
        // (user, (good, coefficient) links, bid, box upper bound)
        type Row = (usize, &'static [(usize, f64)], f64, f64);
        let rows: [Row; 5] = [
            (0, &[(0, 0.0), (1, 1.0), (2, 1.5), (4, 0.8)], 0.0, 1.0),
            (1, &[(0, 0.0), (1, 0.6), (2, 0.4), (3, 0.0)], bids[0].1, 10.0),
            (2, &[(0, 0.0), (1, 0.5), (2, 0.9), (3, 0.0), (4, 0.3)], bids[1].1, 8.0),
            (3, &[(1, 0.7), (3, 0.0), (4, 0.2)], 0.0, 1.0),
            (4, &[(2, 0.6), (4, 0.5)], bids[2].1, 5.0),
        ];
        let r_sets: Vec<Vec<usize>> = rows.iter().map(|(_, c, _, _)| c.iter().map(|&(k, _)| k).collect()).collect();
        let topology = NetworkTopology::from_r_sets(&r_sets).expect("padded ad network");
        let users = rows
            .iter()
            .map(|&(i, coeffs, bid, hi)| UserModel {
                utility: UtilitySpec::linear(i, r_sets[i].clone(), coeffs.iter().map(|&(_, c)| c).collect(), bid)
                    .expect("nonnegative coefficients"),
                action_box: ActionBox::new(0.0, hi).unwrap(),
            })
            .collect();
        Scenario::new("advertising", topology, IndexPolicy::Ascending, users, SolverConfig::default(), 0)
            .expect("consistent scenario")
    }
}
