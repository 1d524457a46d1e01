//! The game form: message spaces and the outcome function mapping a message
//! profile to actions, personalized prices and taxes.
//!
//! For user `i` and each good `j ∈ R_i`, with `s1`, `s2` the first and second
//! cyclic successors of `i` in `C_j`:
//!
//! ```text
//! â_j   = mean over k ∈ C_j of ᵏa_j
//! l_ij  = ˢ¹π_j − ˢ²π_j
//! t̂_i   = Σ_j [ l_ij â_j + ⁱπ_j (ⁱa_j − ˢ¹a_j)² − ˢ¹π_j (ˢ¹a_j − ˢ²a_j)² ]
//! ```
//!
//! Everything here needs only field arithmetic, so the same code runs on
//! `f64` and on exact rationals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{CyclicIndexTable, NetworkTopology, TopologyError};
use crate::scalar::{ExtReal, Field, Scalar};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechanismError {
    #[error("profile has {got} messages, topology has {expected} users")]
    UserCount { expected: usize, got: usize },
    #[error("message of user {user}: expected {expected} entries, got {got}")]
    MessageLength { user: usize, expected: usize, got: usize },
    #[error("message of user {user}: price proposal at slot {slot} is negative")]
    NegativePrice { user: usize, slot: usize },
    #[error("message of user {user}: non-finite entry at slot {slot}")]
    NonFinite { user: usize, slot: usize },
}

/// `m_i = (ⁱa_{R_i}, ⁱπ_{R_i})`, both aligned with `R_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message<T> {
    pub action_proposals: Vec<T>,
    pub price_proposals: Vec<T>,
}

impl<T: Field> Message<T> {
    pub fn zeros(len: usize) -> Self {
        Self { action_proposals: vec![T::zero(); len], price_proposals: vec![T::zero(); len] }
    }

    fn validate(&self, user: usize, expected: usize) -> Result<(), MechanismError> {
        for got in [self.action_proposals.len(), self.price_proposals.len()] {
            if got != expected {
                return Err(MechanismError::MessageLength { user, expected, got });
            }
        }
        for (slot, (a, p)) in self.action_proposals.iter().zip(&self.price_proposals).enumerate() {
            if !a.is_finite_value() || !p.is_finite_value() {
                return Err(MechanismError::NonFinite { user, slot });
            }
            if *p < T::zero() {
                return Err(MechanismError::NegativePrice { user, slot });
            }
        }
        Ok(())
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.action_proposals
            .iter()
            .zip(&other.action_proposals)
            .chain(self.price_proposals.iter().zip(&other.price_proposals))
            .map(|(&x, &y)| (x - y).abs_val())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }
}

/// Anything that can answer "what did user `k` send".
pub trait MessageSource<T> {
    fn message(&self, k: usize) -> &Message<T>;
}

/// One message per user, validated against a topology.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageProfile<T> {
    messages: Vec<Message<T>>,
}

impl<T: Field> MessageProfile<T> {
    pub fn new(topology: &NetworkTopology, messages: Vec<Message<T>>) -> Result<Self, MechanismError> {
        if messages.len() != topology.n() {
            return Err(MechanismError::UserCount { expected: topology.n(), got: messages.len() });
        }
        for (i, m) in messages.iter().enumerate() {
            m.validate(i, topology.r_set(i).len())?;
        }
        Ok(Self { messages })
    }

    pub fn zeros(topology: &NetworkTopology) -> Self {
        Self { messages: (0..topology.n()).map(|i| Message::zeros(topology.r_set(i).len())).collect() }
    }

    pub fn messages(&self) -> &[Message<T>] {
        &self.messages
    }

    pub fn into_messages(self) -> Vec<Message<T>> {
        self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Replaces user `i`'s message after validating it.
    pub fn set(&mut self, i: usize, message: Message<T>) -> Result<(), MechanismError> {
        message.validate(i, self.messages[i].action_proposals.len())?;
        self.messages[i] = message;
        Ok(())
    }

    /// Largest entry over all price proposals.
    pub fn max_price(&self) -> T {
        self.messages
            .iter()
            .flat_map(|m| m.price_proposals.iter().copied())
            .fold(T::zero(), |m, p| if p > m { p } else { m })
    }

    /// Largest entrywise change between two profiles on the same topology.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.messages.iter().zip(&other.messages).map(|(a, b)| a.max_abs_diff(b)).fold(T::zero(), |m, d| {
            if d > m {
                d
            } else {
                m
            }
        })
    }
}

impl<T> MessageSource<T> for MessageProfile<T> {
    fn message(&self, k: usize) -> &Message<T> {
        &self.messages[k]
    }
}

/// A profile with user `user`'s message replaced, without copying the rest.
#[derive(Debug, Clone, Copy)]
pub struct Deviation<'a, T> {
    pub base: &'a MessageProfile<T>,
    pub user: usize,
    pub replacement: &'a Message<T>,
}

impl<T> MessageSource<T> for Deviation<'_, T> {
    fn message(&self, k: usize) -> &Message<T> {
        if k == self.user {
            self.replacement
        } else {
            &self.base.messages[k]
        }
    }
}

/// Realized actions, taxes and personalized prices.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation<T> {
    pub actions: Vec<T>,
    pub taxes: Vec<T>,
    /// `prices[i][s]` is `l_ij` for `j = R_i[s]`.
    pub prices: Vec<Vec<T>>,
}

impl<T: Field> Allocation<T> {
    pub fn price(&self, topology: &NetworkTopology, i: usize, j: usize) -> Option<T> {
        topology.slot(i, j).map(|s| self.prices[i][s])
    }

    pub fn tax_sum(&self) -> T {
        self.taxes.iter().fold(T::zero(), |acc, &t| acc + t)
    }

    pub fn abs_tax_sum(&self) -> T {
        self.taxes.iter().fold(T::zero(), |acc, &t| acc + t.abs_val())
    }

    /// `|Σ_i t̂_i|`.
    pub fn budget_residual(&self) -> T {
        self.tax_sum().abs_val()
    }

    /// `Σ_{k ∈ C_j} l_kj`.
    pub fn price_column_sum(&self, topology: &NetworkTopology, j: usize) -> T {
        topology
            .c_set(j)
            .iter()
            .map(|&k| self.price(topology, k, j).expect("k ∈ C_j implies j ∈ R_k"))
            .fold(T::zero(), |acc, l| acc + l)
    }

    /// `(i, j, l_ij)` triples in row-major order.
    pub fn price_triples(&self, topology: &NetworkTopology) -> Vec<(usize, usize, T)> {
        (0..topology.n())
            .flat_map(|i| topology.r_set(i).iter().enumerate().map(move |(s, &j)| (i, j, self.prices[i][s])))
            .collect()
    }
}

fn proposal<T: Field>(src: &impl MessageSource<T>, topology: &NetworkTopology, k: usize, j: usize) -> (T, T) {
    let s = topology.slot(k, j).expect("proposer must have the good in its R set");
    let m = src.message(k);
    (m.action_proposals[s], m.price_proposals[s])
}

/// `â_i`: mean of the action proposals for `i` by every member of `C_i`.
/// Taken relative to the first proposal so agreeing proposals average to
/// exactly their common value in floating point.
pub fn allocate_action<T: Field>(src: &impl MessageSource<T>, topology: &NetworkTopology, i: usize) -> T {
    let c = topology.c_set(i);
    let base = proposal(src, topology, c[0], i).0;
    let spread = c.iter().fold(T::zero(), |acc, &k| acc + (proposal(src, topology, k, i).0 - base));
    base + spread / T::from_count(c.len())
}

/// `l_ij`: price proposal of `i`'s first successor in `C_j` minus the second's.
pub fn personalized_price<T: Field>(
    src: &impl MessageSource<T>,
    topology: &NetworkTopology,
    table: &CyclicIndexTable,
    i: usize,
    j: usize,
) -> Result<T, TopologyError> {
    let s1 = table.successor(j, i, 1)?;
    let s2 = table.successor(j, i, 2)?;
    Ok(proposal(src, topology, s1, j).1 - proposal(src, topology, s2, j).1)
}

/// The three parts of a user's tax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaxBreakdown<T> {
    /// `Σ_j l_ij â_j`
    pub linear: T,
    /// `Σ_j ⁱπ_j (ⁱa_j − ˢ¹a_j)²`
    pub own_penalty: T,
    /// `Σ_j ˢ¹π_j (ˢ¹a_j − ˢ²a_j)²`
    pub successor_credit: T,
}

impl<T: Field> TaxBreakdown<T> {
    pub fn total(&self) -> T {
        self.linear + self.own_penalty - self.successor_credit
    }
}

fn tax_parts<T: Field>(
    src: &impl MessageSource<T>,
    topology: &NetworkTopology,
    table: &CyclicIndexTable,
    i: usize,
    action: impl Fn(usize) -> T,
    mut price_out: Option<&mut Vec<T>>,
) -> TaxBreakdown<T> {
    let mut parts = TaxBreakdown { linear: T::zero(), own_penalty: T::zero(), successor_credit: T::zero() };
    let own = src.message(i);
    for (s, &j) in topology.r_set(i).iter().enumerate() {
        let (s1, s2) = table.successors(j, i);
        let (a1, p1) = proposal(src, topology, s1, j);
        let (a2, p2) = proposal(src, topology, s2, j);
        let l = p1 - p2;
        let own_gap = own.action_proposals[s] - a1;
        let succ_gap = a1 - a2;
        parts.linear = parts.linear + l * action(j);
        parts.own_penalty = parts.own_penalty + own.price_proposals[s] * own_gap * own_gap;
        parts.successor_credit = parts.successor_credit + p1 * succ_gap * succ_gap;
        if let Some(out) = price_out.as_deref_mut() {
            out.push(l);
        }
    }
    parts
}

pub fn tax_breakdown<T: Field>(
    src: &impl MessageSource<T>,
    topology: &NetworkTopology,
    table: &CyclicIndexTable,
    i: usize,
) -> TaxBreakdown<T> {
    tax_parts(src, topology, table, i, |j| allocate_action(src, topology, j), None)
}

/// `t̂_i`.
pub fn compute_tax<T: Field>(
    src: &impl MessageSource<T>,
    topology: &NetworkTopology,
    table: &CyclicIndexTable,
    i: usize,
) -> T {
    tax_breakdown(src, topology, table, i).total()
}

/// Full outcome: one shared action vector, then one pass per user.
pub fn compute_outcome<T: Field>(
    src: &impl MessageSource<T>,
    topology: &NetworkTopology,
    table: &CyclicIndexTable,
) -> Allocation<T> {
    let n = topology.n();
    let actions: Vec<T> = (0..n).map(|i| allocate_action(src, topology, i)).collect();
    let mut taxes = Vec::with_capacity(n);
    let mut prices = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(topology.r_set(i).len());
        let parts = tax_parts(src, topology, table, i, |j| actions[j], Some(&mut row));
        taxes.push(parts.total());
        prices.push(row);
    }
    Allocation { actions, taxes, prices }
}

/// User `i`'s payoff `u_i^A(â_{R_i}, t̂_i)`.
pub fn payoff<T: Scalar>(scenario: &Scenario<T>, src: &impl MessageSource<T>, i: usize) -> ExtReal<T> {
    let topology = scenario.topology();
    let local: Vec<T> = topology.r_set(i).iter().map(|&j| allocate_action(src, topology, j)).collect();
    let tax = compute_tax(src, topology, scenario.index_table(), i);
    let user = scenario.user(i);
    user.utility.aggregate(&user.action_box, &local, tax).expect("utility aligned with R_i")
}

/// Payoff of user `i` read off an already computed allocation.
pub fn payoff_from_allocation<T: Scalar>(scenario: &Scenario<T>, allocation: &Allocation<T>, i: usize) -> ExtReal<T> {
    let local: Vec<T> = scenario.topology().r_set(i).iter().map(|&j| allocation.actions[j]).collect();
    let user = scenario.user(i);
    user.utility.aggregate(&user.action_box, &local, allocation.taxes[i]).expect("utility aligned with R_i")
}

/// `u_i^A(0, 0)`, the participation baseline.
pub fn zero_baseline<T: Scalar>(scenario: &Scenario<T>, i: usize) -> ExtReal<T> {
    let user = scenario.user(i);
    let zeros = vec![T::zero(); user.utility.support().len()];
    user.utility.aggregate(&user.action_box, &zeros, T::zero()).expect("utility aligned with R_i")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::IndexPolicy;
    use num_rational::Ratio;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn complete(n: usize) -> (NetworkTopology, CyclicIndexTable) {
        let t = NetworkTopology::build(&vec![vec![1; n]; n]).unwrap();
        let tab = CyclicIndexTable::assign(&t, IndexPolicy::Ascending);
        (t, tab)
    }

    fn uniform(t: &NetworkTopology, a: f64, p: f64) -> MessageProfile<f64> {
        let msgs = (0..t.n())
            .map(|i| {
                let m = t.r_set(i).len();
                Message { action_proposals: vec![a; m], price_proposals: vec![p; m] }
            })
            .collect();
        MessageProfile::new(t, msgs).unwrap()
    }

    fn random_profile(t: &NetworkTopology, rng: &mut ChaCha8Rng) -> MessageProfile<f64> {
        let msgs = (0..t.n())
            .map(|i| {
                let m = t.r_set(i).len();
                Message {
                    action_proposals: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    price_proposals: (0..m).map(|_| rng.random_range(0.0..3.0)).collect(),
                }
            })
            .collect();
        MessageProfile::new(t, msgs).unwrap()
    }

    #[test]
    fn action_is_mean_of_proposals() {
        let (t, _) = complete(3);
        let mut p = MessageProfile::<f64>::zeros(&t);
        assert_eq!(allocate_action(&p, &t, 1), 0.0);
        for (k, v) in [(0, 1.0), (1, 2.0), (2, 6.0)] {
            let mut m = p.message(k).clone();
            m.action_proposals[1] = v;
            p.set(k, m).unwrap();
        }
        assert_eq!(allocate_action(&p, &t, 1), 3.0);
        let u = uniform(&t, 0.25, 0.0);
        assert_eq!(allocate_action(&u, &t, 1), 0.25);
    }

    #[test]
    fn identical_prices_give_zero_personal_prices() {
        let (t, tab) = complete(4);
        let p = uniform(&t, 0.3, 1.7);
        for j in 0..4 {
            for &i in t.c_set(j) {
                assert_eq!(personalized_price(&p, &t, &tab, i, j).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn own_price_never_enters_own_personal_price() {
        let (t, tab) = complete(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_profile(&t, &mut rng);
        let j = 2;
        for &i in t.c_set(j) {
            let before: Vec<f64> =
                t.c_set(j).iter().map(|&k| personalized_price(&p, &t, &tab, k, j).unwrap()).collect();
            let mut q = p.clone();
            let mut m = q.message(i).clone();
            let s = t.slot(i, j).unwrap();
            m.price_proposals[s] += 5.0;
            q.set(i, m).unwrap();
            let after: Vec<f64> = t.c_set(j).iter().map(|&k| personalized_price(&q, &t, &tab, k, j).unwrap()).collect();
            let pred1 = tab.user_at(j, tab.index_of(i, j) + t.c_set(j).len() - 1);
            let pred2 = tab.user_at(j, tab.index_of(i, j) + t.c_set(j).len() - 2);
            for (idx, &k) in t.c_set(j).iter().enumerate() {
                if k == pred1 || k == pred2 {
                    assert_ne!(before[idx], after[idx]);
                } else {
                    assert_eq!(before[idx], after[idx], "l_{k}{j} moved when {i} changed its price");
                }
            }
        }
    }

    #[test]
    fn not_in_cycle_is_error() {
        let adj = vec![
            vec![1, 1, 1, 0, 1],
            vec![1, 1, 0, 1, 0],
            vec![0, 1, 1, 1, 1],
            vec![1, 0, 0, 1, 1],
            vec![0, 1, 1, 1, 1],
        ];
        let t = NetworkTopology::build(&adj).unwrap();
        let tab = CyclicIndexTable::assign(&t, IndexPolicy::Ascending);
        let p = MessageProfile::<f64>::zeros(&t);
        assert!(personalized_price(&p, &t, &tab, 1, 2).is_err());
    }

    #[test]
    fn zero_profile_has_zero_outcome() {
        let (t, tab) = complete(3);
        let a = compute_outcome(&MessageProfile::<f64>::zeros(&t), &t, &tab);
        assert!(a.taxes.iter().all(|&x| x == 0.0));
        assert!(a.actions.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_cycle_configuration_uniform() {
        let (t, tab) = complete(4);
        let a = compute_outcome(&uniform(&t, 0.7, 2.0), &t, &tab);
        assert!(a.actions.iter().all(|&x| x == 0.7));
        assert!(a.budget_residual() <= 1e-12);
    }

    #[test]
    fn profile_validation() {
        let (t, _) = complete(3);
        let bad_len = vec![Message::<f64>::zeros(2), Message::zeros(3), Message::zeros(3)];
        assert!(matches!(MessageProfile::new(&t, bad_len), Err(MechanismError::MessageLength { user: 0, .. })));
        let mut neg = vec![Message::<f64>::zeros(3); 3];
        neg[2].price_proposals[1] = -0.1;
        assert_eq!(MessageProfile::new(&t, neg), Err(MechanismError::NegativePrice { user: 2, slot: 1 }));
        let mut nan = vec![Message::<f64>::zeros(3); 3];
        nan[1].action_proposals[0] = f64::NAN;
        assert_eq!(MessageProfile::new(&t, nan), Err(MechanismError::NonFinite { user: 1, slot: 0 }));
        assert!(matches!(
            MessageProfile::new(&t, vec![Message::<f64>::zeros(3); 2]),
            Err(MechanismError::UserCount { .. })
        ));
    }

    #[test]
    fn breakdown_and_outcome_agree() {
        let (t, tab) = complete(6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_profile(&t, &mut rng);
        let alloc = compute_outcome(&p, &t, &tab);
        for i in 0..6 {
            assert!((compute_tax(&p, &t, &tab, i) - alloc.taxes[i]).abs() < 1e-12);
        }
        for j in 0..6 {
            assert!(alloc.price_column_sum(&t, j).abs() <= 1e-9);
        }
    }

    #[test]
    fn deviation_view_matches_modified_profile() {
        let (t, tab) = complete(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_profile(&t, &mut rng);
        let q = random_profile(&t, &mut rng);
        let replacement = q.message(2).clone();
        let view = Deviation { base: &p, user: 2, replacement: &replacement };
        let mut modified = p.clone();
        modified.set(2, replacement.clone()).unwrap();
        assert_eq!(compute_outcome(&view, &t, &tab), compute_outcome(&modified, &t, &tab));
    }

    #[test]
    fn exact_budget_balance_on_rationals() {
        let (t, tab) = complete(5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let msgs = (0..5)
                .map(|_| Message {
                    action_proposals: (0..5)
                        .map(|_| Ratio::new(rng.random_range(-20_i128..20), rng.random_range(1..6)))
                        .collect(),
                    price_proposals: (0..5)
                        .map(|_| Ratio::new(rng.random_range(0_i128..20), rng.random_range(1..6)))
                        .collect(),
                })
                .collect();
            let p = MessageProfile::new(&t, msgs).unwrap();
            let alloc = compute_outcome(&p, &t, &tab);
            assert_eq!(alloc.tax_sum(), Ratio::from_integer(0));
            for j in 0..5 {
                assert_eq!(alloc.price_column_sum(&t, j), Ratio::from_integer(0));
            }
        }
    }
}
