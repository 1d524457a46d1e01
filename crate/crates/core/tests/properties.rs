//! Structural invariants of the outcome function on random networks.

use lgm_core::mechanism::{compute_outcome, personalized_price, Message, MessageProfile};
use lgm_core::network::{CyclicIndexTable, IndexPolicy, NetworkTopology};
use lgm_core::Rational;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random adjacency with self loops; short columns get extra rows.
fn topology(n: usize, density: f64, seed: u64) -> NetworkTopology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = vec![vec![0u8; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (i == j || rng.random_bool(density)) as u8;
        }
    }
    for j in 0..n {
        while adj.iter().map(|row| row[j] as usize).sum::<usize>() < 3 {
            let i = rng.random_range(0..n);
            adj[i][j] = 1;
        }
    }
    NetworkTopology::build(&adj).unwrap()
}

fn random_profile(topo: &NetworkTopology, seed: u64) -> MessageProfile<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let messages = (0..topo.n())
        .map(|i| {
            let d = topo.r_set(i).len();
            Message {
                action_proposals: (0..d).map(|_| rng.random_range(-10.0..10.0)).collect(),
                price_proposals: (0..d).map(|_| rng.random_range(0.0..10.0)).collect(),
            }
        })
        .collect();
    MessageProfile::new(topo, messages).unwrap()
}

fn exact_profile(topo: &NetworkTopology, seed: u64) -> MessageProfile<Rational> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Dyadic denominators keep every intermediate sum well inside i128.
    let mut q = |lo: i128, hi: i128| Rational::new(rng.random_range(lo..hi), 1 << rng.random_range(0..6));
    let messages = (0..topo.n())
        .map(|i| {
            let d = topo.r_set(i).len();
            Message {
                action_proposals: (0..d).map(|_| q(-100, 100)).collect(),
                price_proposals: (0..d).map(|_| q(0, 100)).collect(),
            }
        })
        .collect();
    MessageProfile::new(topo, messages).unwrap()
}

fn policy(shuffled: bool, seed: u64) -> IndexPolicy {
    if shuffled {
        IndexPolicy::Shuffled { seed }
    } else {
        IndexPolicy::Ascending
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn taxes_sum_to_zero(n in 3usize..20, density in 0.0..0.6f64, seed: u64, shuffled: bool) {
        let topo = topology(n, density, seed);
        let table = CyclicIndexTable::assign(&topo, policy(shuffled, seed));
        let alloc = compute_outcome(&random_profile(&topo, seed ^ 1), &topo, &table);
        prop_assert!(alloc.budget_residual() <= 1e-9 * alloc.abs_tax_sum().max(1.0));
        for j in 0..n {
            prop_assert!(alloc.price_column_sum(&topo, j).abs() <= 1e-9 * alloc.prices.iter().flatten().map(|l| l.abs()).sum::<f64>().max(1.0));
        }
    }

    #[test]
    fn exact_taxes_sum_to_exactly_zero(n in 3usize..9, density in 0.0..0.6f64, seed: u64, shuffled: bool) {
        let topo = topology(n, density, seed);
        let table = CyclicIndexTable::assign(&topo, policy(shuffled, seed));
        let alloc = compute_outcome(&exact_profile(&topo, seed), &topo, &table);
        prop_assert_eq!(alloc.tax_sum(), Rational::from_integer(0));
        for j in 0..n {
            prop_assert_eq!(alloc.price_column_sum(&topo, j), Rational::from_integer(0));
        }
    }

    #[test]
    fn own_price_does_not_move_own_charge(n in 3usize..15, seed: u64, shuffled: bool, scale in 0.0..100.0f64) {
        let topo = topology(n, 0.3, seed);
        let table = CyclicIndexTable::assign(&topo, policy(shuffled, seed));
        let base = random_profile(&topo, seed);
        let i = (seed % n as u64) as usize;
        let mut changed = base.clone();
        let mut msg = changed.messages()[i].clone();
        msg.price_proposals.iter_mut().for_each(|p| *p = *p * scale + 1.0);
        changed.set(i, msg).unwrap();
        for &j in topo.r_set(i) {
            prop_assert_eq!(
                personalized_price(&base, &topo, &table, i, j),
                personalized_price(&changed, &topo, &table, i, j)
            );
        }
    }

    #[test]
    fn actions_are_proposal_means(n in 3usize..15, seed: u64) {
        let topo = topology(n, 0.3, seed);
        let table = CyclicIndexTable::assign(&topo, IndexPolicy::Ascending);
        let profile = random_profile(&topo, seed);
        let alloc = compute_outcome(&profile, &topo, &table);
        for j in 0..n {
            let c = topo.c_set(j);
            let mean = c.iter().map(|&k| profile.messages()[k].action_proposals[topo.slot(k, j).unwrap()]).sum::<f64>() / c.len() as f64;
            prop_assert!((alloc.actions[j] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn cycles_are_permutations_of_c_sets(n in 3usize..25, density in 0.0..0.6f64, seed: u64, shuffled: bool) {
        let topo = topology(n, density, seed);
        let table = CyclicIndexTable::assign(&topo, policy(shuffled, seed));
        for j in 0..n {
            let mut cycle = table.cycle(j).to_vec();
            cycle.sort_unstable();
            prop_assert_eq!(&cycle[..], topo.c_set(j));
            for &i in topo.c_set(j) {
                let s1 = table.successor(j, i, 1).unwrap();
                let s2 = table.successor(j, i, 2).unwrap();
                prop_assert!(s1 != i && s2 != i && s1 != s2);
                prop_assert_eq!(table.successor(j, s1, 1).unwrap(), s2);
                prop_assert_eq!(table.user_at(j, table.index_of(i, j)), i);
            }
        }
    }

    #[test]
    fn shuffled_tables_depend_only_on_seed(n in 3usize..25, seed: u64) {
        let topo = topology(n, 0.4, seed);
        let a = CyclicIndexTable::assign(&topo, IndexPolicy::Shuffled { seed });
        let b = CyclicIndexTable::assign(&topo, IndexPolicy::Shuffled { seed });
        prop_assert_eq!(a, b);
    }
}
