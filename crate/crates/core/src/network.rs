//! Directed influence graph and the cyclic index tables used by the tax rule.
//!
//! Convention: `g[i][j] == true` means user `j`'s action enters user `i`'s
//! utility, so `j ∈ R_i` and `i ∈ C_j`. Users are 0-indexed; cycle
//! positions are 1-based.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible `|C_j|`; the tax rule needs three distinct roles.
pub const MIN_CYCLE_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("adjacency matrix is empty")]
    Empty,
    #[error("adjacency matrix is not square: row {row} has {len} entries, expected {n}")]
    NonSquare { row: usize, len: usize, n: usize },
    #[error("adjacency entry ({row}, {col}) = {value} is not 0 or 1")]
    NonBinary { row: usize, col: usize, value: u8 },
    #[error("user {0} is missing its self loop (g[{0}][{0}] must be 1)")]
    MissingSelfLoop(usize),
    #[error("every good must affect at least 3 users: |C_{good}| = {size} < 3")]
    CycleTooSmall { good: usize, size: usize },
    #[error("user {user} is not in C_{good}")]
    NotInCycle { user: usize, good: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkTopology {
    n: usize,
    g: Vec<Vec<bool>>,
    r_sets: Vec<Vec<usize>>,
    c_sets: Vec<Vec<usize>>,
}

impl NetworkTopology {
    /// Builds and validates a topology from a 0/1 matrix. Never repairs input.
    pub fn build(adjacency: &[Vec<u8>]) -> Result<Self, TopologyError> {
        let n = adjacency.len();
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let mut g = vec![vec![false; n]; n];
        for (row, entries) in adjacency.iter().enumerate() {
            if entries.len() != n {
                return Err(TopologyError::NonSquare { row, len: entries.len(), n });
            }
            for (col, &value) in entries.iter().enumerate() {
                g[row][col] = match value {
                    0 => false,
                    1 => true,
                    _ => return Err(TopologyError::NonBinary { row, col, value }),
                };
            }
        }
        if let Some(i) = (0..n).find(|&i| !g[i][i]) {
            return Err(TopologyError::MissingSelfLoop(i));
        }

        let r_sets: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| g[i][j]).collect()).collect();
        let c_sets: Vec<Vec<usize>> = (0..n).map(|j| (0..n).filter(|&i| g[i][j]).collect()).collect();
        if let Some((good, c)) = c_sets.iter().enumerate().find(|(_, c)| c.len() < MIN_CYCLE_LEN) {
            return Err(TopologyError::CycleTooSmall { good, size: c.len() });
        }
        Ok(Self { n, g, r_sets, c_sets })
    }

    /// Rebuilds from the `R_i` lists.
    pub fn from_r_sets(r_sets: &[Vec<usize>]) -> Result<Self, TopologyError> {
        let n = r_sets.len();
        let mut adj = vec![vec![0u8; n]; n];
        for (i, r) in r_sets.iter().enumerate() {
            for &j in r {
                if j >= n {
                    return Err(TopologyError::NonSquare { row: i, len: j + 1, n });
                }
                adj[i][j] = 1;
            }
        }
        Self::build(&adj)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn affects(&self, i: usize, j: usize) -> bool {
        self.g[i][j]
    }

    /// `R_i`, ascending.
    pub fn r_set(&self, i: usize) -> &[usize] {
        &self.r_sets[i]
    }

    /// `C_j`, ascending.
    pub fn c_set(&self, j: usize) -> &[usize] {
        &self.c_sets[j]
    }

    /// Position of good `j` inside user `i`'s `R_i` vector.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        self.r_sets[i].binary_search(&j).ok()
    }

    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        self.g.iter().map(|row| row.iter().map(|&b| b as u8).collect()).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.r_sets.iter().map(Vec::len).sum()
    }
}

/// How cycle positions are assigned inside each `C_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexPolicy {
    #[default]
    Ascending,
    /// Independent seeded permutation per good.
    Shuffled { seed: u64 },
}

/// `I_ij` and `C_{j(k)}` for every good.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CyclicIndexTable {
    // cycles[j][k - 1] = C_{j(k)}
    cycles: Vec<Vec<usize>>,
    // positions[j][i] = I_ij, 0 when i ∉ C_j
    positions: Vec<Vec<usize>>,
}

impl CyclicIndexTable {
    pub fn assign(topology: &NetworkTopology, policy: IndexPolicy) -> Self {
        let n = topology.n();
        let mut rng = match policy {
            IndexPolicy::Ascending => None,
            IndexPolicy::Shuffled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let mut cycles = Vec::with_capacity(n);
        let mut positions = vec![vec![0; n]; n];
        for (j, row) in positions.iter_mut().enumerate() {
            let mut cycle = topology.c_set(j).to_vec();
            if let Some(rng) = rng.as_mut() {
                cycle.shuffle(rng);
            }
            for (k, &i) in cycle.iter().enumerate() {
                row[i] = k + 1;
            }
            cycles.push(cycle);
        }
        Self { cycles, positions }
    }

    /// `I_ij`; zero when `i ∉ C_j`.
    pub fn index_of(&self, i: usize, j: usize) -> usize {
        self.positions[j][i]
    }

    /// `C_{j(k)}` for any `k ≥ 1`, wrapping cyclically.
    pub fn user_at(&self, j: usize, k: usize) -> usize {
        let cycle = &self.cycles[j];
        cycle[(k.max(1) - 1) % cycle.len()]
    }

    /// Members of `C_j` in cycle order.
    pub fn cycle(&self, j: usize) -> &[usize] {
        &self.cycles[j]
    }

    /// `C_{j(I_ij + offset)}`.
    pub fn successor(&self, j: usize, i: usize, offset: usize) -> Result<usize, TopologyError> {
        match self.index_of(i, j) {
            0 => Err(TopologyError::NotInCycle { user: i, good: j }),
            k => Ok(self.user_at(j, k + offset)),
        }
    }

    /// Both successors at once; caller guarantees `i ∈ C_j`.
    pub(crate) fn successors(&self, j: usize, i: usize) -> (usize, usize) {
        let k = self.positions[j][i];
        debug_assert!(k > 0, "user {i} not in C_{j}");
        (self.user_at(j, k + 1), self.user_at(j, k + 2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn five_user() -> Vec<Vec<u8>> {
        // column 2 supported on {0, 2, 4}
        vec![vec![1, 1, 1, 0, 1], vec![1, 1, 0, 1, 0], vec![0, 1, 1, 1, 1], vec![1, 0, 0, 1, 1], vec![0, 1, 1, 1, 1]]
    }

    #[test]
    fn complete_three_graph() {
        let t = NetworkTopology::build(&vec![vec![1; 3]; 3]).unwrap();
        for i in 0..3 {
            assert_eq!(t.r_set(i), &[0, 1, 2]);
            assert_eq!(t.c_set(i), &[0, 1, 2]);
        }
    }

    #[test]
    fn identity_rejected() {
        let id: Vec<Vec<u8>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8).collect()).collect();
        assert_eq!(NetworkTopology::build(&id), Err(TopologyError::CycleTooSmall { good: 0, size: 1 }));
    }

    #[test]
    fn structural_errors() {
        assert_eq!(NetworkTopology::build(&[]), Err(TopologyError::Empty));
        assert!(matches!(NetworkTopology::build(&[vec![1, 1], vec![1]]), Err(TopologyError::NonSquare { row: 1, .. })));
        let mut m = vec![vec![1u8; 3]; 3];
        m[1][1] = 0;
        assert_eq!(NetworkTopology::build(&m), Err(TopologyError::MissingSelfLoop(1)));
        m[1][1] = 2;
        assert!(matches!(NetworkTopology::build(&m), Err(TopologyError::NonBinary { .. })));
    }

    #[test]
    fn supports_from_five_user_matrix() {
        let t = NetworkTopology::build(&five_user()).unwrap();
        assert_eq!(t.c_set(2), &[0, 2, 4]);
        assert!(t.r_set(0).contains(&2));
        assert_eq!(t.r_set(0), &[0, 1, 2, 4]);
        assert_eq!(t.c_set(0), &[0, 1, 3]);
    }

    #[test]
    fn ascending_indices_and_wraparound() {
        let t = NetworkTopology::build(&five_user()).unwrap();
        let tab = CyclicIndexTable::assign(&t, IndexPolicy::Ascending);
        assert_eq!(tab.index_of(0, 2), 1);
        assert_eq!(tab.index_of(2, 2), 2);
        assert_eq!(tab.index_of(4, 2), 3);
        assert_eq!(tab.index_of(1, 2), 0);
        assert_eq!(tab.user_at(2, 4), 0);
        assert_eq!(tab.successor(2, 4, 1), Ok(0));
        assert_eq!(tab.successor(2, 0, 2), Ok(4));
        assert_eq!(tab.successor(2, 1, 1), Err(TopologyError::NotInCycle { user: 1, good: 2 }));
    }

    fn arb_topology() -> impl Strategy<Value = NetworkTopology> {
        (3usize..12, any::<u64>()).prop_map(|(n, seed)| {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let adj: Vec<Vec<u8>> =
                    (0..n).map(|i| (0..n).map(|j| (i == j || rng.random_bool(0.6)) as u8).collect()).collect();
                if let Ok(t) = NetworkTopology::build(&adj) {
                    return t;
                }
            }
        })
    }

    proptest! {
        #[test]
        fn cyclic_table_invariants(t in arb_topology(), seed in any::<u64>(), shuffled in any::<bool>()) {
            let policy = if shuffled { IndexPolicy::Shuffled { seed } } else { IndexPolicy::Ascending };
            let tab = CyclicIndexTable::assign(&t, policy);
            for j in 0..t.n() {
                let c = t.c_set(j);
                let mut seen: Vec<usize> = c.iter().map(|&i| tab.index_of(i, j)).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (1..=c.len()).collect::<Vec<_>>());
                prop_assert_eq!(tab.user_at(j, c.len() + 1), tab.user_at(j, 1));
                for &i in c {
                    prop_assert_eq!(tab.user_at(j, tab.index_of(i, j)), i);
                    let s1 = tab.successor(j, i, 1).unwrap();
                    let s2 = tab.successor(j, i, 2).unwrap();
                    prop_assert_ne!(s1, i);
                    prop_assert_ne!(s2, s1);
                    prop_assert_ne!(s2, i);
                    prop_assert_eq!(tab.successor(j, s1, 1).unwrap(), s2);
                }
            }
        }

        #[test]
        fn r_sets_round_trip(t in arb_topology()) {
            let r: Vec<Vec<usize>> = (0..t.n()).map(|i| t.r_set(i).to_vec()).collect();
            let rebuilt = NetworkTopology::from_r_sets(&r).unwrap();
            prop_assert_eq!(rebuilt.adjacency(), t.adjacency());
        }
    }
}
