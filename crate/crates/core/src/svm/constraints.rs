use serde::Serialize;

use crate::dataset::EmbeddingTable;
use crate::graph::{GraphSet, PairRelation};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// The linear functional `W -> (e_i - e_j)ᵀ W e_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Triple {
    pub k: usize,
    pub i: usize,
    pub j: usize,
}

impl Triple {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        assert_ne!(i, j, "constraint triple needs distinct tokens");
        Self { k, i, j }
    }

    /// The matrix `(e_i - e_j) e_kᵀ`.
    pub fn matrix<T: Scalar>(&self, e: &EmbeddingTable<T>) -> Matrix<T> {
        let diff = crate::linalg::sub(e.embedding(self.i), e.embedding(self.j));
        Matrix::outer(&diff, e.embedding(self.k))
    }

    /// `(e_i - e_j)ᵀ W e_k`.
    pub fn eval<T: Scalar>(&self, e: &EmbeddingTable<T>, w: &Matrix<T>) -> T {
        w.bilinear(e.embedding(self.i), e.embedding(self.k))
            - w.bilinear(e.embedding(self.j), e.embedding(self.k))
    }
}

/// Graph-SVM constraints: `= 0` on same-component pairs, `>= 1` on strict priorities.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConstraintSet {
    /// One orientation (`i < j`) per unordered same-component pair.
    pub equalities: Vec<Triple>,
    /// Higher-priority token first.
    pub inequalities: Vec<Triple>,
}

impl ConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.equalities.is_empty() && self.inequalities.is_empty()
    }

    pub fn len(&self) -> usize {
        self.equalities.len() + self.inequalities.len()
    }

    /// Constraints whose query token is `k`.
    pub fn restricted_to(&self, k: usize) -> Self {
        Self {
            equalities: self.equalities.iter().filter(|t| t.k == k).copied().collect(),
            inequalities: self.inequalities.iter().filter(|t| t.k == k).copied().collect(),
        }
    }

    /// Distinct query tokens, ascending.
    pub fn query_tokens(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .equalities
            .iter()
            .chain(&self.inequalities)
            .map(|t| t.k)
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Enumerates every ordered node pair of every graph, sorted by `(k, i, j)`.
pub fn build_constraints(graphs: &GraphSet) -> ConstraintSet {
    let mut set = ConstraintSet::default();
    for (k, g) in graphs.iter() {
        let nodes: Vec<usize> = g.scc.nodes().collect();
        for &i in &nodes {
            for &j in &nodes {
                if i == j {
                    continue;
                }
                match g.scc.relation(i, j).expect("nodes come from the decomposition") {
                    PairRelation::StrictPriority => set.inequalities.push(Triple::new(i, j, k)),
                    PairRelation::SameScc if i < j => set.equalities.push(Triple::new(i, j, k)),
                    _ => {}
                }
            }
        }
    }
    set
}

/// Direct edges `(i -> j)` of every graph as triples; they span the active subspace.
pub fn edge_triples(graphs: &GraphSet) -> Vec<Triple> {
    graphs
        .iter()
        .flat_map(|(k, g)| g.graph.edges().map(move |(i, j)| Triple::new(i, j, k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    #[test]
    fn chain_gives_closure_inequalities() {
        let samples = vec![
            Sample::new(vec![2, 9], 1),
            Sample::new(vec![3, 9], 2),
            Sample::new(vec![9], 9),
        ];
        let graphs = GraphSet::from_samples(&samples);
        let c = build_constraints(&graphs);
        let ineq: Vec<(usize, usize)> = c.inequalities.iter().map(|t| (t.i, t.j)).collect();
        // 9 is the sink reached from 1 and 2.
        assert_eq!(ineq, vec![(1, 2), (1, 3), (1, 9), (2, 3), (2, 9)]);
        assert!(c.equalities.is_empty());
    }

    #[test]
    fn two_cycle_gives_one_equality() {
        let samples = vec![Sample::new(vec![2, 1], 1), Sample::new(vec![1, 1], 2)];
        let c = build_constraints(&GraphSet::from_samples(&samples));
        assert_eq!(c.equalities, vec![Triple::new(1, 2, 1)]);
        assert!(c.inequalities.is_empty());
    }
}
