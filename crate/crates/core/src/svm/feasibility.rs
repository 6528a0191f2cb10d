use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataset::{tied_head_matrix, EmbeddingTable};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::constraints::{ConstraintSet, Triple};
use super::solver::{solve_graph_svm, SvmOptions, SvmStatus, PRIMAL_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibilityMethod {
    /// Explicit level-based construction.
    Certificate,
    /// Solver status, used when no construction applies.
    Solver,
}

#[derive(Clone, Debug)]
pub struct Feasibility<T> {
    pub feasible: bool,
    pub certificate: Option<Matrix<T>>,
    pub method: FeasibilityMethod,
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    let mut cur = x;
    while parent[cur] != root {
        let next = parent[cur];
        parent[cur] = root;
        cur = next;
    }
    root
}

/// Integer levels per token with equal levels on equality pairs and strictly larger
/// levels on the high side of every inequality. `None` when the constraints
/// contradict each other (a cycle through an inequality).
fn levels(vocab: usize, equalities: &[Triple], inequalities: &[Triple]) -> Option<Vec<usize>> {
    let mut parent: Vec<usize> = (0..vocab).collect();
    for t in equalities {
        let (a, b) = (find(&mut parent, t.i), find(&mut parent, t.j));
        parent[a] = b;
    }
    let class: Vec<usize> = (0..vocab).map(|x| find(&mut parent, x)).collect();
    let mut succ: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut indeg = vec![0usize; vocab];
    for t in inequalities {
        let (a, b) = (class[t.i], class[t.j]);
        if a == b {
            return None;
        }
        succ.entry(a).or_default().push(b);
        indeg[b] += 1;
    }
    // Kahn's order, then longest path to a sink processed in reverse.
    let mut order = Vec::with_capacity(vocab);
    let mut stack: Vec<usize> = (0..vocab).filter(|&c| class[c] == c && indeg[c] == 0).collect();
    while let Some(c) = stack.pop() {
        order.push(c);
        for &s in succ.get(&c).into_iter().flatten() {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                stack.push(s);
            }
        }
    }
    let roots = (0..vocab).filter(|&c| class[c] == c).count();
    if order.len() != roots {
        return None;
    }
    let mut level = vec![1usize; vocab];
    for &c in order.iter().rev() {
        if let Some(ss) = succ.get(&c) {
            level[c] = 1 + ss.iter().map(|&s| level[s]).max().unwrap_or(0);
        }
    }
    Some((0..vocab).map(|x| level[class[x]]).collect())
}

/// With `Ē = (E Eᵀ)⁻¹ E` we have `Ē e_i = u_i`, so `W = Ēᵀ M Ē` realizes any
/// prescribed values `e_iᵀ W e_k = M_ik`. Column `k` of `M` holds the constraint
/// levels for query `k`.
fn certificate<T: Scalar>(c: &ConstraintSet, e: &EmbeddingTable<T>) -> Option<Matrix<T>> {
    let bar = tied_head_matrix(e).ok()?;
    let vocab = e.vocab_size();
    let mut m = Matrix::zeros(vocab, vocab);
    for k in c.query_tokens() {
        let sub = c.restricted_to(k);
        let lv = levels(vocab, &sub.equalities, &sub.inequalities)?;
        for (i, &l) in lv.iter().enumerate() {
            m[(i, k)] = T::of_usize(l);
        }
    }
    let w = bar.transpose().matmul(&m).matmul(&bar);
    let gap = c
        .inequalities
        .iter()
        .map(|t| t.eval(e, &w))
        .fold(T::infinity(), T::min);
    if c.inequalities.is_empty() {
        return Some(Matrix::zeros(e.dim(), e.dim()));
    }
    (gap > T::zero()).then(|| w.scaled(T::one() / gap))
}

pub fn verify<T: Scalar>(c: &ConstraintSet, e: &EmbeddingTable<T>, w: &Matrix<T>) -> bool {
    let tol = T::tol(PRIMAL_TOL);
    c.equalities.iter().all(|t| t.eval(e, w).abs() <= tol)
        && c.inequalities.iter().all(|t| t.eval(e, w) >= T::one() - tol)
}

/// Feasibility of the Graph-SVM constraints. Full-row-rank embeddings get an explicit
/// verified certificate; otherwise the solver decides.
pub fn check_feasibility<T: Scalar>(
    c: &ConstraintSet,
    e: &EmbeddingTable<T>,
    opts: &SvmOptions,
) -> Feasibility<T> {
    if e.is_full_row_rank() {
        if let Some(w) = certificate(c, e) {
            if verify(c, e, &w) {
                return Feasibility {
                    feasible: true,
                    certificate: Some(w),
                    method: FeasibilityMethod::Certificate,
                };
            }
        }
    }
    let sol = solve_graph_svm(c, e, opts);
    let feasible = sol.status == SvmStatus::Solved;
    Feasibility {
        feasible,
        certificate: feasible.then_some(sol.w),
        method: FeasibilityMethod::Solver,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_embeddings, EmbeddingKind};

    #[test]
    fn levels_follow_chain_and_merge_equalities() {
        let lv = levels(
            4,
            &[Triple::new(2, 3, 0)],
            &[Triple::new(0, 1, 0), Triple::new(1, 2, 0)],
        )
        .unwrap();
        assert_eq!(lv, vec![3, 2, 1, 1]);
        assert!(levels(2, &[], &[Triple::new(0, 1, 0), Triple::new(1, 0, 0)]).is_none());
    }

    #[test]
    fn contradictory_set_is_infeasible() {
        let e = make_embeddings::<f64>(3, 4, EmbeddingKind::UnitSphere, 1).unwrap();
        let c = ConstraintSet {
            equalities: vec![],
            inequalities: vec![Triple::new(0, 1, 2), Triple::new(1, 0, 2)],
        };
        let f = check_feasibility(&c, &e, &SvmOptions::default());
        assert!(!f.feasible);
        assert_eq!(f.method, FeasibilityMethod::Solver);
    }
}
