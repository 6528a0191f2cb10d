//! Graph-SVM: constraints read off the token-priority graphs, the subspaces they
//! span, the min-norm solver and feasibility certificates.

mod constraints;
mod feasibility;
mod solver;
mod subspace;

pub use constraints::{build_constraints, edge_triples, ConstraintSet, Triple};
pub use feasibility::{check_feasibility, verify, Feasibility, FeasibilityMethod};
pub use solver::{
    evaluate, solve_graph_svm, solve_per_last_token, PerTokenSolution, ResidualSummary,
    SvmOptions, SvmSolution, SvmStatus, PRIMAL_TOL,
};
pub use subspace::{subspaces, MatrixSubspace, Subspaces, SPAN_CUTOFF};
