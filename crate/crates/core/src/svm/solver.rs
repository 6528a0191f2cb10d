use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataset::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

use super::constraints::{ConstraintSet, Triple};
use super::subspace::MatrixSubspace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmStatus {
    Solved,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmOptions {
    pub max_sweeps: usize,
    /// Stop when no dual variable moves by more than this in a sweep.
    pub tol: f64,
    /// Dual mass beyond which the problem is declared infeasible.
    pub dual_cap: f64,
    /// Sweeps between stagnation checks.
    pub stagnation_window: usize,
    /// Right-hand side of the inequalities.
    pub margin: f64,
    /// Try closing the gap with an exact solve on the current support.
    pub polish: bool,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200_000,
            tol: 1e-10,
            dual_cap: 1e8,
            stagnation_window: 1000,
            margin: 1.0,
            polish: true,
        }
    }
}

/// Primal feasibility tolerance used to label a solve as `Solved`.
pub const PRIMAL_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SvmSolution<T> {
    pub w: Matrix<T>,
    /// One nonnegative dual per inequality, in constraint order.
    pub multipliers: Vec<T>,
    /// `⟨A_a, W⟩ - margin` per inequality.
    pub inequality_slack: Vec<T>,
    /// `⟨B_b, W⟩` per equality.
    pub equality_residuals: Vec<T>,
    /// Max of the stationarity residual (modulo the equality span) and the
    /// complementary-slackness residual.
    pub kkt_residual: T,
    pub status: SvmStatus,
    pub sweeps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualSummary {
    pub max_equality_violation: f64,
    pub min_inequality_slack: Option<f64>,
    pub kkt_residual: f64,
    pub sweeps: usize,
}

impl<T: Scalar> SvmSolution<T> {
    pub fn norm(&self) -> T {
        self.w.frob_norm()
    }

    pub fn max_equality_violation(&self) -> T {
        self.equality_residuals
            .iter()
            .fold(T::zero(), |m, r| m.max(r.abs()))
    }

    pub fn min_inequality_slack(&self) -> Option<T> {
        self.inequality_slack.iter().copied().reduce(T::min)
    }

    pub fn summary(&self) -> ResidualSummary {
        ResidualSummary {
            max_equality_violation: self.max_equality_violation().as_f64(),
            min_inequality_slack: self.min_inequality_slack().map(Scalar::as_f64),
            kkt_residual: self.kkt_residual.as_f64(),
            sweeps: self.sweeps,
        }
    }
}

/// `Σ_a λ_a A_a`, accumulated per query token.
fn combine<T: Scalar>(triples: &[Triple], lambda: &[T], e: &EmbeddingTable<T>) -> Matrix<T> {
    let d = e.dim();
    let mut per_k: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for (t, &l) in triples.iter().zip(lambda) {
        if l == T::zero() {
            continue;
        }
        let v = per_k.entry(t.k).or_insert_with(|| vec![T::zero(); d]);
        linalg::axpy(l, e.embedding(t.i), v);
        linalg::axpy(-l, e.embedding(t.j), v);
    }
    let mut w = Matrix::zeros(d, d);
    for (k, v) in per_k {
        w += &Matrix::outer(&v, e.embedding(k));
    }
    w
}

/// Residuals of a candidate `W` with multipliers against the constraint set.
pub fn evaluate<T: Scalar>(
    constraints: &ConstraintSet,
    e: &EmbeddingTable<T>,
    w: Matrix<T>,
    multipliers: Vec<T>,
    margin: T,
    status: SvmStatus,
    sweeps: usize,
) -> SvmSolution<T> {
    let fin = MatrixSubspace::span(&constraints.equalities, e);
    let equality_residuals: Vec<T> = constraints.equalities.iter().map(|t| t.eval(e, &w)).collect();
    let inequality_slack: Vec<T> = constraints
        .inequalities
        .iter()
        .map(|t| t.eval(e, &w) - margin)
        .collect();
    let stationarity = fin
        .project_out(&(&w - &combine(&constraints.inequalities, &multipliers, e)))
        .frob_norm();
    let slackness = multipliers
        .iter()
        .zip(&inequality_slack)
        .fold(T::zero(), |m, (&l, &s)| m.max((l * s).abs()));
    SvmSolution {
        w,
        multipliers,
        inequality_slack,
        equality_residuals,
        kkt_residual: stationarity.max(slackness),
        status,
        sweeps,
    }
}

/// Exact solve of `G_SS λ_S = margin·1` on the current support; accepted only if it
/// is a KKT point of the dual.
fn polish<T: Scalar>(gram: &Matrix<T>, lambda: &[T], margin: T) -> Option<Vec<T>> {
    let support: Vec<usize> = (0..lambda.len()).filter(|&a| lambda[a] > T::zero()).collect();
    if support.is_empty() {
        return None;
    }
    let s = support.len();
    let mut sub = Matrix::zeros(s, s);
    for (p, &a) in support.iter().enumerate() {
        for (q, &b) in support.iter().enumerate() {
            sub[(p, q)] = gram[(a, b)];
        }
    }
    let x = linalg::psd_pivoted_solve(&sub, &vec![margin; s], T::tol(1e-12));
    let tol = T::tol(1e-9) * margin;
    if x.iter().any(|&v| v < -tol) {
        return None;
    }
    let mut out = vec![T::zero(); lambda.len()];
    for (p, &a) in support.iter().enumerate() {
        out[a] = x[p].max(T::zero());
    }
    let g = gram.matvec(&out);
    let ok = g.iter().enumerate().all(|(a, &v)| {
        if out[a] > T::zero() {
            (v - margin).abs() <= tol
        } else {
            v >= margin - tol
        }
    });
    ok.then_some(out)
}

/// Minimum-norm `W` with `⟨A_a, W⟩ >= margin` on inequalities and `⟨B_b, W⟩ = 0` on
/// equalities.
///
/// The inequality matrices are first projected onto the orthogonal complement of
/// the equality span, where the optimum lives. The dual
/// `max Σλ - ½ λᵀGλ, λ >= 0` over their Gram matrix is then solved by cyclic
/// coordinate ascent, and `W = Σ λ_a Ã_a`.
pub fn solve_graph_svm<T: Scalar>(
    constraints: &ConstraintSet,
    e: &EmbeddingTable<T>,
    opts: &SvmOptions,
) -> SvmSolution<T> {
    let d = e.dim();
    let margin = T::of(opts.margin);
    let m = constraints.inequalities.len();
    let finish = |lambda: Vec<T>, status, sweeps| {
        let fin = MatrixSubspace::span(&constraints.equalities, e);
        let w = fin.project_out(&combine(&constraints.inequalities, &lambda, e));
        let mut sol = evaluate(constraints, e, w, lambda, margin, status, sweeps);
        if sol.status == SvmStatus::Solved && !primal_ok(&sol, margin) {
            sol.status = SvmStatus::MaxIter;
        }
        sol
    };
    if m == 0 {
        return evaluate(
            constraints,
            e,
            Matrix::zeros(d, d),
            Vec::new(),
            margin,
            SvmStatus::Solved,
            0,
        );
    }

    let fin = MatrixSubspace::span(&constraints.equalities, e);
    let gram = projected_gram(&constraints.inequalities, e, &fin);
    for a in 0..m {
        let raw = constraints.inequalities[a].matrix(e).frob_norm().powi(2);
        if gram[(a, a)] <= T::tol(1e-12) * raw.max(T::one()) {
            // The inequality lies inside the equality span, so `⟨A_a, W⟩ = 0`.
            return finish(vec![T::zero(); m], SvmStatus::Infeasible, 0);
        }
    }

    let tol = T::tol(opts.tol);
    let cap = T::of(opts.dual_cap);
    let mut lambda = vec![T::zero(); m];
    let mut g_lambda = vec![T::zero(); m];
    let mut next_polish = 8;
    let mut window_start: Option<(T, T)> = None;
    for sweep in 1..=opts.max_sweeps {
        let mut max_change = T::zero();
        for a in 0..m {
            let updated = (lambda[a] + (margin - g_lambda[a]) / gram[(a, a)]).max(T::zero());
            let delta = updated - lambda[a];
            if delta != T::zero() {
                lambda[a] = updated;
                let col = gram.row(a);
                for (gb, &gab) in g_lambda.iter_mut().zip(col) {
                    *gb += delta * gab;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        if sweep % 64 == 0 {
            g_lambda = gram.matvec(&lambda);
        }
        let converged = max_change < tol;
        if opts.polish && (converged || sweep == next_polish) {
            next_polish *= 2;
            if let Some(exact) = polish(&gram, &lambda, margin) {
                return finish(exact, SvmStatus::Solved, sweep);
            }
        }
        if converged {
            return finish(lambda, SvmStatus::Solved, sweep);
        }
        let mass: T = lambda.iter().copied().sum();
        if mass > cap {
            return finish(lambda, SvmStatus::Infeasible, sweep);
        }
        if opts.stagnation_window > 0 && sweep % opts.stagnation_window == 0 {
            let violation = g_lambda
                .iter()
                .fold(T::zero(), |v, &g| v.max(margin - g));
            if let Some((prev_violation, prev_mass)) = window_start {
                if violation > T::of(PRIMAL_TOL) * margin
                    && violation > T::of(0.999) * prev_violation
                    && mass > prev_mass
                {
                    return finish(lambda, SvmStatus::Infeasible, sweep);
                }
            }
            window_start = Some((violation, mass));
        }
    }
    finish(lambda, SvmStatus::MaxIter, opts.max_sweeps)
}

fn primal_ok<T: Scalar>(sol: &SvmSolution<T>, margin: T) -> bool {
    let tol = T::tol(PRIMAL_TOL);
    sol.max_equality_violation() <= tol
        && sol
            .min_inequality_slack()
            .is_none_or(|s| s >= -tol * margin.max(T::one()))
}

/// `G_ab = ⟨Ã_a, Ã_b⟩` for the inequality matrices projected off `fin`, computed from
/// the embedding Gram matrix and the coordinates of each `A_a` in `fin`.
fn projected_gram<T: Scalar>(
    triples: &[Triple],
    e: &EmbeddingTable<T>,
    fin: &MatrixSubspace<T>,
) -> Matrix<T> {
    let g = e.matrix().gram_rows();
    let coords: Vec<Vec<T>> = if fin.dim() == 0 {
        vec![Vec::new(); triples.len()]
    } else {
        triples.iter().map(|t| fin.coords(&t.matrix(e))).collect()
    };
    let m = triples.len();
    let mut out = Matrix::zeros(m, m);
    for a in 0..m {
        let ta = triples[a];
        for b in a..m {
            let tb = triples[b];
            let diff = g[(ta.i, tb.i)] - g[(ta.i, tb.j)] - g[(ta.j, tb.i)] + g[(ta.j, tb.j)];
            let v = diff * g[(ta.k, tb.k)] - linalg::dot(&coords[a], &coords[b]);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Joint solution assembled from independent per-query-token solves.
#[derive(Clone, Debug)]
pub struct PerTokenSolution<T> {
    pub joint: SvmSolution<T>,
    pub parts: Vec<(usize, Matrix<T>)>,
    /// Largest `‖W_k - W_k e_k e_kᵀ‖_F` over the parts.
    pub row_space_defect: T,
}

/// Splits the constraints by query token, solves each group on its own and sums the
/// results. Only meaningful for orthonormal embeddings, where the groups decouple.
pub fn solve_per_last_token<T: Scalar>(
    constraints: &ConstraintSet,
    e: &EmbeddingTable<T>,
    opts: &SvmOptions,
) -> Result<PerTokenSolution<T>> {
    let defect = e.orthonormality_defect();
    if e.vocab_size() > e.dim() || defect > T::tol(1e-10) {
        return Err(Error::NotOrthonormal(defect.as_f64()));
    }
    let d = e.dim();
    let mut w = Matrix::zeros(d, d);
    let mut multipliers = vec![T::zero(); constraints.inequalities.len()];
    let mut parts = Vec::new();
    let mut status = SvmStatus::Solved;
    let mut sweeps = 0;
    let mut row_space_defect = T::zero();
    for k in constraints.query_tokens() {
        let sub = constraints.restricted_to(k);
        let sol = solve_graph_svm(&sub, e, opts);
        if status == SvmStatus::Solved {
            status = sol.status;
        }
        sweeps = sweeps.max(sol.sweeps);
        let ek = e.embedding(k);
        let along = Matrix::outer(&sol.w.matvec(ek), ek);
        row_space_defect = row_space_defect.max((&sol.w - &along).frob_norm());
        let idx = constraints
            .inequalities
            .iter()
            .enumerate()
            .filter(|(_, t)| t.k == k)
            .map(|(a, _)| a);
        for (a, &l) in idx.zip(&sol.multipliers) {
            multipliers[a] = l;
        }
        w += &sol.w;
        parts.push((k, sol.w));
    }
    let joint = evaluate(constraints, e, w, multipliers, T::of(opts.margin), status, sweeps);
    Ok(PerTokenSolution {
        joint,
        parts,
        row_space_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_embeddings, EmbeddingKind};

    fn table(k: usize, d: usize) -> EmbeddingTable<f64> {
        make_embeddings(k, d, EmbeddingKind::Orthonormal, 17).unwrap()
    }

    #[test]
    fn empty_constraints_give_zero() {
        let sol = solve_graph_svm(&ConstraintSet::default(), &table(3, 3), &SvmOptions::default());
        assert_eq!(sol.status, SvmStatus::Solved);
        assert_eq!(sol.norm(), 0.0);
    }

    #[test]
    fn single_halfspace() {
        let e = table(3, 3);
        let t = Triple::new(0, 1, 2);
        let c = ConstraintSet {
            equalities: vec![],
            inequalities: vec![t],
        };
        let sol = solve_graph_svm(&c, &e, &SvmOptions::default());
        assert_eq!(sol.status, SvmStatus::Solved);
        let expected = t.matrix(&e).scaled(0.5);
        assert!((&sol.w - &expected).frob_norm() < 1e-12);
        assert!((sol.norm() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn opposing_inequalities_are_infeasible() {
        let e = table(3, 3);
        let c = ConstraintSet {
            equalities: vec![],
            inequalities: vec![Triple::new(0, 1, 2), Triple::new(1, 0, 2)],
        };
        let sol = solve_graph_svm(&c, &e, &SvmOptions::default());
        assert_eq!(sol.status, SvmStatus::Infeasible);
    }

    #[test]
    fn inequality_inside_equality_span_is_infeasible() {
        let e = table(3, 3);
        let c = ConstraintSet {
            equalities: vec![Triple::new(0, 1, 2)],
            inequalities: vec![Triple::new(0, 1, 2)],
        };
        assert_eq!(
            solve_graph_svm(&c, &e, &SvmOptions::default()).status,
            SvmStatus::Infeasible
        );
    }

    #[test]
    fn margin_scales_solution() {
        let e = make_embeddings::<f64>(4, 5, EmbeddingKind::UnitSphere, 2).unwrap();
        let c = ConstraintSet {
            equalities: vec![Triple::new(0, 1, 3)],
            inequalities: vec![Triple::new(0, 2, 3), Triple::new(1, 2, 3), Triple::new(2, 3, 1)],
        };
        let one = solve_graph_svm(&c, &e, &SvmOptions::default());
        let three = solve_graph_svm(
            &c,
            &e,
            &SvmOptions {
                margin: 3.0,
                ..SvmOptions::default()
            },
        );
        assert_eq!(one.status, SvmStatus::Solved);
        assert!((&three.w - &one.w.scaled(3.0)).frob_norm() < 1e-9);
        assert!(one.kkt_residual < 1e-9);
    }
}
