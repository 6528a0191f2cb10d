#![allow(dead_code)]

use attnlab::dataset::EmbeddingTable;
use attnlab::svm::ConstraintSet;
use attnlab::Matrix;
use nalgebra::{DMatrix, DVector};

pub fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone().svd(true, true).solve(b, 1e-12).expect("svd with u and v")
}

/// Exhaustive active-set solution of the graph SVM, feasible for small
/// instances only: every linearly independent subset of the inequalities is
/// tried as the active set and the smallest feasible min-norm point wins.
/// `None` when no subset yields a feasible point.
pub fn brute_force_svm(c: &ConstraintSet, e: &EmbeddingTable<f64>) -> Option<Matrix<f64>> {
    let d = e.dim();
    let vec_of = |t: &attnlab::svm::Triple| DVector::from_row_slice(t.matrix(e).as_slice());
    let eqs: Vec<DVector<f64>> = c.equalities.iter().map(vec_of).collect();
    let ineqs: Vec<DVector<f64>> = c.inequalities.iter().map(vec_of).collect();

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in &eqs {
        push_independent(&mut basis, v);
    }
    let mut active = Vec::new();
    search(0, &eqs, &ineqs, &mut basis, &mut active, d, &mut best);
    best.map(|(_, w)| Matrix::from_vec(d, d, w.iter().copied().collect()))
}

fn push_independent(basis: &mut Vec<DVector<f64>>, v: &DVector<f64>) -> bool {
    let mut r = v.clone();
    for q in basis.iter() {
        r -= q * q.dot(&r);
    }
    let n = r.norm();
    if n > 1e-9 * v.norm().max(1.0) {
        basis.push(r / n);
        true
    } else {
        false
    }
}

fn search(
    from: usize,
    eqs: &[DVector<f64>],
    ineqs: &[DVector<f64>],
    basis: &mut Vec<DVector<f64>>,
    active: &mut Vec<usize>,
    d: usize,
    best: &mut Option<(f64, DVector<f64>)>,
) {
    let rows: Vec<&DVector<f64>> = eqs.iter().chain(active.iter().map(|&i| &ineqs[i])).collect();
    let w = if rows.is_empty() {
        DVector::zeros(d * d)
    } else {
        let a = DMatrix::from_fn(rows.len(), d * d, |r, c| rows[r][c]);
        let b = DVector::from_fn(rows.len(), |r, _| if r < eqs.len() { 0.0 } else { 1.0 });
        pinv_solve(&a, &b)
    };
    let feasible = eqs.iter().all(|v| v.dot(&w).abs() <= 1e-9)
        && ineqs.iter().all(|v| v.dot(&w) >= 1.0 - 1e-9);
    if feasible {
        let n = w.norm();
        if best.as_ref().is_none_or(|(bn, _)| n < *bn) {
            *best = Some((n, w));
        }
    }
    for i in from..ineqs.len() {
        let len = basis.len();
        if push_independent(basis, &ineqs[i]) {
            active.push(i);
            search(i + 1, eqs, ineqs, basis, active, d, best);
            active.pop();
            basis.truncate(len);
        }
    }
}
