use crate::dataset::EmbeddingTable;
use crate::graph::GraphSet;
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

use super::constraints::{build_constraints, edge_triples, Triple};

/// Residual cutoff used when orthonormalizing generators.
pub const SPAN_CUTOFF: f64 = 1e-10;

/// Subspace of `d x d` matrices with an orthonormal basis (vectorized row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSubspace<T> {
    d: usize,
    basis: Vec<Vec<T>>,
    generators: usize,
}

impl<T: Scalar> MatrixSubspace<T> {
    pub fn zero(d: usize) -> Self {
        Self {
            d,
            basis: Vec::new(),
            generators: 0,
        }
    }

    /// Orthonormalizes arbitrary `d x d` generators.
    pub fn from_matrices<I>(d: usize, generators: I) -> Self
    where
        I: IntoIterator<Item = Matrix<T>>,
    {
        let mut count = 0;
        let vecs = generators.into_iter().map(|m| {
            assert_eq!(m.shape(), (d, d));
            count += 1;
            m.into_vec()
        });
        let basis = linalg::orthonormalize(vecs, T::tol(SPAN_CUTOFF));
        Self {
            d,
            basis,
            generators: count,
        }
    }

    /// `span{(e_i - e_j) e_kᵀ}` over `triples`.
    pub fn span(triples: &[Triple], e: &EmbeddingTable<T>) -> Self {
        Self::from_matrices(e.dim(), triples.iter().map(|t| t.matrix(e)))
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn matrix_dim(&self) -> usize {
        self.d
    }

    pub fn generator_count(&self) -> usize {
        self.generators
    }

    pub fn basis(&self) -> &[Vec<T>] {
        &self.basis
    }

    pub fn basis_matrix(&self, a: usize) -> Matrix<T> {
        Matrix::from_vec(self.d, self.d, self.basis[a].clone())
    }

    /// Coordinates `⟨W, B_a⟩`.
    pub fn coords(&self, w: &Matrix<T>) -> Vec<T> {
        self.basis.iter().map(|b| linalg::dot(b, w.as_slice())).collect()
    }

    pub fn project(&self, w: &Matrix<T>) -> Matrix<T> {
        let mut out = vec![T::zero(); self.d * self.d];
        for b in &self.basis {
            linalg::axpy(linalg::dot(b, w.as_slice()), b, &mut out);
        }
        Matrix::from_vec(self.d, self.d, out)
    }

    /// Projection onto the orthogonal complement.
    pub fn project_out(&self, w: &Matrix<T>) -> Matrix<T> {
        let mut out = w.clone();
        for b in &self.basis {
            let c = linalg::dot(b, out.as_slice());
            linalg::axpy(-c, b, out.as_mut_slice());
        }
        out
    }

    /// `‖W - Π(W)‖_F`.
    pub fn distance(&self, w: &Matrix<T>) -> T {
        self.project_out(w).frob_norm()
    }
}

/// The three subspaces derived from a graph set.
#[derive(Clone, Debug)]
pub struct Subspaces<T> {
    /// Spanned by same-component pairs.
    pub fin: MatrixSubspace<T>,
    /// Spanned by direct graph edges.
    pub active: MatrixSubspace<T>,
    /// Complement of `fin` inside `active`.
    pub svm: MatrixSubspace<T>,
}

pub fn subspaces<T: Scalar>(graphs: &GraphSet, e: &EmbeddingTable<T>) -> Subspaces<T> {
    let constraints = build_constraints(graphs);
    let fin = MatrixSubspace::span(&constraints.equalities, e);
    let active = MatrixSubspace::span(&edge_triples(graphs), e);
    let svm = MatrixSubspace::from_matrices(
        e.dim(),
        active.basis().iter().map(|b| {
            fin.project_out(&Matrix::from_vec(e.dim(), e.dim(), b.clone()))
        }),
    );
    Subspaces { fin, active, svm }
}
