//! Small dense linear algebra over [`Scalar`].
//!
//! Everything here is sized for desk-scale problems (d up to a few hundred), so the
//! matrix type is a plain row-major buffer and the decompositions are the classic
//! textbook ones: modified Gram-Schmidt, one-sided Jacobi SVD and Gauss-Jordan.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from a row-major buffer. Panics when the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match shape");
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows; `None` when the rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Some(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[T], v: &[T]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            if ui == T::zero() {
                continue;
            }
            for (j, &vj) in v.iter().enumerate() {
                m.data[i * v.len() + j] = ui * vj;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `A x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows, x.len());
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        out
    }

    /// `A Aᵀ`.
    pub fn gram_rows(&self) -> Self {
        let mut g = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(self.row(i), self.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Frobenius inner product `⟨A, B⟩`.
    pub fn frob_inner(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn frob_norm(&self) -> T {
        norm(&self.data)
    }

    /// Bilinear form `uᵀ A v`.
    pub fn bilinear(&self, u: &[T], v: &[T]) -> T {
        dot(u, &self.matvec(v))
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> T {
        singular_values(self).first().copied().unwrap_or_else(T::zero)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> Add for &Matrix<T> {
    type Output = Matrix<T>;
    fn add(self, rhs: &Matrix<T>) -> Matrix<T> {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl<T: Scalar> Sub for &Matrix<T> {
    type Output = Matrix<T>;
    fn sub(self, rhs: &Matrix<T>) -> Matrix<T> {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl<T: Scalar> Mul<T> for &Matrix<T> {
    type Output = Matrix<T>;
    fn mul(self, rhs: T) -> Matrix<T> {
        self.scaled(rhs)
    }
}

impl<T: Scalar> Neg for &Matrix<T> {
    type Output = Matrix<T>;
    fn neg(self) -> Matrix<T> {
        self.map(|x| -x)
    }
}

impl<T: Scalar> AddAssign<&Matrix<T>> for Matrix<T> {
    fn add_assign(&mut self, rhs: &Matrix<T>) {
        self.axpy(T::one(), rhs);
    }
}

impl<T: Scalar> SubAssign<&Matrix<T>> for Matrix<T> {
    fn sub_assign(&mut self, rhs: &Matrix<T>) {
        self.axpy(-T::one(), rhs);
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Vectors whose residual
/// norm falls below `cutoff` are dropped, so the output length is the numerical rank
/// of the input set.
pub fn orthonormalize<T, I>(vectors: I, cutoff: T) -> Vec<Vec<T>>
where
    T: Scalar,
    I: IntoIterator<Item = Vec<T>>,
{
    let mut basis: Vec<Vec<T>> = Vec::new();
    for mut v in vectors {
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &v);
                axpy(-c, b, &mut v);
            }
        }
        let nv = norm(&v);
        if nv > cutoff {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
    basis
}

/// Singular values in decreasing order via one-sided Jacobi (Hestenes) rotations.
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    // Rotate the columns of whichever orientation has fewer of them.
    let work = if a.cols() <= a.rows() {
        a.transpose()
    } else {
        a.clone()
    };
    // `work` rows are the columns being orthogonalized.
    let n = work.rows();
    let mut cols: Vec<Vec<T>> = work.to_rows();
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = cols.iter().map(|c| norm(c)).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Numerical rank with an absolute singular-value cutoff.
pub fn rank<T: Scalar>(a: &Matrix<T>, cutoff: T) -> usize {
    singular_values(a).into_iter().filter(|&s| s > cutoff).count()
}

/// Gauss-Jordan inverse with partial pivoting; `None` when a pivot vanishes.
pub fn inverse<T: Scalar>(a: &Matrix<T>) -> Option<Matrix<T>> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "inverse of a non-square matrix");
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    let scale = a.max_abs().max(T::min_positive_value());
    for c in 0..n {
        let (piv, pval) = (c..n)
            .map(|r| (r, m[(r, c)].abs()))
            .fold((c, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= T::epsilon() * scale * T::of_usize(n) {
            return None;
        }
        if piv != c {
            for j in 0..n {
                let (x, y) = (m[(c, j)], m[(piv, j)]);
                m[(c, j)] = y;
                m[(piv, j)] = x;
                let (x, y) = (inv[(c, j)], inv[(piv, j)]);
                inv[(c, j)] = y;
                inv[(piv, j)] = x;
            }
        }
        let d = m[(c, c)];
        for j in 0..n {
            m[(c, j)] /= d;
            inv[(c, j)] /= d;
        }
        for r in 0..n {
            if r == c {
                continue;
            }
            let f = m[(r, c)];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                let (mc, ic) = (m[(c, j)], inv[(c, j)]);
                m[(r, j)] -= f * mc;
                inv[(r, j)] -= f * ic;
            }
        }
    }
    Some(inv)
}

/// A solution of `G x = b` for symmetric positive semidefinite `G` by pivoted
/// Cholesky, stopping once the remaining pivots fall below `cutoff` times the
/// largest diagonal entry. Variables past the detected rank are set to zero, so
/// for a consistent system the result is exact but not minimum-norm.
pub fn psd_pivoted_solve<T: Scalar>(g: &Matrix<T>, b: &[T], cutoff: T) -> Vec<T> {
    let n = g.rows();
    assert_eq!(n, g.cols());
    assert_eq!(n, b.len());
    let mut a = g.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let top = (0..n).map(|i| a[(i, i)]).fold(T::zero(), T::max);
    let mut r = 0;
    while r < n {
        let (piv, best) = (r..n)
            .map(|i| (i, a[(i, i)]))
            .fold((r, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= cutoff * top || best <= T::zero() {
            break;
        }
        if piv != r {
            perm.swap(piv, r);
            for k in 0..n {
                let tmp = a[(k, piv)];
                a[(k, piv)] = a[(k, r)];
                a[(k, r)] = tmp;
            }
            for k in 0..n {
                let tmp = a[(piv, k)];
                a[(piv, k)] = a[(r, k)];
                a[(r, k)] = tmp;
            }
        }
        let d = best.sqrt();
        a[(r, r)] = d;
        for i in (r + 1)..n {
            a[(i, r)] /= d;
        }
        for i in (r + 1)..n {
            let lir = a[(i, r)];
            if lir == T::zero() {
                continue;
            }
            for j in (r + 1)..n {
                let v = lir * a[(j, r)];
                a[(i, j)] -= v;
            }
        }
        r += 1;
    }
    // Forward and back substitution on the leading r×r factor.
    let mut y: Vec<T> = perm[..r].iter().map(|&i| b[i]).collect();
    for i in 0..r {
        for k in 0..i {
            let v = a[(i, k)] * y[k];
            y[i] -= v;
        }
        y[i] /= a[(i, i)];
    }
    for i in (0..r).rev() {
        for k in (i + 1)..r {
            let v = a[(k, i)] * y[k];
            y[i] -= v;
        }
        y[i] /= a[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for (i, &p) in perm[..r].iter().enumerate() {
        x[p] = y[i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_and_transpose_agree() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = a.matmul(&a.transpose());
        assert_eq!(g, a.gram_rows());
        assert_eq!(g.as_slice(), &[14.0, 32.0, 32.0, 77.0]);
        assert_eq!(a.tr_matvec(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn singular_values_of_diagonal_and_rank_one() {
        let d = Matrix::from_vec(3, 3, vec![3.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.5]);
        let sv = singular_values(&d);
        assert_relative_eq!(sv[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(sv[1], 2.0, epsilon = 1e-14);
        assert_relative_eq!(sv[2], 0.5, epsilon = 1e-14);
        let r1 = Matrix::outer(&[1.0, 2.0, 2.0], &[0.0, 3.0, 4.0, 0.0]);
        assert_eq!(rank(&r1, 1e-10), 1);
        assert_relative_eq!(r1.spectral_norm(), 15.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let a = Matrix::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = inverse(&a).unwrap();
        let id = a.matmul(&inv);
        assert!((&id - &Matrix::identity(3)).max_abs() < 1e-13);
        let singular = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(inverse(&singular).is_none());
    }

    #[test]
    fn gram_schmidt_drops_dependent_vectors() {
        let b = orthonormalize(
            vec![vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 0.0], vec![0.0, 1.0, 1.0]],
            1e-10,
        );
        assert_eq!(b.len(), 2);
        assert!(dot::<f64>(&b[0], &b[1]).abs() < 1e-15);
        assert_relative_eq!(norm(&b[1]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn pivoted_solve_handles_rank_deficiency() {
        // Rows 0 and 2 are equal, so G = A Aᵀ has rank 2.
        let a = Matrix::from_vec(3, 3, vec![1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0]);
        let g = a.gram_rows();
        let b = g.matvec(&[0.5, -1.0, 0.25]);
        let x = psd_pivoted_solve(&g, &b, 1e-12);
        for (u, v) in g.matvec(&x).iter().zip(&b) {
            assert_relative_eq!(*u, *v, epsilon = 1e-10);
        }
        assert_eq!(x.iter().filter(|v| **v == 0.0).count(), 1);
    }
}
