//! Small dense symmetric solves on `p x p` matrices.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2};

pub(crate) fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub(crate) fn vec_to_na(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn sym_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(to_na(m));
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Condition number of a symmetric matrix from its spectrum; infinite when
/// the smallest eigenvalue is not positive.
pub(crate) fn sym_condition(m: &Array2<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub(crate) fn cholesky(m: &Array2<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(to_na(m))
}

pub(crate) fn matvec(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    m.rows()
        .into_iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn to_array1(v: &DVector<f64>) -> Array1<f64> {
    v.iter().copied().collect()
}
