//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    let lu = a.clone().lu();
    lu.solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::SingularSystem(format!("{}x{} system", a.nrows(), a.ncols())))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularSystem("matrix is not positive definite".into()))
}

/// `A^{p}` for symmetric PSD `A`, with eigenvalues floored at `floor` before the power.
pub fn sym_power(a: &Matrix, p: f64, floor: f64) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(a));
    let vals = eig.eigenvalues.map(|v| v.max(floor).powf(p));
    &eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Weighted second moment `sum_i w_i x_i x_i^T` over the rows of `x`.
pub fn weighted_second_moment(x: &Matrix, w: &Vector) -> Matrix {
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    x.transpose() * scaled
}

/// Orthonormal basis of the column space of `x` (thin SVD), together with
/// the numerical rank relative to `rel_tol * sigma_max`.
pub fn orthonormal_basis(x: &Matrix, rel_tol: f64) -> (Matrix, usize) {
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > rel_tol * smax && s > 0.0)
        .count();
    (u, rank)
}

/// Singular values sorted in descending order.
pub fn singular_values_desc(x: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = x.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Thin SVD with singular triplets sorted by descending singular value.
pub struct SortedSvd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

pub fn sorted_svd(x: &Matrix) -> SortedSvd {
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = order.len();
    let mut us = Matrix::zeros(u.nrows(), k);
    let mut vs = Matrix::zeros(v_t.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (j, &o) in order.iter().enumerate() {
        us.set_column(j, &u.column(o));
        vs.set_column(j, &v_t.row(o).transpose());
        s.push(svd.singular_values[o]);
    }
    SortedSvd { u: us, singular_values: s, v: vs }
}

pub fn max_abs(x: &Matrix) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_power_inverts_square_root() {
        let a = Matrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_power(&a, 0.5, 0.0);
        assert!((&r * &r - &a).norm() < 1e-12);
        let ri = sym_power(&a, -0.5, 0.0);
        assert!((&ri * &a * &ri - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn sorted_svd_reconstructs() {
        let x = Matrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).sin());
        let svd = sorted_svd(&x);
        assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let rec = &svd.u * Matrix::from_diagonal(&Vector::from_vec(svd.singular_values.clone())) * svd.v.transpose();
        assert!((rec - x).norm() < 1e-12);
    }
}
