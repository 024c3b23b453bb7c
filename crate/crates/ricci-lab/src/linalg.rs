//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::bivector::C64;
use crate::rng::{self, Rng};

/// Eigen-decomposition of a real symmetric matrix, eigenvalues ascending.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn herm_eigen_sorted(m: &DMatrix<C64>) -> (DVector<f64>, DMatrix<C64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// `S^{-1/2}` for a symmetric positive definite matrix.
pub fn inv_sqrt_spd(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_sorted(s);
    let d = DMatrix::from_diagonal(&vals.map(|x| 1.0 / x.max(1e-300).sqrt()));
    &vecs * d * vecs.transpose()
}

/// Nearest matrix with orthonormal columns (polar factor).
pub fn polar_retract(a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a.transpose() * a;
    a * inv_sqrt_spd(&gram)
}

/// Projection of an ambient gradient onto the tangent space of the Stiefel
/// manifold at `e`.
pub fn stiefel_project(e: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let etg = e.transpose() * g;
    let sym = (&etg + etg.transpose()) * 0.5;
    g - e * sym
}

/// Random `n x k` frame with orthonormal columns.
pub fn random_frame(rng: &mut Rng, n: usize, k: usize) -> DMatrix<f64> {
    loop {
        let a = rng::normal_matrix(rng, n, k);
        let gram = a.transpose() * &a;
        if gram.determinant().abs() > 1e-8 {
            return polar_retract(&a);
        }
    }
}

pub fn frob_norm_c(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn to_complex(v: &DVector<f64>) -> DVector<C64> {
    v.map(|x| C64::new(x, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polar_gives_orthonormal_columns() {
        let mut r = rng::stream(3, 0);
        let a = rng::normal_matrix(&mut r, 6, 3);
        let q = polar_retract(&a);
        let id = q.transpose() * &q;
        assert!((id - DMatrix::<f64>::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn hermitian_eigen_is_sorted() {
        let mut r = rng::stream(4, 0);
        let a = DMatrix::from_fn(4, 4, |_, _| rng::complex_normal(&mut r));
        let h = &a + a.adjoint();
        let (vals, vecs) = herm_eigen_sorted(&h);
        for k in 1..4 {
            assert!(vals[k] >= vals[k - 1]);
        }
        let recon = &vecs * DMatrix::from_diagonal(&vals.map(|x| C64::new(x, 0.0))) * vecs.adjoint();
        assert!(frob_norm_c(&(recon - h)) < 1e-10);
    }
}
