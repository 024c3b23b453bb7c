//! Real and complex bivectors on `so(n)`.
//!
//! A bivector is stored by its coordinates in the lexicographic wedge basis
//! `{e_i ^ e_j : i < j}`, which is orthonormal for the canonical inner
//! product. The matrix form has `(e_i ^ e_j)_{kl} = d_ik d_jl - d_il d_jk`.
//! Storing coordinates keeps antisymmetry exact by construction.

use nalgebra::{DMatrix, DVector, Schur, SVD};
use serde::{Deserialize, Serialize};

use crate::cones::ConeKind;
use crate::error::{check_dim, reject, LabError, Result};
use crate::linalg;
use crate::rng::{self, Rng};
use crate::tol;

pub type C64 = nalgebra::Complex<f64>;

const ZERO: C64 = C64::new(0.0, 0.0);

pub fn wedge_dim(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Position of `e_i ^ e_j` (`i < j`) in the lexicographic basis.
pub fn wedge_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn wedge_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(wedge_dim(n));
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

/// Coordinate of an antisymmetric index pair together with its sign:
/// `(i, j) -> (index, +1)` for `i < j`, `(index, -1)` for `i > j`, `None` on
/// the diagonal.
pub fn signed_index(n: usize, i: usize, j: usize) -> Option<(usize, f64)> {
    match i.cmp(&j) {
        std::cmp::Ordering::Less => Some((wedge_index(n, i, j), 1.0)),
        std::cmp::Ordering::Greater => Some((wedge_index(n, j, i), -1.0)),
        std::cmp::Ordering::Equal => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealBivector {
    n: usize,
    coords: DVector<f64>,
}

impl RealBivector {
    pub fn from_coords(n: usize, coords: DVector<f64>) -> Result<Self> {
        check_dim(wedge_dim(n), coords.len())?;
        Ok(Self { n, coords })
    }

    /// Antisymmetric part of `m`; the input need not be antisymmetric.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        check_dim(n, m.ncols())?;
        let coords = DVector::from_iterator(wedge_dim(n), wedge_pairs(n).into_iter().map(|(i, j)| 0.5 * (m[(i, j)] - m[(j, i)])));
        Ok(Self { n, coords })
    }

    pub fn basis(n: usize, i: usize, j: usize) -> Self {
        let (k, s) = signed_index(n, i, j).expect("basis bivector needs i != j");
        let mut coords = DVector::zeros(wedge_dim(n));
        coords[k] = s;
        Self { n, coords }
    }

    pub fn wedge(x: &DVector<f64>, y: &DVector<f64>) -> Result<Self> {
        check_dim(x.len(), y.len())?;
        let n = x.len();
        let coords = DVector::from_iterator(wedge_dim(n), wedge_pairs(n).into_iter().map(|(i, j)| x[i] * y[j] - x[j] * y[i]));
        Ok(Self { n, coords })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn entries(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (k, (i, j)) in wedge_pairs(self.n).into_iter().enumerate() {
            m[(i, j)] = self.coords[k];
            m[(j, i)] = -self.coords[k];
        }
        m
    }

    pub fn inner(&self, other: &Self) -> f64 {
        self.coords.dot(&other.coords)
    }

    pub fn complexify(&self) -> ComplexBivector {
        ComplexBivector { n: self.n, coords: linalg::to_complex(&self.coords) }
    }
}

/// Element of `so(n, C)`: complex antisymmetric (not skew-Hermitian).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexBivector {
    n: usize,
    #[serde(with = "complex_vec_serde")]
    coords: DVector<C64>,
}

impl ComplexBivector {
    pub fn zeros(n: usize) -> Self {
        Self { n, coords: DVector::from_element(wedge_dim(n), ZERO) }
    }

    pub fn from_coords(n: usize, coords: DVector<C64>) -> Result<Self> {
        check_dim(wedge_dim(n), coords.len())?;
        Ok(Self { n, coords })
    }

    /// Rejects matrices that are not antisymmetric to `tol::CONSTRAINT`.
    pub fn from_matrix(m: &DMatrix<C64>) -> Result<Self> {
        let n = m.nrows();
        check_dim(n, m.ncols())?;
        let scale = linalg::frob_norm_c(m).max(1.0);
        let asym = linalg::frob_norm_c(&(m + m.transpose()));
        if asym > tol::CONSTRAINT * scale {
            return reject(format!("matrix is not antisymmetric (|v + v^T| = {asym:e})"));
        }
        let coords = DVector::from_iterator(wedge_dim(n), wedge_pairs(n).into_iter().map(|(i, j)| (m[(i, j)] - m[(j, i)]) * 0.5));
        Ok(Self { n, coords })
    }

    pub fn basis(n: usize, i: usize, j: usize) -> Self {
        RealBivector::basis(n, i, j).complexify()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> &DVector<C64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<C64> {
        self.coords
    }

    pub fn entries(&self) -> DMatrix<C64> {
        coords_to_matrix(self.n, &self.coords)
    }

    /// `<v, w> = -tr(v conj(w)) / 2`, conjugate-linear in the second slot.
    pub fn herm_inner(&self, other: &Self) -> Result<C64> {
        check_dim(self.n, other.n)?;
        Ok(self.coords.iter().zip(other.coords.iter()).map(|(a, b)| a * b.conj()).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.coords.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { n: self.n, coords: self.coords.map(|z| z * s) }
    }

    pub fn normalized(&self) -> Result<Self> {
        let nrm = self.norm();
        if nrm < tol::CONSTRAINT {
            return Err(LabError::Diagnostic("cannot normalize a zero bivector".into()));
        }
        Ok(self.scale(C64::new(1.0 / nrm, 0.0)))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.n, other.n)?;
        Ok(Self { n: self.n, coords: &self.coords + &other.coords })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim(self.n, other.n)?;
        Ok(Self { n: self.n, coords: &self.coords - &other.coords })
    }

    /// `u + s w` for real `s`.
    pub fn axpy(&self, s: f64, w: &Self) -> Result<Self> {
        check_dim(self.n, w.n)?;
        Ok(Self { n: self.n, coords: &self.coords + w.coords.map(|z| z * s) })
    }

    pub fn conj(&self) -> Self {
        Self { n: self.n, coords: self.coords.map(|z| z.conj()) }
    }

    /// `tr(v^2)`; zero exactly on the quadric defining the second cone set.
    pub fn trace_sq(&self) -> C64 {
        self.coords.iter().map(|z| z * z).sum::<C64>() * -2.0
    }

    /// Singular values of the matrix form, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let svd = SVD::new(self.entries(), false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Numerical rank with the relative threshold `tol::RANK_REL`.
    pub fn rank(&self) -> usize {
        let s = self.singular_values();
        let top = s.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        s.iter().filter(|&&x| x > tol::RANK_REL * top).count()
    }

    pub fn power_norm(&self, k: u32) -> f64 {
        let m = self.entries();
        let mut p = m.clone();
        for _ in 1..k {
            p = &p * &m;
        }
        linalg::frob_norm_c(&p)
    }
}

pub(crate) fn coords_to_matrix(n: usize, coords: &DVector<C64>) -> DMatrix<C64> {
    let mut m = DMatrix::from_element(n, n, ZERO);
    for (k, (i, j)) in wedge_pairs(n).into_iter().enumerate() {
        m[(i, j)] = coords[k];
        m[(j, i)] = -coords[k];
    }
    m
}

pub(crate) fn matrix_to_coords(m: &DMatrix<C64>) -> DVector<C64> {
    let n = m.nrows();
    DVector::from_iterator(wedge_dim(n), wedge_pairs(n).into_iter().map(|(i, j)| m[(i, j)]))
}

/// Wedge coordinates of `x ^ y` without building a certificate.
pub(crate) fn wedge_coords(x: &DVector<C64>, y: &DVector<C64>) -> DVector<C64> {
    let n = x.len();
    DVector::from_iterator(wedge_dim(n), wedge_pairs(n).into_iter().map(|(i, j)| x[i] * y[j] - x[j] * y[i]))
}

/// Complex-bilinear (not Hermitian) extension of the Euclidean product.
pub fn bilinear(x: &DVector<C64>, y: &DVector<C64>) -> C64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

/// Factorization `v = zeta eta^T - eta zeta^T` with bilinear Gram data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank2Certificate {
    #[serde(with = "complex_vec_serde")]
    pub zeta: DVector<C64>,
    #[serde(with = "complex_vec_serde")]
    pub eta: DVector<C64>,
    #[serde(with = "complex_serde")]
    pub b_zz: C64,
    #[serde(with = "complex_serde")]
    pub b_ze: C64,
    #[serde(with = "complex_serde")]
    pub b_ee: C64,
}

impl Rank2Certificate {
    pub fn new(zeta: DVector<C64>, eta: DVector<C64>) -> Self {
        let b_zz = bilinear(&zeta, &zeta);
        let b_ze = bilinear(&zeta, &eta);
        let b_ee = bilinear(&eta, &eta);
        Self { zeta, eta, b_zz, b_ze, b_ee }
    }

    /// Square of the nonzero eigenvalue pair `+-lambda`.
    pub fn eigenvalue_sq(&self) -> C64 {
        self.b_ze * self.b_ze - self.b_zz * self.b_ee
    }

    pub fn bivector(&self) -> ComplexBivector {
        ComplexBivector { n: self.zeta.len(), coords: wedge_coords(&self.zeta, &self.eta) }
    }
}

#[derive(Debug, Clone)]
pub struct Wedge {
    pub bivector: ComplexBivector,
    pub certificate: Rank2Certificate,
}

pub fn wedge(x: &DVector<C64>, y: &DVector<C64>) -> Result<Wedge> {
    check_dim(x.len(), y.len())?;
    if x.len() < 2 {
        return reject("wedge needs n >= 2");
    }
    let certificate = Rank2Certificate::new(x.clone(), y.clone());
    Ok(Wedge { bivector: certificate.bivector(), certificate })
}

pub fn herm_inner(v: &ComplexBivector, w: &ComplexBivector) -> Result<C64> {
    v.herm_inner(w)
}

/// Moduli of the eigenvalues of the complex matrix `v`, ascending, with
/// multiplicity.
pub fn eigen_norms(v: &ComplexBivector) -> Result<Vec<f64>> {
    let m = v.entries();
    let scale = linalg::frob_norm_c(&m);
    if scale == 0.0 {
        return Ok(vec![0.0; v.n]);
    }
    let schur =
        Schur::try_new(m / C64::new(scale, 0.0), 1e-15, 10_000).ok_or_else(|| LabError::Diagnostic("Schur iteration did not converge".into()))?;
    let eig = schur.eigenvalues().ok_or_else(|| LabError::Diagnostic("eigenvalues unavailable from Schur form".into()))?;
    let mut out: Vec<f64> = eig.iter().map(|z| z.norm() * scale).collect();
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

/// Splitting `v = u + w` of a rank-two bivector such that every `u + s w`
/// (real `s`) is rank two with the same eigenvalue moduli `alpha = |u|`.
#[derive(Debug, Clone)]
pub struct Rank2Split {
    pub u: ComplexBivector,
    pub w: ComplexBivector,
    pub alpha: f64,
}

pub fn decompose_rank2(v: &ComplexBivector) -> Result<Rank2Split> {
    let n = v.n;
    let m = v.entries();
    let svd = SVD::new(m.clone(), true, false);
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let top = s[order[0]];
    let rank = order.iter().filter(|&&k| s[k] > tol::RANK_REL * top).count();
    if top == 0.0 || rank != 2 {
        return reject(format!("decompose_rank2 needs numerical rank 2, got {rank}"));
    }
    let uu = svd.u.as_ref().ok_or_else(|| LabError::Diagnostic("SVD without U".into()))?;
    let q = DMatrix::from_fn(n, 2, |i, j| uu[(i, order[j])]);
    // v maps its column space to itself; restrict to it.
    let r = q.adjoint() * &m * &q;
    let (a, b, c, d) = (r[(0, 0)], r[(0, 1)], r[(1, 0)], r[(1, 1)]);
    let half = (a - d) * 0.5;
    let root = (half * half + b * c).sqrt();
    let mid = (a + d) * 0.5;
    let (p, mneg) = (mid + root, mid - root);
    // Deterministic choice: larger real part, then larger imaginary part.
    let mu = if (p.re, p.im) >= (mneg.re, mneg.im) { p } else { mneg };
    let alpha = mu.norm();
    if alpha <= tol::RANK_REL * top {
        return Ok(Rank2Split { u: v.clone(), w: ComplexBivector::zeros(n), alpha: 0.0 });
    }
    let y1 = DVector::from_vec(vec![b, mu - a]);
    let y2 = DVector::from_vec(vec![mu - d, c]);
    let y = if y1.norm() >= y2.norm() { y1 } else { y2 };
    let x = &q * y;
    let re = x.map(|z| z.re);
    let im = x.map(|z| z.im);
    let e1 = re.normalize();
    let f = &im - &e1 * e1.dot(&im);
    if f.norm() < 1e-6 * im.norm().max(re.norm()) {
        return Err(LabError::Diagnostic("eigenvector is not isotropic; no adapted plane".into()));
    }
    let e2 = f.normalize();
    let proj = linalg::to_complex(&e1) * linalg::to_complex(&e1).transpose() + linalg::to_complex(&e2) * linalg::to_complex(&e2).transpose();
    let um = &proj * &m * &proj;
    let u = ComplexBivector { n, coords: matrix_to_coords(&um) };
    let w = v.sub(&u)?;
    let dev = (u.norm() - alpha).abs();
    if dev > 1e-8 * top.max(alpha) {
        return Err(LabError::Diagnostic(format!("adapted block has |u| off by {dev:e}")));
    }
    Ok(Rank2Split { u, w, alpha })
}

/// Matrix of `w -> v w - w v` in the wedge basis.
pub fn ad_operator(v: &ComplexBivector) -> DMatrix<C64> {
    let n = v.n;
    let dim = wedge_dim(n);
    let vm = v.entries();
    let mut out = DMatrix::from_element(dim, dim, ZERO);
    for (b, (i, j)) in wedge_pairs(n).into_iter().enumerate() {
        let eb = ComplexBivector::basis(n, i, j).entries();
        let br = &vm * &eb - &eb * &vm;
        out.set_column(b, &matrix_to_coords(&br));
    }
    out
}

/// Whether `v` lies in the cone set of `kind` to the given residual.
pub fn in_set(kind: ConeKind, v: &ComplexBivector, tol_res: f64) -> bool {
    let nrm = v.norm().max(f64::MIN_POSITIVE);
    match kind {
        ConeKind::S1 => true,
        ConeKind::S2 => v.trace_sq().norm() <= tol_res * nrm * nrm,
        ConeKind::S5 => v.rank() <= 2,
        ConeKind::S4 => v.rank() <= 2 && v.power_norm(3) <= tol_res * nrm.powi(3),
        ConeKind::S3 => v.rank() <= 2 && v.power_norm(2) <= tol_res * nrm * nrm,
        ConeKind::Ct => false,
    }
}

/// Unit-norm random element of a cone set drawn from `seed`.
pub fn sample_set(kind: ConeKind, n: usize, seed: u64) -> Result<ComplexBivector> {
    let mut r = rng::stream(seed, 0);
    sample_set_with(kind, n, &mut r)
}

pub fn sample_set_with(kind: ConeKind, n: usize, r: &mut Rng) -> Result<ComplexBivector> {
    if n < 2 {
        return reject("bivectors need n >= 2");
    }
    if matches!(kind, ConeKind::S3 | ConeKind::S4) && n < 4 {
        return reject("isotropic cone sets need n >= 4");
    }
    if matches!(kind, ConeKind::Ct) {
        return reject("the time-indexed family has no unit sampler");
    }
    for _ in 0..32 {
        let v = draw_raw(kind, n, r);
        if v.norm() > 1e-6 {
            return v.normalized();
        }
    }
    Err(LabError::Diagnostic("repeated degenerate draws".into()))
}

fn draw_raw(kind: ConeKind, n: usize, r: &mut Rng) -> ComplexBivector {
    let dim = wedge_dim(n);
    let phase = {
        let t = 2.0 * std::f64::consts::PI * rng::uniform(r);
        C64::new(t.cos(), t.sin())
    };
    match kind {
        ConeKind::S1 | ConeKind::Ct => ComplexBivector { n, coords: rng::complex_vec(r, dim) },
        ConeKind::S2 => {
            let a = rng::complex_vec(r, dim);
            let b = rng::complex_vec(r, dim);
            // q(a + z b) = 0 with q the bilinear square sum.
            let qa = bilinear(&a, &a);
            let qab = bilinear(&a, &b);
            let qb = bilinear(&b, &b);
            let disc = (qab * qab - qa * qb).sqrt();
            let z = (-qab + disc) / qb;
            let coords = &a + b.map(|x| x * z);
            ComplexBivector { n, coords }
        }
        ConeKind::S5 => {
            let z = rng::complex_vec(r, n);
            let e = rng::complex_vec(r, n);
            ComplexBivector { n, coords: wedge_coords(&z, &e) }
        }
        ConeKind::S4 => {
            let fr = linalg::random_frame(r, n, 2);
            let zeta = isotropic(&fr, 0, 1);
            let mut eta = rng::complex_vec(r, n);
            for k in 0..2 {
                let col = linalg::to_complex(&fr.column(k).into_owned());
                let c = bilinear(&col, &eta);
                eta -= col * c;
            }
            ComplexBivector { n, coords: wedge_coords(&zeta, &eta).map(|x| x * phase) }
        }
        ConeKind::S3 => {
            let fr = linalg::random_frame(r, n, 4);
            let zeta = isotropic(&fr, 0, 1);
            let eta = isotropic(&fr, 2, 3);
            ComplexBivector { n, coords: wedge_coords(&zeta, &eta).map(|x| x * phase) }
        }
    }
}

/// `e_a + i e_b` from two columns of a real frame.
pub(crate) fn isotropic(frame: &DMatrix<f64>, a: usize, b: usize) -> DVector<C64> {
    DVector::from_fn(frame.nrows(), |i, _| C64::new(frame[(i, a)], frame[(i, b)]))
}

pub(crate) mod complex_serde {
    use super::C64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &C64, s: S) -> Result<S::Ok, S::Error> {
        [z.re, z.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<C64, D::Error> {
        let [a, b] = <[f64; 2]>::deserialize(d)?;
        Ok(C64::new(a, b))
    }
}

pub(crate) mod complex_vec_serde {
    use super::C64;
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<C64>, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = v.iter().map(|z| [z.re, z.im]).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<C64>, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        Ok(DVector::from_iterator(pairs.len(), pairs.into_iter().map(|[a, b]| C64::new(a, b))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn e(n: usize, k: usize) -> DVector<C64> {
        DVector::from_fn(n, |i, _| if i == k { C64::new(1.0, 0.0) } else { ZERO })
    }

    #[test]
    fn index_is_lexicographic() {
        let pairs = wedge_pairs(5);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!(wedge_index(5, i, j), k);
        }
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(pairs[4], (1, 2));
    }

    #[test]
    fn wedge_of_basis_vectors() {
        let w = wedge(&e(4, 0), &e(4, 1)).unwrap().bivector;
        let m = w.entries();
        assert_eq!(m[(0, 1)], C64::new(1.0, 0.0));
        assert_eq!(m[(1, 0)], C64::new(-1.0, 0.0));
        assert_abs_diff_eq!(linalg::frob_norm_c(&m), 2f64.sqrt());
        assert_abs_diff_eq!(w.norm(), 1.0);
        // -tr(v conj v)/2
        let tr: C64 = (&m * m.map(|z| z.conj())).trace();
        assert_abs_diff_eq!(-tr.re / 2.0, 1.0);
    }

    #[test]
    fn wedge_with_itself_vanishes() {
        let mut r = rng::stream(1, 0);
        let x = rng::complex_vec(&mut r, 5);
        assert!(wedge(&x, &x).unwrap().bivector.norm() == 0.0);
    }

    #[test]
    fn wedge_rejects_mismatch() {
        assert!(wedge(&e(3, 0), &e(4, 1)).is_err());
    }

    #[test]
    fn hermitian_inner_conventions() {
        let a = ComplexBivector::basis(4, 0, 1);
        let b = ComplexBivector::basis(4, 0, 2);
        assert_eq!(a.herm_inner(&a).unwrap(), C64::new(1.0, 0.0));
        assert_eq!(a.herm_inner(&b).unwrap(), ZERO);
        let mut r = rng::stream(2, 0);
        let v = ComplexBivector::from_coords(4, rng::complex_vec(&mut r, 6)).unwrap();
        let iv = v.scale(C64::new(0.0, 1.0));
        let got = iv.herm_inner(&v).unwrap();
        assert_abs_diff_eq!(got.re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(got.im, v.norm_sq(), epsilon = 1e-12);
    }

    #[test]
    fn inner_matches_trace_formula() {
        let mut r = rng::stream(5, 0);
        let v = ComplexBivector::from_coords(5, rng::complex_vec(&mut r, 10)).unwrap();
        let w = ComplexBivector::from_coords(5, rng::complex_vec(&mut r, 10)).unwrap();
        let tr: C64 = (v.entries() * w.entries().map(|z| z.conj())).trace() * -0.5;
        let got = v.herm_inner(&w).unwrap();
        assert!((tr - got).norm() < 1e-12);
    }

    #[test]
    fn eigen_norms_examples() {
        let v = ComplexBivector::basis(4, 0, 1);
        let en = eigen_norms(&v).unwrap();
        for (a, b) in en.iter().zip([0.0, 0.0, 1.0, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let iv = v.scale(C64::new(0.0, 1.0));
        let en = eigen_norms(&iv).unwrap();
        assert_abs_diff_eq!(en[3], 1.0, epsilon = 1e-12);
        let i = C64::new(0.0, 1.0);
        let z = &e(4, 0) + e(4, 2) * i;
        let h = &e(4, 1) + e(4, 3) * i;
        let nil = wedge(&z, &h).unwrap().bivector;
        assert!(eigen_norms(&nil).unwrap().iter().all(|&x| x < 1e-7));
    }

    #[test]
    fn certificate_eigenvalue_formula() {
        let mut r = rng::stream(7, 0);
        for n in 4..=8 {
            let z = rng::complex_vec(&mut r, n);
            let h = rng::complex_vec(&mut r, n);
            let wd = wedge(&z, &h).unwrap();
            let lam = wd.certificate.eigenvalue_sq().sqrt().norm();
            let en = eigen_norms(&wd.bivector).unwrap();
            assert!(en[..n - 2].iter().all(|&x| x < 1e-6 * lam.max(1.0)));
            assert!((en[n - 1] - lam).abs() < 1e-10 * lam.max(1.0));
            assert!((en[n - 2] - lam).abs() < 1e-10 * lam.max(1.0));
        }
    }

    #[test]
    fn decompose_nilpotent_and_scaled_rotation() {
        let i = C64::new(0.0, 1.0);
        let z = &e(4, 0) + e(4, 2) * i;
        let h = &e(4, 1) + e(4, 3) * i;
        let nil = wedge(&z, &h).unwrap().bivector;
        let sp = decompose_rank2(&nil).unwrap();
        assert_eq!(sp.alpha, 0.0);
        assert_eq!(sp.u, nil);
        let rot = ComplexBivector::basis(4, 0, 1).scale(i);
        let sp = decompose_rank2(&rot).unwrap();
        assert_abs_diff_eq!(sp.alpha, 1.0, epsilon = 1e-12);
        assert!(sp.w.norm() < 1e-12);
    }

    #[test]
    fn decompose_worked_example() {
        let i = C64::new(0.0, 1.0);
        let one = C64::new(1.0, 0.0);
        let v = ComplexBivector::basis(4, 0, 1)
            .scale(i)
            .add(&ComplexBivector::basis(4, 0, 2).scale(one))
            .unwrap()
            .add(&ComplexBivector::basis(4, 1, 2).scale(-i))
            .unwrap();
        let sp = decompose_rank2(&v).unwrap();
        assert_abs_diff_eq!(sp.alpha, 1.0, epsilon = 1e-12);
        let u0 = ComplexBivector::basis(4, 0, 1).scale(i);
        assert!(sp.u.sub(&u0).unwrap().norm() < 1e-10);
        for s in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let x = sp.u.axpy(s, &sp.w).unwrap();
            let en = eigen_norms(&x).unwrap();
            assert!(en[0] < 1e-7 && en[1] < 1e-7);
            assert_abs_diff_eq!(en[2], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(en[3], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn decompose_rejects_rank_four() {
        let v = ComplexBivector::basis(4, 0, 1).add(&ComplexBivector::basis(4, 2, 3)).unwrap();
        assert!(matches!(decompose_rank2(&v), Err(LabError::Rejected(_))));
    }

    #[test]
    fn ad_examples() {
        let v = ComplexBivector::basis(3, 0, 1);
        let ad = ad_operator(&v);
        let self_img = &ad * v.coords();
        assert!(self_img.norm() < 1e-15);
        let img = &ad * ComplexBivector::basis(3, 1, 2).coords();
        assert_eq!(img[wedge_index(3, 0, 2)], C64::new(1.0, 0.0));
        let img = &ad * ComplexBivector::basis(3, 0, 2).coords();
        assert_eq!(img[wedge_index(3, 1, 2)], C64::new(-1.0, 0.0));
        let mut r = rng::stream(9, 0);
        let real = RealBivector::from_coords(5, rng::normal_vec(&mut r, 10)).unwrap();
        let adr = ad_operator(&real.complexify());
        assert!(linalg::frob_norm_c(&(&adr + adr.transpose())) < 1e-12);
    }

    #[test]
    fn samplers_land_in_their_sets() {
        for n in 4..=8 {
            for seed in 0..20 {
                let v3 = sample_set(ConeKind::S3, n, seed).unwrap();
                assert!(v3.power_norm(2) < 1e-10);
                assert_eq!(v3.rank(), 2);
                assert!(in_set(ConeKind::S4, &v3, 1e-10) && in_set(ConeKind::S5, &v3, 1e-10));
                let v4 = sample_set(ConeKind::S4, n, seed).unwrap();
                assert!(v4.power_norm(3) < 1e-10);
                assert!(in_set(ConeKind::S5, &v4, 1e-10));
                assert!(in_set(ConeKind::S2, &v4, 1e-10));
                let v2 = sample_set(ConeKind::S2, n, seed).unwrap();
                assert!(v2.trace_sq().norm() < 1e-12);
                assert_abs_diff_eq!(v2.norm(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        for kind in [ConeKind::S1, ConeKind::S2, ConeKind::S3, ConeKind::S4, ConeKind::S5] {
            assert_eq!(sample_set(kind, 6, 11).unwrap(), sample_set(kind, 6, 11).unwrap());
        }
        assert!(sample_set(ConeKind::S3, 3, 0).is_err());
    }
}
