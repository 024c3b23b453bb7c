//! Algebraic curvature operators on `Lambda^2 R^n`.
//!
//! An operator is a symmetric `N x N` form in the wedge basis that satisfies
//! the first Bianchi identity. The four-index tensor is
//! `R_ijkl = form[(ij), (kl)]` with the sign of each antisymmetric pair.
//! Every conversion between the two pictures goes through [`to_tensor4`] and
//! [`from_tensor4`].

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bivector::{signed_index, wedge_dim, wedge_index, wedge_pairs, ComplexBivector, C64};
use crate::error::{check_dim, reject, Result};
use crate::rng::{self, Rng};
use crate::tol;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureOperator {
    n: usize,
    form: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTwoTensor {
    n: usize,
    matrix: DMatrix<f64>,
}

impl SymmetricTwoTensor {
    /// Symmetric part of `m`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        check_dim(m.nrows(), m.ncols())?;
        Ok(Self { n: m.nrows(), matrix: (m + m.transpose()) * 0.5 })
    }

    pub fn identity(n: usize) -> Self {
        Self { n, matrix: DMatrix::identity(n, n) }
    }

    /// Orthogonal projection onto `span(e_1, ..., e_k)`.
    pub fn coordinate_projection(n: usize, k: usize) -> Self {
        Self { n, matrix: DMatrix::from_fn(n, n, |i, j| if i == j && i < k { 1.0 } else { 0.0 }) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        crate::linalg::sym_eigen_sorted(&self.matrix).0.iter().copied().collect()
    }
}

/// Dense `(0,4)` tensor, row-major in `(i, j, k, l)`.
pub fn to_tensor4(n: usize, form: &DMatrix<f64>) -> Vec<f64> {
    let mut t = vec![0.0; n * n * n * n];
    for i in 0..n {
        for j in 0..n {
            let Some((a, sa)) = signed_index(n, i, j) else { continue };
            for k in 0..n {
                for l in 0..n {
                    let Some((b, sb)) = signed_index(n, k, l) else { continue };
                    t[((i * n + j) * n + k) * n + l] = sa * sb * form[(a, b)];
                }
            }
        }
    }
    t
}

pub fn from_tensor4(n: usize, t: &[f64]) -> DMatrix<f64> {
    let pairs = wedge_pairs(n);
    DMatrix::from_fn(pairs.len(), pairs.len(), |a, b| {
        let (i, j) = pairs[a];
        let (k, l) = pairs[b];
        t[((i * n + j) * n + k) * n + l]
    })
}

fn t4(t: &[f64], n: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
    t[((i * n + j) * n + k) * n + l]
}

/// Cyclic Bianchi sum `(R_ijkl + R_iklj + R_iljk) / 3` as a form; this is the
/// orthogonal projection onto the `Lambda^4` summand.
fn bianchi_part(n: usize, form: &DMatrix<f64>) -> DMatrix<f64> {
    let t = to_tensor4(n, form);
    let pairs = wedge_pairs(n);
    DMatrix::from_fn(pairs.len(), pairs.len(), |a, b| {
        let (i, j) = pairs[a];
        let (k, l) = pairs[b];
        (t4(&t, n, i, j, k, l) + t4(&t, n, i, k, l, j) + t4(&t, n, i, l, j, k)) / 3.0
    })
}

fn dim_to_n(dim: usize) -> Option<usize> {
    (2..=64).find(|&n| wedge_dim(n) == dim)
}

/// Orthogonal projection of a symmetric form onto the Bianchi subspace.
pub fn bianchi_project(form: &DMatrix<f64>) -> Result<CurvatureOperator> {
    check_dim(form.nrows(), form.ncols())?;
    let Some(n) = dim_to_n(form.nrows()) else {
        return reject(format!("{} is not of the form n(n-1)/2", form.nrows()));
    };
    let sym = (form + form.transpose()) * 0.5;
    let proj = &sym - bianchi_part(n, &sym);
    Ok(CurvatureOperator { n, form: (&proj + proj.transpose()) * 0.5 })
}

/// Matrices of `ad(e_a)` in the wedge basis as sparse triplets `(row, col, value)`.
type Triplets = Vec<(usize, usize, f64)>;

fn ad_structure(n: usize) -> &'static [Triplets] {
    static CACHE: [OnceLock<Vec<Triplets>>; 17] = [const { OnceLock::new() }; 17];
    assert!(n <= 16, "structure constants cached up to n = 16");
    CACHE[n].get_or_init(|| {
        let pairs = wedge_pairs(n);
        let mut out = vec![Vec::new(); pairs.len()];
        // [e_i^e_j, e_k^e_l] = d_jk e_i^e_l - d_ik e_j^e_l - d_jl e_i^e_k + d_il e_j^e_k
        for (a, &(i, j)) in pairs.iter().enumerate() {
            for (q, &(k, l)) in pairs.iter().enumerate() {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                let mut push = |x: usize, y: usize, s: f64| {
                    if let Some((p, sg)) = signed_index(n, x, y) {
                        acc.push((p, s * sg));
                    }
                };
                if j == k {
                    push(i, l, 1.0);
                }
                if i == k {
                    push(j, l, -1.0);
                }
                if j == l {
                    push(i, k, -1.0);
                }
                if i == l {
                    push(j, k, 1.0);
                }
                for (p, s) in acc {
                    out[a].push((p, q, s));
                }
            }
        }
        out
    })
}

impl CurvatureOperator {
    pub fn zero(n: usize) -> Self {
        let d = wedge_dim(n);
        Self { n, form: DMatrix::zeros(d, d) }
    }

    /// Identity on the wedge basis: `I_ijkl = d_ik d_jl - d_il d_jk`.
    pub fn identity(n: usize) -> Self {
        let d = wedge_dim(n);
        Self { n, form: DMatrix::identity(d, d) }
    }

    /// Accepts a form already in the Bianchi subspace (checked to `tol::BIANCHI`).
    pub fn from_form(n: usize, form: DMatrix<f64>) -> Result<Self> {
        check_dim(wedge_dim(n), form.nrows())?;
        check_dim(wedge_dim(n), form.ncols())?;
        let form = (&form + form.transpose()) * 0.5;
        let op = Self { n, form };
        let res = op.bianchi_residual();
        if res > tol::BIANCHI * op.norm().max(1.0) {
            return reject(format!("form violates the first Bianchi identity by {res:e}"));
        }
        Ok(op)
    }

    /// Constructs without the Bianchi check; callers guarantee membership.
    pub(crate) fn from_form_unchecked(n: usize, form: DMatrix<f64>) -> Self {
        Self { n, form }
    }

    /// Standard-normal symmetric form projected onto the Bianchi subspace.
    pub fn random(n: usize, r: &mut Rng) -> Self {
        let d = wedge_dim(n);
        let a = rng::normal_matrix(r, d, d);
        bianchi_project(&((&a + a.transpose()) * 0.5)).expect("valid dimension")
    }

    pub fn random_psd(n: usize, r: &mut Rng) -> Self {
        // Bianchi projection of a PSD form need not stay PSD; shift by the
        // smallest eigenvalue afterwards.
        let x = Self::random(n, r);
        let lo = x.min_eigenvalue();
        x.shifted(-lo + 0.1 * rng::uniform(r))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.form.nrows()
    }

    pub fn form(&self) -> &DMatrix<f64> {
        &self.form
    }

    pub fn tensor4(&self) -> Vec<f64> {
        to_tensor4(self.n, &self.form)
    }

    /// `R_ijkl` for arbitrary indices.
    pub fn component(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        match (signed_index(self.n, i, j), signed_index(self.n, k, l)) {
            (Some((a, sa)), Some((b, sb))) => sa * sb * self.form[(a, b)],
            _ => 0.0,
        }
    }

    /// Largest entry of the cyclic Bianchi sum.
    pub fn bianchi_residual(&self) -> f64 {
        let t = self.tensor4();
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let s = t4(&t, n, i, j, k, l) + t4(&t, n, i, k, l, j) + t4(&t, n, i, l, j, k);
                        worst = worst.max(s.abs());
                    }
                }
            }
        }
        worst
    }

    pub fn norm(&self) -> f64 {
        self.form.norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        crate::linalg::sym_eigen_sorted(&self.form).0[0]
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.n, other.n)?;
        Ok(Self { n: self.n, form: &self.form + &other.form })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim(self.n, other.n)?;
        Ok(Self { n: self.n, form: &self.form - &other.form })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { n: self.n, form: &self.form * s }
    }

    /// `Rm + c I`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut form = self.form.clone();
        for k in 0..form.nrows() {
            form[(k, k)] += c;
        }
        Self { n: self.n, form }
    }

    /// `Rm(v, conj v)` of the complex-bilinear extension.
    pub fn evaluate(&self, v: &ComplexBivector) -> Result<f64> {
        check_dim(self.n, v.n())?;
        Ok(self.evaluate_coords(v.coords()))
    }

    pub(crate) fn evaluate_coords(&self, c: &DVector<C64>) -> f64 {
        let re = c.map(|z| z.re);
        let im = c.map(|z| z.im);
        re.dot(&(&self.form * &re)) + im.dot(&(&self.form * &im))
    }

    /// `Ric_ik = sum_j R_ijkj`.
    pub fn ricci(&self) -> SymmetricTwoTensor {
        let n = self.n;
        let mut ric = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in i..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += self.component(i, j, k, j);
                }
                ric[(i, k)] = s;
                ric[(k, i)] = s;
            }
        }
        SymmetricTwoTensor { n, matrix: ric }
    }

    pub fn scalar(&self) -> f64 {
        self.ricci().trace()
    }

    /// Matrix square of the form.
    pub fn square(&self) -> Self {
        Self { n: self.n, form: &self.form * &self.form }
    }

    /// `Rm^#(a, b) = -1/2 tr(ad_a Rm ad_b Rm)` in the wedge basis.
    pub fn sharp(&self) -> Self {
        let n = self.n;
        let d = self.dim();
        if n < 3 {
            return Self::zero(n);
        }
        let ad = ad_structure(n);
        let f = &self.form;
        let mut out = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let mut s = 0.0;
                for &(p, q, va) in &ad[a] {
                    for &(r, t, vb) in &ad[b] {
                        s += va * vb * f[(q, r)] * f[(t, p)];
                    }
                }
                out[(a, b)] = -0.5 * s;
                out[(b, a)] = -0.5 * s;
            }
        }
        Self { n, form: out }
    }

    /// Reaction term `Q(Rm) = Rm^2 + Rm^#`.
    pub fn reaction_q(&self) -> Self {
        let sq = &self.form * &self.form;
        let sh = self.sharp();
        Self { n: self.n, form: sq + sh.form }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&OperatorDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: OperatorDoc = serde_json::from_str(s)?;
        doc.try_into()
    }
}

/// Kulkarni-Nomizu product
/// `(A . B)_ijkl = A_ik B_jl + A_jl B_ik - A_il B_jk - A_jk B_il`.
pub fn kn_product(a: &SymmetricTwoTensor, b: &SymmetricTwoTensor) -> Result<CurvatureOperator> {
    check_dim(a.n, b.n)?;
    let n = a.n;
    let (am, bm) = (&a.matrix, &b.matrix);
    let pairs = wedge_pairs(n);
    let form = DMatrix::from_fn(pairs.len(), pairs.len(), |x, y| {
        let (i, j) = pairs[x];
        let (k, l) = pairs[y];
        am[(i, k)] * bm[(j, l)] + am[(j, l)] * bm[(i, k)] - am[(i, l)] * bm[(j, k)] - am[(j, k)] * bm[(i, l)]
    });
    Ok(CurvatureOperator { n, form })
}

pub fn bianchi_project_op(op: &CurvatureOperator) -> CurvatureOperator {
    bianchi_project(&op.form).expect("operator dimension is valid")
}

/// `-tr(A v conj(v))` for a symmetric `A`; equals `(A . id)(v, conj v)`.
pub fn trace_triple(a: &SymmetricTwoTensor, v: &ComplexBivector) -> C64 {
    let vm = v.entries();
    let am = a.matrix.map(|x| C64::new(x, 0.0));
    -(am * &vm * vm.map(|z| z.conj())).trace()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDoc {
    pub n: usize,
    pub basis: String,
    pub form: Vec<Vec<f64>>,
}

impl From<&CurvatureOperator> for OperatorDoc {
    fn from(op: &CurvatureOperator) -> Self {
        let d = op.dim();
        Self { n: op.n, basis: "lex".into(), form: (0..d).map(|i| (0..d).map(|j| op.form[(i, j)]).collect()).collect() }
    }
}

impl TryFrom<OperatorDoc> for CurvatureOperator {
    type Error = crate::error::LabError;

    fn try_from(doc: OperatorDoc) -> Result<Self> {
        if doc.basis != "lex" {
            return reject(format!("unknown basis ordering {:?}", doc.basis));
        }
        let d = wedge_dim(doc.n);
        check_dim(d, doc.form.len())?;
        for row in &doc.form {
            check_dim(d, row.len())?;
        }
        let form = DMatrix::from_fn(d, d, |i, j| doc.form[i][j]);
        if form != form.transpose() {
            return reject("operator form is not symmetric");
        }
        let op = CurvatureOperator { n: doc.n, form };
        let res = op.bianchi_residual();
        if res > tol::BIANCHI * op.norm().max(1.0) {
            return reject(format!("form violates the first Bianchi identity by {res:e}"));
        }
        Ok(op)
    }
}

/// Sectional curvature of the coordinate plane `e_i ^ e_j`.
pub fn sectional(op: &CurvatureOperator, i: usize, j: usize) -> f64 {
    let k = wedge_index(op.n, i.min(j), i.max(j));
    op.form[(k, k)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rand_op(n: usize, seed: u64) -> CurvatureOperator {
        CurvatureOperator::random(n, &mut rng::stream(seed, 0))
    }

    #[test]
    fn tensor_round_trip_and_symmetries() {
        for n in 3..=6 {
            let op = rand_op(n, n as u64);
            let t = op.tensor4();
            assert_eq!(from_tensor4(n, &t), *op.form());
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let x = t4(&t, n, i, j, k, l);
                            assert_eq!(x, -t4(&t, n, j, i, k, l));
                            assert_eq!(x, -t4(&t, n, i, j, l, k));
                            assert_eq!(x, t4(&t, n, k, l, i, j));
                        }
                    }
                }
            }
            assert!(op.bianchi_residual() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let id = CurvatureOperator::identity(5);
        assert_eq!(bianchi_project(id.form()).unwrap().form(), id.form());
        let mut r = rng::stream(1, 0);
        let a = rng::normal_matrix(&mut r, 10, 10);
        let x = bianchi_project(&a).unwrap();
        let xx = bianchi_project(x.form()).unwrap();
        assert!((x.form() - xx.form()).norm() < 1e-13);
        // Lambda^4 of R^3 vanishes.
        let b = rng::normal_matrix(&mut r, 3, 3);
        let b = (&b + b.transpose()) * 0.5;
        assert!((bianchi_project(&b).unwrap().form() - &b).norm() < 1e-15);
        assert!(CurvatureOperator::from_form(5, (&a + a.transpose()) * 0.5).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let mut r = rng::stream(2, 0);
        let id = CurvatureOperator::identity(5);
        let v = ComplexBivector::from_coords(5, rng::complex_vec(&mut r, 10)).unwrap();
        assert_abs_diff_eq!(id.evaluate(&v).unwrap(), v.norm_sq(), epsilon = 1e-12);
        let op = rand_op(5, 3);
        let e = ComplexBivector::basis(5, 1, 3);
        assert_abs_diff_eq!(op.evaluate(&e).unwrap(), op.component(1, 3, 1, 3), epsilon = 1e-14);
        let lam = C64::new(0.3, -1.2);
        let lhs = op.evaluate(&v.scale(lam)).unwrap();
        assert_abs_diff_eq!(lhs, lam.norm_sqr() * op.evaluate(&v).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn ricci_and_scalar_of_identity() {
        for n in 2..=7 {
            let id = CurvatureOperator::identity(n);
            let ric = id.ricci();
            assert!((ric.matrix() - DMatrix::identity(n, n) * (n as f64 - 1.0)).norm() < 1e-14);
            assert_abs_diff_eq!(id.scalar(), (n * (n - 1)) as f64);
            assert_eq!(CurvatureOperator::zero(n).ricci().matrix().norm(), 0.0);
        }
    }

    #[test]
    fn kulkarni_nomizu_examples() {
        for n in 3..=6 {
            let id = SymmetricTwoTensor::identity(n);
            let kk = kn_product(&id, &id).unwrap();
            assert_eq!(*kk.form(), CurvatureOperator::identity(n).scale(2.0).form().clone());
            let p = SymmetricTwoTensor::coordinate_projection(n, 2);
            let pp = kn_product(&p, &p).unwrap();
            let k = wedge_index(n, 0, 1);
            for a in 0..pp.dim() {
                for b in 0..pp.dim() {
                    let want = if a == k && b == k { 2.0 } else { 0.0 };
                    assert_eq!(pp.form()[(a, b)], want);
                }
            }
        }
        let mut r = rng::stream(4, 0);
        for n in 3..=6 {
            let a = SymmetricTwoTensor::from_matrix(&rng::normal_matrix(&mut r, n, n)).unwrap();
            let b = SymmetricTwoTensor::from_matrix(&rng::normal_matrix(&mut r, n, n)).unwrap();
            let ab = kn_product(&a, &b).unwrap();
            assert!(ab.bianchi_residual() < 1e-12);
            assert!((ab.form() - kn_product(&b, &a).unwrap().form()).norm() < 1e-13);
        }
    }

    #[test]
    fn sharp_examples() {
        for n in 2..=8 {
            let s = CurvatureOperator::identity(n).sharp();
            let want = CurvatureOperator::identity(n).scale(n as f64 - 2.0);
            assert!((s.form() - want.form()).norm() < 1e-13, "n = {n}");
            assert_eq!(CurvatureOperator::zero(n).sharp().norm(), 0.0);
        }
        let k = CurvatureOperator::identity(2).scale(0.7);
        assert_eq!(k.sharp().norm(), 0.0);
        assert_abs_diff_eq!(k.reaction_q().form()[(0, 0)], 0.49, epsilon = 1e-15);
    }

    #[test]
    fn sharp_matches_dense_trace() {
        let n = 4;
        let op = rand_op(n, 9);
        let d = op.dim();
        let fc = op.form().map(|x| C64::new(x, 0.0));
        let ads: Vec<DMatrix<C64>> = (0..d)
            .map(|a| {
                let (i, j) = wedge_pairs(n)[a];
                crate::bivector::ad_operator(&ComplexBivector::basis(n, i, j))
            })
            .collect();
        let s = op.sharp();
        for a in 0..d {
            for b in 0..d {
                let tr = (&ads[a] * &fc * &ads[b] * &fc).trace() * -0.5;
                assert_abs_diff_eq!(tr.re, s.form()[(a, b)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reaction_of_multiple_of_identity() {
        for n in 3..=8 {
            let l = 0.37;
            let q = CurvatureOperator::identity(n).scale(l).reaction_q();
            let want = CurvatureOperator::identity(n).scale((n as f64 - 1.0) * l * l);
            assert!((q.form() - want.form()).norm() < 1e-13);
        }
    }

    #[test]
    fn reaction_shift_identity() {
        for n in 3..=8 {
            let op = rand_op(n, 100 + n as u64);
            let l = -1.3;
            let lhs = op.shifted(l).reaction_q().sub(&op.reaction_q()).unwrap();
            let kn = kn_product(&op.ricci(), &SymmetricTwoTensor::identity(n)).unwrap();
            let rhs = kn.scale(l).shifted((n as f64 - 1.0) * l * l);
            let rel = (lhs.form() - rhs.form()).norm() / lhs.norm();
            assert!(rel < 1e-12, "n = {n}: {rel:e}");
        }
    }

    #[test]
    fn kn_trace_identity() {
        let mut r = rng::stream(21, 0);
        for n in 3..=7 {
            let a = SymmetricTwoTensor::from_matrix(&rng::normal_matrix(&mut r, n, n)).unwrap();
            let kn = kn_product(&a, &SymmetricTwoTensor::identity(n)).unwrap();
            let v = ComplexBivector::from_coords(n, rng::complex_vec(&mut r, wedge_dim(n))).unwrap();
            let t = trace_triple(&a, &v);
            assert!(t.im.abs() < 1e-12);
            assert_abs_diff_eq!(kn.evaluate(&v).unwrap(), t.re, epsilon = 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let op = rand_op(5, 12);
        let s = op.to_json().unwrap();
        assert!(s.contains("\"basis\":\"lex\""));
        let back = CurvatureOperator::from_json(&s).unwrap();
        assert_eq!(back, op);
    }
}
