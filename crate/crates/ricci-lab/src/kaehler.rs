//! Kähler curvature tensors in a unitary frame.
//!
//! `R[a,b,c,d]` stands for `R_{a bbar c dbar}`. With this sign convention a
//! positively curved tensor has negative diagonal entries, so bisectional
//! curvature carries an explicit minus sign.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bivector::C64;
use crate::error::{check_dim, reject, Result};
use crate::linalg;
use crate::rng::{self, Rng};
use crate::tol;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct KaehlerCurvature {
    m: usize,
    tensor: Vec<C64>,
}

fn at(m: usize, a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * m + b) * m + c) * m + d
}

fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

impl KaehlerCurvature {
    pub fn zero(m: usize) -> Self {
        Self { m, tensor: vec![ZERO; m.pow(4)] }
    }

    /// Complex projective space with holomorphic sectional curvature 2:
    /// `-I[a,b,c,d] = d_ab d_cd + d_ad d_bc`.
    pub fn i_tilde(m: usize) -> Self {
        let mut t = Self::zero(m);
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        let x = delta(a, b) * delta(c, d) + delta(a, d) * delta(b, c);
                        t.tensor[at(m, a, b, c, d)] = C64::new(-x, 0.0);
                    }
                }
            }
        }
        t
    }

    /// Builds a tensor from raw entries, projecting onto the Hermitian and
    /// Kähler symmetries.
    pub fn symmetrized(m: usize, raw: &[C64]) -> Result<Self> {
        check_dim(m.pow(4), raw.len())?;
        let mut t = vec![ZERO; raw.len()];
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        // Orbit under a<->c, b<->d and conjugation (a,b,c,d) -> (b,a,d,c).
                        let mut s = ZERO;
                        for &(p, q, r, u) in &[(a, b, c, d), (c, b, a, d), (a, d, c, b), (c, d, a, b)] {
                            s += raw[at(m, p, q, r, u)];
                            s += raw[at(m, q, p, u, r)].conj();
                        }
                        t[at(m, a, b, c, d)] = s / 8.0;
                    }
                }
            }
        }
        Ok(Self { m, tensor: t })
    }

    pub fn random(m: usize, r: &mut Rng) -> Self {
        let raw: Vec<C64> = (0..m.pow(4)).map(|_| rng::complex_normal(r)).collect();
        Self::symmetrized(m, &raw).expect("length matches")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> C64 {
        self.tensor[at(self.m, a, b, c, d)]
    }

    pub fn entries(&self) -> &[C64] {
        &self.tensor
    }

    /// Largest violation of the Hermitian and Kähler symmetries.
    pub fn symmetry_residual(&self) -> f64 {
        let m = self.m;
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        let x = self.get(a, b, c, d);
                        worst = worst
                            .max((x - self.get(b, a, d, c).conj()).norm())
                            .max((x - self.get(c, b, a, d)).norm())
                            .max((x - self.get(a, d, c, b)).norm());
                    }
                }
            }
        }
        worst
    }

    pub fn norm(&self) -> f64 {
        self.tensor.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim(self.m, other.m)?;
        Ok(Self { m: self.m, tensor: self.tensor.iter().zip(&other.tensor).map(|(a, b)| a + b).collect() })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim(self.m, other.m)?;
        Ok(Self { m: self.m, tensor: self.tensor.iter().zip(&other.tensor).map(|(a, b)| a - b).collect() })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { m: self.m, tensor: self.tensor.iter().map(|z| z * s).collect() }
    }

    /// `R + c I~`.
    pub fn shifted(&self, c: f64) -> Self {
        self.add(&Self::i_tilde(self.m).scale(c)).expect("same m")
    }

    /// `T(x, xbar, y, ybar) = sum T[a,b,c,d] x^a conj(x^b) y^c conj(y^d)`.
    pub fn evaluate_pair(&self, x: &DVector<C64>, y: &DVector<C64>) -> C64 {
        let m = self.m;
        let mut s = ZERO;
        for a in 0..m {
            for b in 0..m {
                let xab = x[a] * x[b].conj();
                for c in 0..m {
                    for d in 0..m {
                        s += self.tensor[at(m, a, b, c, d)] * xab * y[c] * y[d].conj();
                    }
                }
            }
        }
        s
    }

    /// Bisectional curvature `-R(x, xbar, y, ybar)`.
    pub fn bisec(&self, x: &DVector<C64>, y: &DVector<C64>) -> Result<f64> {
        check_dim(self.m, x.len())?;
        check_dim(self.m, y.len())?;
        Ok(-self.evaluate_pair(x, y).re)
    }

    /// `R_{a bbar} = -sum_c R[a,b,c,c]`.
    pub fn ricci_k(&self) -> DMatrix<C64> {
        let m = self.m;
        DMatrix::from_fn(m, m, |a, b| -(0..m).map(|c| self.get(a, b, c, c)).sum::<C64>())
    }

    /// `2 sum_a R_{a abar}`.
    pub fn scalar_k(&self) -> f64 {
        2.0 * self.ricci_k().trace().re
    }

    /// Reaction term of the Kähler-Ricci flow,
    /// `-R[a,b,r,s] R[s,r,c,d] - R[a,d,r,s] R[c,b,s,r] + R[a,s,c,r] R[s,b,r,d]`.
    pub fn q_kaehler(&self) -> Self {
        let m = self.m;
        let mut out = Self::zero(m);
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        let mut s = ZERO;
                        for r in 0..m {
                            for u in 0..m {
                                s -= self.get(a, b, r, u) * self.get(u, r, c, d);
                                s -= self.get(a, d, r, u) * self.get(c, b, u, r);
                                s += self.get(a, u, c, r) * self.get(u, b, r, d);
                            }
                        }
                        out.tensor[at(m, a, b, c, d)] = s;
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&KaehlerDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: KaehlerDoc = serde_json::from_str(s)?;
        doc.try_into()
    }
}

/// `(Ric ~. id)[a,b,c,d] = Ric_ab d_cd + Ric_cd d_ab + Ric_cb d_ad + Ric_ad d_bc`.
pub fn kn_tilde(ric: &DMatrix<C64>) -> Result<KaehlerCurvature> {
    check_dim(ric.nrows(), ric.ncols())?;
    let m = ric.nrows();
    let herm = linalg::frob_norm_c(&(ric - ric.adjoint()));
    if herm > tol::CONSTRAINT * linalg::frob_norm_c(ric).max(1.0) {
        return reject("Ricci form must be Hermitian");
    }
    let mut out = KaehlerCurvature::zero(m);
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                for d in 0..m {
                    out.tensor[at(m, a, b, c, d)] =
                        ric[(a, b)] * delta(c, d) + ric[(c, d)] * delta(a, b) + ric[(c, b)] * delta(a, d) + ric[(a, d)] * delta(b, c);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EllTildeOptions {
    pub starts: usize,
    pub max_iter: usize,
    pub residual: f64,
    pub seed: u64,
}

impl Default for EllTildeOptions {
    fn default() -> Self {
        Self { starts: 32, max_iter: 500, residual: 1e-9, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EllTildeResult {
    /// `max(0, best ratio)`; a certified lower bound on the true defect.
    pub value: f64,
    /// Best `-bisec(R)/bisec(I~)` found, possibly negative.
    pub ratio: f64,
    #[serde(with = "crate::bivector::complex_vec_serde")]
    pub x: DVector<C64>,
    #[serde(with = "crate::bivector::complex_vec_serde")]
    pub y: DVector<C64>,
    pub starts: usize,
    pub best_start: usize,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Holds `y` fixed: returns the Hermitian forms `(H, B)` with
/// `-bisec(R, x, y) = x^H H x` and `bisec(I~, x, y) = x^H B x`.
fn forms_in_x(r: &KaehlerCurvature, y: &DVector<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let m = r.m;
    let mut h = DMatrix::from_element(m, m, ZERO);
    for a in 0..m {
        for b in 0..m {
            let mut s = ZERO;
            for c in 0..m {
                for d in 0..m {
                    s += r.get(a, b, c, d) * y[c] * y[d].conj();
                }
            }
            // x^a conj(x^b) pairs with H[b,a].
            h[(b, a)] = s;
        }
    }
    let h = (&h + h.adjoint()) * C64::new(0.5, 0.0);
    let bm = DMatrix::identity(m, m) * C64::new(y.norm_squared(), 0.0) + y * y.adjoint();
    (h, bm)
}

/// Exact maximizer of `x^H H x / x^H B x` for `B = |y|^2 + y y^H`.
fn block_step(h: &DMatrix<C64>, y: &DVector<C64>) -> DVector<C64> {
    let m = h.nrows();
    let ny = y.norm();
    let yh = y / C64::new(ny, 0.0);
    let p = &yh * yh.adjoint();
    let id = DMatrix::<C64>::identity(m, m);
    let s = (&id - &p) * C64::new(1.0 / ny, 0.0) + &p * C64::new(1.0 / (2f64.sqrt() * ny), 0.0);
    let k = &s * h * &s;
    let k = (&k + k.adjoint()) * C64::new(0.5, 0.0);
    let (_, vecs) = linalg::herm_eigen_sorted(&k);
    let z = vecs.column(m - 1).into_owned();
    let x = &s * z;
    let nx = x.norm();
    x / C64::new(nx, 0.0)
}

fn ratio_and_residual(r: &KaehlerCurvature, x: &DVector<C64>, y: &DVector<C64>) -> (f64, f64) {
    let (hx, bx) = forms_in_x(r, y);
    let num = (x.adjoint() * &hx * x)[0].re;
    let den = (x.adjoint() * &bx * x)[0].re;
    let rat = num / den;
    let gx = (&hx * x - &bx * x * C64::new(rat, 0.0)) / C64::new(den, 0.0);
    let (hy, by) = forms_in_x(r, x);
    let gy = (&hy * y - &by * y * C64::new(rat, 0.0)) / C64::new(den, 0.0);
    // Tangent components on the unit spheres.
    let tx = &gx - x * C64::new((x.adjoint() * &gx)[0].re, 0.0);
    let ty = &gy - y * C64::new((y.adjoint() * &gy)[0].re, 0.0);
    (rat, (tx.norm_squared() + ty.norm_squared()).sqrt())
}

/// Multi-start block ascent of `-bisec(R)/bisec(I~)` over pairs of unit
/// vectors. Each block step is an exact generalized Hermitian eigenproblem.
pub fn ell_tilde(r: &KaehlerCurvature, opts: &EllTildeOptions) -> Result<EllTildeResult> {
    if opts.starts == 0 {
        return reject("ell_tilde needs at least one start");
    }
    let m = r.m;
    let mut best: Option<EllTildeResult> = None;
    let mut any_converged = false;
    for k in 0..opts.starts {
        let mut g = rng::stream(opts.seed, k as u64);
        let mut x = rng::complex_vec(&mut g, m).normalize();
        let mut y = rng::complex_vec(&mut g, m).normalize();
        let mut it = 0;
        let (mut rat, mut res) = ratio_and_residual(r, &x, &y);
        while it < opts.max_iter && res > opts.residual {
            let (hx, _) = forms_in_x(r, &y);
            x = block_step(&hx, &y);
            let (hy, _) = forms_in_x(r, &x);
            y = block_step(&hy, &x);
            it += 1;
            (rat, res) = ratio_and_residual(r, &x, &y);
        }
        let conv = res <= opts.residual;
        any_converged |= conv;
        let better = match &best {
            None => true,
            Some(b) => rat > b.ratio + 1e-12,
        };
        if better {
            best = Some(EllTildeResult {
                value: rat.max(0.0),
                ratio: rat,
                x: x.clone(),
                y: y.clone(),
                starts: opts.starts,
                best_start: k,
                iterations: it,
                residual: res,
                converged: conv,
            });
        }
    }
    let mut b = best.expect("at least one start");
    b.converged = b.converged && any_converged;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossTerm {
    pub defect: f64,
    pub q: f64,
    /// `defect / sqrt(q)`, zero when the defect is non-positive and
    /// `f64::INFINITY` when a positive defect meets a vanishing `q`.
    pub lambda_required: f64,
}

pub(crate) fn lambda_from(defect: f64, q: f64, q_floor: f64) -> f64 {
    if defect <= 0.0 {
        0.0
    } else if q <= q_floor {
        f64::INFINITY
    } else {
        defect / q.sqrt()
    }
}

/// Cross term `(Ric ~. id + scal/2 I~)(x, xbar, y, ybar)` against
/// `sqrt(-Q(x, xbar, y, ybar))` at a null pair of a non-negative tensor.
/// `x` and `y` are normalized internally.
pub fn kaehler_cross_term(rm_star: &KaehlerCurvature, x: &DVector<C64>, y: &DVector<C64>) -> Result<CrossTerm> {
    check_dim(rm_star.m, x.len())?;
    check_dim(rm_star.m, y.len())?;
    if x.norm() == 0.0 || y.norm() == 0.0 {
        return reject("null pair needs nonzero vectors");
    }
    let x = x.normalize();
    let y = y.normalize();
    let scale = rm_star.norm().max(1e-300);
    let k = rm_star.bisec(&x, &y)?;
    if k.abs() > tol::MEMBERSHIP * scale.max(1.0) {
        return reject(format!("(x, y) is not a null pair: bisectional curvature {k:e}"));
    }
    let m = rm_star.m;
    let ric = rm_star.ricci_k();
    let lhs = kn_tilde(&ric)?.add(&KaehlerCurvature::i_tilde(m).scale(0.5 * rm_star.scalar_k()))?;
    let defect = lhs.evaluate_pair(&x, &y).re;
    let q = (-rm_star.q_kaehler().evaluate_pair(&x, &y).re).max(0.0);
    let lam = lambda_from(defect, q, (tol::MEMBERSHIP * scale).powi(2));
    Ok(CrossTerm { defect, q, lambda_required: lam })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KaehlerDoc {
    pub m: usize,
    pub tensor: Vec<Vec<Vec<Vec<[f64; 2]>>>>,
}

impl From<&KaehlerCurvature> for KaehlerDoc {
    fn from(k: &KaehlerCurvature) -> Self {
        let m = k.m;
        let tensor = (0..m)
            .map(|a| {
                (0..m)
                    .map(|b| {
                        (0..m)
                            .map(|c| {
                                (0..m)
                                    .map(|d| {
                                        let z = k.get(a, b, c, d);
                                        [z.re, z.im]
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { m, tensor }
    }
}

impl TryFrom<KaehlerDoc> for KaehlerCurvature {
    type Error = crate::error::LabError;

    fn try_from(doc: KaehlerDoc) -> Result<Self> {
        let m = doc.m;
        let mut out = KaehlerCurvature::zero(m);
        check_dim(m, doc.tensor.len())?;
        for (a, ta) in doc.tensor.iter().enumerate() {
            check_dim(m, ta.len())?;
            for (b, tb) in ta.iter().enumerate() {
                check_dim(m, tb.len())?;
                for (c, tc) in tb.iter().enumerate() {
                    check_dim(m, tc.len())?;
                    for (d, z) in tc.iter().enumerate() {
                        out.tensor[at(m, a, b, c, d)] = C64::new(z[0], z[1]);
                    }
                }
            }
        }
        if out.symmetry_residual() > tol::CONSTRAINT * out.norm().max(1.0) {
            return reject("tensor violates Hermitian/Kähler symmetry");
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(m: usize, k: usize) -> DVector<C64> {
        DVector::from_fn(m, |i, _| if i == k { C64::new(1.0, 0.0) } else { ZERO })
    }

    #[test]
    fn i_tilde_examples() {
        let i1 = KaehlerCurvature::i_tilde(1);
        assert_eq!(i1.get(0, 0, 0, 0), C64::new(-2.0, 0.0));
        for m in 1..=4 {
            let it = KaehlerCurvature::i_tilde(m);
            assert_eq!(it.symmetry_residual(), 0.0);
            if m >= 2 {
                assert_abs_diff_eq!(it.bisec(&unit(m, 0), &unit(m, 1)).unwrap(), 1.0);
            }
            let ric = it.ricci_k();
            assert!(linalg::frob_norm_c(&(ric - DMatrix::identity(m, m) * C64::new(m as f64 + 1.0, 0.0))) < 1e-14);
            assert_abs_diff_eq!(it.scalar_k(), 2.0 * (m * (m + 1)) as f64);
        }
    }

    #[test]
    fn bisec_of_i_tilde_closed_form() {
        let mut g = rng::stream(1, 0);
        for m in 1..=4 {
            let x = rng::complex_vec(&mut g, m);
            let y = rng::complex_vec(&mut g, m);
            let it = KaehlerCurvature::i_tilde(m);
            let want = x.norm_squared() * y.norm_squared() + (y.adjoint() * &x)[0].norm_sqr();
            assert_abs_diff_eq!(it.bisec(&x, &y).unwrap(), want, epsilon = 1e-12);
            let r = KaehlerCurvature::random(m, &mut g);
            let lam = C64::new(0.4, 1.1);
            let scaled = r.bisec(&(&x * lam), &y).unwrap();
            assert_abs_diff_eq!(scaled, lam.norm_sqr() * r.bisec(&x, &y).unwrap(), epsilon = 1e-10);
            assert!(r.evaluate_pair(&x, &y).im.abs() < 1e-12);
            assert_eq!(KaehlerCurvature::zero(m).bisec(&x, &y).unwrap(), 0.0);
        }
    }

    #[test]
    fn random_tensor_has_symmetries() {
        let mut g = rng::stream(2, 0);
        for m in 1..=3 {
            let r = KaehlerCurvature::random(m, &mut g);
            assert!(r.symmetry_residual() < 1e-15);
            let ric = r.ricci_k();
            assert!(linalg::frob_norm_c(&(&ric - ric.adjoint())) < 1e-14);
        }
    }

    #[test]
    fn reaction_of_i_tilde_and_one_dimensional_case() {
        for m in 1..=3 {
            let q = KaehlerCurvature::i_tilde(m).q_kaehler();
            let want = KaehlerCurvature::i_tilde(m).scale(m as f64 + 1.0);
            assert!(q.sub(&want).unwrap().norm() < 1e-13);
            assert_eq!(KaehlerCurvature::zero(m).q_kaehler().norm(), 0.0);
        }
        let k = 0.8;
        let mut r = KaehlerCurvature::zero(1);
        r.tensor[0] = C64::new(k, 0.0);
        assert_abs_diff_eq!(r.q_kaehler().get(0, 0, 0, 0).re, -k * k, epsilon = 1e-15);
    }

    #[test]
    fn kn_tilde_examples() {
        for m in 1..=3 {
            let d = DMatrix::<C64>::identity(m, m);
            let got = kn_tilde(&d).unwrap();
            let want = KaehlerCurvature::i_tilde(m).scale(-2.0);
            assert!(got.sub(&want).unwrap().norm() < 1e-15);
        }
        let mut g = rng::stream(3, 0);
        let a = DMatrix::from_fn(3, 3, |_, _| rng::complex_normal(&mut g));
        let h = &a + a.adjoint();
        let out = kn_tilde(&h).unwrap();
        assert!(out.symmetry_residual() < 1e-14);
        let two = kn_tilde(&(&h * C64::new(2.0, 0.0))).unwrap();
        assert!(two.sub(&out.scale(2.0)).unwrap().norm() < 1e-13);
    }

    #[test]
    fn shift_identity_with_minus_sign() {
        let mut g = rng::stream(4, 0);
        for m in 1..=3 {
            let r = KaehlerCurvature::random(m, &mut g);
            let l = 0.73;
            let it = KaehlerCurvature::i_tilde(m);
            let lhs = r.shifted(l).q_kaehler().sub(&r.q_kaehler()).unwrap().sub(&it.q_kaehler().scale(l * l)).unwrap();
            let rhs = kn_tilde(&r.ricci_k()).unwrap().scale(-l);
            assert!(lhs.sub(&rhs).unwrap().norm() < 1e-12 * lhs.norm().max(1.0), "m = {m}");
        }
    }

    #[test]
    fn ell_tilde_examples() {
        let opts = EllTildeOptions::default();
        for m in 1..=3 {
            let neg = KaehlerCurvature::i_tilde(m).scale(-1.0);
            assert_abs_diff_eq!(ell_tilde(&neg, &opts).unwrap().value, 1.0, epsilon = 1e-12);
            let pos = KaehlerCurvature::i_tilde(m).scale(0.5);
            assert_eq!(ell_tilde(&pos, &opts).unwrap().value, 0.0);
        }
    }

    #[test]
    fn cross_term_flat_and_interior() {
        let x = unit(2, 0);
        let y = unit(2, 1);
        let ct = kaehler_cross_term(&KaehlerCurvature::zero(2), &x, &y).unwrap();
        assert_eq!(ct.defect, 0.0);
        assert_eq!(ct.lambda_required, 0.0);
        assert!(kaehler_cross_term(&KaehlerCurvature::i_tilde(2), &x, &y).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = KaehlerCurvature::random(2, &mut rng::stream(5, 0));
        let back = KaehlerCurvature::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
