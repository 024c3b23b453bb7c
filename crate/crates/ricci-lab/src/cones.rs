//! Curvature cones `C(S, h)`, the defect `ell` and the time-indexed family.
//!
//! `ell(Rm) = max(0, -min { Rm(v, vbar) : v in S, |v| = 1 })`. This is exact
//! because `I(v, vbar) = |v|^2`, so adding `alpha I` shifts the quadratic form
//! by `alpha` on unit bivectors. For `S1` and `S2` the minimum has a closed
//! form; for the rank-two sets it comes from multi-start local optimization
//! and is an upper bound on the true minimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bivector::{self, isotropic, wedge_coords, wedge_pairs, ComplexBivector, Rank2Certificate, C64};
use crate::curvature::CurvatureOperator;
use crate::error::{reject, LabError, Result};
use crate::linalg::{self, herm_eigen_sorted, polar_retract, stiefel_project, sym_eigen_sorted};
use crate::rng;
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConeKind {
    S1,
    S2,
    S3,
    S4,
    S5,
    /// Rank-two bivectors with eigenvalue moduli at most `sqrt(2t)`, level `-1`.
    Ct,
}

impl ConeKind {
    pub const SETS: [ConeKind; 5] = [ConeKind::S1, ConeKind::S2, ConeKind::S3, ConeKind::S4, ConeKind::S5];

    pub fn min_dim(self) -> usize {
        match self {
            ConeKind::S3 | ConeKind::S4 => 4,
            _ => 2,
        }
    }
}

impl std::str::FromStr for ConeKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(ConeKind::S1),
            "S2" => Ok(ConeKind::S2),
            "S3" => Ok(ConeKind::S3),
            "S4" => Ok(ConeKind::S4),
            "S5" => Ok(ConeKind::S5),
            "CT" => Ok(ConeKind::Ct),
            _ => reject(format!("unknown cone {s:?}")),
        }
    }
}

impl std::fmt::Display for ConeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub kind: ConeKind,
    /// Time parameter of the family; zero for the fixed sets.
    pub t: f64,
    /// Level `h` of `C(S, h)`.
    pub h: f64,
}

impl ConeSpec {
    pub fn set(kind: ConeKind) -> Self {
        Self { kind, t: 0.0, h: 0.0 }
    }

    pub fn family(t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return reject("family time must be non-negative");
        }
        Ok(Self { kind: ConeKind::Ct, t, h: -1.0 })
    }

    pub fn check_dim(&self, n: usize) -> Result<()> {
        if n < self.kind.min_dim() {
            return reject(format!("cone {} needs n >= {}", self.kind, self.kind.min_dim()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinDiagnostics {
    pub starts: usize,
    pub best_start: usize,
    pub iterations: usize,
    /// First-order residual at the reported point.
    pub residual: f64,
    pub converged: bool,
    /// Residual of the constraint defining the set at `argmin`.
    pub constraint_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinResult {
    pub value: f64,
    pub argmin: ComplexBivector,
    /// Factorization of `argmin` for the rank-two sets; used for warm starts.
    pub certificate: Option<Rank2Certificate>,
    pub diagnostics: MinDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinOptions {
    pub starts: usize,
    pub max_iter: usize,
    /// Gradient tolerance relative to `max(1, |Rm|)`.
    pub grad_tol: f64,
    pub seed: u64,
    /// Extra starting points tried before the random ones.
    pub warm: Vec<Rank2Certificate>,
}

impl MinOptions {
    pub fn new(kind: ConeKind, seed: u64) -> Self {
        let starts = match kind {
            ConeKind::S1 | ConeKind::S2 => 1,
            ConeKind::S3 => 12,
            ConeKind::S4 | ConeKind::S5 => 10,
            ConeKind::Ct => 16,
        };
        Self { starts, max_iter: 1000, grad_tol: 1e-9, seed, warm: Vec::new() }
    }

    pub fn with_starts(mut self, starts: usize) -> Self {
        self.starts = starts;
        self
    }

    pub fn with_warm(mut self, warm: Vec<Rank2Certificate>) -> Self {
        self.warm = warm;
        self
    }
}

/// Minimum of `Rm(v, vbar)` over unit `v` in the set of `cone`.
pub fn min_quadratic(rm: &CurvatureOperator, cone: ConeKind, seed: u64) -> Result<MinResult> {
    min_quadratic_with(rm, cone, &MinOptions::new(cone, seed))
}

pub fn min_quadratic_with(rm: &CurvatureOperator, cone: ConeKind, opts: &MinOptions) -> Result<MinResult> {
    let n = rm.n();
    ConeSpec::set(cone).check_dim(n)?;
    match cone {
        ConeKind::S1 => Ok(min_s1(rm)),
        ConeKind::S2 => Ok(min_s2(rm)),
        ConeKind::S5 => min_s5(rm, opts),
        ConeKind::S4 => min_frames(rm, Frames::S4, opts),
        ConeKind::S3 => min_frames(rm, Frames::S3, opts),
        ConeKind::Ct => reject("use in_cone_t for the time-indexed family"),
    }
}

pub fn ell(rm: &CurvatureOperator, cone: ConeKind, seed: u64) -> Result<f64> {
    Ok((-min_quadratic(rm, cone, seed)?.value).max(0.0))
}

pub fn ell_with(rm: &CurvatureOperator, cone: ConeKind, opts: &MinOptions) -> Result<(f64, MinResult)> {
    let r = min_quadratic_with(rm, cone, opts)?;
    Ok(((-r.value).max(0.0), r))
}

fn finish(rm: &CurvatureOperator, coords: DVector<C64>, cert: Option<Rank2Certificate>, kind: ConeKind, diag: MinDiagnostics) -> MinResult {
    let n = rm.n();
    let nrm = coords.norm();
    let coords = coords / C64::new(nrm, 0.0);
    let cert = cert.map(|c| {
        // Rescale the factors so that zeta ^ eta is exactly `argmin`.
        let s = C64::new(1.0 / nrm, 0.0);
        Rank2Certificate::new(c.zeta * s, c.eta)
    });
    let argmin = ComplexBivector::from_coords(n, coords).expect("length matches");
    let value = rm.evaluate(&argmin).expect("same n");
    let constraint_residual = match kind {
        ConeKind::S1 | ConeKind::Ct => 0.0,
        ConeKind::S2 => argmin.trace_sq().norm(),
        ConeKind::S3 => argmin.power_norm(2),
        ConeKind::S4 => argmin.power_norm(3),
        ConeKind::S5 => {
            let s = argmin.singular_values();
            s.get(2).copied().unwrap_or(0.0) / s[0].max(f64::MIN_POSITIVE)
        }
    };
    MinResult { value, argmin, certificate: cert, diagnostics: MinDiagnostics { constraint_residual, ..diag } }
}

fn exact_diag() -> MinDiagnostics {
    MinDiagnostics { starts: 1, best_start: 0, iterations: 0, residual: 0.0, converged: true, constraint_residual: 0.0 }
}

fn min_s1(rm: &CurvatureOperator) -> MinResult {
    let (vals, vecs) = sym_eigen_sorted(rm.form());
    let c = linalg::to_complex(&vecs.column(0).into_owned());
    let mut r = finish(rm, c, None, ConeKind::S1, exact_diag());
    r.value = vals[0];
    r
}

fn min_s2(rm: &CurvatureOperator) -> MinResult {
    let (vals, vecs) = sym_eigen_sorted(rm.form());
    let b1 = vecs.column(0);
    let b2 = vecs.column(1);
    let c = DVector::from_fn(b1.len(), |i, _| C64::new(b1[i], b2[i]) / 2f64.sqrt());
    let mut r = finish(rm, c, None, ConeKind::S2, exact_diag());
    r.value = 0.5 * (vals[0] + vals[1]);
    r
}

/// `N x n` matrix of `x -> a ^ x`.
fn wedge_left(a: &DVector<C64>) -> DMatrix<C64> {
    let n = a.len();
    let pairs = wedge_pairs(n);
    let mut l = DMatrix::from_element(pairs.len(), n, C64::new(0.0, 0.0));
    for (k, &(i, j)) in pairs.iter().enumerate() {
        // (a ^ x)_ij = a_i x_j - a_j x_i
        l[(k, j)] += a[i];
        l[(k, i)] -= a[j];
    }
    l
}

fn real_form_c(rm: &CurvatureOperator) -> DMatrix<C64> {
    rm.form().map(|x| C64::new(x, 0.0))
}

/// Antisymmetric matrix with the given wedge coordinates.
fn full_antisym(n: usize, g: &DVector<C64>) -> DMatrix<C64> {
    bivector::coords_to_matrix(n, g)
}

/// Value of the unit-normalized quadratic form at `zeta ^ eta` and the
/// Wirtinger-type gradients `dval = Re(g^H dz)` with respect to both factors.
fn wedge_value_grad(fc: &DMatrix<C64>, zeta: &DVector<C64>, eta: &DVector<C64>) -> (f64, DVector<C64>, DVector<C64>) {
    let n = zeta.len();
    let c = wedge_coords(zeta, eta);
    let fcv = fc * &c;
    let den = c.norm_squared();
    let val = c.dotc(&fcv).re / den;
    let g = (&fcv - &c * C64::new(val, 0.0)) / C64::new(den, 0.0);
    let gm = full_antisym(n, &g);
    let gz = &gm * eta.conjugate() * C64::new(2.0, 0.0);
    let ge = &gm * zeta.conjugate() * C64::new(-2.0, 0.0);
    (val, gz, ge)
}

fn orth_complement_c(x: &DVector<C64>) -> DMatrix<C64> {
    let n = x.len();
    let xh = x.normalize();
    let p = DMatrix::<C64>::identity(n, n) - &xh * xh.adjoint();
    let (_, vecs) = herm_eigen_sorted(&p);
    vecs.columns(1, n - 1).into_owned()
}

fn orth_complement_r(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.nrows();
    let k = e.ncols();
    let p = DMatrix::<f64>::identity(n, n) - e * e.transpose();
    let (_, vecs) = sym_eigen_sorted(&p);
    vecs.columns(k, n - k).into_owned()
}

/// Minimizes `x^H (L^H F L) x / x^H x` over `x` in the span of `basis`.
fn restricted_min(fc: &DMatrix<C64>, l: &DMatrix<C64>, basis: &DMatrix<C64>) -> (f64, DVector<C64>) {
    let lb = l * basis;
    let m = lb.adjoint() * fc * &lb;
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let (vals, vecs) = herm_eigen_sorted(&m);
    (vals[0], basis * vecs.column(0))
}

fn pick_better(best: &mut Option<(f64, usize)>, val: f64, k: usize) -> bool {
    match best {
        Some((b, _)) if val >= *b - 1e-12 => false,
        _ => {
            *best = Some((val, k));
            true
        }
    }
}

fn min_s5(rm: &CurvatureOperator, opts: &MinOptions) -> Result<MinResult> {
    let n = rm.n();
    let fc = real_form_c(rm);
    let scale = rm.norm().max(1.0);
    let total = opts.warm.len() + opts.starts;
    if total == 0 {
        return reject("optimizer needs at least one start");
    }
    let mut best: Option<(f64, usize)> = None;
    let mut best_state = None;
    let mut any_conv = false;
    for k in 0..total {
        let (mut zeta, mut eta) = if k < opts.warm.len() {
            (opts.warm[k].zeta.clone(), opts.warm[k].eta.clone())
        } else {
            let mut g = rng::stream(opts.seed, k as u64);
            (rng::complex_vec(&mut g, n), rng::complex_vec(&mut g, n))
        };
        if wedge_coords(&zeta, &eta).norm() < 1e-12 {
            continue;
        }
        eta = eta.normalize();
        let mut val = f64::INFINITY;
        let mut it = 0;
        let mut res = f64::INFINITY;
        while it < opts.max_iter {
            // Exact block steps; |zeta ^ eta|^2 = |zeta|^2 for unit eta orthogonal to zeta.
            let (_, z) = restricted_min(&fc, &wedge_left(&eta).map(|x| -x), &orth_complement_c(&eta));
            zeta = z;
            let (v2, e) = restricted_min(&fc, &wedge_left(&zeta), &orth_complement_c(&zeta));
            eta = e;
            it += 1;
            let (v, gz, ge) = wedge_value_grad(&fc, &zeta, &eta);
            res = (gz.norm_squared() + ge.norm_squared()).sqrt();
            let stalled = val - v2 <= 1e-15 * scale;
            val = v;
            if res <= opts.grad_tol * scale || (stalled && res <= 1e-6 * scale) {
                break;
            }
        }
        let conv = res <= 1e-6 * scale;
        any_conv |= conv;
        if pick_better(&mut best, val, k) {
            best_state = Some((zeta.clone(), eta.clone(), it, res, conv));
        }
    }
    let (bk_val, bk) = best.ok_or_else(|| LabError::Diagnostic("all starts degenerate".into()))?;
    let _ = bk_val;
    let (zeta, eta, it, res, conv) = best_state.expect("set with best");
    let cert = Rank2Certificate::new(zeta.clone(), eta.clone());
    let coords = wedge_coords(&zeta, &eta);
    Ok(finish(
        rm,
        coords,
        Some(cert),
        ConeKind::S5,
        MinDiagnostics { starts: total, best_start: bk, iterations: it, residual: res, converged: conv && any_conv, constraint_residual: 0.0 },
    ))
}

#[derive(Clone, Copy, PartialEq)]
enum Frames {
    S3,
    S4,
}

struct DescentOut {
    frames: Vec<DMatrix<f64>>,
    value: f64,
    iters: usize,
    residual: f64,
}

fn frames_norm_sq(g: &[DMatrix<f64>]) -> f64 {
    g.iter().map(|m| m.norm_squared()).sum()
}

/// Riemannian gradient descent on a product of Stiefel manifolds with
/// Barzilai-Borwein trial steps, Armijo backtracking and polar retraction.
fn stiefel_descent<F>(mut x: Vec<DMatrix<f64>>, mut f: F, max_iter: usize, gtol: f64) -> DescentOut
where
    F: FnMut(&[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>),
{
    let proj = |x: &[DMatrix<f64>], g: Vec<DMatrix<f64>>| -> Vec<DMatrix<f64>> { x.iter().zip(g).map(|(e, g)| stiefel_project(e, &g)).collect() };
    let (mut val, g) = f(&x);
    let mut rg = proj(&x, g);
    let mut gn2 = frames_norm_sq(&rg);
    let mut alpha = 0.1 / gn2.sqrt().max(1e-12);
    let mut iters = 0;
    let mut flat = 0;
    while iters < max_iter && gn2.sqrt() > gtol {
        iters += 1;
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..50 {
            let xt: Vec<DMatrix<f64>> = x.iter().zip(&rg).map(|(e, g)| polar_retract(&(e - g * a))).collect();
            let (vt, gt) = f(&xt);
            if vt <= val - 1e-4 * a * gn2 {
                accepted = Some((xt, vt, gt));
                break;
            }
            a *= 0.5;
        }
        let Some((xt, vt, gt)) = accepted else { break };
        let rgt = proj(&xt, gt);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..x.len() {
            let s = &xt[k] - &x[k];
            let y = &rgt[k] - &rg[k];
            ss += s.norm_squared();
            sy += s.dot(&y);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-8, 1e8) } else { a * 2.0 };
        // Stop on a long plateau (the S4 value function is only piecewise smooth).
        if val - vt <= 1e-15 * (1.0 + val.abs()) {
            flat += 1;
            if flat >= 20 {
                x = xt;
                val = vt;
                rg = rgt;
                gn2 = frames_norm_sq(&rg);
                break;
            }
        } else {
            flat = 0;
        }
        x = xt;
        val = vt;
        rg = rgt;
        gn2 = frames_norm_sq(&rg);
    }
    DescentOut { frames: x, value: val, iters, residual: gn2.sqrt() }
}

/// Value and Euclidean frame gradient for the isotropic sets.
fn s3_value_grad(fc: &DMatrix<C64>, e: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let zeta = isotropic(e, 0, 1);
    let eta = isotropic(e, 2, 3);
    let (val, gz, ge) = wedge_value_grad(fc, &zeta, &eta);
    let n = e.nrows();
    let g = DMatrix::from_fn(n, 4, |i, j| match j {
        0 => gz[i].re,
        1 => gz[i].im,
        2 => ge[i].re,
        _ => ge[i].im,
    });
    (val, g)
}

/// Best `eta` in the complexified complement of the frame, with the value.
fn s4_inner(fc: &DMatrix<C64>, e: &DMatrix<f64>) -> (f64, DVector<C64>) {
    let zeta = isotropic(e, 0, 1);
    let w = orth_complement_r(e).map(|x| C64::new(x, 0.0));
    let (mu, eta) = restricted_min(fc, &wedge_left(&zeta), &w);
    // |zeta ^ eta|^2 = |zeta|^2 |eta|^2 = 2.
    (0.5 * mu, eta)
}

fn s4_value_grad(fc: &DMatrix<C64>, e: &DMatrix<f64>) -> (f64, DMatrix<f64>, DVector<C64>) {
    let (_, eta) = s4_inner(fc, e);
    let zeta = isotropic(e, 0, 1);
    let (val, gz, ge) = wedge_value_grad(fc, &zeta, &eta);
    // eta is carried along by the bilinear projection onto the moving complement.
    let e1 = linalg::to_complex(&e.column(0).into_owned());
    let e2 = linalg::to_complex(&e.column(1).into_owned());
    let s1 = ge.dotc(&e1);
    let s2 = ge.dotc(&e2);
    let n = e.nrows();
    let g = DMatrix::from_fn(n, 2, |i, j| match j {
        0 => gz[i].re - (s1 * eta[i]).re,
        _ => gz[i].im - (s2 * eta[i]).re,
    });
    (val, g, eta)
}

fn frame_from_cert(cert: &Rank2Certificate, kind: Frames) -> Option<DMatrix<f64>> {
    let z = &cert.zeta;
    let e = &cert.eta;
    let n = z.len();
    let cols = match kind {
        Frames::S4 => 2,
        Frames::S3 => 4,
    };
    let m = DMatrix::from_fn(n, cols, |i, j| match j {
        0 => z[i].re,
        1 => z[i].im,
        2 => e[i].re,
        _ => e[i].im,
    });
    let gram = m.transpose() * &m;
    if gram.determinant().abs() < 1e-14 * gram.norm().powi(cols as i32).max(1e-300) {
        return None;
    }
    Some(polar_retract(&m))
}

fn min_frames(rm: &CurvatureOperator, kind: Frames, opts: &MinOptions) -> Result<MinResult> {
    let n = rm.n();
    let fc = real_form_c(rm);
    let scale = rm.norm().max(1.0);
    let cols = if kind == Frames::S3 { 4 } else { 2 };
    let total = opts.warm.len() + opts.starts;
    if total == 0 {
        return reject("optimizer needs at least one start");
    }
    let mut best: Option<(f64, usize)> = None;
    let mut best_out: Option<DescentOut> = None;
    let mut any_conv = false;
    for k in 0..total {
        let start = if k < opts.warm.len() {
            match frame_from_cert(&opts.warm[k], kind) {
                Some(f) => f,
                None => continue,
            }
        } else {
            linalg::random_frame(&mut rng::stream(opts.seed, k as u64), n, cols)
        };
        let out = match kind {
            Frames::S3 => stiefel_descent(
                vec![start],
                |x| {
                    let (v, g) = s3_value_grad(&fc, &x[0]);
                    (v, vec![g])
                },
                opts.max_iter,
                opts.grad_tol * scale,
            ),
            Frames::S4 => stiefel_descent(
                vec![start],
                |x| {
                    let (v, g, _) = s4_value_grad(&fc, &x[0]);
                    (v, vec![g])
                },
                opts.max_iter,
                opts.grad_tol * scale,
            ),
        };
        any_conv |= out.residual <= 1e-6 * scale;
        if pick_better(&mut best, out.value, k) {
            best_out = Some(out);
        }
    }
    let (_, bk) = best.ok_or_else(|| LabError::Diagnostic("all warm starts degenerate".into()))?;
    let out = best_out.expect("set with best");
    let e = &out.frames[0];
    let zeta = isotropic(e, 0, 1);
    let (eta, set) = match kind {
        Frames::S3 => (isotropic(e, 2, 3), ConeKind::S3),
        Frames::S4 => (s4_inner(&fc, e).1, ConeKind::S4),
    };
    let coords = wedge_coords(&zeta, &eta);
    let conv = out.residual <= 1e-6 * scale;
    Ok(finish(
        rm,
        coords,
        Some(Rank2Certificate::new(zeta, eta)),
        set,
        MinDiagnostics {
            starts: total,
            best_start: bk,
            iterations: out.iters,
            residual: out.residual,
            converged: conv && any_conv,
            constraint_residual: 0.0,
        },
    ))
}

/// Defects for all five sets with warm starts chained along the inclusions
/// `S3 < S4 < S5`, so the returned estimates respect the nesting exactly.
pub fn ell_nested(rm: &CurvatureOperator, seed: u64) -> Result<[f64; 5]> {
    let n = rm.n();
    let l1 = ell(rm, ConeKind::S1, seed)?;
    let l2 = ell(rm, ConeKind::S2, seed)?;
    if n < 4 {
        let l5 = ell(rm, ConeKind::S5, seed)?;
        return Ok([l1, l2, 0.0, 0.0, l5]);
    }
    let (l3, m3) = ell_with(rm, ConeKind::S3, &MinOptions::new(ConeKind::S3, seed))?;
    let warm4 = m3.certificate.clone().into_iter().collect();
    let (l4, m4) = ell_with(rm, ConeKind::S4, &MinOptions::new(ConeKind::S4, seed).with_warm(warm4))?;
    let warm5 = m4.certificate.clone().into_iter().collect();
    let (l5, _) = ell_with(rm, ConeKind::S5, &MinOptions::new(ConeKind::S5, seed).with_warm(warm5))?;
    Ok([l1, l2, l3, l4, l5])
}

/// Boundary operator `Rm* = Rm + ell(Rm) I` with its null direction.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub rm_star: CurvatureOperator,
    pub null_dir: ComplexBivector,
    pub ell: f64,
    /// `Rm*(v, vbar)` at the null direction.
    pub null_value: f64,
    pub min: MinResult,
}

pub fn boundary_sample(cone: ConeKind, n: usize, seed: u64) -> Result<BoundarySample> {
    boundary_sample_with(cone, n, seed, None)
}

pub fn boundary_sample_with(cone: ConeKind, n: usize, seed: u64, starts: Option<usize>) -> Result<BoundarySample> {
    ConeSpec::set(cone).check_dim(n)?;
    for attempt in 0..16u64 {
        let mut g = rng::stream(seed, 1_000_000 + attempt);
        let rm = CurvatureOperator::random(n, &mut g);
        let mut opts = MinOptions::new(cone, seed ^ (attempt << 40));
        if let Some(s) = starts {
            opts.starts = s;
        }
        let (l, min) = ell_with(&rm, cone, &opts)?;
        if l <= 0.0 {
            continue;
        }
        let rm_star = rm.shifted(l);
        let null_value = rm_star.evaluate(&min.argmin)?;
        let null_dir = min.argmin.clone();
        return Ok(BoundarySample { rm_star, null_dir, ell: l, null_value, min });
    }
    Err(LabError::Diagnostic("no boundary sample with positive defect".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyCheck {
    pub member: bool,
    /// Worst point of the constrained set: `value = Rm(argmin, conj argmin)`.
    pub worst: MinResult,
    /// Infimum of `Rm(v, vbar)` over rank-two `v` with eigenvalues `+-1`.
    pub unit_eigen_min: f64,
    /// Set when `Rm` is negative on a nilpotent direction, so the constrained
    /// infimum is unbounded below for every `t > 0`.
    pub unbounded: bool,
    pub t: f64,
}

/// Value and gradients of `Rm(zeta ^ eta) / |zeta . eta|^2`, the form at the
/// rank-two bivector with eigenvalues `+-1` spanned by isotropic `zeta, eta`.
fn eigen_unit_value_grad(fc: &DMatrix<C64>, e1: &DMatrix<f64>, e2: &DMatrix<f64>) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let n = e1.nrows();
    let zeta = isotropic(e1, 0, 1);
    let eta = isotropic(e2, 0, 1);
    let c = wedge_coords(&zeta, &eta);
    let fcv = fc * &c;
    let num = c.dotc(&fcv).re;
    let b = bivector::bilinear(&zeta, &eta);
    let den = b.norm_sqr().max(1e-300);
    let val = num / den;
    let gm = full_antisym(n, &fcv);
    let two = C64::new(2.0, 0.0);
    let gz = (&gm * eta.conjugate() * two - eta.conjugate() * (b * two * val)) / C64::new(den, 0.0);
    let ge = (&gm * zeta.conjugate() * (-two) - zeta.conjugate() * (b * two * val)) / C64::new(den, 0.0);
    let g1 = DMatrix::from_fn(n, 2, |i, j| if j == 0 { gz[i].re } else { gz[i].im });
    let g2 = DMatrix::from_fn(n, 2, |i, j| if j == 0 { ge[i].re } else { ge[i].im });
    (val, g1, g2)
}

/// Minimum of `Rm(v, vbar)` over rank-two `v` with eigenvalues `+-1`.
pub fn unit_eigen_min(rm: &CurvatureOperator, opts: &MinOptions) -> Result<(f64, Rank2Certificate, MinDiagnostics)> {
    let n = rm.n();
    if n < 4 {
        return reject("the family needs n >= 4");
    }
    let fc = real_form_c(rm);
    let scale = rm.norm().max(1.0);
    let total = opts.warm.len() + opts.starts;
    let mut best: Option<(f64, usize)> = None;
    let mut best_out: Option<DescentOut> = None;
    let mut any_conv = false;
    for k in 0..total {
        let start = if k < opts.warm.len() {
            let c = &opts.warm[k];
            let f1 = frame_from_cert(&Rank2Certificate::new(c.zeta.clone(), c.zeta.clone()), Frames::S4);
            let f2 = frame_from_cert(&Rank2Certificate::new(c.eta.clone(), c.eta.clone()), Frames::S4);
            match (f1, f2) {
                (Some(a), Some(b)) => vec![a, b],
                _ => continue,
            }
        } else {
            let mut g = rng::stream(opts.seed, k as u64);
            vec![linalg::random_frame(&mut g, n, 2), linalg::random_frame(&mut g, n, 2)]
        };
        let out = stiefel_descent(
            start,
            |x| {
                let (v, g1, g2) = eigen_unit_value_grad(&fc, &x[0], &x[1]);
                (v, vec![g1, g2])
            },
            opts.max_iter,
            opts.grad_tol * scale,
        );
        any_conv |= out.residual <= 1e-6 * scale;
        if pick_better(&mut best, out.value, k) {
            best_out = Some(out);
        }
    }
    let (_, bk) = best.ok_or_else(|| LabError::Diagnostic("no usable start".into()))?;
    let out = best_out.expect("set with best");
    let zeta = isotropic(&out.frames[0], 0, 1);
    let eta = isotropic(&out.frames[1], 0, 1);
    let conv = out.residual <= 1e-6 * scale;
    let diag = MinDiagnostics {
        starts: total,
        best_start: bk,
        iterations: out.iters,
        residual: out.residual,
        converged: conv && any_conv,
        constraint_residual: 0.0,
    };
    Ok((out.value, Rank2Certificate::new(zeta, eta), diag))
}

/// Membership of `Rm` in the time-indexed family: `Rm(v, vbar) >= -1` for
/// all rank-two `v` whose eigenvalues have modulus at most `sqrt(2t)`.
///
/// Scaling reduces this to the S4 condition (nilpotent directions can be
/// scaled freely) together with `2 t lambda >= -1`, where `lambda` is the
/// minimum over bivectors with eigenvalues exactly `+-1`. At `t = 0` only the
/// S4 condition remains and `worst` is the unit S4 minimizer.
pub fn in_cone_t(rm: &CurvatureOperator, t: f64, seed: u64) -> Result<FamilyCheck> {
    in_cone_t_with(rm, t, &MinOptions::new(ConeKind::Ct, seed))
}

pub fn in_cone_t_with(rm: &CurvatureOperator, t: f64, opts: &MinOptions) -> Result<FamilyCheck> {
    ConeSpec::family(t)?;
    let n = rm.n();
    let scale = rm.norm().max(1.0);
    let s4 = min_quadratic_with(rm, ConeKind::S4, &MinOptions::new(ConeKind::S4, opts.seed))?;
    let s4_ok = s4.value >= -tol::MEMBERSHIP * scale;
    if t == 0.0 || !s4_ok {
        return Ok(FamilyCheck { member: s4_ok && t == 0.0, worst: s4, unit_eigen_min: f64::NAN, unbounded: !s4_ok, t });
    }
    let (lam, cert, diag) = unit_eigen_min(rm, opts)?;
    // zeta ^ eta / b has eigenvalues +-1; scale to modulus sqrt(2t).
    let b = cert.b_ze;
    let s = C64::new((2.0 * t).sqrt(), 0.0) / b;
    let coords = wedge_coords(&cert.zeta, &cert.eta) * s;
    let argmin = ComplexBivector::from_coords(n, coords)?;
    let value = rm.evaluate(&argmin)?;
    let worst = MinResult { value, argmin, certificate: Some(Rank2Certificate::new(cert.zeta.map(|z| z * s), cert.eta.clone())), diagnostics: diag };
    let member = value >= -1.0 - tol::OPTIMIZER;
    Ok(FamilyCheck { member, worst, unit_eigen_min: lam, unbounded: false, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag_op(vals: &[f64]) -> CurvatureOperator {
        let n = (2..10).find(|&n| crate::bivector::wedge_dim(n) == vals.len()).unwrap();
        CurvatureOperator::from_form(n, DMatrix::from_diagonal(&DVector::from_row_slice(vals))).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let r = min_quadratic(&diag_op(&[-0.3, 0.5, 1.0]), ConeKind::S1, 0).unwrap();
        assert_abs_diff_eq!(r.value, -0.3, epsilon = 1e-15);
        let r = min_quadratic(&diag_op(&[-0.5, 0.2, 1.0]), ConeKind::S2, 0).unwrap();
        assert_abs_diff_eq!(r.value, -0.15, epsilon = 1e-15);
        assert!(r.argmin.trace_sq().norm() < 1e-15);
    }

    #[test]
    fn identity_is_one_on_every_set() {
        for kind in ConeKind::SETS {
            let r = min_quadratic(&CurvatureOperator::identity(5), kind, 1).unwrap();
            assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-10);
            assert_eq!(ell(&CurvatureOperator::identity(5), kind, 1).unwrap(), 0.0);
            assert_abs_diff_eq!(ell(&CurvatureOperator::identity(5).scale(-1.0), kind, 1).unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn min_result_invariants() {
        let mut g = rng::stream(3, 0);
        for n in 4..=6 {
            let rm = CurvatureOperator::random(n, &mut g);
            for kind in ConeKind::SETS {
                let r = min_quadratic(&rm, kind, 7).unwrap();
                assert_abs_diff_eq!(r.argmin.norm(), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(rm.evaluate(&r.argmin).unwrap(), r.value, epsilon = 1e-10);
                assert!(r.diagnostics.constraint_residual < 1e-10, "{kind} {:?}", r.diagnostics);
                assert!(bivector::in_set(kind, &r.argmin, 1e-10));
                if let Some(c) = &r.certificate {
                    assert!((c.bivector().coords() - r.argmin.coords()).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn s1_matches_eigenvalue_and_s2_closed_form() {
        let mut g = rng::stream(4, 0);
        for n in 3..=8 {
            let rm = CurvatureOperator::random(n, &mut g);
            let (vals, _) = sym_eigen_sorted(rm.form());
            assert_abs_diff_eq!(min_quadratic(&rm, ConeKind::S1, 0).unwrap().value, vals[0], epsilon = 1e-12);
            assert_abs_diff_eq!(ell(&rm, ConeKind::S1, 0).unwrap(), (-vals[0]).max(0.0), epsilon = 1e-12);
            assert_abs_diff_eq!(min_quadratic(&rm, ConeKind::S2, 0).unwrap().value, 0.5 * (vals[0] + vals[1]), epsilon = 1e-12);
        }
    }

    #[test]
    fn boundary_sample_is_on_the_boundary() {
        for kind in ConeKind::SETS {
            let b = boundary_sample(kind, 5, 11).unwrap();
            assert!(b.null_value.abs() < 1e-8);
            assert!(ell(&b.rm_star, kind, 99).unwrap() < 1e-8, "{kind}");
        }
    }

    #[test]
    fn product_sphere_null_direction() {
        use crate::curvature::{kn_product, SymmetricTwoTensor};
        let n = 4;
        let p = SymmetricTwoTensor::coordinate_projection(n, 2);
        let star = kn_product(&p, &p).unwrap().scale(0.5);
        let v = ComplexBivector::basis(n, 0, 2);
        assert_eq!(star.evaluate(&v).unwrap(), 0.0);
        assert_eq!(ell(&star, ConeKind::S1, 0).unwrap(), 0.0);
    }

    #[test]
    fn family_examples() {
        let zero = CurvatureOperator::zero(5);
        for t in [0.0, 0.3, 2.0] {
            let c = in_cone_t(&zero, t, 0).unwrap();
            assert!(c.member);
            assert_eq!(c.worst.value, 0.0);
        }
        let neg = CurvatureOperator::identity(5).scale(-0.5);
        assert!(!in_cone_t(&neg, 0.0, 0).unwrap().member);
        assert!(ConeSpec::family(-1.0).is_err());
    }

    #[test]
    fn family_value_scales_with_time() {
        let mut g = rng::stream(9, 0);
        let x = CurvatureOperator::random(5, &mut g);
        let l = ell(&x, ConeKind::S4, 0).unwrap();
        let rm = x.shifted(l + 0.2);
        let a = in_cone_t(&rm, 0.1, 3).unwrap();
        assert!(!a.unbounded);
        assert!(a.unit_eigen_min.is_finite());
        assert_abs_diff_eq!(a.worst.value, 0.2 * a.unit_eigen_min, epsilon = 1e-9);
        let en = bivector::eigen_norms(&a.worst.argmin).unwrap();
        assert_abs_diff_eq!(en[4], 0.2f64.sqrt(), epsilon = 1e-8);
    }
}
