//! Statistical checks of the algebraic inequalities behind the evolution
//! inequality for `ell`.
//!
//! Every suite draws boundary samples from disjoint seeded streams, runs them
//! through rayon and collects results in sample order, so a report depends
//! only on `(cone, n, samples, seed)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bivector::{self, ComplexBivector, Rank2Certificate, C64};
use crate::cones::{self, boundary_sample, ConeKind, MinOptions};
use crate::curvature::{kn_product, CurvatureOperator, OperatorDoc, SymmetricTwoTensor};
use crate::error::{check_dim, reject, Result};
use crate::kaehler::{self, kaehler_cross_term, lambda_from, CrossTerm, EllTildeOptions, KaehlerCurvature};
use crate::linalg::{self, sym_eigen_sorted};
use crate::rng;
use crate::tol;

/// `(Ric . id - scal/2 I)(v, vbar)` against `sqrt(Q(v, vbar))` at a unit null
/// direction of a boundary operator.
pub fn cross_term_residual(rm_star: &CurvatureOperator, v: &ComplexBivector) -> Result<CrossTerm> {
    check_dim(rm_star.n(), v.n())?;
    let v = v.normalized()?;
    let scale = rm_star.norm().max(1.0);
    let null = rm_star.evaluate(&v)?;
    if null.abs() > tol::MEMBERSHIP * scale {
        return reject(format!("v is not a null direction: Rm*(v, vbar) = {null:e}"));
    }
    let n = rm_star.n();
    let kn = kn_product(&rm_star.ricci(), &SymmetricTwoTensor::identity(n))?;
    let defect = kn.evaluate(&v)? - 0.5 * rm_star.scalar() * v.norm_sq();
    let q = rm_star.reaction_q().evaluate(&v)?.max(0.0);
    // Defects at round-off level count as non-positive.
    let d = if defect <= tol::MEMBERSHIP * scale { 0.0 } else { defect };
    let lambda_required = lambda_from(d, q, (tol::MEMBERSHIP * scale).powi(2));
    Ok(CrossTerm { defect, q, lambda_required })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub rm_star: OperatorDoc,
    pub v: ComplexBivector,
    pub defect: f64,
    pub q: f64,
    pub lambda_required: f64,
}

impl Violation {
    /// Recomputes the cross term from the stored certificate alone.
    pub fn replay(&self) -> Result<CrossTerm> {
        let op: CurvatureOperator = self.rm_star.clone().try_into()?;
        cross_term_residual(&op, &self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub cone: String,
    pub n: usize,
    pub samples: usize,
    pub seed: u64,
    pub worst_defect: f64,
    /// Largest finite `lambda_required`; infinite cases are counted apart.
    pub lambda_empirical: f64,
    pub infinite_count: usize,
    /// Largest `|Rm*(v, vbar)|` over the samples.
    pub max_null_value: f64,
    /// Bound asserted by the suite, if any.
    pub asserted_bound: Option<f64>,
    pub tolerance: f64,
    pub violations: Vec<Violation>,
    pub pass: bool,
}

fn cross_sample(cone: ConeKind, n: usize, seed: u64, k: usize) -> Result<(cones::BoundarySample, CrossTerm)> {
    let b = boundary_sample(cone, n, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
    let ct = cross_term_residual(&b.rm_star, &b.null_dir)?;
    Ok((b, ct))
}

/// Largest `lambda_required` over boundary samples of `cone`. For `S1` the
/// bound `lambda = 0` is asserted; for the other sets only infinite values
/// (positive defect with vanishing `Q`) count as violations.
pub fn estimate_lambda(cone: ConeKind, n: usize, samples: usize, seed: u64) -> Result<VerificationReport> {
    if matches!(cone, ConeKind::Ct) {
        return reject("the time-indexed family has no cross-term suite");
    }
    cones::ConeSpec::set(cone).check_dim(n)?;
    let results: Vec<Result<(cones::BoundarySample, CrossTerm)>> = (0..samples).into_par_iter().map(|k| cross_sample(cone, n, seed, k)).collect();
    let asserted = matches!(cone, ConeKind::S1).then_some(0.0);
    let tolerance = tol::MEMBERSHIP;
    let mut rep = VerificationReport {
        cone: cone.to_string(),
        n,
        samples,
        seed,
        worst_defect: f64::NEG_INFINITY,
        lambda_empirical: 0.0,
        infinite_count: 0,
        max_null_value: 0.0,
        asserted_bound: asserted,
        tolerance,
        violations: Vec::new(),
        pass: true,
    };
    for (k, r) in results.into_iter().enumerate() {
        let (b, ct) = r?;
        rep.worst_defect = rep.worst_defect.max(ct.defect);
        rep.max_null_value = rep.max_null_value.max(b.null_value.abs());
        let bad = if ct.lambda_required.is_infinite() {
            rep.infinite_count += 1;
            true
        } else {
            rep.lambda_empirical = rep.lambda_empirical.max(ct.lambda_required);
            asserted.is_some_and(|bound| ct.lambda_required > bound + tolerance)
        };
        if bad {
            rep.violations.push(Violation {
                sample: k,
                rm_star: OperatorDoc::from(&b.rm_star),
                v: b.null_dir.clone(),
                defect: ct.defect,
                q: ct.q,
                lambda_required: finite_or_max(ct.lambda_required),
            });
        }
    }
    rep.pass = rep.violations.is_empty();
    Ok(rep)
}

fn finite_or_max(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        f64::MAX
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaehlerReport {
    pub m: usize,
    pub samples: usize,
    pub seed: u64,
    pub lambda_empirical: f64,
    pub bound: f64,
    pub infinite_count: usize,
    pub worst_defect: f64,
    /// Smallest `-Q(x, xbar, y, ybar)` before clamping.
    pub min_minus_q: f64,
    /// Smallest slack of `-Q >= |Ric(x, ybar)|^2 / m`.
    pub min_chain_slack: f64,
    pub unconverged: usize,
    pub pass: bool,
}

/// Kähler boundary sample: `R* = R + ratio I~` with the optimizer's pair.
/// The signed ratio is used, not the clamped defect, so that a random `R`
/// already inside the cone is pulled back onto its boundary.
pub fn kaehler_boundary_sample(m: usize, seed: u64) -> Result<(KaehlerCurvature, DVector<C64>, DVector<C64>, bool)> {
    let r = KaehlerCurvature::random(m, &mut rng::stream(seed, 77));
    let e = kaehler::ell_tilde(&r, &EllTildeOptions { seed, ..Default::default() })?;
    Ok((r.shifted(e.ratio), e.x, e.y, e.converged))
}

/// Cross-term constant over Kähler boundary samples, asserted against
/// `4 sqrt(m)`.
pub fn kaehler_lambda(m: usize, samples: usize, seed: u64) -> Result<KaehlerReport> {
    let bound = 4.0 * (m as f64).sqrt();
    let out: Vec<Result<(CrossTerm, f64, f64, bool)>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let (star, x, y, conv) = kaehler_boundary_sample(m, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
            let ct = kaehler_cross_term(&star, &x, &y)?;
            let (x, y) = (x.normalize(), y.normalize());
            let mq = -star.q_kaehler().evaluate_pair(&x, &y).re;
            let ric = star.ricci_k();
            // Ric(x, ybar) = R_{a bbar} x^a conj(y^b)
            let rxy: C64 = (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).map(|(a, b)| ric[(a, b)] * x[a] * y[b].conj()).sum();
            Ok((ct, mq, mq - rxy.norm_sqr() / m as f64, conv))
        })
        .collect();
    let mut rep = KaehlerReport {
        m,
        samples,
        seed,
        lambda_empirical: 0.0,
        bound,
        infinite_count: 0,
        worst_defect: f64::NEG_INFINITY,
        min_minus_q: f64::INFINITY,
        min_chain_slack: f64::INFINITY,
        unconverged: 0,
        pass: true,
    };
    for r in out {
        let (ct, mq, slack, conv) = r?;
        if ct.lambda_required.is_infinite() {
            rep.infinite_count += 1;
        } else {
            rep.lambda_empirical = rep.lambda_empirical.max(ct.lambda_required);
        }
        rep.worst_defect = rep.worst_defect.max(ct.defect);
        rep.min_minus_q = rep.min_minus_q.min(mq);
        rep.min_chain_slack = rep.min_chain_slack.min(slack);
        rep.unconverged += usize::from(!conv);
    }
    rep.pass = rep.infinite_count == 0 && rep.lambda_empirical <= bound + tol::OPTIMIZER;
    Ok(rep)
}

/// `(Q - Rm^2)(v, vbar) = Rm^#(v, vbar)` for a 2-non-negative `Rm` and
/// `v` on the quadric `tr v^2 = 0`.
pub fn q_dominates_rm2(rm: &CurvatureOperator, v: &ComplexBivector) -> Result<f64> {
    check_dim(rm.n(), v.n())?;
    let scale = rm.norm().max(1.0);
    let (vals, _) = sym_eigen_sorted(rm.form());
    if vals.len() >= 2 && vals[0] + vals[1] < -2.0 * tol::MEMBERSHIP * scale {
        return reject("operator is not 2-non-negative");
    }
    let nv = v.norm();
    if v.trace_sq().norm() > tol::CONSTRAINT * nv * nv {
        return reject("v does not satisfy tr(v^2) = 0");
    }
    let diff = rm.reaction_q().sub(&rm.square())?;
    diff.evaluate(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub n: usize,
    pub samples: usize,
    pub seed: u64,
    pub min_residual: f64,
    pub pass: bool,
}

/// Minimum of `(Q - Rm^2)(v, vbar)` over boundary pairs `(Rm*, v)` of the
/// 2-non-negative cone, with `|Rm*| = 1` and `|v| = 1`.
pub fn domination_suite(n: usize, samples: usize, seed: u64) -> Result<DominationReport> {
    let res: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let b = boundary_sample(ConeKind::S2, n, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
            let star = b.rm_star.scale(1.0 / b.rm_star.norm());
            q_dominates_rm2(&star, &b.null_dir)
        })
        .collect();
    let mut min_residual = f64::INFINITY;
    for r in res {
        min_residual = min_residual.min(r?);
    }
    Ok(DominationReport { n, samples, seed, min_residual, pass: min_residual >= -tol::MEMBERSHIP })
}

/// Sum of the `k` smallest Ricci eigenvalues of `Rm / |Rm|`.
pub fn ricci_k_sum(rm: &CurvatureOperator, k: usize) -> f64 {
    let ev = rm.ricci().eigenvalues();
    ev[..k].iter().sum::<f64>() / rm.norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RicciSearchReport {
    pub n: usize,
    pub k: usize,
    pub starts: usize,
    pub seed: u64,
    /// Worst normalized sum after re-verification with a strong optimizer.
    pub worst: f64,
    /// Worst value seen during the cheap screening phase.
    pub screened_worst: f64,
    pub refined: usize,
    pub certificate: OperatorDoc,
    pub pass: Option<bool>,
}

struct Candidate {
    x: CurvatureOperator,
    value: f64,
    warm: Option<Rank2Certificate>,
}

fn shift_to_cone(x: &CurvatureOperator, opts: &MinOptions) -> Result<(CurvatureOperator, cones::MinResult)> {
    let (l, min) = cones::ell_with(x, ConeKind::S3, opts)?;
    Ok((x.shifted(l), min))
}

fn candidate_value(x: &CurvatureOperator, k: usize, opts: &MinOptions) -> Result<Candidate> {
    let (rm, min) = shift_to_cone(x, opts)?;
    Ok(Candidate { x: x.clone(), value: ricci_k_sum(&rm, k), warm: min.certificate })
}

/// Gradient in form space of `X -> ricci_k_sum(X + ell_S3(X) I)`, using the
/// envelope identity `d ell = -Re(c c^H)` at the minimizer `c`.
fn search_gradient(x: &CurvatureOperator, k: usize, min: &cones::MinResult) -> Result<DMatrix<f64>> {
    let n = x.n();
    let l = (-min.value).max(0.0);
    let rm = x.shifted(l);
    let (vals, vecs) = sym_eigen_sorted(rm.ricci().matrix());
    let _ = vals;
    let pk = vecs.columns(0, k) * vecs.columns(0, k).transpose();
    let p = SymmetricTwoTensor::from_matrix(&pk)?;
    let grad_trace = kn_product(&p, &SymmetricTwoTensor::identity(n))?;
    let c = min.argmin.coords();
    let d = c.len();
    let dl = DMatrix::from_fn(d, d, |a, b| -(c[a] * c[b].conj()).re);
    let dl = if l > 0.0 { dl } else { DMatrix::zeros(d, d) };
    let s: f64 = rm.ricci().eigenvalues()[..k].iter().sum();
    let nrm = rm.norm();
    let ds = grad_trace.form() + &dl * ((n - 1) as f64 * k as f64);
    let dnorm = (rm.form() + &dl * rm.form().trace()) / nrm;
    let g = (ds * nrm - dnorm * s) / (nrm * nrm);
    Ok(crate::curvature::bianchi_project(&g)?.form().clone())
}

/// Adversarial search for operators in `C(S3)` with negative sum of the `k`
/// smallest Ricci eigenvalues. Each start draws `X`, moves it to the cone
/// boundary with `X + ell_S3(X) I` and records the normalized sum. The worst
/// starts are then pushed further by gradient steps. Screening uses a cheap
/// optimizer, which can only underestimate `ell` and so errs towards false
/// alarms; every candidate below zero is re-verified with many more starts.
pub fn ricci_k_nonneg_search(n: usize, k: usize, starts: usize, seed: u64) -> Result<RicciSearchReport> {
    if n < 4 || k == 0 || k > n {
        return reject("need n >= 4 and 1 <= k <= n");
    }
    let cheap = |s: u64| MinOptions::new(ConeKind::S3, s).with_starts(4);
    let screened: Vec<Result<Candidate>> = (0..starts)
        .into_par_iter()
        .map(|j| {
            let sj = seed.wrapping_mul(7_919).wrapping_add(j as u64);
            let x = CurvatureOperator::random(n, &mut rng::stream(sj, 5));
            candidate_value(&x, k, &cheap(sj))
        })
        .collect();
    let mut cands = screened.into_iter().collect::<Result<Vec<_>>>()?;
    let screened_worst = cands.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    // Stable order: by value, then by start index.
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[a].value.total_cmp(&cands[b].value).then(a.cmp(&b)));
    let refine = order.len().min(16.max(starts / 200));
    let refined: Vec<Result<Candidate>> = order[..refine]
        .par_iter()
        .map(|&j| {
            let sj = seed.wrapping_mul(104_729).wrapping_add(j as u64);
            descend(&cands[j], k, sj, 15)
        })
        .collect();
    for (slot, r) in order[..refine].iter().zip(refined) {
        cands[*slot] = r?;
    }
    // Re-verify everything that looks negative, plus the overall worst.
    let mut worst = f64::INFINITY;
    let mut cert = cands[0].x.clone();
    let mut idx: Vec<usize> = (0..cands.len()).filter(|&j| cands[j].value < 0.0).collect();
    let arg = (0..cands.len()).min_by(|&a, &b| cands[a].value.total_cmp(&cands[b].value).then(a.cmp(&b)));
    if let Some(a) = arg {
        if !idx.contains(&a) {
            idx.push(a);
        }
    }
    for j in idx {
        let c = &cands[j];
        let opts = MinOptions::new(ConeKind::S3, seed ^ 0xfeed ^ j as u64).with_starts(64).with_warm(c.warm.clone().into_iter().collect());
        let (rm, _) = shift_to_cone(&c.x, &opts)?;
        let v = ricci_k_sum(&rm, k);
        if v < worst {
            worst = v;
            cert = rm;
        }
    }
    let pass = (n >= 7 && k == 3).then_some(worst >= -tol::MEMBERSHIP);
    Ok(RicciSearchReport { n, k, starts, seed, worst, screened_worst, refined: refine, certificate: OperatorDoc::from(&cert), pass })
}

fn descend(start: &Candidate, k: usize, seed: u64, steps: usize) -> Result<Candidate> {
    let n = start.x.n();
    let mut cur = Candidate { x: start.x.clone(), value: start.value, warm: start.warm.clone() };
    let mut step = 0.5 * cur.x.norm();
    for s in 0..steps {
        let opts = MinOptions::new(ConeKind::S3, seed + s as u64).with_starts(4).with_warm(cur.warm.clone().into_iter().collect());
        let (l, min) = cones::ell_with(&cur.x, ConeKind::S3, &opts)?;
        let _ = l;
        let g = search_gradient(&cur.x, k, &min)?;
        let gn = g.norm();
        if gn < 1e-12 {
            break;
        }
        let mut moved = false;
        for _ in 0..6 {
            let trial = CurvatureOperator::from_form(n, cur.x.form() - &g * (step / gn))?;
            let cand = candidate_value(&trial, k, &opts)?;
            if cand.value < cur.value {
                cur = cand;
                moved = true;
                step *= 1.5;
                break;
            }
            step *= 0.3;
        }
        if !moved {
            break;
        }
    }
    Ok(cur)
}

/// Frame completing the real span of the null plane of `cert`.
fn null_plane_complement(cert: &Rank2Certificate) -> DMatrix<f64> {
    let n = cert.zeta.len();
    let m = DMatrix::from_fn(n, 4, |i, j| match j {
        0 => cert.zeta[i].re,
        1 => cert.zeta[i].im,
        2 => cert.eta[i].re,
        _ => cert.eta[i].im,
    });
    let q = linalg::polar_retract(&m);
    let p = DMatrix::<f64>::identity(n, n) - &q * q.transpose();
    let (_, vecs) = sym_eigen_sorted(&p);
    vecs.columns(4, n - 4).into_owned()
}

/// `Ric(e, e)` for unit `e` orthogonal to the real span of the null plane.
/// In dimension five this is the direction singled out by a null bivector of
/// the isotropic cone.
pub fn ricci_normal_to_null(rm: &CurvatureOperator, cert: &Rank2Certificate) -> Result<Vec<f64>> {
    if rm.n() < 5 {
        return reject("needs n >= 5");
    }
    let comp = null_plane_complement(cert);
    let ric = rm.ricci();
    Ok((0..comp.ncols())
        .map(|j| {
            let e = comp.column(j);
            (e.transpose() * ric.matrix() * e)[0]
        })
        .collect())
}

/// Minimum over `trials` random unit `w` of `Rm([v, w], conj [v, w])`.
pub fn second_variation_check(rm: &CurvatureOperator, v: &ComplexBivector, trials: usize, seed: u64) -> Result<f64> {
    check_dim(rm.n(), v.n())?;
    let scale = rm.norm().max(1.0);
    if !bivector::in_set(ConeKind::S3, v, 1e-8) {
        return reject("v must lie in the isotropic set");
    }
    if rm.evaluate(v)?.abs() > tol::MEMBERSHIP * scale * v.norm_sq().max(1.0) {
        return reject("v is not a null direction of Rm");
    }
    let ad = bivector::ad_operator(v);
    let d = bivector::wedge_dim(rm.n());
    let mut g = rng::stream(seed, 3);
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let w = rng::complex_vec(&mut g, d).normalize();
        let img = ComplexBivector::from_coords(rm.n(), &ad * w)?;
        worst = worst.min(rm.evaluate(&img)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn flat_and_product_examples() {
        let v = ComplexBivector::basis(4, 0, 1);
        let ct = cross_term_residual(&CurvatureOperator::zero(4), &v).unwrap();
        assert_eq!((ct.defect, ct.lambda_required), (0.0, 0.0));
        for n in 3..=6 {
            let p = SymmetricTwoTensor::coordinate_projection(n, 2);
            let star = kn_product(&p, &p).unwrap().scale(0.5);
            let ct = cross_term_residual(&star, &ComplexBivector::basis(n, 0, 2)).unwrap();
            assert_abs_diff_eq!(ct.defect, 0.0, epsilon = 1e-14);
            assert_eq!(ct.lambda_required, 0.0);
        }
        assert!(cross_term_residual(&CurvatureOperator::identity(4), &v).is_err());
    }

    #[test]
    fn s1_suite_small() {
        let rep = estimate_lambda(ConeKind::S1, 5, 200, 3).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.lambda_empirical <= 1e-8);
        let again = estimate_lambda(ConeKind::S1, 5, 200, 3).unwrap();
        assert_eq!(serde_json::to_string(&rep).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn s2_lambda_is_finite() {
        let rep = estimate_lambda(ConeKind::S2, 4, 100, 1).unwrap();
        assert_eq!(rep.infinite_count, 0);
        assert!(rep.lambda_empirical.is_finite());
    }

    #[test]
    fn domination_examples() {
        let mut g = rng::stream(2, 0);
        for n in 4..=6 {
            let v = bivector::sample_set_with(ConeKind::S2, n, &mut g).unwrap();
            let r = q_dominates_rm2(&CurvatureOperator::identity(n), &v).unwrap();
            assert_abs_diff_eq!(r, n as f64 - 2.0, epsilon = 1e-12);
            assert_eq!(q_dominates_rm2(&CurvatureOperator::zero(n), &v).unwrap(), 0.0);
        }
        let rep = domination_suite(5, 100, 4).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn second_variation_trivial_cases() {
        let v = bivector::sample_set(ConeKind::S3, 5, 1).unwrap();
        assert_eq!(second_variation_check(&CurvatureOperator::zero(5), &v, 20, 0).unwrap(), 0.0);
    }

    #[test]
    fn kaehler_suite_small() {
        let rep = kaehler_lambda(2, 50, 9).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.min_minus_q >= 0.0);
    }
}
