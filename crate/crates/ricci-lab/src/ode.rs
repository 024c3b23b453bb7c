//! The pointwise curvature ODE `Rm' = 2 Q(Rm)` and invariance experiments
//! for the cones and the time-indexed family.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bivector::Rank2Certificate;
use crate::cones::{self, ConeKind, MinOptions};
use crate::curvature::{bianchi_project_op, CurvatureOperator, OperatorDoc};
use crate::error::{reject, LabError, Result};
use crate::rng;
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Classical fourth order with a fixed step. Switches to adaptive steps
    /// once the projected blowup time is within ten percent.
    Rk4,
    /// Dormand-Prince 5(4) with step control.
    Rk45,
}

impl std::str::FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Self::Rk4),
            "rk45" | "rk45-adaptive" => Ok(Self::Rk45),
            _ => reject(format!("unknown method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub method: Method,
    /// Fixed step for rk4, initial step for rk45.
    pub dt: f64,
    /// Relative tolerance of the adaptive controller.
    pub rtol: f64,
    /// Keep every k-th accepted state (the final state is always kept).
    pub record_every: usize,
}

impl IntegrateOptions {
    pub fn new(method: Method, dt: f64) -> Self {
        Self { method, dt, rtol: 1e-10, record_every: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdeTrajectory {
    pub n: usize,
    pub times: Vec<f64>,
    #[serde(skip)]
    pub states: Vec<CurvatureOperator>,
    pub method: Method,
    pub dt: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Accepted steps taken by the adaptive controller (all of them for rk45).
    pub adaptive_steps: usize,
    pub max_local_error: f64,
    pub blowup: bool,
    pub blowup_time: Option<f64>,
    pub max_bianchi_drift: f64,
    pub reprojections: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct StateLine<'a> {
    t: f64,
    norm: f64,
    form: &'a [f64],
}

impl OdeTrajectory {
    pub fn final_state(&self) -> &CurvatureOperator {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has an initial time")
    }

    /// One JSON object per line: `{"t", "norm", "form"}`, the form stored
    /// column-major in the lexicographic wedge basis.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, s) in self.times.iter().zip(&self.states) {
            let line = StateLine { t: *t, norm: s.norm(), form: s.form().as_slice() };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

fn rhs(x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    CurvatureOperator::from_form_unchecked(n, x.clone()).reaction_q().form() * 2.0
}

fn rk4_step(x: &DMatrix<f64>, n: usize, h: f64) -> DMatrix<f64> {
    let k1 = rhs(x, n);
    let k2 = rhs(&(x + &k1 * (h / 2.0)), n);
    let k3 = rhs(&(x + &k2 * (h / 2.0)), n);
    let k4 = rhs(&(x + &k3 * h), n);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

// Dormand-Prince tableau.
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// One embedded step; returns the fifth-order update and the error estimate.
fn dp_step(x: &DMatrix<f64>, n: usize, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut k: Vec<DMatrix<f64>> = Vec::with_capacity(7);
    k.push(rhs(x, n));
    for row in DP_A.iter() {
        let mut y = x.clone();
        for (j, a) in row.iter().enumerate().take(k.len()) {
            if *a != 0.0 {
                y += &k[j] * (h * a);
            }
        }
        k.push(rhs(&y, n));
    }
    let mut y5 = x.clone();
    let mut err = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..7 {
        y5 += &k[j] * (h * DP_B5[j]);
        err += &k[j] * (h * (DP_B5[j] - DP_B4[j]));
    }
    (y5, err)
}

/// Integrates `Rm' = 2 Q(Rm)` from `rm0` up to time `t_end`, stopping early
/// once `|Rm| >= 1e6 |Rm0|`.
pub fn integrate(rm0: &CurvatureOperator, t_end: f64, dt: f64, method: Method) -> Result<OdeTrajectory> {
    integrate_with(rm0, t_end, &IntegrateOptions::new(method, dt))
}

pub fn integrate_with(rm0: &CurvatureOperator, t_end: f64, opts: &IntegrateOptions) -> Result<OdeTrajectory> {
    if !(opts.dt > 0.0) || !opts.dt.is_finite() {
        return reject("dt must be positive");
    }
    if !(t_end >= 0.0) {
        return reject("final time must be non-negative");
    }
    let n = rm0.n();
    let n0 = rm0.norm();
    let limit = tol::BLOWUP_FACTOR * n0;
    let mut traj = OdeTrajectory {
        n,
        times: vec![0.0],
        states: vec![rm0.clone()],
        method: opts.method,
        dt: opts.dt,
        accepted_steps: 0,
        rejected_steps: 0,
        adaptive_steps: 0,
        max_local_error: 0.0,
        blowup: false,
        blowup_time: None,
        max_bianchi_drift: 0.0,
        reprojections: 0,
        warnings: Vec::new(),
    };
    if n0 == 0.0 {
        // The zero operator is a fixed point.
        traj.times.push(t_end);
        traj.states.push(rm0.clone());
        return Ok(traj);
    }
    let mut x = rm0.form().clone();
    let mut t = 0.0;
    let mut h = opts.dt;
    let mut since_record = 0usize;
    while t < t_end {
        let xn = x.norm();
        let adaptive = match opts.method {
            Method::Rk45 => true,
            Method::Rk4 => {
                let rate = rhs(&x, n).norm();
                // For c' = k c^2 the remaining time to blowup is c / c'.
                let remaining = if rate > 0.0 { xn / rate } else { f64::INFINITY };
                remaining <= 0.1 * (t + remaining)
            }
        };
        let (next, step) = if adaptive {
            let atol = 1e-12 * n0;
            loop {
                let step = h.min(t_end - t);
                let (y, err) = dp_step(&x, n, step);
                let scale = atol + opts.rtol * y.norm().max(xn);
                let e = err.norm() / scale;
                if !e.is_finite() {
                    h *= 0.2;
                    traj.rejected_steps += 1;
                    if h < 1e-300 {
                        return Err(LabError::Corrupted("step size underflow".into()));
                    }
                    continue;
                }
                let fac = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
                if e <= 1.0 {
                    traj.max_local_error = traj.max_local_error.max(err.norm());
                    traj.adaptive_steps += 1;
                    let grown = step * fac;
                    h = if opts.method == Method::Rk4 { grown.min(opts.dt) } else { grown };
                    break (y, step);
                }
                traj.rejected_steps += 1;
                h = step * fac;
            }
        } else {
            let step = opts.dt.min(t_end - t);
            (rk4_step(&x, n, step), step)
        };
        t += step;
        traj.accepted_steps += 1;
        let mut op = CurvatureOperator::from_form_unchecked(n, (&next + next.transpose()) * 0.5);
        let drift = op.bianchi_residual() / op.norm().max(1.0);
        traj.max_bianchi_drift = traj.max_bianchi_drift.max(drift);
        if drift > tol::BIANCHI_DRIFT {
            traj.reprojections += 1;
            traj.warnings.push(format!("re-projected onto the Bianchi subspace at t = {t} (drift {drift:e})"));
            op = bianchi_project_op(&op);
        }
        if !op.norm().is_finite() {
            return Err(LabError::Corrupted(format!("non-finite state at t = {t}")));
        }
        x = op.form().clone();
        let blown = op.norm() >= limit;
        since_record += 1;
        let last = blown || t >= t_end;
        if last || since_record >= opts.record_every.max(1) {
            traj.times.push(t);
            traj.states.push(op);
            since_record = 0;
        }
        if blown {
            traj.blowup = true;
            traj.blowup_time = Some(t);
            break;
        }
    }
    Ok(traj)
}

/// `c0 / (1 - 2 (n - 1) c0 t)`, the curvature of the shrinking sphere.
pub fn sphere_solution(n: usize, c0: f64, t: f64) -> f64 {
    c0 / (1.0 - 2.0 * (n as f64 - 1.0) * c0 * t)
}

pub fn sphere_blowup_time(n: usize, c0: f64) -> f64 {
    1.0 / (2.0 * (n as f64 - 1.0) * c0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub cone: String,
    pub n: usize,
    pub t_end: f64,
    pub samples: usize,
    pub max_ell: f64,
    pub max_norm: f64,
    pub tolerance: f64,
    pub blowup: bool,
    pub pass: bool,
}

/// Maximum of `ell(Rm(t), cone)` over the accepted steps of the trajectory
/// from `rm0`, each minimization warm-started from the previous argmin.
pub fn invariance_test(cone: ConeKind, rm0: &CurvatureOperator, t_end: f64, seed: u64) -> Result<InvarianceReport> {
    let initial = cones::ell_with(rm0, cone, &MinOptions::new(cone, seed))?.0;
    if initial > tol::CONSTRAINT * rm0.norm().max(1.0) {
        return reject(format!("initial operator is outside the cone (ell = {initial:e})"));
    }
    let blow = projected_blowup(rm0);
    let dt = (t_end / 25.0).min(blow / 40.0).max(1e-12);
    let traj = integrate(rm0, t_end, dt, Method::Rk4)?;
    invariance_along(cone, &traj, seed)
}

fn invariance_along(cone: ConeKind, traj: &OdeTrajectory, seed: u64) -> Result<InvarianceReport> {
    let mut warm: Vec<Rank2Certificate> = Vec::new();
    let mut max_ell: f64 = 0.0;
    let mut max_norm: f64 = 0.0;
    for (k, s) in traj.states.iter().enumerate() {
        let starts = if warm.is_empty() { MinOptions::new(cone, seed).starts } else { 3 };
        let opts = MinOptions::new(cone, seed.wrapping_add(k as u64)).with_starts(starts).with_warm(warm.clone());
        let (l, min) = cones::ell_with(s, cone, &opts)?;
        warm = min.certificate.into_iter().collect();
        max_ell = max_ell.max(l);
        max_norm = max_norm.max(s.norm());
    }
    let tolerance = tol::OPTIMIZER * (1.0 + max_norm);
    Ok(InvarianceReport {
        cone: cone.to_string(),
        n: traj.n,
        t_end: traj.final_time(),
        samples: traj.states.len(),
        max_ell,
        max_norm,
        tolerance,
        blowup: traj.blowup,
        pass: max_ell <= tolerance,
    })
}

/// Rough blowup time from the largest eigenvalue, as for the sphere.
pub fn projected_blowup(rm: &CurvatureOperator) -> f64 {
    let (vals, _) = crate::linalg::sym_eigen_sorted(rm.form());
    let top = vals.iter().copied().fold(0.0_f64, f64::max).max(rm.norm() / (rm.dim() as f64).sqrt());
    if top <= 0.0 {
        f64::INFINITY
    } else {
        sphere_blowup_time(rm.n(), top)
    }
}

/// Random operator inside the cone, `X + (ell(X) + margin |X|) I`.
pub fn random_in_cone(cone: ConeKind, n: usize, margin: f64, seed: u64) -> Result<CurvatureOperator> {
    let x = CurvatureOperator::random(n, &mut rng::stream(seed, 11));
    let opts = MinOptions::new(cone, seed).with_starts(3 * MinOptions::new(cone, seed).starts);
    let (l, _) = cones::ell_with(&x, cone, &opts)?;
    Ok(x.shifted(l + margin * x.norm()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyPoint {
    pub t: f64,
    pub member: bool,
    /// `lambda(t)`: infimum of `Rm(t)(v, vbar)` over rank-two `v` with
    /// eigenvalues `+-1`. Membership is `2 t lambda >= -1`.
    pub lambda: f64,
    pub worst: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyReport {
    pub n: usize,
    pub t0: f64,
    pub t_end: f64,
    pub points: Vec<FamilyPoint>,
    pub all_members: bool,
    /// Worst of `2 t lambda(t) + 1` over the grid (non-negative for members).
    pub min_slack: f64,
    /// Discrete check `(lambda(t+h) - lambda(t)) / h >= min 2 lambda^2 - tol`
    /// at grid points with negative `lambda`.
    pub derivative_checks: usize,
    pub derivative_violations: usize,
    pub worst_derivative_gap: f64,
    pub blowup: bool,
    pub pass: bool,
}

/// Evolves `rm0` from time `t0` and checks membership of `Rm(t)` in the
/// family at time `t` on a uniform grid of `steps` intervals.
pub fn pic1_family_test(rm0: &CurvatureOperator, t0: f64, t_end: f64, steps: usize, seed: u64) -> Result<FamilyReport> {
    if !(t_end > t0) || steps == 0 {
        return reject("need t_end > t0 and at least one step");
    }
    let first = cones::in_cone_t(rm0, t0, seed)?;
    if !first.member {
        return reject("initial operator is not in the family at t0");
    }
    let n = rm0.n();
    let h = (t_end - t0) / steps as f64;
    let blow = projected_blowup(rm0);
    let dt = (h / 4.0).min(blow / 200.0);
    let mut points = Vec::with_capacity(steps + 1);
    let mut state = rm0.clone();
    let mut warm: Vec<Rank2Certificate> = Vec::new();
    let mut blowup = false;
    for k in 0..=steps {
        let t = t0 + h * k as f64;
        if k > 0 {
            let sub = ((h / dt).ceil() as usize).max(1);
            let traj = integrate_with(&state, h, &IntegrateOptions { record_every: sub * 4, ..IntegrateOptions::new(Method::Rk4, h / sub as f64) })?;
            state = traj.final_state().clone();
            if traj.blowup {
                blowup = true;
                break;
            }
        }
        let mut opts = MinOptions::new(ConeKind::Ct, seed.wrapping_add(k as u64)).with_warm(warm.clone());
        if !warm.is_empty() {
            opts.starts = 6;
        }
        let chk = cones::in_cone_t_with(&state, t, &opts)?;
        if let Some(c) = &chk.worst.certificate {
            warm = vec![c.clone()];
        }
        points.push(FamilyPoint { t, member: chk.member, lambda: chk.unit_eigen_min, worst: chk.worst.value, norm: state.norm() });
    }
    let all_members = points.iter().all(|p| p.member);
    let min_slack = points.iter().filter(|p| p.t > 0.0).map(|p| 2.0 * p.t * p.lambda + 1.0).fold(f64::INFINITY, f64::min);
    let mut checks = 0;
    let mut viol = 0;
    let mut gap = f64::INFINITY;
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.lambda < 0.0 && a.lambda.is_finite() && b.lambda.is_finite() {
            checks += 1;
            let fd = (b.lambda - a.lambda) / (b.t - a.t);
            let lower = 2.0 * a.lambda.powi(2).min(b.lambda.powi(2));
            let g = fd - lower;
            gap = gap.min(g);
            if g < -tol::OPTIMIZER * (1.0 + a.lambda.powi(2)) {
                viol += 1;
            }
        }
    }
    Ok(FamilyReport {
        n,
        t0,
        t_end,
        points,
        all_members,
        min_slack,
        derivative_checks: checks,
        derivative_violations: viol,
        worst_derivative_gap: gap,
        blowup,
        pass: all_members,
    })
}

/// Initial data sitting on the boundary of the family at its own `t0`:
/// `Rm0 = X + (ell_S4(X) + margin |X|) I` and `t0 = -1 / (2 lambda0)`.
pub fn family_initial_data(n: usize, margin: f64, seed: u64) -> Result<(CurvatureOperator, f64)> {
    for attempt in 0..16u64 {
        let s = seed.wrapping_mul(31).wrapping_add(attempt);
        let rm0 = random_in_cone(ConeKind::S4, n, margin, s)?;
        let (lam, _, _) = cones::unit_eigen_min(&rm0, &MinOptions::new(ConeKind::Ct, s).with_starts(32))?;
        if lam < 0.0 {
            // A hair above the boundary so the initial membership test passes.
            return Ok((rm0, -1.0 / (2.0 * lam) * (1.0 - 1e-9)));
        }
    }
    Err(LabError::Diagnostic("no initial operator with negative lambda".into()))
}

/// Serializable snapshot of an operator with its time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimedOperator {
    pub t: f64,
    pub operator: OperatorDoc,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_oracle_n3() {
        let tr = integrate(&CurvatureOperator::identity(3), 0.2, 1e-4, Method::Rk4).unwrap();
        let c = tr.final_state().form()[(0, 0)];
        assert_relative_eq!(c, 5.0, max_relative = 1e-6);
        assert!(!tr.blowup);
        assert_eq!(tr.adaptive_steps, 0);
    }

    #[test]
    fn surface_case_and_zero() {
        let k0 = CurvatureOperator::identity(2).scale(0.7);
        let tr = integrate(&k0, 0.5, 1e-3, Method::Rk45).unwrap();
        assert_relative_eq!(tr.final_state().form()[(0, 0)], 0.7 / (1.0 - 1.4 * 0.5), max_relative = 1e-8);
        let z = integrate(&CurvatureOperator::zero(4), 1.0, 0.1, Method::Rk4).unwrap();
        assert_eq!(z.final_state().norm(), 0.0);
    }

    #[test]
    fn blowup_is_truncated() {
        let tr = integrate(&CurvatureOperator::identity(3), 1.0, 1e-3, Method::Rk4).unwrap();
        assert!(tr.blowup);
        let tb = tr.blowup_time.unwrap();
        assert!((tb - 0.25).abs() < 1e-5, "{tb}");
        assert!(tr.adaptive_steps > 0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(integrate(&CurvatureOperator::identity(3), 1.0, 0.0, Method::Rk4).is_err());
        assert!(integrate(&CurvatureOperator::identity(3), 1.0, -1e-3, Method::Rk45).is_err());
    }

    #[test]
    fn identity_stays_in_every_cone() {
        let rep = invariance_test(ConeKind::S4, &CurvatureOperator::identity(4), 0.05, 1).unwrap();
        assert!(rep.pass && rep.max_ell == 0.0, "{rep:?}");
    }

    #[test]
    fn jsonl_lines() {
        let tr = integrate(&CurvatureOperator::identity(3), 0.01, 1e-3, Method::Rk4).unwrap();
        let mut buf = Vec::new();
        tr.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), tr.states.len());
        let v: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(v["form"].as_array().unwrap().len(), 9);
    }
}
