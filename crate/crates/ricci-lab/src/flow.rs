//! Rotationally symmetric Ricci flow `ds^2 = psi^2 dx^2 + phi^2 g_{S^{n-1}}`
//! in a fixed background coordinate `x`.
//!
//! Under `dg/dt = -2 Ric` the two factors obey
//! `d log psi / dt = -(n-1) K_rad` and
//! `d log phi / dt = -(K_rad + (n-2) K_sph)`,
//! with `K_rad = -phi_ss / phi`, `K_sph = (1 - phi_s^2) / phi^2` and
//! `d/ds = psi^{-1} d/dx`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bivector::wedge_index;
use crate::bivector::Rank2Certificate;
use crate::cones::{self, ConeKind, MinOptions};
use crate::curvature::CurvatureOperator;
use crate::error::{reject, LabError, Result};
use crate::rng;
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Closed sphere: poles at both ends of `[0, L]`.
    Sphere,
    /// Disc with a pole at `x = 0` and the outer boundary held fixed.
    Cap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpedFlowState {
    pub n: usize,
    pub topology: Topology,
    pub x: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureField {
    pub k_rad: Vec<f64>,
    pub k_sph: Vec<f64>,
    pub scal: Vec<f64>,
}

/// Closure slope `phi_x` at a pole from the odd extension, exact for cubics.
fn pole_slope(p1: f64, p2: f64, h: f64) -> f64 {
    (8.0 * p1 - p2) / (6.0 * h)
}

/// Sets `psi` at the poles so that the discrete closure `phi_s = +-1` holds.
fn close_poles(topology: Topology, psi: &mut [f64], phi: &[f64], h: f64) {
    let j = psi.len() - 1;
    psi[0] = pole_slope(phi[1], phi[2], h);
    if topology == Topology::Sphere {
        psi[j] = pole_slope(phi[j - 1], phi[j - 2], h);
    }
}

impl WarpedFlowState {
    /// Validates positivity and smooth closure at the poles.
    pub fn new(n: usize, topology: Topology, x: Vec<f64>, psi: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return reject("dimension must be at least 2");
        }
        if x.len() < 5 || psi.len() != x.len() || phi.len() != x.len() {
            return reject("grid, psi and phi need equal length >= 5");
        }
        let h = x[1] - x[0];
        for w in x.windows(2) {
            if !(w[1] > w[0]) || ((w[1] - w[0]) - h).abs() > 1e-9 * h {
                return reject("grid must be uniform and strictly increasing");
            }
        }
        let s = Self { n, topology, x, psi, phi, time: 0.0 };
        s.validate()?;
        let j = s.len() - 1;
        let c0 = pole_slope(s.phi[1], s.phi[2], h) / s.psi[0];
        if (c0 - 1.0).abs() > 1e-6 {
            return reject(format!("phi_s = {c0} at the first pole, expected 1"));
        }
        if topology == Topology::Sphere {
            let c1 = pole_slope(s.phi[j - 1], s.phi[j - 2], h) / s.psi[j];
            if (c1 - 1.0).abs() > 1e-6 {
                return reject(format!("phi_s = {} at the second pole, expected -1", -c1));
            }
        }
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let j = self.len() - 1;
        if self.psi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(LabError::Corrupted("psi must be positive and finite".into()));
        }
        let interior_end = if self.topology == Topology::Sphere { j } else { j + 1 };
        if self.phi[1..interior_end].iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(LabError::Corrupted("phi must be positive in the interior".into()));
        }
        if self.phi[0] != 0.0 || (self.topology == Topology::Sphere && self.phi[j] != 0.0) {
            return Err(LabError::Corrupted("phi must vanish at the poles".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    fn uniform(j: usize, length: f64) -> Vec<f64> {
        (0..=j).map(|k| length * k as f64 / j as f64).collect()
    }

    /// Unit round sphere, `phi = sin x` on `[0, pi]` with `J` intervals.
    pub fn round_sphere(n: usize, j: usize) -> Result<Self> {
        let x = Self::uniform(j, std::f64::consts::PI);
        let mut phi: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        phi[j] = 0.0;
        let mut psi = vec![1.0; j + 1];
        close_poles(Topology::Sphere, &mut psi, &phi, x[1] - x[0]);
        Self::new(n, Topology::Sphere, x, psi, phi)
    }

    /// Flat disc of radius `length`.
    pub fn flat_cap(n: usize, j: usize, length: f64) -> Result<Self> {
        let x = Self::uniform(j, length);
        let phi = x.clone();
        Self::new(n, Topology::Cap, x, vec![1.0; j + 1], phi)
    }

    /// Hyperbolic disc, `phi = sinh x`.
    pub fn hyperbolic_cap(n: usize, j: usize, length: f64) -> Result<Self> {
        let x = Self::uniform(j, length);
        let phi: Vec<f64> = x.iter().map(|v| v.sinh()).collect();
        let mut psi = vec![1.0; j + 1];
        close_poles(Topology::Cap, &mut psi, &phi, x[1] - x[0]);
        Self::new(n, Topology::Cap, x, psi, phi)
    }

    /// Round sphere deformed conformally by `w = 1 + a p(x)`, with `p` a
    /// seeded combination of `cos 2x, cos 4x, cos 6x` scaled to `max |p| = 1`.
    /// Both factors are multiplied by `w`, which keeps the closure exact.
    pub fn perturbed_sphere(n: usize, j: usize, amplitude: f64, seed: u64) -> Result<Self> {
        let coeffs = deformation(seed);
        let x = Self::uniform(j, std::f64::consts::PI);
        let w: Vec<f64> = x.iter().map(|v| 1.0 + amplitude * profile(&coeffs, *v)).collect();
        let mut phi: Vec<f64> = x.iter().zip(&w).map(|(v, w)| v.sin() * w).collect();
        phi[j] = 0.0;
        let mut psi = w;
        close_poles(Topology::Sphere, &mut psi, &phi, x[1] - x[0]);
        Self::new(n, Topology::Sphere, x, psi, phi)
    }

    /// `phi_x` at every node, fourth order in the interior with odd ghost
    /// values across the poles.
    fn phi_x(&self) -> Vec<f64> {
        let j = self.len() - 1;
        let h = self.spacing();
        let sphere = self.topology == Topology::Sphere;
        let at = |k: isize| -> f64 {
            if k < 0 {
                -self.phi[(-k) as usize]
            } else if k as usize > j {
                // Only reached for spheres.
                -self.phi[2 * j - k as usize]
            } else {
                self.phi[k as usize]
            }
        };
        (0..=j)
            .map(|k| {
                let ki = k as isize;
                if !sphere && k + 1 >= j {
                    if k == j {
                        (self.phi[j] - self.phi[j - 1]) / h
                    } else {
                        (self.phi[k + 1] - self.phi[k - 1]) / (2.0 * h)
                    }
                } else {
                    (-at(ki + 2) + 8.0 * at(ki + 1) - 8.0 * at(ki - 1) + at(ki - 2)) / (12.0 * h)
                }
            })
            .collect()
    }

    /// `(1/psi) d/dx ((1/psi) d f/dx)` at interior node `k`.
    fn staggered_second(&self, f: &[f64], k: usize) -> f64 {
        let h = self.spacing();
        let pr = 0.5 * (self.psi[k] + self.psi[k + 1]);
        let pl = 0.5 * (self.psi[k] + self.psi[k - 1]);
        ((f[k + 1] - f[k]) / pr - (f[k] - f[k - 1]) / pl) / (h * h * self.psi[k])
    }

    fn last_interior(&self) -> usize {
        self.len() - 2
    }

    pub fn curvature(&self) -> Result<CurvatureField> {
        self.validate()?;
        let j = self.len() - 1;
        let n = self.n as f64;
        let px = self.phi_x();
        let mut k_rad = vec![0.0; j + 1];
        let mut k_sph = vec![0.0; j + 1];
        for k in 1..=self.last_interior() {
            let phi_ss = self.staggered_second(&self.phi, k);
            let phi_s = px[k] / self.psi[k];
            k_rad[k] = -phi_ss / self.phi[k];
            k_sph[k] = (1.0 - phi_s * phi_s) / (self.phi[k] * self.phi[k]);
        }
        // Even functions of the distance to a pole: K(0) = (4 K(h) - K(2h)) / 3.
        let kp = (4.0 * k_rad[1] - k_rad[2]) / 3.0;
        k_rad[0] = kp;
        k_sph[0] = kp;
        if self.topology == Topology::Sphere {
            let kq = (4.0 * k_rad[j - 1] - k_rad[j - 2]) / 3.0;
            k_rad[j] = kq;
            k_sph[j] = kq;
        } else {
            k_rad[j] = 2.0 * k_rad[j - 1] - k_rad[j - 2];
            k_sph[j] = 2.0 * k_sph[j - 1] - k_sph[j - 2];
        }
        let scal = k_rad.iter().zip(&k_sph).map(|(a, b)| 2.0 * (n - 1.0) * a + (n - 1.0) * (n - 2.0) * b).collect();
        Ok(CurvatureField { k_rad, k_sph, scal })
    }

    /// Largest step accepted by [`step`](Self::step):
    /// `0.5 min(psi dx)^2 / (n - 1 + max|K| min(psi dx)^2)`.
    pub fn stable_dt(&self, field: &CurvatureField) -> f64 {
        let h = self.spacing();
        let m = self.psi.iter().fold(f64::INFINITY, |a, p| a.min(p * h));
        let kmax = field.k_rad.iter().chain(&field.k_sph).fold(0.0_f64, |a, k| a.max(k.abs()));
        0.5 * m * m / ((self.n as f64 - 1.0) + kmax * m * m)
    }

    /// One forward Euler step of the coupled system.
    pub fn step(&self, dt: f64) -> Result<Self> {
        let field = self.curvature()?;
        self.step_with(&field, dt)
    }

    fn step_with(&self, field: &CurvatureField, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return reject("time step must be positive");
        }
        let bound = self.stable_dt(field);
        if dt > bound * (1.0 + 1e-12) {
            return reject(format!("dt = {dt:e} exceeds the stability bound {bound:e}"));
        }
        let n = self.n as f64;
        let h = self.spacing();
        let v = self.gauge_field();
        let m = self.last_interior();
        // Split V = psi_x / psi^3 + rest; the first part gives psi its
        // diffusion and is differenced on the compact stencil.
        let psi_v_rest: Vec<f64> = (0..self.len())
            .map(|k| {
                if k == 0 || k > m {
                    0.0
                } else {
                    let px = (self.psi[k + 1] - self.psi[k - 1]) / (2.0 * h);
                    self.psi[k] * (v[k] - px / self.psi[k].powi(3))
                }
            })
            .collect();
        let phi_x = self.phi_x();
        let mut next = self.clone();
        for k in 1..=m {
            let kr = field.k_rad[k];
            let ks = field.k_sph[k];
            let pr = 0.5 * (self.psi[k] + self.psi[k + 1]);
            let pl = 0.5 * (self.psi[k] + self.psi[k - 1]);
            let diff = ((self.psi[k + 1] - self.psi[k]) / (pr * pr) - (self.psi[k] - self.psi[k - 1]) / (pl * pl)) / (h * h);
            let rest = if k == m && self.topology == Topology::Cap {
                (psi_v_rest[k] - psi_v_rest[k - 1]) / h
            } else {
                (psi_v_rest[k + 1] - psi_v_rest[k - 1]) / (2.0 * h)
            };
            next.phi[k] = self.phi[k] + dt * (-self.phi[k] * (kr + (n - 2.0) * ks) + phi_x[k] * v[k]);
            next.psi[k] = self.psi[k] + dt * (-(n - 1.0) * kr * self.psi[k] + diff + rest);
        }
        close_poles(self.topology, &mut next.psi, &next.phi, h);
        next.time = self.time + dt;
        next.validate()?;
        Ok(next)
    }

    /// Background warping `b` and `b'` the gauge is measured against.
    fn background(&self, x: f64) -> (f64, f64) {
        match self.topology {
            Topology::Sphere => (x.sin(), x.cos()),
            Topology::Cap => (x, 1.0),
        }
    }

    /// DeTurck vector field `V = g^{ij} (Gamma^x_ij - Gamma_bg^x_ij)` with
    /// respect to `dx^2 + b(x)^2 g_{S^{n-1}}`; zero at the poles.
    pub fn gauge_field(&self) -> Vec<f64> {
        let h = self.spacing();
        let n = self.n as f64;
        let px = self.phi_x();
        let mut v = vec![0.0; self.len()];
        for k in 1..=self.last_interior() {
            let psi = self.psi[k];
            let phi = self.phi[k];
            let psi_x = (self.psi[k + 1] - self.psi[k - 1]) / (2.0 * h);
            let (b, db) = self.background(self.x[k]);
            v[k] = psi_x / psi.powi(3) - (n - 1.0) * (px[k] / (phi * psi * psi) - b * db / (phi * phi));
        }
        v
    }

    /// Arclength from `x = 0` by the trapezoid rule.
    pub fn arclength(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut s = vec![0.0; self.len()];
        for k in 1..self.len() {
            s[k] = s[k - 1] + 0.5 * h * (self.psi[k] + self.psi[k - 1]);
        }
        s
    }

    /// Riemannian volume density `psi phi^(n-1)` per unit `x` (without the
    /// area of the unit sphere).
    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().zip(&self.phi).map(|(p, f)| p * f.powi(self.n as i32 - 1)).collect()
    }

    /// Radial Laplacian `(1/psi)((1/psi) f_x)_x + (n-1)(phi_s/phi) f_s` at
    /// interior nodes; pole values are left at zero.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let h = self.spacing();
        let px = self.phi_x();
        let mut out = vec![0.0; self.len()];
        for k in 1..=self.last_interior() {
            let fs = (f[k + 1] - f[k - 1]) / (2.0 * h * self.psi[k]);
            let phi_s = px[k] / self.psi[k];
            out[k] = self.staggered_second(f, k) + (self.n as f64 - 1.0) * phi_s / self.phi[k] * fs;
        }
        out
    }
}

fn deformation(seed: u64) -> [f64; 3] {
    let mut g = rng::stream(seed, 21);
    let mut c = [0.0; 3];
    for (k, ck) in c.iter_mut().enumerate() {
        // Decaying weights keep the deformation low frequency.
        *ck = rng::normal(&mut g) / (k + 1) as f64;
    }
    if c[0].abs() < 0.3 {
        c[0] = 0.3_f64.copysign(c[0] + 1e-300);
    }
    // max |p| over a fine grid, so that |a| < 1 keeps w positive.
    let m = (0..=2000).map(|i| profile_raw(&c, std::f64::consts::PI * i as f64 / 2000.0).abs()).fold(0.0, f64::max);
    c.map(|v| v / m)
}

fn profile_raw(c: &[f64; 3], x: f64) -> f64 {
    c.iter().enumerate().map(|(k, ck)| ck * (2.0 * (k + 1) as f64 * x).cos()).sum()
}

fn profile(c: &[f64; 3], x: f64) -> f64 {
    profile_raw(c, x)
}

impl CurvatureField {
    /// Pointwise curvature operator in a frame `e_0 = d/ds, e_1..e_{n-1}`
    /// tangent to the spheres.
    pub fn operator_at(&self, n: usize, k: usize) -> CurvatureOperator {
        let d = n * (n - 1) / 2;
        let mut form = nalgebra::DMatrix::zeros(d, d);
        for a in 0..n {
            for b in a + 1..n {
                let idx = wedge_index(n, a, b);
                form[(idx, idx)] = if a == 0 { self.k_rad[k] } else { self.k_sph[k] };
            }
        }
        CurvatureOperator::from_form_unchecked(n, form)
    }

    /// `max_k max(|K_rad|, |K_sph|)`, which is the largest eigenvalue modulus of `Rm`.
    pub fn max_abs(&self) -> f64 {
        self.k_rad.iter().chain(&self.k_sph).fold(0.0_f64, |a, k| a.max(k.abs()))
    }
}

/// `ell` at every grid point. `S1` uses `max(0, -min(K_rad, K_sph))`; the
/// other sets go through the optimizers with warm starts along the grid.
pub fn ell_field(state: &WarpedFlowState, cone: ConeKind, seed: u64) -> Result<Vec<f64>> {
    let field = state.curvature()?;
    ell_field_from(&field, state.n, cone, seed)
}

pub fn ell_field_from(field: &CurvatureField, n: usize, cone: ConeKind, seed: u64) -> Result<Vec<f64>> {
    if cone == ConeKind::S1 {
        return Ok(field.k_rad.iter().zip(&field.k_sph).map(|(a, b)| (-a.min(*b)).max(0.0)).collect());
    }
    ell_field_optimizer(field, n, cone, seed)
}

/// The optimizer path for every set, including `S1`.
pub fn ell_field_optimizer(field: &CurvatureField, n: usize, cone: ConeKind, seed: u64) -> Result<Vec<f64>> {
    let mut warm: Vec<Rank2Certificate> = Vec::new();
    let mut out = Vec::with_capacity(field.k_rad.len());
    for k in 0..field.k_rad.len() {
        let op = field.operator_at(n, k);
        let mut opts = MinOptions::new(cone, seed.wrapping_add(k as u64)).with_warm(warm.clone());
        if !warm.is_empty() {
            opts.starts = 2;
        }
        let (l, m) = cones::ell_with(&op, cone, &opts)?;
        warm = m.certificate.into_iter().collect();
        out.push(l);
    }
    Ok(out)
}

/// Snapshots at uniformly spaced output times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowHistory {
    pub dt: f64,
    pub output_every: usize,
    pub states: Vec<WarpedFlowState>,
    /// Set when the run stopped on a non-physical state or on exceeding the
    /// curvature threshold.
    pub stopped_early: bool,
    pub stop_reason: Option<String>,
    /// Last computed state, recorded or not.
    pub last: WarpedFlowState,
}

impl FlowHistory {
    pub fn output_dt(&self) -> f64 {
        self.dt * self.output_every as f64
    }

    pub fn final_state(&self) -> &WarpedFlowState {
        &self.last
    }

    /// Every `k`-th snapshot, for coarser output spacing.
    pub fn subsample(&self, k: usize) -> FlowHistory {
        FlowHistory {
            dt: self.dt,
            output_every: self.output_every * k,
            states: self.states.iter().step_by(k).cloned().collect(),
            stopped_early: self.stopped_early,
            stop_reason: self.stop_reason.clone(),
            last: self.last.clone(),
        }
    }

    /// CSV with columns `t,x,phi,psi,K_rad,K_sph,scal,ell` (`ell` for `S1`).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| LabError::Diagnostic(e.to_string());
        writeln!(w, "t,x,phi,psi,K_rad,K_sph,scal,ell").map_err(io)?;
        for s in &self.states {
            let f = s.curvature()?;
            let l = ell_field_from(&f, s.n, ConeKind::S1, 0)?;
            for k in 0..s.len() {
                writeln!(w, "{},{},{},{},{},{},{},{}", s.time, s.x[k], s.phi[k], s.psi[k], f.k_rad[k], f.k_sph[k], f.scal[k], l[k]).map_err(io)?;
            }
        }
        Ok(())
    }

    /// One snapshot per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.states {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w).map_err(|e| LabError::Diagnostic(e.to_string()))?;
        }
        Ok(())
    }
}

/// Runs the flow with a fixed step until `t_end`, keeping every
/// `output_every`-th state. A corrupted state or curvature beyond `1e6`
/// times the initial maximum ends the run early with the last good state.
pub fn run_flow(initial: &WarpedFlowState, t_end: f64, dt: f64, output_every: usize) -> Result<FlowHistory> {
    if !(dt > 0.0) || output_every == 0 {
        return reject("need dt > 0 and output_every >= 1");
    }
    let steps = (t_end / dt).round() as usize;
    let k0 = initial.curvature()?.max_abs().max(1.0);
    let mut hist = FlowHistory { dt, output_every, states: vec![initial.clone()], stopped_early: false, stop_reason: None, last: initial.clone() };
    let mut cur = initial.clone();
    for k in 1..=steps {
        let field = cur.curvature()?;
        if field.max_abs() > tol::BLOWUP_FACTOR * k0 {
            hist.stopped_early = true;
            hist.stop_reason = Some(format!("curvature threshold at t = {}", cur.time));
            break;
        }
        match cur.step_with(&field, dt) {
            Ok(mut next) => {
                // Keep times on the exact grid.
                next.time = initial.time + dt * k as f64;
                cur = next;
            }
            Err(LabError::Rejected(msg)) => {
                hist.stopped_early = true;
                hist.stop_reason = Some(msg);
                break;
            }
            Err(e) => {
                hist.stopped_early = true;
                hist.stop_reason = Some(e.to_string());
                break;
            }
        }
        if k % output_every == 0 {
            hist.states.push(cur.clone());
        }
    }
    hist.last = cur;
    Ok(hist)
}

/// A step comfortably inside the stability bound for the whole run:
/// `safety` times the bound evaluated on the initial state.
pub fn default_dt(initial: &WarpedFlowState, safety: f64) -> Result<f64> {
    let f = initial.curvature()?;
    Ok(safety * initial.stable_dt(&f))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub cone: String,
    pub c: f64,
    pub max_residual: f64,
    /// `(snapshot index, grid index)` of the maximum.
    pub argmax: Option<(usize, usize)>,
    pub points: usize,
    /// Smallest `C` that makes the residual non-positive at every checked
    /// point, given the rest of the inequality.
    pub minimal_c: f64,
}

/// Discrete residual of `d ell/dt <= Delta ell + scal ell + C ell^2` with a
/// forward difference in time and centered differences in space, over
/// interior points whose whole stencil has `ell > ELL_FLOOR`. For `S1` the
/// stencil must additionally stay on one smooth branch of
/// `max(-K_rad, -K_sph)`.
pub fn evolution_residual(history: &FlowHistory, cone: ConeKind, c: f64) -> Result<ResidualReport> {
    if history.states.len() < 2 {
        return reject("need at least two snapshots");
    }
    let dt = history.output_dt();
    let fields = history.states.iter().map(|s| s.curvature()).collect::<Result<Vec<_>>>()?;
    let ells = fields.iter().zip(&history.states).map(|(f, s)| ell_field_from(f, s.n, cone, 0)).collect::<Result<Vec<_>>>()?;
    let branch = |f: &CurvatureField, k: usize| f.k_rad[k] <= f.k_sph[k];
    let mut rep = ResidualReport { cone: cone.to_string(), c, max_residual: f64::NEG_INFINITY, argmax: None, points: 0, minimal_c: 0.0 };
    for t in 0..history.states.len() - 1 {
        let s = &history.states[t];
        let lap = s.laplacian(&ells[t]);
        let v = s.gauge_field();
        let h = s.spacing();
        for k in 1..=s.last_interior() {
            let stencil = [(t, k - 1), (t, k), (t, k + 1), (t + 1, k)];
            if stencil.iter().any(|&(a, b)| ells[a][b] <= tol::ELL_FLOOR) {
                continue;
            }
            if cone == ConeKind::S1 {
                let b0 = branch(&fields[t], k);
                if stencil.iter().any(|&(a, b)| branch(&fields[a], b) != b0) {
                    continue;
                }
            }
            let l = ells[t][k];
            // Time derivative at a fixed point of the manifold: the gauge
            // moves points with velocity V.
            let lhs = (ells[t + 1][k] - l) / dt - v[k] * (ells[t][k + 1] - ells[t][k - 1]) / (2.0 * h);
            let rest = lhs - lap[k] - fields[t].scal[k] * l;
            let r = rest - c * l * l;
            rep.points += 1;
            rep.minimal_c = rep.minimal_c.max(rest / (l * l));
            if r > rep.max_residual {
                rep.max_residual = r;
                rep.argmax = Some((t, k));
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlmostPreservationReport {
    pub epsilon: f64,
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    pub amplitude: f64,
    pub sup_ell: f64,
    /// `sup_t sup_x ell / epsilon`.
    pub amplification: f64,
    /// `sup_t t max_x |Rm|`.
    pub sup_t_rm: f64,
    pub tau: f64,
    pub tau_reached: f64,
    pub stopped_early: bool,
}

/// Amplitude of the seeded deformation whose initial `ell` (for `S1`) has
/// maximum `epsilon`, by bisection.
pub fn calibrate_amplitude(n: usize, resolution: usize, epsilon: f64, seed: u64) -> Result<f64> {
    let sup_ell = |a: f64| -> Result<f64> {
        let s = WarpedFlowState::perturbed_sphere(n, resolution, a, seed)?;
        Ok(ell_field(&s, ConeKind::S1, 0)?.into_iter().fold(0.0, f64::max))
    };
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    // Negative curvature needs a sizeable deformation; find a bracket first.
    let (mut lo, mut hi) = (0.0, 0.0);
    for &a in &[0.3, 0.5, 0.7, 0.8, 0.9, 0.95] {
        if sup_ell(a)? >= epsilon {
            hi = a;
            break;
        }
        lo = a;
    }
    if hi == 0.0 {
        return Err(LabError::Diagnostic(format!("deformation with seed {seed} never reaches ell = {epsilon}")));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if sup_ell(mid)? >= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Flows the calibrated perturbed sphere to `tau = 0.1` and reports how
/// much `ell` grows and how `t |Rm|` behaves.
pub fn almost_preservation_experiment(epsilon: f64, n: usize, resolution: usize, seed: u64) -> Result<AlmostPreservationReport> {
    if !(0.0..=1.0).contains(&epsilon) {
        return reject("epsilon must lie in [0, 1]");
    }
    let tau = 0.1;
    let amplitude = calibrate_amplitude(n, resolution, epsilon, seed)?;
    let init = WarpedFlowState::perturbed_sphere(n, resolution, amplitude, seed)?;
    let dt = default_dt(&init, 0.25)?;
    let steps = (tau / dt).ceil();
    let dt = tau / steps;
    let hist = run_flow(&init, tau, dt, 1)?;
    let mut sup_ell: f64 = 0.0;
    let mut sup_t_rm: f64 = 0.0;
    for s in &hist.states {
        let f = s.curvature()?;
        let l = ell_field_from(&f, n, ConeKind::S1, 0)?;
        sup_ell = sup_ell.max(l.into_iter().fold(0.0, f64::max));
        sup_t_rm = sup_t_rm.max(s.time * f.max_abs());
    }
    Ok(AlmostPreservationReport {
        epsilon,
        n,
        resolution,
        seed,
        amplitude,
        sup_ell,
        amplification: if epsilon > 0.0 { sup_ell / epsilon } else { 0.0 },
        sup_t_rm,
        tau,
        tau_reached: hist.final_state().time,
        stopped_early: hist.stopped_early,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub resolutions: Vec<usize>,
    pub output_spacings: Vec<f64>,
    /// Max residual at each spatial resolution (time spacing fixed).
    pub space_max: Vec<f64>,
    /// Max residual at each output spacing (finest grid).
    pub time_max: Vec<f64>,
    /// `log2` of successive differences on shared grid points.
    pub space_exponent: f64,
    pub time_exponent: f64,
    pub c1: f64,
    pub c2: f64,
    /// Tolerance `c1 dx^2 + c2 dt + 1e-6` at the base resolution.
    pub tolerance: f64,
    pub base_residual: f64,
    pub minimal_c: f64,
    pub pass: bool,
}

// Coarse cells next to each pole left out of the refinement study: the pole
// closure is only first-order accurate there.
const POLE_CELLS: usize = 3;

fn residual_field(history: &FlowHistory, c: f64, stride: usize) -> Result<Vec<Option<f64>>> {
    // Residual at coarse nodes k * stride, at every snapshot pair.
    let dt = history.output_dt();
    let mut out = Vec::new();
    for t in 0..history.states.len() - 1 {
        let s = &history.states[t];
        let f = s.curvature()?;
        let f1 = history.states[t + 1].curvature()?;
        let l = ell_field_from(&f, s.n, ConeKind::S1, 0)?;
        let l1 = ell_field_from(&f1, s.n, ConeKind::S1, 0)?;
        let lap = s.laplacian(&l);
        let v = s.gauge_field();
        let h = s.spacing();
        let coarse = (s.len() - 1) / stride;
        for kc in 1..coarse {
            let k = kc * stride;
            let ok = kc >= POLE_CELLS
                && kc + POLE_CELLS <= coarse
                && [l[k - 1], l[k], l[k + 1], l1[k]].iter().all(|v| *v > 10.0 * tol::ELL_FLOOR)
                && (f.k_rad[k] - f.k_sph[k]).abs() > 0.05
                && (f.k_rad[k - 1] <= f.k_sph[k - 1]) == (f.k_rad[k + 1] <= f.k_sph[k + 1]);
            let lx = (l[k + 1] - l[k - 1]) / (2.0 * h);
            out.push(ok.then(|| (l1[k] - l[k]) / dt - v[k] * lx - lap[k] - f.scal[k] * l[k] - c * l[k] * l[k]));
        }
    }
    Ok(out)
}

// Restrict every field to the nodes valid in all of them, so that the
// differences are taken over one fixed set.
fn common_mask(fields: &mut [Vec<Option<f64>>]) {
    let len = fields.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..len {
        if fields.iter().any(|f| f[i].is_none()) {
            fields.iter_mut().for_each(|f| f[i] = None);
        }
    }
}

fn diff_max(a: &[Option<f64>], b: &[Option<f64>]) -> f64 {
    a.iter().zip(b).filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs())).fold(0.0, f64::max)
}

/// Grid-refinement study of the `S1` residual on the perturbed sphere with
/// `C = (n-1)(n-2)`. Space: resolutions `J, 2J, 4J` at a common step and
/// output spacing. Time: the finest run re-read at output spacings
/// `D, 2D, 4D`.
pub fn residual_convergence(n: usize, base: usize, epsilon: f64, t_end: f64, seed: u64) -> Result<ConvergenceStudy> {
    let c = ((n - 1) * (n - 2)) as f64;
    let amp = calibrate_amplitude(n, 4 * base, epsilon, seed)?;
    let finest = WarpedFlowState::perturbed_sphere(n, 4 * base, amp, seed)?;
    let dt = default_dt(&finest, 0.25)?;
    // Output spacing D: an integer number of steps.
    let out_steps = ((t_end / 32.0) / dt).round().max(1.0) as usize;
    let steps = out_steps * 32;
    let dt = t_end / steps as f64;
    let mut hists = Vec::new();
    for m in [1usize, 2, 4] {
        let s = WarpedFlowState::perturbed_sphere(n, base * m, amp, seed)?;
        hists.push(run_flow(&s, t_end, dt, out_steps)?);
    }
    if hists.iter().any(|h| h.stopped_early) {
        return Err(LabError::Diagnostic("refinement run stopped early".into()));
    }
    let mut fields: Vec<Vec<Option<f64>>> = hists.iter().zip([1, 2, 4]).map(|(h, m)| residual_field(h, c, m)).collect::<Result<_>>()?;
    common_mask(&mut fields);
    let e_space = [diff_max(&fields[0], &fields[1]), diff_max(&fields[1], &fields[2])];
    let space_exponent = (e_space[0] / e_space[1]).log2();
    let space_max: Vec<f64> = hists.iter().map(|h| evolution_residual(h, ConeKind::S1, c).map(|r| r.max_residual)).collect::<Result<_>>()?;

    let fine = &hists[2];
    let mut tf: Vec<Vec<Option<f64>>> = [1usize, 2, 4]
        .iter()
        .map(|&k| {
            let sub = fine.subsample(k);
            // Compare on the snapshots shared by every spacing.
            let f = residual_field(&sub, c, 4)?;
            let per = f.len() / (sub.states.len() - 1);
            Ok(f.chunks(per).step_by(4 / k).flatten().copied().collect())
        })
        .collect::<Result<_>>()?;
    common_mask(&mut tf);
    let e_time = [diff_max(&tf[0], &tf[1]), diff_max(&tf[1], &tf[2])];
    let time_exponent = (e_time[1] / e_time[0]).log2();
    let time_max: Vec<f64> =
        [1usize, 2, 4].iter().map(|&k| evolution_residual(&fine.subsample(k), ConeKind::S1, c).map(|r| r.max_residual)).collect::<Result<_>>()?;

    let dx = std::f64::consts::PI / base as f64;
    let d_out = fine.output_dt();
    // e ~ c1 dx^2 (1 - 1/4) between J and 2J; e ~ c2 D between D and 2D.
    let c1 = 2.0 * e_space[0] / (0.75 * dx * dx);
    let c2 = 2.0 * e_time[0] / d_out;
    let tolerance = c1 * dx * dx + c2 * d_out + 1e-6;
    let base_rep = evolution_residual(&hists[0], ConeKind::S1, c)?;
    let pass = base_rep.max_residual <= tolerance && (space_exponent - 2.0).abs() <= 0.5 && (time_exponent - 1.0).abs() <= 0.5;
    Ok(ConvergenceStudy {
        resolutions: vec![base, 2 * base, 4 * base],
        output_spacings: vec![d_out, 2.0 * d_out, 4.0 * d_out],
        space_max,
        time_max,
        space_exponent,
        time_exponent,
        c1,
        c2,
        tolerance,
        base_residual: base_rep.max_residual,
        minimal_c: base_rep.minimal_c,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn model_curvatures() {
        let s = WarpedFlowState::round_sphere(3, 200).unwrap();
        let f = s.curvature().unwrap();
        for k in 0..s.len() {
            assert_abs_diff_eq!(f.k_rad[k], 1.0, epsilon = 1e-4);
            assert_abs_diff_eq!(f.k_sph[k], 1.0, epsilon = 1e-4);
            assert_abs_diff_eq!(f.scal[k], 2.0 * f.k_rad[k] * 2.0 + 2.0 * f.k_sph[k], epsilon = 1e-10);
        }
        let flat = WarpedFlowState::flat_cap(4, 100, 2.0).unwrap().curvature().unwrap();
        assert!(flat.max_abs() < 1e-10);
        let hyp = WarpedFlowState::hyperbolic_cap(3, 400, 1.5).unwrap().curvature().unwrap();
        for k in 0..hyp.k_rad.len() - 1 {
            assert_abs_diff_eq!(hyp.k_rad[k], -1.0, epsilon = 1e-4);
            assert_abs_diff_eq!(hyp.k_sph[k], -1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn operator_is_diagonal_and_bianchi() {
        let s = WarpedFlowState::perturbed_sphere(4, 60, 0.5, 3).unwrap();
        let f = s.curvature().unwrap();
        let op = f.operator_at(4, 10);
        assert!(op.bianchi_residual() < 1e-14);
        assert_abs_diff_eq!(op.scalar(), f.scal[10], epsilon = 1e-10);
    }

    #[test]
    fn shrinking_sphere_short_run() {
        let s = WarpedFlowState::round_sphere(3, 100).unwrap();
        let dt = default_dt(&s, 0.25).unwrap();
        let hist = run_flow(&s, 0.05, dt, 100).unwrap();
        let last = hist.final_state();
        let r = (1.0 - 4.0 * last.time).sqrt();
        for k in 1..last.len() - 1 {
            assert_abs_diff_eq!(last.phi[k] / s.phi[k], r, epsilon = 1e-3);
        }
    }

    #[test]
    fn flat_cap_is_static_and_bad_steps_rejected() {
        let s = WarpedFlowState::flat_cap(3, 50, 1.0).unwrap();
        let next = s.step(1e-4).unwrap();
        for k in 0..s.len() {
            assert_abs_diff_eq!(next.phi[k], s.phi[k], epsilon = 1e-12);
        }
        assert!(s.step(-1e-4).is_err());
        assert!(s.step(1.0).is_err());
    }

    #[test]
    fn ell_paths_agree() {
        let s = WarpedFlowState::perturbed_sphere(3, 60, 0.8, 1).unwrap();
        let f = s.curvature().unwrap();
        let a = ell_field_from(&f, 3, ConeKind::S1, 0).unwrap();
        let b = ell_field_optimizer(&f, 3, ConeKind::S1, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert!(a.iter().any(|v| *v > 0.0));
        let round = WarpedFlowState::round_sphere(4, 40).unwrap();
        for cone in [ConeKind::S2, ConeKind::S3, ConeKind::S4, ConeKind::S5] {
            assert!(ell_field(&round, cone, 0).unwrap().iter().all(|v| *v < 1e-12));
        }
    }
}
