//! Conjugate heat kernel `(d/dt - Delta - scal) G = 0` along rotationally
//! symmetric flows, with a source at the pole `x = 0`.
//!
//! The solve is finite volume in `m = G dmu`: `dm/dt` is the diffusive flux
//! plus the gauge transport flux, and the zeroth-order `scal G` term is
//! exactly the change of the cell volumes under the flow. Total mass is
//! therefore conserved to round-off.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cones::ConeKind;
use crate::error::{reject, LabError, Result};
use crate::flow::{ell_field_from, FlowHistory, Topology, WarpedFlowState};
use crate::tol;

/// Area of the unit sphere `S^m`.
pub fn sphere_area(m: usize) -> f64 {
    let pi = std::f64::consts::PI;
    let even = m.is_multiple_of(2);
    let mut a = if even { 2.0 } else { 2.0 * pi };
    let mut k = if even { 0 } else { 1 };
    while k < m {
        k += 2;
        a *= 2.0 * pi / (k as f64 - 1.0);
    }
    a
}

/// Metric background for the heat solve.
pub trait Background {
    fn state_at(&self, t: f64) -> Result<WarpedFlowState>;
    /// Velocity of the coordinate gauge, zero for static metrics.
    fn gauge_at(&self, state: &WarpedFlowState) -> Vec<f64>;
    fn final_time(&self) -> f64;
    /// The metric, when it does not depend on time.
    fn fixed(&self) -> Option<&WarpedFlowState> {
        None
    }
}

/// A fixed metric. Its volume form does not change, so the solve reduces to
/// the ordinary heat equation.
pub struct StaticBackground(pub WarpedFlowState);

impl Background for StaticBackground {
    fn state_at(&self, t: f64) -> Result<WarpedFlowState> {
        let mut s = self.0.clone();
        s.time = t;
        Ok(s)
    }

    fn gauge_at(&self, state: &WarpedFlowState) -> Vec<f64> {
        vec![0.0; state.len()]
    }

    fn final_time(&self) -> f64 {
        f64::INFINITY
    }

    fn fixed(&self) -> Option<&WarpedFlowState> {
        Some(&self.0)
    }
}

impl Background for FlowHistory {
    /// Linear interpolation between snapshots.
    fn state_at(&self, t: f64) -> Result<WarpedFlowState> {
        let st = &self.states;
        let (first, last) = (st[0].time, st[st.len() - 1].time);
        let slack = 1e-9 * (last - first).abs().max(1e-300);
        if t < first - slack || t > last + slack {
            return reject(format!("time {t} lies outside the flow history [{first}, {last}]"));
        }
        if st.len() == 1 {
            return Ok(st[0].clone());
        }
        let k = st.partition_point(|s| s.time <= t).clamp(1, st.len() - 1);
        let (a, b) = (&st[k - 1], &st[k]);
        let w = ((t - a.time) / (b.time - a.time)).clamp(0.0, 1.0);
        let mut s = a.clone();
        for j in 0..s.len() {
            s.psi[j] = (1.0 - w) * a.psi[j] + w * b.psi[j];
            s.phi[j] = (1.0 - w) * a.phi[j] + w * b.phi[j];
        }
        s.time = t;
        Ok(s)
    }

    fn gauge_at(&self, state: &WarpedFlowState) -> Vec<f64> {
        state.gauge_field()
    }

    fn final_time(&self) -> f64 {
        self.states.last().map(|s| s.time).unwrap_or(0.0)
    }
}

/// Cubic interpolation of the metric onto a grid `factor` times finer,
/// using the even (`psi`) and odd (`phi`) reflections through the poles.
pub fn refine(s: &WarpedFlowState, factor: usize) -> WarpedFlowState {
    if factor <= 1 {
        return s.clone();
    }
    let j = s.len() - 1;
    let h = s.spacing();
    let sample = |v: &[f64], odd: bool, k: isize| -> f64 {
        let sign = if odd { -1.0 } else { 1.0 };
        if k < 0 {
            sign * v[(-k) as usize]
        } else if k as usize > j {
            sign * v[2 * j - k as usize]
        } else {
            v[k as usize]
        }
    };
    let fine = j * factor;
    let mut out = WarpedFlowState {
        n: s.n,
        topology: s.topology,
        x: (0..=fine).map(|k| s.x[0] + h * k as f64 / factor as f64).collect(),
        psi: vec![0.0; fine + 1],
        phi: vec![0.0; fine + 1],
        time: s.time,
    };
    for k in 0..=fine {
        let (base, q) = (k / factor, k % factor);
        if q == 0 {
            out.psi[k] = s.psi[base];
            out.phi[k] = s.phi[base];
            continue;
        }
        let u = q as f64 / factor as f64;
        // Stencil base-1 ..= base+2, shifted inward at a free outer edge.
        let mut lo = base as isize - 1;
        let mut t = u + 1.0;
        if s.topology == Topology::Cap && base + 2 > j {
            lo -= 1;
            t += 1.0;
        }
        let w = [
            -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0,
            t * (t - 2.0) * (t - 3.0) / 2.0,
            -t * (t - 1.0) * (t - 3.0) / 2.0,
            t * (t - 1.0) * (t - 2.0) / 6.0,
        ];
        for (m, wm) in w.iter().enumerate() {
            out.psi[k] += wm * sample(&s.psi, false, lo + m as isize);
            out.phi[k] += wm * sample(&s.phi, true, lo + m as isize);
        }
    }
    out
}

/// Step control for the heat solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeatOptions {
    /// Time step; `None` picks half the explicit stability bound.
    pub dt: Option<f64>,
    pub record_every: usize,
    /// The heat grid is this many times finer than the metric grid.
    pub refine: usize,
}

impl Default for HeatOptions {
    fn default() -> Self {
        Self { dt: None, record_every: 1, refine: 4 }
    }
}

/// Volumes of the dual cells (pole cells integrate `(psi0 x)^(n-1)` exactly).
fn cell_volumes(s: &WarpedFlowState) -> Vec<f64> {
    let h = s.spacing();
    let n = s.n as i32;
    let w = sphere_area(s.n - 1);
    let j = s.len() - 1;
    let mut v: Vec<f64> = (0..=j).map(|k| w * s.psi[k] * s.phi[k].powi(n - 1) * h).collect();
    let pole = |psi: f64| w * psi.powi(n) * (0.5 * h).powi(n) / n as f64;
    v[0] = pole(s.psi[0]);
    match s.topology {
        Topology::Sphere => v[j] = pole(s.psi[j]),
        Topology::Cap => v[j] *= 0.5,
    }
    v
}

/// Diffusive face coefficients `phi^(n-1) / psi` at midpoints.
fn face_coeffs(s: &WarpedFlowState) -> Vec<f64> {
    let w = sphere_area(s.n - 1);
    (0..s.len() - 1)
        .map(|k| {
            let phi = 0.5 * (s.phi[k] + s.phi[k + 1]);
            let psi = 0.5 * (s.psi[k] + s.psi[k + 1]);
            w * phi.powi(s.n as i32 - 1) / psi
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatProfile {
    pub n: usize,
    pub source_time: f64,
    /// Width of the initial Gaussian in arclength (zero for general data).
    pub sigma: f64,
    pub dt: f64,
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
    pub min_value: f64,
    /// Distance to the pole in the metric at the source time.
    pub source_distance: Vec<f64>,
    /// `max |Rm|` of the background at each recorded time.
    pub max_rm: Vec<f64>,
    pub steps: usize,
}

#[derive(Serialize)]
struct ProfileLine<'a> {
    t: f64,
    mass: f64,
    x: &'a [f64],
    g: &'a [f64],
}

impl HeatProfile {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, t) in self.times.iter().enumerate() {
            serde_json::to_writer(&mut w, &ProfileLine { t: *t, mass: self.mass[k], x: &self.x, g: &self.values[k] })?;
            writeln!(w).map_err(|e| LabError::Diagnostic(e.to_string()))?;
        }
        Ok(())
    }

    /// `int G dmu` at the recorded times, recomputed from the values.
    pub fn burn_in_time(&self) -> f64 {
        self.source_time + 10.0 * self.dt
    }
}

/// Largest explicit step for the finite-volume diffusion on `s`.
pub fn heat_stable_dt(s: &WarpedFlowState) -> f64 {
    let v = cell_volumes(s);
    let a = face_coeffs(s);
    let h = s.spacing();
    let mut best = f64::INFINITY;
    for k in 0..s.len() {
        let left = if k > 0 { a[k - 1] } else { 0.0 };
        let right = if k + 1 < s.len() { a[k] } else { 0.0 };
        let out = (left + right) / h;
        if out > 0.0 {
            best = best.min(v[k] / out);
        }
    }
    best
}

/// Solves from arbitrary data `initial` at time `s` up to `t_end`, keeping
/// every `record_every`-th step.
/// `initial` lives on the heat grid (see [`refine`]).
pub fn solve_from<B: Background>(bg: &B, s: f64, t_end: f64, opts: HeatOptions, initial: Vec<f64>) -> Result<HeatProfile> {
    solve_observed(bg, s, t_end, opts, initial, |_, _, _| Ok(()))
}

/// As [`solve_from`], calling `observe(t, G, metric)` after every step.
pub fn solve_observed<B, F>(bg: &B, s: f64, t_end: f64, opts: HeatOptions, initial: Vec<f64>, mut observe: F) -> Result<HeatProfile>
where
    B: Background,
    F: FnMut(f64, &[f64], &WarpedFlowState) -> Result<()>,
{
    let fine = |st: WarpedFlowState| refine(&st, opts.refine);
    if !(t_end > s) {
        return reject("source time must precede the final time");
    }
    if t_end > bg.final_time() + 1e-12 {
        return reject("final time beyond the background");
    }
    let record_every = opts.record_every;
    if record_every == 0 || opts.refine == 0 {
        return reject("need record_every >= 1 and refine >= 1");
    }
    let s0 = fine(bg.state_at(s)?);
    let fixed = bg.fixed().map(|_| s0.clone());
    let dt = match opts.dt {
        Some(dt) => dt,
        None => {
            // The bound shrinks with the metric; sample it along the run.
            let mut b = heat_stable_dt(&s0);
            if fixed.is_none() {
                for k in 1..=32 {
                    let t = s + (t_end - s) * k as f64 / 32.0;
                    b = b.min(heat_stable_dt(&fine(bg.state_at(t)?)));
                }
            }
            0.5 * b
        }
    };
    if !(dt > 0.0) {
        return reject("need dt > 0");
    }
    if initial.len() != s0.len() {
        return Err(LabError::DimensionMismatch { expected: s0.len(), got: initial.len() });
    }
    // Land exactly on t_end without exceeding the requested step.
    let steps = ((t_end - s) / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let dt = (t_end - s) / steps as f64;
    let h = s0.spacing();
    let mut vol = cell_volumes(&s0);
    let mut g = initial;
    let mass0: f64 = g.iter().zip(&vol).map(|(a, b)| a * b).sum();
    let mut prof = HeatProfile {
        n: s0.n,
        source_time: s,
        sigma: 0.0,
        dt,
        x: s0.x.clone(),
        times: vec![s],
        values: vec![g.clone()],
        mass: vec![mass0],
        min_value: g.iter().cloned().fold(f64::INFINITY, f64::min),
        source_distance: s0.arclength(),
        max_rm: vec![s0.curvature()?.max_abs()],
        steps,
    };
    let mut cur = s0;
    for k in 1..=steps {
        let bound = heat_stable_dt(&cur);
        if dt > bound {
            return reject(format!("dt = {dt:e} exceeds the heat stability bound {bound:e}"));
        }
        let a = face_coeffs(&cur);
        let vel = bg.gauge_at(&cur);
        let dens: Vec<f64> = (0..cur.len()).map(|j| cur.psi[j] * cur.phi[j].powi(cur.n as i32 - 1)).collect();
        let w = sphere_area(cur.n - 1);
        let mut m: Vec<f64> = g.iter().zip(&vol).map(|(a, b)| a * b).collect();
        for f in 0..cur.len() - 1 {
            let diff = a[f] * (g[f + 1] - g[f]) / h;
            let rho_v = w * 0.25 * (dens[f] + dens[f + 1]) * (vel[f] + vel[f + 1]);
            let adv = rho_v * 0.5 * (g[f] + g[f + 1]);
            let flux = dt * (diff + adv);
            m[f] += flux;
            m[f + 1] -= flux;
        }
        let t = s + dt * k as f64;
        let next = match &fixed {
            Some(f) => {
                let mut st = f.clone();
                st.time = t;
                st
            }
            None => fine(bg.state_at(t)?),
        };
        vol = cell_volumes(&next);
        g = m.iter().zip(&vol).map(|(a, b)| a / b).collect();
        let gmin = g.iter().cloned().fold(f64::INFINITY, f64::min);
        prof.min_value = prof.min_value.min(gmin);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(LabError::Corrupted(format!("non-finite heat values at t = {t}")));
        }
        cur = next;
        observe(t, &g, &cur)?;
        if k % record_every == 0 || k == steps {
            prof.times.push(t);
            prof.mass.push(m.iter().sum());
            prof.values.push(g.clone());
            prof.max_rm.push(cur.curvature()?.max_abs());
        }
    }
    let scale = g.iter().cloned().fold(0.0, f64::max).max(1e-300);
    if prof.min_value < -1e-8 * scale {
        return Err(LabError::Diagnostic(format!("heat solution undershoots to {:e}", prof.min_value)));
    }
    Ok(prof)
}

/// Kernel from a pole source at time `s`: a normalized Gaussian of width
/// `sigma = 3 ds` standing in for the delta.
/// `sigma = 3 ds` refers to the metric grid, not the finer heat grid.
pub fn solve_conjugate<B: Background>(bg: &B, s: f64, t_end: f64, opts: HeatOptions) -> Result<HeatProfile> {
    let coarse = bg.state_at(s)?;
    let sigma = 3.0 * coarse.arclength()[1];
    let s0 = refine(&coarse, opts.refine);
    let dist = s0.arclength();
    let raw: Vec<f64> = dist.iter().map(|d| (-d * d / (2.0 * sigma * sigma)).exp()).collect();
    let vol = cell_volumes(&s0);
    let z: f64 = raw.iter().zip(&vol).map(|(a, b)| a * b).sum();
    let init = raw.into_iter().map(|v| v / z).collect();
    let mut p = solve_from(bg, s, t_end, opts, init)?;
    p.sigma = sigma;
    let drift = p.mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    if drift > 1e-3 {
        return Err(LabError::Diagnostic(format!("mass drift {drift:e}")));
    }
    Ok(p)
}

/// `(4 pi tau)^(-n/2) exp(-r^2 / (4 tau))`.
pub fn euclidean_kernel(n: usize, tau: f64, r: f64) -> f64 {
    (4.0 * std::f64::consts::PI * tau).powf(-(n as f64) / 2.0) * (-r * r / (4.0 * tau)).exp()
}

/// Heat kernel of the unit round `S^n` at geodesic distance `theta`, summed
/// over the first `modes` eigenspaces in Gegenbauer form.
pub fn sphere_kernel(n: usize, tau: f64, theta: f64, modes: usize) -> f64 {
    let alpha = (n as f64 - 1.0) / 2.0;
    let x = theta.cos();
    let area = sphere_area(n);
    if n == 1 {
        let mut s = 1.0;
        for k in 1..modes {
            s += 2.0 * (-((k * k) as f64) * tau).exp() * (k as f64 * theta).cos();
        }
        return s / area;
    }
    let (mut c_prev, mut c) = (1.0, 2.0 * alpha * x);
    let mut sum = 1.0;
    for k in 1..modes {
        let kf = k as f64;
        let lam = kf * (kf + n as f64 - 1.0);
        sum += (-lam * tau).exp() * (kf + alpha) / alpha * c;
        let kn = kf + 1.0;
        let c_next = (2.0 * x * (kn + alpha - 1.0) * c - (kn + 2.0 * alpha - 2.0) * c_prev) / kn;
        c_prev = c;
        c = c_next;
    }
    sum / area
}

/// Whether the first omitted term of [`sphere_kernel`] is negligible
/// (`< 1e-10` of the kernel's peak scale).
pub fn sphere_kernel_converged(n: usize, tau: f64, modes: usize) -> bool {
    let k = modes as f64;
    let dim = (2.0 * k + n as f64 - 1.0) * (k + n as f64 - 2.0).powi(n as i32 - 2);
    let tail = dim * (-k * (k + n as f64 - 1.0) * tau).exp() / sphere_area(n);
    let peak = (4.0 * std::f64::consts::PI * tau).powf(-(n as f64) / 2.0).max(1.0 / sphere_area(n));
    tail < 1e-10 * peak
}

/// Deviation from the spectral kernel on a static unit sphere, over the
/// recorded times after burn-in at which the series has converged.
pub fn sphere_oracle_deviation(p: &HeatProfile, modes: usize) -> f64 {
    let n = p.n;
    let half_var = 0.5 * p.sigma * p.sigma;
    let start = p
        .times
        .iter()
        .copied()
        .find(|t| *t >= p.burn_in_time() && sphere_kernel_converged(n, t - p.source_time + half_var, modes))
        .unwrap_or(f64::INFINITY);
    oracle_deviation(p, start, |tau, r| sphere_kernel(n, tau, r, modes))
}

/// Largest `|G - K| / max K` over recorded times `>= after`, where `K` is
/// the oracle evaluated at `tau = t - s + sigma^2 / 2` and distance `r`.
pub fn oracle_deviation(p: &HeatProfile, after: f64, oracle: impl Fn(f64, f64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, t) in p.times.iter().enumerate() {
        if *t < after {
            continue;
        }
        let tau = t - p.source_time + 0.5 * p.sigma * p.sigma;
        let kv: Vec<f64> = p.source_distance.iter().map(|r| oracle(tau, *r)).collect();
        let peak = kv.iter().cloned().fold(0.0, f64::max);
        for (g, o) in p.values[k].iter().zip(&kv) {
            worst = worst.max((g - o).abs() / peak);
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianFit {
    /// Smallest `C` with `G <= C t^(-n/2) exp(-d_s^2 / (C t))` on the grid.
    pub c: f64,
    pub a: f64,
    /// `max t |Rm|` over the fitted range; the hypothesis asks for `<= a`.
    pub max_t_rm: f64,
    pub hypothesis_ok: bool,
    pub points: usize,
    pub t_range: (f64, f64),
}

fn bound_holds(p: &HeatProfile, c: f64, t_min: f64, t_max: f64) -> bool {
    let half = p.n as f64 / 2.0;
    for (k, t) in p.times.iter().enumerate() {
        if *t < t_min || *t > t_max {
            continue;
        }
        for (g, d) in p.values[k].iter().zip(&p.source_distance) {
            if *g > c * t.powf(-half) * (-d * d / (c * t)).exp() {
                return false;
            }
        }
    }
    true
}

/// Bisection on `log C` over `t` in `[max(2s, t_min), t_max]`.
pub fn gaussian_fit(p: &HeatProfile, a: f64, t_min: f64, t_max: f64) -> Result<GaussianFit> {
    let lo_t = t_min.max(2.0 * p.source_time).max(p.burn_in_time());
    let sel: Vec<usize> = (0..p.times.len()).filter(|&k| p.times[k] >= lo_t && p.times[k] <= t_max && p.times[k] > 0.0).collect();
    if sel.is_empty() {
        return reject("no recorded times in the fitting range");
    }
    let max_t_rm = sel.iter().map(|&k| p.times[k] * p.max_rm[k]).fold(0.0, f64::max);
    let cap = 1e6;
    if !bound_holds(p, cap, lo_t, t_max) {
        // Report the worst point at the cap.
        let half = p.n as f64 / 2.0;
        let mut worst = (0.0, 0.0, f64::NEG_INFINITY);
        for &k in &sel {
            let t = p.times[k];
            for (j, (g, d)) in p.values[k].iter().zip(&p.source_distance).enumerate() {
                let r = g / (cap * t.powf(-half) * (-d * d / (cap * t)).exp());
                if r > worst.2 {
                    worst = (t, p.x[j], r);
                }
            }
        }
        return Err(LabError::Diagnostic(format!("no finite C below {cap:e}; worst at t = {}, x = {} (ratio {})", worst.0, worst.1, worst.2)));
    }
    let (mut lo, mut hi) = (-14.0_f64, cap.ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if bound_holds(p, mid.exp(), lo_t, t_max) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let points = sel.len() * p.x.len();
    Ok(GaussianFit { c: hi.exp(), a, max_t_rm, hypothesis_ok: max_t_rm <= a, points, t_range: (lo_t, t_max) })
}

/// Reproduction check on a static `S^n` at the poles. With the width of the
/// initial Gaussian, `G_t` approximates the kernel at `t + sigma^2/2`, so
/// `int G_{t1}^2 dmu` (same pole) and `int G_{t1}(z) G_{t1}(z*) dmu` (opposite
/// pole, `z*` the antipodal reflection) are both compared with `G` at
/// `2 t1 + sigma^2 / 2`, interpolated linearly between records.
pub fn reproduction_defect(p: &HeatProfile, bg: &WarpedFlowState, t1: f64) -> Result<f64> {
    if bg.topology != Topology::Sphere {
        return reject("reproduction is checked on a closed sphere");
    }
    let rel = |t: f64| t - p.source_time;
    let i1 = p
        .times
        .iter()
        .position(|t| (rel(*t) - t1).abs() <= 1e-9 * t1.max(1e-300))
        .ok_or_else(|| LabError::Rejected(format!("t = {t1} is not a recorded time")))?;
    let t2 = 2.0 * t1 + 0.5 * p.sigma * p.sigma;
    let k = p.times.iter().position(|t| rel(*t) >= t2).ok_or_else(|| LabError::Rejected(format!("profile ends before t = {t2}")))?;
    if k == 0 {
        return reject("profile starts after the comparison time");
    }
    let (ta, tb) = (rel(p.times[k - 1]), rel(p.times[k]));
    let w = (t2 - ta) / (tb - ta);
    let at = |j: usize| (1.0 - w) * p.values[k - 1][j] + w * p.values[k][j];
    let factor = (p.x.len() - 1) / (bg.len() - 1);
    let vol = cell_volumes(&refine(bg, factor));
    let g1 = &p.values[i1];
    let j = g1.len() - 1;
    let same: f64 = (0..=j).map(|m| g1[m] * g1[m] * vol[m]).sum();
    let opposite: f64 = (0..=j).map(|m| g1[m] * g1[j - m] * vol[m]).sum();
    Ok(((at(0) - same) / at(0)).abs().max(((at(j) - opposite) / at(j)).abs()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvolutionReport {
    /// `int h dmu_t` against `int ell_0 dmu_0` (largest relative gap).
    pub mass_defect: f64,
    /// `max_t (1/t) log max(1, sup_x ell / h)` over `t >= t_min`.
    pub c2: f64,
    pub sup_ratio: f64,
    pub points: usize,
    pub t_min: f64,
}

/// Solves the conjugate equation with data `ell_0` at time zero and compares
/// the result `h` with the measured `S1` defect `ell` along the flow, at
/// every step from `t_min` on. `ell0` is given on the flow grid and
/// interpolated onto the heat grid; ratios are taken at the flow nodes.
pub fn ell_convolution_bound(history: &FlowHistory, ell0: &[f64], opts: HeatOptions, t_min: f64) -> Result<ConvolutionReport> {
    let t0 = history.states[0].time;
    let t_end = history.final_time();
    let first = &history.states[0];
    if ell0.len() != first.len() {
        return Err(LabError::DimensionMismatch { expected: first.len(), got: ell0.len() });
    }
    let mut carrier = first.clone();
    carrier.psi = ell0.iter().map(|v| v + 1.0).collect();
    let init: Vec<f64> = refine(&carrier, opts.refine).psi.iter().map(|v| (v - 1.0).max(0.0)).collect();
    let r = opts.refine.max(1);
    let mut c2: f64 = 0.0;
    let mut sup_ratio: f64 = 0.0;
    let mut points = 0;
    let prof = solve_observed(history, t0, t_end, opts, init, |t, h, st| {
        if t - t0 < t_min {
            return Ok(());
        }
        let f = st.curvature()?;
        let ell = ell_field_from(&f, st.n, ConeKind::S1, 0)?;
        let mut ratio: f64 = 0.0;
        for i in (0..h.len()).step_by(r) {
            if h[i] > tol::HEAT_FLOOR {
                ratio = ratio.max(ell[i] / h[i]);
                points += 1;
            }
        }
        sup_ratio = sup_ratio.max(ratio);
        c2 = c2.max(ratio.max(1.0).ln() / (t - t0));
        Ok(())
    })?;
    let m0 = prof.mass[0];
    let mass_defect = prof.mass.iter().map(|m| (m - m0).abs() / m0.abs().max(1e-300)).fold(0.0, f64::max);
    Ok(ConvolutionReport { mass_defect, c2, sup_ratio, points, t_min })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_areas() {
        let pi = std::f64::consts::PI;
        assert_relative_eq!(sphere_area(1), 2.0 * pi, max_relative = 1e-15);
        assert_relative_eq!(sphere_area(2), 4.0 * pi, max_relative = 1e-15);
        assert_relative_eq!(sphere_area(3), 2.0 * pi * pi, max_relative = 1e-15);
        assert_relative_eq!(sphere_area(4), 8.0 * pi * pi / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn spectral_kernel_integrates_to_one() {
        for n in [2usize, 3, 4] {
            let m = 2000;
            let area_lower = sphere_area(n - 1);
            let s: f64 = (0..m)
                .map(|i| {
                    let th = std::f64::consts::PI * (i as f64 + 0.5) / m as f64;
                    sphere_kernel(n, 0.05, th, 50) * area_lower * th.sin().powi(n as i32 - 1) * std::f64::consts::PI / m as f64
                })
                .sum();
            assert_relative_eq!(s, 1.0, max_relative = 1e-5);
        }
    }

    #[test]
    fn flat_cap_matches_euclidean() {
        let cap = WarpedFlowState::flat_cap(3, 100, 3.0).unwrap();
        let bg = StaticBackground(cap);
        let p = solve_conjugate(&bg, 0.0, 0.02, HeatOptions { record_every: 20, refine: 8, dt: None }).unwrap();
        let dev = oracle_deviation(&p, p.burn_in_time(), |tau, r| euclidean_kernel(3, tau, r));
        assert!(dev < 1e-3, "{dev}");
        assert!((p.mass.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_cap_fit_is_near_the_euclidean_constant() {
        let cap = WarpedFlowState::flat_cap(3, 100, 3.0).unwrap();
        let p = solve_conjugate(&StaticBackground(cap), 0.0, 0.02, HeatOptions { record_every: 20, refine: 4, dt: None }).unwrap();
        let fit = gaussian_fit(&p, 1.0, 0.002, 0.02).unwrap();
        assert!(fit.c > 1.0 && fit.c < 16.0, "{}", fit.c);
        assert!(fit.hypothesis_ok);
        let wider = gaussian_fit(&p, 1.0, 0.001, 0.02).unwrap();
        assert!(wider.c >= fit.c);
    }

    #[test]
    fn reproduction_on_static_sphere() {
        let sp = WarpedFlowState::round_sphere(3, 50).unwrap();
        let bg = StaticBackground(sp.clone());
        let bound = heat_stable_dt(&refine(&sp, 4));
        let steps = (0.5 / (0.5 * bound) / 50.0).ceil() * 50.0;
        let dt = 0.5 / steps;
        let opts = HeatOptions { dt: Some(dt), record_every: steps as usize / 50, refine: 4 };
        let p = solve_conjugate(&bg, 0.0, 1.05, opts).unwrap();
        let d = reproduction_defect(&p, &sp, 0.5).unwrap();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn mass_is_conserved_on_the_shrinking_sphere() {
        let sp = WarpedFlowState::round_sphere(3, 40).unwrap();
        let dt = crate::flow::default_dt(&sp, 0.25).unwrap();
        let hist = crate::flow::run_flow(&sp, 0.1, dt, 4).unwrap();
        let t_end = hist.final_time();
        let p = solve_conjugate(&hist, 0.0, t_end, HeatOptions { record_every: 50, refine: 2, dt: None }).unwrap();
        for m in &p.mass {
            assert!((m - 1.0).abs() < 1e-10);
        }
        // Constant data grows like the inverse volume.
        let eps = 0.01;
        let q = solve_from(&hist, 0.0, t_end, HeatOptions { record_every: 50, refine: 2, dt: None }, vec![eps; 81]).unwrap();
        let t = *q.times.last().unwrap();
        let vol = |st: &WarpedFlowState| cell_volumes(&refine(st, 2)).iter().sum::<f64>();
        let discrete = eps * vol(&hist.states[0]) / vol(hist.states.last().unwrap());
        let exact = eps * (1.0 - 4.0 * t).powf(-1.5);
        for v in q.values.last().unwrap() {
            assert!((v - discrete).abs() < 1e-3 * discrete, "{v} vs {discrete}");
            assert!((v - exact).abs() < 1e-3 * exact, "{v} vs {exact}");
        }
    }

    #[test]
    fn refine_is_exact_on_cubics() {
        let cap = WarpedFlowState::flat_cap(3, 20, 1.0).unwrap();
        let f = refine(&cap, 3);
        for (x, p) in f.x.iter().zip(&f.phi) {
            assert_relative_eq!(*p, *x, epsilon = 1e-13);
        }
    }

    #[test]
    fn constant_data_on_static_sphere_stays_constant() {
        let s = WarpedFlowState::round_sphere(3, 60).unwrap();
        let bg = StaticBackground(s.clone());
        let opts = HeatOptions { record_every: 10, refine: 1, ..Default::default() };
        let p = solve_from(&bg, 0.0, 0.01, opts, vec![0.3; s.len()]).unwrap();
        for v in p.values.last().unwrap() {
            assert_relative_eq!(*v, 0.3, max_relative = 1e-12);
        }
    }
}
