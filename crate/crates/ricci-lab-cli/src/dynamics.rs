use clap::{Args, ValueEnum};
use ricci_lab::cones::ConeKind;
use ricci_lab::flow::{self, FlowHistory, WarpedFlowState};
use ricci_lab::heat::{self, Background, HeatOptions, HeatProfile, StaticBackground};
use ricci_lab::ode::{self, IntegrateOptions, Method};
use ricci_lab::report::Series;
use ricci_lab::{linalg, CurvatureOperator};
use serde::Serialize;

use crate::algebra::load_operator;
use crate::output::{usage, Run};

#[derive(Args, Serialize)]
pub struct OdeArgs {
    /// Start from the round sphere `c0 I`.
    #[arg(long)]
    pub sphere: bool,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub c0: f64,
    /// Final time.
    #[arg(long = "T", default_value_t = 0.1)]
    pub t_end: f64,
    /// Operator JSON; otherwise a seeded random operator (unless --sphere).
    #[arg(long)]
    pub operator: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `rk4` or `rk45`.
    #[arg(long, default_value = "rk4")]
    pub method: String,
    /// Step; defaults to T / 4000.
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Serialize)]
struct OdeReport<'a> {
    trajectory: &'a ode::OdeTrajectory,
    /// Largest `|Rm(t) - c(t) I| / |c(t) I|` for sphere data.
    oracle_error: Option<f64>,
    blowup_time_oracle: Option<f64>,
}

pub fn ode_run(a: &OdeArgs) -> anyhow::Result<Run> {
    let method: Method = match a.method.parse() {
        Ok(m) => m,
        Err(e) => return usage(format!("{e}")),
    };
    if !(a.t_end > 0.0) {
        return usage("--T must be positive");
    }
    let rm0 = if a.sphere {
        if a.n < 2 {
            return usage("need n >= 2");
        }
        CurvatureOperator::identity(a.n).scale(a.c0)
    } else {
        load_operator(&a.operator, Some(a.n), a.seed)?
    };
    if a.sphere && a.c0 > 0.0 && a.t_end >= ode::sphere_blowup_time(a.n, a.c0) {
        return usage("--T lies beyond the sphere blowup time");
    }
    let dt = a.dt.unwrap_or(a.t_end / 4000.0);
    let traj = ode::integrate_with(&rm0, a.t_end, &IntegrateOptions::new(method, dt))?;
    let mut series = Series::new(&["t", "norm", "min_eig", "max_eig", "oracle"]);
    let mut oracle_error: Option<f64> = None;
    for (t, st) in traj.times.iter().zip(&traj.states) {
        let (vals, _) = linalg::sym_eigen_sorted(st.form());
        let oracle = if a.sphere { ode::sphere_solution(a.n, a.c0, *t) } else { f64::NAN };
        if a.sphere {
            let target = CurvatureOperator::identity(a.n).scale(oracle);
            let e = st.sub(&target)?.norm() / target.norm();
            oracle_error = Some(oracle_error.map_or(e, |m: f64| m.max(e)));
        }
        series.push(vec![*t, st.norm(), vals[0], vals[vals.len() - 1], oracle]);
    }
    let mut jsonl = Vec::new();
    traj.write_jsonl(&mut jsonl)?;
    let pass = oracle_error.is_none_or(|e| e <= 1e-6);
    let rep = OdeReport { trajectory: &traj, oracle_error, blowup_time_oracle: a.sphere.then(|| ode::sphere_blowup_time(a.n, a.c0)) };
    Ok(Run::new("ode-run", Some(a.seed), a, &rep, pass, &[("oracle_relative", 1e-6)])?
        .with_series(series)
        .with_extra("jsonl", jsonl)
        .with_summary(format!("oracle error {:?}", oracle_error)))
}

#[derive(Args, Serialize)]
pub struct FamilyArgs {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Interior margin of the initial operator in the PIC1 cone.
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
    /// Length of each run after its start time.
    #[arg(long, default_value_t = 0.05)]
    pub duration: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

pub fn pic1_family(a: &FamilyArgs) -> anyhow::Result<Run> {
    if a.n < 4 || a.runs == 0 || a.steps == 0 || !(a.duration > 0.0) {
        return usage("need n >= 4, runs >= 1, steps >= 1 and a positive duration");
    }
    let mut reports = Vec::new();
    let mut series = Series::new(&["run", "t", "lambda", "member", "slack"]);
    for r in 0..a.runs {
        let s = a.seed.wrapping_add(r as u64);
        let (rm0, t0) = ode::family_initial_data(a.n, a.margin, s)?;
        let rep = ode::pic1_family_test(&rm0, t0, t0 + a.duration, a.steps, s)?;
        for p in &rep.points {
            series.push(vec![r as f64, p.t, p.lambda, p.member as u8 as f64, 2.0 * p.t * p.lambda + 1.0]);
        }
        reports.push(rep);
    }
    let failing: Vec<usize> = reports.iter().enumerate().filter(|(_, r)| !r.pass).map(|(i, _)| i).collect();
    let pass = failing.is_empty();
    Run::new("pic1-family", Some(a.seed), a, &reports, pass, &[("slack", 1e-6)])?
        .with_series(series)
        .with_summary(format!("failing runs {failing:?}"))
        .with_certificates(&failing.iter().map(|&i| &reports[i]).collect::<Vec<_>>())
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Sphere,
    Perturbed,
    FlatCap,
    HyperbolicCap,
}

#[derive(Args, Serialize)]
pub struct FlowArgs {
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Grid intervals.
    #[arg(long, default_value_t = 200)]
    pub j: usize,
    #[arg(long, value_enum, default_value = "sphere")]
    pub init: Init,
    /// Deformation amplitude for `perturbed`.
    #[arg(long, default_value_t = 0.5)]
    pub amplitude: f64,
    /// Radius for the caps.
    #[arg(long, default_value_t = 1.0)]
    pub length: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "T", default_value_t = 0.1)]
    pub t_end: f64,
    /// Fraction of the stability bound used as step.
    #[arg(long, default_value_t = 0.25)]
    pub safety: f64,
    /// Snapshot stride; 0 keeps about 100 snapshots.
    #[arg(long, default_value_t = 0)]
    pub output_every: usize,
    /// Run the residual convergence study instead (J, 2J, 4J), with
    /// `--epsilon` as the initial defect.
    #[arg(long)]
    pub residual_study: bool,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
}

fn initial_state(init: Init, n: usize, j: usize, amplitude: f64, length: f64, seed: u64) -> anyhow::Result<WarpedFlowState> {
    Ok(match init {
        Init::Sphere => WarpedFlowState::round_sphere(n, j)?,
        Init::Perturbed => WarpedFlowState::perturbed_sphere(n, j, amplitude, seed)?,
        Init::FlatCap => WarpedFlowState::flat_cap(n, j, length)?,
        Init::HyperbolicCap => WarpedFlowState::hyperbolic_cap(n, j, length)?,
    })
}

#[derive(Serialize)]
struct FlowSummary {
    dt: f64,
    snapshots: usize,
    final_time: f64,
    stopped_early: bool,
    stop_reason: Option<String>,
    /// Sphere runs: largest `|scal - n(n-1)/(1 - 2(n-1)t)|` relative.
    scal_oracle_error: Option<f64>,
    max_ell: f64,
}

fn run_with_stride(init: &WarpedFlowState, t_end: f64, safety: f64, every: usize) -> anyhow::Result<FlowHistory> {
    let dt = flow::default_dt(init, safety)?;
    let steps = (t_end / dt).ceil().max(1.0);
    let every = if every == 0 { ((steps / 100.0).ceil() as usize).max(1) } else { every };
    // Whole number of strides, so the last snapshot sits at t_end.
    let steps = (steps / every as f64).ceil() * every as f64;
    Ok(flow::run_flow(init, t_end, t_end / steps, every)?)
}

pub fn flow_run(a: &FlowArgs) -> anyhow::Result<Run> {
    if !(a.t_end > 0.0) || !(a.safety > 0.0 && a.safety <= 1.0) {
        return usage("need T > 0 and 0 < safety <= 1");
    }
    if a.residual_study {
        let study = flow::residual_convergence(a.n, a.j, a.epsilon, a.t_end, a.seed)?;
        let mut series = Series::new(&["level", "resolution", "space_max", "output_spacing", "time_max"]);
        for i in 0..study.resolutions.len() {
            series.push(vec![i as f64, study.resolutions[i] as f64, study.space_max[i], study.output_spacings[i], study.time_max[i]]);
        }
        return Ok(Run::new("flow-run", Some(a.seed), a, &study, study.pass, &[("exponent_window", 0.5)])?.with_series(series).with_summary(
            format!("exponents {} / {}, residual {:e} vs {:e}", study.space_exponent, study.time_exponent, study.base_residual, study.tolerance),
        ));
    }
    let init = initial_state(a.init, a.n, a.j, a.amplitude, a.length, a.seed)?;
    let hist = run_with_stride(&init, a.t_end, a.safety, a.output_every)?;
    let n = a.n as f64;
    let mut scal_err: Option<f64> = None;
    let mut max_ell: f64 = 0.0;
    for s in &hist.states {
        let f = s.curvature()?;
        let l = flow::ell_field_from(&f, s.n, ConeKind::S1, 0)?;
        max_ell = l.iter().fold(max_ell, |m, v| m.max(*v));
        if a.init == Init::Sphere {
            let exact = n * (n - 1.0) / (1.0 - 2.0 * (n - 1.0) * s.time);
            let e = f.scal.iter().map(|v| (v - exact).abs() / exact).fold(0.0, f64::max);
            scal_err = Some(scal_err.map_or(e, |m: f64| m.max(e)));
        }
    }
    let summary = FlowSummary {
        dt: hist.dt,
        snapshots: hist.states.len(),
        final_time: hist.final_state().time,
        stopped_early: hist.stopped_early,
        stop_reason: hist.stop_reason.clone(),
        scal_oracle_error: scal_err,
        max_ell,
    };
    let pass = scal_err.is_none_or(|e| e <= 1e-3) && !hist.stopped_early;
    let mut csv = Vec::new();
    hist.write_csv(&mut csv)?;
    let mut jsonl = Vec::new();
    hist.write_jsonl(&mut jsonl)?;
    Ok(Run::new("flow-run", Some(a.seed), a, &summary, pass, &[("scal_relative", 1e-3)])?
        .with_raw_csv(csv)
        .with_extra("jsonl", jsonl)
        .with_summary(format!("scal error {:?}, stopped early {}", scal_err, hist.stopped_early)))
}

#[derive(Args, Serialize)]
pub struct AlmostArgs {
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Comma-separated initial defects.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub j: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct AlmostSummary {
    runs: Vec<flow::AlmostPreservationReport>,
    /// Per epsilon: `|a(J) / a(2J) - 1|` for the amplification `a`.
    refinement_gap: Vec<f64>,
}

pub fn almost_preserve(a: &AlmostArgs) -> anyhow::Result<Run> {
    if a.eps.is_empty() || a.eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return usage("epsilon values must lie in (0, 1]");
    }
    let mut runs = Vec::new();
    let mut gaps = Vec::new();
    let mut series = Series::new(&["epsilon", "resolution", "amplitude", "amplification", "sup_t_rm", "tau_reached"]);
    let mut pass = true;
    for &e in &a.eps {
        let coarse = flow::almost_preservation_experiment(e, a.n, a.j, a.seed)?;
        let fine = flow::almost_preservation_experiment(e, a.n, 2 * a.j, a.seed)?;
        let gap = (coarse.amplification / fine.amplification - 1.0).abs();
        for r in [&coarse, &fine] {
            series.push(vec![e, r.resolution as f64, r.amplitude, r.amplification, r.sup_t_rm, r.tau_reached]);
            pass &= r.amplification.is_finite() && r.sup_t_rm.is_finite() && !r.stopped_early;
        }
        pass &= gap <= 0.2;
        gaps.push(gap);
        runs.push(coarse);
        runs.push(fine);
    }
    let rep = AlmostSummary { runs, refinement_gap: gaps };
    Ok(Run::new("almost-preserve", Some(a.seed), a, &rep, pass, &[("refinement_gap", 0.2)])?
        .with_series(series)
        .with_summary(format!("refinement gaps {:?}", rep.refinement_gap)))
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    StaticSphere,
    FlatCap,
    ShrinkingSphere,
    Perturbed,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum HeatData {
    /// Kernel from a pole source.
    Kernel,
    /// Convolution of the initial `S1` defect.
    Ell,
    /// Constant data `--value`.
    Constant,
}

#[derive(Args, Serialize, Clone)]
pub struct BackgroundArgs {
    #[arg(long, value_enum, default_value = "static-sphere")]
    pub background: BackgroundKind,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub j: usize,
    /// Radius of the flat cap.
    #[arg(long, default_value_t = 3.0)]
    pub length: f64,
    /// Initial defect of the perturbed sphere.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

enum Bg {
    Fixed(StaticBackground),
    Flow(FlowHistory),
}

impl Background for Bg {
    fn state_at(&self, t: f64) -> ricci_lab::Result<WarpedFlowState> {
        match self {
            Bg::Fixed(b) => b.state_at(t),
            Bg::Flow(h) => h.state_at(t),
        }
    }

    fn gauge_at(&self, s: &WarpedFlowState) -> Vec<f64> {
        match self {
            Bg::Fixed(b) => b.gauge_at(s),
            Bg::Flow(h) => h.gauge_at(s),
        }
    }

    fn final_time(&self) -> f64 {
        match self {
            Bg::Fixed(b) => b.final_time(),
            Bg::Flow(h) => h.final_time(),
        }
    }

    fn fixed(&self) -> Option<&WarpedFlowState> {
        match self {
            Bg::Fixed(b) => b.fixed(),
            Bg::Flow(_) => None,
        }
    }
}

fn build_background(b: &BackgroundArgs, j: usize, t_end: f64) -> anyhow::Result<(Bg, WarpedFlowState)> {
    Ok(match b.background {
        BackgroundKind::StaticSphere => {
            let s = WarpedFlowState::round_sphere(b.n, j)?;
            (Bg::Fixed(StaticBackground(s.clone())), s)
        }
        BackgroundKind::FlatCap => {
            let s = WarpedFlowState::flat_cap(b.n, j, b.length)?;
            (Bg::Fixed(StaticBackground(s.clone())), s)
        }
        BackgroundKind::ShrinkingSphere => {
            let s = WarpedFlowState::round_sphere(b.n, j)?;
            (Bg::Flow(run_with_stride(&s, t_end, 0.25, 4)?), s)
        }
        BackgroundKind::Perturbed => {
            let amp = flow::calibrate_amplitude(b.n, j, b.epsilon, b.seed)?;
            let s = WarpedFlowState::perturbed_sphere(b.n, j, amp, b.seed)?;
            (Bg::Flow(run_with_stride(&s, t_end, 0.25, 4)?), s)
        }
    })
}

#[derive(Args, Serialize)]
pub struct HeatArgs {
    #[command(flatten)]
    pub bg: BackgroundArgs,
    #[arg(long, value_enum, default_value = "kernel")]
    pub data: HeatData,
    #[arg(long, default_value_t = 0.01)]
    pub value: f64,
    /// Heat grid refinement over the metric grid.
    #[arg(long, default_value_t = 4)]
    pub refine: usize,
    /// Source time.
    #[arg(long, default_value_t = 0.0)]
    pub s: f64,
    #[arg(long = "T", default_value_t = 0.05)]
    pub t_end: f64,
    #[arg(long, default_value_t = 50)]
    pub record_every: usize,
}

#[derive(Serialize)]
struct HeatSummary {
    sigma: f64,
    dt: f64,
    steps: usize,
    records: usize,
    mass_drift: f64,
    min_value: f64,
    /// Static backgrounds: sup deviation from the closed-form kernel,
    /// relative to its peak, after burn-in.
    oracle_deviation: Option<f64>,
    convolution: Option<heat::ConvolutionReport>,
}

fn profile_series(p: &HeatProfile) -> Series {
    let mut s = Series::new(&["t", "mass", "g_pole", "g_max"]);
    for (k, t) in p.times.iter().enumerate() {
        let g = &p.values[k];
        s.push(vec![*t, p.mass[k], g[0], g.iter().cloned().fold(f64::NEG_INFINITY, f64::max)]);
    }
    s
}

pub fn heat_run(a: &HeatArgs) -> anyhow::Result<Run> {
    if !(a.t_end > a.s) || a.s < 0.0 || a.refine == 0 || a.record_every == 0 {
        return usage("need 0 <= s < T, refine >= 1 and record_every >= 1");
    }
    let (bg, init) = build_background(&a.bg, a.bg.j, a.t_end)?;
    let opts = HeatOptions { dt: None, record_every: a.record_every, refine: a.refine };
    let mut convolution = None;
    let prof = match a.data {
        HeatData::Kernel => heat::solve_conjugate(&bg, a.s, a.t_end, opts)?,
        HeatData::Constant => {
            let len = heat::refine(&init, a.refine).len();
            heat::solve_from(&bg, a.s, a.t_end, opts, vec![a.value; len])?
        }
        HeatData::Ell => {
            let Bg::Flow(hist) = &bg else {
                return usage("ell data needs an evolving background");
            };
            let ell0 = flow::ell_field(&init, ConeKind::S1, 0)?;
            convolution = Some(heat::ell_convolution_bound(hist, &ell0, opts, 0.0)?);
            let mut carrier = init.clone();
            carrier.psi = ell0.iter().map(|v| v + 1.0).collect();
            let data = heat::refine(&carrier, a.refine).psi.iter().map(|v| (v - 1.0).max(0.0)).collect();
            heat::solve_from(&bg, a.s, a.t_end, opts, data)?
        }
    };
    let m0 = prof.mass[0];
    let mass_drift = prof.mass.iter().map(|m| (m - m0).abs() / m0.abs().max(1e-300)).fold(0.0, f64::max);
    let oracle_deviation = match (a.data, a.bg.background) {
        (HeatData::Kernel, BackgroundKind::StaticSphere) => Some(heat::sphere_oracle_deviation(&prof, 50)),
        (HeatData::Kernel, BackgroundKind::FlatCap) => {
            let n = a.bg.n;
            Some(heat::oracle_deviation(&prof, prof.burn_in_time(), |tau, r| heat::euclidean_kernel(n, tau, r)))
        }
        _ => None,
    };
    let pass = mass_drift <= 1e-4 && oracle_deviation.is_none_or(|d| d <= 1e-3);
    let rep = HeatSummary {
        sigma: prof.sigma,
        dt: prof.dt,
        steps: prof.steps,
        records: prof.times.len(),
        mass_drift,
        min_value: prof.min_value,
        oracle_deviation,
        convolution,
    };
    let mut jsonl = Vec::new();
    prof.write_jsonl(&mut jsonl)?;
    Ok(Run::new("heat-run", Some(a.bg.seed), a, &rep, pass, &[("mass", 1e-4), ("oracle", 1e-3)])?
        .with_series(profile_series(&prof))
        .with_extra("jsonl", jsonl)
        .with_summary(format!("mass drift {:e}, oracle deviation {:?}", mass_drift, oracle_deviation)))
}

#[derive(Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub bg: BackgroundArgs,
    /// Curvature hypothesis `|Rm| <= A / t`.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1)]
    pub refine: usize,
    #[arg(long, default_value_t = 0.0)]
    pub s: f64,
    #[arg(long, default_value_t = 0.01)]
    pub t_min: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_max: f64,
    #[arg(long, default_value_t = 20)]
    pub record_every: usize,
}

#[derive(Serialize)]
struct FitSummary {
    fits: Vec<(usize, heat::GaussianFit)>,
    refinement_gap: f64,
}

pub fn gaussian_fit(a: &FitArgs) -> anyhow::Result<Run> {
    if !(a.t_max > a.t_min && a.t_min > 0.0) || a.s < 0.0 || a.refine == 0 {
        return usage("need 0 < t_min < t_max, s >= 0 and refine >= 1");
    }
    let mut fits = Vec::new();
    for j in [a.bg.j, 2 * a.bg.j] {
        let (bg, _) = build_background(&a.bg, j, a.t_max)?;
        let opts = HeatOptions { dt: None, record_every: a.record_every, refine: a.refine };
        let prof = heat::solve_conjugate(&bg, a.s, a.t_max, opts)?;
        fits.push((j, heat::gaussian_fit(&prof, a.a, a.t_min, a.t_max)?));
    }
    let gap = (fits[0].1.c / fits[1].1.c - 1.0).abs();
    let pass = gap <= 0.1 && fits.iter().all(|(_, f)| f.hypothesis_ok && f.c.is_finite());
    let mut series = Series::new(&["resolution", "c", "max_t_rm"]);
    for (j, f) in &fits {
        series.push(vec![*j as f64, f.c, f.max_t_rm]);
    }
    let rep = FitSummary { fits, refinement_gap: gap };
    Ok(Run::new("gaussian-fit", Some(a.bg.seed), a, &rep, pass, &[("refinement_gap", 0.1), ("c_cap", 1e6)])?
        .with_series(series)
        .with_summary(format!("refinement gap {gap:e}")))
}
