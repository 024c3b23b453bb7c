use std::path::PathBuf;

use clap::Args;
use ricci_lab::cones::{self, ConeKind, MinOptions};
use ricci_lab::conformal::{self, ModelFactor};
use ricci_lab::curvature::OperatorDoc;
use ricci_lab::report::Series;
use ricci_lab::{rng, tol, verify, CurvatureOperator};
use serde::Serialize;

use crate::output::{usage, Run};

fn parse_cone(s: &str) -> anyhow::Result<ConeKind> {
    match s.parse::<ConeKind>() {
        Ok(c) => Ok(c),
        Err(e) => usage(e.to_string()),
    }
}

#[derive(Args, Serialize)]
pub struct CrossTermArgs {
    /// One of S1..S5.
    #[arg(long)]
    pub cone: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bound to assert (verify-cross-term only).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub lambda: f64,
}

pub fn verify_cross_term(a: &CrossTermArgs, assert_bound: bool) -> anyhow::Result<Run> {
    let cone = parse_cone(&a.cone)?;
    if cone == ConeKind::Ct {
        return usage("the time-indexed family has no cross-term suite");
    }
    if a.samples == 0 {
        return usage("need at least one sample");
    }
    let rep = verify::estimate_lambda(cone, a.n, a.samples, a.seed)?;
    let (command, pass) = if assert_bound {
        let ok = rep.infinite_count == 0 && rep.lambda_empirical <= a.lambda + rep.tolerance;
        ("verify-cross-term", ok)
    } else {
        ("estimate-lambda", rep.infinite_count == 0)
    };
    let mut series = Series::new(&["n", "samples", "lambda_empirical", "worst_defect", "infinite_count", "max_null_value", "violations"]);
    series.push(vec![
        a.n as f64,
        a.samples as f64,
        rep.lambda_empirical,
        rep.worst_defect,
        rep.infinite_count as f64,
        rep.max_null_value,
        rep.violations.len() as f64,
    ]);
    let asserted = if assert_bound { vec![("lambda", a.lambda), ("tolerance", rep.tolerance)] } else { vec![("tolerance", rep.tolerance)] };
    let run = Run::new(command, Some(a.seed), a, &rep, pass, &asserted)?
        .with_series(series)
        .with_summary(format!("lambda_empirical = {:e}, infinite = {}", rep.lambda_empirical, rep.infinite_count))
        .with_certificates(&rep.violations)?;
    Ok(run)
}

#[derive(Args, Serialize)]
pub struct RicciArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn ricci_k_search(a: &RicciArgs) -> anyhow::Result<Run> {
    if a.starts == 0 {
        return usage("need at least one start");
    }
    let rep = verify::ricci_k_nonneg_search(a.n, a.k, a.starts, a.seed)?;
    let pass = rep.pass.unwrap_or(true);
    let mut series = Series::new(&["n", "k", "starts", "screened_worst", "worst", "refined"]);
    series.push(vec![a.n as f64, a.k as f64, a.starts as f64, rep.screened_worst, rep.worst, rep.refined as f64]);
    Run::new("ricci-k-search", Some(a.seed), a, &rep, pass, &[("min_sum", -tol::MEMBERSHIP)])?
        .with_series(series)
        .with_summary(format!("worst normalized sum {:e}", rep.worst))
        .with_certificates(&rep.certificate)
}

#[derive(Args, Serialize)]
pub struct EllArgs {
    /// S1..S5, or `all` for the nested chain.
    #[arg(long, default_value = "all")]
    pub cone: String,
    /// Operator as JSON (`{"n": .., "form": [[..]]}`); otherwise a seeded
    /// random operator of dimension `--n`.
    #[arg(long)]
    pub operator: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub starts: Option<usize>,
}

#[derive(Serialize)]
struct EllReport {
    n: usize,
    cones: Vec<String>,
    ell: Vec<f64>,
    operator: OperatorDoc,
    argmin: Option<ricci_lab::ComplexBivector>,
}

pub fn load_operator(path: &Option<PathBuf>, n: Option<usize>, seed: u64) -> anyhow::Result<CurvatureOperator> {
    match (path, n) {
        (Some(p), _) => {
            let text = match std::fs::read_to_string(p) {
                Ok(t) => t,
                Err(e) => return usage(format!("{}: {e}", p.display())),
            };
            match CurvatureOperator::from_json(&text) {
                Ok(op) => Ok(op),
                Err(e) => usage(format!("{}: {e}", p.display())),
            }
        }
        (None, Some(n)) if n >= 2 => Ok(CurvatureOperator::random(n, &mut rng::stream(seed, 0))),
        _ => usage("give --operator FILE or --n N (N >= 2)"),
    }
}

pub fn ell(a: &EllArgs) -> anyhow::Result<Run> {
    let op = load_operator(&a.operator, a.n, a.seed)?;
    let n = op.n();
    let (names, values, argmin) = if a.cone.eq_ignore_ascii_case("all") {
        if n < 4 {
            return usage("the nested chain needs n >= 4");
        }
        let v = cones::ell_nested(&op, a.seed)?;
        (ConeKind::SETS.iter().map(|c| format!("{c:?}")).collect(), v.to_vec(), None)
    } else {
        let cone = parse_cone(&a.cone)?;
        if cone == ConeKind::Ct {
            return usage("membership in the time-indexed family is checked by pic1-family");
        }
        let mut opts = MinOptions::new(cone, a.seed);
        if let Some(s) = a.starts {
            opts = opts.with_starts(s);
        }
        let (l, min) = cones::ell_with(&op, cone, &opts)?;
        (vec![format!("{cone:?}")], vec![l], Some(min.argmin))
    };
    let mut series = Series::new(&["index", "ell"]);
    for (i, v) in values.iter().enumerate() {
        series.push(vec![i as f64 + 1.0, *v]);
    }
    let rep = EllReport { n, cones: names, ell: values, operator: OperatorDoc::from(&op), argmin };
    Ok(Run::new("ell", Some(a.seed), a, &rep, true, &[])?.with_series(series))
}

#[derive(Args, Serialize)]
pub struct KaehlerArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn kaehler_verify(a: &KaehlerArgs) -> anyhow::Result<Run> {
    if a.m == 0 || a.samples == 0 {
        return usage("need m >= 1 and at least one sample");
    }
    let rep = verify::kaehler_lambda(a.m, a.samples, a.seed)?;
    let mut series = Series::new(&["m", "samples", "lambda_empirical", "bound", "infinite_count", "min_chain_slack"]);
    series.push(vec![a.m as f64, a.samples as f64, rep.lambda_empirical, rep.bound, rep.infinite_count as f64, rep.min_chain_slack]);
    Ok(Run::new("kaehler-verify", Some(a.seed), a, &rep, rep.pass, &[("lambda_bound", rep.bound), ("slack", 1e-6)])?
        .with_series(series)
        .with_summary(format!("lambda_empirical = {:e} against {:e}", rep.lambda_empirical, rep.bound)))
}

#[derive(Args, Serialize)]
pub struct ConformalArgs {
    /// `spherical` or `hyperbolic`.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn conformal_check(a: &ConformalArgs) -> anyhow::Result<Run> {
    let model: ModelFactor = match a.model.parse() {
        Ok(m) => m,
        Err(e) => return usage(format!("{e}")),
    };
    let rep = conformal::conformal_check(model, a.n, a.samples, a.seed)?;
    let mut series = Series::new(&["n", "samples", "expected", "max_deviation", "max_bianchi"]);
    series.push(vec![a.n as f64, a.samples as f64, rep.expected, rep.max_deviation, rep.max_bianchi]);
    Ok(Run::new("conformal-check", Some(a.seed), a, &rep, rep.pass, &[("deviation", rep.tolerance)])?
        .with_series(series)
        .with_summary(format!("max deviation {:e}", rep.max_deviation)))
}
