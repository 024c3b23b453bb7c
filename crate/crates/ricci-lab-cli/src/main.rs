//! `ricci-lab` command-line driver.
//!
//! Every subcommand writes `<out>/<command>.json` (report envelope) and
//! `<out>/<command>.csv` (plot data), plus JSON-lines series where useful.
//! Exit status: 0 when all asserted tolerances hold, 1 on an assertion
//! failure, 2 on invalid configuration (nothing is written then).

// `!(x > 0.0)` is the NaN-rejecting form used for input checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod algebra;
mod dynamics;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ricci_lab::LabError;

use output::Run;

#[derive(Parser)]
#[command(name = "ricci-lab", version, about = "Curvature-operator and Ricci flow experiments")]
struct Cli {
    /// Directory for reports and series.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-term inequality at cone boundaries, asserted against a given lambda.
    VerifyCrossTerm(algebra::CrossTermArgs),
    /// Empirical cross-term constant at cone boundaries.
    EstimateLambda(algebra::CrossTermArgs),
    /// Adversarial search for negative k-Ricci sums on C(S3).
    RicciKSearch(algebra::RicciArgs),
    /// Curvature defect of one operator.
    Ell(algebra::EllArgs),
    /// Cross-term constant for Kähler curvature tensors.
    KaehlerVerify(algebra::KaehlerArgs),
    /// Conformal curvature formula on constant-curvature models.
    ConformalCheck(algebra::ConformalArgs),
    /// Integrate the curvature ODE.
    OdeRun(dynamics::OdeArgs),
    /// Membership of ODE solutions in the time-indexed family.
    Pic1Family(dynamics::FamilyArgs),
    /// Rotationally symmetric Ricci flow.
    FlowRun(dynamics::FlowArgs),
    /// Defect amplification on perturbed spheres.
    AlmostPreserve(dynamics::AlmostArgs),
    /// Conjugate heat kernel or convolution along a flow.
    HeatRun(dynamics::HeatArgs),
    /// Gaussian upper-bound fit of the conjugate heat kernel.
    GaussianFit(dynamics::FitArgs),
}

fn dispatch(cmd: &Command) -> anyhow::Result<Run> {
    match cmd {
        Command::VerifyCrossTerm(a) => algebra::verify_cross_term(a, true),
        Command::EstimateLambda(a) => algebra::verify_cross_term(a, false),
        Command::RicciKSearch(a) => algebra::ricci_k_search(a),
        Command::Ell(a) => algebra::ell(a),
        Command::KaehlerVerify(a) => algebra::kaehler_verify(a),
        Command::ConformalCheck(a) => algebra::conformal_check(a),
        Command::OdeRun(a) => dynamics::ode_run(a),
        Command::Pic1Family(a) => dynamics::pic1_family(a),
        Command::FlowRun(a) => dynamics::flow_run(a),
        Command::AlmostPreserve(a) => dynamics::almost_preserve(a),
        Command::HeatRun(a) => dynamics::heat_run(a),
        Command::GaussianFit(a) => dynamics::gaussian_fit(a),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<output::UsageError>().is_some() {
        return true;
    }
    matches!(e.downcast_ref::<LabError>(), Some(LabError::Rejected(_) | LabError::DimensionMismatch { .. }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let run = match dispatch(&cli.command) {
        Ok(r) => r,
        Err(e) if is_usage(&e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("failure: {e:#}");
            return ExitCode::from(1);
        }
    };
    let written = match run.write(&cli.out) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("failure: {e:#}");
            return ExitCode::from(1);
        }
    };
    for p in &written.reports {
        println!("wrote {}", p.display());
    }
    if run.pass {
        ExitCode::SUCCESS
    } else {
        eprintln!("assertion failed: {}", run.summary);
        for p in &written.certificates {
            eprintln!("certificate: {}", p.display());
        }
        ExitCode::from(1)
    }
}
