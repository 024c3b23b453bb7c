//! Curvature under a conformal change `g_hat = e^{2f} g`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvature::{kn_product, CurvatureOperator, SymmetricTwoTensor};
use crate::error::{check_dim, reject, Result};
use crate::linalg::sym_eigen_sorted;
use crate::rng;

/// Value, gradient and Hessian of `f` at a point, in a `g`-orthonormal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorJet {
    pub f: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl FactorJet {
    pub fn constant(n: usize, f: f64) -> Self {
        Self { f, grad: DVector::zeros(n), hess: DMatrix::zeros(n, n) }
    }
}

/// `e^{2f} (Rm - A . g)` with `A = Hess f - df (x) df + |df|^2 g / 2`, the
/// (0,4) curvature of `g_hat` in the `g`-orthonormal frame.
pub fn conformal_curvature(rm: &CurvatureOperator, jet: &FactorJet) -> Result<CurvatureOperator> {
    let n = rm.n();
    check_dim(n, jet.grad.len())?;
    check_dim(n, jet.hess.nrows())?;
    check_dim(n, jet.hess.ncols())?;
    let g2 = jet.grad.norm_squared();
    let a = SymmetricTwoTensor::from_matrix(&(&jet.hess - &jet.grad * jet.grad.transpose() + DMatrix::identity(n, n) * (0.5 * g2)))?;
    let kn = kn_product(&a, &SymmetricTwoTensor::identity(n))?;
    Ok(rm.sub(&kn)?.scale((2.0 * jet.f).exp()))
}

/// Conformally flat models of constant curvature on (part of) `R^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFactor {
    /// `2 / (1 + |x|^2)`: the unit sphere by stereographic projection.
    Spherical,
    /// `2 / (1 - |x|^2)` on the unit ball: the Poincaré model.
    Hyperbolic,
}

impl std::str::FromStr for ModelFactor {
    type Err = crate::error::LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spherical" | "sphere" => Ok(Self::Spherical),
            "hyperbolic" => Ok(Self::Hyperbolic),
            other => reject(format!("unknown conformal model {other:?}")),
        }
    }
}

impl ModelFactor {
    pub fn curvature(self) -> f64 {
        match self {
            Self::Spherical => 1.0,
            Self::Hyperbolic => -1.0,
        }
    }

    /// Jet of `f = log(2 / (1 + k |x|^2))` with `k = curvature()`.
    pub fn jet_at(self, x: &DVector<f64>) -> Result<FactorJet> {
        let k = self.curvature();
        let n = x.len();
        let d = 1.0 + k * x.norm_squared();
        if d <= 0.0 {
            return reject("point lies outside the model domain");
        }
        let grad = x * (-2.0 * k / d);
        let hess = DMatrix::identity(n, n) * (-2.0 * k / d) + x * x.transpose() * (4.0 * k * k / (d * d));
        Ok(FactorJet { f: (2.0 / d).ln(), grad, hess })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalReport {
    pub model: ModelFactor,
    pub n: usize,
    pub samples: usize,
    pub seed: u64,
    pub expected: f64,
    /// Largest `|K - expected|` over all `g_hat`-unit 2-vectors, i.e. the
    /// operator norm of `Rm_hat / Phi^4 - expected I`.
    pub max_deviation: f64,
    pub max_bianchi: f64,
    pub worst_point: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Samples points of the model domain (the ball of radius 2, resp. 0.9)
/// and compares the conformal formula with constant curvature.
pub fn conformal_check(model: ModelFactor, n: usize, samples: usize, seed: u64) -> Result<ConformalReport> {
    if n < 2 {
        return reject("dimension must be at least 2");
    }
    let radius = match model {
        ModelFactor::Spherical => 2.0,
        ModelFactor::Hyperbolic => 0.9,
    };
    let flat = CurvatureOperator::zero(n);
    let expected = model.curvature();
    let mut worst = (0.0_f64, vec![0.0; n]);
    let mut max_bianchi: f64 = 0.0;
    for k in 0..samples {
        let mut r = rng::stream(seed, k as u64);
        let dir = rng::normal_vec(&mut r, n).normalize();
        let u: f64 = rand::Rng::random(&mut r);
        let x = dir * (radius * u.powf(1.0 / n as f64));
        let jet = model.jet_at(&x)?;
        let hat = conformal_curvature(&flat, &jet)?;
        // |e_i ^ e_j|^2 in g_hat is Phi^4 = e^{4f}.
        let normalized = hat.scale((-4.0 * jet.f).exp());
        let dev = normalized.shifted(-expected);
        let eig = sym_eigen_sorted(dev.form()).0;
        let d = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        max_bianchi = max_bianchi.max(hat.bianchi_residual() / hat.norm().max(1.0));
        if d > worst.0 || k == 0 {
            worst = (d.max(worst.0), x.iter().copied().collect());
        }
    }
    let tolerance = 1e-8;
    Ok(ConformalReport {
        model,
        n,
        samples,
        seed,
        expected,
        max_deviation: worst.0,
        max_bianchi,
        worst_point: worst.1,
        tolerance,
        pass: worst.0 <= tolerance && max_bianchi <= crate::tol::BIANCHI,
    })
}
