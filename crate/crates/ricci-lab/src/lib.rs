//! Numerical laboratory for algebraic curvature operators under Ricci flow.
//!
//! The crate covers bivector algebra on `so(n)`, curvature operators and
//! their reaction term, Kähler curvature tensors, curvature cones with the
//! defect `ell`, statistical checks of the cross-term inequalities, the
//! pointwise curvature ODE, rotationally symmetric Ricci flow on spheres and
//! the conjugate heat kernel along such flows.

// `!(x > 0.0)` is the NaN-rejecting form used for input checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bivector;
pub mod cones;
pub mod conformal;
pub mod curvature;
pub mod error;
pub mod flow;
pub mod heat;
pub mod kaehler;
pub mod linalg;
pub mod ode;
pub mod report;
pub mod rng;
pub mod tol;
pub mod verify;

pub use bivector::{ComplexBivector, Rank2Certificate, RealBivector, C64};
pub use cones::{ConeKind, ConeSpec, MinResult};
pub use curvature::{CurvatureOperator, SymmetricTwoTensor};
pub use error::{LabError, Result};
pub use kaehler::KaehlerCurvature;
