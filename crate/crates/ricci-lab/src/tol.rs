//! Tolerance ladder shared by every module.
//!
//! Constraint residuals, membership slack and optimizer agreement are kept
//! apart so that a failure report says which layer gave way.

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_REL: f64 = 1e-10;

/// Residual allowed on parametrized constraints (`v^2 = 0`, `tr v^2 = 0`, ...).
pub const CONSTRAINT: f64 = 1e-10;

/// Slack for cone membership and boundary proximity.
pub const MEMBERSHIP: f64 = 1e-8;

/// Agreement expected between independent optimizer runs.
pub const OPTIMIZER: f64 = 1e-6;

/// First Bianchi identity residual accepted on stored operators.
pub const BIANCHI: f64 = 1e-12;

/// Bianchi drift along an ODE trajectory that triggers re-projection.
pub const BIANCHI_DRIFT: f64 = 1e-9;

/// Ratio `|Rm| / |Rm0|` at which an ODE run is declared blown up.
pub const BLOWUP_FACTOR: f64 = 1e6;

/// Floor below which heat-kernel values are excluded from ratios.
pub const HEAT_FLOOR: f64 = 1e-12;

/// Lower cut-off on `ell` where the evolution inequality is tested.
pub const ELL_FLOOR: f64 = 1e-4;

/// Serializable snapshot of the ladder, embedded in reports.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    pub rank_rel: f64,
    pub constraint: f64,
    pub membership: f64,
    pub optimizer: f64,
    pub bianchi: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rank_rel: RANK_REL, constraint: CONSTRAINT, membership: MEMBERSHIP, optimizer: OPTIMIZER, bianchi: BIANCHI }
    }
}
