//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit seed. Independent workers get
//! disjoint ChaCha streams keyed by `(seed, index)`, so results do not depend
//! on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bivector::C64;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| normal(rng))
}

pub fn complex_normal(rng: &mut Rng) -> C64 {
    C64::new(normal(rng), normal(rng))
}

pub fn complex_vec(rng: &mut Rng, len: usize) -> DVector<C64> {
    DVector::from_fn(len, |_, _| complex_normal(rng))
}

pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

pub fn uniform(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.random::<f64>()
}
