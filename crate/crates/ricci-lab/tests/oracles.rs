//! Independent brute-force oracle for the rank-2 set: plain finite-difference
//! descent on `Rm(z^e, conj) / |z^e|^2` over raw pairs `(z, e)`, sharing no
//! code with the cone optimizer beyond `evaluate`.

use nalgebra::DVector;
use ricci_lab::bivector::{wedge, ComplexBivector};
use ricci_lab::cones::{min_quadratic, ConeKind};
use ricci_lab::{rng, CurvatureOperator, C64};

fn split(p: &[f64], n: usize) -> (DVector<C64>, DVector<C64>) {
    let z = DVector::from_fn(n, |i, _| C64::new(p[i], p[n + i]));
    let e = DVector::from_fn(n, |i, _| C64::new(p[2 * n + i], p[3 * n + i]));
    (z, e)
}

fn rayleigh(rm: &CurvatureOperator, p: &[f64], n: usize) -> f64 {
    let (z, e) = split(p, n);
    let v: ComplexBivector = wedge(&z, &e).unwrap().bivector;
    let nv = v.norm_sq();
    if nv < 1e-20 {
        return f64::INFINITY;
    }
    rm.evaluate(&v).unwrap() / nv
}

fn descend(rm: &CurvatureOperator, mut p: Vec<f64>, n: usize) -> f64 {
    let h = 1e-6;
    let mut f = rayleigh(rm, &p, n);
    let mut step = 0.1;
    for _ in 0..2000 {
        let g: Vec<f64> = (0..p.len())
            .map(|i| {
                let mut q = p.clone();
                q[i] += h;
                let fp = rayleigh(rm, &q, n);
                q[i] -= 2.0 * h;
                (fp - rayleigh(rm, &q, n)) / (2.0 * h)
            })
            .collect();
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gn < 1e-10 {
            break;
        }
        loop {
            let q: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let fq = rayleigh(rm, &q, n);
            if fq < f {
                p = q;
                f = fq;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return f;
            }
        }
        // Keep the pair at unit scale; the quotient is scale invariant.
        let s = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        p.iter_mut().for_each(|x| *x /= s / 2.0);
    }
    f
}

#[test]
fn rank_two_minimum_matches_brute_force() {
    for (n, seed) in [(4usize, 1u64), (4, 2), (5, 3)] {
        let rm = CurvatureOperator::random(n, &mut rng::stream(seed, 0));
        let fast = min_quadratic(&rm, ConeKind::S5, seed).unwrap().value;
        let mut g = rng::stream(seed, 1);
        let brute = (0..40).map(|_| descend(&rm, (0..4 * n).map(|_| rng::normal(&mut g)).collect(), n)).fold(f64::INFINITY, f64::min);
        // The optimizer must not be beaten, and the oracle must come close.
        assert!(fast <= brute + 1e-8, "n = {n}: optimizer {fast} above oracle {brute}");
        assert!(brute <= fast + 1e-5, "n = {n}: oracle {brute} far above optimizer {fast}");
    }
}

#[test]
fn s1_minimum_is_the_smallest_eigenvalue() {
    for n in 3..=6 {
        let rm = CurvatureOperator::random(n, &mut rng::stream(40 + n as u64, 0));
        let fast = min_quadratic(&rm, ConeKind::S1, 0).unwrap().value;
        assert!((fast - rm.min_eigenvalue()).abs() < 1e-10 * rm.norm().max(1.0));
    }
}
