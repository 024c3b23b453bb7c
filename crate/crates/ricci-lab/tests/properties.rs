use proptest::prelude::*;
use ricci_lab::bivector::{decompose_rank2, eigen_norms, wedge, wedge_dim};
use ricci_lab::cones::{self, ConeKind};
use ricci_lab::conformal::{conformal_curvature, FactorJet};
use ricci_lab::curvature::{bianchi_project, kn_product};
use ricci_lab::flow::WarpedFlowState;
use ricci_lab::heat::{self, HeatOptions, StaticBackground};
use ricci_lab::kaehler::{kn_tilde, KaehlerCurvature};
use ricci_lab::ode::{self, Method};
use ricci_lab::{rng, ComplexBivector, CurvatureOperator, SymmetricTwoTensor, C64};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn wedge_is_antisymmetric_and_rank_two(n in 2usize..8, seed in any::<u64>()) {
        let mut g = rng::stream(seed, 0);
        let x = rng::complex_vec(&mut g, n);
        let y = rng::complex_vec(&mut g, n);
        let v = wedge(&x, &y).unwrap().bivector;
        let m = v.entries();
        prop_assert!((&m + m.transpose()).norm() < 1e-12 * m.norm().max(1.0));
        prop_assert!(v.rank() <= 2);
        let swapped = wedge(&y, &x).unwrap().bivector;
        prop_assert!(v.add(&swapped).unwrap().norm() < 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn herm_inner_is_hermitian_and_positive(n in 2usize..8, seed in any::<u64>()) {
        let mut g = rng::stream(seed, 1);
        let v = ComplexBivector::from_coords(n, rng::complex_vec(&mut g, wedge_dim(n))).unwrap();
        let w = ComplexBivector::from_coords(n, rng::complex_vec(&mut g, wedge_dim(n))).unwrap();
        let vw = v.herm_inner(&w).unwrap();
        let wv = w.herm_inner(&v).unwrap();
        prop_assert!((vw - wv.conj()).norm() < 1e-12 * (1.0 + vw.norm()));
        let vv = v.herm_inner(&v).unwrap();
        prop_assert!(vv.im.abs() < 1e-12 * vv.re.abs().max(1.0));
        prop_assert!(vv.re > 0.0);
    }

    #[test]
    fn kn_product_satisfies_bianchi(n in 3usize..8, seed in any::<u64>()) {
        let mut g = rng::stream(seed, 2);
        let a = SymmetricTwoTensor::from_matrix(&rng::normal_matrix(&mut g, n, n)).unwrap();
        let b = SymmetricTwoTensor::from_matrix(&rng::normal_matrix(&mut g, n, n)).unwrap();
        let k = kn_product(&a, &b).unwrap();
        prop_assert!(k.bianchi_residual() < 1e-12 * k.norm().max(1.0));
    }

    #[test]
    fn bianchi_projection_is_idempotent(n in 3usize..7, seed in any::<u64>()) {
        let mut g = rng::stream(seed, 3);
        let d = wedge_dim(n);
        let raw = rng::normal_matrix(&mut g, d, d);
        let p = bianchi_project(&(&raw + raw.transpose())).unwrap();
        let pp = bianchi_project(p.form()).unwrap();
        prop_assert!(p.bianchi_residual() < 1e-12 * p.norm().max(1.0));
        prop_assert!((p.form() - pp.form()).norm() < 1e-12 * p.norm().max(1.0));
    }

    #[test]
    fn reaction_term_is_an_algebraic_curvature_operator(n in 3usize..8, seed in any::<u64>()) {
        let op = CurvatureOperator::random(n, &mut rng::stream(seed, 4));
        let q = op.reaction_q();
        prop_assert!((q.form() - q.form().transpose()).norm() < 1e-12 * q.norm().max(1.0));
        prop_assert!(q.bianchi_residual() < 1e-10 * q.norm().max(1.0));
        // Quadratic: Q(s Rm) = s^2 Q(Rm).
        let q2 = op.scale(-1.7).reaction_q();
        prop_assert!((q2.form() - q.form() * (1.7 * 1.7)).norm() < 1e-11 * q2.norm().max(1.0));
    }

    #[test]
    fn rank_two_split_keeps_eigenvalue_moduli(n in 4usize..8, seed in any::<u64>(), s in -3.0f64..3.0) {
        let mut g = rng::stream(seed, 5);
        let v = wedge(&rng::complex_vec(&mut g, n), &rng::complex_vec(&mut g, n)).unwrap().bivector;
        let split = decompose_rank2(&v).unwrap();
        prop_assert!(v.sub(&split.u.add(&split.w).unwrap()).unwrap().norm() < 1e-10 * v.norm());
        let z = split.u.axpy(s, &split.w).unwrap();
        prop_assert!(z.rank() <= 2);
        let norms = eigen_norms(&z).unwrap();
        for a in &norms[n - 2..] {
            prop_assert!((a - split.alpha).abs() < 1e-8 * split.alpha.max(1.0));
        }
    }

    #[test]
    fn kaehler_products_keep_the_symmetries(m in 1usize..4, seed in any::<u64>()) {
        let r = KaehlerCurvature::random(m, &mut rng::stream(seed, 6));
        let q = r.q_kaehler();
        prop_assert!(q.symmetry_residual() < 1e-12 * q.norm().max(1.0));
        let k = kn_tilde(&r.ricci_k()).unwrap();
        prop_assert!(k.symmetry_residual() < 1e-12 * k.norm().max(1.0));
    }

    #[test]
    fn constant_conformal_factor_scales_curvature(n in 3usize..7, seed in any::<u64>(), f in -1.0f64..1.0) {
        let op = CurvatureOperator::random(n, &mut rng::stream(seed, 7));
        let hat = conformal_curvature(&op, &FactorJet::constant(n, f)).unwrap();
        prop_assert!(hat.bianchi_residual() < 1e-12 * hat.norm().max(1.0));
        prop_assert!((hat.form() - op.form() * (2.0 * f).exp()).norm() < 1e-12 * hat.norm().max(1.0));
    }

    #[test]
    fn json_round_trip_is_exact(n in 2usize..8, seed in any::<u64>()) {
        let op = CurvatureOperator::random(n, &mut rng::stream(seed, 8));
        let back = CurvatureOperator::from_json(&op.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, op);
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn ell_is_positively_homogeneous(n in 4usize..6, seed in 0u64..1000, s in 0.2f64..5.0, kind in 0usize..5) {
        let cone = [ConeKind::S1, ConeKind::S2, ConeKind::S3, ConeKind::S4, ConeKind::S5][kind];
        let op = CurvatureOperator::random(n, &mut rng::stream(seed, 9));
        let (l, min) = cones::ell_with(&op, cone, &cones::MinOptions::new(cone, seed)).unwrap();
        // The scaled problem has the same minimizer; evaluate it there.
        let scaled = op.scale(s);
        let at = scaled.evaluate(&min.argmin).unwrap();
        prop_assert!(((-at).max(0.0) - s * l).abs() < 1e-10 * (1.0 + s * l));
        // Shifting by the defect lands on the boundary of the cone.
        let star = op.shifted(l);
        prop_assert!(star.evaluate(&min.argmin).unwrap().abs() < 1e-8 * star.norm().max(1.0));
    }

    #[test]
    fn ell_is_monotone_along_the_nested_sets(n in 4usize..6, seed in 0u64..1000) {
        let op = CurvatureOperator::random(n, &mut rng::stream(seed, 10));
        let chain = cones::ell_nested(&op, seed).unwrap();
        let [l1, l2, l3, l4, l5] = chain;
        let slack = 1e-8 * op.norm().max(1.0);
        for (a, b) in [(l1, l2), (l2, l4), (l4, l3), (l1, l5), (l5, l4)] {
            prop_assert!(a >= b - slack, "chain {chain:?}");
        }
    }

    #[test]
    fn ode_keeps_the_bianchi_identity(n in 3usize..6, seed in any::<u64>()) {
        let op = CurvatureOperator::random(n, &mut rng::stream(seed, 11)).scale(0.3);
        let t_end = 0.3 * ode::projected_blowup(&op).min(1.0);
        let traj = ode::integrate(&op, t_end, t_end / 200.0, Method::Rk4).unwrap();
        prop_assert!(traj.max_bianchi_drift <= 1e-9);
        for s in &traj.states {
            prop_assert!(s.bianchi_residual() <= 1e-9 * s.norm().max(1.0));
        }
    }

    #[test]
    fn warped_scalar_curvature_matches_its_decomposition(n in 2usize..6, seed in any::<u64>(), amp in 0.0f64..0.2) {
        let s = WarpedFlowState::perturbed_sphere(n, 60, amp, seed).unwrap();
        let f = s.curvature().unwrap();
        let nf = n as f64;
        for k in 0..s.len() {
            let want = 2.0 * (nf - 1.0) * f.k_rad[k] + (nf - 1.0) * (nf - 2.0) * f.k_sph[k];
            prop_assert!((f.scal[k] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn heat_flow_conserves_mass_and_sign(source in 0.0f64..0.01, t in 0.005f64..0.02) {
        let s = WarpedFlowState::round_sphere(3, 60).unwrap();
        let p = heat::solve_conjugate(&StaticBackground(s), source, source + t, HeatOptions { dt: None, record_every: 10, refine: 2 }).unwrap();
        prop_assert!(p.min_value >= -1e-8);
        for m in &p.mass {
            prop_assert!((m - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn complexify_agrees_with_the_real_basis() {
    let mut g = rng::stream(12, 0);
    let x = rng::normal_vec(&mut g, 5);
    let y = rng::normal_vec(&mut g, 5);
    let real = ricci_lab::RealBivector::wedge(&x, &y).unwrap();
    let cx = wedge(&x.map(|v| C64::new(v, 0.0)), &y.map(|v| C64::new(v, 0.0))).unwrap().bivector;
    assert!(real.complexify().sub(&cx).unwrap().norm() < 1e-14);
}
