mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use splitkit_core::rng::substream;
use splitkit_core::subspace::{
    chi, independent_decomposition, mean_projector, Subspace, SubspaceDistribution, DEFAULT_TOL,
};

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=8).prop_flat_map(|n| (Just(n), 0..=n, any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_is_symmetric_idempotent_with_trace_dim((n, d, seed) in dims()) {
        let s = Subspace::random(n, d, &mut substream(seed, "prop", 0));
        let p = s.projector();
        prop_assert!((&p * &p - &p).amax() < 1e-12);
        prop_assert!((&p - p.transpose()).amax() < 1e-12);
        prop_assert!((p.trace() - d as f64).abs() < 1e-12);
        let q = s.complement().projector();
        prop_assert!((p + q - DMatrix::<f64>::identity(n, n)).amax() < 1e-12);
    }

    #[test]
    fn split_is_orthogonal_and_exact((n, d, seed) in dims()) {
        let mut rng = substream(seed, "prop", 1);
        let s = Subspace::random(n, d, &mut rng);
        let x = DVector::from_fn(n, |i, _| (i as f64 + 1.0).sin() * 3.0);
        let (a, b) = s.split(&x);
        prop_assert!((&a + &b - &x).amax() < 1e-12);
        prop_assert!(a.dot(&b).abs() < 1e-10);
        prop_assert!(s.contains(&a));
    }

    #[test]
    fn intersection_lies_in_both((n, d, seed) in dims(), d2 in 0usize..=8) {
        let mut rng = substream(seed, "prop", 2);
        let frame = random_orthogonal(n, &mut rng);
        let d2 = d2.min(n);
        let cols = |r: std::ops::Range<usize>| -> Subspace {
            let vs: Vec<DVector<f64>> = r.map(|j| frame.column(j).into_owned()).collect();
            if vs.is_empty() { Subspace::zero(n) } else { Subspace::from_spanning_set(&vs, n, DEFAULT_TOL).unwrap() }
        };
        let a = cols(0..d);
        let b = cols(n - d2..n);
        let i = a.intersect(&b).unwrap();
        prop_assert_eq!(i.dim(), (d + d2).saturating_sub(n));
        let pi = i.projector();
        prop_assert!((a.projector() * &pi - &pi).amax() < 1e-9);
        prop_assert!((b.projector() * &pi - &pi).amax() < 1e-9);
    }

    #[test]
    fn decomposition_blocks_partition_space(seed in any::<u64>()) {
        let xi = random_instance(&mut substream(seed, "prop", 3));
        let d = independent_decomposition(&xi).unwrap();
        let n = xi.ambient_dim();
        let total: usize = d.blocks().iter().map(|b| b.dim()).sum();
        prop_assert_eq!(total, n);
        let mut sum = DMatrix::<f64>::zeros(n, n);
        for b in d.blocks() {
            sum += b.projector();
        }
        prop_assert!((sum - DMatrix::<f64>::identity(n, n)).amax() < 1e-8);
        for e in &d.independent {
            for a in xi.atoms().unwrap() {
                prop_assert!(chi(&SubspaceDistribution::dirac(a.subspace.clone()), &e.basis().column(0).into_owned()).unwrap() < 1e-8);
            }
        }
    }
}

#[test]
fn decomposition_matches_sign_pattern_oracle() {
    for i in 0..50 {
        let xi = random_instance(&mut substream(99, "oracle", i));
        let d = independent_decomposition(&xi).unwrap();
        assert!(matches_oracle(&d, &sign_pattern_oracle(&xi), 1e-8), "instance {i}");
    }
}

#[test]
fn bernstein_has_no_independent_subspace() {
    let d = independent_decomposition(&bernstein()).unwrap();
    assert!(d.independent.is_empty());
    assert_eq!(d.dependent.dim(), 2);
    let f = mean_projector(&bernstein()).unwrap();
    let oracle = 0.5 - 0.5f64.sqrt() / 2.0;
    assert!((f.lambda - oracle).abs() < 1e-12);
}

#[test]
fn coordinate_frames_have_closed_form_lambda() {
    for k in 2..=6 {
        let es: Vec<Subspace> = (0..k)
            .map(|i| Subspace::coordinate(k, &(0..k).filter(|&j| j != i).collect::<Vec<_>>()).unwrap())
            .collect();
        let f = mean_projector(&SubspaceDistribution::uniform(es).unwrap()).unwrap();
        assert!((f.lambda - 1.0 / k as f64).abs() < 1e-12);
        assert!((f.q - DMatrix::<f64>::identity(k, k) * ((k - 1) as f64 / k as f64)).amax() < 1e-12);
    }
}

#[test]
fn dirac_on_a_line_is_shearer_degenerate() {
    let xi = SubspaceDistribution::dirac(span(&[&[1.0, 0.0]]));
    let d = independent_decomposition(&xi).unwrap();
    assert_eq!(d.independent.len(), 2);
    assert!(d.dependent.is_zero());
    assert_eq!(mean_projector(&xi).unwrap().lambda, 0.0);
}
