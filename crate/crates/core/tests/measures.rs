mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use splitkit_core::measures::{
    covariance_split_defect, empirical_split_test, gaussian_kl, marginal_gaussian, GaussianMeasure, MeasureSpec,
    SplitStatus, SplitTestConfig, Univariate,
};
use splitkit_core::subspace::{independent_decomposition, Subspace, SubspaceDistribution};
use splitkit_core::Error;

fn rotated(angle: f64, variances: [f64; 2]) -> GaussianMeasure {
    let (c, s) = (angle.cos(), angle.sin());
    let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&variances));
    GaussianMeasure::new(DVector::zeros(2), &r * d * r.transpose()).unwrap()
}

#[test]
fn gaussian_kl_matches_closed_forms() {
    let theta = v(&[1.5, -2.0, 0.5]);
    let kl = gaussian_kl(&GaussianMeasure::isotropic(theta.clone()), &GaussianMeasure::standard(3)).unwrap();
    assert!((kl - theta.norm_squared() / 2.0).abs() < 1e-12);
    let p = GaussianMeasure::new(v(&[1.0]), DMatrix::from_element(1, 1, 4.0)).unwrap();
    let q = GaussianMeasure::new(v(&[0.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let oracle = 0.5 * (4.0 + 1.0 - 1.0 - 4f64.ln());
    assert!((gaussian_kl(&p, &q).unwrap() - oracle).abs() < 1e-12);
    let degenerate = GaussianMeasure::new(v(&[0.0, 0.0]), DMatrix::from_diagonal(&v(&[1.0, 0.0]))).unwrap();
    assert!(gaussian_kl(&GaussianMeasure::standard(2), &degenerate).unwrap().is_infinite());
}

#[test]
fn marginal_of_standard_gaussian_is_standard() {
    let e = span(&[&[1.0, 1.0, 0.0]]);
    let m = marginal_gaussian(&rotated(0.3, [1.0, 2.0]).clone(), &span(&[&[1.0, 0.0]])).unwrap();
    assert_eq!(m.dim(), 1);
    let g = marginal_gaussian(&GaussianMeasure::standard(3), &e).unwrap();
    assert!((g.cov()[(0, 0)] - 1.0).abs() < 1e-12);
}

#[test]
fn gaussian_splits_iff_covariance_commutes() {
    let iso = MeasureSpec::Gaussian(GaussianMeasure::standard(2));
    assert_eq!(iso.splits_wrt(&bernstein()), SplitStatus::Splits);
    let tilted = MeasureSpec::Gaussian(rotated(std::f64::consts::FRAC_PI_6, [1.0, 4.0]));
    assert_eq!(tilted.split_status(&span(&[&[1.0, 0.0]])), SplitStatus::DoesNotSplit);
    let aligned = MeasureSpec::Gaussian(rotated(0.0, [1.0, 4.0]));
    assert_eq!(aligned.split_status(&span(&[&[1.0, 0.0]])), SplitStatus::Splits);
}

#[test]
fn non_gaussian_coordinates_only_split_along_coordinate_blocks() {
    let uniform = MeasureSpec::independent(vec![Univariate::Uniform { low: -1.0, high: 1.0 }; 2]).unwrap();
    assert_eq!(uniform.split_status(&span(&[&[1.0, 0.0]])), SplitStatus::Splits);
    assert_eq!(uniform.split_status(&span(&[&[1.0, 1.0]])), SplitStatus::DoesNotSplit);
    assert_eq!(uniform.splits_wrt(&bernstein()), SplitStatus::DoesNotSplit);
}

#[test]
fn product_over_decomposition_splits() {
    let xi = SubspaceDistribution::uniform(vec![
        Subspace::coordinate(3, &[0]).unwrap(),
        Subspace::coordinate(3, &[1, 2]).unwrap(),
    ])
    .unwrap();
    let d = independent_decomposition(&xi).unwrap();
    assert_eq!(d.independent.len(), 2);
    let factors: Vec<MeasureSpec> = d
        .independent
        .iter()
        .map(|b| MeasureSpec::independent(vec![Univariate::Laplace { location: 0.0, scale: 1.0 }; b.dim()]).unwrap())
        .collect();
    let spec = MeasureSpec::product(d, factors).unwrap();
    assert_eq!(spec.splits_wrt(&xi), SplitStatus::Splits);
    let defect = covariance_split_defect(&spec, &xi, 0, 0).unwrap();
    assert!(defect.exact && defect.passes);
}

#[test]
fn sample_moments_match_declared_moments() {
    let spec = MeasureSpec::independent(vec![
        Univariate::Exponential { rate: 2.0 },
        Univariate::Uniform { low: 0.0, high: 3.0 },
    ])
    .unwrap();
    let xs = spec.sample(200_000, 5).unwrap();
    let mean = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / xs.len() as f64;
    let oracle = v(&[0.5, 1.5]);
    // SE of each coordinate mean is below 0.004
    assert!((mean - oracle).amax() < 0.016);
}

#[test]
fn sampling_does_not_depend_on_thread_count() {
    let spec = MeasureSpec::Gaussian(rotated(0.4, [1.0, 3.0]));
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| spec.sample(5000, 77).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn split_test_flags_dependent_uncorrelated_directions() {
    let uniform = MeasureSpec::independent(vec![Univariate::Uniform { low: -1.0, high: 1.0 }; 2]).unwrap();
    let xs = uniform.sample(20_000, 3).unwrap();
    let config = SplitTestConfig::default();
    let along_axis = empirical_split_test(&xs, &span(&[&[1.0, 0.0]]), config, 1).unwrap();
    let diagonal = empirical_split_test(&xs, &span(&[&[1.0, 1.0]]), config, 1).unwrap();
    assert!(along_axis.passes);
    assert!(!diagonal.passes);
    let few = uniform.sample(10, 3).unwrap();
    assert!(matches!(
        empirical_split_test(&few, &span(&[&[1.0, 0.0]]), config, 1),
        Err(Error::TooFewSamples { .. })
    ));
}

#[test]
fn empirical_defect_uses_bootstrap_threshold() {
    let spec = MeasureSpec::Gaussian(rotated(std::f64::consts::FRAC_PI_6, [1.0, 4.0]));
    let xs = spec.sample(5000, 9).unwrap();
    let emp = MeasureSpec::empirical(xs).unwrap();
    let xi = SubspaceDistribution::dirac(span(&[&[1.0, 0.0]]));
    let defect = covariance_split_defect(&emp, &xi, 0, 2).unwrap();
    assert!(!defect.exact && !defect.passes);
    // exact cross term of the tilted covariance
    assert!((defect.cross_norm - 3.0 * 3f64.sqrt() / 4.0).abs() < 0.15);
}
