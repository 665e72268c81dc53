mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use splitkit_core::inequalities::{
    check_bl_split, check_dks, check_efron_stein, check_jensen_improvement, check_linearized_bl,
    check_madiman_barron, conditional_mean_variance, tail_ratio_diagnostic, variance_decomposition, Budget,
    Method, TestFunction, Verdict,
};
use splitkit_core::measures::{GaussianMeasure, MeasureSpec, Univariate};
use splitkit_core::subspace::{mean_projector, Subspace, SubspaceDistribution};
use splitkit_core::Error;

fn normals(k: usize) -> Vec<MeasureSpec> {
    vec![MeasureSpec::standard_gaussian(1); k]
}

fn uniforms(k: usize) -> Vec<MeasureSpec> {
    vec![MeasureSpec::independent(vec![Univariate::Uniform { low: 0.0, high: 1.0 }]).unwrap(); k]
}

fn budget() -> Budget {
    Budget { n_mc: 100_000, ..Budget::default() }
}

fn within(value: f64, oracle: f64, se: f64) -> bool {
    (value - oracle).abs() <= 4.0 * se + 1e-10
}

/// `Σ_i E[Var(max X | X^{(i)})]` for three U[0,1] coordinates by midpoint
/// quadrature over `x₁` and `M = max(x₂, x₃)`, with density `2M`.
fn efron_stein_max_oracle() -> f64 {
    let h = 1.0 / 2000.0;
    let mut term = 0.0;
    for j in 0..2000 {
        let m = (j as f64 + 0.5) * h;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..2000 {
            let x = (i as f64 + 0.5) * h;
            let f = x.max(m);
            s1 += f * h;
            s2 += f * f * h;
        }
        term += (s2 - s1 * s1) * 2.0 * m * h;
    }
    3.0 * term
}

#[test]
fn conditional_variance_examples() {
    let g = MeasureSpec::standard_gaussian(2);
    let e1 = span(&[&[1.0, 0.0]]);
    let product = TestFunction::Product { indices: None };
    let closed = conditional_mean_variance(&g, &e1, &product, &budget(), 1).unwrap();
    assert_eq!(closed.method, Method::ClosedFormGaussian);
    assert!(closed.value.abs() < 1e-12);
    let nested = Budget { method: Method::ResampleNested, ..budget() };
    let est = conditional_mean_variance(&g, &e1, &product, &nested, 1).unwrap();
    assert!(within(est.value, 0.0, est.se));
    let c = conditional_mean_variance(&g, &e1, &TestFunction::Constant { value: 3.0 }, &nested, 1).unwrap();
    assert!(c.value.abs() < 1e-12);
}

#[test]
fn variance_decomposition_is_consistent() {
    let cube = MeasureSpec::independent(vec![Univariate::Exponential { rate: 1.0 }; 3]).unwrap();
    let e = Subspace::coordinate(3, &[0, 2]).unwrap();
    let nested = Budget { method: Method::ResampleNested, ..budget() };
    let d = variance_decomposition(&cube, &e, &TestFunction::Max, &nested, 4).unwrap();
    let gap = d.total.value - d.between.value - d.within.value;
    let se = (d.total.se.powi(2) + d.between.se.powi(2) + d.within.se.powi(2)).sqrt();
    assert!(gap.abs() <= 4.0 * se, "gap {gap} se {se}");
}

#[test]
fn closed_form_and_nested_paths_agree() {
    let g = MeasureSpec::Gaussian(GaussianMeasure::new(v(&[0.5, -0.3]), DMatrix::identity(2, 2)).unwrap());
    let f = TestFunction::Quadratic { matrix: vec![vec![1.0, 0.4], vec![0.4, -0.5]], linear: Some(vec![0.3, 1.0]), constant: 0.0 };
    let e = span(&[&[1.0, 1.0]]);
    let closed = variance_decomposition(&g, &e, &f, &budget(), 2).unwrap();
    let nested = variance_decomposition(&g, &e, &f, &Budget { method: Method::ResampleNested, ..budget() }, 2).unwrap();
    assert!(within(nested.between.value, closed.between.value, nested.between.se));
    assert!(within(nested.within.value, closed.within.value, nested.within.se));
    assert!(within(nested.total.value, closed.total.value, nested.total.se));
}

#[test]
fn non_splitting_measure_is_a_precondition_error() {
    let tilted = MeasureSpec::Gaussian(
        GaussianMeasure::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0])).unwrap(),
    );
    let r = check_linearized_bl(&tilted, &bernstein(), &TestFunction::Sum, None, &budget(), 1);
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn linearized_sharpness_and_lambda_scaling() {
    let xi = bernstein();
    let frame = mean_projector(&xi).unwrap();
    let g = MeasureSpec::standard_gaussian(2);
    let f = TestFunction::linear(&frame.top_eigenvector);
    let [drop, es] = check_linearized_bl(&g, &xi, &f, None, &budget(), 1).unwrap();
    assert!(drop.slack.abs() < 1e-10 && drop.tight);
    assert!(es.verdict == Verdict::Holds);
    let [_, half] = check_linearized_bl(&g, &xi, &f, Some(frame.lambda / 2.0), &budget(), 1).unwrap();
    assert!((half.rhs.value - 2.0 * es.rhs.value).abs() < 1e-10 * es.rhs.value);
    let [_, degenerate] = check_linearized_bl(&g, &xi, &f, Some(0.0), &budget(), 1).unwrap();
    assert_eq!(degenerate.verdict, Verdict::Inconclusive);
}

#[test]
fn squared_norm_has_positive_slack() {
    let xi = bernstein();
    let [drop, es] = check_linearized_bl(&MeasureSpec::standard_gaussian(2), &xi, &TestFunction::SquaredNorm, None, &budget(), 1).unwrap();
    // Var ‖X‖² = 4 and Var ‖P_E X‖² = 2 on each line
    assert!((drop.lhs.value - 2.0).abs() < 1e-12);
    assert!((drop.rhs.value - 4.0 * (1.0 - mean_projector(&xi).unwrap().lambda)).abs() < 1e-12);
    assert!(drop.slack > 0.0 && !drop.tight);
    assert_eq!(es.verdict, Verdict::Holds);
}

#[test]
fn bl_split_quadratic_form() {
    let xi = bernstein();
    let frame = mean_projector(&xi).unwrap();
    let mu = MeasureSpec::standard_gaussian(2);
    let theta = v(&[1.2, -0.7]);
    let r = check_bl_split(&mu, &xi, &GaussianMeasure::isotropic(theta.clone()), None).unwrap();
    let oracle: f64 = xi.atoms().unwrap().iter().map(|a| 0.5 * a.weight * a.subspace.project(&theta).norm_squared()).sum();
    assert!((r.lhs.value - oracle).abs() < 1e-12);
    assert!((r.rhs.value - (1.0 - frame.lambda) * theta.norm_squared() / 2.0).abs() < 1e-12);
    let top = &frame.top_eigenvector * 3.0;
    let eq = check_bl_split(&mu, &xi, &GaussianMeasure::isotropic(top), None).unwrap();
    assert!(eq.slack.abs() < 1e-10 && eq.tight);
    let same = check_bl_split(&mu, &xi, &GaussianMeasure::standard(2), None).unwrap();
    assert!(same.lhs.value.abs() < 1e-12 && same.tight);
    let shearer = SubspaceDistribution::dirac(span(&[&[1.0, 0.0]]));
    let s = check_bl_split(&mu, &shearer, &GaussianMeasure::isotropic(theta.clone()), None).unwrap();
    assert!((s.lhs.value - 0.72).abs() < 1e-12 && (s.rhs.value - theta.norm_squared() / 2.0).abs() < 1e-12);
}

#[test]
fn efron_stein_oracles() {
    let sum = check_efron_stein(&normals(4), &TestFunction::Sum, &budget(), 1).unwrap();
    assert!(sum.tight && within(sum.rhs.value, 4.0, sum.rhs.se));
    let first = check_efron_stein(&normals(3), &TestFunction::linear(&v(&[1.0, 0.0, 0.0])), &budget(), 2).unwrap();
    assert!(first.tight && within(first.lhs.value, 1.0, first.lhs.se));
    let max = check_efron_stein(&uniforms(3), &TestFunction::Max, &budget(), 3).unwrap();
    assert!(within(max.lhs.value, 3.0 / 80.0, max.lhs.se));
    let oracle = efron_stein_max_oracle();
    assert!((oracle - 0.05).abs() < 1e-5);
    assert!(within(max.rhs.value, oracle, max.rhs.se));
    assert!(max.verdict == Verdict::Holds && !max.tight && max.slack > 0.0);
}

#[test]
fn dks_oracles() {
    let base = MeasureSpec::standard_gaussian(1);
    let b = Budget { n_outer: 4000, n_inner: 400, n_mc: 200_000, ..Budget::default() };
    let sq = TestFunction::Quadratic { matrix: vec![vec![1.0]], linear: None, constant: 0.0 };
    let r = check_dks(&base, &sq, 4, 2, &b, 1).unwrap();
    // Var(S₂² + 2) = 8 and (2/4)·Var(S₄²) = 16
    assert!(within(r.lhs.value, 8.0, r.lhs.se) && within(r.rhs.value, 16.0, r.rhs.se));
    assert_eq!(r.verdict, Verdict::Holds);
    let exp = MeasureSpec::independent(vec![Univariate::Exponential { rate: 0.5 }]).unwrap();
    let id = check_dks(&exp, &TestFunction::Sum, 5, 2, &b, 2).unwrap();
    assert!(id.tight && id.verdict == Verdict::Holds);
    let full = check_dks(&exp, &sq, 3, 3, &b, 3).unwrap();
    assert!((full.lhs.value - full.rhs.value).abs() < 1e-12);
}

#[test]
fn madiman_barron_oracles() {
    let pairs = vec![vec![0, 1], vec![1, 2], vec![0, 2]];
    let psi = vec![TestFunction::Product { indices: None }; 3];
    let r = check_madiman_barron(&normals(3), &pairs, 2, &psi, &budget(), 1).unwrap();
    assert!(within(r.lhs.value, 3.0, r.lhs.se) && within(r.rhs.value, 6.0, r.rhs.se));
    let disjoint = vec![vec![0], vec![1, 2]];
    let lin = vec![TestFunction::Sum, TestFunction::linear(&v(&[2.0, -1.0]))];
    let d = check_madiman_barron(&uniforms(3), &disjoint, 1, &lin, &budget(), 2).unwrap();
    assert!(d.tight && d.verdict == Verdict::Holds);
    let consts = vec![TestFunction::Constant { value: 1.0 }; 3];
    let c = check_madiman_barron(&normals(3), &pairs, 2, &consts, &budget(), 3).unwrap();
    assert!(c.lhs.value.abs() < 1e-12 && c.tight);
    assert!(matches!(
        check_madiman_barron(&normals(3), &pairs, 1, &psi, &budget(), 1),
        Err(Error::InvalidInput(_))
    ));
    let sparse = check_madiman_barron(&normals(3), &[vec![0]], 1, &[TestFunction::Sum], &budget(), 1).unwrap();
    assert_eq!(sparse.metadata["uncovered"], serde_json::json!([1, 2]));
}

#[test]
fn jensen_improvement_closed_form() {
    let xi = bernstein();
    let lambda = mean_projector(&xi).unwrap().lambda;
    let u = [v(&[1.5, 0.0]), v(&[-0.5, -0.5])];
    let psi: Vec<TestFunction> = u.iter().map(TestFunction::linear).collect();
    let r = check_jensen_improvement(&MeasureSpec::standard_gaussian(2), &xi, &psi, None, &budget(), 1).unwrap();
    let avg = (&u[0] + &u[1]) * 0.5;
    assert!((r.lhs.value - avg.norm_squared()).abs() < 1e-12);
    let rhs = (1.0 - lambda) * 0.5 * (u[0].norm_squared() + u[1].norm_squared());
    assert!((r.rhs.value - rhs).abs() < 1e-12);
    let mc = check_jensen_improvement(
        &MeasureSpec::standard_gaussian(2),
        &xi,
        &psi,
        None,
        &Budget { method: Method::ResampleNested, ..budget() },
        1,
    )
    .unwrap();
    assert!(within(mc.lhs.value, r.lhs.value, mc.lhs.se) && within(mc.rhs.value, r.rhs.value, mc.rhs.se));
    let single = SubspaceDistribution::dirac(span(&[&[1.0, 1.0]]));
    let s = check_jensen_improvement(&MeasureSpec::standard_gaussian(2), &single, &[TestFunction::SquaredNorm], None, &budget(), 1).unwrap();
    assert!(s.tight && s.slack.abs() < 1e-10);
}

#[test]
fn tail_diagnostic_examples() {
    let grid: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    let gauss = MeasureSpec::standard_gaussian(2).sample(200_000, 1).unwrap();
    let g = tail_ratio_diagnostic(&gauss, 0.5, 0.9, &grid).unwrap();
    assert_eq!(g.verdict, Verdict::Holds);
    assert!(g.t0.unwrap() <= 2.0);
    // chi-square with two degrees of freedom: ratio e^{−t/4}
    for p in g.points.iter().filter(|p| p.sufficient) {
        assert!(p.lower <= (-p.t / 4.0).exp() && (-p.t / 4.0).exp() <= p.upper, "t = {}", p.t);
    }
    let cauchy = MeasureSpec::independent(vec![Univariate::Cauchy { location: 0.0, scale: 1.0 }; 2])
        .unwrap()
        .sample(200_000, 2)
        .unwrap();
    let grid: Vec<f64> = (0..12).map(|i| 10f64.powf(i as f64 / 2.0)).collect();
    let c = tail_ratio_diagnostic(&cauchy, 0.5, 0.4, &grid).unwrap();
    assert_eq!(c.verdict, Verdict::Violated);
    let few = MeasureSpec::standard_gaussian(2).sample(100, 1).unwrap();
    assert!(matches!(tail_ratio_diagnostic(&few, 0.5, 0.9, &grid), Err(Error::TooFewSamples { .. })));
}

#[test]
fn tail_diagnostic_on_gaussian_mixture_of_products() {
    // p·(N(0,1) ⊗ N(0,1)) + (1 − p)·(N(0,1) ⊗ N(0,1)) collapses to γ
    let xi = SubspaceDistribution::uniform(vec![span(&[&[1.0, 0.0]]), span(&[&[0.0, 1.0]])]).unwrap();
    let mix = MeasureSpec::mixture(xi, MeasureSpec::standard_gaussian(2)).unwrap();
    let xs = mix.sample(100_000, 3).unwrap();
    let grid: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    assert_eq!(tail_ratio_diagnostic(&xs, 0.5, 0.9, &grid).unwrap().verdict, Verdict::Holds);
}
