//! Numerical checks of the entropy and variance inequalities driven by a
//! subspace distribution, each producing a [`SlackReport`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{check_dim, Error, Result};
use crate::measures::{gaussian_kl, marginal_gaussian, GaussianMeasure, MeasureSpec, SplitStatus};
use crate::rng::{derive_seed, substream, Rng};
use crate::stats::{
    mean_estimate, nested_variance, normal_upper_quantile, variance_estimate, wilson_interval, Estimate, Moments,
};
use crate::subspace::{mean_projector, Subspace, SubspaceDistribution};

/// Default verdict margin in standard errors.
pub const DEFAULT_Z: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    Inconclusive,
}

/// Outcome of checking `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub name: String,
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// `rhs − lhs`.
    pub slack: f64,
    pub verdict: Verdict,
    /// Slack indistinguishable from zero: within `1e-10` on exact paths,
    /// within four combined standard errors otherwise.
    pub tight: bool,
    pub metadata: Value,
}

impl SlackReport {
    pub fn new(name: impl Into<String>, lhs: Estimate, rhs: Estimate, z: f64, metadata: Value) -> Self {
        let se = lhs.se.hypot(rhs.se);
        let exact_tol = 1e-10 * rhs.value.abs().max(1.0);
        let (slack, verdict) = if lhs.value.is_nan() || rhs.value.is_nan() {
            (f64::NAN, Verdict::Inconclusive)
        } else if rhs.value == f64::INFINITY {
            (f64::INFINITY, Verdict::Holds)
        } else {
            let slack = rhs.value - lhs.value;
            let verdict = if lhs.value <= rhs.value + z * se + exact_tol { Verdict::Holds } else { Verdict::Violated };
            (slack, verdict)
        };
        let tight = slack.is_finite() && slack.abs() <= (4.0 * se).max(exact_tol);
        Self { name: name.into(), lhs, rhs, slack, verdict, tight, metadata }
    }

    fn inapplicable(name: impl Into<String>, lhs: Estimate, reason: &str, mut metadata: Value) -> Self {
        metadata["inapplicable"] = json!(reason);
        Self {
            name: name.into(),
            lhs,
            rhs: Estimate::exact(f64::NAN),
            slack: f64::NAN,
            verdict: Verdict::Inconclusive,
            tight: false,
            metadata,
        }
    }
}

/// Margin for `checks` simultaneous one-sided comparisons at overall `level`,
/// never below [`DEFAULT_Z`].
pub fn bonferroni_z(level: f64, checks: usize) -> f64 {
    normal_upper_quantile(level / checks.max(1) as f64).max(DEFAULT_Z)
}

/// How conditional variances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Closed form when available, nested resampling otherwise.
    #[default]
    Auto,
    ClosedFormGaussian,
    ResampleNested,
    /// Sorting on a one-dimensional `P_E X`; smoothing bias is not corrected.
    Binned,
}

/// Monte Carlo budgets for the checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub n_outer: usize,
    pub n_inner: usize,
    /// Plain Monte Carlo sample size for unconditional variances.
    pub n_mc: usize,
    pub z: f64,
    pub method: Method,
}

impl Default for Budget {
    fn default() -> Self {
        Self { n_outer: 2000, n_inner: 500, n_mc: 100_000, z: DEFAULT_Z, method: Method::Auto }
    }
}

#[derive(Clone)]
pub struct CustomFunction {
    pub name: String,
    f: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
}

impl CustomFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

impl fmt::Debug for CustomFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomFunction({})", self.name)
    }
}

/// Real functions on ℝⁿ used as test functions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    /// `u·x`.
    Linear { coefficients: Vec<f64> },
    /// `xᵀAx + h·x + c`.
    Quadratic {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        linear: Option<Vec<f64>>,
        #[serde(default)]
        constant: f64,
    },
    SquaredNorm,
    Sum,
    Max,
    /// Product of the listed coordinates, or of all of them.
    Product {
        #[serde(default)]
        indices: Option<Vec<usize>>,
    },
    /// `cos(u·x)`.
    Cos { frequency: Vec<f64> },
    #[serde(skip)]
    Custom(CustomFunction),
}

impl TestFunction {
    pub fn linear(u: &DVector<f64>) -> Self {
        TestFunction::Linear { coefficients: u.iter().copied().collect() }
    }

    pub fn custom(name: impl Into<String>, f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        TestFunction::Custom(CustomFunction::new(name, f))
    }

    /// Checks that the function is defined on ℝⁿ.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            TestFunction::Linear { coefficients } => check_dim(n, coefficients.len()),
            TestFunction::Cos { frequency } => check_dim(n, frequency.len()),
            TestFunction::Quadratic { matrix, linear, .. } => {
                check_dim(n, matrix.len())?;
                for row in matrix {
                    check_dim(n, row.len())?;
                }
                if let Some(h) = linear {
                    check_dim(n, h.len())?;
                }
                Ok(())
            }
            TestFunction::Product { indices: Some(idx) } => match idx.iter().find(|&&i| i >= n) {
                Some(&i) => Err(Error::InvalidInput(format!("coordinate index {i} out of range for dimension {n}"))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Linear { coefficients } => coefficients.iter().zip(x.iter()).map(|(a, b)| a * b).sum(),
            TestFunction::Quadratic { matrix, linear, constant } => {
                let mut total = *constant;
                for (i, row) in matrix.iter().enumerate() {
                    for (j, a) in row.iter().enumerate() {
                        total += a * x[i] * x[j];
                    }
                }
                if let Some(h) = linear {
                    total += h.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
                total
            }
            TestFunction::SquaredNorm => x.norm_squared(),
            TestFunction::Sum => x.sum(),
            TestFunction::Max => x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            TestFunction::Product { indices: None } => x.product(),
            TestFunction::Product { indices: Some(idx) } => idx.iter().map(|&i| x[i]).product(),
            TestFunction::Cos { frequency } => frequency.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>().cos(),
            TestFunction::Custom(c) => (c.f)(x),
        }
    }

    /// `(A, h, c)` with `A` symmetric when the function is a polynomial of
    /// degree at most two.
    pub fn as_quadratic(&self, n: usize) -> Option<Quadratic> {
        let zero = || Quadratic { a: DMatrix::zeros(n, n), h: DVector::zeros(n), c: 0.0 };
        match self {
            TestFunction::Constant { value } => Some(Quadratic { c: *value, ..zero() }),
            TestFunction::Linear { coefficients } if coefficients.len() == n => {
                Some(Quadratic { h: DVector::from_column_slice(coefficients), ..zero() })
            }
            TestFunction::Quadratic { matrix, linear, constant } => {
                let a = DMatrix::from_fn(n, n, |i, j| 0.5 * (matrix[i][j] + matrix[j][i]));
                let h = linear.as_ref().map_or_else(|| DVector::zeros(n), |h| DVector::from_column_slice(h));
                Some(Quadratic { a, h, c: *constant })
            }
            TestFunction::SquaredNorm => Some(Quadratic { a: DMatrix::identity(n, n), ..zero() }),
            TestFunction::Sum => Some(Quadratic { h: DVector::from_element(n, 1.0), ..zero() }),
            TestFunction::Product { indices } => {
                let idx: Vec<usize> = indices.clone().unwrap_or_else(|| (0..n).collect());
                let mut q = zero();
                match idx.as_slice() {
                    [] => q.c = 1.0,
                    [i] => q.h[*i] = 1.0,
                    [i, j] if i == j => q.a[(*i, *i)] = 1.0,
                    [i, j] => {
                        q.a[(*i, *j)] = 0.5;
                        q.a[(*j, *i)] = 0.5;
                    }
                    _ => return None,
                }
                Some(q)
            }
            _ => None,
        }
    }
}

/// `xᵀAx + h·x + c` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c: f64,
}

impl Quadratic {
    /// `Var f(X)` for `X ~ N(m, S)`: `2 tr(ASAS) + (2Am + h)ᵀ S (2Am + h)`.
    pub fn gaussian_variance(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let asm = &self.a * cov;
        let b = &self.a * mean * 2.0 + &self.h;
        2.0 * (&asm * &asm).trace() + (b.transpose() * cov * &b)[(0, 0)]
    }

    /// `x ↦ f(Mx)`.
    pub fn compose(&self, m: &DMatrix<f64>) -> Quadratic {
        let a = m.transpose() * &self.a * m;
        Quadratic { a: (&a + a.transpose()) * 0.5, h: m.transpose() * &self.h, c: self.c }
    }
}

/// An estimate of `Var(E[f(X)|P_E X])` or `E[Var(f(X)|P_E X)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVarianceEstimate {
    pub value: f64,
    pub se: f64,
    pub method: Method,
}

impl ConditionalVarianceEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.se)
    }
}

/// `Var f = Var E[f|P_E X] + E Var(f|P_E X)`, each part estimated separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub total: ConditionalVarianceEstimate,
    pub between: ConditionalVarianceEstimate,
    pub within: ConditionalVarianceEstimate,
}

fn require_split(spec: &MeasureSpec, e: &Subspace) -> Result<()> {
    if spec.split_status(e) == SplitStatus::DoesNotSplit {
        return Err(Error::Precondition(
            "the measure does not split along the conditioning subspace".into(),
        ));
    }
    Ok(())
}

fn require_split_xi(spec: &MeasureSpec, xi: &SubspaceDistribution) -> Result<()> {
    for a in xi.atoms()? {
        require_split(spec, &a.subspace)?;
    }
    Ok(())
}

fn sample_values(spec: &MeasureSpec, f: &TestFunction, count: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(spec.sample(count, seed)?.par_iter().map(|x| f.eval(x)).collect())
}

fn closed_form_parts(spec: &MeasureSpec, e: &Subspace, f: &TestFunction) -> Option<(f64, f64)> {
    let g = spec.as_gaussian()?;
    let q = f.as_quadratic(g.dim())?;
    let p = e.projector();
    let total = q.gaussian_variance(g.mean(), g.cov());
    // E[f | P X] is the same quadratic form in P X when P X ⟂ P^⊥ X
    let between = {
        let s_y = &p * g.cov() * &p;
        let asy = &q.a * &s_y;
        let b = &q.a * g.mean() * 2.0 + &q.h;
        2.0 * (&asy * &asy).trace() + (b.transpose() * &s_y * &b)[(0, 0)]
    };
    Some((total, between))
}

/// Total, between and within variances of `f(X)` relative to `P_E X`.
pub fn variance_decomposition(
    spec: &MeasureSpec,
    e: &Subspace,
    f: &TestFunction,
    budget: &Budget,
    seed: u64,
) -> Result<VarianceDecomposition> {
    let n = spec.ambient_dim();
    check_dim(n, e.ambient_dim())?;
    f.validate(n)?;
    require_split(spec, e)?;
    let closed = match budget.method {
        Method::Auto | Method::ClosedFormGaussian => closed_form_parts(spec, e, f),
        _ => None,
    };
    if let Some((total, between)) = closed {
        let exact = |value: f64| ConditionalVarianceEstimate { value, se: 0.0, method: Method::ClosedFormGaussian };
        return Ok(VarianceDecomposition {
            total: exact(total),
            between: exact(between),
            within: exact(total - between),
        });
    }
    if budget.method == Method::ClosedFormGaussian {
        return Err(Error::Unsupported(
            "closed form needs a Gaussian measure and a polynomial test function of degree at most two".into(),
        ));
    }
    let total = variance_estimate(&sample_values(spec, f, budget.n_mc, derive_seed(seed, "cv-total", 0))?);
    let (between, within, method) = if budget.method == Method::Binned {
        let (b, w) = binned_parts(spec, e, f, budget.n_mc, seed)?;
        (b, w, Method::Binned)
    } else {
        let (b, w) = nested_parts(spec, e, f, budget, seed)?;
        (b, w, Method::ResampleNested)
    };
    let wrap = |est: Estimate, method| ConditionalVarianceEstimate { value: est.value, se: est.se, method };
    Ok(VarianceDecomposition {
        total: wrap(total, method),
        between: wrap(between, method),
        within: wrap(within, method),
    })
}

/// `Var(E[f(X)|P_E X])`.
pub fn conditional_mean_variance(
    spec: &MeasureSpec,
    e: &Subspace,
    f: &TestFunction,
    budget: &Budget,
    seed: u64,
) -> Result<ConditionalVarianceEstimate> {
    Ok(variance_decomposition(spec, e, f, budget, seed)?.between)
}

fn nested_parts(
    spec: &MeasureSpec,
    e: &Subspace,
    f: &TestFunction,
    budget: &Budget,
    seed: u64,
) -> Result<(Estimate, Estimate)> {
    if budget.n_outer < 2 || budget.n_inner < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: budget.n_outer.min(budget.n_inner) });
    }
    let outer = spec.sample(budget.n_outer, derive_seed(seed, "cv-outer", 0))?;
    let inner: Vec<(f64, f64)> = outer
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = substream(seed, "cv-inner", i as u64);
            let y = e.project(x);
            let m: Moments = (0..budget.n_inner)
                .map(|_| {
                    let fresh = spec.draw(&mut rng);
                    f.eval(&(&y + (&fresh - e.project(&fresh))))
                })
                .collect();
            (m.mean, m.variance())
        })
        .collect();
    let within: Vec<f64> = inner.iter().map(|p| p.1).collect();
    Ok((nested_variance(&inner, budget.n_inner), mean_estimate(&within)))
}

fn binned_parts(
    spec: &MeasureSpec,
    e: &Subspace,
    f: &TestFunction,
    count: usize,
    seed: u64,
) -> Result<(Estimate, Estimate)> {
    if e.dim() != 1 {
        return Err(Error::Unsupported("binned conditioning needs a one-dimensional subspace".into()));
    }
    let mut pairs: Vec<(f64, f64)> = spec
        .sample(count, derive_seed(seed, "cv-binned", 0))?
        .iter()
        .map(|x| (e.coordinates(x)[0], f.eval(x)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let width = ((count as f64).sqrt() as usize).max(2);
    let inner: Vec<(f64, f64)> = pairs
        .chunks_exact(width)
        .map(|c| {
            let m: Moments = c.iter().map(|p| p.1).collect();
            (m.mean, m.variance())
        })
        .collect();
    if inner.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2 * width, got: count });
    }
    let within: Vec<f64> = inner.iter().map(|p| p.1).collect();
    Ok((nested_variance(&inner, width), mean_estimate(&within)))
}

fn lambda_or_default(xi: &SubspaceDistribution, lambda: Option<f64>) -> Result<f64> {
    match lambda {
        Some(l) if (0.0..=1.0).contains(&l) => Ok(l),
        Some(l) => Err(Error::InvalidInput(format!("lambda must lie in [0, 1], got {l}"))),
        None => Ok(mean_projector(xi)?.lambda),
    }
}

fn weighted_sum(parts: &[(f64, Estimate)]) -> Estimate {
    let value = parts.iter().map(|(w, e)| w * e.value).sum();
    let se = parts.iter().map(|(w, e)| (w * e.se).powi(2)).sum::<f64>().sqrt();
    Estimate::new(value, se)
}

/// Both linearized forms: `∫ Var(E[f|P_E X]) dξ ≤ (1−λ) Var f` and
/// `Var f ≤ λ⁻¹ ∫ E[Var(f|P_E X)] dξ`.
pub fn check_linearized_bl(
    spec: &MeasureSpec,
    xi: &SubspaceDistribution,
    f: &TestFunction,
    lambda: Option<f64>,
    budget: &Budget,
    seed: u64,
) -> Result<[SlackReport; 2]> {
    check_dim(xi.ambient_dim(), spec.ambient_dim())?;
    require_split_xi(spec, xi)?;
    let lambda = lambda_or_default(xi, lambda)?;
    let atoms = xi.atoms()?;
    let parts = atoms
        .iter()
        .enumerate()
        .map(|(i, a)| variance_decomposition(spec, &a.subspace, f, budget, derive_seed(seed, "linearized", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let total = if parts.iter().all(|p| p.total.se == 0.0) {
        parts[0].total.estimate()
    } else {
        variance_estimate(&sample_values(spec, f, budget.n_mc, derive_seed(seed, "linearized-total", 0))?)
    };
    let between = weighted_sum(&atoms.iter().zip(&parts).map(|(a, p)| (a.weight, p.between.estimate())).collect::<Vec<_>>());
    let within = weighted_sum(&atoms.iter().zip(&parts).map(|(a, p)| (a.weight, p.within.estimate())).collect::<Vec<_>>());
    let method = parts.first().map_or(Method::ClosedFormGaussian, |p| p.between.method);
    let meta = json!({ "lambda": lambda, "method": method, "atoms": atoms.len() });
    let drop = SlackReport::new("linearized_bl", between, total.scale(1.0 - lambda), budget.z, meta.clone());
    let es = if lambda > 0.0 {
        SlackReport::new("linearized_bl_efron_stein", total, within.scale(1.0 / lambda), budget.z, meta)
    } else {
        SlackReport::inapplicable("linearized_bl_efron_stein", total, "lambda = 0", meta)
    };
    Ok([drop, es])
}

/// `∫ D(ν_E‖μ_E) dξ(E) ≤ (1−λ) D(ν‖μ)` in closed form for Gaussian `μ, ν`.
pub fn check_bl_split(
    mu: &MeasureSpec,
    xi: &SubspaceDistribution,
    nu: &GaussianMeasure,
    lambda: Option<f64>,
) -> Result<SlackReport> {
    check_dim(xi.ambient_dim(), mu.ambient_dim())?;
    check_dim(mu.ambient_dim(), nu.dim())?;
    let g = mu.as_gaussian().ok_or_else(|| Error::Unsupported("closed-form entropy check needs a Gaussian μ".into()))?;
    require_split_xi(mu, xi)?;
    let lambda = lambda_or_default(xi, lambda)?;
    let mut lhs = 0.0;
    for a in xi.atoms()? {
        if a.subspace.is_zero() {
            continue;
        }
        let kl = gaussian_kl(&marginal_gaussian(nu, &a.subspace)?, &marginal_gaussian(&g, &a.subspace)?)?;
        lhs += a.weight * kl;
    }
    let full = gaussian_kl(nu, &g)?;
    let meta = json!({ "lambda": lambda, "rhs_infinite": full.is_infinite(), "method": Method::ClosedFormGaussian });
    Ok(SlackReport::new("bl_split", Estimate::exact(lhs), Estimate::exact((1.0 - lambda) * full), DEFAULT_Z, meta))
}

fn check_components(components: &[MeasureSpec]) -> Result<()> {
    if components.is_empty() {
        return Err(Error::InvalidInput("at least one component is required".into()));
    }
    for c in components {
        check_dim(1, c.ambient_dim())?;
    }
    Ok(())
}

fn draw_components(components: &[MeasureSpec], rng: &mut Rng) -> DVector<f64> {
    DVector::from_iterator(components.len(), components.iter().map(|c| c.draw(rng)[0]))
}

/// Runs `work(rng)` for `count` indices over fixed chunks of substreams.
fn chunked<T: Send>(count: usize, seed: u64, tag: &str, work: impl Fn(&mut Rng) -> T + Sync) -> Vec<T> {
    const CHUNK: usize = 1024;
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, tag, c as u64);
            (0..CHUNK.min(count - c * CHUNK)).map(|_| work(&mut rng)).collect()
        })
        .collect();
    parts.into_iter().flatten().collect()
}

/// `Var f(X) ≤ Σ_i E[Var(f(X)|X^{(i)})]` for independent coordinates.
/// Each conditional variance uses `½E[(f(X) − f(X^{i}))²]`, with `X^{i}`
/// equal to `X` except for a fresh `i`-th coordinate.
pub fn check_efron_stein(
    components: &[MeasureSpec],
    f: &TestFunction,
    budget: &Budget,
    seed: u64,
) -> Result<SlackReport> {
    check_components(components)?;
    let k = components.len();
    f.validate(k)?;
    if budget.n_mc < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: budget.n_mc });
    }
    let rows: Vec<(f64, Vec<f64>)> = chunked(budget.n_mc, seed, "efron-stein", |rng| {
        let x = draw_components(components, rng);
        let fx = f.eval(&x);
        let diffs = (0..k)
            .map(|i| {
                let mut y = x.clone();
                y[i] = components[i].draw(rng)[0];
                0.5 * (fx - f.eval(&y)).powi(2)
            })
            .collect();
        (fx, diffs)
    });
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let sums: Vec<f64> = rows.iter().map(|r| r.1.iter().sum()).collect();
    let lhs = variance_estimate(&values);
    let rhs = mean_estimate(&sums);
    Ok(SlackReport::new("efron_stein", lhs, rhs, budget.z, json!({ "components": k, "n_mc": budget.n_mc })))
}

/// `Var(E[g(S_n)|S_m]) ≤ (m/n) Var g(S_n)` for partial sums of i.i.d. draws.
pub fn check_dks(
    base: &MeasureSpec,
    g: &TestFunction,
    n: usize,
    m: usize,
    budget: &Budget,
    seed: u64,
) -> Result<SlackReport> {
    check_dim(1, base.ambient_dim())?;
    g.validate(1)?;
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!("need n ≥ m ≥ 1, got n = {n}, m = {m}")));
    }
    if budget.n_outer < 2 || budget.n_inner < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: budget.n_outer.min(budget.n_inner) });
    }
    let eval = |s: f64| g.eval(&DVector::from_element(1, s));
    let sum = |count: usize, rng: &mut Rng| (0..count).map(|_| base.draw(rng)[0]).sum::<f64>();
    let inner: Vec<(f64, f64)> = (0..budget.n_outer)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, "dks-outer", i as u64);
            let s_m = sum(m, &mut rng);
            if m == n {
                return (eval(s_m), 0.0);
            }
            let mm: Moments = (0..budget.n_inner).map(|_| eval(s_m + sum(n - m, &mut rng))).collect();
            (mm.mean, mm.variance())
        })
        .collect();
    let lhs = nested_variance(&inner, budget.n_inner);
    let total = if m == n {
        let values: Vec<f64> = inner.iter().map(|p| p.0).collect();
        variance_estimate(&values)
    } else {
        variance_estimate(&chunked(budget.n_mc, seed, "dks-total", |rng| eval(sum(n, rng))))
    };
    let rhs = total.scale(m as f64 / n as f64);
    Ok(SlackReport::new("dks", lhs, rhs, budget.z, json!({ "n": n, "m": m })))
}

/// `Var(Σ ψ_i(X_{S_i})) ≤ r Σ Var ψ_i(X_{S_i})` for a cover in which every
/// index lies in at most `r` members.
pub fn check_madiman_barron(
    components: &[MeasureSpec],
    cover: &[Vec<usize>],
    r: usize,
    psi: &[TestFunction],
    budget: &Budget,
    seed: u64,
) -> Result<SlackReport> {
    check_components(components)?;
    let k = components.len();
    if cover.len() != psi.len() {
        return Err(Error::InvalidInput(format!("{} cover members but {} functions", cover.len(), psi.len())));
    }
    let mut multiplicity = vec![0usize; k];
    for member in cover {
        for &i in member {
            if i >= k {
                return Err(Error::InvalidInput(format!("cover index {i} out of range for {k} components")));
            }
            multiplicity[i] += 1;
        }
    }
    if let Some(i) = multiplicity.iter().position(|&c| c > r) {
        return Err(Error::InvalidInput(format!(
            "not an {r}-cover: index {i} lies in {} members",
            multiplicity[i]
        )));
    }
    for (member, f) in cover.iter().zip(psi) {
        f.validate(member.len())?;
    }
    if budget.n_mc < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: budget.n_mc });
    }
    let uncovered: Vec<usize> = (0..k).filter(|&i| multiplicity[i] == 0).collect();
    let rows: Vec<Vec<f64>> = chunked(budget.n_mc, seed, "madiman-barron", |rng| {
        let x = draw_components(components, rng);
        cover
            .iter()
            .zip(psi)
            .map(|(member, f)| f.eval(&DVector::from_iterator(member.len(), member.iter().map(|&i| x[i]))))
            .collect()
    });
    let totals: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let lhs = variance_estimate(&totals);
    let parts: Vec<(f64, Estimate)> = (0..cover.len())
        .map(|j| (r as f64, variance_estimate(&rows.iter().map(|row| row[j]).collect::<Vec<_>>())))
        .collect();
    let rhs = weighted_sum(&parts);
    let meta = json!({ "r": r, "members": cover.len(), "uncovered": uncovered });
    Ok(SlackReport::new("madiman_barron", lhs, rhs, budget.z, meta))
}

/// `Var(∫ ψ_E(P_E X) dξ) ≤ (1−λ) ∫ Var ψ_E(P_E X) dξ`, one function per atom.
pub fn check_jensen_improvement(
    spec: &MeasureSpec,
    xi: &SubspaceDistribution,
    psi: &[TestFunction],
    lambda: Option<f64>,
    budget: &Budget,
    seed: u64,
) -> Result<SlackReport> {
    let n = spec.ambient_dim();
    check_dim(xi.ambient_dim(), n)?;
    let atoms = xi.atoms()?;
    if atoms.len() != psi.len() {
        return Err(Error::InvalidInput(format!("{} atoms but {} functions", atoms.len(), psi.len())));
    }
    for f in psi {
        f.validate(n)?;
    }
    require_split_xi(spec, xi)?;
    let lambda = lambda_or_default(xi, lambda)?;
    let projectors: Vec<DMatrix<f64>> = atoms.iter().map(|a| a.subspace.projector()).collect();

    let closed = if matches!(budget.method, Method::Auto | Method::ClosedFormGaussian) {
        spec.as_gaussian().and_then(|g| {
            let quads: Option<Vec<Quadratic>> =
                psi.iter().zip(&projectors).map(|(f, p)| f.as_quadratic(n).map(|q| q.compose(p))).collect();
            let quads = quads?;
            let mut avg = Quadratic { a: DMatrix::zeros(n, n), h: DVector::zeros(n), c: 0.0 };
            let mut rhs = 0.0;
            for (q, a) in quads.iter().zip(atoms) {
                avg.a += &q.a * a.weight;
                avg.h += &q.h * a.weight;
                rhs += a.weight * q.gaussian_variance(g.mean(), g.cov());
            }
            Some((avg.gaussian_variance(g.mean(), g.cov()), rhs))
        })
    } else {
        None
    };
    if let Some((lhs, rhs)) = closed {
        let meta = json!({ "lambda": lambda, "method": Method::ClosedFormGaussian });
        return Ok(SlackReport::new(
            "jensen_improvement",
            Estimate::exact(lhs),
            Estimate::exact((1.0 - lambda) * rhs),
            budget.z,
            meta,
        ));
    }
    if budget.method == Method::ClosedFormGaussian {
        return Err(Error::Unsupported("closed form needs a Gaussian measure and quadratic functions".into()));
    }
    let samples = spec.sample(budget.n_mc, derive_seed(seed, "jensen", 0))?;
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|x| psi.iter().zip(&projectors).map(|(f, p)| f.eval(&(p * x))).collect())
        .collect();
    let averaged: Vec<f64> =
        rows.iter().map(|r| r.iter().zip(atoms).map(|(v, a)| a.weight * v).sum()).collect();
    let lhs = variance_estimate(&averaged);
    let parts: Vec<(f64, Estimate)> = atoms
        .iter()
        .enumerate()
        .map(|(j, a)| (a.weight, variance_estimate(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())))
        .collect();
    let meta = json!({ "lambda": lambda, "method": Method::ResampleNested });
    Ok(SlackReport::new("jensen_improvement", lhs, weighted_sum(&parts).scale(1.0 - lambda), budget.z, meta))
}

/// One grid point of [`tail_ratio_diagnostic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub t: f64,
    /// `#{‖x‖² > t}`.
    pub above_t: usize,
    /// `#{‖x‖² > ct}`.
    pub above_ct: usize,
    pub ratio: f64,
    pub lower: f64,
    pub upper: f64,
    /// At least [`TAIL_MIN_COUNT`] samples beyond `ct`.
    pub sufficient: bool,
    /// The Wilson interval does not lie entirely above `C`.
    pub holds: bool,
}

/// Empirical check of `μ(‖x‖² > t) ≤ C μ(‖x‖² > ct)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub c: f64,
    pub cap: f64,
    pub points: Vec<TailPoint>,
    /// Smallest grid point from which every sufficiently populated point holds.
    pub t0: Option<f64>,
    pub verdict: Verdict,
}

pub const TAIL_MIN_SAMPLES: usize = 10_000;
pub const TAIL_MIN_COUNT: usize = 30;

pub fn tail_ratio_diagnostic(samples: &[DVector<f64>], c: f64, cap: f64, t_grid: &[f64]) -> Result<TailReport> {
    if samples.len() < TAIL_MIN_SAMPLES {
        return Err(Error::TooFewSamples { needed: TAIL_MIN_SAMPLES, got: samples.len() });
    }
    if !(c > 0.0 && c < 1.0 && cap > 0.0 && cap < 1.0) {
        return Err(Error::InvalidInput(format!("c and C must lie in (0, 1), got {c} and {cap}")));
    }
    let mut norms: Vec<f64> = samples.iter().map(|x| x.norm_squared()).collect();
    norms.sort_by(f64::total_cmp);
    let above = |t: f64| norms.len() - norms.partition_point(|&v| v <= t);
    let mut grid = t_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let points: Vec<TailPoint> = grid
        .iter()
        .map(|&t| {
            let (a, b) = (above(t), above(c * t));
            let (lower, upper) = wilson_interval(a, b, DEFAULT_Z);
            let ratio = if b == 0 { f64::NAN } else { a as f64 / b as f64 };
            TailPoint { t, above_t: a, above_ct: b, ratio, lower, upper, sufficient: b >= TAIL_MIN_COUNT, holds: lower <= cap }
        })
        .collect();
    let sufficient: Vec<&TailPoint> = points.iter().filter(|p| p.sufficient).collect();
    let t0 = sufficient.iter().rposition(|p| !p.holds).map_or_else(
        || sufficient.first().map(|p| p.t),
        |i| sufficient.get(i + 1).map(|p| p.t),
    );
    let verdict = match sufficient.last() {
        None => Verdict::Inconclusive,
        Some(p) if p.holds => Verdict::Holds,
        Some(_) => Verdict::Violated,
    };
    Ok(TailReport { c, cap, points, t0, verdict })
}
