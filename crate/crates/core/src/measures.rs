//! Probability measures on ℝⁿ: Gaussians, products over an independent
//! decomposition, ξ-mixtures built from the two-draw kernel
//! `P_E X + P_{E^⊥} X'`, empirical measures and opaque samplers.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Cauchy, Distribution, Exp, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{substream, Rng};
use crate::stats::{chi_square_sf, distance_covariance_test, PermutationConfig, PermutationTest};
use crate::subspace::{spectral_norm, IndependentDecomposition, Subspace, SubspaceDistribution};

/// Tolerance below which a projected cross-covariance counts as zero.
pub const SPLIT_TOL: f64 = 1e-8;

const SAMPLE_CHUNK: usize = 1024;

/// A (possibly degenerate) Gaussian `N(mean, cov)`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// `cov = factor·factorᵀ`, eigenvalues clipped at zero.
    factor: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianRepr> for GaussianMeasure {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let n = r.mean.len();
        if r.cov.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: r.cov.len() });
        }
        for row in &r.cov {
            check_dim(n, row.len())?;
        }
        let cov = DMatrix::from_fn(n, n, |i, j| r.cov[i][j]);
        GaussianMeasure::new(DVector::from_vec(r.mean), cov)
    }
}

impl From<GaussianMeasure> for GaussianRepr {
    fn from(g: GaussianMeasure) -> Self {
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            cov: g.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl fmt::Debug for GaussianMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianMeasure").field("mean", &self.mean.as_slice()).field("cov", &self.cov).finish()
    }
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        check_dim(n, cov.nrows())?;
        check_dim(n, cov.ncols())?;
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidInput("covariance must be symmetric".into()));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let factor = if n == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let eig = SymmetricEigen::new(cov.clone());
            if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
                if min < -1e-10 * scale {
                    return Err(Error::InvalidInput(format!(
                        "covariance must be positive semidefinite (eigenvalue {min})"
                    )));
                }
            }
            let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
        };
        Ok(Self { mean, cov, factor })
    }

    /// Standard Gaussian γ on ℝⁿ.
    pub fn standard(n: usize) -> Self {
        Self::new(DVector::zeros(n), DMatrix::identity(n, n)).expect("identity covariance")
    }

    pub fn isotropic(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n)).expect("identity covariance")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn draw(&self, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.factor * z
    }
}

/// `D(p‖q)` for Gaussians; `+∞` when `p` is not absolutely continuous with
/// respect to `q`.
pub fn gaussian_kl(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let n = p.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let scale = q.cov.amax().max(p.cov.amax()).max(1.0);
    let tol = 1e-10 * scale;
    let eig = SymmetricEigen::new(q.cov.clone());
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let u = if keep.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&keep.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>())
    };
    let r = keep.len();
    let outside = DMatrix::identity(n, n) - &u * u.transpose();
    let diff = &q.mean - &p.mean;
    // support of p must equal the support of q
    if (&outside * &p.cov * &outside).amax() > tol || (&outside * &diff).amax() > 1e-10 * diff.amax().max(1.0) {
        return Ok(f64::INFINITY);
    }
    if r == 0 {
        return Ok(0.0);
    }
    let sp = u.transpose() * &p.cov * &u;
    let sp = (&sp + sp.transpose()) * 0.5;
    let sq_diag: Vec<f64> = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    let sp_eig = SymmetricEigen::new(sp.clone());
    if sp_eig.eigenvalues.iter().any(|&l| l <= tol) {
        return Ok(f64::INFINITY);
    }
    let d = u.transpose() * diff;
    let trace: f64 = (0..r).map(|i| sp[(i, i)] / sq_diag[i]).sum();
    let maha: f64 = (0..r).map(|i| d[i] * d[i] / sq_diag[i]).sum();
    let logdet_q: f64 = sq_diag.iter().map(|l| l.ln()).sum();
    let logdet_p: f64 = sp_eig.eigenvalues.iter().map(|l| l.ln()).sum();
    Ok((0.5 * (trace + maha - r as f64 + logdet_q - logdet_p)).max(0.0))
}

/// Law of `Bᵀ X` for `X ~ g`, with `B` the basis of `s`.
pub fn marginal_gaussian(g: &GaussianMeasure, s: &Subspace) -> Result<GaussianMeasure> {
    check_dim(g.dim(), s.ambient_dim())?;
    let b = s.basis();
    let cov = b.transpose() * &g.cov * b;
    GaussianMeasure::new(b.transpose() * &g.mean, (&cov + cov.transpose()) * 0.5)
}

/// One-dimensional laws used as coordinates or block factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Univariate {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    Laplace { location: f64, scale: f64 },
    Exponential { rate: f64 },
    StudentT { dof: f64 },
    Cauchy { location: f64, scale: f64 },
    Rademacher,
}

impl Univariate {
    pub fn standard_normal() -> Self {
        Univariate::Normal { mean: 0.0, sd: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Univariate::Normal { sd, .. } => sd >= 0.0,
            Univariate::Uniform { low, high } => high > low,
            Univariate::Laplace { scale, .. } | Univariate::Cauchy { scale, .. } => scale > 0.0,
            Univariate::Exponential { rate } => rate > 0.0,
            Univariate::StudentT { dof } => dof > 0.0,
            Univariate::Rademacher => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid parameters for {self:?}")))
        }
    }

    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            Univariate::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Univariate::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Univariate::Laplace { location, scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                location - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Univariate::Exponential { rate } => Exp::new(rate).expect("validated").sample(rng),
            Univariate::StudentT { dof } => StudentT::new(dof).expect("validated").sample(rng),
            Univariate::Cauchy { location, scale } => Cauchy::new(location, scale).expect("validated").sample(rng),
            Univariate::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match *self {
            Univariate::Normal { mean, .. } => Some(mean),
            Univariate::Uniform { low, high } => Some(0.5 * (low + high)),
            Univariate::Laplace { location, .. } => Some(location),
            Univariate::Exponential { rate } => Some(1.0 / rate),
            Univariate::StudentT { dof } => (dof > 1.0).then_some(0.0),
            Univariate::Cauchy { .. } => None,
            Univariate::Rademacher => Some(0.0),
        }
    }

    pub fn variance(&self) -> Option<f64> {
        match *self {
            Univariate::Normal { sd, .. } => Some(sd * sd),
            Univariate::Uniform { low, high } => Some((high - low).powi(2) / 12.0),
            Univariate::Laplace { scale, .. } => Some(2.0 * scale * scale),
            Univariate::Exponential { rate } => Some(1.0 / (rate * rate)),
            Univariate::StudentT { dof } => (dof > 2.0).then(|| dof / (dof - 2.0)),
            Univariate::Cauchy { .. } => None,
            Univariate::Rademacher => Some(1.0),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Univariate::Normal { .. })
    }
}

/// An opaque sampler on ℝⁿ.
#[derive(Clone)]
pub struct CustomSampler {
    pub name: String,
    pub dim: usize,
    draw: Arc<dyn Fn(&mut Rng) -> DVector<f64> + Send + Sync>,
}

impl CustomSampler {
    pub fn new(name: impl Into<String>, dim: usize, f: impl Fn(&mut Rng) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { name: name.into(), dim, draw: Arc::new(f) }
    }
}

impl fmt::Debug for CustomSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSampler").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

/// A sampleable probability measure on ℝⁿ.
#[derive(Debug, Clone)]
pub enum MeasureSpec {
    Gaussian(GaussianMeasure),
    /// Independent coordinates with the given laws.
    Independent(Vec<Univariate>),
    /// Product over the blocks of a decomposition (independent subspaces, then
    /// the dependent one when nonzero). Each factor lives in its block's basis
    /// coordinates.
    Product { decomposition: IndependentDecomposition, factors: Vec<MeasureSpec> },
    /// `∫ base_E ⊗ base_{E^⊥} dξ(E)`.
    Mixture { xi: SubspaceDistribution, base: Box<MeasureSpec> },
    Empirical(Arc<Vec<DVector<f64>>>),
    Custom(CustomSampler),
}

/// Whether a measure splits along `(E, E^⊥)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStatus {
    Splits,
    DoesNotSplit,
    Unknown,
}

impl SplitStatus {
    fn and(self, other: SplitStatus) -> SplitStatus {
        use SplitStatus::*;
        match (self, other) {
            (DoesNotSplit, _) | (_, DoesNotSplit) => DoesNotSplit,
            (Unknown, _) | (_, Unknown) => Unknown,
            _ => Splits,
        }
    }
}

/// Finiteness of `∫ log(1 + ‖x‖) dμ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogMomentStatus {
    Finite,
    Untestable,
}

fn covariance_splits(cov: &DMatrix<f64>, s: &Subspace) -> bool {
    let p = s.projector();
    let q = DMatrix::identity(p.nrows(), p.ncols()) - &p;
    spectral_norm(&(&p * cov * q)) <= SPLIT_TOL * cov.amax().max(1.0)
}

fn is_coordinate_aligned(s: &Subspace, j: usize) -> bool {
    let n = s.ambient_dim();
    let e = DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
    let pe = s.project(&e);
    pe.norm() < 1e-8 || (pe - e).norm() < 1e-8
}

impl MeasureSpec {
    pub fn standard_gaussian(n: usize) -> Self {
        MeasureSpec::Gaussian(GaussianMeasure::standard(n))
    }

    pub fn independent(laws: Vec<Univariate>) -> Result<Self> {
        if laws.is_empty() {
            return Err(Error::InvalidInput("at least one coordinate law is required".into()));
        }
        for l in &laws {
            l.validate()?;
        }
        Ok(MeasureSpec::Independent(laws))
    }

    pub fn product(decomposition: IndependentDecomposition, factors: Vec<MeasureSpec>) -> Result<Self> {
        let blocks = decomposition.blocks();
        if blocks.len() != factors.len() {
            return Err(Error::InvalidInput(format!(
                "product needs one factor per block: {} blocks, {} factors",
                blocks.len(),
                factors.len()
            )));
        }
        for (b, f) in blocks.iter().zip(&factors) {
            check_dim(b.dim(), f.ambient_dim())?;
        }
        Ok(MeasureSpec::Product { decomposition, factors })
    }

    pub fn mixture(xi: SubspaceDistribution, base: MeasureSpec) -> Result<Self> {
        check_dim(xi.ambient_dim(), base.ambient_dim())?;
        Ok(MeasureSpec::Mixture { xi, base: Box::new(base) })
    }

    pub fn empirical(samples: Vec<DVector<f64>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let n = first.len();
            for s in &samples {
                check_dim(n, s.len())?;
            }
        }
        Ok(MeasureSpec::Empirical(Arc::new(samples)))
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            MeasureSpec::Gaussian(g) => g.dim(),
            MeasureSpec::Independent(laws) => laws.len(),
            MeasureSpec::Product { decomposition, .. } => decomposition.ambient_dim,
            MeasureSpec::Mixture { xi, .. } => xi.ambient_dim(),
            MeasureSpec::Empirical(s) => s.first().map_or(0, |v| v.len()),
            MeasureSpec::Custom(c) => c.dim,
        }
    }

    /// One draw. Panics on an empty empirical measure; [`MeasureSpec::sample`]
    /// reports that case as an error instead.
    pub fn draw(&self, rng: &mut Rng) -> DVector<f64> {
        match self {
            MeasureSpec::Gaussian(g) => g.draw(rng),
            MeasureSpec::Independent(laws) => DVector::from_iterator(laws.len(), laws.iter().map(|l| l.draw(rng))),
            MeasureSpec::Product { decomposition, factors } => {
                let mut x = DVector::zeros(decomposition.ambient_dim);
                for (block, factor) in decomposition.blocks().into_iter().zip(factors) {
                    x += block.basis() * factor.draw(rng);
                }
                x
            }
            MeasureSpec::Mixture { xi, base } => {
                let drawn = xi.draw(rng);
                let x = base.draw(rng);
                let x_prime = base.draw(rng);
                let e = drawn.subspace();
                e.project(&x) + (&x_prime - e.project(&x_prime))
            }
            MeasureSpec::Empirical(samples) => {
                assert!(!samples.is_empty(), "empirical measure has no samples");
                samples[rng.random_range(0..samples.len())].clone()
            }
            MeasureSpec::Custom(c) => (c.draw)(rng),
        }
    }

    fn check_sampleable(&self) -> Result<()> {
        match self {
            MeasureSpec::Empirical(s) if s.is_empty() => {
                Err(Error::InvalidInput("empirical measure has no stored samples".into()))
            }
            MeasureSpec::Product { factors, .. } => factors.iter().try_for_each(|f| f.check_sampleable()),
            MeasureSpec::Mixture { base, .. } => base.check_sampleable(),
            _ => Ok(()),
        }
    }

    /// `count` reproducible draws. Work is cut into fixed chunks with their
    /// own substreams, so the output does not depend on the thread count.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        if count == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        self.check_sampleable()?;
        let chunks = count.div_ceil(SAMPLE_CHUNK);
        let out: Vec<Vec<DVector<f64>>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = substream(seed, "measure-sample", c as u64);
                let len = SAMPLE_CHUNK.min(count - c * SAMPLE_CHUNK);
                (0..len).map(|_| self.draw(&mut rng)).collect()
            })
            .collect();
        Ok(out.into_iter().flatten().collect())
    }

    /// The measure as a Gaussian, when it is one in closed form.
    pub fn as_gaussian(&self) -> Option<GaussianMeasure> {
        match self {
            MeasureSpec::Gaussian(g) => Some(g.clone()),
            MeasureSpec::Independent(laws) => {
                let mut mean = DVector::zeros(laws.len());
                let mut var = DVector::zeros(laws.len());
                for (i, l) in laws.iter().enumerate() {
                    match *l {
                        Univariate::Normal { mean: m, sd } => {
                            mean[i] = m;
                            var[i] = sd * sd;
                        }
                        _ => return None,
                    }
                }
                GaussianMeasure::new(mean, DMatrix::from_diagonal(&var)).ok()
            }
            MeasureSpec::Product { decomposition, factors } => {
                let n = decomposition.ambient_dim;
                let (mut mean, mut cov) = (DVector::zeros(n), DMatrix::zeros(n, n));
                for (block, factor) in decomposition.blocks().into_iter().zip(factors) {
                    let g = factor.as_gaussian()?;
                    mean += block.basis() * g.mean();
                    cov += block.basis() * g.cov() * block.basis().transpose();
                }
                GaussianMeasure::new(mean, (&cov + cov.transpose()) * 0.5).ok()
            }
            MeasureSpec::Mixture { xi, base } => {
                if base.splits_wrt(xi) == SplitStatus::Splits {
                    base.as_gaussian()
                } else {
                    None
                }
            }
            MeasureSpec::Empirical(_) | MeasureSpec::Custom(_) => None,
        }
    }

    /// Mean vector, when finite and available without sampling.
    pub fn mean(&self) -> Option<DVector<f64>> {
        match self {
            MeasureSpec::Gaussian(g) => Some(g.mean().clone()),
            MeasureSpec::Independent(laws) => {
                let m: Option<Vec<f64>> = laws.iter().map(|l| l.mean()).collect();
                m.map(DVector::from_vec)
            }
            MeasureSpec::Product { decomposition, factors } => {
                let mut mean = DVector::zeros(decomposition.ambient_dim);
                for (block, factor) in decomposition.blocks().into_iter().zip(factors) {
                    mean += block.basis() * factor.mean()?;
                }
                Some(mean)
            }
            // P_E m + P_{E^⊥} m = m
            MeasureSpec::Mixture { base, .. } => base.mean(),
            MeasureSpec::Empirical(s) => {
                let first = s.first()?;
                let sum = s.iter().fold(DVector::zeros(first.len()), |acc, x| acc + x);
                Some(sum / s.len() as f64)
            }
            MeasureSpec::Custom(_) => None,
        }
    }

    /// Covariance matrix, when finite and available without sampling.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        match self {
            MeasureSpec::Gaussian(g) => Some(g.cov().clone()),
            MeasureSpec::Independent(laws) => {
                let v: Option<Vec<f64>> = laws.iter().map(|l| l.variance()).collect();
                v.map(|v| DMatrix::from_diagonal(&DVector::from_vec(v)))
            }
            MeasureSpec::Product { decomposition, factors } => {
                let n = decomposition.ambient_dim;
                let mut cov = DMatrix::zeros(n, n);
                for (block, factor) in decomposition.blocks().into_iter().zip(factors) {
                    cov += block.basis() * factor.covariance()? * block.basis().transpose();
                }
                Some(cov)
            }
            MeasureSpec::Mixture { xi, base } => {
                let c = base.covariance()?;
                let n = c.nrows();
                let mut out = DMatrix::zeros(n, n);
                for a in xi.atoms().ok()? {
                    let p = a.subspace.projector();
                    let q = DMatrix::identity(n, n) - &p;
                    out += (&p * &c * &p + &q * &c * &q) * a.weight;
                }
                Some(out)
            }
            MeasureSpec::Empirical(s) => Some(sample_covariance(s)),
            MeasureSpec::Custom(_) => None,
        }
    }

    /// Whether the measure splits along `(E, E^⊥)`, decided from its structure.
    pub fn split_status(&self, e: &Subspace) -> SplitStatus {
        if e.ambient_dim() != self.ambient_dim() {
            return SplitStatus::DoesNotSplit;
        }
        match self {
            MeasureSpec::Gaussian(g) => {
                if covariance_splits(g.cov(), e) {
                    SplitStatus::Splits
                } else {
                    SplitStatus::DoesNotSplit
                }
            }
            MeasureSpec::Independent(laws) => {
                // Darmois–Skitovich: a non-Gaussian coordinate must sit wholly
                // inside E or E^⊥. The Gaussian coordinates then need a
                // covariance commuting with P_E.
                for (j, l) in laws.iter().enumerate() {
                    if !l.is_gaussian() && !is_coordinate_aligned(e, j) {
                        return SplitStatus::DoesNotSplit;
                    }
                }
                let var = DVector::from_iterator(
                    laws.len(),
                    laws.iter().map(|l| if l.is_gaussian() { l.variance().unwrap_or(0.0) } else { 0.0 }),
                );
                if covariance_splits(&DMatrix::from_diagonal(&var), e) {
                    SplitStatus::Splits
                } else {
                    SplitStatus::DoesNotSplit
                }
            }
            MeasureSpec::Product { decomposition, factors } => {
                let p = e.projector();
                let blocks = decomposition.blocks();
                let invariant = blocks.iter().all(|b| {
                    let pb = b.projector();
                    (&p * &pb - &pb * &p).amax() < 1e-8
                });
                if invariant {
                    let mut status = SplitStatus::Splits;
                    for (block, factor) in blocks.iter().zip(factors) {
                        // E ∩ block expressed in block coordinates
                        let b = block.basis();
                        let inner = b.transpose() * &p * b;
                        let vectors: Vec<DVector<f64>> = inner.column_iter().map(|c| c.into_owned()).collect();
                        let Ok(induced) = Subspace::from_spanning_set(&vectors, block.dim(), 1e-8) else {
                            return SplitStatus::Unknown;
                        };
                        status = status.and(factor.split_status(&induced));
                    }
                    status
                } else if let Some(g) = self.as_gaussian() {
                    MeasureSpec::Gaussian(g).split_status(e)
                } else {
                    SplitStatus::Unknown
                }
            }
            MeasureSpec::Mixture { xi, base } => {
                if base.splits_wrt(xi) == SplitStatus::Splits {
                    base.split_status(e)
                } else {
                    SplitStatus::Unknown
                }
            }
            MeasureSpec::Empirical(_) | MeasureSpec::Custom(_) => SplitStatus::Unknown,
        }
    }

    /// Splitting along every atom of a discrete ξ.
    pub fn splits_wrt(&self, xi: &SubspaceDistribution) -> SplitStatus {
        match xi.atoms() {
            Ok(atoms) => atoms.iter().fold(SplitStatus::Splits, |s, a| s.and(self.split_status(&a.subspace))),
            Err(_) => SplitStatus::Unknown,
        }
    }

    /// Finite logarithmic moment, for analytically specified measures.
    pub fn log_moment_status(&self) -> LogMomentStatus {
        match self {
            MeasureSpec::Gaussian(_) | MeasureSpec::Independent(_) => LogMomentStatus::Finite,
            MeasureSpec::Product { factors, .. } => {
                if factors.iter().all(|f| f.log_moment_status() == LogMomentStatus::Finite) {
                    LogMomentStatus::Finite
                } else {
                    LogMomentStatus::Untestable
                }
            }
            MeasureSpec::Mixture { base, .. } => base.log_moment_status(),
            MeasureSpec::Empirical(_) | MeasureSpec::Custom(_) => LogMomentStatus::Untestable,
        }
    }
}

pub(crate) fn sample_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let Some(first) = samples.first() else {
        return DMatrix::zeros(0, 0);
    };
    let n = first.len();
    let count = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(n), |acc, x| acc + x) / count;
    let mut cov = DMatrix::zeros(n, n);
    for x in samples {
        let d = x - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov / (count - 1.0).max(1.0)
}

/// `∫ ‖P_E Cov P_{E^⊥}‖ dξ(E)` with per-atom values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDefect {
    pub cross_norm: f64,
    pub per_atom: Vec<(Subspace, f64)>,
    /// True when the covariance was known in closed form.
    pub exact: bool,
    /// Pass threshold: `1e-8` for exact covariances, three bootstrap
    /// standard deviations otherwise.
    pub threshold: f64,
    pub passes: bool,
}

fn defect_for(cov: &DMatrix<f64>, xi: &SubspaceDistribution) -> Result<(f64, Vec<(Subspace, f64)>)> {
    let n = cov.nrows();
    let mut total = 0.0;
    let mut per_atom = Vec::new();
    for a in xi.atoms()? {
        let p = a.subspace.projector();
        let q = DMatrix::identity(n, n) - &p;
        let v = spectral_norm(&(&p * cov * q));
        total += a.weight * v;
        per_atom.push((a.subspace.clone(), v));
    }
    Ok((total, per_atom))
}

const BOOTSTRAP_RESAMPLES: usize = 100;

pub fn covariance_split_defect(
    spec: &MeasureSpec,
    xi: &SubspaceDistribution,
    count: usize,
    seed: u64,
) -> Result<SplitDefect> {
    check_dim(xi.ambient_dim(), spec.ambient_dim())?;
    let analytic = match spec {
        MeasureSpec::Empirical(_) | MeasureSpec::Custom(_) => None,
        other => other.covariance(),
    };
    if let Some(cov) = analytic {
        let (cross_norm, per_atom) = defect_for(&cov, xi)?;
        let threshold = SPLIT_TOL;
        return Ok(SplitDefect { cross_norm, per_atom, exact: true, threshold, passes: cross_norm <= threshold });
    }
    let samples = match spec {
        MeasureSpec::Empirical(s) => s.as_ref().clone(),
        other => other.sample(count, seed)?,
    };
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    let (cross_norm, per_atom) = defect_for(&sample_covariance(&samples), xi)?;
    let boot: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, "defect-bootstrap", b as u64);
            let resample: Vec<DVector<f64>> =
                (0..samples.len()).map(|_| samples[rng.random_range(0..samples.len())].clone()).collect();
            defect_for(&sample_covariance(&resample), xi).map(|(v, _)| v).unwrap_or(f64::NAN)
        })
        .collect();
    let sd = crate::stats::variance_estimate(&boot).value.sqrt();
    let threshold = 3.0 * sd;
    Ok(SplitDefect { cross_norm, per_atom, exact: false, threshold, passes: cross_norm <= threshold })
}

/// Settings for [`empirical_split_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitTestConfig {
    /// Overall level; each of the two component tests runs at `level / 2`.
    pub level: f64,
    pub permutation: PermutationConfig,
}

impl Default for SplitTestConfig {
    fn default() -> Self {
        Self { level: 0.01, permutation: PermutationConfig { permutations: 399, max_points: 600 } }
    }
}

/// Outcome of testing independence of `P_S X` and `P_{S^⊥} X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitTest {
    /// `N·‖Ĉ‖²_F` for the whitened cross-covariance.
    pub cross_statistic: f64,
    pub cross_p_value: f64,
    pub dcov: PermutationTest,
    pub passes: bool,
}

pub const MIN_SPLIT_TEST_SAMPLES: usize = 1000;

fn whiten(coords: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let cov = sample_covariance(coords);
    let d = cov.nrows();
    let count = coords.len() as f64;
    let mean = coords.iter().fold(DVector::zeros(d), |acc, x| acc + x) / count;
    let eig = SymmetricEigen::new(cov);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > 1e-12 * scale).collect();
    coords
        .iter()
        .map(|x| {
            let c = x - &mean;
            DVector::from_iterator(
                keep.len(),
                keep.iter().map(|&i| eig.eigenvectors.column(i).dot(&c) / eig.eigenvalues[i].sqrt()),
            )
        })
        .collect()
}

/// Tests whether samples split along `(S, S^⊥)`: an asymptotic χ² test on
/// the whitened cross-covariance plus a distance-covariance permutation test.
pub fn empirical_split_test(
    samples: &[DVector<f64>],
    s: &Subspace,
    config: SplitTestConfig,
    seed: u64,
) -> Result<SplitTest> {
    if samples.len() < MIN_SPLIT_TEST_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_SPLIT_TEST_SAMPLES, got: samples.len() });
    }
    for x in samples {
        check_dim(s.ambient_dim(), x.len())?;
    }
    let complement = s.complement();
    if s.is_zero() || complement.is_zero() {
        let dcov = PermutationTest { statistic: 0.0, p_value: 1.0, permutations: 0 };
        return Ok(SplitTest { cross_statistic: 0.0, cross_p_value: 1.0, dcov, passes: true });
    }
    let y: Vec<DVector<f64>> = samples.iter().map(|x| s.coordinates(x)).collect();
    let z: Vec<DVector<f64>> = samples.iter().map(|x| complement.coordinates(x)).collect();
    let (wy, wz) = (whiten(&y), whiten(&z));
    let (dy, dz) = (wy[0].len(), wz[0].len());
    let count = samples.len() as f64;
    let mut cross = DMatrix::zeros(dy, dz);
    for (a, b) in wy.iter().zip(&wz) {
        cross.ger(1.0 / count, a, b, 1.0);
    }
    let cross_statistic = count * cross.norm_squared();
    let cross_p_value = chi_square_sf(cross_statistic, (dy * dz) as f64);
    let dcov = distance_covariance_test(&y, &z, config.permutation, seed);
    let half = config.level / 2.0;
    let passes = cross_p_value > half && !dcov.rejects(half);
    Ok(SplitTest { cross_statistic, cross_p_value, dcov, passes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::{independent_decomposition, DEFAULT_TOL};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn rotated(angle_deg: f64) -> GaussianMeasure {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let d = DMatrix::from_diagonal(&v(&[1.0, 4.0]));
        GaussianMeasure::new(DVector::zeros(2), &r * d * r.transpose()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let g = GaussianMeasure::standard(3);
        assert_eq!(gaussian_kl(&g, &g).unwrap(), 0.0);
        let theta = v(&[1.0, -2.0, 0.5]);
        let shifted = GaussianMeasure::isotropic(theta.clone());
        assert!((gaussian_kl(&shifted, &g).unwrap() - theta.norm_squared() / 2.0).abs() < 1e-12);
        let wide = GaussianMeasure::new(v(&[0.0]), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((gaussian_kl(&wide, &GaussianMeasure::standard(1)).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.153426).abs() < 1e-6);
    }

    #[test]
    fn kl_degenerate_reference_is_infinite() {
        let degenerate = GaussianMeasure::new(DVector::zeros(2), DMatrix::from_diagonal(&v(&[1.0, 0.0]))).unwrap();
        let g = GaussianMeasure::standard(2);
        assert_eq!(gaussian_kl(&g, &degenerate).unwrap(), f64::INFINITY);
        // same support, same law
        assert_eq!(gaussian_kl(&degenerate, &degenerate).unwrap(), 0.0);
        // lower-dimensional p against full-rank q is singular as well
        assert_eq!(gaussian_kl(&degenerate, &g).unwrap(), f64::INFINITY);
        let off = GaussianMeasure::new(v(&[0.0, 1.0]), DMatrix::from_diagonal(&v(&[1.0, 0.0]))).unwrap();
        assert_eq!(gaussian_kl(&off, &degenerate).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gaussian_validation() {
        assert!(GaussianMeasure::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(GaussianMeasure::new(DVector::zeros(2), DMatrix::from_diagonal(&v(&[1.0, -1.0]))).is_err());
        assert!(GaussianMeasure::new(DVector::zeros(2), DMatrix::zeros(2, 2)).is_ok());
    }

    #[test]
    fn marginal_examples() {
        let mut rng = substream(1, "t", 0);
        let s = Subspace::random(4, 2, &mut rng);
        let m = marginal_gaussian(&GaussianMeasure::standard(4), &s).unwrap();
        assert!((m.cov() - DMatrix::identity(2, 2)).amax() < 1e-12);

        let g = GaussianMeasure::isotropic(v(&[1.0, 2.0]));
        let m = marginal_gaussian(&g, &Subspace::coordinate(2, &[0]).unwrap()).unwrap();
        assert!((m.mean()[0] - 1.0).abs() < 1e-15 && (m.cov()[(0, 0)] - 1.0).abs() < 1e-15);

        let g = GaussianMeasure::new(DVector::zeros(2), DMatrix::from_diagonal(&v(&[1.0, 4.0]))).unwrap();
        let diag = Subspace::from_spanning_set(&[v(&[1.0, 1.0])], 2, DEFAULT_TOL).unwrap();
        let m = marginal_gaussian(&g, &diag).unwrap();
        assert!((m.cov()[(0, 0)] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn split_defect_examples() {
        let e1 = SubspaceDistribution::dirac(Subspace::coordinate(2, &[0]).unwrap());
        let d = covariance_split_defect(&MeasureSpec::standard_gaussian(2), &e1, 0, 0).unwrap();
        assert!(d.exact && d.cross_norm == 0.0 && d.passes);
        let diag = MeasureSpec::Gaussian(
            GaussianMeasure::new(DVector::zeros(2), DMatrix::from_diagonal(&v(&[1.0, 4.0]))).unwrap(),
        );
        assert_eq!(covariance_split_defect(&diag, &e1, 0, 0).unwrap().cross_norm, 0.0);
        let rot = MeasureSpec::Gaussian(rotated(30.0));
        let d = covariance_split_defect(&rot, &e1, 0, 0).unwrap();
        // Σ₁₂ = (4 − 1)·sin30°·cos30° = 1.5·sin60°
        assert!((d.cross_norm - 1.5 * 60f64.to_radians().sin()).abs() < 1e-12);
        assert!(!d.passes);
        assert!((d.cross_norm - d.per_atom.iter().map(|(_, v)| v).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn empirical_split_defect_uses_bootstrap() {
        let samples = MeasureSpec::standard_gaussian(2).sample(5000, 3).unwrap();
        let spec = MeasureSpec::empirical(samples).unwrap();
        let e1 = SubspaceDistribution::dirac(Subspace::coordinate(2, &[0]).unwrap());
        let d = covariance_split_defect(&spec, &e1, 0, 4).unwrap();
        assert!(!d.exact);
        assert!(d.passes, "{d:?}");
    }

    #[test]
    fn sample_mean_near_zero() {
        let n = 100_000;
        let xs = MeasureSpec::standard_gaussian(2).sample(n, 17).unwrap();
        let mean = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / n as f64;
        for i in 0..2 {
            assert!(mean[i].abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampling_is_reproducible_and_errors_on_empty() {
        let spec = MeasureSpec::independent(vec![Univariate::Uniform { low: 0.0, high: 1.0 }; 3]).unwrap();
        assert_eq!(spec.sample(3000, 5).unwrap(), spec.sample(3000, 5).unwrap());
        let empty = MeasureSpec::empirical(Vec::new()).unwrap();
        assert!(empty.sample(1, 0).is_err());
        assert!(spec.sample(0, 0).is_err());
    }

    #[test]
    fn product_over_efron_stein_blocks_has_independent_axes() {
        let es: Vec<Subspace> = (0..3)
            .map(|i| Subspace::coordinate(3, &(0..3).filter(|&j| j != i).collect::<Vec<_>>()).unwrap())
            .collect();
        let d = independent_decomposition(&SubspaceDistribution::uniform(es).unwrap()).unwrap();
        let u = MeasureSpec::independent(vec![Univariate::Uniform { low: 0.0, high: 1.0 }]).unwrap();
        let spec = MeasureSpec::product(d, vec![u.clone(), u.clone(), u]).unwrap();
        let xs = spec.sample(100_000, 2).unwrap();
        let cov = sample_covariance(&xs);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let rho = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
                assert!(rho.abs() < 0.02, "rho({i},{j}) = {rho}");
            }
        }
    }

    #[test]
    fn split_status_rules() {
        let diag = Subspace::from_spanning_set(&[v(&[1.0, 1.0])], 2, DEFAULT_TOL).unwrap();
        let e1 = Subspace::coordinate(2, &[0]).unwrap();
        let uni = MeasureSpec::independent(vec![Univariate::Uniform { low: -1.0, high: 1.0 }; 2]).unwrap();
        assert_eq!(uni.split_status(&e1), SplitStatus::Splits);
        assert_eq!(uni.split_status(&diag), SplitStatus::DoesNotSplit);
        let normal = MeasureSpec::independent(vec![Univariate::standard_normal(); 2]).unwrap();
        assert_eq!(normal.split_status(&diag), SplitStatus::Splits);
        assert_eq!(MeasureSpec::Gaussian(rotated(30.0)).split_status(&e1), SplitStatus::DoesNotSplit);
        let emp = MeasureSpec::empirical(vec![v(&[0.0, 0.0])]).unwrap();
        assert_eq!(emp.split_status(&e1), SplitStatus::Unknown);
        assert_eq!(emp.log_moment_status(), LogMomentStatus::Untestable);
        assert_eq!(normal.log_moment_status(), LogMomentStatus::Finite);
    }

    #[test]
    fn split_test_examples() {
        let cfg = SplitTestConfig::default();
        let g = MeasureSpec::standard_gaussian(3).sample(5000, 11).unwrap();
        let mut rng = substream(2, "t", 0);
        let s = Subspace::random(3, 1, &mut rng);
        let r = empirical_split_test(&g, &s, cfg, 1).unwrap();
        assert!(r.passes, "{r:?}");

        let mut rng = substream(3, "t", 0);
        let dup: Vec<DVector<f64>> = (0..5000)
            .map(|_| {
                let u: f64 = rng.random();
                v(&[u, u])
            })
            .collect();
        let e1 = Subspace::coordinate(2, &[0]).unwrap();
        assert!(!empirical_split_test(&dup, &e1, cfg, 1).unwrap().passes);

        // X, Y iid N(0,1): X + Y ⟂ X − Y
        let xy = MeasureSpec::standard_gaussian(2).sample(5000, 9).unwrap();
        let diag = Subspace::from_spanning_set(&[v(&[1.0, 1.0])], 2, DEFAULT_TOL).unwrap();
        assert!(empirical_split_test(&xy, &diag, cfg, 1).unwrap().passes);

        assert!(matches!(empirical_split_test(&xy[..10], &diag, cfg, 1), Err(Error::TooFewSamples { .. })));
    }
}
