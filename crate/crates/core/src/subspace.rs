//! Subspace algebra on ℝⁿ.
//!
//! Subspaces are stored as orthonormal bases. Rank decisions (spans,
//! intersections, complements) go through singular values or eigenvalues of
//! projectors, thresholded by the subspace tolerance. Distributions over
//! subspaces are either discrete (weighted atoms) or an opaque sampler.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{substream, Rng};
use crate::stats::{cumulative, pick_index, Estimate, Moments};

/// Default relative threshold for rank decisions.
pub const DEFAULT_TOL: f64 = 1e-9;

/// A linear subspace of ℝⁿ, held as an `n × d` matrix with orthonormal columns.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SubspaceRepr", into = "SubspaceRepr")]
pub struct Subspace {
    basis: DMatrix<f64>,
    tol: f64,
}

/// Wire form: `{"basis": [[..], ..], "ambient_dim": n}`, one inner list per
/// basis vector. Vectors need not be orthonormal; they are treated as a
/// spanning set on input.
#[derive(Serialize, Deserialize)]
struct SubspaceRepr {
    basis: Vec<Vec<f64>>,
    ambient_dim: usize,
}

impl TryFrom<SubspaceRepr> for Subspace {
    type Error = Error;

    fn try_from(r: SubspaceRepr) -> Result<Self> {
        let vectors: Vec<DVector<f64>> = r.basis.into_iter().map(DVector::from_vec).collect();
        Subspace::from_spanning_set(&vectors, r.ambient_dim, DEFAULT_TOL)
    }
}

impl From<Subspace> for SubspaceRepr {
    fn from(s: Subspace) -> Self {
        SubspaceRepr {
            basis: s.basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
            ambient_dim: s.ambient_dim(),
        }
    }
}

impl fmt::Debug for Subspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols: Vec<Vec<f64>> = self.basis.column_iter().map(|c| c.iter().copied().collect()).collect();
        f.debug_struct("Subspace")
            .field("ambient_dim", &self.ambient_dim())
            .field("basis", &cols)
            .finish()
    }
}

/// Flush round-off sized entries to zero, renormalize, and flip each column so
/// its first non-negligible entry is positive.
fn canonical_signs(mut basis: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in basis.column_iter_mut() {
        col.apply(|v| {
            if v.abs() < 1e-14 {
                *v = 0.0;
            }
        });
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        if let Some(first) = col.iter().copied().find(|v| v.abs() > 1e-8) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    basis
}

/// Columns of `vecs` whose eigenvalue satisfies `keep`, in eigenvalue order.
fn select_eigenvectors(eig: &SymmetricEigen<f64, nalgebra::Dyn>, keep: impl Fn(f64) -> bool) -> DMatrix<f64> {
    let n = eig.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).filter(|&i| keep(eig.eigenvalues[i])).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let cols: Vec<DVector<f64>> = idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

impl Subspace {
    /// The zero subspace of ℝⁿ.
    pub fn zero(n: usize) -> Self {
        Self { basis: DMatrix::zeros(n, 0), tol: DEFAULT_TOL }
    }

    /// ℝⁿ itself.
    pub fn full(n: usize) -> Self {
        Self { basis: DMatrix::identity(n, n), tol: DEFAULT_TOL }
    }

    /// Span of the standard basis vectors with the given (0-based) indices.
    pub fn coordinate(n: usize, indices: &[usize]) -> Result<Self> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&bad) = sorted.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!("coordinate index {bad} out of range for dimension {n}")));
        }
        let basis = DMatrix::from_fn(n, sorted.len(), |r, c| if r == sorted[c] { 1.0 } else { 0.0 });
        Ok(Self { basis, tol: DEFAULT_TOL })
    }

    /// Orthonormal basis of `span(vectors)`. A singular value counts toward
    /// the rank when it exceeds `tol` times the largest one.
    pub fn from_spanning_set(vectors: &[DVector<f64>], n: usize, tol: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("ambient dimension must be positive".into()));
        }
        for v in vectors {
            check_dim(n, v.len())?;
        }
        if vectors.is_empty() {
            return Ok(Self { basis: DMatrix::zeros(n, 0), tol });
        }
        let a = DMatrix::from_columns(vectors);
        let svd = a.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        if smax == 0.0 {
            return Ok(Self { basis: DMatrix::zeros(n, 0), tol });
        }
        let mut idx: Vec<usize> =
            (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol * smax).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let cols: Vec<DVector<f64>> = idx.iter().map(|&i| u.column(i).into_owned()).collect();
        let basis = if cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&cols) };
        Ok(Self { basis: canonical_signs(basis), tol })
    }

    /// Haar-distributed random subspace of dimension `d`.
    pub fn random(n: usize, d: usize, rng: &mut Rng) -> Self {
        let vectors: Vec<DVector<f64>> =
            (0..d).map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(rng))).collect();
        Self::from_spanning_set(&vectors, n, DEFAULT_TOL).expect("consistent dimensions")
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn is_zero(&self) -> bool {
        self.dim() == 0
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// `P_S x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * x)
    }

    /// Coordinates of `P_S x` in the stored basis.
    pub fn coordinates(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * x
    }

    /// `(P_S x, P_{S^⊥} x)`.
    pub fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let p = self.project(x);
        let q = x - &p;
        (p, q)
    }

    /// The orthogonal complement.
    pub fn complement(&self) -> Subspace {
        let n = self.ambient_dim();
        if self.dim() == 0 {
            return Self::full(n).with_tol(self.tol);
        }
        if self.dim() == n {
            return Self::zero(n).with_tol(self.tol);
        }
        let eig = SymmetricEigen::new(self.projector());
        let basis = select_eigenvectors(&eig, |l| l < 0.5);
        debug_assert_eq!(basis.ncols(), n - self.dim());
        Self { basis: canonical_signs(basis), tol: self.tol }
    }

    /// `S ∩ other`, from the eigenvectors of `P_S + P_other` whose eigenvalue
    /// is within `tol` of 2.
    pub fn intersect(&self, other: &Subspace) -> Result<Subspace> {
        check_dim(self.ambient_dim(), other.ambient_dim())?;
        let n = self.ambient_dim();
        let tol = self.tol.max(other.tol);
        if self.dim() == 0 || other.dim() == 0 {
            return Ok(Self::zero(n).with_tol(tol));
        }
        let eig = SymmetricEigen::new(self.projector() + other.projector());
        let basis = select_eigenvectors(&eig, |l| l >= 2.0 - tol);
        Ok(Self { basis: canonical_signs(basis), tol })
    }

    /// Whether `x ∈ S` up to `tol·‖x‖`.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        let (_, q) = self.split(x);
        q.norm() <= self.tol.max(1e-12) * x.norm().max(1.0)
    }

    /// Spectral-norm distance between projectors.
    pub fn distance(&self, other: &Subspace) -> f64 {
        spectral_norm(&(self.projector() - other.projector()))
    }

    pub fn approx_eq(&self, other: &Subspace, tol: f64) -> bool {
        self.ambient_dim() == other.ambient_dim() && self.dim() == other.dim() && self.distance(other) <= tol
    }

    /// Canonical ordering key: larger dimension first, then projector
    /// entries compared lexicographically (larger first) with a tolerance.
    pub fn canonical_cmp(&self, other: &Subspace) -> Ordering {
        other.dim().cmp(&self.dim()).then_with(|| {
            let (a, b) = (self.projector(), other.projector());
            for (x, y) in a.iter().zip(b.iter()) {
                if (x - y).abs() > 1e-8 {
                    return y.total_cmp(x);
                }
            }
            Ordering::Equal
        })
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// An opaque sampler for continuous distributions over subspaces.
#[derive(Clone)]
pub struct SubspaceSampler {
    pub name: String,
    sample: Arc<dyn Fn(u64) -> Subspace + Send + Sync>,
}

impl SubspaceSampler {
    pub fn new(name: impl Into<String>, f: impl Fn(u64) -> Subspace + Send + Sync + 'static) -> Self {
        Self { name: name.into(), sample: Arc::new(f) }
    }

    /// Haar-random subspaces of fixed dimension.
    pub fn uniform_grassmannian(n: usize, d: usize) -> Self {
        Self::new(format!("uniform_grassmannian({n},{d})"), move |seed| {
            let mut rng = substream(seed, "grassmannian", 0);
            Subspace::random(n, d, &mut rng)
        })
    }

    pub fn sample(&self, seed: u64) -> Subspace {
        (self.sample)(seed)
    }
}

impl fmt::Debug for SubspaceSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubspaceSampler").field("name", &self.name).finish()
    }
}

/// One weighted atom of a discrete distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub subspace: Subspace,
    pub weight: f64,
}

/// A probability distribution over subspaces of ℝⁿ (ξ).
#[derive(Debug, Clone)]
pub struct SubspaceDistribution {
    ambient_dim: usize,
    atoms: Vec<Atom>,
    cumulative: Vec<f64>,
    sampler: Option<SubspaceSampler>,
}

/// A subspace drawn from a [`SubspaceDistribution`].
pub enum Drawn<'a> {
    Atom(usize, &'a Subspace),
    Sampled(Subspace),
}

impl Drawn<'_> {
    pub fn subspace(&self) -> &Subspace {
        match self {
            Drawn::Atom(_, s) => s,
            Drawn::Sampled(s) => s,
        }
    }

    pub fn atom_index(&self) -> Option<usize> {
        match self {
            Drawn::Atom(i, _) => Some(*i),
            Drawn::Sampled(_) => None,
        }
    }
}

impl SubspaceDistribution {
    /// Discrete distribution; weights must be positive and sum to 1 within 1e-12.
    pub fn discrete(atoms: Vec<(Subspace, f64)>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidInput("a discrete distribution needs at least one atom".into()))?;
        let n = first.0.ambient_dim();
        for (s, w) in &atoms {
            check_dim(n, s.ambient_dim())?;
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::InvalidInput(format!("atom weight must be positive, got {w}")));
            }
        }
        let total: f64 = atoms.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("atom weights sum to {total}, expected 1")));
        }
        let atoms: Vec<Atom> = atoms.into_iter().map(|(subspace, weight)| Atom { subspace, weight }).collect();
        let cumulative = cumulative(&atoms.iter().map(|a| a.weight).collect::<Vec<_>>());
        Ok(Self { ambient_dim: n, atoms, cumulative, sampler: None })
    }

    /// Discrete distribution with weights rescaled to sum to one.
    pub fn normalized(atoms: Vec<(Subspace, f64)>) -> Result<Self> {
        let total: f64 = atoms.iter().map(|(_, w)| *w).sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidInput("atom weights must have a positive finite sum".into()));
        }
        let mut atoms: Vec<(Subspace, f64)> = atoms.into_iter().map(|(s, w)| (s, w / total)).collect();
        // absorb the rounding residue into the last weight
        let residue = 1.0 - atoms.iter().map(|(_, w)| *w).sum::<f64>();
        if let Some(last) = atoms.last_mut() {
            last.1 += residue;
        }
        Self::discrete(atoms)
    }

    pub fn uniform(subspaces: Vec<Subspace>) -> Result<Self> {
        let k = subspaces.len() as f64;
        Self::normalized(subspaces.into_iter().map(|s| (s, 1.0 / k)).collect())
    }

    pub fn dirac(subspace: Subspace) -> Self {
        Self::discrete(vec![(subspace, 1.0)]).expect("single atom")
    }

    pub fn continuous(ambient_dim: usize, sampler: SubspaceSampler) -> Self {
        Self { ambient_dim, atoms: Vec::new(), cumulative: Vec::new(), sampler: Some(sampler) }
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn is_continuous(&self) -> bool {
        self.sampler.is_some()
    }

    pub fn sampler(&self) -> Option<&SubspaceSampler> {
        self.sampler.as_ref()
    }

    /// Atoms of a discrete distribution; an error for a sampler-backed one.
    pub fn atoms(&self) -> Result<&[Atom]> {
        if self.is_continuous() {
            Err(Error::Unsupported("operation requires a discrete subspace distribution".into()))
        } else {
            Ok(&self.atoms)
        }
    }

    /// Same atoms with every subspace carrying `tol`.
    pub fn with_tol(mut self, tol: f64) -> Self {
        for a in &mut self.atoms {
            a.subspace.tol = tol;
        }
        self
    }

    pub fn draw(&self, rng: &mut Rng) -> Drawn<'_> {
        match &self.sampler {
            Some(s) => Drawn::Sampled(s.sample(rng.random())),
            None => {
                let i = pick_index(&self.cumulative, rng);
                Drawn::Atom(i, &self.atoms[i].subspace)
            }
        }
    }
}

fn min_part(s: &Subspace, x: &DVector<f64>) -> f64 {
    let (p, q) = s.split(x);
    p.norm().min(q.norm())
}

/// χ_ξ(x) = Σ wᵢ min(‖P_{Eᵢ}x‖, ‖P_{Eᵢ^⊥}x‖) for a discrete ξ.
pub fn chi(xi: &SubspaceDistribution, x: &DVector<f64>) -> Result<f64> {
    check_dim(xi.ambient_dim(), x.len())?;
    Ok(xi.atoms()?.iter().map(|a| a.weight * min_part(&a.subspace, x)).sum())
}

/// Monte Carlo χ_ξ(x), usable for sampler-backed ξ.
pub fn chi_monte_carlo(xi: &SubspaceDistribution, x: &DVector<f64>, samples: usize, seed: u64) -> Result<Estimate> {
    check_dim(xi.ambient_dim(), x.len())?;
    let mut rng = substream(seed, "chi-mc", 0);
    let m: Moments = (0..samples).map(|_| min_part(xi.draw(&mut rng).subspace(), x)).collect();
    Ok(m.mean_estimate())
}

/// The mean projector `Q = ∫ P_E dξ` with `λ = 1 − λ_max(Q)` and a top
/// eigenvector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameConstant {
    pub q: DMatrix<f64>,
    pub lambda: f64,
    pub top_eigenvalue: f64,
    pub top_eigenvector: DVector<f64>,
}

pub fn mean_projector(xi: &SubspaceDistribution) -> Result<FrameConstant> {
    let n = xi.ambient_dim();
    let mut q = DMatrix::zeros(n, n);
    for a in xi.atoms()? {
        q += a.subspace.projector() * a.weight;
    }
    q = (&q + q.transpose()) * 0.5;
    let eig = SymmetricEigen::new(q.clone());
    let top = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Deterministic choice inside a possibly degenerate top eigenspace: the
    // normalized projection of the first standard basis vector that has a
    // sizeable component in it.
    let top_space = select_eigenvectors(&eig, |l| l >= top - 1e-10);
    let d = top_space.ncols() as f64;
    let threshold = (d / n as f64).sqrt() * 0.999;
    let u = (0..n)
        .map(|i| top_space.row(i).transpose())
        .map(|coef| &top_space * coef)
        .find(|v: &DVector<f64>| v.norm() >= threshold)
        .expect("some basis vector projects onto the top eigenspace");
    let u = u.normalize();
    Ok(FrameConstant { lambda: (1.0 - top).clamp(0.0, 1.0), top_eigenvalue: top, top_eigenvector: u, q })
}

/// Independent subspaces `E_α` and the dependent subspace `E_dep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependentDecomposition {
    pub ambient_dim: usize,
    pub independent: Vec<Subspace>,
    pub dependent: Subspace,
}

impl IndependentDecomposition {
    /// Independent subspaces followed by the dependent one when nonzero.
    pub fn blocks(&self) -> Vec<&Subspace> {
        let mut b: Vec<&Subspace> = self.independent.iter().collect();
        if !self.dependent.is_zero() {
            b.push(&self.dependent);
        }
        b
    }

    /// Builds a decomposition from explicit blocks; the dependent subspace is
    /// whatever the independent ones leave over.
    pub fn from_independent(ambient_dim: usize, mut independent: Vec<Subspace>) -> Result<Self> {
        let mut spanning = Vec::new();
        for s in &independent {
            check_dim(ambient_dim, s.ambient_dim())?;
            spanning.extend(s.basis().column_iter().map(|c| c.into_owned()));
        }
        for (i, a) in independent.iter().enumerate() {
            for b in &independent[i + 1..] {
                let cross = spectral_norm(&(a.basis().transpose() * b.basis()));
                if cross > 1e-8 {
                    return Err(Error::InvalidInput("independent subspaces must be mutually orthogonal".into()));
                }
            }
        }
        let sum = Subspace::from_spanning_set(&spanning, ambient_dim, DEFAULT_TOL)?;
        independent.retain(|s| !s.is_zero());
        independent.sort_by(|a, b| a.canonical_cmp(b));
        Ok(Self { ambient_dim, independent, dependent: sum.complement() })
    }
}

/// Refines `{ℝⁿ}` by every atom: each part `W` becomes the nonzero members
/// of `{W ∩ E, W ∩ E^⊥}`. Dimensions that vanish along the way form `E_dep`.
pub fn independent_decomposition(xi: &SubspaceDistribution) -> Result<IndependentDecomposition> {
    if xi.is_continuous() {
        return Err(Error::Unsupported(
            "independent decomposition is only available for discrete subspace distributions".into(),
        ));
    }
    let n = xi.ambient_dim();
    let atoms = xi.atoms()?;
    let tol = atoms.iter().map(|a| a.subspace.tol()).fold(0.0, f64::max);
    let mut parts = vec![Subspace::full(n).with_tol(tol)];
    for atom in atoms {
        let e = &atom.subspace;
        let e_perp = e.complement();
        let mut next = Vec::with_capacity(parts.len() * 2);
        for w in &parts {
            for piece in [w.intersect(e)?, w.intersect(&e_perp)?] {
                if !piece.is_zero() {
                    next.push(piece);
                }
            }
        }
        parts = next;
        if parts.is_empty() {
            break;
        }
    }
    IndependentDecomposition::from_independent(n, parts).map(|mut d| {
        d.dependent = d.dependent.with_tol(tol);
        d
    })
}

/// Tuning for [`splitting_margin`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub initial_step: f64,
    pub final_step: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { restarts: 32, iterations: 500, initial_step: 0.5, final_step: 1e-6 }
    }
}

/// `θ = min_{‖x‖=1} χ_ξ(x)` and a minimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingMargin {
    pub theta: f64,
    pub argmin: DVector<f64>,
}

fn chi_subgradient(atoms: &[Atom], x: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut value = 0.0;
    let mut grad = DVector::zeros(x.len());
    for a in atoms {
        let (p, q) = a.subspace.split(x);
        let (pn, qn) = (p.norm(), q.norm());
        if pn <= qn {
            value += a.weight * pn;
            if pn > 0.0 {
                grad += p * (a.weight / pn);
            }
        } else {
            value += a.weight * qn;
            grad += q * (a.weight / qn);
        }
    }
    (value, grad)
}

fn tangent_basis(x: &DVector<f64>) -> DMatrix<f64> {
    Subspace::from_spanning_set(std::slice::from_ref(x), x.len(), DEFAULT_TOL)
        .expect("matching dimension")
        .complement()
        .basis
}

fn pattern_polish(atoms: &[Atom], mut x: DVector<f64>, mut fx: f64) -> (f64, DVector<f64>) {
    let mut h = 1e-2;
    let mut budget = 20_000usize;
    while h > 1e-13 && budget > 0 {
        let tangent = tangent_basis(&x);
        let mut improved = false;
        'dirs: for col in tangent.column_iter() {
            for sign in [1.0, -1.0] {
                budget = budget.saturating_sub(1);
                let y = (&x + col * (sign * h)).normalize();
                let fy = chi_subgradient(atoms, &y).0;
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break 'dirs;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    (fx, x)
}

/// Minimum of χ_ξ over the unit sphere.
///
/// Returns exactly zero (with a unit vector of the first independent
/// subspace) whenever the decomposition has an independent subspace.
/// Otherwise runs multi-start projected subgradient descent followed by a
/// pattern-search polish in the tangent space.
pub fn splitting_margin(xi: &SubspaceDistribution, config: MarginConfig, seed: u64) -> Result<SplittingMargin> {
    let decomposition = independent_decomposition(xi)?;
    if let Some(first) = decomposition.independent.first() {
        return Ok(SplittingMargin { theta: 0.0, argmin: first.basis().column(0).into_owned() });
    }
    let atoms = xi.atoms()?;
    let n = xi.ambient_dim();
    let decay = if config.iterations > 0 {
        (config.final_step / config.initial_step).powf(1.0 / config.iterations as f64)
    } else {
        1.0
    };
    let runs: Vec<(f64, DVector<f64>)> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, "margin-restart", r as u64);
            let mut x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)).normalize();
            let (mut best, mut best_x) = (chi_subgradient(atoms, &x).0, x.clone());
            let mut step = config.initial_step;
            for _ in 0..config.iterations {
                let (fx, g) = chi_subgradient(atoms, &x);
                if fx < best {
                    best = fx;
                    best_x = x.clone();
                }
                let g_t = &g - &x * g.dot(&x);
                if g_t.norm() < 1e-15 {
                    break;
                }
                x = (&x - g_t * step).normalize();
                step *= decay;
            }
            let fx = chi_subgradient(atoms, &x).0;
            if fx < best {
                best = fx;
                best_x = x;
            }
            pattern_polish(atoms, best_x, best)
        })
        .collect();
    let (theta, argmin) = runs
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("at least one restart");
    Ok(SplittingMargin { theta, argmin })
}
