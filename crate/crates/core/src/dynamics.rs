//! The single-particle collision process against an i.i.d. bath.
//!
//! At the jumps of a Poisson clock the particle velocity `v` meets a fresh
//! bath velocity `v_* ~ μ` and keeps `P_E v + P_{E^⊥} v_*` for `E ~ ξ`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measures::{GaussianMeasure, MeasureSpec};
use crate::rng::{substream, Rng};
use crate::stats::{energy_test, mean_estimate, nested_variance, Estimate, Moments, PermutationConfig, PermutationTest};
use crate::subspace::{mean_projector, Subspace, SubspaceDistribution};

/// Largest RK4 step for the second-moment equation.
pub const MOMENT_STEP: f64 = 0.01;

/// Maximum number of collision words `a^K` enumerated by [`nu_t_density`].
pub const WORD_BUDGET: f64 = 1e6;

/// Bath `μ`, initial law `ν₀`, subspace law `ξ` and clock rate.
#[derive(Debug, Clone)]
pub struct CollisionScene {
    pub xi: SubspaceDistribution,
    pub bath: MeasureSpec,
    pub initial: MeasureSpec,
    pub rate: f64,
}

impl CollisionScene {
    pub fn new(xi: SubspaceDistribution, bath: MeasureSpec, initial: MeasureSpec) -> Result<Self> {
        check_dim(xi.ambient_dim(), bath.ambient_dim())?;
        check_dim(xi.ambient_dim(), initial.ambient_dim())?;
        Ok(Self { xi, bath, initial, rate: 1.0 })
    }

    pub fn with_rate(mut self, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidInput(format!("rate must be positive, got {rate}")));
        }
        self.rate = rate;
        Ok(self)
    }

    pub fn ambient_dim(&self) -> usize {
        self.xi.ambient_dim()
    }
}

/// `(P_E v + P_{E^⊥} v_*, P_E v_* + P_{E^⊥} v)`.
pub fn collide(v: &DVector<f64>, v_star: &DVector<f64>, e: &Subspace) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dim(e.ambient_dim(), v.len())?;
    check_dim(e.ambient_dim(), v_star.len())?;
    let (pv, qv) = e.split(v);
    let (pw, qw) = e.split(v_star);
    Ok((pv + qw, pw + qv))
}

/// Share of the pair's kinetic energy carried by the exchanged components.
pub fn exchanged_energy_fraction(v: &DVector<f64>, v_star: &DVector<f64>, e: &Subspace) -> f64 {
    let total = v.norm_squared() + v_star.norm_squared();
    if total == 0.0 {
        return 0.0;
    }
    let (_, qv) = e.split(v);
    let (_, qw) = e.split(v_star);
    (qv.norm_squared() + qw.norm_squared()) / total
}

/// Jump skeleton of one path. Entry 0 is the initial state; the atom index is
/// `None` there and for subspaces drawn from a continuous ξ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub collision_subspaces: Vec<Option<usize>>,
}

impl Trajectory {
    pub fn jumps(&self) -> usize {
        self.times.len() - 1
    }

    /// `V_t`, constant between jumps.
    pub fn state_at(&self, t: f64) -> &DVector<f64> {
        let k = self.times.partition_point(|&s| s <= t);
        &self.states[k.max(1) - 1]
    }

    pub fn jumps_by(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).max(1) - 1
    }
}

fn jump(scene: &CollisionScene, v: &DVector<f64>, rng: &mut Rng) -> (DVector<f64>, Option<usize>) {
    let drawn = scene.xi.draw(rng);
    let v_star = scene.bath.draw(rng);
    let e = drawn.subspace();
    let (pv, _) = e.split(v);
    let (_, qw) = e.split(&v_star);
    (pv + qw, drawn.atom_index())
}

fn run_path(scene: &CollisionScene, v0: DVector<f64>, t_end: f64, rng: &mut Rng) -> Trajectory {
    let mut traj = Trajectory { times: vec![0.0], states: vec![v0], collision_subspaces: vec![None] };
    let mut t = 0.0;
    loop {
        let gap: f64 = Exp1.sample(rng);
        t += gap / scene.rate;
        if t > t_end {
            break;
        }
        let (v, atom) = jump(scene, traj.states.last().expect("nonempty"), rng);
        traj.times.push(t);
        traj.states.push(v);
        traj.collision_subspaces.push(atom);
    }
    traj
}

/// `n_paths` independent trajectories on `[0, t_end]`. Path `i` uses its own
/// substream, so results do not depend on the worker count.
pub fn simulate(scene: &CollisionScene, t_end: f64, n_paths: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidInput(format!("t_end must be positive, got {t_end}")));
    }
    if n_paths > 0 {
        // surfaces empty-empirical errors before the parallel section
        scene.initial.sample(1, seed)?;
        scene.bath.sample(1, seed)?;
    }
    Ok((0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, "simulate", i as u64);
            let v0 = scene.initial.draw(&mut rng);
            run_path(scene, v0, t_end, &mut rng)
        })
        .collect())
}

/// Writes `path_id,jump_index,time,v_1..v_n,atom_index`.
pub fn write_trajectories_csv<W: Write>(trajectories: &[Trajectory], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let n = trajectories.first().map_or(0, |t| t.states[0].len());
    let mut header = vec!["path_id".to_string(), "jump_index".into(), "time".into()];
    header.extend((1..=n).map(|i| format!("v_{i}")));
    header.push("atom_index".into());
    out.write_record(&header)?;
    for (p, traj) in trajectories.iter().enumerate() {
        for (j, (t, v)) in traj.times.iter().zip(&traj.states).enumerate() {
            let mut row = vec![p.to_string(), j.to_string(), t.to_string()];
            row.extend(v.iter().map(|x| x.to_string()));
            row.push(traj.collision_subspaces[j].map(|a| a.to_string()).unwrap_or_default());
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Monte Carlo estimate of `ℒf(v)`. Discrete ξ is summed exactly; only the
/// bath velocity is sampled.
pub fn generator_apply<F>(f: F, scene: &CollisionScene, v: &DVector<f64>, n_mc: usize, seed: u64) -> Result<Estimate>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    check_dim(scene.ambient_dim(), v.len())?;
    let fv = f(v);
    let stars = scene.bath.sample(n_mc, derive_tag(seed, "generator-bath"))?;
    let values: Vec<f64> = if scene.xi.is_continuous() {
        stars
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let mut rng = substream(seed, "generator-xi", i as u64);
                let drawn = scene.xi.draw(&mut rng);
                let (pv, _) = drawn.subspace().split(v);
                let (_, qw) = drawn.subspace().split(w);
                f(&(pv + qw)) - fv
            })
            .collect()
    } else {
        let atoms = scene.xi.atoms()?;
        let parts: Vec<(DVector<f64>, f64)> = atoms.iter().map(|a| (a.subspace.project(v), a.weight)).collect();
        stars
            .par_iter()
            .map(|w| {
                atoms
                    .iter()
                    .zip(&parts)
                    .map(|(a, (pv, weight))| {
                        let (_, qw) = a.subspace.split(w);
                        weight * (f(&(pv + qw)) - fv)
                    })
                    .sum()
            })
            .collect()
    };
    Ok(mean_estimate(&values).scale(scene.rate))
}

fn derive_tag(seed: u64, tag: &str) -> u64 {
    crate::rng::derive_seed(seed, tag, 0)
}

/// Exact first and second moments of `V_t` at the requested times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEvolution {
    pub q: DMatrix<f64>,
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

fn sym_exp(q: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let n = q.nrows();
    let eig = SymmetricEigen::new(q.clone());
    let d = eig.eigenvalues.map(|l| (s * (l - 1.0)).exp());
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    if n == 0 {
        m
    } else {
        (&m + m.transpose()) * 0.5
    }
}

/// Gaussian bath and initial law, discrete ξ. The mean is
/// `m_b + exp(rt(Q − I))(θ₀ − m_b)`; the centred second moment solves
/// `M' = r(J(M) − M)` with `J(M) = Σ w (P M P + P^⊥ Σ_b P^⊥)`.
pub fn moment_evolution(scene: &CollisionScene, times: &[f64]) -> Result<MomentEvolution> {
    let bath = scene
        .bath
        .as_gaussian()
        .ok_or_else(|| Error::Precondition("moment evolution needs a Gaussian bath".into()))?;
    let initial = scene
        .initial
        .as_gaussian()
        .ok_or_else(|| Error::Precondition("moment evolution needs a Gaussian initial law".into()))?;
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidInput(format!("query times must be nonnegative, got {t}")));
    }
    let n = scene.ambient_dim();
    let q = mean_projector(&scene.xi)?.q;
    let projectors: Vec<(DMatrix<f64>, DMatrix<f64>, f64)> = scene
        .xi
        .atoms()?
        .iter()
        .map(|a| {
            let p = a.subspace.projector();
            let perp = DMatrix::identity(n, n) - &p;
            (p, perp, a.weight)
        })
        .collect();
    let inflow = projectors
        .iter()
        .fold(DMatrix::zeros(n, n), |acc, (_, perp, w)| acc + perp * bath.cov() * perp * *w);
    let rate = scene.rate;
    let field = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let jumped = projectors.iter().fold(inflow.clone(), |acc, (p, _, w)| acc + p * m * p * *w);
        (jumped - m) * rate
    };

    let offset0 = initial.mean() - bath.mean();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut m = initial.cov() + &offset0 * offset0.transpose();
    let mut clock = 0.0;
    let mut means = vec![DVector::zeros(n); times.len()];
    let mut covariances = vec![DMatrix::zeros(n, n); times.len()];
    for idx in order {
        let target = times[idx];
        let span = target - clock;
        if span > 0.0 {
            let steps = (span / MOMENT_STEP).ceil() as usize;
            let h = span / steps as f64;
            for _ in 0..steps {
                let k1 = field(&m);
                let k2 = field(&(&m + &k1 * (h / 2.0)));
                let k3 = field(&(&m + &k2 * (h / 2.0)));
                let k4 = field(&(&m + &k3 * h));
                m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            m = (&m + m.transpose()) * 0.5;
            clock = target;
        }
        let offset = sym_exp(&q, rate * target) * &offset0;
        means[idx] = bath.mean() + &offset;
        covariances[idx] = if target == 0.0 { initial.cov().clone() } else { &m - &offset * offset.transpose() };
    }
    Ok(MomentEvolution { q, times: times.to_vec(), means, covariances })
}

/// Truncated Poisson mixture for `ν_t` with bath `γ` and `ν₀ = N(θ, I)`:
/// components `N(P_{E_k}⋯P_{E_1}θ, I)` weighted by Poisson and ξ weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuTDensity {
    pub t: f64,
    pub theta: DVector<f64>,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Poisson probability of more than `trunc_k` jumps, left out above.
    pub truncation_mass: f64,
}

fn poisson_pmf(k: usize, mu: f64) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let ln = k as f64 * mu.ln() - mu - statrs::function::gamma::ln_gamma(k as f64 + 1.0);
    ln.exp()
}

fn poisson_tail(k: usize, mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut j = k + 1;
    loop {
        let p = poisson_pmf(j, mu);
        total += p;
        if j as f64 > mu && p <= total * 1e-17 {
            break;
        }
        j += 1;
    }
    total
}

fn quantize(v: &DVector<f64>) -> Vec<i64> {
    v.iter().map(|x| (x * 1e10).round() as i64).collect()
}

pub fn nu_t_density(scene: &CollisionScene, t: f64, trunc_k: usize) -> Result<NuTDensity> {
    let n = scene.ambient_dim();
    let standard = GaussianMeasure::standard(n);
    let bath = scene.bath.as_gaussian().ok_or_else(|| Error::Precondition("bath must be standard Gaussian".into()))?;
    if (bath.cov() - standard.cov()).amax() > 1e-12 || bath.mean().amax() > 1e-12 {
        return Err(Error::Precondition("bath must be standard Gaussian".into()));
    }
    let initial =
        scene.initial.as_gaussian().ok_or_else(|| Error::Precondition("initial law must be N(θ, I)".into()))?;
    if (initial.cov() - standard.cov()).amax() > 1e-12 {
        return Err(Error::Precondition("initial law must be N(θ, I)".into()));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("t must be nonnegative, got {t}")));
    }
    let atoms = scene.xi.atoms()?;
    let required = (atoms.len() as f64).powi(trunc_k as i32);
    if required > WORD_BUDGET {
        return Err(Error::BudgetExceeded { required, budget: WORD_BUDGET });
    }
    let theta = initial.mean().clone();
    let mu = scene.rate * t;

    let mut merged: BTreeMap<Vec<i64>, (DVector<f64>, f64)> = BTreeMap::new();
    let mut level: BTreeMap<Vec<i64>, (DVector<f64>, f64)> = BTreeMap::new();
    level.insert(quantize(&theta), (theta.clone(), 1.0));
    let projectors: Vec<DMatrix<f64>> = atoms.iter().map(|a| a.subspace.projector()).collect();
    for k in 0..=trunc_k {
        let pk = poisson_pmf(k, mu);
        for (key, (m, w)) in &level {
            let slot = merged.entry(key.clone()).or_insert_with(|| (m.clone(), 0.0));
            slot.1 += pk * w;
        }
        if k == trunc_k || pk == 0.0 && k as f64 > mu {
            break;
        }
        let mut next: BTreeMap<Vec<i64>, (DVector<f64>, f64)> = BTreeMap::new();
        for (m, w) in level.values() {
            for (p, a) in projectors.iter().zip(atoms) {
                let m2 = p * m;
                let slot = next.entry(quantize(&m2)).or_insert_with(|| (m2.clone(), 0.0));
                slot.1 += w * a.weight;
            }
        }
        level = next;
    }
    let (means, weights): (Vec<_>, Vec<_>) = merged.into_values().filter(|(_, w)| *w > 0.0).unzip();
    Ok(NuTDensity { t, theta, weights, means, truncation_mass: poisson_tail(trunc_k, mu) })
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl NuTDensity {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Total retained weight, `1 − truncation_mass` up to rounding.
    pub fn retained_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Unnormalized truncated density at `x`.
    pub fn density(&self, x: &DVector<f64>) -> f64 {
        let n = self.dim() as f64;
        let norm = (2.0 * std::f64::consts::PI).powf(-n / 2.0);
        self.weights.iter().zip(&self.means).map(|(w, m)| w * norm * (-(x - m).norm_squared() / 2.0).exp()).sum()
    }

    /// Log density of the renormalized truncated mixture.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let n = self.dim() as f64;
        let c = -0.5 * n * (2.0 * std::f64::consts::PI).ln() - self.retained_mass().ln();
        c + log_sum_exp(self.weights.iter().zip(&self.means).map(|(w, m)| w.ln() - (x - m).norm_squared() / 2.0))
    }

    /// Mean of the renormalized truncated mixture.
    pub fn mean(&self) -> DVector<f64> {
        let total = self.retained_mass();
        self.weights.iter().zip(&self.means).fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w) / total
    }

    pub fn draw(&self, cumulative: &[f64], rng: &mut Rng) -> DVector<f64> {
        let i = crate::stats::pick_index(cumulative, rng);
        &self.means[i] + DVector::from_fn(self.dim(), |_, _| rand_distr::StandardNormal.sample(rng))
    }
}

/// `D(ν_t‖reference)` with its Monte Carlo error and a bound on the bias from
/// truncating the Poisson mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: Estimate,
    pub truncation_bias_bound: f64,
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
    }
}

/// Self-normalized importance sampling with the truncated mixture as proposal.
pub fn kl_to_gaussian(density: &NuTDensity, reference: &GaussianMeasure, n_mc: usize, seed: u64) -> Result<KlEstimate> {
    check_dim(density.dim(), reference.dim())?;
    if n_mc < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n_mc });
    }
    let n = density.dim();
    let eig = SymmetricEigen::new(reference.cov().clone());
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig <= 1e-12 {
        return Err(Error::Precondition("reference covariance must be nonsingular".into()));
    }
    let inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
        * eig.eigenvectors.transpose();
    let logdet: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let ref_log = |x: &DVector<f64>| {
        let d = x - reference.mean();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + (d.transpose() * &inv * &d)[(0, 0)])
    };
    let cumulative = crate::stats::cumulative(&density.weights);
    const CHUNK: usize = 1024;
    let chunks = n_mc.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, "kl", c as u64);
            let len = CHUNK.min(n_mc - c * CHUNK);
            (0..len)
                .map(|_| {
                    let x = density.draw(&cumulative, &mut rng);
                    density.log_density(&x) - ref_log(&x)
                })
                .collect()
        })
        .collect();
    let mut acc = Moments::default();
    for p in &parts {
        acc.merge(p);
    }
    let estimate = acc.mean_estimate();
    // tail components are N(m, I) with ‖m‖ ≤ ‖θ‖
    let max_inv = 1.0 / min_eig;
    let tr_inv: f64 = eig.eigenvalues.iter().map(|l| 1.0 / l).sum();
    let reach = reference.mean().norm() + density.theta.norm();
    let tail_kl = 0.5 * (tr_inv - n as f64 + logdet + max_inv * reach * reach);
    let m = density.truncation_mass;
    let truncation_bias_bound = m * (estimate.value.abs() + tail_kl.max(0.0)) + binary_entropy(m);
    Ok(KlEstimate { estimate, truncation_bias_bound })
}

/// `n/(2β) − (n/2)·log(β/(β−1)) + e^{−λt}‖θ‖²/(2β)`.
pub fn dv_lower_bound(theta: &DVector<f64>, lambda: f64, t: f64, beta: f64, n: usize) -> Result<f64> {
    if !(beta > 1.0) {
        return Err(Error::InvalidInput(format!("beta must exceed 1, got {beta}")));
    }
    let n = n as f64;
    Ok(n / (2.0 * beta) - 0.5 * n * (beta / (beta - 1.0)).ln()
        + (-lambda * t).exp() * theta.norm_squared() / (2.0 * beta))
}

/// Both sides of `∫ f ℒg dμ = ∫ g ℒf dμ` from shared draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReversibilityCheck {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Paired `lhs − rhs`.
    pub difference: Estimate,
    pub passes: bool,
}

pub fn reversibility_check<F, G>(scene: &CollisionScene, f: F, g: G, n_mc: usize, seed: u64) -> Result<ReversibilityCheck>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
    G: Fn(&DVector<f64>) -> f64 + Sync,
{
    if n_mc < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n_mc });
    }
    let vs = scene.bath.sample(n_mc, derive_tag(seed, "reversibility-v"))?;
    let stars = scene.bath.sample(n_mc, derive_tag(seed, "reversibility-star"))?;
    let continuous = scene.xi.is_continuous();
    let atoms = if continuous { &[][..] } else { scene.xi.atoms()? };
    let terms: Vec<(f64, f64)> = vs
        .par_iter()
        .zip(stars.par_iter())
        .enumerate()
        .map(|(i, (v, w))| {
            let (fv, gv) = (f(v), g(v));
            let mut pair = (0.0, 0.0);
            let mut add = |e: &Subspace, weight: f64| {
                let (pv, _) = e.split(v);
                let (_, qw) = e.split(w);
                let x = pv + qw;
                pair.0 += weight * fv * (g(&x) - gv);
                pair.1 += weight * gv * (f(&x) - fv);
            };
            if continuous {
                let mut rng = substream(seed, "reversibility-xi", i as u64);
                let drawn = scene.xi.draw(&mut rng);
                add(drawn.subspace(), 1.0);
            } else {
                for a in atoms {
                    add(&a.subspace, a.weight);
                }
            }
            pair
        })
        .collect();
    let lhs_v: Vec<f64> = terms.iter().map(|p| p.0).collect();
    let rhs_v: Vec<f64> = terms.iter().map(|p| p.1).collect();
    let diff_v: Vec<f64> = terms.iter().map(|p| p.0 - p.1).collect();
    let lhs = mean_estimate(&lhs_v).scale(scene.rate);
    let rhs = mean_estimate(&rhs_v).scale(scene.rate);
    let difference = mean_estimate(&diff_v).scale(scene.rate);
    let scale = lhs.value.abs().max(rhs.value.abs()).max(1.0);
    let passes = difference.value.abs() <= 3.0 * difference.se + 1e-12 * scale;
    Ok(ReversibilityCheck { lhs, rhs, difference, passes })
}

/// Energy two-sample test of `V_t` (paths started from `ν₀`) against fresh
/// bath samples, one test per time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumTest {
    pub t: f64,
    pub test: PermutationTest,
}

pub fn equilibrium_test(
    scene: &CollisionScene,
    times: &[f64],
    n_paths: usize,
    config: PermutationConfig,
    seed: u64,
) -> Result<Vec<EquilibriumTest>> {
    let t_end = times.iter().copied().fold(0.0, f64::max);
    if t_end <= 0.0 {
        return Err(Error::InvalidInput("need at least one positive time".into()));
    }
    let paths = simulate(scene, t_end, n_paths, derive_tag(seed, "equilibrium-paths"))?;
    let fresh = scene.bath.sample(n_paths, derive_tag(seed, "equilibrium-bath"))?;
    Ok(times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let states: Vec<DVector<f64>> = paths.iter().map(|p| p.state_at(t).clone()).collect();
            let test = energy_test(&states, &fresh, config, crate::rng::derive_seed(seed, "equilibrium-test", i as u64));
            EquilibriumTest { t, test }
        })
        .collect())
}

/// Propagates `v` to time `t` without storing the skeleton.
pub fn propagate(scene: &CollisionScene, v: &DVector<f64>, t: f64, rng: &mut Rng) -> DVector<f64> {
    let mut v = v.clone();
    let mut clock = 0.0;
    loop {
        let gap: f64 = Exp1.sample(rng);
        clock += gap / scene.rate;
        if clock > t {
            return v;
        }
        v = jump(scene, &v, rng).0;
    }
}

/// Nested Monte Carlo estimate of `Var_μ(P_t f)`: outer draws from the bath,
/// `n_inner` paths from each to estimate `P_t f`, minus the inner-noise bias.
pub fn semigroup_variance<F>(
    scene: &CollisionScene,
    f: F,
    t: f64,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<Estimate>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if n_outer < 2 || n_inner < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n_outer.min(n_inner) });
    }
    let starts = scene.bath.sample(n_outer, derive_tag(seed, "semigroup-outer"))?;
    let inner: Vec<(f64, f64)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = substream(seed, "semigroup-inner", i as u64);
            let m: Moments = (0..n_inner).map(|_| f(&propagate(scene, v, t, &mut rng))).collect();
            (m.mean, m.variance())
        })
        .collect();
    Ok(nested_variance(&inner, n_inner))
}
