//! Estimators, confidence margins and nonparametric two-sample/independence
//! tests shared by the measure, dynamics and inequality modules.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::rng::{substream, Rng};

/// A Monte Carlo (or exact, `se == 0`) estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    /// `(value - z*se, value + z*se)`.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.value - z * self.se, self.value + z * self.se)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { value: c * self.value, se: c.abs() * self.se }
    }
}

/// Welford accumulator with a deterministic merge.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn mean_estimate(&self) -> Estimate {
        let se = if self.count < 2 { 0.0 } else { (self.variance() / self.count as f64).sqrt() };
        Estimate::new(self.mean, se)
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Mean of `values` with its standard error.
pub fn mean_estimate(values: &[f64]) -> Estimate {
    values.iter().copied().collect::<Moments>().mean_estimate()
}

/// Unbiased sample variance of `values` with a delta-method standard error.
pub fn variance_estimate(values: &[f64]) -> Estimate {
    let n = values.len();
    if n < 2 {
        return Estimate::exact(0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let correction = n as f64 / (n - 1) as f64;
    let sq: Vec<f64> = values.iter().map(|x| (x - mean).powi(2) * correction).collect();
    mean_estimate(&sq)
}

/// Bias-corrected variance of conditional means from `(mean, variance)` pairs
/// of `n_inner` inner draws each.
pub fn nested_variance(inner: &[(f64, f64)], n_inner: usize) -> Estimate {
    let n = inner.len() as f64;
    let grand = inner.iter().map(|p| p.0).sum::<f64>() / n;
    let q: Vec<f64> =
        inner.iter().map(|(m, s2)| (m - grand).powi(2) * n / (n - 1.0) - s2 / n_inner as f64).collect();
    mean_estimate(&q)
}

/// Upper standard-normal quantile: `z` with `P(Z > z) = alpha`.
pub fn normal_upper_quantile(alpha: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - alpha)
}

/// Survival function of a chi-square distribution.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if dof <= 0.0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    let chi = ChiSquared::new(dof).expect("positive dof");
    1.0 - chi.cdf(x)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Result of a permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl PermutationTest {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value <= level
    }
}

/// Settings for the permutation tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub permutations: usize,
    /// Per-sample cap; larger inputs are subsampled without replacement.
    pub max_points: usize,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self { permutations: 199, max_points: 600 }
    }
}

fn subsample<'a>(points: &'a [DVector<f64>], cap: usize, rng: &mut Rng) -> Vec<&'a DVector<f64>> {
    let mut refs: Vec<&DVector<f64>> = points.iter().collect();
    if refs.len() > cap {
        refs.shuffle(rng);
        refs.truncate(cap);
    }
    refs
}

fn distance_matrix(points: &[&DVector<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (points[i] - points[j]).norm();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn permutation_p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&s| s >= observed).count();
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

/// Energy-distance two-sample permutation test (Székely–Rizzo).
pub fn energy_test(
    x: &[DVector<f64>],
    y: &[DVector<f64>],
    config: PermutationConfig,
    seed: u64,
) -> PermutationTest {
    let mut rng = substream(seed, "energy-subsample", 0);
    let xs = subsample(x, config.max_points, &mut rng);
    let ys = subsample(y, config.max_points, &mut rng);
    let (m, k) = (xs.len(), ys.len());
    let pooled: Vec<&DVector<f64>> = xs.iter().chain(ys.iter()).copied().collect();
    let n = pooled.len();
    let d = distance_matrix(&pooled);

    let stat = |in_x: &[bool]| -> f64 {
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = d[i * n + j];
                match (in_x[i], in_x[j]) {
                    (true, true) => sxx += v,
                    (false, false) => syy += v,
                    _ => sxy += v,
                }
            }
        }
        let (mf, kf) = (m as f64, k as f64);
        let e = 2.0 * sxy / (mf * kf) - 2.0 * sxx / (mf * mf) - 2.0 * syy / (kf * kf);
        e * mf * kf / (mf + kf)
    };

    let labels: Vec<bool> = (0..n).map(|i| i < m).collect();
    let observed = stat(&labels);
    let null: Vec<f64> = (0..config.permutations)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(seed, "energy-perm", p as u64);
            let mut perm = labels.clone();
            perm.shuffle(&mut rng);
            stat(&perm)
        })
        .collect();
    PermutationTest {
        statistic: observed,
        p_value: permutation_p_value(observed, &null),
        permutations: config.permutations,
    }
}

fn double_center(d: &mut [f64], n: usize) {
    let row: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] += grand - row[i] - row[j];
        }
    }
}

/// Distance-covariance permutation test of independence between paired
/// samples `a[i]`, `b[i]`.
pub fn distance_covariance_test(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    config: PermutationConfig,
    seed: u64,
) -> PermutationTest {
    assert_eq!(a.len(), b.len(), "paired samples required");
    let mut idx: Vec<usize> = (0..a.len()).collect();
    if idx.len() > config.max_points {
        let mut rng = substream(seed, "dcov-subsample", 0);
        idx.shuffle(&mut rng);
        idx.truncate(config.max_points);
    }
    let n = idx.len();
    let pa: Vec<&DVector<f64>> = idx.iter().map(|&i| &a[i]).collect();
    let pb: Vec<&DVector<f64>> = idx.iter().map(|&i| &b[i]).collect();
    let mut da = distance_matrix(&pa);
    let mut db = distance_matrix(&pb);
    double_center(&mut da, n);
    double_center(&mut db, n);

    let stat = |perm: &[usize]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let pi = perm[i];
            let arow = &da[i * n..(i + 1) * n];
            let brow = &db[pi * n..(pi + 1) * n];
            for j in 0..n {
                s += arow[j] * brow[perm[j]];
            }
        }
        s / (n as f64)
    };

    let identity: Vec<usize> = (0..n).collect();
    let observed = stat(&identity);
    let null: Vec<f64> = (0..config.permutations)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(seed, "dcov-perm", p as u64);
            let mut perm = identity.clone();
            perm.shuffle(&mut rng);
            stat(&perm)
        })
        .collect();
    PermutationTest {
        statistic: observed,
        p_value: permutation_p_value(observed, &null),
        permutations: config.permutations,
    }
}

/// Draw an index from a discrete distribution given cumulative weights.
pub(crate) fn pick_index(cumulative: &[f64], rng: &mut Rng) -> usize {
    let total = *cumulative.last().expect("nonempty weights");
    let u: f64 = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

pub(crate) fn cumulative(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = substream(seed, "t", 0);
        (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); z + shift }))
            .collect()
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let whole: Moments = xs.iter().copied().collect();
        let mut left: Moments = xs[..40].iter().copied().collect();
        let right: Moments = xs[40..].iter().copied().collect();
        left.merge(&right);
        assert!((whole.mean - left.mean).abs() < 1e-14);
        assert!((whole.variance() - left.variance()).abs() < 1e-14);
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson_interval(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 0, 3.0), (0.0, 1.0));
    }

    #[test]
    fn energy_test_separates_shifted_samples() {
        let x = normals(300, 2, 0.0, 1);
        let y = normals(300, 2, 0.0, 2);
        let z = normals(300, 2, 0.8, 3);
        let cfg = PermutationConfig { permutations: 99, max_points: 300 };
        assert!(!energy_test(&x, &y, cfg, 5).rejects(0.01));
        assert!(energy_test(&x, &z, cfg, 5).rejects(0.01));
    }

    #[test]
    fn dcov_detects_nonlinear_dependence() {
        let x = normals(400, 1, 0.0, 11);
        let y: Vec<DVector<f64>> = x.iter().map(|v| v.map(|t| t * t)).collect();
        let indep = normals(400, 1, 0.0, 12);
        let cfg = PermutationConfig { permutations: 99, max_points: 400 };
        assert!(distance_covariance_test(&x, &y, cfg, 3).rejects(0.01));
        assert!(!distance_covariance_test(&x, &indep, cfg, 3).rejects(0.01));
    }

    #[test]
    fn upper_quantile() {
        assert!((normal_upper_quantile(0.00135) - 3.0).abs() < 1e-3);
    }
}
