#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use splitkit_core::rng::Rng;
use splitkit_core::subspace::{IndependentDecomposition, Subspace, SubspaceDistribution, DEFAULT_TOL};

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub fn span(vectors: &[&[f64]]) -> Subspace {
    let n = vectors[0].len();
    let vs: Vec<DVector<f64>> = vectors.iter().map(|x| v(x)).collect();
    Subspace::from_spanning_set(&vs, n, DEFAULT_TOL).unwrap()
}

pub fn bernstein() -> SubspaceDistribution {
    SubspaceDistribution::uniform(vec![span(&[&[1.0, 0.0]]), span(&[&[1.0, 1.0]])]).unwrap()
}

pub fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    g.qr().q()
}

/// A random discrete ξ whose atoms mostly share a hidden orthonormal frame,
/// so nontrivial independent subspaces appear.
pub fn random_instance(rng: &mut Rng) -> SubspaceDistribution {
    let n = rng.random_range(2..=8);
    let k = rng.random_range(1..=6);
    let frame = random_orthogonal(n, rng);
    let atoms = (0..k)
        .map(|_| {
            let s = if rng.random_bool(0.8) {
                let cols: Vec<DVector<f64>> =
                    (0..n).filter(|_| rng.random_bool(0.5)).map(|j| frame.column(j).into_owned()).collect();
                if cols.is_empty() {
                    Subspace::zero(n)
                } else {
                    Subspace::from_spanning_set(&cols, n, DEFAULT_TOL).unwrap()
                }
            } else {
                let d = rng.random_range(0..=n);
                Subspace::random(n, d, rng)
            };
            (s, rng.random_range(0.1..1.0))
        })
        .collect();
    SubspaceDistribution::normalized(atoms).unwrap()
}

/// Nonzero intersections `∩ E_i^{α_i}` over all `2^k` sign patterns, each
/// returned as an orthogonal projector.
pub fn sign_pattern_oracle(xi: &SubspaceDistribution) -> Vec<DMatrix<f64>> {
    let n = xi.ambient_dim();
    let atoms = xi.atoms().unwrap();
    let k = atoms.len();
    let id = DMatrix::<f64>::identity(n, n);
    let projectors: Vec<DMatrix<f64>> = atoms.iter().map(|a| a.subspace.projector()).collect();
    let mut out = Vec::new();
    for pattern in 0..(1usize << k) {
        let mut m = DMatrix::zeros(n, n);
        for (i, p) in projectors.iter().enumerate() {
            // the pattern bit selects E_i^⊥, whose orthogonal projector is P_i
            m += if pattern >> i & 1 == 1 { p.clone() } else { &id - p };
        }
        let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
        let kernel: Vec<DVector<f64>> = (0..n)
            .filter(|&j| eig.eigenvalues[j].abs() < 1e-8)
            .map(|j| eig.eigenvectors.column(j).into_owned())
            .collect();
        if !kernel.is_empty() {
            let b = DMatrix::from_columns(&kernel);
            out.push(&b * b.transpose());
        }
    }
    out
}

/// Subspace-set equality between a decomposition and the oracle.
pub fn matches_oracle(d: &IndependentDecomposition, oracle: &[DMatrix<f64>], tol: f64) -> bool {
    if d.independent.len() != oracle.len() {
        return false;
    }
    let mut used = vec![false; oracle.len()];
    for s in &d.independent {
        let p = s.projector();
        match (0..oracle.len()).find(|&j| !used[j] && (&p - &oracle[j]).amax() < tol) {
            Some(j) => used[j] = true,
            None => return false,
        }
    }
    let n = d.ambient_dim;
    let mut rest = DMatrix::<f64>::identity(n, n);
    for p in oracle {
        rest -= p;
    }
    (d.dependent.projector() - rest).amax() < tol
}
