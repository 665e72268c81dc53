//! JSON scene files and the three commands built on them.
//!
//! A scene fixes the ambient dimension, a seed, a subspace distribution ξ,
//! named measures, an optional collision setup and an optional inequality
//! manifest. Everything is validated, with the path of the first offending
//! field, before any computation starts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dynamics::{moment_evolution, simulate, write_trajectories_csv, CollisionScene, Trajectory};
use crate::error::{Error, Result};
use crate::inequalities::{
    bonferroni_z, check_bl_split, check_dks, check_efron_stein, check_jensen_improvement, check_linearized_bl,
    check_madiman_barron, tail_ratio_diagnostic, Budget, SlackReport, TestFunction, Verdict,
};
use crate::measures::{MeasureSpec, Univariate};
use crate::rng::derive_seed;
use crate::stats::Estimate;
use crate::subspace::{
    independent_decomposition, mean_projector, IndependentDecomposition, Subspace, SubspaceDistribution,
    SubspaceSampler, DEFAULT_TOL,
};

fn scene_err(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Scene { path: path.into(), message: message.to_string() }
}

fn parse<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { what.to_string() } else { format!("{what}.{path}") };
        scene_err(path, e.into_inner())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative rank threshold for subspace computations.
    pub subspace: f64,
    /// Overall level for the inequality suite.
    pub level: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { subspace: DEFAULT_TOL, level: 0.01 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    ambient_dim: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    tolerances: Tolerances,
    xi: RawXi,
    #[serde(default)]
    measures: BTreeMap<String, RawMeasure>,
    #[serde(default)]
    dynamics: Option<RawDynamics>,
    #[serde(default)]
    suite: Option<Manifest>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawXi {
    #[serde(default)]
    atoms: Option<Vec<RawAtom>>,
    #[serde(default)]
    uniform_grassmannian: Option<Grassmannian>,
    /// Rescale atom weights to sum to one instead of requiring it.
    #[serde(default)]
    normalize: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAtom {
    basis: Vec<Vec<f64>>,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grassmannian {
    dim: usize,
}

/// A measure given inline or by name.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MeasureRef {
    Name(String),
    Inline(Box<RawMeasure>),
}

/// Measure definitions as written in a scene.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawMeasure {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    StandardGaussian {
        #[serde(default)]
        dim: Option<usize>,
    },
    Independent {
        laws: Vec<Univariate>,
    },
    /// One factor per block of the independent decomposition of the scene ξ.
    Product {
        factors: Vec<MeasureRef>,
    },
    /// ξ-mixture of the base measure with the scene ξ.
    Mixture {
        base: MeasureRef,
    },
    Empirical {
        #[serde(default)]
        samples: Option<Vec<Vec<f64>>>,
        /// Headerless numeric CSV, relative to the scene file.
        #[serde(default)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    bath: MeasureRef,
    initial: MeasureRef,
    #[serde(default = "one")]
    rate: f64,
    #[serde(default)]
    times: Option<Vec<f64>>,
    #[serde(default)]
    t_end: Option<f64>,
    #[serde(default)]
    paths: Option<usize>,
}

fn one() -> f64 {
    1.0
}

/// A list of inequality checks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Overrides the scene level when given.
    #[serde(default)]
    pub level: Option<f64>,
    pub checks: Vec<CheckDef>,
}

fn default_tail_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckDef {
    LinearizedBl {
        measure: MeasureRef,
        f: TestFunction,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default)]
        budget: Budget,
    },
    BlSplit {
        measure: MeasureRef,
        nu: MeasureRef,
        #[serde(default)]
        lambda: Option<f64>,
    },
    EfronStein {
        components: Vec<MeasureRef>,
        f: TestFunction,
        #[serde(default)]
        budget: Budget,
    },
    Dks {
        base: MeasureRef,
        g: TestFunction,
        n: usize,
        m: usize,
        #[serde(default)]
        budget: Budget,
    },
    MadimanBarron {
        components: Vec<MeasureRef>,
        cover: Vec<Vec<usize>>,
        r: usize,
        psi: Vec<TestFunction>,
        #[serde(default)]
        budget: Budget,
    },
    JensenImprovement {
        measure: MeasureRef,
        psi: Vec<TestFunction>,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default)]
        budget: Budget,
    },
    TailRatio {
        measure: MeasureRef,
        #[serde(default = "default_tail_samples")]
        samples: usize,
        c: f64,
        cap: f64,
        t_grid: Vec<f64>,
    },
}

impl CheckDef {
    fn report_count(&self) -> usize {
        match self {
            CheckDef::LinearizedBl { .. } => 2,
            _ => 1,
        }
    }
}

/// Resolved collision setup.
#[derive(Debug, Clone)]
pub struct DynamicsSetup {
    pub scene: CollisionScene,
    pub times: Option<Vec<f64>>,
    pub t_end: Option<f64>,
    pub paths: Option<usize>,
}

/// A validated scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub ambient_dim: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub xi: SubspaceDistribution,
    pub measures: BTreeMap<String, MeasureSpec>,
    pub dynamics: Option<DynamicsSetup>,
    pub suite: Option<Manifest>,
    raw_measures: BTreeMap<String, RawMeasure>,
    base_dir: Option<PathBuf>,
}

struct Resolver<'a> {
    raw: &'a BTreeMap<String, RawMeasure>,
    done: BTreeMap<String, MeasureSpec>,
    visiting: BTreeSet<String>,
    xi: &'a SubspaceDistribution,
    n: usize,
    base_dir: Option<&'a Path>,
}

impl Resolver<'_> {
    fn named(&mut self, name: &str, path: &str) -> Result<MeasureSpec> {
        if let Some(m) = self.done.get(name) {
            return Ok(m.clone());
        }
        let raw = self.raw.get(name).ok_or_else(|| scene_err(path, format!("unknown measure '{name}'")))?;
        if !self.visiting.insert(name.to_string()) {
            return Err(scene_err(path, format!("measure '{name}' refers to itself")));
        }
        let built = self.build(raw, &format!("measures.{name}"))?;
        self.visiting.remove(name);
        self.done.insert(name.to_string(), built.clone());
        Ok(built)
    }

    fn reference(&mut self, r: &MeasureRef, path: &str) -> Result<MeasureSpec> {
        match r {
            MeasureRef::Name(name) => self.named(name, path),
            MeasureRef::Inline(raw) => self.build(raw, path),
        }
    }

    fn build(&mut self, raw: &RawMeasure, path: &str) -> Result<MeasureSpec> {
        let wrap = |e: Error| scene_err(path, e);
        match raw {
            RawMeasure::Gaussian { mean, cov } => {
                let n = mean.len();
                if cov.len() != n || cov.iter().any(|r| r.len() != n) {
                    return Err(scene_err(format!("{path}.cov"), format!("covariance must be {n}×{n}")));
                }
                let cov = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
                crate::measures::GaussianMeasure::new(DVector::from_column_slice(mean), cov)
                    .map(MeasureSpec::Gaussian)
                    .map_err(wrap)
            }
            RawMeasure::StandardGaussian { dim } => Ok(MeasureSpec::standard_gaussian(dim.unwrap_or(self.n))),
            RawMeasure::Independent { laws } => MeasureSpec::independent(laws.clone()).map_err(wrap),
            RawMeasure::Product { factors } => {
                let decomposition = independent_decomposition(self.xi).map_err(wrap)?;
                let blocks: Vec<usize> = decomposition.blocks().iter().map(|b| b.dim()).collect();
                if blocks.len() != factors.len() {
                    return Err(scene_err(
                        format!("{path}.factors"),
                        format!("the decomposition has {} blocks but {} factors were given", blocks.len(), factors.len()),
                    ));
                }
                let mut built = Vec::with_capacity(factors.len());
                for (i, (f, d)) in factors.iter().zip(&blocks).enumerate() {
                    let fpath = format!("{path}.factors[{i}]");
                    let m = self.reference(f, &fpath)?;
                    if m.ambient_dim() != *d {
                        return Err(scene_err(fpath, format!("block has dimension {d}, factor has {}", m.ambient_dim())));
                    }
                    built.push(m);
                }
                MeasureSpec::product(decomposition, built).map_err(wrap)
            }
            RawMeasure::Mixture { base } => {
                let bpath = format!("{path}.base");
                let base = self.reference(base, &bpath)?;
                if base.ambient_dim() != self.n {
                    return Err(scene_err(bpath, format!("expected dimension {}, got {}", self.n, base.ambient_dim())));
                }
                MeasureSpec::mixture(self.xi.clone(), base).map_err(wrap)
            }
            RawMeasure::Empirical { samples, csv } => {
                let rows = match (samples, csv) {
                    (Some(s), None) => s.clone(),
                    (None, Some(file)) => read_csv_rows(&self.base_dir.map_or(file.clone(), |d| d.join(file)))
                        .map_err(|e| scene_err(format!("{path}.csv"), e))?,
                    _ => return Err(scene_err(path, "give exactly one of 'samples' or 'csv'")),
                };
                MeasureSpec::empirical(rows.into_iter().map(DVector::from_vec).collect()).map_err(wrap)
            }
        }
    }

    fn with_dim(&mut self, r: &MeasureRef, path: &str, n: usize) -> Result<MeasureSpec> {
        let m = self.reference(r, path)?;
        if m.ambient_dim() != n {
            return Err(scene_err(path, format!("expected dimension {n}, got {}", m.ambient_dim())));
        }
        Ok(m)
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::InvalidInput(format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn build_xi(raw: &RawXi, n: usize, tol: f64) -> Result<SubspaceDistribution> {
    match (&raw.atoms, &raw.uniform_grassmannian) {
        (Some(atoms), None) => {
            if atoms.is_empty() {
                return Err(scene_err("xi.atoms", "at least one atom is required"));
            }
            let mut parsed = Vec::with_capacity(atoms.len());
            for (i, a) in atoms.iter().enumerate() {
                let path = format!("xi.atoms[{i}]");
                let vectors: Vec<DVector<f64>> = a.basis.iter().map(|v| DVector::from_column_slice(v)).collect();
                let s = Subspace::from_spanning_set(&vectors, n, tol).map_err(|e| scene_err(format!("{path}.basis"), e))?;
                parsed.push((s, a.weight));
            }
            let xi = if raw.normalize {
                SubspaceDistribution::normalized(parsed)
            } else {
                SubspaceDistribution::discrete(parsed)
            };
            xi.map_err(|e| scene_err("xi.atoms", e))
        }
        (None, Some(g)) => {
            if g.dim > n {
                return Err(scene_err("xi.uniform_grassmannian.dim", format!("must be at most {n}")));
            }
            Ok(SubspaceDistribution::continuous(n, SubspaceSampler::uniform_grassmannian(n, g.dim)))
        }
        _ => Err(scene_err("xi", "give exactly one of 'atoms' or 'uniform_grassmannian'")),
    }
}

impl Scene {
    /// Parses and validates a scene. `base_dir` anchors relative file paths.
    pub fn from_json(text: &str, base_dir: Option<&Path>, tol: Option<f64>) -> Result<Self> {
        let raw: RawScene = parse(text, "scene")?;
        if raw.ambient_dim == 0 {
            return Err(scene_err("ambient_dim", "must be at least 1"));
        }
        let mut tolerances = raw.tolerances;
        if let Some(t) = tol {
            tolerances.subspace = t;
        }
        if !(tolerances.subspace > 0.0 && tolerances.subspace < 1.0) {
            return Err(scene_err("tolerances.subspace", "must lie in (0, 1)"));
        }
        if !(tolerances.level > 0.0 && tolerances.level < 1.0) {
            return Err(scene_err("tolerances.level", "must lie in (0, 1)"));
        }
        let n = raw.ambient_dim;
        let xi = build_xi(&raw.xi, n, tolerances.subspace)?;
        let mut resolver =
            Resolver { raw: &raw.measures, done: BTreeMap::new(), visiting: BTreeSet::new(), xi: &xi, n, base_dir };
        for name in raw.measures.keys() {
            resolver.named(name, &format!("measures.{name}"))?;
        }
        let dynamics = match &raw.dynamics {
            None => None,
            Some(d) => {
                let bath = resolver.with_dim(&d.bath, "dynamics.bath", n)?;
                let initial = resolver.with_dim(&d.initial, "dynamics.initial", n)?;
                let scene = CollisionScene::new(xi.clone(), bath, initial)
                    .and_then(|s| s.with_rate(d.rate))
                    .map_err(|e| scene_err("dynamics.rate", e))?;
                if let Some(times) = &d.times {
                    if let Some(i) = times.iter().position(|t| !(*t >= 0.0 && t.is_finite())) {
                        return Err(scene_err(format!("dynamics.times[{i}]"), "must be finite and nonnegative"));
                    }
                }
                if let Some(t) = d.t_end {
                    if !(t > 0.0 && t.is_finite()) {
                        return Err(scene_err("dynamics.t_end", "must be positive"));
                    }
                }
                Some(DynamicsSetup { scene, times: d.times.clone(), t_end: d.t_end, paths: d.paths })
            }
        };
        let measures = resolver.done;
        let scene = Scene {
            ambient_dim: n,
            seed: raw.seed,
            tolerances,
            xi,
            measures,
            dynamics,
            suite: raw.suite,
            raw_measures: raw.measures,
            base_dir: base_dir.map(Path::to_path_buf),
        };
        if let Some(m) = &scene.suite {
            scene.resolve_manifest(m, "scene.suite")?;
        }
        Ok(scene)
    }

    pub fn load(path: &Path, tol: Option<f64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| scene_err(path.display().to_string(), e))?;
        Scene::from_json(&text, path.parent(), tol)
    }

    fn resolver(&self) -> Resolver<'_> {
        Resolver {
            raw: &self.raw_measures,
            done: self.measures.clone(),
            visiting: BTreeSet::new(),
            xi: &self.xi,
            n: self.ambient_dim,
            base_dir: self.base_dir.as_deref(),
        }
    }

    fn resolve_manifest(&self, manifest: &Manifest, root: &str) -> Result<Vec<ResolvedCheck>> {
        let mut r = self.resolver();
        let n = self.ambient_dim;
        if let Some(level) = manifest.level {
            if !(level > 0.0 && level < 1.0) {
                return Err(scene_err(format!("{root}.level"), "must lie in (0, 1)"));
            }
        }
        let mut out = Vec::with_capacity(manifest.checks.len());
        for (i, check) in manifest.checks.iter().enumerate() {
            let p = format!("{root}.checks[{i}]");
            let components = |r: &mut Resolver, list: &[MeasureRef]| -> Result<Vec<MeasureSpec>> {
                list.iter().enumerate().map(|(j, c)| r.with_dim(c, &format!("{p}.components[{j}]"), 1)).collect()
            };
            let validate = |f: &TestFunction, dim: usize, field: String| f.validate(dim).map_err(|e| scene_err(field, e));
            let resolved = match check {
                CheckDef::LinearizedBl { measure, f, .. } => {
                    validate(f, n, format!("{p}.f"))?;
                    ResolvedCheck::Measure(r.with_dim(measure, &format!("{p}.measure"), n)?)
                }
                CheckDef::BlSplit { measure, nu, .. } => {
                    let mu = r.with_dim(measure, &format!("{p}.measure"), n)?;
                    let nu = r.with_dim(nu, &format!("{p}.nu"), n)?;
                    ResolvedCheck::Pair(mu, nu)
                }
                CheckDef::EfronStein { components: c, f, .. } => {
                    validate(f, c.len(), format!("{p}.f"))?;
                    ResolvedCheck::Components(components(&mut r, c)?)
                }
                CheckDef::Dks { base, g, .. } => {
                    validate(g, 1, format!("{p}.g"))?;
                    ResolvedCheck::Measure(r.with_dim(base, &format!("{p}.base"), 1)?)
                }
                CheckDef::MadimanBarron { components: c, cover, psi, .. } => {
                    if cover.len() != psi.len() {
                        return Err(scene_err(format!("{p}.psi"), "need one function per cover member"));
                    }
                    for (j, (member, f)) in cover.iter().zip(psi).enumerate() {
                        validate(f, member.len(), format!("{p}.psi[{j}]"))?;
                    }
                    ResolvedCheck::Components(components(&mut r, c)?)
                }
                CheckDef::JensenImprovement { measure, psi, .. } => {
                    for (j, f) in psi.iter().enumerate() {
                        validate(f, n, format!("{p}.psi[{j}]"))?;
                    }
                    ResolvedCheck::Measure(r.with_dim(measure, &format!("{p}.measure"), n)?)
                }
                CheckDef::TailRatio { measure, .. } => {
                    ResolvedCheck::Measure(r.reference(measure, &format!("{p}.measure"))?)
                }
            };
            out.push(resolved);
        }
        Ok(out)
    }

    pub fn measure(&self, name: &str) -> Option<&MeasureSpec> {
        self.measures.get(name)
    }
}

enum ResolvedCheck {
    Measure(MeasureSpec),
    Pair(MeasureSpec, MeasureSpec),
    Components(Vec<MeasureSpec>),
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| scene_err(path.display().to_string(), e))?;
    parse(&text, "manifest")
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Output of [`decompose`].
#[derive(Debug, Clone, Serialize)]
pub struct DecomposeOutcome {
    pub decomposition: IndependentDecomposition,
    pub lambda: f64,
    pub mean_projector: Vec<Vec<f64>>,
    pub summary: String,
}

impl DecomposeOutcome {
    pub fn to_json(&self) -> Value {
        json!({
            "ambient_dim": self.decomposition.ambient_dim,
            "independent": self.decomposition.independent,
            "independent_dims": self.decomposition.independent.iter().map(Subspace::dim).collect::<Vec<_>>(),
            "dependent": self.decomposition.dependent,
            "dependent_dim": self.decomposition.dependent.dim(),
            "lambda": self.lambda,
            "mean_projector": self.mean_projector,
        })
    }
}

pub fn decompose(scene: &Scene) -> Result<DecomposeOutcome> {
    let decomposition = independent_decomposition(&scene.xi)?;
    let fc = mean_projector(&scene.xi)?;
    let k = decomposition.independent.len();
    let dims: BTreeSet<usize> = decomposition.independent.iter().map(Subspace::dim).collect();
    let noun = if k == 1 { "subspace" } else { "subspaces" };
    let head = match (k, dims.len()) {
        (0, _) => format!("0 independent {noun}"),
        (_, 1) => format!("{k} independent {noun} of dim {}", dims.first().expect("one dim")),
        _ => format!("{k} independent {noun}"),
    };
    let summary = format!("{head}, dim(E_dep)={}, λ={:.6}", decomposition.dependent.dim(), fc.lambda);
    Ok(DecomposeOutcome { decomposition, lambda: fc.lambda, mean_projector: matrix_rows(&fc.q), summary })
}

/// Output of [`run_simulation`].
#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub trajectories: Vec<Trajectory>,
    pub moments: Value,
}

const DEFAULT_PATHS: usize = 1000;
const DEFAULT_T_END: f64 = 5.0;

fn empirical_moments(trajectories: &[Trajectory], t: f64, n: usize) -> Value {
    let count = trajectories.len() as f64;
    let states: Vec<&DVector<f64>> = trajectories.iter().map(|p| p.state_at(t)).collect();
    let mean = states.iter().fold(DVector::zeros(n), |acc, x| acc + *x) / count;
    let mut cov = DMatrix::zeros(n, n);
    for x in &states {
        let d = *x - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    let cov = cov / (count - 1.0).max(1.0);
    let se: Vec<f64> = (0..n).map(|i| (cov[(i, i)] / count).sqrt()).collect();
    json!({ "t": t, "mean": vector(&mean), "mean_se": se, "cov": matrix_rows(&cov) })
}

/// Simulates the scene's collision process and tabulates moments. `t_end`
/// and `paths` override the scene's dynamics block.
pub fn run_simulation(scene: &Scene, t_end: Option<f64>, paths: Option<usize>) -> Result<SimulationOutcome> {
    let setup = scene.dynamics.as_ref().ok_or_else(|| scene_err("dynamics", "the scene has no dynamics block"))?;
    let t_end = t_end.or(setup.t_end).unwrap_or(DEFAULT_T_END);
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidInput(format!("t_end must be positive, got {t_end}")));
    }
    let paths = paths.or(setup.paths).unwrap_or(DEFAULT_PATHS);
    if paths == 0 {
        return Err(Error::InvalidInput("at least one path is required".into()));
    }
    let times: Vec<f64> = match &setup.times {
        Some(ts) => ts.iter().copied().filter(|&t| t <= t_end).collect(),
        None => (0..=10).map(|i| t_end * i as f64 / 10.0).collect(),
    };
    let trajectories = simulate(&setup.scene, t_end, paths, derive_seed(scene.seed, "cmd-simulate", 0))?;
    let n = scene.ambient_dim;
    let empirical: Vec<Value> = times.iter().map(|&t| empirical_moments(&trajectories, t, n)).collect();
    let exact = match moment_evolution(&setup.scene, &times) {
        Ok(ev) => Value::Array(
            ev.times
                .iter()
                .zip(ev.means.iter().zip(&ev.covariances))
                .map(|(t, (m, c))| json!({ "t": t, "mean": vector(m), "cov": matrix_rows(c) }))
                .collect(),
        ),
        Err(Error::Precondition(_)) | Err(Error::Unsupported(_)) => Value::Null,
        Err(e) => return Err(e),
    };
    let frame = mean_projector(&scene.xi).ok();
    let moments = json!({
        "seed": scene.seed,
        "paths": paths,
        "t_end": t_end,
        "rate": setup.scene.rate,
        "lambda": frame.as_ref().map(|f| f.lambda),
        "mean_projector": frame.as_ref().map(|f| matrix_rows(&f.q)),
        "empirical": empirical,
        "exact": exact,
    });
    Ok(SimulationOutcome { trajectories, moments })
}

/// Output of [`verify`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub level: f64,
    pub z: f64,
    pub reports: Vec<SlackReport>,
}

impl SuiteOutcome {
    pub fn violated(&self) -> bool {
        self.reports.iter().any(|r| r.verdict == Verdict::Violated)
    }
}

/// Runs every check in `manifest` (or the scene's own suite) with a
/// Bonferroni-adjusted margin.
pub fn verify(scene: &Scene, manifest: Option<&Manifest>) -> Result<SuiteOutcome> {
    let (manifest, root) = match manifest {
        Some(m) => (m, "manifest"),
        None => (scene.suite.as_ref().ok_or_else(|| scene_err("suite", "no manifest given and the scene has no suite"))?, "scene.suite"),
    };
    let resolved = scene.resolve_manifest(manifest, root)?;
    let level = manifest.level.unwrap_or(scene.tolerances.level);
    let total: usize = manifest.checks.iter().map(CheckDef::report_count).sum();
    let z = bonferroni_z(level, total);
    let mut reports = Vec::with_capacity(total);
    for (i, (check, res)) in manifest.checks.iter().zip(resolved).enumerate() {
        let seed = derive_seed(scene.seed, "suite", i as u64);
        let budget = |b: &Budget| Budget { z, ..*b };
        match (check, res) {
            (CheckDef::LinearizedBl { f, lambda, budget: b, .. }, ResolvedCheck::Measure(m)) => {
                reports.extend(check_linearized_bl(&m, &scene.xi, f, *lambda, &budget(b), seed)?);
            }
            (CheckDef::BlSplit { lambda, .. }, ResolvedCheck::Pair(mu, nu)) => {
                let nu = nu.as_gaussian().ok_or_else(|| {
                    scene_err(format!("{root}.checks[{i}].nu"), "must be a Gaussian measure")
                })?;
                reports.push(check_bl_split(&mu, &scene.xi, &nu, *lambda)?);
            }
            (CheckDef::EfronStein { f, budget: b, .. }, ResolvedCheck::Components(c)) => {
                reports.push(check_efron_stein(&c, f, &budget(b), seed)?);
            }
            (CheckDef::Dks { g, n, m, budget: b, .. }, ResolvedCheck::Measure(base)) => {
                reports.push(check_dks(&base, g, *n, *m, &budget(b), seed)?);
            }
            (CheckDef::MadimanBarron { cover, r, psi, budget: b, .. }, ResolvedCheck::Components(c)) => {
                reports.push(check_madiman_barron(&c, cover, *r, psi, &budget(b), seed)?);
            }
            (CheckDef::JensenImprovement { psi, lambda, budget: b, .. }, ResolvedCheck::Measure(m)) => {
                reports.push(check_jensen_improvement(&m, &scene.xi, psi, *lambda, &budget(b), seed)?);
            }
            (CheckDef::TailRatio { samples, c, cap, t_grid, .. }, ResolvedCheck::Measure(m)) => {
                let xs = m.sample(*samples, seed)?;
                let tail = tail_ratio_diagnostic(&xs, *c, *cap, t_grid)?;
                let last = tail.points.iter().rev().find(|p| p.sufficient);
                let lhs = last.map_or(Estimate::exact(f64::NAN), |p| Estimate::exact(p.ratio));
                let mut report = SlackReport::new("tail_ratio", lhs, Estimate::exact(*cap), z, json!(tail));
                report.verdict = tail.verdict;
                reports.push(report);
            }
            _ => unreachable!("manifest entries resolve to their own shapes"),
        }
    }
    Ok(SuiteOutcome { level, z, reports })
}

/// Writes pretty-printed JSON followed by a newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = fs::File::create(path)?;
    write_trajectories_csv(trajectories, std::io::BufWriter::new(file))
}
