use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitkit_core::inequalities::Verdict;
use splitkit_core::scene::{self, Scene};
use splitkit_core::Error;

/// Independent decompositions, collision dynamics and inequality checks
/// driven by JSON scene files.
#[derive(Parser, Debug)]
#[command(name = "splitkit", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Scene file.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Overrides the scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the subspace rank tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Worker threads.
    #[arg(long, global = true, env = "SPLITKIT_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the independent decomposition and write decomposition.json.
    Decompose,
    /// Simulate the collision process; writes trajectories.csv and moments.json.
    Simulate {
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
    /// Run an inequality manifest; writes report.json.
    Verify {
        /// Manifest file; defaults to the scene's own suite.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

const EXIT_VIOLATION: u8 = 1;
const EXIT_ERROR: u8 = 2;

fn run(cli: &Cli) -> Result<u8, Error> {
    let path = cli
        .common
        .scene
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("--scene is required".into()))?;
    let mut scene = Scene::load(path, cli.common.tol)?;
    if let Some(seed) = cli.common.seed {
        scene.seed = seed;
    }
    let manifest = match &cli.command {
        Command::Verify { manifest: Some(m) } => Some(scene::load_manifest(m)?),
        _ => None,
    };
    fs::create_dir_all(&cli.common.out)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Decompose => {
            let result = scene::decompose(&scene)?;
            println!("{}", result.summary);
            for (i, s) in result.decomposition.independent.iter().enumerate() {
                println!("E_{} (dim {}): {:?}", i + 1, s.dim(), basis_rows(s));
            }
            let dep = &result.decomposition.dependent;
            println!("E_dep (dim {}): {:?}", dep.dim(), basis_rows(dep));
            scene::write_json(&out.join("decomposition.json"), &result.to_json())?;
            Ok(0)
        }
        Command::Simulate { paths, t_end } => {
            let result = scene::run_simulation(&scene, *t_end, *paths)?;
            scene::write_trajectories(&out.join("trajectories.csv"), &result.trajectories)?;
            scene::write_json(&out.join("moments.json"), &result.moments)?;
            let jumps: usize = result.trajectories.iter().map(|t| t.jumps()).sum();
            println!("simulated {} paths with {jumps} collisions", result.trajectories.len());
            Ok(0)
        }
        Command::Verify { .. } => {
            let result = scene::verify(&scene, manifest.as_ref())?;
            println!("level {} (margin z = {:.4})", result.level, result.z);
            for r in &result.reports {
                let verdict = match r.verdict {
                    Verdict::Holds => "holds",
                    Verdict::Violated => "VIOLATED",
                    Verdict::Inconclusive => "inconclusive",
                };
                let tight = if r.tight { " [tight]" } else { "" };
                println!(
                    "{}: {verdict}{tight} lhs={:.6}±{:.2e} rhs={:.6}±{:.2e} slack={:.3e}",
                    r.name, r.lhs.value, r.lhs.se, r.rhs.value, r.rhs.se, r.slack
                );
            }
            scene::write_json(&out.join("report.json"), &result.reports)?;
            Ok(if result.violated() { EXIT_VIOLATION } else { 0 })
        }
    }
}

fn basis_rows(s: &splitkit_core::subspace::Subspace) -> Vec<Vec<f64>> {
    s.basis().column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_ERROR);
        }
        builder = builder.num_threads(jobs);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
