//! `nimble-mini`: simulate scenes, export and check step Jacobians, time them
//! against finite differences and run trajectory optimization.
//!
//! Exit codes: 0 success, 1 usage/parse/engine error, 2 gradient check
//! failure, 3 optimizer divergence.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use nimble_mini::benchmark::{self, BenchmarkConfig};
use nimble_mini::diffstep::{assemble, linearize_unchecked, step_jacobians, JacobianOptions, TiePolicy};
use nimble_mini::fdcheck::{check_step, Oracle};
use nimble_mini::format::{float, matrix_block};
use nimble_mini::scenes::{trajectory_csv, Method, Scene};
use nimble_mini::trajopt::{initial_controls, optimize, GradientMode, Objective, OptimizeConfig};
use nimble_mini::Error;

#[derive(Parser)]
#[command(name = "nimble-mini", version, about = "Differentiable rigid-body simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Step a scene and write its trajectory as CSV.
    Simulate {
        scene: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Accepted for uniformity; stepping involves no randomness.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write the step Jacobians of one or more scenes as labeled matrix blocks.
    Jacobian {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        /// Differentiate the step that starts after this many steps.
        #[arg(long, default_value_t = 0)]
        at_step: usize,
        #[arg(long, value_enum)]
        check: Option<CheckArg>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Include the inertial-parameter blocks.
        #[arg(long)]
        inertial: bool,
        /// Break classification ties at random with this seed instead of
        /// treating tied rows as clamping.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Time analytic Jacobians against central and Ridders differencing.
    Benchmark {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long)]
        skip_ridders: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Optimize the controls of a scene's task.
    Optimize {
        scene: PathBuf,
        #[arg(long)]
        complementarity_aware: bool,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Break classification ties at random with this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Loss curve output.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Optimized controls output.
        #[arg(long)]
        controls: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Central,
    Ridders,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sgd,
    MultipleShooting,
}

enum Failure {
    Error(String),
    Check,
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            e => Failure::Error(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Simulate { scene, steps, seed: _, out } => simulate(&scene, steps, out.as_deref()),
        Command::Jacobian { scenes, at_step, check, tol, inertial, seed, out } => {
            jacobian(&scenes, at_step, check, tol, inertial, seed, out.as_deref())
        }
        Command::Benchmark { scenes, repetitions, warmup, skip_ridders, out } => {
            bench(&scenes, BenchmarkConfig { repetitions, warmup, skip_ridders }, out.as_deref())
        }
        Command::Optimize { scene, complementarity_aware, method, iterations, seed, out, controls } => run_optimize(
            &scene,
            complementarity_aware,
            method,
            iterations,
            seed,
            out.as_deref(),
            controls.as_deref(),
        ),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load(path: &Path) -> Result<Scene, Failure> {
    Scene::load(path).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Error(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::Error(e.to_string())),
    }
}

/// Worker count for commands that fan out over scenes.
fn threads() -> usize {
    std::env::var("NIMBLE_MINI_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn simulate(path: &Path, steps: usize, out: Option<&Path>) -> Outcome {
    let scene = load(path)?;
    let controls = vec![scene.initial.tau.clone(); steps];
    let contexts = scene.world.rollout(&scene.initial, &controls)?;
    emit(out, &trajectory_csv(&contexts, scene.world.dofs()))
}

struct JacobianJob {
    text: String,
    warnings: Vec<String>,
    passed: bool,
}

fn jacobian_one(
    path: &Path,
    at_step: usize,
    check: Option<CheckArg>,
    tol: f64,
    inertial: bool,
    seed: Option<u64>,
) -> Result<JacobianJob, Failure> {
    let scene = load(path)?;
    let world = &scene.world;
    let mut state = scene.initial.clone();
    for k in 0..at_step {
        state = world.step_state(&state).map_err(|e| Error::AtStep { step: k, source: Box::new(e) })?;
    }
    let ctx = world.step(&state, None)?;
    let opts = JacobianOptions {
        tie_policy: seed.map(|seed| TiePolicy::Random { seed }),
        inertial,
        ..Default::default()
    };
    let mut warnings = Vec::new();
    let jac = match step_jacobians(world, &ctx, &opts) {
        Err(Error::KindBoundary { contact, margin }) => {
            warnings.push(format!(
                "{}: contact {contact} is {margin:e} from a contact-kind boundary (KindBoundary); Jacobians are one-sided",
                path.display()
            ));
            let mut lin = linearize_unchecked(world, &ctx)?;
            assemble(world, &ctx, &mut lin, &opts)?
        }
        other => other?,
    };
    let mut text = format!("# {} step {at_step}\n", path.display());
    for (label, m) in jac.blocks() {
        text.push_str(&matrix_block(label, m));
    }
    let mut passed = true;
    if let Some(c) = check {
        let oracle = match c {
            CheckArg::Central => Oracle::Central,
            CheckArg::Ridders => Oracle::Ridders,
        };
        let report = check_step(world, &ctx.state, &jac, oracle, tol)?;
        passed = report.pass();
        text.push('\n');
        text.push_str(&report.to_csv());
    }
    Ok(JacobianJob { text, warnings, passed })
}

fn jacobian(
    paths: &[PathBuf],
    at_step: usize,
    check: Option<CheckArg>,
    tol: f64,
    inertial: bool,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Outcome {
    let mut results: Vec<Option<Result<JacobianJob, Failure>>> = (0..paths.len()).map(|_| None).collect();
    for chunk in paths.iter().zip(results.iter_mut()).collect::<Vec<_>>().chunks_mut(threads()) {
        std::thread::scope(|s| {
            for (path, slot) in chunk.iter_mut() {
                s.spawn(move || **slot = Some(jacobian_one(path, at_step, check, tol, inertial, seed)));
            }
        });
    }
    let mut text = String::new();
    let mut passed = true;
    for r in results {
        let job = r.expect("every scene processed")?;
        for w in &job.warnings {
            eprintln!("warning: {w}");
        }
        passed &= job.passed;
        text.push_str(&job.text);
    }
    emit(out, &text)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn bench(paths: &[PathBuf], cfg: BenchmarkConfig, out: Option<&Path>) -> Outcome {
    let mut rows = Vec::new();
    for path in paths {
        let scene = load(path)?;
        rows.extend(benchmark::benchmark_scene(&scene_name(path), &scene.world, &scene.initial, &cfg)?);
    }
    emit(out, &benchmark::to_csv(&rows))
}

fn run_optimize(
    path: &Path,
    aware: bool,
    method: Option<MethodArg>,
    iterations: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
    controls_out: Option<&Path>,
) -> Outcome {
    let scene = load(path)?;
    let task = scene
        .desc
        .task
        .clone()
        .ok_or_else(|| Failure::Error(format!("{}: scene has no task", path.display())))?;
    let mode = if aware { GradientMode::ComplementarityAware } else { GradientMode::Standard };
    let mut cfg = OptimizeConfig::from_task(&task, mode);
    if let Some(m) = method {
        cfg.method = match m {
            MethodArg::Sgd => Method::Sgd,
            MethodArg::MultipleShooting => Method::MultipleShooting,
        };
    }
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    if let Some(seed) = seed {
        cfg.tie_policy = Some(TiePolicy::Random { seed });
    }
    let objective = Objective::from_task(&task);
    let res = optimize(&scene.world, &scene.initial, &objective, initial_controls(&task), &cfg)?;
    let mut curve = String::from("iteration,loss\n");
    for (k, l) in res.losses.iter().enumerate() {
        curve.push_str(&format!("{k},{}\n", float(*l)));
    }
    emit(out, &curve)?;
    if let Some(p) = controls_out {
        fs::write(p, controls_csv(&res.controls)).map_err(|e| Failure::Error(format!("{}: {e}", p.display())))?;
    }
    if let Some(d) = res.defect {
        eprintln!("final defect {}", float(d));
    }
    Ok(())
}

fn controls_csv(controls: &[DVector<f64>]) -> String {
    let n = controls.first().map_or(0, |u| u.len());
    let mut s = String::from("step");
    for i in 0..n {
        s.push_str(&format!(",tau{i}"));
    }
    s.push('\n');
    for (k, u) in controls.iter().enumerate() {
        s.push_str(&k.to_string());
        for v in u.iter() {
            s.push(',');
            s.push_str(&float(*v));
        }
        s.push('\n');
    }
    s
}
