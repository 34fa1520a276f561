//! `feaslab` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feaslab::bounds::{binomial_tail, chernoff_estimate};
use feaslab::experiments::{self, ExperimentConfig, ExperimentError};
use feaslab::polyhedral::{enumerate_rays, Matrix, PolyError};
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "feaslab", version, about = "Feasibility of sample average approximation solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the binomial-tail bound and the Chernoff estimate.
    Bounds {
        #[arg(long)]
        m: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        alpha: f64,
    },
    /// Enumerate extreme rays of `{r : W^T r >= 0}` for a JSON matrix file.
    Rays {
        #[arg(long)]
        matrix: PathBuf,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = match e {
            ExperimentError::Config(_) => EXIT_CONFIG,
            ExperimentError::Solver(_) => EXIT_SOLVER,
            ExperimentError::Io { .. } => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

fn poly_failure(e: PolyError) -> Failure {
    let code = match e {
        PolyError::Shape(_) | PolyError::SizeLimit(_) => EXIT_CONFIG,
        PolyError::CyclingGuard(_) | PolyError::Degenerate(_) | PolyError::UnboundedSecondStage => EXIT_SOLVER,
    };
    Failure::new(code, e.to_string())
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("cannot read {}: {e}", path.display())))
}

fn run(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>) -> Result<(), Failure> {
    let text = read(&config)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--threads must be at least 1"));
    }
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    log::info!("running {} ({} trials, seed {}, {threads} threads)", cfg.label(), cfg.trials, cfg.seed);
    let output = experiments::run(&cfg, threads)?;
    let files = experiments::write_outputs(&output, &dir)?;
    println!("{}", serde_json::to_string_pretty(&json!({ "report": output.report, "files": files })).unwrap_or_default());
    if output.solver_failures > 0 {
        return Err(Failure::new(
            EXIT_SOLVER,
            format!("{} solves failed; outputs were written with those trials flagged", output.solver_failures),
        ));
    }
    Ok(())
}

fn bounds(m: u64, n: u64, alpha: f64) -> Result<(), Failure> {
    let tail = binomial_tail(m, n, alpha).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let chernoff = chernoff_estimate(m, n, alpha).ok();
    println!(
        "{}",
        json!({ "m": m, "N": n, "alpha": alpha, "binomial_tail": tail, "chernoff_estimate": chernoff })
    );
    Ok(())
}

fn rays(matrix: PathBuf) -> Result<(), Failure> {
    let text = read(&matrix)?;
    let w: Matrix = serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", matrix.display())))?;
    let gen = enumerate_rays(&w).map_err(poly_failure)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "dim": gen.dim,
            "ray_count": gen.rays.len(),
            "rays": gen.rays,
            "lineality": gen.lineality,
        }))
        .unwrap_or_default()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => run(config, out, seed, threads),
        Command::Bounds { m, n, alpha } => bounds(m, n, alpha),
        Command::Rays { matrix } => rays(matrix),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
