//! Config-driven experiments: simulation runners, aggregation and output.
//!
//! Every trial draws from its own counter-based streams keyed by
//! `(master seed, trial index, stage, role)`, and results are collected in
//! trial order. The written files therefore do not depend on the number of
//! worker threads.

pub mod active;
pub mod bound_check;
pub mod config;
pub mod decay;
pub mod multistage;
pub mod output;
pub mod tightness;
pub mod two_stage;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bounds::{binomial_tail, chernoff_estimate};
use crate::stats::Estimate;

pub use config::{ExperimentConfig, ExperimentKind, Grid, TightnessCell};
pub use output::{svg_columns, Cell, Plot, Series, Table};

/// Header of the per-trial CSV.
pub const TRIAL_COLUMNS: [&str; 11] = [
    "experiment",
    "trial",
    "N",
    "alpha",
    "dfrak_r",
    "D_hat",
    "d_xstar",
    "bound_binom",
    "bound_chernoff",
    "flags",
    "seed",
];

/// Header of the per-tree multistage CSV.
pub const MULTISTAGE_COLUMNS: [&str; 4] = ["trial", "t", "min_path_dof", "bound"];

/// Number of standard errors allowed above a bound before a grid point
/// counts as a violation.
pub const VIOLATION_Z: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("I/O error at {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

/// One row of the trial CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub experiment: String,
    pub trial: u64,
    pub n: u64,
    pub alpha: Option<f64>,
    pub dfrak_r: Option<f64>,
    pub d_hat: Option<f64>,
    pub d_xstar: Option<f64>,
    pub bound_binom: Option<f64>,
    pub bound_chernoff: Option<f64>,
    pub flags: Vec<&'static str>,
    pub seed: u64,
}

impl TrialRecord {
    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.experiment.clone()),
            Cell::Int(self.trial),
            Cell::Int(self.n),
            Cell::opt(self.alpha),
            Cell::opt(self.dfrak_r),
            Cell::opt(self.d_hat),
            Cell::opt(self.d_xstar),
            Cell::opt(self.bound_binom),
            Cell::opt(self.bound_chernoff),
            Cell::Text(self.flags.join("|")),
            Cell::Int(self.seed),
        ]
    }
}

/// Builds the trial table from records already in output order.
pub fn trial_table(records: &[TrialRecord]) -> Table {
    let mut t = Table::new(&TRIAL_COLUMNS);
    for r in records {
        t.push(r.cells());
    }
    t
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub label: String,
    pub trials: Table,
    pub summary: Table,
    pub multistage: Option<Table>,
    pub plot: Plot,
    pub report: serde_json::Value,
    /// Trials that ended in a hard solver error (not infeasibility).
    pub solver_failures: u64,
}

/// Runs `config` on a pool of `threads` workers.
pub fn run(config: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput, ExperimentError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &config.kind {
        ExperimentKind::Tightness { cells } => tightness::run(config, cells),
        ExperimentKind::BoundCheck {
            problem,
            grid,
            domain_draws,
            tol,
        } => bound_check::run(config, problem, grid, *domain_draws, *tol),
        ExperimentKind::TwoStage { problem, grid, dof_draws } => two_stage::run(config, problem, grid, *dof_draws),
        ExperimentKind::InteriorDecay { problem, n_values, tol } => decay::run(config, problem, n_values, *tol),
        ExperimentKind::ActiveConstraints {
            problem,
            n_values,
            alpha,
            active,
            perturbation,
            tol,
        } => active::run(config, problem, n_values, alpha, active, perturbation.as_deref(), *tol),
        ExperimentKind::Multistage {
            problem,
            branching,
            alpha,
            dof_draws,
        } => multistage::run(config, problem, branching, alpha, *dof_draws),
    })
}

/// Maps `f` over `0..n` on the current pool, keeping index order.
pub(crate) fn par_trials<T: Send>(n: usize, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..n as u64).into_par_iter().map(f).collect()
}

/// Paths of the files written by [`write_outputs`].
#[derive(Debug, Clone, Serialize)]
pub struct WrittenFiles {
    pub trials_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub multistage_csv: Option<PathBuf>,
    pub plot_svg: PathBuf,
    pub plot_dat: PathBuf,
    pub report_json: PathBuf,
}

/// Writes CSV, plot and report files into `dir`, creating it if needed.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<WrittenFiles, ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let file = |suffix: &str| dir.join(format!("{}_{suffix}", out.label));
    let trials_csv = output::write_file(&file("trials.csv"), &out.trials.to_csv()?)?;
    let summary_csv = output::write_file(&file("summary.csv"), &out.summary.to_csv()?)?;
    let multistage_csv = match &out.multistage {
        Some(t) => Some(output::write_file(&file("multistage.csv"), &t.to_csv()?)?),
        None => None,
    };
    let plot_svg = output::write_file(&file("plot.svg"), out.plot.to_svg().as_bytes())?;
    let plot_dat = output::write_file(&file("plot.dat"), out.plot.to_dat().as_bytes())?;
    let report = serde_json::to_vec_pretty(&out.report).map_err(|e| ExperimentError::Io {
        path: file("report.json"),
        message: e.to_string(),
    })?;
    let report_json = output::write_file(&file("report.json"), &report)?;
    Ok(WrittenFiles {
        trials_csv,
        summary_csv,
        multistage_csv,
        plot_svg,
        plot_dat,
        report_json,
    })
}

/// `binomial_tail` and, where its precondition holds, `chernoff_estimate`.
pub(crate) fn bound_pair(m: usize, n: usize, alpha: f64) -> Result<(f64, Option<f64>), ExperimentError> {
    let binom = binomial_tail(m as u64, n as u64, alpha).map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok((binom, chernoff_estimate(m as u64, n as u64, alpha).ok()))
}

/// Hit counter for one event at one grid point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counter {
    pub hits: u64,
    pub total: u64,
}

impl Counter {
    pub fn record(&mut self, hit: bool) {
        self.total += 1;
        self.hits += hit as u64;
    }

    pub fn estimate(&self) -> Option<Estimate> {
        (self.total > 0).then(|| Estimate::frequency(self.hits, self.total))
    }
}

/// `freq - z * stderr > bound`.
pub(crate) fn exceeds(e: Option<Estimate>, bound: f64) -> bool {
    e.is_some_and(|e| e.value - VIOLATION_Z * e.stderr > bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_and_exceeds() {
        let mut c = Counter::default();
        for i in 0..100 {
            c.record(i < 30);
        }
        let e = c.estimate().unwrap();
        assert_eq!(e.value, 0.3);
        assert!(!exceeds(Some(e), 0.25));
        assert!(exceeds(Some(e), 0.1));
        assert!(!exceeds(None, 0.0));
    }

    #[test]
    fn trial_record_renders_schema() {
        let r = TrialRecord {
            experiment: "x".into(),
            trial: 3,
            n: 10,
            alpha: Some(0.05),
            dfrak_r: Some(0.9),
            d_hat: None,
            d_xstar: Some(1.0),
            bound_binom: Some(0.5),
            bound_chernoff: None,
            flags: vec!["a", "b"],
            seed: 7,
        };
        let t = trial_table(&[r]);
        let csv = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(
            csv,
            "experiment,trial,N,alpha,dfrak_r,D_hat,d_xstar,bound_binom,bound_chernoff,flags,seed\nx,3,10,0.05,0.9,,1,0.5,,a|b,7\n"
        );
    }
}
