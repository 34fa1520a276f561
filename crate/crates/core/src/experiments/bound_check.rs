//! Frequencies of low feasibility for chain-constrained SAA problems,
//! compared with the binomial and Chernoff bounds over an `(N, alpha)` grid.
//!
//! Each trial draws one sample of size `max N` and solves the SAA problem on
//! its prefixes, so the sample sizes within a trial are nested.

use serde_json::json;

use crate::chain::{dof_domain, sample_thresholds};
use crate::rng::{SeedSpec, StreamRole};
use crate::saa::{assemble_with_thresholds, dof_of_solution, solve_convex, SaaError, StochasticProblem};

use super::{bound_pair, exceeds, par_trials, Cell, Counter, ExperimentConfig, ExperimentError, ExperimentOutput, Grid, Plot, Table, TrialRecord};

/// Outcome of one SAA solve at one sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcome {
    /// Chain lower bound `P{l_k >= min_i l_k(xi^i) for all k}`.
    pub dfrak_r: f64,
    /// Monte Carlo degree of feasibility of the SAA domain.
    pub d_hat: Option<f64>,
    /// `d(x*)`, absent when the solve failed.
    pub d_xstar: Option<f64>,
    pub flags: Vec<&'static str>,
    /// A hard solver error (not infeasibility).
    pub failed: bool,
}

/// Per-trial outcomes for every `N` in `ns` (in that order).
pub fn run_trial(
    problem: &StochasticProblem,
    ns: &[usize],
    domain_draws: u64,
    tol: f64,
    seed: &SeedSpec,
) -> Result<Vec<PointOutcome>, ExperimentError> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    let full = match &problem.domain {
        Some(spec) => Some(sample_thresholds(spec, n_max, seed).map_err(|e| ExperimentError::Config(e.to_string()))?),
        None => None,
    };
    let mut out = Vec::with_capacity(ns.len());
    for (j, &n) in ns.iter().enumerate() {
        let thresholds = full.as_ref().map(|s| s.prefix(n));
        let (dfrak_r, d_hat) = match (&problem.domain, &thresholds) {
            (Some(spec), Some(t)) => {
                let r = spec.threshold_probability(&t.minima).map_err(|e| ExperimentError::Config(e.to_string()))?;
                let d = if domain_draws > 0 {
                    let s = seed.with_stage(j as u32 + 1);
                    Some(dof_domain(spec, t, domain_draws, &s).map_err(|e| ExperimentError::Config(e.to_string()))?.value)
                } else {
                    None
                };
                (r, d)
            }
            _ => (1.0, domain_draws.gt(&0).then_some(1.0)),
        };
        let mut flags = Vec::new();
        let mut failed = false;
        let d_xstar = match assemble_with_thresholds(problem, thresholds, n, seed).and_then(|inst| solve_convex(&inst, tol)) {
            Ok(sol) => {
                if sol.gap > tol {
                    flags.push("solver_gap");
                }
                Some(dof_of_solution(problem, &sol.x).map_err(|e| ExperimentError::Config(e.to_string()))?.value)
            }
            Err(SaaError::SaaInfeasible) => {
                flags.push("saa_infeasible");
                None
            }
            Err(SaaError::IterationCap { .. }) => {
                flags.push("solver_gap");
                failed = true;
                None
            }
            Err(e) => {
                log::warn!("trial {} N={n}: {e}", seed.trial_index);
                flags.push("solver_error");
                failed = true;
                None
            }
        };
        out.push(PointOutcome {
            dfrak_r,
            d_hat,
            d_xstar,
            flags,
            failed,
        });
    }
    Ok(out)
}

/// Aggregated frequencies at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub n: usize,
    pub alpha: f64,
    pub bound_binom: f64,
    pub bound_chernoff: Option<f64>,
    pub dfrak_r: Counter,
    pub d_hat: Counter,
    pub d_xstar: Counter,
    pub censored: u64,
}

impl GridPoint {
    /// True when `dfrak_r` or `d(x*)` exceeds the bound by more than three
    /// standard errors.
    pub fn violated(&self) -> bool {
        exceeds(self.dfrak_r.estimate(), self.bound_binom) || exceeds(self.d_xstar.estimate(), self.bound_binom)
    }
}

/// Builds grid points from per-trial outcomes (`outcomes[trial][n_index]`).
pub fn aggregate(m: usize, grid: &Grid, outcomes: &[Vec<PointOutcome>]) -> Result<Vec<GridPoint>, ExperimentError> {
    let mut points = Vec::new();
    for (j, &n) in grid.n.iter().enumerate() {
        for &alpha in &grid.alpha {
            let (bound_binom, bound_chernoff) = bound_pair(m, n, alpha)?;
            let mut p = GridPoint {
                n,
                alpha,
                bound_binom,
                bound_chernoff,
                dfrak_r: Counter::default(),
                d_hat: Counter::default(),
                d_xstar: Counter::default(),
                censored: 0,
            };
            let level = 1.0 - alpha;
            for trial in outcomes {
                let o = &trial[j];
                p.dfrak_r.record(o.dfrak_r < level);
                if let Some(d) = o.d_hat {
                    p.d_hat.record(d < level);
                }
                match o.d_xstar {
                    Some(d) => p.d_xstar.record(d < level),
                    None => p.censored += 1,
                }
            }
            points.push(p);
        }
    }
    Ok(points)
}

pub(crate) const SUMMARY_COLUMNS: [&str; 15] = [
    "experiment",
    "N",
    "alpha",
    "trials",
    "censored",
    "freq_dfrak_r",
    "stderr_dfrak_r",
    "freq_D_hat",
    "stderr_D_hat",
    "freq_d_xstar",
    "stderr_d_xstar",
    "bound_binom",
    "bound_chernoff",
    "violation",
    "m",
];

/// Summary table, plot and violation list shared with the two-stage runner.
pub(crate) fn summarize(label: &str, m: usize, trials: usize, points: &[GridPoint]) -> (Table, Plot, Vec<serde_json::Value>) {
    let mut summary = Table::new(&SUMMARY_COLUMNS);
    let mut violations = Vec::new();
    for p in points {
        let est = |c: &Counter| c.estimate();
        let (fr, fd, fx) = (est(&p.dfrak_r), est(&p.d_hat), est(&p.d_xstar));
        summary.push(vec![
            Cell::Text(label.to_string()),
            Cell::Int(p.n as u64),
            Cell::Float(p.alpha),
            Cell::Int(trials as u64),
            Cell::Int(p.censored),
            Cell::opt(fr.map(|e| e.value)),
            Cell::opt(fr.map(|e| e.stderr)),
            Cell::opt(fd.map(|e| e.value)),
            Cell::opt(fd.map(|e| e.stderr)),
            Cell::opt(fx.map(|e| e.value)),
            Cell::opt(fx.map(|e| e.stderr)),
            Cell::Float(p.bound_binom),
            Cell::opt(p.bound_chernoff),
            Cell::Text(p.violated().to_string()),
            Cell::Int(m as u64),
        ]);
        if p.violated() {
            violations.push(json!({
                "N": p.n,
                "alpha": p.alpha,
                "freq_dfrak_r": fr.map(|e| e.value),
                "freq_d_xstar": fx.map(|e| e.value),
                "bound_binom": p.bound_binom,
            }));
        }
    }
    let plot = Plot::from_table(
        &format!("{label}: low-feasibility frequencies vs bounds"),
        &summary,
        "N",
        &["freq_dfrak_r", "freq_D_hat", "freq_d_xstar", "bound_binom", "bound_chernoff"],
        Some("alpha"),
    );
    (summary, plot, violations)
}

/// Trial rows in `(N, alpha, trial)` order.
pub(crate) fn trial_records(label: &str, grid: &Grid, points: &[GridPoint], outcomes: &[Vec<PointOutcome>], seed: u64) -> Vec<TrialRecord> {
    let mut records = Vec::with_capacity(points.len() * outcomes.len());
    let na = grid.alpha.len();
    for (j, &n) in grid.n.iter().enumerate() {
        for (a, &alpha) in grid.alpha.iter().enumerate() {
            let p = &points[j * na + a];
            for (t, trial) in outcomes.iter().enumerate() {
                let o = &trial[j];
                records.push(TrialRecord {
                    experiment: label.to_string(),
                    trial: t as u64,
                    n: n as u64,
                    alpha: Some(alpha),
                    dfrak_r: Some(o.dfrak_r),
                    d_hat: o.d_hat,
                    d_xstar: o.d_xstar,
                    bound_binom: Some(p.bound_binom),
                    bound_chernoff: p.bound_chernoff,
                    flags: o.flags.clone(),
                    seed,
                });
            }
        }
    }
    records
}

/// Runs all trials and aggregates them; used by the runner and by tests.
pub fn simulate(
    problem: &StochasticProblem,
    grid: &Grid,
    trials: usize,
    domain_draws: u64,
    tol: f64,
    master_seed: u64,
) -> Result<(Vec<GridPoint>, Vec<Vec<PointOutcome>>), ExperimentError> {
    let m = problem.domain.as_ref().map_or(1, |d| d.order());
    let outcomes: Vec<Vec<PointOutcome>> = par_trials(trials, |t| {
        run_trial(problem, &grid.n, domain_draws, tol, &SeedSpec::new(master_seed, t, 0, StreamRole::Threshold))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let points = aggregate(m, grid, &outcomes)?;
    Ok((points, outcomes))
}

pub(crate) fn run(
    config: &ExperimentConfig,
    problem: &StochasticProblem,
    grid: &Grid,
    domain_draws: u64,
    tol: f64,
) -> Result<ExperimentOutput, ExperimentError> {
    let label = config.label();
    let m = problem.domain.as_ref().map_or(1, |d| d.order());
    let (points, outcomes) = simulate(problem, grid, config.trials, domain_draws, tol, config.seed)?;
    let failures = outcomes.iter().flatten().filter(|o| o.failed).count() as u64;
    let (summary, plot, violations) = summarize(&label, m, config.trials, &points);
    let records = trial_records(&label, grid, &points, &outcomes, config.seed);
    Ok(ExperimentOutput {
        label: label.clone(),
        trials: super::trial_table(&records),
        summary,
        multistage: None,
        plot,
        report: json!({
            "experiment": label,
            "kind": "bound_check",
            "m": m,
            "trials": config.trials,
            "grid_points": points.len(),
            "violations": violations,
            "solver_failures": failures,
        }),
        solver_failures: failures,
    })
}
