//! Bound check for two-stage LPs with sampled right-hand sides.
//!
//! The recourse cone `{r : W^T r >= 0}` is enumerated once; each of its
//! extreme rays is a chain `r^T T x <= r^T h`, and each lineality direction
//! contributes two. When every ray reads one distinct component of `h` and
//! there is no lineality the thresholds are independent scalars and both
//! degrees of feasibility are exact; otherwise they are estimated from fresh
//! draws.

use serde_json::json;

use crate::chain::ChainDomainSpec;
use crate::polyhedral::{enumerate_rays, farkas_feasible, ConeGenerators};
use crate::polyhedral::matrix::dot;
use crate::rng::{SeedSpec, StreamRole};
use crate::saa::{solve_two_stage, SaaError, TwoStageInstance, TwoStageProblem};

use super::bound_check::{aggregate, summarize, trial_records, PointOutcome};
use super::{par_trials, ExperimentConfig, ExperimentError, ExperimentOutput, Grid};

/// Chain order induced by the recourse cone.
pub fn induced_order(gen: &ConeGenerators) -> usize {
    gen.rays.len() + 2 * gen.lineality.len()
}

/// Draws `count` right-hand sides from the `Oracle` stream of `seed`.
fn fresh_draws(problem: &TwoStageProblem, count: u64, seed: &SeedSpec) -> Vec<Vec<f64>> {
    let mut rng = seed.with_role(StreamRole::Oracle).rng();
    (0..count).map(|_| problem.h.iter().map(|law| law.sample(&mut rng)).collect()).collect()
}

/// Monte Carlo `P{r^T h >= min_i r^T h^i for all rays}` (lineality
/// directions must reproduce the common sampled value).
fn dfrak_r_mc(gen: &ConeGenerators, minima: &[f64], lineality_values: &[Option<f64>], draws: &[Vec<f64>]) -> f64 {
    let hits = draws
        .iter()
        .filter(|h| {
            gen.rays.iter().zip(minima).all(|(r, m)| dot(r, h) >= *m)
                && gen
                    .lineality
                    .iter()
                    .zip(lineality_values)
                    .all(|(l, v)| v.is_some_and(|v| (dot(l, h) - v).abs() <= 1e-9))
        })
        .count();
    hits as f64 / draws.len() as f64
}

fn trial(
    problem: &TwoStageProblem,
    gen: &ConeGenerators,
    induced: Option<&ChainDomainSpec>,
    ns: &[usize],
    dof_draws: u64,
    seed: &SeedSpec,
) -> Result<Vec<PointOutcome>, ExperimentError> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    let full = TwoStageInstance::sample(problem, n_max, seed).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let d = problem.h.len();
    let mut out = Vec::with_capacity(ns.len());
    for (j, &n) in ns.iter().enumerate() {
        let inst = TwoStageInstance {
            problem,
            h: full.h[..n * d].to_vec(),
            n,
        };
        let minima: Vec<f64> = gen
            .rays
            .iter()
            .map(|r| (0..n).map(|i| dot(r, inst.scenario(i))).fold(f64::INFINITY, f64::min))
            .collect();
        let lineality_values: Vec<Option<f64>> = gen
            .lineality
            .iter()
            .map(|l| {
                let v0 = dot(l, inst.scenario(0));
                (0..n).all(|i| (dot(l, inst.scenario(i)) - v0).abs() <= 1e-9).then_some(v0)
            })
            .collect();
        let draws = match induced {
            Some(_) => Vec::new(),
            None => fresh_draws(problem, dof_draws, &seed.with_stage(j as u32 + 1)),
        };
        let dfrak_r = match induced {
            Some(spec) => spec.threshold_probability(&minima).map_err(|e| ExperimentError::Config(e.to_string()))?,
            None if draws.is_empty() => return Err(ExperimentError::Config("dof_draws must be positive for this recourse structure".into())),
            None => dfrak_r_mc(gen, &minima, &lineality_values, &draws),
        };
        let mut flags = Vec::new();
        let mut failed = false;
        let d_xstar = match solve_two_stage(&inst) {
            Ok(sol) => Some(match induced {
                Some(spec) => {
                    let levels: Vec<f64> = spec.chains.iter().map(|ch| ch.constraint.eval(&sol.x)).collect();
                    spec.threshold_probability(&levels).map_err(|e| ExperimentError::Config(e.to_string()))?
                }
                None => {
                    let mut hits = 0usize;
                    for h in &draws {
                        if farkas_feasible(gen, h, &problem.t, &sol.x).map_err(|e| ExperimentError::Solver(e.to_string()))? {
                            hits += 1;
                        }
                    }
                    hits as f64 / draws.len() as f64
                }
            }),
            Err(SaaError::ExtensiveFormInfeasible) => {
                flags.push("saa_infeasible");
                None
            }
            Err(e) => {
                log::warn!("trial {} N={n}: {e}", seed.trial_index);
                flags.push("solver_error");
                failed = true;
                None
            }
        };
        if induced.is_none() {
            flags.push("monte_carlo_dof");
        }
        out.push(PointOutcome {
            dfrak_r,
            d_hat: None,
            d_xstar,
            flags,
            failed,
        });
    }
    Ok(out)
}

pub(crate) fn run(config: &ExperimentConfig, problem: &TwoStageProblem, grid: &Grid, dof_draws: u64) -> Result<ExperimentOutput, ExperimentError> {
    let label = config.label();
    let gen = enumerate_rays(&problem.w).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let m = induced_order(&gen).max(1);
    let induced = problem.induced_chains(&gen);
    let outcomes: Vec<Vec<PointOutcome>> = par_trials(config.trials, |t| {
        trial(problem, &gen, induced.as_ref(), &grid.n, dof_draws, &SeedSpec::new(config.seed, t, 0, StreamRole::Threshold))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let points = aggregate(m, grid, &outcomes)?;
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
            "kind": "two_stage",
            "rays": gen.rays.len(),
            "lineality": gen.lineality.len(),
            "m": m,
            "exact_dof": induced.is_some(),
            "trials": config.trials,
            "violations": violations,
            "solver_failures": failures,
        }),
        solver_failures: failures,
    })
}
