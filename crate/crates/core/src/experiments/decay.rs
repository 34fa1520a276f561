//! Frequency of SAA solutions outside `dom F` when the true solution set is
//! interior, with a least-squares fit of `log p_hat(N)` against `N`.

use serde_json::json;

use crate::chain::sample_thresholds;
use crate::rng::{SeedSpec, StreamRole};
use crate::saa::{assemble_with_thresholds, dof_of_solution, solve_convex, SaaError, StochasticProblem};
use crate::stats::{linear_fit, Estimate, LinearFit};

use super::{par_trials, Cell, Counter, ExperimentConfig, ExperimentError, ExperimentOutput, Plot, Table, TrialRecord};

/// Relative slack when testing `c_k(x) <= ess inf l_k`.
const DOMAIN_SLACK: f64 = 1e-12;

/// One solve: `d(x*)`, whether `x*` left `dom F`, and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayOutcome {
    pub dfrak_r: Option<f64>,
    pub d_xstar: Option<f64>,
    pub outside: Option<bool>,
    pub flags: Vec<&'static str>,
    pub failed: bool,
}

/// `x` violates some `c_k(x) <= ess inf l_k`.
pub fn outside_dom_f(problem: &StochasticProblem, x: &[f64]) -> bool {
    let Some(spec) = &problem.domain else {
        return false;
    };
    spec.chains
        .iter()
        .zip(spec.essential_infima())
        .any(|(ch, inf)| ch.constraint.eval(x) > inf + DOMAIN_SLACK * (1.0 + inf.abs()))
}

fn trial(problem: &StochasticProblem, ns: &[usize], tol: f64, seed: &SeedSpec) -> Result<Vec<DecayOutcome>, ExperimentError> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    let full = match &problem.domain {
        Some(spec) => Some(sample_thresholds(spec, n_max, seed).map_err(|e| ExperimentError::Config(e.to_string()))?),
        None => None,
    };
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let thresholds = full.as_ref().map(|s| s.prefix(n));
        let dfrak_r = match (&problem.domain, &thresholds) {
            (Some(spec), Some(t)) => Some(spec.threshold_probability(&t.minima).map_err(|e| ExperimentError::Config(e.to_string()))?),
            _ => Some(1.0),
        };
        let o = match assemble_with_thresholds(problem, thresholds, n, seed).and_then(|inst| solve_convex(&inst, tol)) {
            Ok(sol) => {
                let outside = outside_dom_f(problem, &sol.x);
                let mut flags = Vec::new();
                if outside {
                    flags.push("outside_dom_f");
                }
                if sol.gap > tol {
                    flags.push("solver_gap");
                }
                DecayOutcome {
                    dfrak_r,
                    d_xstar: Some(dof_of_solution(problem, &sol.x).map_err(|e| ExperimentError::Config(e.to_string()))?.value),
                    outside: Some(outside),
                    flags,
                    failed: false,
                }
            }
            Err(SaaError::SaaInfeasible) => DecayOutcome {
                dfrak_r,
                d_xstar: None,
                outside: None,
                flags: vec!["saa_infeasible"],
                failed: false,
            },
            Err(e) => {
                log::warn!("trial {} N={n}: {e}", seed.trial_index);
                DecayOutcome {
                    dfrak_r,
                    d_xstar: None,
                    outside: None,
                    flags: vec!["solver_error"],
                    failed: true,
                }
            }
        };
        out.push(o);
    }
    Ok(out)
}

/// Frequencies per `N` and the decay fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayResult {
    pub n_values: Vec<usize>,
    pub estimates: Vec<Option<Estimate>>,
    pub censored: Vec<u64>,
    /// Fit of `log p_hat` on `N` over points with `p_hat > 0`; `None` when
    /// fewer than two such points exist.
    pub fit: Option<LinearFit>,
}

impl DecayResult {
    /// Every frequency is zero: the decay is below simulation resolution.
    pub fn below_resolution(&self) -> bool {
        self.estimates.iter().all(|e| e.is_none_or(|e| e.value == 0.0))
    }
}

pub fn simulate(
    problem: &StochasticProblem,
    n_values: &[usize],
    trials: usize,
    tol: f64,
    master_seed: u64,
) -> Result<(DecayResult, Vec<Vec<DecayOutcome>>), ExperimentError> {
    let outcomes: Vec<Vec<DecayOutcome>> = par_trials(trials, |t| trial(problem, n_values, tol, &SeedSpec::new(master_seed, t, 0, StreamRole::Threshold)))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let mut estimates = Vec::new();
    let mut censored = Vec::new();
    for j in 0..n_values.len() {
        let mut c = Counter::default();
        let mut cens = 0;
        for o in &outcomes {
            match o[j].outside {
                Some(hit) => c.record(hit),
                None => cens += 1,
            }
        }
        estimates.push(c.estimate());
        censored.push(cens);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = n_values
        .iter()
        .zip(&estimates)
        .filter_map(|(n, e)| e.filter(|e| e.value > 0.0).map(|e| (*n as f64, e.value.ln())))
        .unzip();
    let fit = linear_fit(&xs, &ys);
    Ok((
        DecayResult {
            n_values: n_values.to_vec(),
            estimates,
            censored,
            fit,
        },
        outcomes,
    ))
}

pub(crate) fn run(config: &ExperimentConfig, problem: &StochasticProblem, n_values: &[usize], tol: f64) -> Result<ExperimentOutput, ExperimentError> {
    let label = config.label();
    let (res, outcomes) = simulate(problem, n_values, config.trials, tol, config.seed)?;
    let failures = outcomes.iter().flatten().filter(|o| o.failed).count() as u64;
    let mut records = Vec::new();
    for (j, &n) in n_values.iter().enumerate() {
        for (t, o) in outcomes.iter().enumerate() {
            let o = &o[j];
            records.push(TrialRecord {
                experiment: label.clone(),
                trial: t as u64,
                n: n as u64,
                alpha: None,
                dfrak_r: o.dfrak_r,
                d_hat: None,
                d_xstar: o.d_xstar,
                bound_binom: None,
                bound_chernoff: None,
                flags: o.flags.clone(),
                seed: config.seed,
            });
        }
    }
    let mut summary = Table::new(&["experiment", "N", "trials", "censored", "p_hat", "stderr", "p_fit"]);
    for (j, &n) in n_values.iter().enumerate() {
        let e = res.estimates[j];
        let fitted = res.fit.map(|f| (f.intercept + f.slope * n as f64).exp());
        summary.push(vec![
            Cell::Text(label.clone()),
            Cell::Int(n as u64),
            Cell::Int(config.trials as u64),
            Cell::Int(res.censored[j]),
            Cell::opt(e.map(|e| e.value)),
            Cell::opt(e.map(|e| e.stderr)),
            Cell::opt(fitted),
        ]);
    }
    let plot = Plot::from_table(&format!("{label}: P(x* outside dom F) vs N"), &summary, "N", &["p_hat", "p_fit"], None);
    let status = if res.below_resolution() {
        "decay below resolution"
    } else if res.fit.is_none() {
        "too few nonzero frequencies to fit"
    } else {
        "fitted"
    };
    Ok(ExperimentOutput {
        label: label.clone(),
        trials: super::trial_table(&records),
        summary,
        multistage: None,
        plot,
        report: json!({
            "experiment": label,
            "kind": "interior_decay",
            "trials": config.trials,
            "status": status,
            "slope": res.fit.map(|f| f.slope),
            "intercept": res.fit.map(|f| f.intercept),
            "r_squared": res.fit.map(|f| f.r_squared),
            "fitted_points": res.fit.map(|f| f.points),
            "solver_failures": failures,
        }),
        solver_failures: failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{Chain, ChainDomainSpec, ConstraintFn};
    use crate::rng::Distribution;
    use crate::saa::Objective;

    fn interior_problem(noise_sd: f64, with_domain: bool) -> StochasticProblem {
        StochasticProblem {
            dim: 1,
            lower: vec![-5.0],
            upper: vec![5.0],
            constraints: vec![],
            objective: Objective::Squared {
                target: vec![0.0],
                noise: vec![Distribution::normal(0.2, noise_sd)],
            },
            domain: with_domain.then(|| ChainDomainSpec {
                dim: 1,
                chains: vec![Chain {
                    constraint: ConstraintFn::affine(vec![1.0], 0.0),
                    threshold: Distribution::uniform(0.5, 1.5),
                }],
                independent_thresholds: true,
            }),
        }
    }

    #[test]
    fn whole_space_domain_never_outside() {
        let (res, _) = simulate(&interior_problem(1.0, false), &[10, 20], 200, 1e-9, 1).unwrap();
        assert!(res.below_resolution());
        assert!(res.fit.is_none());
    }

    #[test]
    fn frequency_matches_normal_tail() {
        // x* = min(mean eta, min l) leaves {x <= 0.5} iff mean eta > 0.5
        let sd = 1.5;
        let (res, _) = simulate(&interior_problem(sd, true), &[20], 4000, 1e-9, 2).unwrap();
        let z = 0.3 * 20f64.sqrt() / sd;
        let exact = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
        let e = res.estimates[0].unwrap();
        assert!((e.value - exact).abs() <= 4.0 * e.stderr, "{} vs {exact}", e.value);
    }
}
