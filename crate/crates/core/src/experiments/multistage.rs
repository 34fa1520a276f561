//! Scenario-tree experiment: per-stage frequencies of a low minimum path
//! degree of feasibility, and the joint event that every stage stays at or
//! above its level.

use serde_json::json;

use crate::bounds::{binomial_tail, chernoff_estimate, multistage_product, BoundInput};
use crate::multistage::{build_tree, min_path_dof, solve_tree, stage_dfrak_r, MultistageError, MultistageProblem, StageDofMode};
use crate::polyhedral::ConeGenerators;
use crate::rng::{SeedSpec, StreamRole};
use crate::stats::Estimate;

use super::two_stage::induced_order;
use super::{par_trials, Cell, Counter, ExperimentConfig, ExperimentError, ExperimentOutput, Plot, Table, TrialRecord, MULTISTAGE_COLUMNS, VIOLATION_Z};

/// One tree: per random stage `(min_path_dof, dfrak_r)`, or `None` when
/// the extensive form was infeasible.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeOutcome {
    pub stages: Option<Vec<(f64, Option<f64>)>>,
    pub failed: bool,
}

pub fn run_tree(
    problem: &MultistageProblem,
    cones: &[ConeGenerators],
    branching: &[usize],
    dof_draws: u64,
    seed: &SeedSpec,
) -> Result<TreeOutcome, ExperimentError> {
    let mut tree = build_tree(problem, branching, seed).map_err(|e| ExperimentError::Config(e.to_string()))?;
    match solve_tree(problem, &mut tree) {
        Ok(_) => {}
        Err(MultistageError::Infeasible) => return Ok(TreeOutcome { stages: None, failed: false }),
        Err(e) => {
            log::warn!("tree {}: {e}", seed.trial_index);
            return Ok(TreeOutcome { stages: None, failed: true });
        }
    }
    let mut stages = Vec::new();
    for t in 2..=problem.horizon() {
        let mode = StageDofMode::Auto {
            draws: dof_draws,
            seed: seed.with_stage(t as u32).with_role(StreamRole::Oracle),
        };
        let d = min_path_dof(problem, cones, &tree, t, &mode).map_err(|e| ExperimentError::Solver(e.to_string()))?;
        stages.push((d.value, stage_dfrak_r(problem, cones, &tree, t)));
    }
    Ok(TreeOutcome {
        stages: Some(stages),
        failed: false,
    })
}

/// Per-stage and joint frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct MultistageSummary {
    /// Chain order `m_t` per random stage.
    pub orders: Vec<usize>,
    pub bounds: Vec<f64>,
    pub low: Vec<Counter>,
    pub low_dfrak_r: Vec<Counter>,
    pub joint_high: Counter,
    pub product_bound: f64,
    pub censored: u64,
}

impl MultistageSummary {
    pub fn stage_dominance(&self) -> Vec<bool> {
        self.low
            .iter()
            .zip(&self.bounds)
            .map(|(c, b)| c.estimate().is_none_or(|e| e.value - VIOLATION_Z * e.stderr <= *b))
            .collect()
    }

    pub fn joint_holds(&self) -> bool {
        self.joint_high
            .estimate()
            .is_none_or(|e| e.value + VIOLATION_Z * e.stderr >= self.product_bound)
    }

    pub fn joint_estimate(&self) -> Option<Estimate> {
        self.joint_high.estimate()
    }
}

pub fn simulate(
    problem: &MultistageProblem,
    branching: &[usize],
    alphas: &[f64],
    dof_draws: u64,
    trials: usize,
    master_seed: u64,
) -> Result<(MultistageSummary, Vec<TreeOutcome>), ExperimentError> {
    let cones = problem.stage_cones().map_err(|e| ExperimentError::Config(e.to_string()))?;
    let orders: Vec<usize> = cones.iter().map(|c| induced_order(c).max(1)).collect();
    let inputs: Vec<BoundInput> = orders
        .iter()
        .zip(branching)
        .zip(alphas)
        .map(|((&m, &n), &a)| BoundInput::new(m as u64, n as u64, a))
        .collect::<Result<_, _>>()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let bounds: Vec<f64> = inputs
        .iter()
        .map(|i| binomial_tail(i.m, i.n, i.alpha))
        .collect::<Result<_, _>>()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let product_bound = multistage_product(&inputs).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let outcomes: Vec<TreeOutcome> = par_trials(trials, |t| {
        run_tree(problem, &cones, branching, dof_draws, &SeedSpec::new(master_seed, t, 0, StreamRole::Threshold))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let k = alphas.len();
    let mut s = MultistageSummary {
        orders,
        bounds,
        low: vec![Counter::default(); k],
        low_dfrak_r: vec![Counter::default(); k],
        joint_high: Counter::default(),
        product_bound,
        censored: 0,
    };
    for o in &outcomes {
        let Some(stages) = &o.stages else {
            s.censored += 1;
            continue;
        };
        let mut all_high = true;
        for (i, ((d, r), a)) in stages.iter().zip(alphas).enumerate() {
            let low = *d < 1.0 - a;
            s.low[i].record(low);
            all_high &= !low;
            if let Some(r) = r {
                s.low_dfrak_r[i].record(*r < 1.0 - a);
            }
        }
        s.joint_high.record(all_high);
    }
    Ok((s, outcomes))
}

pub(crate) fn run(
    config: &ExperimentConfig,
    problem: &MultistageProblem,
    branching: &[usize],
    alphas: &[f64],
    dof_draws: u64,
) -> Result<ExperimentOutput, ExperimentError> {
    let label = config.label();
    let (s, outcomes) = simulate(problem, branching, alphas, dof_draws, config.trials, config.seed)?;
    let failures = outcomes.iter().filter(|o| o.failed).count() as u64;

    let mut records = Vec::new();
    let mut per_tree = Table::new(&MULTISTAGE_COLUMNS);
    for (i, (&n, &alpha)) in branching.iter().zip(alphas).enumerate() {
        let chernoff = chernoff_estimate(s.orders[i] as u64, n as u64, alpha).ok();
        for (t, o) in outcomes.iter().enumerate() {
            let stage = o.stages.as_ref().map(|st| st[i]);
            let mut flags = vec![STAGE_FLAGS[(i + 2).min(STAGE_FLAGS.len() - 1)]];
            if o.stages.is_none() {
                flags.push(if o.failed { "solver_error" } else { "censored" });
            }
            records.push(TrialRecord {
                experiment: label.clone(),
                trial: t as u64,
                n: n as u64,
                alpha: Some(alpha),
                dfrak_r: stage.and_then(|s| s.1),
                d_hat: None,
                d_xstar: stage.map(|s| s.0),
                bound_binom: Some(s.bounds[i]),
                bound_chernoff: chernoff,
                flags,
                seed: config.seed,
            });
        }
    }
    for (t, o) in outcomes.iter().enumerate() {
        for i in 0..branching.len() {
            per_tree.push(vec![
                Cell::Int(t as u64),
                Cell::Int(i as u64 + 2),
                Cell::opt(o.stages.as_ref().map(|st| st[i].0)),
                Cell::Float(s.bounds[i]),
            ]);
        }
    }

    let mut summary = Table::new(&[
        "experiment",
        "event",
        "t",
        "N",
        "alpha",
        "m",
        "trees",
        "censored",
        "freq",
        "stderr",
        "freq_dfrak_r",
        "stderr_dfrak_r",
        "bound",
        "holds",
    ]);
    let dominance = s.stage_dominance();
    for (i, (&n, &alpha)) in branching.iter().zip(alphas).enumerate() {
        let e = s.low[i].estimate();
        let r = s.low_dfrak_r[i].estimate();
        summary.push(vec![
            Cell::Text(label.clone()),
            Cell::Text("low_min_path_dof".into()),
            Cell::Int(i as u64 + 2),
            Cell::Int(n as u64),
            Cell::Float(alpha),
            Cell::Int(s.orders[i] as u64),
            Cell::Int(config.trials as u64),
            Cell::Int(s.censored),
            Cell::opt(e.map(|e| e.value)),
            Cell::opt(e.map(|e| e.stderr)),
            Cell::opt(r.map(|e| e.value)),
            Cell::opt(r.map(|e| e.stderr)),
            Cell::Float(s.bounds[i]),
            Cell::Text(dominance[i].to_string()),
        ]);
    }
    let je = s.joint_estimate();
    summary.push(vec![
        Cell::Text(label.clone()),
        Cell::Text("joint_high".into()),
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Int(config.trials as u64),
        Cell::Int(s.censored),
        Cell::opt(je.map(|e| e.value)),
        Cell::opt(je.map(|e| e.stderr)),
        Cell::Empty,
        Cell::Empty,
        Cell::Float(s.product_bound),
        Cell::Text(s.joint_holds().to_string()),
    ]);
    let plot = Plot::from_table(
        &format!("{label}: per-stage low-feasibility frequency vs bound"),
        &summary,
        "t",
        &["freq", "freq_dfrak_r", "bound"],
        None,
    );
    Ok(ExperimentOutput {
        label: label.clone(),
        trials: super::trial_table(&records),
        summary,
        multistage: Some(per_tree),
        plot,
        report: json!({
            "experiment": label,
            "kind": "multistage",
            "branching": branching,
            "alpha": alphas,
            "orders": s.orders,
            "stage_bounds": s.bounds,
            "stage_frequencies": s.low.iter().map(|c| c.estimate().map(|e| e.value)).collect::<Vec<_>>(),
            "stage_dominance": dominance,
            "joint_frequency": je.map(|e| e.value),
            "joint_stderr": je.map(|e| e.stderr),
            "product_bound": s.product_bound,
            "joint_holds": s.joint_holds(),
            "censored_trees": s.censored,
            "solver_failures": failures,
        }),
        solver_failures: failures,
    })
}

const STAGE_FLAGS: [&str; 6] = ["stage=0", "stage=1", "stage=2", "stage=3", "stage=4", "stage=5"];
