//! Experiment configuration (JSON).

use serde::{Deserialize, Serialize};

use crate::multistage::MultistageProblem;
use crate::saa::{StochasticProblem, TwoStageProblem};

use super::ExperimentError;

/// Minimum number of trials for any experiment that compares against a bound.
pub const MIN_TRIALS: usize = 100;

fn default_n() -> Vec<usize> {
    vec![10, 20, 50, 100, 200, 500]
}

fn default_alpha() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.2]
}

/// Grid of sample sizes and risk levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(default = "default_n")]
    pub n: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            n: default_n(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessCell {
    pub m: u64,
    pub n: u64,
    pub alpha: f64,
}

fn default_domain_draws() -> u64 {
    200
}

fn default_tol() -> f64 {
    1e-6
}

fn default_dof_draws() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentKind {
    /// The m-segment reordering of `[0, 1]` for which the binomial bound is
    /// attained.
    Tightness { cells: Vec<TightnessCell> },
    /// Frequencies of low feasibility for a chain-constrained SAA problem.
    BoundCheck {
        problem: StochasticProblem,
        #[serde(default)]
        grid: Grid,
        /// Fresh draws per trial for the domain estimate `D_hat` (0 skips it).
        #[serde(default = "default_domain_draws")]
        domain_draws: u64,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Bound check for a two-stage LP with sampled right-hand sides.
    TwoStage {
        problem: TwoStageProblem,
        #[serde(default)]
        grid: Grid,
        /// Monte Carlo draws when the induced thresholds are not independent
        /// scalars.
        #[serde(default = "default_dof_draws")]
        dof_draws: u64,
    },
    /// Frequency of SAA solutions outside `dom F` as `N` grows.
    InteriorDecay {
        problem: StochasticProblem,
        n_values: Vec<usize>,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Comparison of the full-order bound with the bound for the active
    /// chains only.
    ActiveConstraints {
        problem: StochasticProblem,
        n_values: Vec<usize>,
        alpha: Vec<f64>,
        /// Indices of the chains active at the true solution.
        active: Vec<usize>,
        /// Upward shift of each inactive chain's threshold law for the
        /// paired-seed perturbation run; `None` skips it.
        #[serde(default)]
        perturbation: Option<Vec<f64>>,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Scenario-tree experiment with per-stage bounds.
    Multistage {
        problem: MultistageProblem,
        branching: Vec<usize>,
        /// One risk level per random stage.
        alpha: Vec<f64>,
        #[serde(default = "default_dof_draws")]
        dof_draws: u64,
    },
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Tightness { .. } => "tightness",
            ExperimentKind::BoundCheck { .. } => "bound_check",
            ExperimentKind::TwoStage { .. } => "two_stage",
            ExperimentKind::InteriorDecay { .. } => "interior_decay",
            ExperimentKind::ActiveConstraints { .. } => "active_constraints",
            ExperimentKind::Multistage { .. } => "multistage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Label used in output file names; defaults to the experiment kind.
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    pub trials: usize,
    #[serde(flatten)]
    pub kind: ExperimentKind,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.trials < MIN_TRIALS {
            return bad(format!("trials = {} but at least {MIN_TRIALS} are required", self.trials));
        }
        let check_alpha = |a: &[f64]| -> Result<(), ExperimentError> {
            if a.is_empty() || a.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(ExperimentError::Config("alpha values must be in [0, 1]".into()));
            }
            Ok(())
        };
        let check_n = |ns: &[usize], m: usize| -> Result<(), ExperimentError> {
            if ns.is_empty() {
                return Err(ExperimentError::Config("sample-size list is empty".into()));
            }
            if let Some(n) = ns.iter().find(|&&n| n < m.max(1)) {
                return Err(ExperimentError::Config(format!("N = {n} is below the chain order m = {m}")));
            }
            Ok(())
        };
        match &self.kind {
            ExperimentKind::Tightness { cells } => {
                if cells.is_empty() {
                    return bad("tightness needs at least one cell".into());
                }
                for c in cells {
                    if c.m == 0 || c.n < c.m {
                        return bad(format!("cell m = {}, N = {} needs 1 <= m <= N", c.m, c.n));
                    }
                    if !(0.0..=1.0 / c.m as f64).contains(&c.alpha) {
                        return bad(format!("cell alpha = {} must lie in [0, 1/m]", c.alpha));
                    }
                }
            }
            ExperimentKind::BoundCheck { problem, grid, tol, .. } => {
                problem.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                let m = problem.domain.as_ref().map_or(1, |d| d.order());
                check_n(&grid.n, m)?;
                check_alpha(&grid.alpha)?;
                if !(*tol > 0.0) {
                    return bad("tol must be positive".into());
                }
            }
            ExperimentKind::TwoStage { problem, grid, .. } => {
                problem.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                let rays = crate::polyhedral::enumerate_rays(&problem.w).map_err(|e| ExperimentError::Config(e.to_string()))?;
                check_n(&grid.n, rays.rays.len())?;
                check_alpha(&grid.alpha)?;
            }
            ExperimentKind::InteriorDecay { problem, n_values, .. } => {
                problem.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                check_n(n_values, 1)?;
            }
            ExperimentKind::ActiveConstraints {
                problem,
                n_values,
                alpha,
                active,
                perturbation,
                ..
            } => {
                problem.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                let Some(domain) = &problem.domain else {
                    return bad("active_constraints needs a chain domain".into());
                };
                let m = domain.order();
                check_n(n_values, m)?;
                check_alpha(alpha)?;
                if active.is_empty() || active.iter().any(|&k| k >= m) {
                    return bad(format!("active chain indices must be non-empty and below m = {m}"));
                }
                if let Some(p) = perturbation {
                    if p.len() != m || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return bad("perturbation needs one non-negative shift per chain".into());
                    }
                }
            }
            ExperimentKind::Multistage {
                problem,
                branching,
                alpha,
                ..
            } => {
                problem.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
                if branching.len() != problem.stages.len() || alpha.len() != problem.stages.len() {
                    return bad("branching and alpha need one entry per random stage".into());
                }
                check_alpha(alpha)?;
                let cones = problem.stage_cones().map_err(|e| ExperimentError::Config(e.to_string()))?;
                for (n, c) in branching.iter().zip(&cones) {
                    check_n(&[*n], c.rays.len())?;
                }
            }
        }
        Ok(())
    }
}
