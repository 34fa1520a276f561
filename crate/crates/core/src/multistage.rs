//! Scenario-tree SAA for multistage linear problems.
//!
//! Stage 1 chooses `x_1 >= 0` with `A_1 x_1 = b_1`. Stage `t >= 2` chooses
//! `x_t >= 0` with `A_t x_t + B_t x_{t-1} = b_t(xi_t)`, where `b_t` has
//! independent components and the stages are independent. The tree is built
//! by identical conditional sampling: stage `t` draws `N_t` values once and
//! every stage-`(t-1)` node branches to all of them. Nodes are indexed by
//! path: node `p` at stage `t` has parent `p / N_t` and sample `p % N_t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polyhedral::matrix::dot;
use crate::polyhedral::{enumerate_rays, farkas_feasible, lp_solve, ConeGenerators, LpProblem, LpStatus, Matrix, PolyError, RowSense};
use crate::rng::{DistError, Distribution, SeedSpec, StreamRole};
use crate::stats::Estimate;

/// Default cap on the number of stages.
pub const MAX_STAGES: usize = 4;
/// Default cap on the branching factor of any stage.
pub const MAX_BRANCHING: usize = 50;
/// Feasibility tolerance for stored node decisions.
pub const NODE_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultistageError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tree exceeds desk-scale limits: {0}")]
    TooLarge(String),
    #[error("extensive form is infeasible")]
    Infeasible,
    #[error("extensive form is unbounded")]
    Unbounded,
    #[error("tree has not been solved")]
    Unsolved,
    #[error("Monte Carlo estimate needs at least one draw")]
    NoDraws,
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Distribution(#[from] DistError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub cost: Vec<f64>,
}

/// Data of a stage `t >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageData {
    pub a: Matrix,
    /// Coupling with the previous stage's decision.
    pub b: Matrix,
    /// Independent laws of the components of the right-hand side.
    pub b_law: Vec<Distribution>,
    pub cost: Vec<f64>,
}

impl StageData {
    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn vars(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistageProblem {
    pub first: FirstStage,
    pub stages: Vec<StageData>,
}

impl MultistageProblem {
    /// Number of stages `T`, counting the first.
    pub fn horizon(&self) -> usize {
        self.stages.len() + 1
    }

    fn stage_vars(&self, s: usize) -> usize {
        if s == 0 {
            self.first.a.cols()
        } else {
            self.stages[s - 1].vars()
        }
    }

    pub fn validate(&self) -> Result<(), MultistageError> {
        let f = &self.first;
        if f.a.rows() != f.b.len() || f.a.cols() != f.cost.len() {
            return Err(MultistageError::Dimension("first stage: A_1, b_1 and cost disagree".into()));
        }
        if self.horizon() > MAX_STAGES {
            return Err(MultistageError::TooLarge(format!("{} stages, limit {MAX_STAGES}", self.horizon())));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let prev = self.stage_vars(i);
            let t = i + 2;
            if st.b.rows() != st.rows() || st.b.cols() != prev {
                return Err(MultistageError::Dimension(format!(
                    "stage {t}: B_t is {}x{}, expected {}x{prev}",
                    st.b.rows(),
                    st.b.cols(),
                    st.rows()
                )));
            }
            if st.b_law.len() != st.rows() || st.cost.len() != st.vars() {
                return Err(MultistageError::Dimension(format!("stage {t}: law or cost length mismatch")));
            }
            for law in &st.b_law {
                law.validate()?;
            }
        }
        Ok(())
    }

    /// Enumerates the recourse cone `{r : r^T A_t >= 0}` of every stage `t >= 2`.
    pub fn stage_cones(&self) -> Result<Vec<ConeGenerators>, MultistageError> {
        self.stages.iter().map(|s| Ok(enumerate_rays(&s.a)?)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    /// `(N_2, ..., N_T)`.
    pub branching: Vec<usize>,
    /// `samples[t-2][k]` is the `k`-th sampled right-hand side of stage `t`.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// `decisions[s][p]` for stage `s + 1`, filled by [`solve_tree`].
    pub decisions: Option<Vec<Vec<Vec<f64>>>>,
    pub value: Option<f64>,
}

impl ScenarioTree {
    /// Number of nodes (paths) at stage `s + 1`.
    pub fn paths(&self, s: usize) -> usize {
        self.branching[..s].iter().product()
    }
}

/// Samples each stage from stream `(seed.trial, stage t, Threshold)`.
pub fn build_tree(problem: &MultistageProblem, branching: &[usize], seed: &SeedSpec) -> Result<ScenarioTree, MultistageError> {
    problem.validate()?;
    if branching.len() != problem.stages.len() {
        return Err(MultistageError::Dimension(format!(
            "{} branching factors for {} random stages",
            branching.len(),
            problem.stages.len()
        )));
    }
    if branching.iter().any(|&n| n == 0 || n > MAX_BRANCHING) {
        return Err(MultistageError::TooLarge(format!("branching factors must lie in 1..={MAX_BRANCHING}")));
    }
    let mut samples = Vec::with_capacity(branching.len());
    for (i, (st, &n)) in problem.stages.iter().zip(branching).enumerate() {
        let mut rng = seed.with_stage((i + 2) as u32).with_role(StreamRole::Threshold).rng();
        let stage_samples: Vec<Vec<f64>> = (0..n)
            .map(|_| st.b_law.iter().map(|law| law.sample(&mut rng)).collect())
            .collect();
        samples.push(stage_samples);
    }
    Ok(ScenarioTree {
        branching: branching.to_vec(),
        samples,
        decisions: None,
        value: None,
    })
}

/// Solves the extensive form (one variable block per node, weights `1/P_t`)
/// and stores the node decisions on the tree.
pub fn solve_tree(problem: &MultistageProblem, tree: &mut ScenarioTree) -> Result<f64, MultistageError> {
    let horizon = problem.horizon();
    let mut offset = vec![0usize; horizon];
    let mut nv = 0;
    for s in 0..horizon {
        offset[s] = nv;
        nv += tree.paths(s) * problem.stage_vars(s);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let mut objective = vec![0.0; nv];
    let f = &problem.first;
    for (r, b) in f.b.iter().enumerate() {
        let mut row = vec![0.0; nv];
        row[..f.a.cols()].copy_from_slice(f.a.row(r));
        rows.push(row);
        rhs.push(*b);
    }
    objective[..f.cost.len()].copy_from_slice(&f.cost);
    for s in 1..horizon {
        let st = &problem.stages[s - 1];
        let n_t = tree.branching[s - 1];
        let (nx, np) = (st.vars(), problem.stage_vars(s - 1));
        let paths = tree.paths(s);
        let weight = 1.0 / paths as f64;
        for p in 0..paths {
            let parent = p / n_t;
            let sample = &tree.samples[s - 1][p % n_t];
            let own = offset[s] + p * nx;
            let par = offset[s - 1] + parent * np;
            for r in 0..st.rows() {
                let mut row = vec![0.0; nv];
                row[own..own + nx].copy_from_slice(st.a.row(r));
                row[par..par + np].copy_from_slice(st.b.row(r));
                rows.push(row);
                rhs.push(sample[r]);
            }
            for (j, c) in st.cost.iter().enumerate() {
                objective[own + j] = weight * c;
            }
        }
    }
    let m = rows.len();
    let lp = LpProblem {
        objective,
        matrix: Matrix::from_rows(&rows)?,
        rhs,
        senses: vec![RowSense::Eq; m],
        bounds: vec![(0.0, f64::INFINITY); nv],
    };
    let r = lp_solve(&lp)?;
    match r.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(MultistageError::Infeasible),
        LpStatus::Unbounded => return Err(MultistageError::Unbounded),
    }
    let mut decisions = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let nx = problem.stage_vars(s);
        decisions.push(
            (0..tree.paths(s))
                .map(|p| r.x[offset[s] + p * nx..offset[s] + (p + 1) * nx].to_vec())
                .collect(),
        );
    }
    tree.decisions = Some(decisions);
    tree.value = Some(r.value);
    Ok(r.value)
}

/// Largest violation of any node's constraint set by the stored decisions.
pub fn max_node_violation(problem: &MultistageProblem, tree: &ScenarioTree) -> Result<f64, MultistageError> {
    let dec = tree.decisions.as_ref().ok_or(MultistageError::Unsolved)?;
    let mut worst = 0.0f64;
    let x1 = &dec[0][0];
    for (r, b) in problem.first.b.iter().enumerate() {
        worst = worst.max((dot(problem.first.a.row(r), x1) - b).abs());
    }
    for s in 1..problem.horizon() {
        let st = &problem.stages[s - 1];
        let n_t = tree.branching[s - 1];
        for (p, x) in dec[s].iter().enumerate() {
            let prev = &dec[s - 1][p / n_t];
            let sample = &tree.samples[s - 1][p % n_t];
            for r in 0..st.rows() {
                let lhs = dot(st.a.row(r), x) + dot(st.b.row(r), prev);
                worst = worst.max((lhs - sample[r]).abs());
            }
            worst = worst.max(x.iter().fold(0.0f64, |a, v| a.max(-v)));
        }
    }
    Ok(worst)
}

/// How a stage degree of feasibility is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum StageDofMode {
    /// Closed form when every ray reads one distinct component of `b_t` and
    /// there is no lineality; falls back to Monte Carlo otherwise.
    Auto { draws: u64, seed: SeedSpec },
    MonteCarlo { draws: u64, seed: SeedSpec },
}

/// For each ray, the single component of `b_t` it reads, if the structure
/// permits the closed form.
fn single_component_rays(gen: &ConeGenerators) -> Option<Vec<usize>> {
    if !gen.lineality.is_empty() {
        return None;
    }
    let mut used = Vec::new();
    for r in &gen.rays {
        let nz: Vec<usize> = (0..r.len()).filter(|&j| r[j].abs() > 1e-12).collect();
        if nz.len() != 1 || used.contains(&nz[0]) {
            return None;
        }
        used.push(nz[0]);
    }
    Some(used)
}

/// `d_t(x_prev) = P{ exists x_t >= 0 : A_t x_t + B_t x_prev = b_t }`.
pub fn stage_dof(stage: &StageData, gen: &ConeGenerators, x_prev: &[f64], mode: &StageDofMode) -> Result<Estimate, MultistageError> {
    if x_prev.len() != stage.b.cols() {
        return Err(MultistageError::Dimension(format!(
            "previous decision has length {}, B_t has {} columns",
            x_prev.len(),
            stage.b.cols()
        )));
    }
    let bx = stage.b.mul_vec(x_prev);
    let (draws, seed) = match mode {
        StageDofMode::Auto { draws, seed } => {
            if let Some(components) = single_component_rays(gen) {
                // r^T (b - B x) >= 0 with r = r_j e_j  <=>  r_j b_j >= r^T B x
                let p = gen
                    .rays
                    .iter()
                    .zip(&components)
                    .map(|(r, &j)| {
                        let law = Distribution::affine(stage.b_law[j].clone(), 0.0, r[j]);
                        law.survival_inclusive(dot(r, &bx))
                    })
                    .product();
                return Ok(Estimate::exact(p));
            }
            (*draws, seed)
        }
        StageDofMode::MonteCarlo { draws, seed } => (*draws, seed),
    };
    if draws == 0 {
        return Err(MultistageError::NoDraws);
    }
    let mut rng = seed.with_role(StreamRole::Oracle).rng();
    let identity = Matrix::identity(stage.rows());
    let zero = vec![0.0; stage.rows()];
    let mut hits = 0u64;
    let mut b = vec![0.0; stage.rows()];
    for _ in 0..draws {
        for (v, law) in b.iter_mut().zip(&stage.b_law) {
            *v = law.sample(&mut rng);
        }
        let residual: Vec<f64> = b.iter().zip(&bx).map(|(u, v)| u - v).collect();
        if farkas_feasible(gen, &residual, &identity, &zero)? {
            hits += 1;
        }
    }
    Ok(Estimate::frequency(hits, draws))
}

/// `min` of `stage_dof` for stage `t` over all stage-`(t-1)` node decisions.
pub fn min_path_dof(
    problem: &MultistageProblem,
    cones: &[ConeGenerators],
    tree: &ScenarioTree,
    t: usize,
    mode: &StageDofMode,
) -> Result<Estimate, MultistageError> {
    if t < 2 || t > problem.horizon() {
        return Err(MultistageError::Dimension(format!("stage {t} outside 2..={}", problem.horizon())));
    }
    let dec = tree.decisions.as_ref().ok_or(MultistageError::Unsolved)?;
    let stage = &problem.stages[t - 2];
    let gen = &cones[t - 2];
    let mut best: Option<Estimate> = None;
    // identical decisions give identical values; skip repeats
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for x in &dec[t - 2] {
        if seen.iter().any(|s| *s == x) {
            continue;
        }
        seen.push(x);
        let e = stage_dof(stage, gen, x, mode)?;
        if best.is_none_or(|b| e.value < b.value) {
            best = Some(e);
        }
    }
    best.ok_or(MultistageError::Unsolved)
}

/// Chain lower bound for stage `t` from its sampled right-hand sides:
/// `P{r_i^T b >= min_k r_i^T b^k for all rays}`, available in the
/// single-component case.
pub fn stage_dfrak_r(problem: &MultistageProblem, cones: &[ConeGenerators], tree: &ScenarioTree, t: usize) -> Option<f64> {
    let stage = problem.stages.get(t.checked_sub(2)?)?;
    let gen = &cones[t - 2];
    let components = single_component_rays(gen)?;
    let samples = &tree.samples[t - 2];
    Some(
        gen.rays
            .iter()
            .zip(&components)
            .map(|(r, &j)| {
                let min = samples.iter().map(|b| dot(r, b)).fold(f64::INFINITY, f64::min);
                Distribution::affine(stage.b_law[j].clone(), 0.0, r[j]).survival_inclusive(min)
            })
            .product(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Scalar inventory-style chain: `x_t + s_t = b_t - x_{t-1}`.
    fn scalar_problem(stages: usize, law: Distribution) -> MultistageProblem {
        MultistageProblem {
            first: FirstStage {
                a: m(&[vec![1.0, 1.0]]),
                b: vec![10.0],
                cost: vec![-2.0, 0.0],
            },
            stages: (0..stages)
                .map(|i| StageData {
                    a: m(&[vec![1.0, 1.0]]),
                    b: m(&[vec![1.0, 0.0]]),
                    b_law: vec![law.clone()],
                    cost: vec![-1.0 / (i + 1) as f64, 0.0],
                })
                .collect(),
        }
    }

    fn seed() -> SeedSpec {
        SeedSpec::new(5, 0, 0, StreamRole::Threshold)
    }

    #[test]
    fn path_counts() {
        let p = scalar_problem(2, Distribution::uniform(1.0, 3.0));
        let tree = build_tree(&p, &[2, 3], &seed()).unwrap();
        assert_eq!(tree.paths(2), 6);
        assert_eq!(tree.paths(1), 2);
    }

    #[test]
    fn point_mass_siblings_identical() {
        let p = scalar_problem(1, Distribution::point(2.0));
        let tree = build_tree(&p, &[4], &seed()).unwrap();
        assert!(tree.samples[0].iter().all(|s| s == &vec![2.0]));
    }

    #[test]
    fn two_stage_tree_pushes_first_stage_to_sample_minimum() {
        let p = scalar_problem(1, Distribution::uniform(1.0, 3.0));
        let mut tree = build_tree(&p, &[7], &seed()).unwrap();
        solve_tree(&p, &mut tree).unwrap();
        let dec = tree.decisions.as_ref().unwrap();
        let min = tree.samples[0].iter().map(|s| s[0]).fold(f64::INFINITY, f64::min);
        assert!((dec[0][0][0] - min).abs() < 1e-9);
        assert!(max_node_violation(&p, &tree).unwrap() <= NODE_TOL);
        let cones = p.stage_cones().unwrap();
        let mode = StageDofMode::Auto { draws: 0, seed: seed() };
        let d = min_path_dof(&p, &cones, &tree, 2, &mode).unwrap();
        // P{b >= min sample} = 1 - (min - 1) / 2, which is also the chain bound
        assert!((d.value - (1.0 - (min - 1.0) / 2.0)).abs() < 1e-9);
        assert!((stage_dfrak_r(&p, &cones, &tree, 2).unwrap() - d.value).abs() < 1e-9);
    }

    #[test]
    fn stage_dof_examples() {
        let st = StageData {
            a: m(&[vec![1.0]]),
            b: m(&[vec![1.0]]),
            b_law: vec![Distribution::uniform(0.0, 1.0)],
            cost: vec![0.0],
        };
        let gen = enumerate_rays(&st.a).unwrap();
        let auto = StageDofMode::Auto { draws: 0, seed: seed() };
        assert!((stage_dof(&st, &gen, &[0.3], &auto).unwrap().value - 0.7).abs() < 1e-12);
        let mc = StageDofMode::MonteCarlo { draws: 20_000, seed: seed() };
        let e = stage_dof(&st, &gen, &[0.3], &mc).unwrap();
        assert!((e.value - 0.7).abs() <= 4.0 * e.stderr);
        let complete = StageData {
            a: m(&[vec![1.0, -1.0]]),
            b: m(&[vec![1.0]]),
            b_law: vec![Distribution::uniform(0.0, 1.0)],
            cost: vec![0.0, 0.0],
        };
        let gen = enumerate_rays(&complete.a).unwrap();
        let e = stage_dof(&complete, &gen, &[5.0], &StageDofMode::MonteCarlo { draws: 100, seed: seed() }).unwrap();
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn deterministic_laws_match_deterministic_lp() {
        let p = scalar_problem(2, Distribution::point(2.0));
        let mut tree = build_tree(&p, &[3, 2], &seed()).unwrap();
        let v = solve_tree(&p, &mut tree).unwrap();
        // deterministic chain: x1 + s1 = 10, x2 + s2 = 2 - x1, x3 + s3 = 2 - x2
        let lp = LpProblem {
            objective: vec![-2.0, 0.0, -1.0, 0.0, -0.5, 0.0],
            matrix: m(&[
                vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0],
            ]),
            rhs: vec![10.0, 2.0, 2.0],
            senses: vec![RowSense::Eq; 3],
            bounds: vec![(0.0, f64::INFINITY); 6],
        };
        assert!((lp_solve(&lp).unwrap().value - v).abs() < 1e-9);
    }

    #[test]
    fn unsolved_tree_reports() {
        let p = scalar_problem(1, Distribution::point(2.0));
        let tree = build_tree(&p, &[2], &seed()).unwrap();
        let cones = p.stage_cones().unwrap();
        let mode = StageDofMode::Auto { draws: 0, seed: seed() };
        assert_eq!(min_path_dof(&p, &cones, &tree, 2, &mode), Err(MultistageError::Unsolved));
    }

    #[test]
    fn shape_errors() {
        let mut p = scalar_problem(1, Distribution::point(2.0));
        p.stages[0].b = m(&[vec![1.0]]);
        assert!(matches!(build_tree(&p, &[2], &seed()), Err(MultistageError::Dimension(_))));
        let p = scalar_problem(1, Distribution::point(2.0));
        assert!(matches!(build_tree(&p, &[2, 2], &seed()), Err(MultistageError::Dimension(_))));
        assert!(matches!(build_tree(&p, &[51], &seed()), Err(MultistageError::TooLarge(_))));
    }
}
