//! Sample average approximation: assembling sampled problems and solving them.
//!
//! Two problem shapes are supported:
//!
//! * [`StochasticProblem`]: a sampled convex objective over a compact box,
//!   optional deterministic affine rows, and a chain-constrained domain. The
//!   SAA domain uses the per-chain sample minima.
//! * [`TwoStageProblem`]: `min c^T x + E[Q(x, xi)]` with
//!   `Q(x, xi) = min { g^T y : W y = h_xi - T x, y >= 0 }`, solved through
//!   the deterministic-equivalent LP.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainDomainSpec, ChainError, ConstraintFn, ThresholdSample};
use crate::kelley::{self, CuttingPlaneError, Oracle};
use crate::polyhedral::matrix::{dot, Matrix};
use crate::polyhedral::{lp_solve, ConeGenerators, LpProblem, LpStatus, PolyError, RowSense};
use crate::rng::{DistError, Distribution, SeedSpec, StreamRole};
use crate::stats::Estimate;

/// Residual accepted when checking that a solution lies in the SAA domain.
pub const DOMAIN_TOL: f64 = 1e-8;
/// Largest number of active-set candidates tried by the exact projection.
const MAX_ACTIVE_SETS: usize = 20_000;
/// Relative slack when pinning an optimal value during lexicographic refinement.
const LEX_SLACK: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaaError {
    #[error("SAA domain is empty within X")]
    SaaInfeasible,
    #[error("extensive form is infeasible")]
    ExtensiveFormInfeasible,
    #[error("problem is unbounded below")]
    Unbounded,
    #[error("cutting plane stopped after {iterations} iterations with gap {best_gap:e}")]
    IterationCap { iterations: usize, best_gap: f64 },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

impl From<CuttingPlaneError> for SaaError {
    fn from(e: CuttingPlaneError) -> Self {
        match e {
            CuttingPlaneError::Infeasible => SaaError::SaaInfeasible,
            CuttingPlaneError::IterationCap { iterations, best_gap } => SaaError::IterationCap { iterations, best_gap },
            CuttingPlaneError::BadBox => SaaError::Invalid("search box must be finite".into()),
            CuttingPlaneError::Lp(p) => SaaError::Poly(p),
        }
    }
}

/// Sampled objective families. Each coordinate's noise is independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `f_xi(x) = sum_j c_j(xi) x_j`; point masses give a deterministic
    /// linear objective.
    Linear { coefs: Vec<Distribution> },
    /// `f_xi(x) = |x - target - eta(xi)|^2`.
    Squared { target: Vec<f64>, noise: Vec<Distribution> },
    /// `f_xi(x) = sum_j |x_j - eta_j(xi)|`.
    Absolute { noise: Vec<Distribution> },
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Linear { coefs } => coefs.len(),
            Objective::Squared { target, .. } => target.len(),
            Objective::Absolute { noise } => noise.len(),
        }
    }

    fn laws(&self) -> &[Distribution] {
        match self {
            Objective::Linear { coefs } => coefs,
            Objective::Squared { noise, .. } | Objective::Absolute { noise } => noise,
        }
    }

    fn validate(&self) -> Result<(), SaaError> {
        if let Objective::Squared { target, noise } = self {
            if target.len() != noise.len() {
                return Err(SaaError::Invalid("squared objective: target and noise lengths differ".into()));
            }
        }
        for d in self.laws() {
            d.validate()?;
        }
        Ok(())
    }

    /// `f_xi(x)` for one sampled noise vector.
    pub fn eval_single(&self, draw: &[f64], x: &[f64]) -> f64 {
        match self {
            Objective::Linear { .. } => dot(draw, x),
            Objective::Squared { target, .. } => x
                .iter()
                .zip(target)
                .zip(draw)
                .map(|((xi, t), e)| (xi - t - e).powi(2))
                .sum(),
            Objective::Absolute { .. } => x.iter().zip(draw).map(|(xi, e)| (xi - e).abs()).sum(),
        }
    }

    /// `F(x) = E f_xi(x)` in closed form when available.
    pub fn expectation(&self, x: &[f64]) -> Option<f64> {
        match self {
            Objective::Linear { coefs } => Some(coefs.iter().zip(x).map(|(c, xi)| c.mean() * xi).sum()),
            Objective::Squared { target, noise } => Some(
                x.iter()
                    .zip(target)
                    .zip(noise)
                    .map(|((xi, t), e)| (xi - t - e.mean()).powi(2) + e.variance())
                    .sum(),
            ),
            Objective::Absolute { noise } => noise.iter().zip(x).map(|(e, xi)| e.mean_abs_deviation_from(*xi)).sum(),
        }
    }
}

/// A sampled convex problem over a compact box with a chain-constrained domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticProblem {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Deterministic rows `a^T x <= b` of `X`.
    #[serde(default)]
    pub constraints: Vec<(Vec<f64>, f64)>,
    pub objective: Objective,
    /// `None` means `dom f_xi = R^n`.
    #[serde(default)]
    pub domain: Option<ChainDomainSpec>,
}

impl StochasticProblem {
    /// Structural checks plus non-emptiness of `X ∩ dom F`.
    pub fn validate(&self) -> Result<(), SaaError> {
        let n = self.dim;
        if self.lower.len() != n || self.upper.len() != n {
            return Err(SaaError::Invalid("box bounds must have length dim".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(SaaError::Invalid("box must be finite with lower <= upper".into()));
        }
        if self.constraints.iter().any(|(a, b)| a.len() != n || !b.is_finite()) {
            return Err(SaaError::Invalid("constraint rows must have length dim".into()));
        }
        if self.objective.dim() != n {
            return Err(SaaError::Invalid(format!("objective has dimension {}, problem {n}", self.objective.dim())));
        }
        self.objective.validate()?;
        if let Some(spec) = &self.domain {
            if spec.dim != n {
                return Err(SaaError::Invalid("domain dimension differs from problem".into()));
            }
            spec.validate()?;
            let with_x = self.with_x_rows(spec);
            with_x.check_nonempty(&self.lower, &self.upper).map_err(|e| match e {
                ChainError::EmptyDomain => SaaError::Invalid("X ∩ dom F is empty".into()),
                other => other.into(),
            })?;
        }
        Ok(())
    }

    /// The domain with the rows of `X` appended as deterministic chains.
    fn with_x_rows(&self, spec: &ChainDomainSpec) -> ChainDomainSpec {
        let mut s = spec.clone();
        for (a, b) in &self.constraints {
            s.chains.push(crate::chain::Chain {
                constraint: ConstraintFn::affine(a.clone(), 0.0),
                threshold: Distribution::point(*b),
            });
        }
        s
    }
}

/// An assembled SAA problem: the sample plus aggregated objective data.
#[derive(Debug, Clone)]
pub struct SaaInstance<'a> {
    pub problem: &'a StochasticProblem,
    pub n: usize,
    pub thresholds: Option<ThresholdSample>,
    /// Row-major `N x dim` objective noise draws.
    pub draws: Vec<f64>,
    mean_draw: Vec<f64>,
    mean_sq_norm: f64,
}

/// Draws the sample and builds the instance. Thresholds come from the
/// `Threshold` stream of `seed` and objective noise from the `Objective`
/// stream, so the two can be varied independently.
pub fn assemble_saa<'a>(problem: &'a StochasticProblem, n: usize, seed: &SeedSpec) -> Result<SaaInstance<'a>, SaaError> {
    let thresholds = match &problem.domain {
        Some(spec) => Some(crate::chain::sample_thresholds(spec, n, seed)?),
        None => None,
    };
    assemble_with_thresholds(problem, thresholds, n, seed)
}

/// As [`assemble_saa`] with a given threshold sample.
pub fn assemble_with_thresholds<'a>(
    problem: &'a StochasticProblem,
    thresholds: Option<ThresholdSample>,
    n: usize,
    seed: &SeedSpec,
) -> Result<SaaInstance<'a>, SaaError> {
    if n == 0 {
        return Err(SaaError::Invalid("sample size must be at least 1".into()));
    }
    if let Some(t) = &thresholds {
        if t.n != n {
            return Err(SaaError::Invalid(format!("threshold sample has {} rows, expected {n}", t.n)));
        }
    }
    let dim = problem.dim;
    let laws = problem.objective.laws();
    let mut rng = seed.with_role(StreamRole::Objective).rng();
    let mut draws = vec![0.0; n * dim];
    for row in draws.chunks_mut(dim) {
        for (v, law) in row.iter_mut().zip(laws) {
            *v = law.sample(&mut rng);
        }
    }
    let mut mean_draw = vec![0.0; dim];
    let mut mean_sq_norm = 0.0;
    for row in draws.chunks(dim) {
        for (m, v) in mean_draw.iter_mut().zip(row) {
            *m += v;
        }
        if let Objective::Squared { target, .. } = &problem.objective {
            mean_sq_norm += row.iter().zip(target).map(|(e, t)| (t + e).powi(2)).sum::<f64>();
        }
    }
    let nf = n as f64;
    mean_draw.iter_mut().for_each(|m| *m /= nf);
    mean_sq_norm /= nf;
    Ok(SaaInstance {
        problem,
        n,
        thresholds,
        draws,
        mean_draw,
        mean_sq_norm,
    })
}

impl SaaInstance<'_> {
    fn draw(&self, i: usize) -> &[f64] {
        let d = self.problem.dim;
        &self.draws[i * d..(i + 1) * d]
    }

    /// `F_N(x) = (1/N) sum_i f_{xi^i}(x)`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        match &self.problem.objective {
            Objective::Linear { .. } => dot(&self.mean_draw, x),
            Objective::Squared { target, .. } => {
                // |x|^2 - 2 x^T (target + mean eta) + mean |target + eta|^2
                let center: Vec<f64> = target.iter().zip(&self.mean_draw).map(|(t, e)| t + e).collect();
                dot(x, x) - 2.0 * dot(x, &center) + self.mean_sq_norm
            }
            Objective::Absolute { .. } => {
                (0..self.n).map(|i| self.problem.objective.eval_single(self.draw(i), x)).sum::<f64>() / self.n as f64
            }
        }
    }

    /// A subgradient of `F_N` at `x`.
    pub fn objective_subgradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.problem.objective {
            Objective::Linear { .. } => self.mean_draw.clone(),
            Objective::Squared { target, .. } => x
                .iter()
                .zip(target)
                .zip(&self.mean_draw)
                .map(|((xi, t), e)| 2.0 * (xi - t - e))
                .collect(),
            Objective::Absolute { .. } => {
                let mut g = vec![0.0; x.len()];
                for i in 0..self.n {
                    for ((gj, xj), e) in g.iter_mut().zip(x).zip(self.draw(i)) {
                        *gj += if xj > e {
                            1.0
                        } else if xj < e {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
                g.iter_mut().for_each(|v| *v /= self.n as f64);
                g
            }
        }
    }

    /// SAA thresholds: per-chain minima, or `+inf` when there is no domain.
    pub fn saa_thresholds(&self) -> Vec<f64> {
        self.thresholds.as_ref().map(|t| t.minima.clone()).unwrap_or_default()
    }

    /// Largest violation of the SAA domain and `X` at `x` (`<= 0` inside).
    pub fn domain_residual(&self, x: &[f64]) -> f64 {
        let mut r = f64::NEG_INFINITY;
        if let (Some(spec), Some(t)) = (&self.problem.domain, &self.thresholds) {
            for (ch, m) in spec.chains.iter().zip(&t.minima) {
                r = r.max(ch.constraint.eval(x) - m);
            }
        }
        for (a, b) in &self.problem.constraints {
            r = r.max(dot(a, x) - b);
        }
        for ((xi, l), u) in x.iter().zip(&self.problem.lower).zip(&self.problem.upper) {
            r = r.max(l - xi).max(xi - u);
        }
        r
    }

    /// All affine rows `a^T x <= b` of the SAA domain and `X`, if every chain
    /// is affine; `None` otherwise.
    fn affine_rows(&self) -> Option<Vec<(Vec<f64>, f64)>> {
        let mut rows = self.problem.constraints.clone();
        if let (Some(spec), Some(t)) = (&self.problem.domain, &self.thresholds) {
            for (ch, m) in spec.chains.iter().zip(&t.minima) {
                let (a, b) = ch.constraint.as_affine()?;
                rows.push((a.to_vec(), m - b));
            }
        }
        Some(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaaSolution {
    pub x: Vec<f64>,
    pub value: f64,
    /// Certified optimality gap (zero for the exact solvers).
    pub gap: f64,
    /// Largest violation of the SAA domain and `X` (`<= 0` means inside).
    pub residual: f64,
}

/// Solves the SAA problem with a certified gap `<= tol`.
///
/// Linear objectives over affine domains go to the simplex solver, with ties
/// broken by lexicographic minimality. Squared objectives over affine domains
/// are a Euclidean projection onto a polytope, solved exactly by active-set
/// enumeration. Everything else uses Kelley's cutting-plane method.
pub fn solve_convex(instance: &SaaInstance<'_>, tol: f64) -> Result<SaaSolution, SaaError> {
    let p = instance.problem;
    let affine = instance.affine_rows();
    let x = match (&p.objective, affine) {
        (Objective::Linear { .. }, Some(rows)) => {
            lex_min_lp(&instance.mean_draw, &rows, &p.lower, &p.upper)?.ok_or(SaaError::SaaInfeasible)?
        }
        (Objective::Squared { target, .. }, Some(rows)) if active_set_count(rows.len() + 2 * p.dim, p.dim) <= MAX_ACTIVE_SETS => {
            let center: Vec<f64> = target.iter().zip(&instance.mean_draw).map(|(t, e)| t + e).collect();
            project_onto_polytope(&center, &rows, &p.lower, &p.upper).ok_or(SaaError::SaaInfeasible)?
        }
        _ => {
            let spec_owned;
            let (spec, thresholds): (Option<&ChainDomainSpec>, Vec<f64>) = match &p.domain {
                Some(s) => {
                    spec_owned = p.with_x_rows(s);
                    let mut t = instance.saa_thresholds();
                    t.extend(p.constraints.iter().map(|(_, b)| *b));
                    (Some(&spec_owned), t)
                }
                None => (None, Vec::new()),
            };
            let objective: Box<Oracle<'_>> =
                Box::new(|x: &[f64]| (instance.objective_value(x), instance.objective_subgradient(x)));
            let problem = match spec {
                Some(s) => s.cutting_plane_problem(&thresholds, &p.lower, &p.upper, objective),
                None => kelley::CuttingPlaneProblem {
                    lower: p.lower.clone(),
                    upper: p.upper.clone(),
                    affine: p.constraints.clone(),
                    convex: Vec::new(),
                    objective,
                },
            };
            let settings = kelley::Settings {
                tol,
                ..Default::default()
            };
            let sol = kelley::minimize(&problem, &settings)?;
            return Ok(SaaSolution {
                residual: instance.domain_residual(&sol.x),
                gap: sol.gap(),
                value: sol.value,
                x: sol.x,
            });
        }
    };
    Ok(SaaSolution {
        value: instance.objective_value(&x),
        residual: instance.domain_residual(&x),
        gap: 0.0,
        x,
    })
}

fn active_set_count(rows: usize, n: usize) -> usize {
    let mut total = 0usize;
    let mut c = 1usize;
    for k in 0..=n.min(rows) {
        total = total.saturating_add(c);
        c = c.saturating_mul(rows - k) / (k + 1);
    }
    total
}

/// `min c^T x` over `{lower <= x <= upper, a^T x <= b}`, then the
/// lexicographically smallest optimal point. `Ok(None)` when infeasible.
pub fn lex_min_lp(c: &[f64], rows: &[(Vec<f64>, f64)], lower: &[f64], upper: &[f64]) -> Result<Option<Vec<f64>>, SaaError> {
    let n = c.len();
    let mut a: Vec<Vec<f64>> = rows.iter().map(|(r, _)| r.clone()).collect();
    let mut b: Vec<f64> = rows.iter().map(|(_, v)| *v).collect();
    let bounds: Vec<(f64, f64)> = lower.iter().zip(upper).map(|(l, u)| (*l, *u)).collect();
    let mut objective = c.to_vec();
    let mut x = None;
    for stage in 0..=n {
        if stage > 0 {
            objective = vec![0.0; n];
            objective[stage - 1] = 1.0;
        }
        let m = a.len();
        let p = LpProblem {
            objective: objective.clone(),
            matrix: if m == 0 { Matrix::zeros(0, n) } else { Matrix::from_rows(&a)? },
            rhs: b.clone(),
            senses: vec![RowSense::Le; m],
            bounds: bounds.clone(),
        };
        let r = lp_solve(&p)?;
        match r.status {
            LpStatus::Optimal => {}
            LpStatus::Infeasible if stage == 0 => return Ok(None),
            LpStatus::Infeasible => break,
            LpStatus::Unbounded => return Err(SaaError::Unbounded),
        }
        // pin the objective just reached before refining the next coordinate
        let slack = LEX_SLACK * (1.0 + r.value.abs());
        a.push(objective.clone());
        b.push(r.value + slack);
        x = Some(r.x);
    }
    Ok(x)
}

/// Euclidean projection of `z` onto `{lower <= x <= upper, a^T x <= b}`.
///
/// The projection lies in the relative interior of some face, so it is the
/// projection onto the affine hull of at most `n` linearly independent active
/// rows; the closest feasible such candidate is the answer.
pub fn project_onto_polytope(z: &[f64], rows: &[(Vec<f64>, f64)], lower: &[f64], upper: &[f64]) -> Option<Vec<f64>> {
    let n = z.len();
    let mut all: Vec<(Vec<f64>, f64)> = rows.to_vec();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        all.push((e.clone(), upper[j]));
        e[j] = -1.0;
        all.push((e, -lower[j]));
    }
    let feasible = |x: &[f64]| {
        all.iter().all(|(a, b)| dot(a, x) <= b + DOMAIN_TOL * (1.0 + b.abs()))
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |x: Vec<f64>| {
        if feasible(&x) {
            let d: f64 = x.iter().zip(z).map(|(u, v)| (u - v).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, x));
            }
        }
    };
    consider(z.to_vec());
    let m = all.len();
    let mut subset: Vec<usize> = Vec::new();
    fn visit(start: usize, m: usize, n: usize, subset: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if !subset.is_empty() {
            f(subset);
        }
        if subset.len() == n {
            return;
        }
        for i in start..m {
            subset.push(i);
            visit(i + 1, m, n, subset, f);
            subset.pop();
        }
    }
    visit(0, m, n, &mut subset, &mut |s: &[usize]| {
        let k = s.len();
        let a = nalgebra::DMatrix::from_fn(k, n, |i, j| all[s[i]].0[j]);
        let gram = &a * a.transpose();
        if gram.determinant().abs() <= 1e-12 {
            return;
        }
        let Some(inv) = gram.try_inverse() else {
            return;
        };
        let zv = nalgebra::DVector::from_column_slice(z);
        let bv = nalgebra::DVector::from_fn(k, |i, _| all[s[i]].1);
        let lambda = inv * (&a * &zv - bv);
        let x = zv - a.transpose() * lambda;
        consider(x.iter().copied().collect());
    });
    best.map(|(_, x)| {
        // snap to the box to remove round-off outside it
        x.iter().zip(lower.iter().zip(upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect()
    })
}

/// Uniform deviation diagnostic over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformDeviation {
    pub max_deviation: f64,
    /// Largest standard error of the reference `F` values (zero when exact).
    pub reference_error: f64,
}

/// `max_x |F_N(x) - F(x)|` over `grid`, with `F` in closed form when
/// available and otherwise a Monte Carlo reference with `reference_draws`.
pub fn estimate_uniform_deviation(
    instance: &SaaInstance<'_>,
    grid: &[Vec<f64>],
    reference_draws: u64,
    seed: &SeedSpec,
) -> Result<UniformDeviation, SaaError> {
    let obj = &instance.problem.objective;
    let mut out = UniformDeviation {
        max_deviation: 0.0,
        reference_error: 0.0,
    };
    for x in grid {
        if x.len() != instance.problem.dim {
            return Err(SaaError::Invalid("grid point has the wrong dimension".into()));
        }
        let saa = instance.objective_value(x);
        let (reference, err) = match obj.expectation(x) {
            Some(v) => (v, 0.0),
            None => {
                if reference_draws == 0 {
                    return Err(SaaError::Invalid("no closed-form expectation and no reference draws".into()));
                }
                let mut rng = seed.with_role(StreamRole::Oracle).rng();
                let laws = obj.laws();
                let mut draw = vec![0.0; laws.len()];
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..reference_draws {
                    for (d, law) in draw.iter_mut().zip(laws) {
                        *d = law.sample(&mut rng);
                    }
                    let v = obj.eval_single(&draw, x);
                    s += v;
                    s2 += v * v;
                }
                let m = reference_draws as f64;
                let mean = s / m;
                let var = (s2 / m - mean * mean).max(0.0);
                (mean, (var / m).sqrt())
            }
        };
        out.max_deviation = out.max_deviation.max((saa - reference).abs());
        out.reference_error = out.reference_error.max(err);
    }
    Ok(out)
}

/// `min c^T x + E[min { g^T y : W y = h_xi - T x, y >= 0 }]` over a box and
/// affine rows; `h` has independent components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageProblem {
    pub c: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub constraints: Vec<(Vec<f64>, f64)>,
    pub w: Matrix,
    pub t: Matrix,
    pub h: Vec<Distribution>,
    pub g: Vec<f64>,
}

impl TwoStageProblem {
    pub fn validate(&self) -> Result<(), SaaError> {
        let n = self.c.len();
        let d = self.w.rows();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(SaaError::Invalid("box bounds must match c".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(SaaError::Invalid("box must be finite with lower <= upper".into()));
        }
        if self.t.rows() != d || self.t.cols() != n || self.h.len() != d || self.g.len() != self.w.cols() {
            return Err(SaaError::Invalid(format!(
                "shapes: W {}x{}, T {}x{}, h {}, g {}, c {}",
                d,
                self.w.cols(),
                self.t.rows(),
                self.t.cols(),
                self.h.len(),
                self.g.len(),
                n
            )));
        }
        if self.constraints.iter().any(|(a, _)| a.len() != n) {
            return Err(SaaError::Invalid("constraint rows must match c".into()));
        }
        for law in &self.h {
            law.validate()?;
        }
        Ok(())
    }

    /// Chain-constrained domain induced by the recourse cone generators:
    /// `x` is second-stage feasible for `h` iff `r_i^T T x <= r_i^T h` for
    /// every ray. Returns `None` unless every ray reads a single component
    /// of `h`, distinct rays read distinct components, and there is no
    /// lineality, since only then are the thresholds independent scalars.
    pub fn induced_chains(&self, gen: &ConeGenerators) -> Option<ChainDomainSpec> {
        if !gen.lineality.is_empty() || gen.rays.is_empty() {
            return None;
        }
        let mut used = vec![false; self.h.len()];
        let mut chains = Vec::new();
        for r in &gen.rays {
            let nz: Vec<usize> = (0..r.len()).filter(|&j| r[j].abs() > 1e-12).collect();
            if nz.len() != 1 || used[nz[0]] {
                return None;
            }
            let j = nz[0];
            used[j] = true;
            chains.push(crate::chain::Chain {
                constraint: ConstraintFn::affine(self.t.vec_mul(r), 0.0),
                threshold: Distribution::affine(self.h[j].clone(), 0.0, r[j]),
            });
        }
        Some(ChainDomainSpec {
            dim: self.c.len(),
            chains,
            independent_thresholds: true,
        })
    }
}

/// A sampled two-stage instance: the right-hand sides `h_{xi^i}`.
#[derive(Debug, Clone)]
pub struct TwoStageInstance<'a> {
    pub problem: &'a TwoStageProblem,
    /// Row-major `N x d`.
    pub h: Vec<f64>,
    pub n: usize,
}

impl<'a> TwoStageInstance<'a> {
    /// Samples `h` from the `Threshold` stream of `seed`.
    pub fn sample(problem: &'a TwoStageProblem, n: usize, seed: &SeedSpec) -> Result<Self, SaaError> {
        if n == 0 {
            return Err(SaaError::Invalid("sample size must be at least 1".into()));
        }
        let d = problem.h.len();
        let mut rng = seed.with_role(StreamRole::Threshold).rng();
        let mut h = vec![0.0; n * d];
        for row in h.chunks_mut(d) {
            for (v, law) in row.iter_mut().zip(&problem.h) {
                *v = law.sample(&mut rng);
            }
        }
        Ok(TwoStageInstance { problem, h, n })
    }

    pub fn scenario(&self, i: usize) -> &[f64] {
        let d = self.problem.h.len();
        &self.h[i * d..(i + 1) * d]
    }

    /// `c^T x + (1/N) sum_i Q(x, xi^i)`, `+inf` if some scenario is infeasible.
    pub fn value_at(&self, x: &[f64]) -> Result<f64, SaaError> {
        let p = self.problem;
        let mut total = 0.0;
        for i in 0..self.n {
            let q = crate::polyhedral::second_stage_value(&p.w, &p.t, self.scenario(i), &p.g, x)?;
            if q == f64::INFINITY {
                return Ok(f64::INFINITY);
            }
            total += q;
        }
        Ok(dot(&p.c, x) + total / self.n as f64)
    }
}

/// Solves the deterministic-equivalent LP, then refines the first-stage
/// decision to the lexicographically smallest optimal one.
pub fn solve_two_stage(instance: &TwoStageInstance<'_>) -> Result<SaaSolution, SaaError> {
    let p = instance.problem;
    let n1 = p.c.len();
    let (d, q) = (p.w.rows(), p.w.cols());
    let nn = instance.n;
    let nv = n1 + nn * q;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let mut senses = Vec::new();
    for i in 0..nn {
        let h = instance.scenario(i);
        for r in 0..d {
            let mut row = vec![0.0; nv];
            row[..n1].copy_from_slice(p.t.row(r));
            row[n1 + i * q..n1 + (i + 1) * q].copy_from_slice(p.w.row(r));
            rows.push(row);
            rhs.push(h[r]);
            senses.push(RowSense::Eq);
        }
    }
    for (a, b) in &p.constraints {
        let mut row = vec![0.0; nv];
        row[..n1].copy_from_slice(a);
        rows.push(row);
        rhs.push(*b);
        senses.push(RowSense::Le);
    }
    let mut objective = vec![0.0; nv];
    objective[..n1].copy_from_slice(&p.c);
    for i in 0..nn {
        for j in 0..q {
            objective[n1 + i * q + j] = p.g[j] / nn as f64;
        }
    }
    let mut bounds: Vec<(f64, f64)> = p.lower.iter().zip(&p.upper).map(|(l, u)| (*l, *u)).collect();
    bounds.extend(std::iter::repeat_n((0.0, f64::INFINITY), nn * q));
    let mut lp = LpProblem {
        objective,
        matrix: Matrix::from_rows(&rows)?,
        rhs,
        senses,
        bounds,
    };
    let r = lp_solve(&lp)?;
    match r.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(SaaError::ExtensiveFormInfeasible),
        LpStatus::Unbounded => return Err(SaaError::Unbounded),
    }
    let value = r.value;
    let mut x: Vec<f64> = r.x[..n1].to_vec();
    // lexicographic refinement of the first-stage decision
    let full_objective = lp.objective.clone();
    let mut pins: Vec<(Vec<f64>, f64)> = vec![(full_objective.clone(), value + LEX_SLACK * (1.0 + value.abs()))];
    let mut value = value;
    let (base_rhs, base_senses) = (lp.rhs.clone(), lp.senses.clone());
    for j in 0..n1 {
        let mut m_rows = rows.clone();
        let mut m_rhs = base_rhs.clone();
        let mut m_senses = base_senses.clone();
        for (a, b) in &pins {
            m_rows.push(a.clone());
            m_rhs.push(*b);
            m_senses.push(RowSense::Le);
        }
        let mut obj = vec![0.0; nv];
        obj[j] = 1.0;
        lp.objective = obj.clone();
        lp.matrix = Matrix::from_rows(&m_rows)?;
        lp.rhs = m_rhs;
        lp.senses = m_senses;
        let rj = lp_solve(&lp)?;
        if rj.status != LpStatus::Optimal {
            break;
        }
        x = rj.x[..n1].to_vec();
        value = dot(&full_objective, &rj.x);
        pins.push((obj, rj.value + LEX_SLACK * (1.0 + rj.value.abs())));
    }
    let residual = p
        .constraints
        .iter()
        .map(|(a, b)| dot(a, &x) - b)
        .chain(x.iter().zip(p.lower.iter().zip(&p.upper)).map(|(v, (l, u))| (l - v).max(v - u)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SaaSolution {
        x,
        value,
        gap: 0.0,
        residual,
    })
}

/// `P{l_k >= c_k(x)}` for the domain of `problem` at `x`, or 1 without a
/// domain. Exact for independent and comonotone thresholds alike.
pub fn dof_of_solution(problem: &StochasticProblem, x: &[f64]) -> Result<Estimate, SaaError> {
    match &problem.domain {
        None => Ok(Estimate::exact(1.0)),
        Some(spec) => {
            let levels: Vec<f64> = spec.chains.iter().map(|ch| ch.constraint.eval(x)).collect();
            Ok(Estimate::exact(spec.threshold_probability(&levels)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Chain;
    use crate::polyhedral::enumerate_rays;

    fn seed() -> SeedSpec {
        SeedSpec::new(11, 0, 0, StreamRole::Threshold)
    }

    fn one_d(objective: Objective, domain: Option<ChainDomainSpec>) -> StochasticProblem {
        StochasticProblem {
            dim: 1,
            lower: vec![-2.0],
            upper: vec![2.0],
            constraints: vec![],
            objective,
            domain,
        }
    }

    #[test]
    fn deterministic_objective_ignores_sample() {
        let p = one_d(
            Objective::Squared {
                target: vec![0.3],
                noise: vec![Distribution::point(0.0)],
            },
            None,
        );
        let inst = assemble_saa(&p, 7, &seed()).unwrap();
        assert!((inst.objective_value(&[1.0]) - 0.49).abs() < 1e-12);
        let s = solve_convex(&inst, 1e-6).unwrap();
        assert!((s.x[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn absolute_objective_arithmetic() {
        let p = one_d(
            Objective::Absolute {
                noise: vec![Distribution::uniform(0.0, 1.0)],
            },
            None,
        );
        let mut inst = assemble_saa(&p, 3, &seed()).unwrap();
        inst.draws = vec![0.1, 0.5, 0.9];
        assert!((inst.objective_value(&[0.5]) - 0.8 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn median_capped_by_threshold_minimum() {
        let domain = ChainDomainSpec {
            dim: 1,
            chains: vec![Chain {
                constraint: ConstraintFn::affine(vec![1.0], 0.0),
                threshold: Distribution::uniform(0.3, 1.0),
            }],
            independent_thresholds: true,
        };
        let p = one_d(
            Objective::Absolute {
                noise: vec![Distribution::uniform(0.0, 1.0)],
            },
            Some(domain),
        );
        for trial in 0..5 {
            let inst = assemble_saa(&p, 9, &seed().with_trial(trial)).unwrap();
            let s = solve_convex(&inst, 1e-7).unwrap();
            let mut eta = inst.draws.clone();
            eta.sort_by(f64::total_cmp);
            let expected = eta[4].min(inst.thresholds.as_ref().unwrap().minima[0]);
            // the 1-D grid oracle at 1e-4 resolution
            let grid_best = (0..=40_000)
                .map(|i| -2.0 + i as f64 * 1e-4)
                .filter(|x| *x <= inst.thresholds.as_ref().unwrap().minima[0])
                .map(|x| inst.objective_value(&[x]))
                .fold(f64::INFINITY, f64::min);
            assert!(s.value <= grid_best + 1e-6);
            assert!((inst.objective_value(&[expected]) - s.value).abs() <= 1e-6);
            assert!(s.residual <= DOMAIN_TOL);
        }
    }

    #[test]
    fn projection_matches_cutting_plane() {
        let domain = ChainDomainSpec {
            dim: 2,
            chains: vec![
                Chain {
                    constraint: ConstraintFn::affine(vec![1.0, 1.0], 0.0),
                    threshold: Distribution::uniform(0.0, 1.0),
                },
                Chain {
                    constraint: ConstraintFn::affine(vec![-1.0, 2.0], 0.0),
                    threshold: Distribution::uniform(0.0, 0.5),
                },
            ],
            independent_thresholds: true,
        };
        let p = StochasticProblem {
            dim: 2,
            lower: vec![-3.0, -3.0],
            upper: vec![3.0, 3.0],
            constraints: vec![],
            objective: Objective::Squared {
                target: vec![1.0, 1.0],
                noise: vec![Distribution::normal(0.0, 0.3), Distribution::normal(0.0, 0.3)],
            },
            domain: Some(domain),
        };
        for trial in 0..5 {
            let inst = assemble_saa(&p, 20, &seed().with_trial(trial)).unwrap();
            let exact = solve_convex(&inst, 1e-8).unwrap();
            let rows = inst.affine_rows().unwrap();
            let prob = kelley::CuttingPlaneProblem {
                lower: p.lower.clone(),
                upper: p.upper.clone(),
                affine: rows,
                convex: vec![],
                objective: Box::new(|x: &[f64]| (inst.objective_value(x), inst.objective_subgradient(x))),
            };
            let kp = kelley::minimize(&prob, &kelley::Settings { tol: 1e-8, max_iterations: 2000 }).unwrap();
            assert!((kp.value - exact.value).abs() < 1e-7, "{} vs {}", kp.value, exact.value);
            assert!(exact.residual <= DOMAIN_TOL);
        }
    }

    #[test]
    fn lexicographic_tie_break() {
        // min x1 + x2 over x1 + x2 >= 1 in [0, 1]^2: optimal face is a segment
        let x = lex_min_lp(&[1.0, 1.0], &[(vec![-1.0, -1.0], -1.0)], &[0.0, 0.0], &[1.0, 1.0])
            .unwrap()
            .unwrap();
        assert!(x[0].abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8, "{x:?}");
    }

    #[test]
    fn uniform_deviation_linear() {
        let p = one_d(
            Objective::Linear {
                coefs: vec![Distribution::uniform(0.0, 1.0)],
            },
            None,
        );
        let inst = assemble_saa(&p, 50, &seed()).unwrap();
        let dev = estimate_uniform_deviation(&inst, &[vec![0.0], vec![1.0]], 0, &seed()).unwrap();
        let mean: f64 = inst.draws.iter().sum::<f64>() / 50.0;
        assert!((dev.max_deviation - (mean - 0.5).abs()).abs() < 1e-15);
        assert_eq!(dev.reference_error, 0.0);
        let det = one_d(
            Objective::Linear {
                coefs: vec![Distribution::point(2.0)],
            },
            None,
        );
        let inst = assemble_saa(&det, 5, &seed()).unwrap();
        assert_eq!(estimate_uniform_deviation(&inst, &[vec![1.5]], 0, &seed()).unwrap().max_deviation, 0.0);
    }

    fn simple_two_stage() -> TwoStageProblem {
        TwoStageProblem {
            c: vec![-1.0],
            lower: vec![0.0],
            upper: vec![3.0],
            constraints: vec![],
            w: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            t: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            h: vec![Distribution::uniform(1.0, 2.0)],
            g: vec![1.0],
        }
    }

    #[test]
    fn two_stage_pushes_to_recourse_boundary() {
        let p = simple_two_stage();
        for trial in 0..5 {
            let inst = TwoStageInstance::sample(&p, 8, &seed().with_trial(trial)).unwrap();
            let s = solve_two_stage(&inst).unwrap();
            let hmin = inst.h.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((s.x[0] - hmin).abs() < 1e-9);
            assert!((inst.value_at(&s.x).unwrap() - s.value).abs() < 1e-9);
        }
    }

    #[test]
    fn complete_recourse_ignores_recourse_constraints() {
        let mut p = simple_two_stage();
        p.w = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        p.g = vec![0.0, 0.0];
        let inst = TwoStageInstance::sample(&p, 5, &seed()).unwrap();
        let s = solve_two_stage(&inst).unwrap();
        assert!((s.x[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn induced_chain_domain() {
        let p = simple_two_stage();
        let gen = enumerate_rays(&p.w).unwrap();
        let spec = p.induced_chains(&gen).unwrap();
        assert_eq!(spec.order(), 1);
        assert!((spec.threshold_probability(&[1.25]).unwrap() - 0.75).abs() < 1e-12);
        assert!(crate::chain::domain_contains(&spec, &[1.25], &[1.3]).unwrap());
    }

    #[test]
    fn single_scenario_matches_merged_lp() {
        let p = simple_two_stage();
        let inst = TwoStageInstance::sample(&p, 1, &seed()).unwrap();
        let s = solve_two_stage(&inst).unwrap();
        // merged LP: min -x + y, x + y = h, 0 <= x <= 3, y >= 0
        let lp = LpProblem {
            objective: vec![-1.0, 1.0],
            matrix: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            rhs: vec![inst.h[0]],
            senses: vec![RowSense::Eq],
            bounds: vec![(0.0, 3.0), (0.0, f64::INFINITY)],
        };
        assert!((lp_solve(&lp).unwrap().value - s.value).abs() < 1e-9);
    }

    #[test]
    fn two_stage_refines_several_first_stage_variables() {
        // x_1 has no recourse cost and a free choice in [0, 2]; the
        // lexicographic refinement must pick x_1 = 0 while x_2 = min h
        let p = TwoStageProblem {
            c: vec![0.0, -1.0],
            lower: vec![0.0, 0.0],
            upper: vec![2.0, 3.0],
            constraints: vec![],
            w: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            t: Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            h: vec![Distribution::uniform(1.0, 2.0)],
            g: vec![1.0],
        };
        let inst = TwoStageInstance::sample(&p, 6, &seed()).unwrap();
        let s = solve_two_stage(&inst).unwrap();
        let hmin = inst.h.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(s.x[0].abs() < 1e-9, "{:?}", s.x);
        assert!((s.x[1] - hmin).abs() < 1e-9, "{:?}", s.x);
    }
}
