//! Chain-constrained domains `{x : c_k(x) <= l_k(xi), k = 1..m}` and their
//! degree-of-feasibility quantities.
//!
//! Each chain pairs a convex constraint function `c_k` with a scalar random
//! threshold `l_k`. Membership uses the non-strict inequality, so boundary
//! points are feasible, and the analytic probabilities count an atom sitting
//! exactly at `c_k(x)`.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kelley::{self, CuttingPlaneError, CuttingPlaneProblem, Oracle};
use crate::polyhedral::matrix::{dot, norm, Matrix};
use crate::rng::{open_unit, DistError, Distribution, SeedSpec, StreamRole};
use crate::stats::Estimate;

/// Eigenvalue tolerance for the positive semidefinite check.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadratic form is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("chain {0}: threshold law has essential infimum -inf")]
    UnboundedThreshold(usize),
    #[error("domain spec needs at least one chain")]
    NoChains,
    #[error("deterministic domain {{x : c_k(x) <= ess inf l_k}} is empty within the search box")]
    EmptyDomain,
    #[error("analytic mode requires independent thresholds")]
    AnalyticNeedsIndependence,
    #[error("Monte Carlo estimate needs at least one draw")]
    NoDraws,
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error("feasibility oracle failed: {0}")]
    Oracle(String),
}

/// A convex scalar function of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintFn {
    /// `a^T x + b`
    Affine {
        a: Vec<f64>,
        #[serde(default)]
        b: f64,
    },
    /// `x^T Q x + a^T x + b` with `Q` positive semidefinite.
    Quadratic {
        q: Matrix,
        a: Vec<f64>,
        #[serde(default)]
        b: f64,
    },
    /// `|x - center|`
    Norm { center: Vec<f64> },
}

impl ConstraintFn {
    pub fn affine(a: Vec<f64>, b: f64) -> Self {
        ConstraintFn::Affine { a, b }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConstraintFn::Affine { a, .. } | ConstraintFn::Quadratic { a, .. } => a.len(),
            ConstraintFn::Norm { center } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            ConstraintFn::Affine { a, b } => {
                if !finite(a) || !b.is_finite() {
                    return Err(ChainError::Dimension("affine coefficients must be finite".into()));
                }
            }
            ConstraintFn::Quadratic { q, a, b } => {
                let n = a.len();
                if q.rows() != n || q.cols() != n {
                    return Err(ChainError::Dimension(format!(
                        "Q is {} x {} but a has length {n}",
                        q.rows(),
                        q.cols()
                    )));
                }
                if !finite(a) || !b.is_finite() {
                    return Err(ChainError::Dimension("quadratic coefficients must be finite".into()));
                }
                let qm = q.to_nalgebra();
                let sym = (&qm + qm.transpose()) * 0.5;
                let min_eig = sym.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, b| a.min(*b));
                if min_eig < -PSD_TOL {
                    return Err(ChainError::NotConvex(min_eig));
                }
            }
            ConstraintFn::Norm { center } => {
                if !finite(center) {
                    return Err(ChainError::Dimension("norm center must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ConstraintFn::Affine { a, b } => dot(a, x) + b,
            ConstraintFn::Quadratic { q, a, b } => dot(x, &q.mul_vec(x)) + dot(a, x) + b,
            ConstraintFn::Norm { center } => {
                let d: Vec<f64> = x.iter().zip(center).map(|(u, v)| u - v).collect();
                norm(&d)
            }
        }
    }

    /// One subgradient at `x` (the gradient where differentiable).
    pub fn subgradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ConstraintFn::Affine { a, .. } => a.clone(),
            ConstraintFn::Quadratic { q, a, .. } => {
                let qx = q.mul_vec(x);
                let qtx = q.vec_mul(x);
                qx.iter().zip(&qtx).zip(a).map(|((u, v), w)| u + v + w).collect()
            }
            ConstraintFn::Norm { center } => {
                let d: Vec<f64> = x.iter().zip(center).map(|(u, v)| u - v).collect();
                let r = norm(&d);
                if r == 0.0 {
                    vec![0.0; d.len()]
                } else {
                    d.iter().map(|v| v / r).collect()
                }
            }
        }
    }

    /// `(a, b)` when the function is affine.
    pub fn as_affine(&self) -> Option<(&[f64], f64)> {
        match self {
            ConstraintFn::Affine { a, b } => Some((a, *b)),
            _ => None,
        }
    }
}

/// One chain: `c(x) <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub constraint: ConstraintFn,
    pub threshold: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDomainSpec {
    pub dim: usize,
    pub chains: Vec<Chain>,
    /// Independent thresholds when true; otherwise comonotone, driven by one
    /// shared uniform per sample row.
    #[serde(default = "default_true")]
    pub independent_thresholds: bool,
}

fn default_true() -> bool {
    true
}

impl ChainDomainSpec {
    pub fn order(&self) -> usize {
        self.chains.len()
    }

    /// Structural checks: dimensions, convexity, laws, finite essential infima.
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.chains.is_empty() {
            return Err(ChainError::NoChains);
        }
        for (k, ch) in self.chains.iter().enumerate() {
            if ch.constraint.dim() != self.dim {
                return Err(ChainError::Dimension(format!(
                    "chain {k} has dimension {} but the domain has {}",
                    ch.constraint.dim(),
                    self.dim
                )));
            }
            ch.constraint.validate()?;
            ch.threshold.validate()?;
            if ch.threshold.quantile_beta(0.0)? == f64::NEG_INFINITY {
                return Err(ChainError::UnboundedThreshold(k));
            }
        }
        Ok(())
    }

    /// Essential infima `(l_k)_0`.
    pub fn essential_infima(&self) -> Vec<f64> {
        self.chains
            .iter()
            .map(|c| c.threshold.quantile_beta(0.0).unwrap_or(f64::NEG_INFINITY))
            .collect()
    }

    /// Finds a point of `{x in box : c_k(x) <= t_k}` with the cutting-plane
    /// feasibility oracle, or reports the set empty.
    pub fn feasible_point(&self, thresholds: &[f64], lower: &[f64], upper: &[f64]) -> Result<Vec<f64>, ChainError> {
        let problem = self.cutting_plane_problem(thresholds, lower, upper, Box::new(|_: &[f64]| (0.0, vec![0.0; lower.len()])));
        kelley::find_feasible_point(&problem, &kelley::Settings::default()).map_err(|e| match e {
            CuttingPlaneError::Infeasible => ChainError::EmptyDomain,
            other => ChainError::Oracle(other.to_string()),
        })
    }

    /// Checks that `dom F = {x : c_k(x) <= (l_k)_0}` meets the box.
    pub fn check_nonempty(&self, lower: &[f64], upper: &[f64]) -> Result<(), ChainError> {
        self.feasible_point(&self.essential_infima(), lower, upper).map(|_| ())
    }

    /// The program `min objective` over `{x in box : c_k(x) <= t_k}` in the
    /// form the cutting-plane solver takes; affine chains stay exact rows.
    pub fn cutting_plane_problem<'a>(
        &'a self,
        thresholds: &[f64],
        lower: &[f64],
        upper: &[f64],
        objective: Box<Oracle<'a>>,
    ) -> CuttingPlaneProblem<'a> {
        let mut affine = Vec::new();
        let mut convex: Vec<Box<Oracle<'a>>> = Vec::new();
        for (ch, &t) in self.chains.iter().zip(thresholds) {
            if t == f64::INFINITY {
                continue;
            }
            match ch.constraint.as_affine() {
                Some((a, b)) => affine.push((a.to_vec(), t - b)),
                None => {
                    let c = &ch.constraint;
                    convex.push(Box::new(move |x: &[f64]| (c.eval(x) - t, c.subgradient(x))));
                }
            }
        }
        CuttingPlaneProblem {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            affine,
            convex,
            objective,
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<(), ChainError> {
        if x.len() != self.dim {
            return Err(ChainError::Dimension(format!("point has length {}, domain dimension {}", x.len(), self.dim)));
        }
        Ok(())
    }

    fn check_thresholds(&self, t: &[f64]) -> Result<(), ChainError> {
        if t.len() != self.order() {
            return Err(ChainError::Dimension(format!("{} thresholds for {} chains", t.len(), self.order())));
        }
        Ok(())
    }

    /// Draws one threshold row.
    pub fn draw_thresholds<R: RngCore + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        if self.independent_thresholds {
            for (o, ch) in out.iter_mut().zip(&self.chains) {
                *o = ch.threshold.sample(rng);
            }
        } else {
            let u = open_unit(rng);
            for (o, ch) in out.iter_mut().zip(&self.chains) {
                *o = ch.threshold.inverse_cdf(u);
            }
        }
    }

    /// `P{l_k >= t_k for all k}` in closed form.
    ///
    /// Independent thresholds give the product of the inclusive survival
    /// functions. Under the comonotone coupling `l_k = F_k^{-1}(U)` and
    /// `F_k^{-1}(U) >= t_k` exactly when `U > P{l_k < t_k}`, so the joint
    /// probability is the smallest inclusive survival value.
    pub fn threshold_probability(&self, t: &[f64]) -> Result<f64, ChainError> {
        self.check_thresholds(t)?;
        let s = self.chains.iter().zip(t).map(|(ch, &tk)| ch.threshold.survival_inclusive(tk));
        Ok(if self.independent_thresholds {
            s.product()
        } else {
            s.fold(1.0, f64::min)
        })
    }

    /// Monte Carlo estimate of `P{l_k >= t_k for all k}` from fresh draws.
    fn threshold_probability_mc(&self, t: &[f64], draws: u64, seed: &SeedSpec) -> Result<Estimate, ChainError> {
        if draws == 0 {
            return Err(ChainError::NoDraws);
        }
        let mut rng = seed.with_role(StreamRole::Oracle).rng();
        let mut row = vec![0.0; self.order()];
        let mut hits = 0u64;
        for _ in 0..draws {
            self.draw_thresholds(&mut rng, &mut row);
            if row.iter().zip(t).all(|(l, tk)| l >= tk) {
                hits += 1;
            }
        }
        Ok(Estimate::frequency(hits, draws))
    }

    fn probability(&self, t: &[f64], mode: &DofMode) -> Result<Estimate, ChainError> {
        match mode {
            DofMode::Analytic => {
                if !self.independent_thresholds {
                    return Err(ChainError::AnalyticNeedsIndependence);
                }
                Ok(Estimate::exact(self.threshold_probability(t)?))
            }
            DofMode::MonteCarlo { draws, seed } => self.threshold_probability_mc(t, *draws, seed),
        }
    }
}

/// `N x m` threshold values with per-chain minima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSample {
    pub n: usize,
    pub m: usize,
    /// Row-major values; row `i` holds `l_k(xi^i)` for `k = 0..m`.
    pub values: Vec<f64>,
    pub minima: Vec<f64>,
}

impl ThresholdSample {
    /// Builds a sample from explicit rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(ChainError::Dimension("threshold rows must be non-empty and of equal length".into()));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Self::from_values(rows.len(), m, values))
    }

    fn from_values(n: usize, m: usize, values: Vec<f64>) -> Self {
        let mut minima = vec![f64::INFINITY; m];
        for row in values.chunks(m) {
            for (mk, v) in minima.iter_mut().zip(row) {
                if *v < *mk {
                    *mk = *v;
                }
            }
        }
        ThresholdSample { n, m, values, minima }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// Sample restricted to its first `n` rows.
    pub fn prefix(&self, n: usize) -> Self {
        Self::from_values(n, self.m, self.values[..n * self.m].to_vec())
    }
}

/// How a degree of feasibility is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum DofMode {
    /// Closed form; needs independent thresholds.
    Analytic,
    /// Fresh draws from the `Oracle` stream of `seed`.
    MonteCarlo { draws: u64, seed: SeedSpec },
}

/// Draws `n` i.i.d. threshold rows from the `Threshold` stream of `seed`.
pub fn sample_thresholds(spec: &ChainDomainSpec, n: usize, seed: &SeedSpec) -> Result<ThresholdSample, ChainError> {
    if n == 0 {
        return Err(ChainError::Dimension("sample size must be at least 1".into()));
    }
    spec.validate()?;
    let m = spec.order();
    let mut rng = seed.with_role(StreamRole::Threshold).rng();
    let mut values = vec![0.0; n * m];
    for row in values.chunks_mut(m) {
        spec.draw_thresholds(&mut rng, row);
    }
    Ok(ThresholdSample::from_values(n, m, values))
}

/// `c_k(x) <= thresholds[k]` for every chain.
pub fn domain_contains(spec: &ChainDomainSpec, x: &[f64], thresholds: &[f64]) -> Result<bool, ChainError> {
    spec.check_point(x)?;
    spec.check_thresholds(thresholds)?;
    Ok(spec.chains.iter().zip(thresholds).all(|(ch, t)| ch.constraint.eval(x) <= *t))
}

/// Degree of feasibility `d(x) = P{c_k(x) <= l_k for all k}`.
pub fn dof_point(spec: &ChainDomainSpec, x: &[f64], mode: &DofMode) -> Result<Estimate, ChainError> {
    spec.check_point(x)?;
    let levels: Vec<f64> = spec.chains.iter().map(|ch| ch.constraint.eval(x)).collect();
    spec.probability(&levels, mode)
}

/// Chain lower bound `P{l_k >= min_i l_k(xi^i) for all k}`.
pub fn dfrak_r(spec: &ChainDomainSpec, sample: &ThresholdSample, mode: &DofMode) -> Result<Estimate, ChainError> {
    spec.probability(&sample.minima, mode)
}

/// Degree of feasibility of the SAA domain, by fresh draws and containment.
///
/// Containment of the SAA domain in a fresh `dom f_xi` is decided by
/// comparing thresholds, `l_k(xi) >= minima[k]` for all `k`, which is
/// sufficient for containment.
pub fn dof_domain(spec: &ChainDomainSpec, sample: &ThresholdSample, draws: u64, seed: &SeedSpec) -> Result<Estimate, ChainError> {
    spec.threshold_probability_mc(&sample.minima, draws, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_chains(m: usize, independent: bool) -> ChainDomainSpec {
        ChainDomainSpec {
            dim: m,
            chains: (0..m)
                .map(|k| {
                    let mut a = vec![0.0; m];
                    a[k] = 1.0;
                    Chain {
                        constraint: ConstraintFn::affine(a, 0.0),
                        threshold: Distribution::uniform(0.0, 1.0),
                    }
                })
                .collect(),
            independent_thresholds: independent,
        }
    }

    #[test]
    fn contains_examples() {
        let s = uniform_chains(2, true);
        assert!(domain_contains(&s, &[5.0, 5.0], &[f64::INFINITY; 2]).unwrap());
        assert!(!domain_contains(&s, &[0.31, 0.5], &[0.3, 0.7]).unwrap());
        let s1 = uniform_chains(1, true);
        assert!(domain_contains(&s1, &[0.5], &[0.5]).unwrap());
        assert!(domain_contains(&s1, &[0.5, 0.1], &[0.5]).is_err());
    }

    #[test]
    fn dof_point_examples() {
        let s1 = uniform_chains(1, true);
        assert!((dof_point(&s1, &[0.3], &DofMode::Analytic).unwrap().value - 0.7).abs() < 1e-15);
        assert_eq!(dof_point(&s1, &[-1.0], &DofMode::Analytic).unwrap().value, 1.0);
        let s2 = uniform_chains(2, true);
        assert!((dof_point(&s2, &[0.5, 0.5], &DofMode::Analytic).unwrap().value - 0.25).abs() < 1e-15);
        let dep = uniform_chains(2, false);
        assert_eq!(dof_point(&dep, &[0.5, 0.5], &DofMode::Analytic), Err(ChainError::AnalyticNeedsIndependence));
        assert!((dep.threshold_probability(&[0.5, 0.2]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn atom_at_level_counts() {
        let s = ChainDomainSpec {
            dim: 1,
            chains: vec![Chain {
                constraint: ConstraintFn::affine(vec![1.0], 0.0),
                threshold: Distribution::discrete(vec![1.0, 2.0], vec![0.5, 0.5]),
            }],
            independent_thresholds: true,
        };
        assert_eq!(dof_point(&s, &[1.0], &DofMode::Analytic).unwrap().value, 1.0);
        assert_eq!(dof_point(&s, &[1.5], &DofMode::Analytic).unwrap().value, 0.5);
    }

    #[test]
    fn dfrak_r_examples() {
        let s1 = uniform_chains(1, true);
        let sample = ThresholdSample::from_rows(&[vec![0.2], vec![0.6]]).unwrap();
        assert!((dfrak_r(&s1, &sample, &DofMode::Analytic).unwrap().value - 0.8).abs() < 1e-15);
        let s2 = uniform_chains(2, true);
        let sample = ThresholdSample::from_rows(&[vec![0.1, 0.9], vec![0.4, 0.5]]).unwrap();
        assert!((dfrak_r(&s2, &sample, &DofMode::Analytic).unwrap().value - 0.45).abs() < 1e-15);
        let at_inf = ThresholdSample::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(dfrak_r(&s2, &at_inf, &DofMode::Analytic).unwrap().value, 1.0);
    }

    #[test]
    fn point_mass_sample_is_deterministic() {
        let s = ChainDomainSpec {
            dim: 1,
            chains: vec![Chain {
                constraint: ConstraintFn::affine(vec![1.0], 0.0),
                threshold: Distribution::point(0.7),
            }],
            independent_thresholds: true,
        };
        let t = sample_thresholds(&s, 1, &SeedSpec::new(3, 0, 0, StreamRole::Threshold)).unwrap();
        assert_eq!(t.values, vec![0.7]);
        assert_eq!(t.minima, vec![0.7]);
    }

    #[test]
    fn comonotone_rows_share_a_driver() {
        let s = ChainDomainSpec {
            dim: 2,
            chains: vec![
                Chain {
                    constraint: ConstraintFn::affine(vec![1.0, 0.0], 0.0),
                    threshold: Distribution::uniform(0.0, 1.0),
                },
                Chain {
                    constraint: ConstraintFn::affine(vec![0.0, 1.0], 0.0),
                    threshold: Distribution::uniform(2.0, 4.0),
                },
            ],
            independent_thresholds: false,
        };
        let t = sample_thresholds(&s, 50, &SeedSpec::new(1, 2, 0, StreamRole::Threshold)).unwrap();
        for i in 0..50 {
            let r = t.row(i);
            assert!((r[1] - (2.0 + 2.0 * r[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn validation() {
        let mut s = uniform_chains(1, true);
        s.chains[0].threshold = Distribution::normal(0.0, 1.0);
        assert_eq!(s.validate(), Err(ChainError::UnboundedThreshold(0)));
        let q = ConstraintFn::Quadratic {
            q: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -0.5]]).unwrap(),
            a: vec![0.0, 0.0],
            b: 0.0,
        };
        assert!(matches!(q.validate(), Err(ChainError::NotConvex(_))));
        let empty = ChainDomainSpec {
            dim: 1,
            chains: vec![],
            independent_thresholds: true,
        };
        assert_eq!(empty.validate(), Err(ChainError::NoChains));
    }

    #[test]
    fn nonempty_check_uses_box() {
        let s = ChainDomainSpec {
            dim: 2,
            chains: vec![Chain {
                constraint: ConstraintFn::Norm { center: vec![3.0, 0.0] },
                threshold: Distribution::uniform(1.0, 2.0),
            }],
            independent_thresholds: true,
        };
        assert!(s.check_nonempty(&[0.0, 0.0], &[5.0, 5.0]).is_ok());
        assert_eq!(s.check_nonempty(&[-1.0, -1.0], &[1.0, 1.0]), Err(ChainError::EmptyDomain));
    }

    #[test]
    fn subgradients_match_finite_differences() {
        let f = ConstraintFn::Quadratic {
            q: Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(),
            a: vec![1.0, -1.0],
            b: 0.3,
        };
        let x = [0.3, -0.7];
        let g = f.subgradient(&x);
        for i in 0..2 {
            let mut xp = x;
            xp[i] += 1e-6;
            let fd = (f.eval(&xp) - f.eval(&x)) / 1e-6;
            assert!((fd - g[i]).abs() < 1e-4);
        }
    }
}
