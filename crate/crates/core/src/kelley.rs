//! Kelley's cutting-plane method for convex programs over a box.
//!
//! Solves `min phi(x)` subject to `lower <= x <= upper`, affine rows
//! `a^T x <= b` (kept exactly), and convex constraints `g(x) <= 0` (linearized
//! by cuts). Every iteration solves an LP with the simplex module; the LP value
//! is a valid lower bound, and feasible iterates (or their pullback toward a
//! feasible anchor) give upper bounds, so termination certifies the gap.

use thiserror::Error;

use crate::polyhedral::{lp_solve, LpProblem, LpStatus, Matrix, PolyError, RowSense};

/// Violation level accepted as feasible.
pub const FEAS_TOL: f64 = 1e-9;

/// Value and one subgradient at a point.
pub type Oracle<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

pub struct CuttingPlaneProblem<'a> {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Rows `(a, b)` meaning `a^T x <= b`.
    pub affine: Vec<(Vec<f64>, f64)>,
    /// Convex constraint oracles `g(x) <= 0`.
    pub convex: Vec<Box<Oracle<'a>>>,
    pub objective: Box<Oracle<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuttingPlaneSolution {
    pub x: Vec<f64>,
    pub value: f64,
    pub lower_bound: f64,
    pub iterations: usize,
}

impl CuttingPlaneSolution {
    pub fn gap(&self) -> f64 {
        self.value - self.lower_bound
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CuttingPlaneError {
    #[error("feasible set is empty")]
    Infeasible,
    #[error("iteration cap {iterations} reached with gap {best_gap:e}")]
    IterationCap { iterations: usize, best_gap: f64 },
    #[error("search box must be finite with lower <= upper")]
    BadBox,
    #[error(transparent)]
    Lp(#[from] PolyError),
}

pub struct Settings {
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            tol: 1e-6,
            max_iterations: 500,
        }
    }
}

struct Cut {
    /// `coef^T x - t_coef * t <= rhs`
    coef: Vec<f64>,
    t_coef: f64,
    rhs: f64,
}

impl CuttingPlaneProblem<'_> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        let aff = self
            .affine
            .iter()
            .map(|(a, b)| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - b);
        let cvx = self.convex.iter().map(|g| g(x).0);
        aff.chain(cvx).fold(f64::NEG_INFINITY, f64::max)
    }

    fn nonlinear_violation(&self, x: &[f64]) -> f64 {
        self.convex.iter().map(|g| g(x).0).fold(f64::NEG_INFINITY, f64::max)
    }

    fn solve_master(&self, cuts: &[Cut], with_t: bool) -> Result<Option<(Vec<f64>, f64)>, PolyError> {
        let n = self.dim();
        let nv = if with_t { n + 1 } else { n };
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs = Vec::new();
        for (a, b) in &self.affine {
            let mut r = a.clone();
            r.resize(nv, 0.0);
            rows.push(r);
            rhs.push(*b);
        }
        for c in cuts {
            if c.t_coef != 0.0 && !with_t {
                continue;
            }
            let mut r = c.coef.clone();
            if with_t {
                r.push(-c.t_coef);
            }
            rows.push(r);
            rhs.push(c.rhs);
        }
        let mut objective = vec![0.0; nv];
        if with_t {
            objective[n] = 1.0;
        }
        let m = rows.len();
        let mut p = LpProblem {
            objective,
            matrix: if m == 0 { Matrix::zeros(0, nv) } else { Matrix::from_rows(&rows)? },
            rhs,
            senses: vec![RowSense::Le; m],
            bounds: self.lower.iter().zip(&self.upper).map(|(l, u)| (*l, *u)).collect(),
        };
        if with_t {
            p.bounds.push((f64::NEG_INFINITY, f64::INFINITY));
        }
        let r = lp_solve(&p)?;
        match r.status {
            LpStatus::Optimal => {
                let t = if with_t { r.x[n] } else { 0.0 };
                let mut x = r.x;
                x.truncate(n);
                Ok(Some((x, t)))
            }
            LpStatus::Infeasible => Ok(None),
            LpStatus::Unbounded => Err(PolyError::Shape("cutting-plane master problem is unbounded".into())),
        }
    }
}

fn objective_cut(x: &[f64], value: f64, sub: &[f64]) -> Cut {
    // t >= value + sub^T (y - x)  <=>  sub^T y - t <= sub^T x - value
    Cut {
        coef: sub.to_vec(),
        t_coef: 1.0,
        rhs: sub.iter().zip(x).map(|(s, v)| s * v).sum::<f64>() - value,
    }
}

fn constraint_cut(x: &[f64], value: f64, sub: &[f64]) -> Cut {
    // value + sub^T (y - x) <= 0
    Cut {
        coef: sub.to_vec(),
        t_coef: 0.0,
        rhs: sub.iter().zip(x).map(|(s, v)| s * v).sum::<f64>() - value,
    }
}

/// Finds a point of the feasible set, preferring a strictly feasible one for
/// the nonlinear constraints: minimizes `max_j g_j(x)` over the box and
/// affine rows.
pub fn find_feasible_point(problem: &CuttingPlaneProblem<'_>, settings: &Settings) -> Result<Vec<f64>, CuttingPlaneError> {
    check_box(problem)?;
    if problem.convex.is_empty() {
        let cuts = Vec::new();
        return problem.solve_master(&cuts, false)?.map(|(x, _)| x).ok_or(CuttingPlaneError::Infeasible);
    }
    let max_g = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for g in &problem.convex {
            let (v, s) = g(x);
            if v > best.0 {
                best = (v, s);
            }
        }
        best
    };
    let sub = CuttingPlaneProblem {
        lower: problem.lower.clone(),
        upper: problem.upper.clone(),
        affine: problem.affine.clone(),
        convex: Vec::new(),
        objective: Box::new(max_g),
    };
    let inner = Settings {
        tol: settings.tol.min(1e-9),
        max_iterations: settings.max_iterations,
    };
    let sol = match run(&sub, &inner, None) {
        Ok(s) => s,
        // a partially converged point is still usable if it is feasible
        Err(CuttingPlaneError::IterationCap { .. }) => return Err(CuttingPlaneError::Infeasible),
        Err(e) => return Err(e),
    };
    if sol.value <= FEAS_TOL {
        Ok(sol.x)
    } else {
        Err(CuttingPlaneError::Infeasible)
    }
}

fn check_box(problem: &CuttingPlaneProblem<'_>) -> Result<(), CuttingPlaneError> {
    if problem.lower.len() != problem.upper.len()
        || problem.lower.iter().zip(&problem.upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
    {
        return Err(CuttingPlaneError::BadBox);
    }
    Ok(())
}

/// Largest step toward `x` from the feasible `anchor` that stays feasible.
fn pull_back(problem: &CuttingPlaneProblem<'_>, anchor: &[f64], x: &[f64]) -> Vec<f64> {
    let at = |lam: f64| -> Vec<f64> { anchor.iter().zip(x).map(|(a, b)| a + lam * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if problem.nonlinear_violation(&at(mid)) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

/// Minimizes the objective with a certified gap `<= settings.tol`.
pub fn minimize(problem: &CuttingPlaneProblem<'_>, settings: &Settings) -> Result<CuttingPlaneSolution, CuttingPlaneError> {
    check_box(problem)?;
    let anchor = if problem.convex.is_empty() {
        None
    } else {
        Some(find_feasible_point(problem, settings)?)
    };
    run(problem, settings, anchor)
}

fn run(
    problem: &CuttingPlaneProblem<'_>,
    settings: &Settings,
    anchor: Option<Vec<f64>>,
) -> Result<CuttingPlaneSolution, CuttingPlaneError> {
    let n = problem.dim();
    let mut cuts: Vec<Cut> = Vec::new();
    let start: Vec<f64> = match &anchor {
        Some(a) => a.clone(),
        None => problem.lower.iter().zip(&problem.upper).map(|(l, u)| 0.5 * (l + u)).collect(),
    };
    let (v0, s0) = (problem.objective)(&start);
    cuts.push(objective_cut(&start, v0, &s0));
    let mut best: Option<(Vec<f64>, f64)> = None;
    if anchor.is_some() {
        best = Some((start.clone(), v0));
    }
    let mut lower_bound = f64::NEG_INFINITY;
    for it in 1..=settings.max_iterations {
        let Some((x, t)) = problem.solve_master(&cuts, true)? else {
            return Err(CuttingPlaneError::Infeasible);
        };
        lower_bound = lower_bound.max(t);
        let (val, sub) = (problem.objective)(&x);
        let viol = problem.nonlinear_violation(&x);
        if viol <= FEAS_TOL || problem.convex.is_empty() {
            if best.as_ref().is_none_or(|(_, b)| val < *b) {
                best = Some((x.clone(), val));
            }
        } else if let Some(a) = &anchor {
            let y = pull_back(problem, a, &x);
            let vy = (problem.objective)(&y).0;
            if best.as_ref().is_none_or(|(_, b)| vy < *b) {
                best = Some((y, vy));
            }
        }
        if let Some((bx, bv)) = &best {
            if bv - lower_bound <= settings.tol {
                debug_assert!(problem.max_violation(bx) <= 1e-7);
                return Ok(CuttingPlaneSolution {
                    x: bx.clone(),
                    value: *bv,
                    lower_bound,
                    iterations: it,
                });
            }
        }
        cuts.push(objective_cut(&x, val, &sub));
        for g in &problem.convex {
            let (gv, gs) = g(&x);
            if gv > FEAS_TOL {
                cuts.push(constraint_cut(&x, gv, &gs));
            }
        }
        debug_assert!(cuts.iter().all(|c| c.coef.len() == n));
    }
    Err(CuttingPlaneError::IterationCap {
        iterations: settings.max_iterations,
        best_gap: best.map_or(f64::INFINITY, |(_, v)| v - lower_bound),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(c: f64) -> Box<Oracle<'static>> {
        Box::new(move |x: &[f64]| ((x[0] - c).powi(2), vec![2.0 * (x[0] - c)]))
    }

    #[test]
    fn one_dimensional_quadratic() {
        let p = CuttingPlaneProblem {
            lower: vec![0.0],
            upper: vec![1.0],
            affine: vec![],
            convex: vec![],
            objective: quad(0.3),
        };
        let s = minimize(&p, &Settings::default()).unwrap();
        assert!((s.x[0] - 0.3).abs() < 2e-3);
        assert!(s.gap() <= 1e-6);
    }

    #[test]
    fn affine_constraint_active() {
        let p = CuttingPlaneProblem {
            lower: vec![-5.0],
            upper: vec![5.0],
            affine: vec![(vec![1.0], 0.1)],
            convex: vec![],
            objective: quad(0.3),
        };
        let s = minimize(&p, &Settings::default()).unwrap();
        assert!((s.x[0] - 0.1).abs() < 1e-9, "{:?}", s);
    }

    #[test]
    fn disk_constraint_with_linear_objective() {
        // min -x - y over the unit disk: optimum -sqrt(2)
        let p = CuttingPlaneProblem {
            lower: vec![-2.0, -2.0],
            upper: vec![2.0, 2.0],
            affine: vec![],
            convex: vec![Box::new(|x: &[f64]| {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let s = if r > 0.0 { vec![x[0] / r, x[1] / r] } else { vec![0.0, 0.0] };
                (r - 1.0, s)
            })],
            objective: Box::new(|x: &[f64]| (-x[0] - x[1], vec![-1.0, -1.0])),
        };
        let s = minimize(&p, &Settings::default()).unwrap();
        assert!((s.value + 2f64.sqrt()).abs() <= 1e-6, "{:?}", s);
        assert!((s.x[0] * s.x[0] + s.x[1] * s.x[1]).sqrt() <= 1.0 + 1e-9);
    }

    #[test]
    fn infeasible_detected() {
        let p = CuttingPlaneProblem {
            lower: vec![0.0],
            upper: vec![1.0],
            affine: vec![(vec![1.0], -1.0)],
            convex: vec![],
            objective: quad(0.0),
        };
        assert_eq!(minimize(&p, &Settings::default()), Err(CuttingPlaneError::Infeasible));
        let q = CuttingPlaneProblem {
            lower: vec![0.0],
            upper: vec![1.0],
            affine: vec![],
            convex: vec![Box::new(|x: &[f64]| (2.0 - x[0], vec![-1.0]))],
            objective: quad(0.0),
        };
        assert_eq!(minimize(&q, &Settings::default()), Err(CuttingPlaneError::Infeasible));
    }

    #[test]
    fn unbounded_box_rejected() {
        let p = CuttingPlaneProblem {
            lower: vec![f64::NEG_INFINITY],
            upper: vec![1.0],
            affine: vec![],
            convex: vec![],
            objective: quad(0.0),
        };
        assert_eq!(minimize(&p, &Settings::default()), Err(CuttingPlaneError::BadBox));
    }
}
