//! Two-phase revised simplex with Bland's rule.
//!
//! Dense explicit basis inverse, sparse columns. Meant for desk-scale models
//! (a few hundred rows); the basis inverse is rebuilt from scratch every
//! [`REFACTOR_EVERY`] pivots to bound drift.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::PolyError;

/// Largest accepted number of nonzero constraint coefficients.
pub const MAX_NONZEROS: usize = 10_000;
const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

/// `min c^T x  s.t.  A x (<=|>=|=) b,  lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub matrix: Matrix,
    pub rhs: Vec<f64>,
    pub senses: Vec<RowSense>,
    /// `(lower, upper)` per variable; infinite values allowed.
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    /// A problem over `n` variables with `x >= 0` and no rows yet.
    pub fn nonnegative(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            objective,
            matrix: Matrix::zeros(0, n),
            rhs: Vec::new(),
            senses: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn with_rows(objective: Vec<f64>, rows: &[Vec<f64>], senses: Vec<RowSense>, rhs: Vec<f64>) -> Result<Self, PolyError> {
        let n = objective.len();
        let matrix = if rows.is_empty() {
            Matrix::zeros(0, n)
        } else {
            Matrix::from_rows(rows)?
        };
        let p = LpProblem {
            objective,
            matrix,
            rhs,
            senses,
            bounds: vec![(0.0, f64::INFINITY); n],
        };
        p.check_shape()?;
        Ok(p)
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn check_shape(&self) -> Result<(), PolyError> {
        let n = self.objective.len();
        let m = self.matrix.rows();
        if self.matrix.cols() != n && m > 0 {
            return Err(PolyError::Shape(format!(
                "constraint matrix has {} columns for {n} variables",
                self.matrix.cols()
            )));
        }
        if self.rhs.len() != m || self.senses.len() != m {
            return Err(PolyError::Shape(format!(
                "{m} rows but {} right-hand sides and {} senses",
                self.rhs.len(),
                self.senses.len()
            )));
        }
        if self.bounds.len() != n {
            return Err(PolyError::Shape(format!("{} bounds for {n} variables", self.bounds.len())));
        }
        if self.objective.iter().chain(&self.rhs).any(|v| !v.is_finite()) {
            return Err(PolyError::Shape("objective and rhs must be finite".into()));
        }
        if self.bounds.iter().any(|(l, u)| l.is_nan() || u.is_nan() || l > u || *l == f64::INFINITY || *u == f64::NEG_INFINITY) {
            return Err(PolyError::Shape("invalid variable bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpResult {
    pub status: LpStatus,
    /// Objective value; `+inf` when infeasible, `-inf` when unbounded.
    pub value: f64,
    /// Primal point (meaningful when optimal).
    pub x: Vec<f64>,
    /// Row multipliers `y` with `c - A^T y` the reduced costs (optimal only).
    pub duals: Vec<f64>,
    pub iterations: usize,
}

impl LpResult {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// How an original variable maps onto nonnegative standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = lower + s`
    Shifted { col: usize, lower: f64 },
    /// `x = upper - s`
    Reflected { col: usize, upper: f64 },
    /// `x = s_pos - s_neg`
    Free { pos: usize, neg: usize },
}

struct StandardForm {
    /// Sparse columns `(row, value)`.
    columns: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    rhs: Vec<f64>,
    /// +1 or -1: multiplier applied to each original row to make rhs >= 0.
    row_sign: Vec<f64>,
    n_structural: usize,
    /// Index of the first artificial column.
    first_artificial: usize,
    initial_basis: Vec<usize>,
    var_map: Vec<VarMap>,
    n_original_rows: usize,
}

fn standardize(p: &LpProblem) -> Result<StandardForm, PolyError> {
    let n = p.num_vars();
    let mut var_map = Vec::with_capacity(n);
    let mut columns: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut cost = Vec::new();
    let mut bound_rows: Vec<(usize, f64)> = Vec::new();
    for (j, &(lower, upper)) in p.bounds.iter().enumerate() {
        let c = p.objective[j];
        if lower.is_finite() {
            let col = columns.len();
            columns.push(Vec::new());
            cost.push(c);
            var_map.push(VarMap::Shifted { col, lower });
            if upper.is_finite() {
                bound_rows.push((col, upper - lower));
            }
        } else if upper.is_finite() {
            let col = columns.len();
            columns.push(Vec::new());
            cost.push(-c);
            var_map.push(VarMap::Reflected { col, upper });
        } else {
            let pos = columns.len();
            columns.push(Vec::new());
            columns.push(Vec::new());
            cost.push(c);
            cost.push(-c);
            var_map.push(VarMap::Free { pos, neg: pos + 1 });
        }
    }
    let n_structural = columns.len();

    let m_orig = p.matrix.rows();
    let m = m_orig + bound_rows.len();
    let mut rhs = vec![0.0; m];
    let mut senses = Vec::with_capacity(m);
    let mut nnz = 0usize;
    for i in 0..m_orig {
        let mut b = p.rhs[i];
        for (j, &a) in p.matrix.row(i).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            nnz += 1;
            match var_map[j] {
                VarMap::Shifted { col, lower } => {
                    columns[col].push((i, a));
                    b -= a * lower;
                }
                VarMap::Reflected { col, upper } => {
                    columns[col].push((i, -a));
                    b -= a * upper;
                }
                VarMap::Free { pos, neg } => {
                    columns[pos].push((i, a));
                    columns[neg].push((i, -a));
                }
            }
        }
        rhs[i] = b;
        senses.push(p.senses[i]);
    }
    if nnz > MAX_NONZEROS {
        return Err(PolyError::SizeLimit(format!("{nnz} nonzeros exceeds {MAX_NONZEROS}")));
    }
    for (k, &(col, width)) in bound_rows.iter().enumerate() {
        let i = m_orig + k;
        columns[col].push((i, 1.0));
        rhs[i] = width;
        senses.push(RowSense::Le);
    }

    // slacks
    let mut slack_of_row = vec![None; m];
    for (i, sense) in senses.iter().enumerate() {
        let coef = match sense {
            RowSense::Le => 1.0,
            RowSense::Ge => -1.0,
            RowSense::Eq => continue,
        };
        slack_of_row[i] = Some(columns.len());
        columns.push(vec![(i, coef)]);
        cost.push(0.0);
    }

    // sign normalization
    let mut row_sign = vec![1.0; m];
    for i in 0..m {
        if rhs[i] < 0.0 {
            row_sign[i] = -1.0;
            rhs[i] = -rhs[i];
        }
    }
    for col in columns.iter_mut() {
        for (i, v) in col.iter_mut() {
            *v *= row_sign[*i];
        }
    }

    // initial basis: slacks with +1, else artificials
    let first_artificial = columns.len();
    let mut initial_basis = Vec::with_capacity(m);
    for i in 0..m {
        match slack_of_row[i] {
            Some(s) if columns[s][0].1 > 0.0 => initial_basis.push(s),
            _ => {
                initial_basis.push(columns.len());
                columns.push(vec![(i, 1.0)]);
                cost.push(0.0);
            }
        }
    }

    Ok(StandardForm {
        columns,
        cost,
        rhs,
        row_sign,
        n_structural,
        first_artificial,
        initial_basis,
        var_map,
        n_original_rows: m_orig,
    })
}

struct Simplex<'a> {
    sf: &'a StandardForm,
    m: usize,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    /// Row-major `m x m` basis inverse.
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
    since_refactor: usize,
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
}

impl<'a> Simplex<'a> {
    fn new(sf: &'a StandardForm) -> Self {
        let m = sf.rhs.len();
        let mut is_basic = vec![false; sf.columns.len()];
        for &b in &sf.initial_basis {
            is_basic[b] = true;
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let ncols = sf.columns.len();
        Simplex {
            sf,
            m,
            basis: sf.initial_basis.clone(),
            is_basic,
            binv,
            xb: sf.rhs.clone(),
            iterations: 0,
            max_iterations: 50 * (m + ncols) + 1000,
            since_refactor: 0,
        }
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (k, &bk) in self.basis.iter().enumerate() {
            let c = cost[bk];
            if c != 0.0 {
                let row = &self.binv[k * m..(k + 1) * m];
                for (yi, v) in y.iter_mut().zip(row) {
                    *yi += c * v;
                }
            }
        }
        y
    }

    fn ftran(&self, col: usize) -> Vec<f64> {
        let m = self.m;
        let mut w = vec![0.0; m];
        for &(i, a) in &self.sf.columns[col] {
            for (k, wk) in w.iter_mut().enumerate() {
                *wk += self.binv[k * m + i] * a;
            }
        }
        w
    }

    fn reduced_cost(&self, cost: &[f64], y: &[f64], j: usize) -> f64 {
        cost[j] - self.sf.columns[j].iter().map(|&(i, a)| y[i] * a).sum::<f64>()
    }

    fn run_phase(&mut self, cost: &[f64], may_enter: impl Fn(usize) -> bool) -> Result<PhaseOutcome, PolyError> {
        loop {
            if self.iterations >= self.max_iterations {
                return Err(PolyError::CyclingGuard(self.iterations));
            }
            let y = self.duals(cost);
            let entering = (0..self.sf.columns.len())
                .find(|&j| !self.is_basic[j] && may_enter(j) && self.reduced_cost(cost, &y, j) < -COST_TOL);
            let Some(q) = entering else {
                return Ok(PhaseOutcome::Optimal);
            };
            let w = self.ftran(q);
            let mut leave: Option<(usize, f64)> = None;
            for k in 0..self.m {
                if w[k] > PIVOT_TOL {
                    let ratio = self.xb[k].max(0.0) / w[k];
                    leave = match leave {
                        None => Some((k, ratio)),
                        Some((r, best)) => {
                            if ratio < best - 1e-12 || (ratio <= best + 1e-12 && self.basis[k] < self.basis[r]) {
                                Some((k, ratio.min(best)))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Ok(PhaseOutcome::Unbounded);
            };
            self.pivot(r, q, &w);
        }
    }

    fn pivot(&mut self, r: usize, q: usize, w: &[f64]) {
        let m = self.m;
        let piv = w[r];
        let theta = self.xb[r].max(0.0) / piv;
        {
            let row_r = &mut self.binv[r * m..(r + 1) * m];
            for v in row_r.iter_mut() {
                *v /= piv;
            }
        }
        let pivot_row: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
        for k in 0..m {
            if k != r && w[k] != 0.0 {
                let f = w[k];
                let row = &mut self.binv[k * m..(k + 1) * m];
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                self.xb[k] -= f * theta;
                if self.xb[k] < 0.0 && self.xb[k] > -FEAS_TOL {
                    self.xb[k] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        self.is_basic[self.basis[r]] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
        self.iterations += 1;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor();
        }
    }

    /// Rebuilds the basis inverse by Gauss-Jordan with partial pivoting.
    fn refactor(&mut self) {
        let m = self.m;
        self.since_refactor = 0;
        let mut a = vec![0.0; m * m];
        for (k, &bk) in self.basis.iter().enumerate() {
            for &(i, v) in &self.sf.columns[bk] {
                a[i * m + k] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let p = (c..m)
                .max_by(|&i, &j| a[i * m + c].abs().total_cmp(&a[j * m + c].abs()))
                .unwrap();
            if a[p * m + c].abs() < 1e-14 {
                // keep the product-form inverse if the basis looks singular
                return;
            }
            if p != c {
                for j in 0..m {
                    a.swap(p * m + j, c * m + j);
                    inv.swap(p * m + j, c * m + j);
                }
            }
            let d = a[c * m + c];
            for j in 0..m {
                a[c * m + j] /= d;
                inv[c * m + j] /= d;
            }
            for i in 0..m {
                if i != c {
                    let f = a[i * m + c];
                    if f != 0.0 {
                        for j in 0..m {
                            a[i * m + j] -= f * a[c * m + j];
                            inv[i * m + j] -= f * inv[c * m + j];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        let mut xb = vec![0.0; m];
        for (k, x) in xb.iter_mut().enumerate() {
            let s = dot(&self.binv[k * m..(k + 1) * m], &self.sf.rhs);
            *x = if s < 0.0 && s > -FEAS_TOL { 0.0 } else { s };
        }
        self.xb = xb;
    }

    /// Pivots basic artificials (at zero level) out of the basis where possible.
    fn expel_artificials(&mut self) {
        let first_art = self.sf.first_artificial;
        for r in 0..self.m {
            if self.basis[r] < first_art {
                continue;
            }
            let m = self.m;
            let row: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
            let candidate = (0..first_art).find(|&j| {
                !self.is_basic[j]
                    && self.sf.columns[j].iter().map(|&(i, a)| row[i] * a).sum::<f64>().abs() > 1e-7
            });
            if let Some(q) = candidate {
                let w = self.ftran(q);
                self.pivot(r, q, &w);
            }
        }
    }
}

/// Solves a linear program with Bland's rule.
///
/// Ties in the ratio test go to the basic variable with the smallest index,
/// so results are fully deterministic.
pub fn lp_solve(problem: &LpProblem) -> Result<LpResult, PolyError> {
    problem.check_shape()?;
    let sf = standardize(problem)?;
    let n = problem.num_vars();
    let m = sf.rhs.len();
    let mut spx = Simplex::new(&sf);

    let has_artificials = sf.first_artificial < sf.columns.len();
    if has_artificials {
        let phase1_cost: Vec<f64> = (0..sf.columns.len())
            .map(|j| if j >= sf.first_artificial { 1.0 } else { 0.0 })
            .collect();
        spx.run_phase(&phase1_cost, |_| true)?;
        spx.refactor();
        let infeas: f64 = spx
            .basis
            .iter()
            .zip(&spx.xb)
            .filter(|(b, _)| **b >= sf.first_artificial)
            .map(|(_, x)| x.max(0.0))
            .sum();
        let scale = 1.0 + sf.rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if infeas > 1e-9 * scale {
            return Ok(LpResult {
                status: LpStatus::Infeasible,
                value: f64::INFINITY,
                x: vec![f64::NAN; n],
                duals: vec![0.0; problem.matrix.rows()],
                iterations: spx.iterations,
            });
        }
        spx.expel_artificials();
    }

    let first_art = sf.first_artificial;
    let outcome = spx.run_phase(&sf.cost, |j| j < first_art)?;
    if let PhaseOutcome::Unbounded = outcome {
        return Ok(LpResult {
            status: LpStatus::Unbounded,
            value: f64::NEG_INFINITY,
            x: vec![f64::NAN; n],
            duals: vec![0.0; problem.matrix.rows()],
            iterations: spx.iterations,
        });
    }
    spx.refactor();

    let mut s = vec![0.0; sf.columns.len()];
    for (k, &bk) in spx.basis.iter().enumerate() {
        s[bk] = spx.xb[k].max(0.0);
    }
    let x: Vec<f64> = sf
        .var_map
        .iter()
        .map(|vm| match *vm {
            VarMap::Shifted { col, lower } => lower + s[col],
            VarMap::Reflected { col, upper } => upper - s[col],
            VarMap::Free { pos, neg } => s[pos] - s[neg],
        })
        .collect();
    let value = dot(&problem.objective, &x);
    let y = spx.duals(&sf.cost);
    let duals = (0..sf.n_original_rows).map(|i| y[i] * sf.row_sign[i]).collect();
    let _ = (m, sf.n_structural);
    Ok(LpResult {
        status: LpStatus::Optimal,
        value,
        x,
        duals,
        iterations: spx.iterations,
    })
}

/// Is `{y >= 0 : W y = v}` non-empty? Phase-one simplex on a zero objective.
pub fn equality_feasible(w: &Matrix, v: &[f64]) -> Result<bool, PolyError> {
    if w.rows() != v.len() {
        return Err(PolyError::Shape(format!("W has {} rows but v has length {}", w.rows(), v.len())));
    }
    let p = LpProblem {
        objective: vec![0.0; w.cols()],
        matrix: w.clone(),
        rhs: v.to_vec(),
        senses: vec![RowSense::Eq; w.rows()],
        bounds: vec![(0.0, f64::INFINITY); w.cols()],
    };
    Ok(lp_solve(&p)?.status == LpStatus::Optimal)
}
