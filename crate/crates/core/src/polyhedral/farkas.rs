//! Second-stage feasibility and value for `W y + T x = h, y >= 0`.
//!
//! By Farkas' lemma the system is solvable exactly when `a^T (h - T x) >= 0`
//! for every `a` with `a^T W >= 0`, which reduces to finitely many checks
//! against the cone generators.

use super::lp::{equality_feasible, lp_solve, LpProblem, LpStatus, RowSense};
use super::matrix::{dot, Matrix};
use super::rays::ConeGenerators;
use super::PolyError;

/// Tolerance on `r^T (h - T x)` for rays and lineality vectors.
pub const FARKAS_TOL: f64 = 1e-8;

/// `h - T x`, checking dimensions.
pub fn residual(h: &[f64], t: &Matrix, x: &[f64]) -> Result<Vec<f64>, PolyError> {
    if t.rows() != h.len() || t.cols() != x.len() {
        return Err(PolyError::Shape(format!(
            "T is {} x {}, h has length {}, x has length {}",
            t.rows(),
            t.cols(),
            h.len(),
            x.len()
        )));
    }
    Ok(h.iter().zip(t.mul_vec(x)).map(|(hi, txi)| hi - txi).collect())
}

/// Ray test for `{y >= 0 : W y = h - T x} != {}`.
pub fn farkas_feasible(gen: &ConeGenerators, h: &[f64], t: &Matrix, x: &[f64]) -> Result<bool, PolyError> {
    let v = residual(h, t, x)?;
    if v.len() != gen.dim {
        return Err(PolyError::Shape(format!(
            "residual has length {} but the cone lives in R^{}",
            v.len(),
            gen.dim
        )));
    }
    Ok(gen.rays.iter().all(|r| dot(r, &v) >= -FARKAS_TOL)
        && gen.lineality.iter().all(|l| dot(l, &v).abs() <= FARKAS_TOL))
}

/// Phase-one simplex answer to the same question; independent of the rays.
pub fn simplex_feasible(w: &Matrix, h: &[f64], t: &Matrix, x: &[f64]) -> Result<bool, PolyError> {
    let v = residual(h, t, x)?;
    equality_feasible(w, &v)
}

/// `inf { g^T y : W y = h - T x, y >= 0 }`; `+inf` when infeasible.
pub fn second_stage_value(w: &Matrix, t: &Matrix, h: &[f64], g: &[f64], x: &[f64]) -> Result<f64, PolyError> {
    let v = residual(h, t, x)?;
    if w.rows() != v.len() || g.len() != w.cols() {
        return Err(PolyError::Shape(format!(
            "W is {} x {} but h has length {} and g has length {}",
            w.rows(),
            w.cols(),
            v.len(),
            g.len()
        )));
    }
    let p = LpProblem {
        objective: g.to_vec(),
        matrix: w.clone(),
        rhs: v,
        senses: vec![RowSense::Eq; w.rows()],
        bounds: vec![(0.0, f64::INFINITY); w.cols()],
    };
    let r = lp_solve(&p)?;
    match r.status {
        LpStatus::Optimal => Ok(r.value),
        LpStatus::Infeasible => Ok(f64::INFINITY),
        LpStatus::Unbounded => Err(PolyError::UnboundedSecondStage),
    }
}
