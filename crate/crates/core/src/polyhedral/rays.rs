//! Generators of the cone `{a : W^T a >= 0}` by the double description method.
//!
//! The lineality space `{a : W^T a = 0}` is split off first with an SVD, so
//! the double description runs on a pointed cone in the orthogonal
//! complement. Rays are returned with unit Euclidean norm and the lineality
//! space as an orthonormal basis.

use serde::{Deserialize, Serialize};

use super::lp::{lp_solve, LpProblem, LpStatus, RowSense};
use super::matrix::{dot, norm, Matrix};
use super::PolyError;

pub const MAX_DIM: usize = 12;
pub const MAX_COLUMNS: usize = 24;
/// Relative tolerance for rank decisions and for tight constraints.
pub const RANK_TOL: f64 = 1e-9;
/// Singular values in `(tol, DEGENERACY_FACTOR * tol]` are too close to call.
const DEGENERACY_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeGenerators {
    /// Unit-norm extreme rays of the pointed part.
    pub rays: Vec<Vec<f64>>,
    /// Orthonormal basis of the lineality space.
    pub lineality: Vec<Vec<f64>>,
    /// Ambient dimension `d`.
    pub dim: usize,
}

impl ConeGenerators {
    /// The trivial cone `{0}` in `R^d`.
    pub fn zero(dim: usize) -> Self {
        ConeGenerators {
            rays: Vec::new(),
            lineality: Vec::new(),
            dim,
        }
    }

    /// Is `a` a nonnegative combination of the rays plus a lineality vector?
    /// Decided by a phase-one LP.
    pub fn contains(&self, a: &[f64]) -> Result<bool, PolyError> {
        if a.len() != self.dim {
            return Err(PolyError::Shape(format!("direction has length {}, cone lives in R^{}", a.len(), self.dim)));
        }
        let refs: Vec<&Vec<f64>> = self.rays.iter().collect();
        combination_exists(&refs, &self.lineality, a)
    }

    /// True when no ray lies in the cone generated by the others together
    /// with the lineality space (checked by LP for each ray).
    pub fn is_minimal(&self) -> Result<bool, PolyError> {
        for i in 0..self.rays.len() {
            let others: Vec<&Vec<f64>> = self.rays.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r).collect();
            if combination_exists(&others, &self.lineality, &self.rays[i])? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// `{lambda >= 0, mu free : sum lambda_j r_j + sum mu_l l_l = target}` non-empty?
fn combination_exists(rays: &[&Vec<f64>], lineality: &[Vec<f64>], target: &[f64]) -> Result<bool, PolyError> {
    let d = target.len();
    let n = rays.len() + lineality.len();
    if n == 0 {
        return Ok(norm(target) <= RANK_TOL);
    }
    let mut rows = vec![vec![0.0; n]; d];
    let columns: Vec<&Vec<f64>> = rays.iter().copied().chain(lineality.iter()).collect();
    for (j, r) in columns.iter().enumerate() {
        for i in 0..d {
            rows[i][j] = r[i];
        }
    }
    let mut p = LpProblem::with_rows(vec![0.0; n], &rows, vec![RowSense::Eq; d], target.to_vec())?;
    for b in p.bounds.iter_mut().skip(rays.len()) {
        *b = (f64::NEG_INFINITY, f64::INFINITY);
    }
    Ok(lp_solve(&p)?.status == LpStatus::Optimal)
}

/// `W^T a >= -tol * |a|` componentwise.
pub fn satisfies_inequalities(w: &Matrix, a: &[f64], tol: f64) -> bool {
    let scale = tol * norm(a).max(1.0);
    w.vec_mul(a).iter().all(|v| *v >= -scale)
}

/// Enumerates generators of `{a in R^d : a^T W >= 0}` for `W` of shape `d x p`.
pub fn enumerate_rays(w: &Matrix) -> Result<ConeGenerators, PolyError> {
    let d = w.rows();
    let p = w.cols();
    if d == 0 {
        return Err(PolyError::Shape("W must have at least one row".into()));
    }
    if d > MAX_DIM || p > MAX_COLUMNS {
        return Err(PolyError::SizeLimit(format!(
            "W is {d} x {p}; limits are {MAX_DIM} rows and {MAX_COLUMNS} columns"
        )));
    }
    if p == 0 {
        let lineality = (0..d).map(|i| unit(d, i)).collect();
        return Ok(ConeGenerators {
            rays: Vec::new(),
            lineality,
            dim: d,
        });
    }

    let (range_basis, lineality) = split_lineality(w)?;
    let k = range_basis.len();

    // Constraints in range coordinates: g_j . z >= 0 with g_j = Q^T w_j.
    let mut constraints: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let col = w.column(j);
        let g: Vec<f64> = range_basis.iter().map(|q| dot(q, &col)).collect();
        let gn = norm(&g);
        if gn > RANK_TOL * norm(&col).max(1.0) {
            constraints.push(g.iter().map(|v| v / gn).collect());
        }
    }

    let pointed = double_description(&constraints, k)?;
    let mut rays: Vec<Vec<f64>> = pointed
        .into_iter()
        .map(|z| {
            let mut a = vec![0.0; d];
            for (zi, q) in z.iter().zip(&range_basis) {
                for (ai, qi) in a.iter_mut().zip(q) {
                    *ai += zi * qi;
                }
            }
            let n = norm(&a);
            a.iter_mut().for_each(|v| *v /= n);
            clean(&mut a);
            a
        })
        .collect();
    rays.sort_by(|a, b| {
        b.iter()
            .zip(a.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let w_scale = (0..p).map(|j| norm(&w.column(j))).fold(1.0f64, f64::max);
    for r in &rays {
        if !satisfies_inequalities(w, r, 1e-9 * w_scale) {
            return Err(PolyError::Degenerate("enumerated ray violates a cone inequality".into()));
        }
    }
    Ok(ConeGenerators { rays, lineality, dim: d })
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    e
}

/// Snaps round-off noise to exact zeros.
fn clean(v: &mut [f64]) {
    for x in v.iter_mut() {
        if x.abs() < 1e-14 {
            *x = 0.0;
        }
    }
}

/// Orthonormal bases of `range(W)` and `null(W^T)`.
fn split_lineality(w: &Matrix) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), PolyError> {
    let d = w.rows();
    let p = w.cols();
    // Pad W^T with zero rows so the SVD returns a full d x d right factor.
    let rows = p.max(d);
    let mut wt = nalgebra::DMatrix::<f64>::zeros(rows, d);
    for i in 0..d {
        for j in 0..p {
            wt[(j, i)] = w[(i, j)];
        }
    }
    let svd = wt.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| PolyError::Degenerate("SVD did not converge".into()))?;
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |a, b| a.max(*b));
    let tol = RANK_TOL * sigma_max.max(1.0);
    let mut range = Vec::new();
    let mut null = Vec::new();
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol && *s <= DEGENERACY_FACTOR * tol {
            return Err(PolyError::Degenerate(format!(
                "singular value {s:e} of W is too close to the rank tolerance {tol:e}"
            )));
        }
        let mut v: Vec<f64> = v_t.row(i).iter().copied().collect();
        clean(&mut v);
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        if *s > tol {
            range.push(v);
        } else {
            null.push(v);
        }
    }
    Ok((range, null))
}

/// Extreme rays of the pointed cone `{z in R^k : g_j . z >= 0}` where the
/// `g_j` span `R^k`.
fn double_description(constraints: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>, PolyError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    // Greedy choice of k independent constraints for the initial simplex cone.
    let mut chosen: Vec<usize> = Vec::new();
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for (j, g) in constraints.iter().enumerate() {
        let mut r = g.clone();
        for q in &ortho {
            let c = dot(&r, q);
            r.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&r);
        if n > 1e-7 {
            r.iter_mut().for_each(|x| *x /= n);
            ortho.push(r);
            chosen.push(j);
            if chosen.len() == k {
                break;
            }
        }
    }
    if chosen.len() < k {
        return Err(PolyError::Degenerate("cone inequalities do not span the range of W".into()));
    }
    let g_s = nalgebra::DMatrix::from_fn(k, k, |i, j| constraints[chosen[i]][j]);
    let inv = g_s
        .try_inverse()
        .ok_or_else(|| PolyError::Degenerate("initial constraint block is singular".into()))?;

    struct Ray {
        z: Vec<f64>,
        zeros: u32,
    }
    let mut processed: u32 = 0;
    for &j in &chosen {
        processed |= 1 << j;
    }
    let zero_set = |z: &[f64], mask: u32| -> u32 {
        let mut s = 0u32;
        for (j, g) in constraints.iter().enumerate() {
            if mask & (1 << j) != 0 && dot(g, z).abs() <= RANK_TOL {
                s |= 1 << j;
            }
        }
        s
    };
    let mut rays: Vec<Ray> = (0..k)
        .map(|c| {
            let mut z: Vec<f64> = (0..k).map(|i| inv[(i, c)]).collect();
            let n = norm(&z);
            z.iter_mut().for_each(|v| *v /= n);
            let zeros = zero_set(&z, processed);
            Ray { z, zeros }
        })
        .collect();

    for (j, g) in constraints.iter().enumerate() {
        if processed & (1 << j) != 0 {
            continue;
        }
        let vals: Vec<f64> = rays.iter().map(|r| dot(g, &r.z)).collect();
        let plus: Vec<usize> = (0..rays.len()).filter(|&i| vals[i] > RANK_TOL).collect();
        let minus: Vec<usize> = (0..rays.len()).filter(|&i| vals[i] < -RANK_TOL).collect();
        let mut next: Vec<Ray> = Vec::new();
        for &pi in &plus {
            for &ni in &minus {
                let common = rays[pi].zeros & rays[ni].zeros;
                if (common.count_ones() as usize) + 2 < k {
                    continue;
                }
                let adjacent = rays
                    .iter()
                    .enumerate()
                    .all(|(o, r)| o == pi || o == ni || common & !r.zeros != 0);
                if !adjacent {
                    continue;
                }
                let (vp, vn) = (vals[pi], vals[ni]);
                let mut z: Vec<f64> = rays[ni]
                    .z
                    .iter()
                    .zip(&rays[pi].z)
                    .map(|(n, p)| vp * n - vn * p)
                    .collect();
                let nz = norm(&z);
                z.iter_mut().for_each(|v| *v /= nz);
                next.push(Ray {
                    z,
                    zeros: common | (1 << j),
                });
            }
        }
        let mut kept: Vec<Ray> = Vec::new();
        for (i, mut r) in rays.into_iter().enumerate() {
            if vals[i] > RANK_TOL {
                kept.push(r);
            } else if vals[i] >= -RANK_TOL {
                r.zeros |= 1 << j;
                kept.push(r);
            }
        }
        kept.extend(next);
        rays = kept;
        processed |= 1 << j;
    }

    // Drop numerical duplicates.
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in rays {
        if !out.iter().any(|o| o.iter().zip(&r.z).all(|(a, b)| (a - b).abs() <= 1e-9)) {
            out.push(r.z);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn identity_gives_standard_basis() {
        for d in 1..=5 {
            let g = enumerate_rays(&Matrix::identity(d)).unwrap();
            assert_eq!(g.rays.len(), d);
            assert!(g.lineality.is_empty());
            for i in 0..d {
                assert!(g.rays.iter().any(|r| approx_eq(r, &unit(d, i))), "missing e_{i}");
            }
        }
    }

    #[test]
    fn opposite_columns_give_zero_cone() {
        let w = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let g = enumerate_rays(&w).unwrap();
        assert!(g.rays.is_empty() && g.lineality.is_empty());
    }

    #[test]
    fn invertible_two_by_two() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let g = enumerate_rays(&w).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(g.rays.len(), 2);
        assert!(g.rays.iter().any(|r| approx_eq(r, &[s, -s])));
        assert!(g.rays.iter().any(|r| approx_eq(r, &[0.0, 1.0])));
    }

    #[test]
    fn rank_deficient_has_lineality() {
        // W^T a >= 0 only constrains a_1: half-space with a_2 free
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let g = enumerate_rays(&w).unwrap();
        assert_eq!(g.rays, vec![vec![1.0, 0.0]]);
        assert_eq!(g.lineality.len(), 1);
        assert!((g.lineality[0][1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_pyramid_has_four_rays() {
        // cone over a square: a_3 >= |a_1|, a_3 >= |a_2| in disguise
        let w = Matrix::from_rows(&[
            vec![1.0, -1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, -1.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let g = enumerate_rays(&w).unwrap();
        assert_eq!(g.rays.len(), 4);
        assert!(g.is_minimal().unwrap());
        assert!(g.contains(&[0.0, 0.0, 1.0]).unwrap());
        assert!(!g.contains(&[0.0, 0.0, -1.0]).unwrap());
    }

    #[test]
    fn near_singular_rejected() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-7]]).unwrap();
        assert!(matches!(enumerate_rays(&w), Err(PolyError::Degenerate(_))));
    }

    #[test]
    fn size_limits() {
        assert!(matches!(
            enumerate_rays(&Matrix::identity(13)),
            Err(PolyError::SizeLimit(_))
        ));
    }

    #[test]
    fn no_columns_is_whole_space() {
        let g = enumerate_rays(&Matrix::zeros(3, 0)).unwrap();
        assert!(g.rays.is_empty());
        assert_eq!(g.lineality.len(), 3);
    }
}
