//! The m-segment reordering of `[0, 1]` for which the binomial bound holds
//! with equality.
//!
//! The k-th order makes `I_k = [(k-1)/m, k/m)` smaller than the rest of
//! `[0, 1]` and keeps the usual order inside and outside `I_k`. For a sample
//! `x_1..x_N`, `h_k` is its `<=_k`-minimum and `Delta = lambda{y : y <_k h_k
//! for some k}`. The degree of feasibility is `1 - Delta`, and
//! `P{Delta > alpha} = binomial_tail(m, N, alpha)` whenever `alpha <= 1/m`.

use serde_json::json;

use crate::rng::{open_unit, SeedSpec, StreamRole};
use crate::stats::Estimate;

use super::{bound_pair, par_trials, Cell, Counter, ExperimentConfig, ExperimentError, ExperimentOutput, Plot, Table, TightnessCell, TrialRecord, VIOLATION_Z};

/// `Delta` for the sample `xs` under the `m` reordered relations.
pub fn delta(m: usize, xs: &[f64]) -> f64 {
    let mf = m as f64;
    let global_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(2 * m);
    for k in 0..m {
        let (lo, hi) = (k as f64 / mf, (k + 1) as f64 / mf);
        let inside = xs.iter().copied().filter(|&x| x >= lo && x < hi).fold(f64::INFINITY, f64::min);
        if inside.is_finite() {
            // h_k lies in I_k: only [lo, h_k) precedes it
            intervals.push((lo, inside));
        } else {
            // h_k is the overall minimum: all of I_k plus [0, h_k) precede it
            intervals.push((lo, hi));
            intervals.push((0.0, global_min.min(1.0)));
        }
    }
    union_length(&mut intervals)
}

/// Total length of a union of half-open intervals.
fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for &(a, b) in intervals.iter() {
        if b <= a {
            continue;
        }
        current = match current {
            Some((ca, cb)) if a <= cb => Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((ca, cb)) = current {
        total += cb - ca;
    }
    total
}

/// One simulated trial: `N` uniforms from the `Threshold` stream.
pub fn trial_delta(cell: &TightnessCell, seed: &SeedSpec) -> f64 {
    let mut rng = seed.with_role(StreamRole::Threshold).rng();
    let xs: Vec<f64> = (0..cell.n).map(|_| open_unit(&mut rng)).collect();
    delta(cell.m as usize, &xs)
}

/// Simulated `P{D < 1 - alpha}` for one cell with its bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TightnessResult {
    pub cell: TightnessCell,
    pub estimate: Estimate,
    pub bound: f64,
}

impl TightnessResult {
    pub fn within_tolerance(&self) -> bool {
        (self.estimate.value - self.bound).abs() <= VIOLATION_Z * self.estimate.stderr
    }
}

/// Runs one cell with `trials` trials; `cell_index` selects the stage slot
/// of the seed so that cells draw from disjoint streams.
pub fn run_cell(cell: &TightnessCell, trials: usize, master_seed: u64, cell_index: u32) -> Result<(TightnessResult, Vec<f64>), ExperimentError> {
    let (bound, _) = bound_pair(cell.m as usize, cell.n as usize, cell.alpha)?;
    let deltas = par_trials(trials, |t| trial_delta(cell, &SeedSpec::new(master_seed, t, cell_index, StreamRole::Threshold)));
    let mut c = Counter::default();
    for d in &deltas {
        c.record(*d > cell.alpha);
    }
    let estimate = c.estimate().expect("at least one trial");
    Ok((TightnessResult { cell: *cell, estimate, bound }, deltas))
}

pub(crate) fn run(config: &ExperimentConfig, cells: &[TightnessCell]) -> Result<ExperimentOutput, ExperimentError> {
    let label = config.label();
    let mut records = Vec::new();
    let mut summary = Table::new(&[
        "experiment",
        "m",
        "N",
        "alpha",
        "trials",
        "p_hat",
        "stderr",
        "bound_binom",
        "bound_chernoff",
        "within_3_stderr",
    ]);
    let mut report_cells = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let (res, deltas) = run_cell(cell, config.trials, config.seed, i as u32)?;
        let (_, chernoff) = bound_pair(cell.m as usize, cell.n as usize, cell.alpha)?;
        for (t, d) in deltas.iter().enumerate() {
            records.push(TrialRecord {
                experiment: label.clone(),
                trial: t as u64,
                n: cell.n,
                alpha: Some(cell.alpha),
                dfrak_r: Some(1.0 - d),
                d_hat: None,
                d_xstar: None,
                bound_binom: Some(res.bound),
                bound_chernoff: chernoff,
                flags: Vec::new(),
                seed: config.seed,
            });
        }
        summary.push(vec![
            Cell::Text(label.clone()),
            Cell::Int(cell.m),
            Cell::Int(cell.n),
            Cell::Float(cell.alpha),
            Cell::Int(config.trials as u64),
            Cell::Float(res.estimate.value),
            Cell::Float(res.estimate.stderr),
            Cell::Float(res.bound),
            Cell::opt(chernoff),
            Cell::Text(res.within_tolerance().to_string()),
        ]);
        report_cells.push(json!({
            "m": cell.m,
            "N": cell.n,
            "alpha": cell.alpha,
            "p_hat": res.estimate.value,
            "stderr": res.estimate.stderr,
            "bound_binom": res.bound,
            "within_3_stderr": res.within_tolerance(),
        }));
    }
    let plot = Plot::from_table(&format!("{label}: P(D < 1 - alpha) vs bound"), &summary, "N", &["p_hat", "bound_binom"], Some("m"));
    Ok(ExperimentOutput {
        label: label.clone(),
        trials: super::trial_table(&records),
        summary,
        multistage: None,
        plot,
        report: json!({ "experiment": label, "kind": "tightness", "trials": config.trials, "cells": report_cells }),
        solver_failures: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m1_delta_is_sample_minimum() {
        assert_eq!(delta(1, &[0.3, 0.7, 0.2]), 0.2);
    }

    #[test]
    fn m2_both_segments_hit() {
        // h_1 = 0.1 in [0, 0.5), h_2 = 0.6 in [0.5, 1)
        let d = delta(2, &[0.1, 0.6, 0.9]);
        assert!((d - (0.1 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn m2_empty_segment_takes_whole_interval() {
        // nothing in [0.5, 1): that segment plus [0, min) precede h_2
        let d = delta(2, &[0.2, 0.3]);
        assert!((d - 0.7).abs() < 1e-15);
    }

    #[test]
    fn union_merges_overlaps() {
        let mut iv = vec![(0.0, 0.2), (0.1, 0.3), (0.5, 0.6), (0.6, 0.7)];
        assert!((union_length(&mut iv) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_event_is_sure() {
        // Delta > 0 almost surely, so P{D < 1} = 1 = binomial_tail(m, N, 0)
        let cell = TightnessCell { m: 2, n: 10, alpha: 0.0 };
        let (res, _) = run_cell(&cell, 200, 5, 0).unwrap();
        assert_eq!(res.estimate.value, 1.0);
        assert_eq!(res.bound, 1.0);
    }

    #[test]
    fn m1_matches_closed_form() {
        let cell = TightnessCell { m: 1, n: 10, alpha: 0.1 };
        let (res, _) = run_cell(&cell, 20_000, 42, 0).unwrap();
        assert!((res.bound - 0.9f64.powi(10)).abs() < 1e-15);
        assert!(res.within_tolerance(), "{res:?}");
    }
}
