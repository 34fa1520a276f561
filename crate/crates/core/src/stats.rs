//! Small statistics helpers shared by the estimators and experiment runners.

use serde::{Deserialize, Serialize};

/// A probability estimate with its standard error (zero when exact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    /// Frequency `hits / trials` with the Wilson-score standard error.
    pub fn frequency(hits: u64, trials: u64) -> Self {
        Estimate {
            value: if trials == 0 { f64::NAN } else { hits as f64 / trials as f64 },
            stderr: wilson_stderr(hits, trials),
        }
    }
}

/// Wilson-score standard error at `z = 1`:
/// `sqrt(p(1-p)/R + 1/(4R^2)) / (1 + 1/R)`.
///
/// Unlike the Wald form it stays positive when `hits` is 0 or `R`.
pub fn wilson_stderr(hits: u64, trials: u64) -> f64 {
    if trials == 0 {
        return f64::NAN;
    }
    let r = trials as f64;
    let p = hits as f64 / r;
    (p * (1.0 - p) / r + 1.0 / (4.0 * r * r)).sqrt() / (1.0 + 1.0 / r)
}

/// Ordinary least squares `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Fits a line; needs at least two distinct `x` values.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
        points: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_positive_at_zero_hits() {
        let s = wilson_stderr(0, 100);
        assert!(s > 0.0 && s < 0.01);
        // close to the Wald value away from the edges
        let wald = (0.5f64 * 0.5 / 1e4).sqrt();
        assert!((wilson_stderr(5000, 10_000) - wald).abs() < 1e-6);
    }

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, -1.0, -3.0];
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.intercept - 3.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }
}
