//! Binomial-tail feasibility bounds.
//!
//! `binomial_tail(m, N, alpha)` is `P{Bin(N, alpha) <= m - 1}`, the upper
//! bound on the probability that a chain-constrained SAA domain of order `m`
//! has degree of feasibility below `1 - alpha`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("order m = {m} must satisfy 1 <= m <= N = {n}")]
    OrderOutOfRange { m: u64, n: u64 },
    #[error("alpha = {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("Chernoff estimate needs alpha > 0 and N*alpha >= m - 1 (m = {m}, N = {n}, alpha = {alpha})")]
    ChernoffPrecondition { m: u64, n: u64, alpha: f64 },
}

/// `(m, N, alpha)` for one bound evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInput {
    pub m: u64,
    pub n: u64,
    pub alpha: f64,
}

impl BoundInput {
    pub fn new(m: u64, n: u64, alpha: f64) -> Result<Self, BoundError> {
        let input = BoundInput { m, n, alpha };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<(), BoundError> {
        if self.m < 1 || self.m > self.n {
            return Err(BoundError::OrderOutOfRange { m: self.m, n: self.n });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(BoundError::AlphaOutOfRange(self.alpha));
        }
        Ok(())
    }
}

/// Positive real stored as `mantissa * 2^exponent` with `mantissa` in
/// `[0.5, 1)`, so long products neither overflow nor underflow.
#[derive(Debug, Clone, Copy)]
struct Scaled {
    mantissa: f64,
    exponent: i64,
}

impl Scaled {
    fn new(x: f64) -> Self {
        debug_assert!(x > 0.0 && x.is_finite());
        let (mantissa, exponent) = split_exponent(x);
        Scaled { mantissa, exponent }
    }

    fn mul(self, x: f64) -> Self {
        let (mantissa, e) = split_exponent(self.mantissa * x);
        Scaled {
            mantissa,
            exponent: self.exponent + e,
        }
    }

    fn square(self) -> Self {
        let (mantissa, e) = split_exponent(self.mantissa * self.mantissa);
        Scaled {
            mantissa,
            exponent: 2 * self.exponent + e,
        }
    }

    fn mul_scaled(self, other: Scaled) -> Self {
        let (mantissa, e) = split_exponent(self.mantissa * other.mantissa);
        Scaled {
            mantissa,
            exponent: self.exponent + other.exponent + e,
        }
    }

    fn to_f64_scaled_by(self, exponent_shift: i64) -> f64 {
        let e = self.exponent - exponent_shift;
        if e < -1100 {
            0.0
        } else {
            self.mantissa * 2f64.powi(e as i32)
        }
    }
}

/// Splits a positive normal float into `(m, e)` with `m` in `[0.5, 1)`.
fn split_exponent(x: f64) -> (f64, i64) {
    let bits = x.to_bits();
    let raw = ((bits >> 52) & 0x7ff) as i64;
    debug_assert!(raw != 0 && raw != 0x7ff, "split_exponent needs a normal float");
    let mantissa = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (mantissa, raw - 1022)
}

fn powi_scaled(base: f64, mut n: u64) -> Scaled {
    let mut result = Scaled::new(1.0);
    let mut b = Scaled::new(base);
    while n > 0 {
        if n & 1 == 1 {
            result = result.mul_scaled(b);
        }
        b = b.square();
        n >>= 1;
    }
    result
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// The terms `C(N,k) alpha^k (1-alpha)^(N-k)` for `k = 0..=k_max`, for
/// `0 < alpha < 1`.
///
/// `(1-alpha)^N` comes from binary powering of the exactly split `1 - alpha`
/// and later terms from the ratio recurrence, all with a separate binary
/// exponent. Relative error grows like `k_max` ulps rather than with the
/// magnitude of `ln C(N,k)`.
fn binomial_terms(n: u64, alpha: f64, k_max: u64) -> Vec<Scaled> {
    let hi = 1.0 - alpha;
    let lo = -alpha - (hi - 1.0);
    let correction = lo / hi;
    let mut term = powi_scaled(hi, n).mul((n as f64 * correction.ln_1p()).exp());
    let odds = alpha / hi * (1.0 - correction);
    let mut terms = Vec::with_capacity(k_max as usize + 1);
    terms.push(term);
    for k in 1..=k_max {
        term = term.mul((n - k + 1) as f64 / k as f64 * odds);
        terms.push(term);
    }
    terms
}

fn sum_scaled(terms: &[Scaled]) -> f64 {
    let Some(top) = terms.iter().map(|t| t.exponent).max() else {
        return 0.0;
    };
    let scaled = compensated_sum(terms.iter().map(|t| t.to_f64_scaled_by(top)));
    if scaled == 0.0 {
        return 0.0;
    }
    let (mantissa, e) = split_exponent(scaled);
    Scaled {
        mantissa,
        exponent: top + e,
    }
    .to_f64_scaled_by(0)
}

/// `sum_{k=0}^{m-1} C(N,k) alpha^k (1-alpha)^(N-k)`.
pub fn binomial_tail(m: u64, n: u64, alpha: f64) -> Result<f64, BoundError> {
    BoundInput::new(m, n, alpha)?;
    if alpha == 0.0 {
        return Ok(1.0);
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    // All terms are positive, so the direct sum keeps full relative accuracy.
    let terms = binomial_terms(n, alpha, m - 1);
    Ok(sum_scaled(&terms).clamp(0.0, 1.0))
}

/// `sum_{k=m}^{N} C(N,k) alpha^k (1-alpha)^(N-k)`, the complementary mass.
pub fn binomial_upper_mass(m: u64, n: u64, alpha: f64) -> Result<f64, BoundError> {
    BoundInput::new(m, n, alpha)?;
    if alpha == 0.0 {
        return Ok(0.0);
    }
    if alpha == 1.0 {
        return Ok(1.0);
    }
    let terms = binomial_terms(n, alpha, n);
    Ok(sum_scaled(&terms[m as usize..]).clamp(0.0, 1.0))
}

/// `exp{-(N alpha - m + 1)^2 / (2 N alpha)}`, valid when `N alpha >= m - 1`.
pub fn chernoff_estimate(m: u64, n: u64, alpha: f64) -> Result<f64, BoundError> {
    BoundInput::new(m, n, alpha)?;
    let na = n as f64 * alpha;
    let excess = na - (m as f64 - 1.0);
    if alpha <= 0.0 || excess < 0.0 {
        return Err(BoundError::ChernoffPrecondition { m, n, alpha });
    }
    Ok((-(excess * excess) / (2.0 * na)).exp())
}

/// Lower bound on the joint event over stages:
/// `prod_t (1 - binomial_tail(m_t, N_t, alpha_t))`.
pub fn multistage_product(inputs: &[BoundInput]) -> Result<f64, BoundError> {
    inputs.iter().try_fold(1.0, |acc, inp| {
        Ok(acc * (1.0 - binomial_tail(inp.m, inp.n, inp.alpha)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_values() {
        let v = binomial_tail(1, 10, 0.1).unwrap();
        assert!((v - 0.9f64.powi(10)).abs() < 1e-15);
        assert!((v - 0.3486784).abs() < 1e-7);
        assert!((binomial_tail(2, 2, 0.5).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn derived_value_m3_n20() {
        // exact: 0.8^20 + 20*0.2*0.8^19 + 190*0.04*0.8^18
        let exact = 0.8f64.powi(20) + 20.0 * 0.2 * 0.8f64.powi(19) + 190.0 * 0.04 * 0.8f64.powi(18);
        let v = binomial_tail(3, 20, 0.2).unwrap();
        assert!((v - exact).abs() < 1e-14);
        assert!((v - 0.20608).abs() < 1e-5);
    }

    #[test]
    fn alpha_edges() {
        assert_eq!(binomial_tail(3, 5, 0.0).unwrap(), 1.0);
        assert_eq!(binomial_tail(5, 5, 1.0).unwrap(), 0.0);
        assert_eq!(binomial_upper_mass(3, 5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn input_errors() {
        assert_eq!(binomial_tail(6, 5, 0.1), Err(BoundError::OrderOutOfRange { m: 6, n: 5 }));
        assert_eq!(binomial_tail(0, 5, 0.1), Err(BoundError::OrderOutOfRange { m: 0, n: 5 }));
        assert_eq!(binomial_tail(1, 5, 1.5), Err(BoundError::AlphaOutOfRange(1.5)));
        assert!(binomial_tail(1, 5, f64::NAN).is_err());
    }

    #[test]
    fn chernoff_examples() {
        // N alpha = m - 1 gives exponent zero
        assert_eq!(chernoff_estimate(3, 20, 0.1).unwrap(), 1.0);
        let v = chernoff_estimate(1, 100, 0.1).unwrap();
        assert!((v - (-5.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.0067379).abs() < 1e-7);
        assert!(matches!(
            chernoff_estimate(5, 20, 0.1),
            Err(BoundError::ChernoffPrecondition { .. })
        ));
        assert!(chernoff_estimate(1, 20, 0.0).is_err());
    }

    #[test]
    fn multistage_examples() {
        let single = multistage_product(&[BoundInput::new(2, 10, 0.1).unwrap()]).unwrap();
        assert!((single - (1.0 - binomial_tail(2, 10, 0.1).unwrap())).abs() < 1e-15);
        let zero = multistage_product(&[
            BoundInput::new(1, 10, 0.1).unwrap(),
            BoundInput::new(2, 10, 0.0).unwrap(),
        ])
        .unwrap();
        assert_eq!(zero, 0.0);
        let two = multistage_product(&[
            BoundInput::new(1, 10, 0.1).unwrap(),
            BoundInput::new(1, 10, 0.1).unwrap(),
        ])
        .unwrap();
        let exact = (1.0 - 0.9f64.powi(10)).powi(2);
        assert!((two - exact).abs() < 1e-14);
        assert!((two - 0.424219).abs() < 1e-6);
    }

    #[test]
    fn large_n_does_not_overflow() {
        let v = binomial_tail(50, 100_000, 0.001).unwrap();
        assert!(v.is_finite() && v > 0.0 && v < 1.0);
        let w = binomial_tail(1, 100_000, 0.01).unwrap();
        assert!(w >= 0.0 && w < 1e-300);
    }
}
