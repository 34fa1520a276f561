//! Scalar laws and reproducible random streams.
//!
//! Every Monte Carlo draw in the crate goes through [`Distribution`] and a
//! generator obtained from a [`SeedSpec`]. Streams are keyed by the full
//! `(master_seed, trial_index, stage_index, role)` tuple, so a trial produces
//! the same draws no matter which worker runs it or in which order.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Tolerance on the total mass of a discrete law.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("invalid distribution parameters: {0}")]
    InvalidParameters(String),
    #[error("quantile level {0} outside [0, 1)")]
    BetaOutOfRange(f64),
}

/// A one-dimensional law with sampling, CDF and quantiles.
///
/// Serialized as a tagged record, e.g. `{"family":"uniform","a":0.0,"b":1.0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Distribution {
    Uniform {
        a: f64,
        b: f64,
    },
    Exponential {
        rate: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    /// Finite support. Atoms need not be sorted; duplicates are merged.
    Discrete {
        values: Vec<f64>,
        probs: Vec<f64>,
    },
    /// `shift + scale * base`; `scale` may be negative but not zero.
    Affine {
        base: Box<Distribution>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Distribution {
    pub fn uniform(a: f64, b: f64) -> Self {
        Distribution::Uniform { a, b }
    }

    pub fn exponential(rate: f64) -> Self {
        Distribution::Exponential { rate }
    }

    pub fn normal(mean: f64, sd: f64) -> Self {
        Distribution::Normal { mean, sd }
    }

    pub fn discrete(values: Vec<f64>, probs: Vec<f64>) -> Self {
        Distribution::Discrete { values, probs }
    }

    pub fn point(value: f64) -> Self {
        Distribution::Discrete {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn affine(base: Distribution, shift: f64, scale: f64) -> Self {
        Distribution::Affine {
            base: Box::new(base),
            shift,
            scale,
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        let bad = |msg: String| Err(DistError::InvalidParameters(msg));
        match self {
            Distribution::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && b > a) {
                    return bad(format!("uniform needs finite a < b, got a={a}, b={b}"));
                }
            }
            Distribution::Exponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return bad(format!("exponential rate must be positive, got {rate}"));
                }
            }
            Distribution::Normal { mean, sd } => {
                if !(mean.is_finite() && sd.is_finite() && *sd > 0.0) {
                    return bad(format!("normal needs finite mean and sd > 0, got {mean}, {sd}"));
                }
            }
            Distribution::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return bad(format!(
                        "discrete law needs matching non-empty values/probs ({} vs {})",
                        values.len(),
                        probs.len()
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("discrete atoms must be finite".into());
                }
                if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return bad("discrete probabilities must be non-negative".into());
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > PROB_SUM_TOL {
                    return bad(format!("discrete probabilities sum to {total}, not 1"));
                }
            }
            Distribution::Affine { base, shift, scale } => {
                if !(shift.is_finite() && scale.is_finite() && *scale != 0.0) {
                    return bad(format!("affine wrapper needs finite shift and nonzero scale, got {shift}, {scale}"));
                }
                base.validate()?;
            }
        }
        Ok(())
    }

    /// `P{X <= t}`.
    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            Distribution::Uniform { a, b } => ((t - a) / (b - a)).clamp(0.0, 1.0),
            Distribution::Exponential { rate } => {
                if t <= 0.0 {
                    0.0
                } else {
                    -(-rate * t).exp_m1()
                }
            }
            Distribution::Normal { mean, sd } => standard_normal().cdf((t - mean) / sd),
            Distribution::Discrete { .. } => {
                let mass: f64 = self.atoms().iter().filter(|(v, _)| *v <= t).map(|(_, p)| p).sum();
                mass.min(1.0)
            }
            Distribution::Affine { base, shift, scale } => {
                let below = |y: f64| shift + scale * y <= t;
                if *scale > 0.0 {
                    base.cdf(extreme_preimage((t - shift) / scale, below, true))
                } else {
                    base.survival_inclusive(extreme_preimage((t - shift) / scale, below, false))
                }
            }
        }
    }

    /// `P{X >= t}`, counting an atom at `t`.
    pub fn survival_inclusive(&self, t: f64) -> f64 {
        match self {
            Distribution::Discrete { .. } => {
                let mass: f64 = self.atoms().iter().filter(|(v, _)| *v >= t).map(|(_, p)| p).sum();
                mass.min(1.0)
            }
            Distribution::Affine { base, shift, scale } => {
                let above = |y: f64| shift + scale * y >= t;
                if *scale > 0.0 {
                    base.survival_inclusive(extreme_preimage((t - shift) / scale, above, false))
                } else {
                    base.cdf(extreme_preimage((t - shift) / scale, above, true))
                }
            }
            Distribution::Exponential { rate } => {
                if t <= 0.0 {
                    1.0
                } else {
                    (-rate * t).exp()
                }
            }
            Distribution::Normal { mean, sd } => standard_normal().sf((t - mean) / sd),
            // continuous: no atoms
            Distribution::Uniform { .. } => 1.0 - self.cdf(t),
        }
    }

    /// `(X)_beta = inf{t : P{X <= t} > beta}`; `beta = 0` gives the essential
    /// infimum, which is `-inf` for laws unbounded below.
    pub fn quantile_beta(&self, beta: f64) -> Result<f64, DistError> {
        if !(0.0..1.0).contains(&beta) {
            return Err(DistError::BetaOutOfRange(beta));
        }
        self.validate()?;
        Ok(self.upper_quantile(beta))
    }

    /// Left-continuous inverse `inf{t : P{X <= t} >= u}` for `u` in `(0, 1]`.
    ///
    /// Used for inverse-transform sampling and the comonotone coupling.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        match self {
            Distribution::Uniform { a, b } => a + u * (b - a),
            Distribution::Exponential { rate } => {
                if u >= 1.0 {
                    f64::INFINITY
                } else {
                    -(-u).ln_1p() / rate
                }
            }
            Distribution::Normal { mean, sd } => {
                if u >= 1.0 {
                    f64::INFINITY
                } else {
                    mean + sd * standard_normal().inverse_cdf(u)
                }
            }
            Distribution::Discrete { .. } => {
                let atoms = self.atoms();
                let mut cum = 0.0;
                for (v, p) in &atoms {
                    cum += p;
                    if cum >= u {
                        return *v;
                    }
                }
                atoms.last().map(|(v, _)| *v).unwrap_or(f64::NAN)
            }
            Distribution::Affine { base, shift, scale } => {
                if *scale > 0.0 {
                    shift + scale * base.inverse_cdf(u)
                } else {
                    // inf{t : P{X >= (t - shift)/scale} >= u} maps to the
                    // right-continuous inverse of the base at 1 - u.
                    shift + scale * base.upper_quantile((1.0 - u).max(0.0))
                }
            }
        }
    }

    /// Right-continuous inverse `inf{t : P{X <= t} > v}` for `v` in `[0, 1)`.
    fn upper_quantile(&self, v: f64) -> f64 {
        match self {
            Distribution::Uniform { a, b } => a + v * (b - a),
            Distribution::Exponential { rate } => -(-v).ln_1p() / rate,
            Distribution::Normal { mean, sd } => {
                if v <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    mean + sd * standard_normal().inverse_cdf(v)
                }
            }
            Distribution::Discrete { .. } => {
                let atoms = self.atoms();
                let mut cum = 0.0;
                for (val, p) in &atoms {
                    cum += p;
                    if cum > v {
                        return *val;
                    }
                }
                atoms.last().map(|(val, _)| *val).unwrap_or(f64::NAN)
            }
            Distribution::Affine { base, shift, scale } => {
                if *scale > 0.0 {
                    shift + scale * base.upper_quantile(v)
                } else {
                    shift + scale * base.inverse_cdf(1.0 - v)
                }
            }
        }
    }

    /// Atoms sorted by value with duplicate values merged.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            Distribution::Discrete { values, probs } => {
                let mut pairs: Vec<(f64, f64)> =
                    values.iter().copied().zip(probs.iter().copied()).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
                for (v, p) in pairs {
                    match merged.last_mut() {
                        Some(last) if last.0 == v => last.1 += p,
                        _ => merged.push((v, p)),
                    }
                }
                merged
            }
            _ => Vec::new(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Distribution::Uniform { a, b } => 0.5 * (a + b),
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::Normal { mean, .. } => *mean,
            Distribution::Discrete { values, probs } => {
                values.iter().zip(probs).map(|(v, p)| v * p).sum()
            }
            Distribution::Affine { base, shift, scale } => shift + scale * base.mean(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Distribution::Uniform { a, b } => (b - a).powi(2) / 12.0,
            Distribution::Exponential { rate } => 1.0 / (rate * rate),
            Distribution::Normal { sd, .. } => sd * sd,
            Distribution::Discrete { values, probs } => {
                let mu = self.mean();
                values.iter().zip(probs).map(|(v, p)| p * (v - mu).powi(2)).sum()
            }
            Distribution::Affine { base, scale, .. } => scale * scale * base.variance(),
        }
    }

    /// `E|X - t|` when it has a closed form.
    pub fn mean_abs_deviation_from(&self, t: f64) -> Option<f64> {
        match self {
            Distribution::Uniform { a, b } => {
                let w = b - a;
                Some(if t <= *a {
                    0.5 * (a + b) - t
                } else if t >= *b {
                    t - 0.5 * (a + b)
                } else {
                    ((t - a).powi(2) + (b - t).powi(2)) / (2.0 * w)
                })
            }
            Distribution::Discrete { values, probs } => {
                Some(values.iter().zip(probs).map(|(v, p)| p * (v - t).abs()).sum())
            }
            Distribution::Affine { base, shift, scale } => base
                .mean_abs_deviation_from((t - shift) / scale)
                .map(|m| m * scale.abs()),
            _ => None,
        }
    }

    /// One draw by inverse transform.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inverse_cdf(open_unit(rng))
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Starting from `y0`, the extreme float (largest if `upward`, else smallest)
/// still satisfying the monotone predicate `holds`.
///
/// Pulling `t` back through `shift + scale * y` by division can land one ulp
/// on the wrong side of an atom; this snaps the preimage to the forward map
/// actually used when sampling.
fn extreme_preimage(y0: f64, holds: impl Fn(f64) -> bool, upward: bool) -> f64 {
    if !y0.is_finite() {
        return y0;
    }
    let forward = |y: f64| if upward { y.next_up() } else { y.next_down() };
    let backward = |y: f64| if upward { y.next_down() } else { y.next_up() };
    let mut y = y0;
    if holds(y) {
        for _ in 0..8 {
            let next = forward(y);
            if !holds(next) {
                break;
            }
            y = next;
        }
    } else {
        for _ in 0..8 {
            y = backward(y);
            if holds(y) {
                break;
            }
        }
    }
    y
}

/// A uniform draw on the open interval `(0, 1)` with 53 bits of resolution.
pub fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// What a stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamRole {
    Threshold,
    Objective,
    Oracle,
}

impl StreamRole {
    fn tag(self) -> u32 {
        match self {
            StreamRole::Threshold => 1,
            StreamRole::Objective => 2,
            StreamRole::Oracle => 3,
        }
    }
}

/// Counter-style stream key. Two specs give the same stream iff all fields match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub trial_index: u64,
    pub stage_index: u32,
    pub stream_role: StreamRole,
}

impl SeedSpec {
    pub fn new(master_seed: u64, trial_index: u64, stage_index: u32, stream_role: StreamRole) -> Self {
        SeedSpec {
            master_seed,
            trial_index,
            stage_index,
            stream_role,
        }
    }

    pub fn with_role(self, stream_role: StreamRole) -> Self {
        SeedSpec { stream_role, ..self }
    }

    pub fn with_stage(self, stage_index: u32) -> Self {
        SeedSpec { stage_index, ..self }
    }

    pub fn with_trial(self, trial_index: u64) -> Self {
        SeedSpec { trial_index, ..self }
    }

    /// A fresh generator positioned at the start of this stream.
    ///
    /// The fields are packed injectively into the 256-bit ChaCha key, so
    /// distinct specs never share a keystream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.trial_index.to_le_bytes());
        key[16..20].copy_from_slice(&self.stage_index.to_le_bytes());
        key[20..24].copy_from_slice(&self.stream_role.tag().to_le_bytes());
        key[24..32].copy_from_slice(b"feaslab\0");
        ChaCha8Rng::from_seed(key)
    }
}
