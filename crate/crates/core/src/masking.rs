//! Signed Supermasks: real-valued scores quantized to {−1, 0, +1}.
//!
//! Scores `M` are the only trainable parameters of a masked layer. The
//! forward pass uses `g(M)`; the backward pass treats `g` as the identity
//! (straight-through estimator), so `∂L/∂M = ∂L/∂(W ⊙ g(M)) ⊙ W`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// `−1` at or below `tau_n`, `+1` at or above `tau_p`, `0` in between.
    Signed,
    /// `+1` at or above `tau_p`, `0` otherwise.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub scores: Tensor,
    pub tau_n: f64,
    pub tau_p: f64,
    pub mode: MaskMode,
}

impl MaskState {
    pub fn new(scores: Tensor, tau_n: f64, tau_p: f64, mode: MaskMode) -> Result<Self> {
        // tau_n == tau_p == 0 is allowed: nothing pruned at initialization.
        let zero_pair = tau_n == 0.0 && tau_p == 0.0;
        if !(tau_n <= 0.0 && tau_p >= 0.0 && (tau_n < tau_p || zero_pair)) {
            return Err(Error::Invalid(format!(
                "thresholds need tau_n <= 0 <= tau_p and tau_n < tau_p, got ({tau_n}, {tau_p})"
            )));
        }
        Ok(Self {
            scores,
            tau_n,
            tau_p,
            mode,
        })
    }

    pub fn symmetric(scores: Tensor, tau: f64, mode: MaskMode) -> Result<Self> {
        Self::new(scores, -tau, tau, mode)
    }

    pub fn quantize(&self) -> Tensor {
        quantize_scores(&self.scores, self.tau_n, self.tau_p, self.mode)
    }
}

#[inline]
pub fn quantize_value(m: f64, tau_n: f64, tau_p: f64, mode: MaskMode) -> f64 {
    if m >= tau_p {
        1.0
    } else if mode == MaskMode::Signed && m <= tau_n {
        -1.0
    } else {
        0.0
    }
}

/// Ternary quantizer `g`. With `tau_n = tau_p = 0` in signed mode every score
/// maps to ±1 (zero itself maps to +1).
pub fn quantize_scores(scores: &Tensor, tau_n: f64, tau_p: f64, mode: MaskMode) -> Tensor {
    scores.map(|m| quantize_value(m, tau_n, tau_p, mode))
}

pub fn quantize(state: &MaskState) -> Tensor {
    state.quantize()
}

/// Score gradient under the straight-through estimator: `grad_effective ⊙ weights`.
pub fn ste_grad(grad_effective: &Tensor, weights: &Tensor) -> Result<Tensor> {
    grad_effective.zip_map(weights, "ste_grad", |g, w| g * w)
}

/// Symmetric thresholds that zero a fraction `p0_target` of `Uniform(−a, a)` scores.
pub fn thresholds_for_target(init_bound: f64, p0_target: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&p0_target) {
        return Err(Error::Invalid(format!(
            "target pruning rate must lie in [0, 1), got {p0_target}"
        )));
    }
    if init_bound.is_nan() || init_bound <= 0.0 {
        return Err(Error::Invalid(format!(
            "score bound must be positive, got {init_bound}"
        )));
    }
    let tau = init_bound * p0_target;
    Ok((-tau, tau))
}

fn check_ternary(mask: &Tensor) -> Result<()> {
    match mask
        .data()
        .iter()
        .find(|&&v| v != 0.0 && v != 1.0 && v != -1.0)
    {
        Some(&v) => Err(Error::NotTernary(v)),
        None => Ok(()),
    }
}

/// Fraction of nonzero mask entries.
pub fn remaining_ratio(mask: &Tensor) -> Result<f64> {
    check_ternary(mask)?;
    let nz = mask.data().iter().filter(|&&v| v != 0.0).count();
    Ok(nz as f64 / mask.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskCounts {
    pub neg: usize,
    pub zero: usize,
    pub pos: usize,
}

impl MaskCounts {
    pub fn total(&self) -> usize {
        self.neg + self.zero + self.pos
    }

    pub fn nonzero(&self) -> usize {
        self.neg + self.pos
    }
}

pub fn mask_distribution(mask: &Tensor) -> Result<MaskCounts> {
    let mut c = MaskCounts::default();
    for &v in mask.data() {
        if v == -1.0 {
            c.neg += 1;
        } else if v == 0.0 {
            c.zero += 1;
        } else if v == 1.0 {
            c.pos += 1;
        } else {
            return Err(Error::NotTernary(v));
        }
    }
    Ok(c)
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(MaskMode::Signed),
            "binary" => Ok(MaskMode::Binary),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Signed => "signed",
            MaskMode::Binary => "binary",
        })
    }
}
