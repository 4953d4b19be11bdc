//! Weight and mask-score initializers.
//!
//! Frozen weights are usually drawn as signed constants: every entry is
//! `±sqrt(Var)` with an independent fair sign. Uniform draws are used for
//! mask scores and for conventionally trained baselines.
//!
//! The ELU-aware rules divide by the expected fraction of surviving mask
//! entries `1 - p0`, so that masked layers keep the pre-activation variance
//! of an unmasked ELU network.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `E[(α eᶻ − α)² · 1{z<0}] / α²` for `z ~ N(0, 1)`.
pub const ELU_FORWARD_K: f64 = 0.144945;
/// `E[(α eᶻ)² · 1{z<0}] / α²` for `z ~ N(0, 1)`.
pub const ELU_BACKWARD_H: f64 = 0.168102;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    He,
    Xavier,
    Elu,
    Elus,
}

/// Which variance formula an ELU/ELUS scheme uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElusRule {
    /// `1.5 / (n (1 − p0))`, the rounded compromise of the two exact rules.
    Simplified,
    /// `1 / ((1/2 + k) n_in (1 − p0))`: preserves forward pre-activation variance.
    Forward,
    /// `1 / ((1/2 + h) n_out (1 − p0))`: preserves backward gradient variance.
    Backward,
    /// He variance `2/n` multiplied by `scale²`.
    ScaledHe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    SignedConstant,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FanMode {
    FanIn,
    FanOut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub scheme: Scheme,
    pub rule: ElusRule,
    pub distribution: Distribution,
    pub fan_in: usize,
    pub fan_out: usize,
    pub fan_mode: FanMode,
    /// Initial probability that a mask entry is zero. Only the ELUS scheme reads it.
    pub p0: f64,
    pub alpha: f64,
    /// Standard-deviation multiplier, used by [`ElusRule::ScaledHe`].
    pub scale: f64,
}

impl InitSpec {
    pub fn new(scheme: Scheme, distribution: Distribution, fan_in: usize, fan_out: usize) -> Self {
        Self {
            scheme,
            rule: ElusRule::Simplified,
            distribution,
            fan_in,
            fan_out,
            fan_mode: FanMode::FanOut,
            p0: 0.0,
            alpha: 1.0,
            scale: 1.0,
        }
    }

    pub fn with_rule(mut self, rule: ElusRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_p0(mut self, p0: f64) -> Self {
        self.p0 = p0;
        self
    }

    pub fn with_fan_mode(mut self, mode: FanMode) -> Self {
        self.fan_mode = mode;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p0) {
            return Err(Error::Invalid(format!(
                "p0 must lie in [0, 1), got {}",
                self.p0
            )));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Invalid(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.fan_in == 0 || self.fan_out == 0 {
            return Err(Error::Invalid("fans must be positive".into()));
        }
        if self.scale.is_nan() || self.scale <= 0.0 {
            return Err(Error::Invalid(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    fn fan(&self) -> f64 {
        match self.fan_mode {
            FanMode::FanIn => self.fan_in as f64,
            FanMode::FanOut => self.fan_out as f64,
        }
    }
}

/// `(fan_in, fan_out)` of a dense `[in, out]` or conv `[kh, kw, in, out]` weight shape.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [i, o] => (*i, *o),
        [kh, kw, i, o] => (kh * kw * i, kh * kw * o),
        _ => {
            let rf: usize = shape.iter().take(shape.len().saturating_sub(2)).product();
            let n = shape.len();
            (rf * shape[n - 2], rf * shape[n - 1])
        }
    }
}

fn elu_rule_variance(spec: &InitSpec, keep: f64) -> f64 {
    let a2 = spec.alpha * spec.alpha;
    match spec.rule {
        ElusRule::Simplified => 1.5 / (spec.fan() * keep),
        ElusRule::Forward => 1.0 / ((0.5 + ELU_FORWARD_K * a2) * spec.fan_in as f64 * keep),
        ElusRule::Backward => 1.0 / ((0.5 + ELU_BACKWARD_H * a2) * spec.fan_out as f64 * keep),
        ElusRule::ScaledHe => spec.scale * spec.scale * 2.0 / spec.fan(),
    }
}

/// Variance the scheme asks for.
pub fn target_variance(spec: &InitSpec) -> f64 {
    match spec.scheme {
        Scheme::He => spec.scale * spec.scale * 2.0 / spec.fan(),
        Scheme::Xavier => spec.scale * spec.scale * 2.0 / (spec.fan_in + spec.fan_out) as f64,
        Scheme::Elu => elu_rule_variance(spec, 1.0),
        Scheme::Elus => elu_rule_variance(spec, 1.0 - spec.p0),
    }
}

/// Entries `±sqrt(variance)`, each sign an independent fair coin.
pub fn signed_constant(shape: &[usize], variance: f64, rng: &mut SeededRng) -> Result<Tensor> {
    positive(variance)?;
    let mag = variance.sqrt();
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if rng.coin() {
            mag
        } else {
            -mag
        }
    }))
}

/// I.i.d. `Uniform(−a, a)` with `a = sqrt(3 · variance)`.
pub fn uniform_init(shape: &[usize], variance: f64, rng: &mut SeededRng) -> Result<Tensor> {
    positive(variance)?;
    let a = uniform_bound(variance);
    Ok(Tensor::from_fn(shape.to_vec(), |_| rng.symmetric(a)))
}

pub fn uniform_bound(variance: f64) -> f64 {
    (3.0 * variance).sqrt()
}

/// Signed-constant He draw with its standard deviation multiplied by `scale`.
pub fn elus_scaled_he(
    shape: &[usize],
    fan: usize,
    scale: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    signed_constant(shape, scale * scale * 2.0 / fan as f64, rng)
}

/// Draws a tensor according to `spec`.
pub fn draw(spec: &InitSpec, shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    spec.validate()?;
    let var = target_variance(spec);
    match spec.distribution {
        Distribution::SignedConstant => signed_constant(shape, var, rng),
        Distribution::Uniform => uniform_init(shape, var, rng),
    }
}

fn positive(variance: f64) -> Result<()> {
    if variance > 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "variance must be positive, got {variance}"
        )))
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(Scheme::He),
            "xavier" => Ok(Scheme::Xavier),
            "elu" => Ok(Scheme::Elu),
            "elus" => Ok(Scheme::Elus),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::He => "he",
            Scheme::Xavier => "xavier",
            Scheme::Elu => "elu",
            Scheme::Elus => "elus",
        })
    }
}

impl FromStr for ElusRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplified" => Ok(ElusRule::Simplified),
            "forward" => Ok(ElusRule::Forward),
            "backward" => Ok(ElusRule::Backward),
            "scaled_he" => Ok(ElusRule::ScaledHe),
            other => Err(Error::Config(format!("unknown init rule `{other}`"))),
        }
    }
}

impl fmt::Display for ElusRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElusRule::Simplified => "simplified",
            ElusRule::Forward => "forward",
            ElusRule::Backward => "backward",
            ElusRule::ScaledHe => "scaled_he",
        })
    }
}

impl FromStr for Distribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed_constant" => Ok(Distribution::SignedConstant),
            "uniform" => Ok(Distribution::Uniform),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::SignedConstant => "signed_constant",
            Distribution::Uniform => "uniform",
        })
    }
}

impl FromStr for FanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan_in" => Ok(FanMode::FanIn),
            "fan_out" => Ok(FanMode::FanOut),
            other => Err(Error::Config(format!("unknown fan mode `{other}`"))),
        }
    }
}

impl fmt::Display for FanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FanMode::FanIn => "fan_in",
            FanMode::FanOut => "fan_out",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_var(t: &Tensor) -> (f64, f64) {
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn elus_examples() {
        let s = InitSpec::new(Scheme::Elus, Distribution::SignedConstant, 784, 300).with_p0(0.5);
        assert!((target_variance(&s) - 0.01).abs() < 1e-15);
        let s0 = s.with_p0(0.0);
        let elu = InitSpec::new(Scheme::Elu, Distribution::SignedConstant, 784, 300);
        let (a, b) = (target_variance(&s0), target_variance(&elu));
        assert!((a - b).abs() / b <= 1e-12);
        assert!((b - 1.5 / 300.0).abs() < 1e-15);
        let he = InitSpec::new(Scheme::He, Distribution::Uniform, 50, 100);
        assert!((target_variance(&he) - 0.02).abs() < 1e-15);
        let xa = InitSpec::new(Scheme::Xavier, Distribution::Uniform, 50, 150);
        assert!((target_variance(&xa) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn exact_rules_reproduce_published_factors() {
        // At p0 = 0.5 the forward rule is 1.5505·2/n_in, the backward rule 1.49678·2/n_out.
        let f = InitSpec::new(Scheme::Elus, Distribution::SignedConstant, 400, 100)
            .with_rule(ElusRule::Forward)
            .with_p0(0.5);
        assert!((target_variance(&f) * 400.0 / 2.0 - 1.5505).abs() < 1e-4);
        let b = f.with_rule(ElusRule::Backward);
        assert!((target_variance(&b) * 100.0 / 2.0 - 1.49678).abs() < 1e-5);
    }

    #[test]
    fn fan_in_mode() {
        let s =
            InitSpec::new(Scheme::He, Distribution::Uniform, 50, 100).with_fan_mode(FanMode::FanIn);
        assert!((target_variance(&s) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs() {
        let s = InitSpec::new(Scheme::Elus, Distribution::Uniform, 3, 3).with_p0(1.0);
        assert!(s.validate().is_err());
        let mut r = SeededRng::new(0);
        assert!(signed_constant(&[2], 0.0, &mut r).is_err());
    }

    #[test]
    fn signed_constant_values_and_mean() {
        let mut r = SeededRng::new(42);
        let t = signed_constant(&[1000, 1000], 0.01, &mut r).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.1 || v == -0.1));
        let (mean, _) = sample_var(&t);
        assert!(mean.abs() <= 3.0 * (0.01f64 / 1e6).sqrt());
        let mut r2 = SeededRng::new(42);
        assert_eq!(signed_constant(&[1000, 1000], 0.01, &mut r2).unwrap(), t);
    }

    #[test]
    fn uniform_bound_and_variance() {
        assert!((uniform_bound(1.0 / 3.0) - 1.0).abs() < 1e-15);
        let mut r = SeededRng::new(5);
        let t = uniform_init(&[1_000_000], 0.02, &mut r).unwrap();
        let a = uniform_bound(0.02);
        assert!(t.data().iter().all(|&v| v > -a && v < a));
        let (_, var) = sample_var(&t);
        assert!((var - 0.02).abs() / 0.02 < 0.02);
    }

    #[test]
    fn scaled_he() {
        let mut r = SeededRng::new(8);
        let t = elus_scaled_he(&[10, 300], 300, 3f64.sqrt(), &mut r).unwrap();
        let m = (6.0f64 / 300.0).sqrt();
        assert!((m - 0.1414).abs() < 1e-4);
        assert!(t.data().iter().all(|&v| (v.abs() - m).abs() < 1e-15));
        let mut r1 = SeededRng::new(9);
        let mut r2 = SeededRng::new(9);
        assert_eq!(
            elus_scaled_he(&[4, 5], 5, 1.0, &mut r1).unwrap(),
            signed_constant(&[4, 5], 2.0 / 5.0, &mut r2).unwrap()
        );
    }

    #[test]
    fn scaled_he_matches_signed_constant_distributionally() {
        let mut r1 = SeededRng::new(100);
        let mut r2 = SeededRng::new(200);
        let a = elus_scaled_he(&[200_000], 300, 3f64.sqrt(), &mut r1).unwrap();
        let b = signed_constant(&[200_000], 3.0 * 2.0 / 300.0, &mut r2).unwrap();
        let (_, va) = sample_var(&a);
        let (_, vb) = sample_var(&b);
        assert!((va - vb).abs() / vb < 0.01);
    }

    #[test]
    fn every_scheme_hits_its_variance() {
        let mut r = SeededRng::new(77);
        for scheme in [Scheme::He, Scheme::Xavier, Scheme::Elu, Scheme::Elus] {
            for dist in [Distribution::SignedConstant, Distribution::Uniform] {
                let spec = InitSpec::new(scheme, dist, 120, 80).with_p0(0.3);
                let t = draw(&spec, &[100_000], &mut r).unwrap();
                let (_, var) = sample_var(&t);
                let target = target_variance(&spec);
                assert!((var - target).abs() / target < 0.03, "{scheme} {dist}");
            }
        }
    }

    #[test]
    fn conv_fans() {
        assert_eq!(fans(&[3, 3, 16, 32]), (144, 288));
        assert_eq!(fans(&[784, 300]), (784, 300));
    }

    /// Trapezoidal quadrature against the standard normal density on `[-12, 0]`.
    fn normal_expectation_below_zero(f: impl Fn(f64) -> f64) -> f64 {
        let n = 200_000;
        let (lo, hi) = (-12.0, 0.0);
        let h = (hi - lo) / n as f64;
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = 0.5 * (f(lo) * pdf(lo) + f(hi) * pdf(hi));
        for i in 1..n {
            let z = lo + i as f64 * h;
            s += f(z) * pdf(z);
        }
        s * h
    }

    #[test]
    fn elu_constants_match_quadrature() {
        let k = normal_expectation_below_zero(|z| (z.exp() - 1.0).powi(2));
        let h = normal_expectation_below_zero(|z| (2.0 * z).exp());
        assert!((k - ELU_FORWARD_K).abs() < 1e-6, "k = {k}");
        assert!((h - ELU_BACKWARD_H).abs() < 1e-6, "h = {h}");
    }
}
