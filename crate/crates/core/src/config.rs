//! Flat `key = value` run configuration, shipped presets, and the resolved-config digest.
//!
//! Sources are layered: preset, then config file, then `key=value` overrides.
//! Lines starting with `#` are comments. A file may name its base with
//! `preset = <name>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init::{Distribution, ElusRule, FanMode, Scheme};
use crate::layers::{Architecture, MaskInit, NetworkInit, ThresholdSpec, TrainMode};
use crate::optim::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `fcn`, `conv2`, `conv4`, `conv6`, `conv8`, or `custom`.
    pub arch: String,
    pub arch_input: Option<String>,
    pub arch_layers: Option<String>,
    pub net: NetworkInit,
    pub optim: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

const KEYS: &[&str] = &[
    "arch",
    "arch.input",
    "arch.layers",
    "batch_size",
    "data.dir",
    "data.test_limit",
    "data.train_limit",
    "dataset",
    "eval_batch_size",
    "init.alpha",
    "init.distribution",
    "init.fan_mode",
    "init.p0",
    "init.rule",
    "init.scale",
    "init.scheme",
    "mask.init",
    "mask.initial_pruning_rate",
    "mask.mode",
    "mask.tau",
    "mask.tau_n",
    "mask.tau_p",
    "mode",
    "optim.decay_rate",
    "optim.decay_step",
    "optim.epochs",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "seed",
];

/// Parses `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                return None;
            }
            Some(match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => {
                    Ok((k.trim().to_string(), v.trim().to_string()))
                }
                _ => Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    i + 1
                ))),
            })
        })
        .collect()
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not `key=value`"))),
    }
}

fn threshold_group(key: &str) -> Option<u8> {
    match key {
        "mask.tau" => Some(0),
        "mask.tau_n" | "mask.tau_p" => Some(1),
        "mask.initial_pruning_rate" => Some(2),
        _ => None,
    }
}

/// Merged key/value pairs before interpretation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Starts from a named preset.
    pub fn from_preset(name: &str) -> Result<Self> {
        let text = preset(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset `{name}` (available: {})",
                preset_names().join(", ")
            ))
        })?;
        let mut raw = Self::default();
        raw.apply(parse_pairs(&text)?)?;
        Ok(raw)
    }

    /// Layers one source on top. Setting one threshold form drops the
    /// others inherited from earlier sources; one source may use only one form.
    pub fn apply(&mut self, pairs: Vec<(String, String)>) -> Result<()> {
        let mut groups: Vec<u8> = pairs
            .iter()
            .filter_map(|(k, _)| threshold_group(k))
            .collect();
        groups.sort_unstable();
        groups.dedup();
        if groups.len() > 1 {
            return Err(Error::Config(
                "set exactly one of mask.tau, mask.tau_n/mask.tau_p, mask.initial_pruning_rate"
                    .into(),
            ));
        }
        if let Some(&g) = groups.first() {
            self.values
                .retain(|k, _| threshold_group(k).is_none_or(|h| h == g));
        }
        for (k, v) in pairs {
            if k == "preset" {
                return Err(Error::Config(
                    "`preset` must come first in a config file".into(),
                ));
            }
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            let k = if k == "mask.mode" {
                if v == "baseline" {
                    return Err(Error::Config(
                        "mask.mode is signed or binary; use mode = baseline".into(),
                    ));
                }
                "mode".to_string()
            } else {
                k
            };
            self.values.insert(k, v);
        }
        Ok(())
    }

    /// Layers a config file; a leading `preset = name` line replaces the current base.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = parse_pairs(text)?;
        if let Some(pos) = pairs.iter().position(|(k, _)| k == "preset") {
            let (_, name) = pairs.remove(pos);
            *self = Self::from_preset(&name)?;
        }
        self.apply(pairs)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        self.apply(vec![(key.to_string(), value.into())])
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        TrainConfig::from_raw(self)
    }
}

fn parse_num<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Option<T>> {
    raw.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
        })
        .transpose()
}

fn parse_with<T>(raw: &RawConfig, key: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    raw.get(key).map(f).transpose()
}

impl TrainConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let arch = raw.get("arch").unwrap_or("fcn").to_string();
        let mode = parse_with(raw, "mode", str::parse::<TrainMode>)?.unwrap_or(TrainMode::Signed);
        if mode == TrainMode::Baseline {
            if let Some(k) = raw.values.keys().find(|k| k.starts_with("mask.")) {
                return Err(Error::Config(format!(
                    "baseline mode does not take mask keys (found `{k}`)"
                )));
            }
        }
        let defaults = NetworkInit::default();
        let thresholds = if let Some(p) = parse_num::<f64>(raw, "mask.initial_pruning_rate")? {
            ThresholdSpec::InitialPruningRate(p)
        } else if let Some(t) = parse_num::<f64>(raw, "mask.tau")? {
            ThresholdSpec::Fixed {
                tau_n: -t,
                tau_p: t,
            }
        } else if raw.get("mask.tau_n").is_some() || raw.get("mask.tau_p").is_some() {
            match (
                parse_num::<f64>(raw, "mask.tau_n")?,
                parse_num::<f64>(raw, "mask.tau_p")?,
            ) {
                (Some(tau_n), Some(tau_p)) => ThresholdSpec::Fixed { tau_n, tau_p },
                _ => {
                    return Err(Error::Config(
                        "mask.tau_n and mask.tau_p must be set together".into(),
                    ))
                }
            }
        } else {
            defaults.thresholds
        };
        let net = NetworkInit {
            scheme: parse_with(raw, "init.scheme", str::parse::<Scheme>)?
                .unwrap_or(defaults.scheme),
            rule: parse_with(raw, "init.rule", str::parse::<ElusRule>)?.unwrap_or(defaults.rule),
            distribution: parse_with(raw, "init.distribution", str::parse::<Distribution>)?
                .unwrap_or(defaults.distribution),
            fan_mode: parse_with(raw, "init.fan_mode", str::parse::<FanMode>)?
                .unwrap_or(defaults.fan_mode),
            scale: parse_num(raw, "init.scale")?.unwrap_or(defaults.scale),
            p0: parse_num(raw, "init.p0")?,
            mask_init: parse_with(raw, "mask.init", str::parse::<MaskInit>)?
                .unwrap_or(defaults.mask_init),
            thresholds,
            mode,
            alpha: parse_num(raw, "init.alpha")?.unwrap_or(defaults.alpha),
        };
        let optim = SgdConfig {
            lr0: parse_num(raw, "optim.lr")?.unwrap_or(0.05),
            momentum: parse_num(raw, "optim.momentum")?.unwrap_or(0.9),
            weight_decay: parse_num(raw, "optim.weight_decay")?.unwrap_or(5e-4),
            decay_rate: parse_num(raw, "optim.decay_rate")?.unwrap_or(0.96),
            decay_step: parse_num(raw, "optim.decay_step")?.unwrap_or(10),
        };
        let default_dataset = if arch.starts_with("conv") {
            DatasetKind::Cifar10
        } else {
            DatasetKind::Mnist
        };
        let limit = |key: &str| -> Result<Option<usize>> {
            Ok(parse_num::<usize>(raw, key)?.filter(|&n| n > 0))
        };
        let cfg = Self {
            arch,
            arch_input: raw.get("arch.input").map(str::to_string),
            arch_layers: raw.get("arch.layers").map(str::to_string),
            net,
            optim,
            epochs: parse_num(raw, "optim.epochs")?.unwrap_or(100),
            batch_size: parse_num(raw, "batch_size")?.unwrap_or(64),
            eval_batch_size: parse_num(raw, "eval_batch_size")?.unwrap_or(1000),
            seed: parse_num(raw, "seed")?.unwrap_or(0),
            dataset: parse_with(raw, "dataset", DatasetKind::parse)?.unwrap_or(default_dataset),
            data_dir: raw.get("data.dir").map(PathBuf::from),
            train_limit: limit("data.train_limit")?,
            test_limit: limit("data.test_limit")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.architecture()?.weight_shapes()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.net.scale > 0.0 && self.net.alpha > 0.0) {
            return Err(Error::Config(
                "init.scale and init.alpha must be positive".into(),
            ));
        }
        if let Some(p) = self.net.p0 {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "init.p0 must lie in [0, 1), got {p}"
                )));
            }
        }
        match self.net.thresholds {
            ThresholdSpec::InitialPruningRate(p) if !(0.0..1.0).contains(&p) => Err(Error::Config(
                format!("mask.initial_pruning_rate must lie in [0, 1), got {p}"),
            )),
            ThresholdSpec::Fixed { tau_n, tau_p }
                if !(tau_n <= 0.0 && tau_p >= 0.0 && (tau_n < tau_p || tau_p == 0.0)) =>
            {
                Err(Error::Config(format!(
                    "thresholds need tau_n <= 0 <= tau_p, got {tau_n}, {tau_p}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        if self.arch == "custom" {
            match (&self.arch_input, &self.arch_layers) {
                (Some(i), Some(l)) => Architecture::custom(i, l),
                _ => Err(Error::Config(
                    "custom arch needs arch.input and arch.layers".into(),
                )),
            }
        } else {
            Architecture::named(&self.arch)
        }
    }

    /// Canonical `key = value` lines covering every setting, sorted by key.
    pub fn resolved_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("arch", self.arch.clone());
        if let Some(i) = &self.arch_input {
            kv.insert("arch.input", i.clone());
        }
        if let Some(l) = &self.arch_layers {
            kv.insert("arch.layers", l.clone());
        }
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("eval_batch_size", self.eval_batch_size.to_string());
        kv.insert("dataset", self.dataset.name().into());
        if let Some(d) = &self.data_dir {
            kv.insert("data.dir", d.display().to_string());
        }
        if let Some(n) = self.train_limit {
            kv.insert("data.train_limit", n.to_string());
        }
        if let Some(n) = self.test_limit {
            kv.insert("data.test_limit", n.to_string());
        }
        let n = &self.net;
        kv.insert("mode", n.mode.to_string());
        kv.insert("init.scheme", n.scheme.to_string());
        kv.insert("init.rule", n.rule.to_string());
        kv.insert("init.distribution", n.distribution.to_string());
        kv.insert("init.fan_mode", n.fan_mode.to_string());
        kv.insert("init.scale", n.scale.to_string());
        kv.insert("init.alpha", n.alpha.to_string());
        if let Some(p) = n.p0 {
            kv.insert("init.p0", p.to_string());
        }
        if n.mode != TrainMode::Baseline {
            kv.insert("mask.init", n.mask_init.to_string());
            match n.thresholds {
                ThresholdSpec::InitialPruningRate(p) => {
                    kv.insert("mask.initial_pruning_rate", p.to_string());
                }
                ThresholdSpec::Fixed { tau_n, tau_p } if tau_n == -tau_p => {
                    kv.insert("mask.tau", tau_p.to_string());
                }
                ThresholdSpec::Fixed { tau_n, tau_p } => {
                    kv.insert("mask.tau_n", tau_n.to_string());
                    kv.insert("mask.tau_p", tau_p.to_string());
                }
            }
        }
        let o = &self.optim;
        kv.insert("optim.lr", o.lr0.to_string());
        kv.insert("optim.momentum", o.momentum.to_string());
        kv.insert("optim.weight_decay", o.weight_decay.to_string());
        kv.insert("optim.decay_rate", o.decay_rate.to_string());
        kv.insert("optim.decay_step", o.decay_step.to_string());
        kv.insert("optim.epochs", self.epochs.to_string());
        kv.insert("seed", self.seed.to_string());
        let mut s = String::new();
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Hex SHA-256 of [`TrainConfig::resolved_text`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.resolved_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct Arch {
    name: &'static str,
    initial_pruning: &'static str,
    lr: &'static str,
    decay_step: &'static str,
    baseline_lr: &'static str,
    baseline_decay_step: &'static str,
    baseline_wd: &'static str,
}

const ARCHS: [Arch; 5] = [
    Arch {
        name: "fcn",
        initial_pruning: "0.063",
        lr: "0.05",
        decay_step: "10",
        baseline_lr: "0.008",
        baseline_decay_step: "10",
        baseline_wd: "7e-4",
    },
    Arch {
        name: "conv2",
        initial_pruning: "0.295",
        lr: "0.02",
        decay_step: "5",
        baseline_lr: "0.008",
        baseline_decay_step: "5",
        baseline_wd: "7e-4",
    },
    Arch {
        name: "conv4",
        initial_pruning: "0.193",
        lr: "0.05",
        decay_step: "10",
        baseline_lr: "0.008",
        baseline_decay_step: "10",
        baseline_wd: "7e-4",
    },
    Arch {
        name: "conv6",
        initial_pruning: "0.119",
        lr: "0.05",
        decay_step: "10",
        baseline_lr: "0.01",
        baseline_decay_step: "10",
        baseline_wd: "7e-4",
    },
    Arch {
        name: "conv8",
        initial_pruning: "0.129",
        lr: "0.05",
        decay_step: "10",
        baseline_lr: "0.002",
        baseline_decay_step: "10",
        baseline_wd: "3e-4",
    },
];

const SQRT3: &str = "1.7320508075688772";

fn signed_preset(a: &Arch, scheme: &str, lr: &str, wd: &str) -> String {
    let (rule, scale) = if scheme == "elus" {
        ("scaled_he", SQRT3)
    } else {
        ("simplified", "1")
    };
    format!(
        "arch = {}\nmode = signed\ninit.scheme = {scheme}\ninit.rule = {rule}\ninit.scale = {scale}\n\
         init.distribution = signed_constant\ninit.fan_mode = fan_out\nmask.init = xavier_uniform\n\
         mask.initial_pruning_rate = {}\noptim.lr = {lr}\noptim.momentum = 0.9\noptim.weight_decay = {wd}\n\
         optim.decay_rate = 0.96\noptim.decay_step = {}\noptim.epochs = 100\nbatch_size = 64\n",
        a.name, a.initial_pruning, a.decay_step
    )
}

fn baseline_preset(a: &Arch, scheme: &str) -> String {
    let (rule, scale) = if scheme == "elus" {
        ("scaled_he", SQRT3)
    } else {
        ("simplified", "1")
    };
    format!(
        "arch = {}\nmode = baseline\ninit.scheme = {scheme}\ninit.rule = {rule}\ninit.scale = {scale}\n\
         init.distribution = uniform\ninit.fan_mode = fan_out\noptim.lr = {}\noptim.momentum = 0.9\n\
         optim.weight_decay = {}\noptim.decay_rate = 0.96\noptim.decay_step = {}\noptim.epochs = 50\nbatch_size = 64\n",
        a.name, a.baseline_lr, a.baseline_wd, a.baseline_decay_step
    )
}

/// Names of all shipped presets.
pub fn preset_names() -> Vec<String> {
    let mut names = vec!["fcn-elus".to_string(), "fcn-he".into(), "fcn-xavier".into()];
    names.extend(["fcn-elus-binary", "fcn-he-uniform", "fcn-elus-elus-masks"].map(String::from));
    for a in &ARCHS[1..] {
        names.push(a.name.to_string());
    }
    for a in &ARCHS {
        names.push(format!("{}-baseline", a.name));
    }
    names.extend(["fcn-he-baseline", "fcn-xavier-baseline"].map(String::from));
    for s in ["sinn1", "sinn2"] {
        names.push(s.to_string());
        for a in &ARCHS {
            names.push(format!("{s}-{}", a.name));
        }
    }
    names
}

/// Text of a shipped preset.
pub fn preset(name: &str) -> Option<String> {
    let arch = |n: &str| ARCHS.iter().find(|a| a.name == n);
    let fcn = &ARCHS[0];
    Some(match name {
        "fcn-elus" => signed_preset(fcn, "elus", fcn.lr, "5e-4"),
        "fcn-he" => signed_preset(fcn, "he", fcn.lr, "5e-4"),
        "fcn-xavier" => signed_preset(fcn, "xavier", fcn.lr, "5e-4"),
        "fcn-elus-binary" => {
            signed_preset(fcn, "elus", fcn.lr, "5e-4").replace("mode = signed", "mode = binary")
        }
        "fcn-he-uniform" => {
            signed_preset(fcn, "he", fcn.lr, "5e-4").replace("signed_constant", "uniform")
        }
        "fcn-elus-elus-masks" => {
            signed_preset(fcn, "elus", fcn.lr, "5e-4").replace("xavier_uniform", "elus_uniform")
        }
        "fcn-he-baseline" => baseline_preset(fcn, "he"),
        "fcn-xavier-baseline" => baseline_preset(fcn, "xavier"),
        "sinn1" => signed_preset(arch("conv2")?, "elus", "0.01", "5e-4"),
        "sinn2" => signed_preset(arch("conv2")?, "elus", "0.008", "3e-4"),
        other => {
            if let Some(base) = other.strip_suffix("-baseline") {
                baseline_preset(arch(base)?, "elus")
            } else if let Some(base) = other.strip_prefix("sinn1-") {
                signed_preset(arch(base)?, "elus", "0.01", "5e-4")
            } else if let Some(base) = other.strip_prefix("sinn2-") {
                signed_preset(arch(base)?, "elus", "0.008", "3e-4")
            } else {
                let a = arch(other).filter(|a| a.name != "fcn")?;
                signed_preset(a, "elus", a.lr, "5e-4")
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves() {
        for name in preset_names() {
            let cfg = RawConfig::from_preset(&name)
                .and_then(|r| r.resolve())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(cfg.epochs > 0, "{name}");
        }
        assert!(RawConfig::from_preset("fcn").is_err());
    }

    #[test]
    fn fcn_elus_values() {
        let c = RawConfig::from_preset("fcn-elus")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.optim.lr0, 0.05);
        assert_eq!((c.optim.decay_rate, c.optim.decay_step), (0.96, 10));
        assert_eq!(c.optim.weight_decay, 5e-4);
        assert_eq!(c.optim.momentum, 0.9);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.net.thresholds, ThresholdSpec::InitialPruningRate(0.063));
        assert_eq!(c.net.scale, 3f64.sqrt());
        assert_eq!(c.dataset, DatasetKind::Mnist);

        let conv2 = RawConfig::from_preset("conv2").unwrap().resolve().unwrap();
        assert_eq!((conv2.optim.lr0, conv2.optim.decay_step), (0.02, 5));
        assert_eq!(conv2.dataset, DatasetKind::Cifar10);
        let base = RawConfig::from_preset("conv8-baseline")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(
            (base.optim.lr0, base.optim.weight_decay, base.epochs),
            (0.002, 3e-4, 50)
        );
        let s2 = RawConfig::from_preset("sinn2-conv4")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!((s2.optim.lr0, s2.optim.weight_decay), (0.008, 3e-4));
        assert_eq!(s2.net.thresholds, ThresholdSpec::InitialPruningRate(0.193));
    }

    #[test]
    fn threshold_forms_are_exclusive() {
        let mut r = RawConfig::from_preset("fcn-elus").unwrap();
        r.set("mask.tau", "0.01").unwrap();
        assert_eq!(r.get("mask.initial_pruning_rate"), None);
        let c = r.resolve().unwrap();
        assert_eq!(
            c.net.thresholds,
            ThresholdSpec::Fixed {
                tau_n: -0.01,
                tau_p: 0.01
            }
        );
        let both = parse_pairs("mask.tau = 0.01\nmask.initial_pruning_rate = 0.1").unwrap();
        assert!(RawConfig::default().apply(both).is_err());
    }

    #[test]
    fn baseline_rejects_mask_keys() {
        let mut r = RawConfig::from_preset("fcn-elus").unwrap();
        r.set("mode", "baseline").unwrap();
        assert!(r.resolve().is_err());
        let mut r = RawConfig::default();
        assert!(r.set("mask.mode", "baseline").is_err());
        r.set("mask.mode", "binary").unwrap();
        assert_eq!(r.resolve().unwrap().net.mode, TrainMode::Binary);
    }

    #[test]
    fn file_parsing_and_errors() {
        let mut r = RawConfig::default();
        r.apply_file_text("preset = fcn-elus\n# comment\noptim.epochs = 3  # trailing\n")
            .unwrap();
        assert_eq!(r.resolve().unwrap().epochs, 3);
        assert!(parse_pairs("novalue").is_err());
        assert!(RawConfig::default().set("optim.lrr", "1").is_err());
        let mut bad = RawConfig::default();
        bad.set("optim.lr", "fast").unwrap();
        assert!(bad.resolve().is_err());
        assert!(parse_override("seed=4").unwrap() == ("seed".into(), "4".into()));
    }

    #[test]
    fn resolved_text_round_trips_and_digest_is_stable() {
        let c = RawConfig::from_preset("fcn-he").unwrap().resolve().unwrap();
        let mut r = RawConfig::default();
        r.apply_file_text(&c.resolved_text()).unwrap();
        let again = r.resolve().unwrap();
        assert_eq!(again, c);
        assert_eq!(again.digest(), c.digest());
        assert_eq!(c.digest().len(), 64);
        let mut r2 = r.clone();
        r2.set("seed", "1").unwrap();
        assert_ne!(r2.resolve().unwrap().digest(), c.digest());
    }

    #[test]
    fn custom_architecture() {
        let mut r = RawConfig::default();
        r.apply(
            parse_pairs(
                "arch = custom\narch.input = 8x8x1\narch.layers = conv:4,pool,flatten,dense:10",
            )
            .unwrap(),
        )
        .unwrap();
        let c = r.resolve().unwrap();
        assert_eq!(
            c.architecture().unwrap().parameter_count().unwrap(),
            36 + 16 * 4 * 10
        );
        let mut r = RawConfig::default();
        r.set("arch", "custom").unwrap();
        assert!(r.resolve().is_err());
    }
}
