//! Mask diagnostics: cross-run equality, first-layer filter maps, per-epoch
//! summaries, run archives, and the variance-propagation experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::{self, InitSpec, ELU_FORWARD_K};
use crate::masking::MaskCounts;
use crate::rng::{SeededRng, Stream};
use crate::sparse;
use crate::tensor::{self, Tensor};

fn check_same_shapes(masks: &[Tensor]) -> Result<()> {
    if masks.len() < 2 {
        return Err(Error::Invalid(format!(
            "mask equality needs at least two masks, got {}",
            masks.len()
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.shape() != masks[0].shape()) {
        return Err(Error::shape(
            "mask equality",
            format!("{:?} vs {:?}", masks[0].shape(), m.shape()),
        ));
    }
    Ok(())
}

fn key(v: f64, absolute: bool) -> f64 {
    if absolute {
        v.abs()
    } else {
        v
    }
}

/// Mean over unordered pairs of the fraction of equal entries.
/// With `absolute`, entries are compared by `|m|`.
pub fn pairwise_mask_equality(masks: &[Tensor], absolute: bool) -> Result<f64> {
    check_same_shapes(masks)?;
    let n = masks[0].len() as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let eq = masks[i]
                .data()
                .iter()
                .zip(masks[j].data())
                .filter(|(a, b)| key(**a, absolute) == key(**b, absolute))
                .count();
            total += eq as f64 / n;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Fraction of entries on which all masks agree.
pub fn unanimous_mask_equality(masks: &[Tensor], absolute: bool) -> Result<f64> {
    check_same_shapes(masks)?;
    let n = masks[0].len();
    let same = (0..n)
        .filter(|&i| {
            let first = key(masks[0].data()[i], absolute);
            masks[1..]
                .iter()
                .all(|m| key(m.data()[i], absolute) == first)
        })
        .count();
    Ok(same as f64 / n as f64)
}

/// Nonzero mask entries attached to each input of a first layer `[inputs, units]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterMap {
    pub counts: Vec<usize>,
    pub fully_masked: usize,
}

pub fn first_layer_filter_map(mask: &Tensor) -> Result<FilterMap> {
    if mask.rank() != 2 {
        return Err(Error::shape(
            "first_layer_filter_map",
            format!("expected a 2-D mask, got {:?}", mask.shape()),
        ));
    }
    let (rows, cols) = (mask.shape()[0], mask.shape()[1]);
    let counts: Vec<usize> = (0..rows)
        .map(|r| {
            mask.data()[r * cols..(r + 1) * cols]
                .iter()
                .filter(|&&v| v != 0.0)
                .count()
        })
        .collect();
    let fully_masked = counts.iter().filter(|&&c| c == 0).count();
    Ok(FilterMap {
        counts,
        fully_masked,
    })
}

impl FilterMap {
    /// `input,nonzero` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("input,nonzero\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(s, "{i},{c}").unwrap();
        }
        s
    }

    /// Binary PGM (P5) with counts rescaled to 0-255.
    pub fn to_pgm(&self, width: usize, height: usize) -> Result<Vec<u8>> {
        if width * height != self.counts.len() {
            return Err(Error::shape(
                "to_pgm",
                format!("{width}x{height} image for {} inputs", self.counts.len()),
            ));
        }
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(
            self.counts
                .iter()
                .map(|&c| (c as f64 / max * 255.0).round() as u8),
        );
        Ok(out)
    }

    /// Mean count over the outer `band` inputs (first and last `band/2`) and
    /// over the `band` inputs centred on the middle index.
    pub fn border_and_central_means(&self, band: usize) -> (f64, f64) {
        let n = self.counts.len();
        let half = band / 2;
        let border: usize = self.counts[..half]
            .iter()
            .chain(&self.counts[n - half..])
            .sum();
        let start = n / 2 - half;
        let central: usize = self.counts[start..start + band].iter().sum();
        (
            border as f64 / (2 * half) as f64,
            central as f64 / band as f64,
        )
    }
}

/// `(1/2 + k)·n·Var[W̄]·Var[x]` for one masked linear layer after an ELU.
pub fn analytic_layer_variance(n: usize, var_w_eff: f64, var_input: f64, alpha: f64) -> f64 {
    (0.5 + ELU_FORWARD_K * alpha * alpha) * n as f64 * var_w_eff * var_input
}

/// Ternary mask from `Uniform(−a, a)` scores whose smallest-magnitude
/// `round(p0·n)` entries are zeroed.
fn quantile_mask(n: usize, p0: f64, rng: &mut SeededRng) -> Vec<f64> {
    let scores: Vec<f64> = (0..n).map(|_| rng.symmetric(1.0)).collect();
    let mut mags: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let k = ((p0 * n as f64).round() as usize).min(n);
    let tau = if k == n { f64::INFINITY } else { mags[k] };
    scores
        .iter()
        .map(|&s| {
            if s >= tau {
                1.0
            } else if s <= -tau {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Empirical `Var[z_l]` for `l = 1..=depth` over `trials` random stacks.
///
/// Every trial draws fresh `width × width` weights from `spec` (its fans are
/// set to `width`) and fresh masks zeroing exactly a fraction `p0`. The input
/// `x ~ N(0, 1)` enters like a pre-activation, so each layer computes
/// `z_l = (W̄_l)ᵀ elu(z_{l−1})` with `z_0 = x`. Variances pool all units of all trials.
pub fn variance_propagation(
    depth: usize,
    width: usize,
    p0: f64,
    spec: &InitSpec,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if depth < 1 || width < 1 || trials < 1 || !(0.0..1.0).contains(&p0) {
        return Err(Error::Invalid(format!(
            "variance_propagation: depth {depth}, width {width}, trials {trials}, p0 {p0}"
        )));
    }
    let spec = InitSpec {
        fan_in: width,
        fan_out: width,
        ..*spec
    };
    spec.validate()?;
    let root = rng.next_u64();
    let per_trial: Vec<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<(f64, f64)>> {
            let mut r = SeededRng::split(root, Stream::Analysis, t as u64);
            let mut z: Vec<f64> = (0..width).map(|_| r.normal()).collect();
            let mut sums = Vec::with_capacity(depth);
            for _ in 0..depth {
                let w = init::draw(&spec, &[width, width], &mut r)?;
                let m = quantile_mask(width * width, p0, &mut r);
                let o: Vec<f64> = z
                    .iter()
                    .map(|&v| tensor::elu_scalar(v, spec.alpha))
                    .collect();
                let mut next = vec![0.0; width];
                for (i, oi) in o.iter().enumerate() {
                    let row = &w.data()[i * width..(i + 1) * width];
                    let mrow = &m[i * width..(i + 1) * width];
                    for j in 0..width {
                        next[j] += row[j] * mrow[j] * oi;
                    }
                }
                z = next;
                sums.push((z.iter().sum(), z.iter().map(|v| v * v).sum()));
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let count = (trials * width) as f64;
    Ok((0..depth)
        .map(|l| {
            let (s, s2) = per_trial
                .iter()
                .fold((0.0, 0.0), |(a, b), t| (a + t[l].0, b + t[l].1));
            let mean = s / count;
            s2 / count - mean * mean
        })
        .collect())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 0 is the evaluation before any training; `e` follows `e` training epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub remaining_ratio: f64,
    /// Learning rate used during this epoch (0 for epoch 0).
    pub lr: f64,
    pub layer_counts: Vec<MaskCounts>,
}

/// Header of `metrics.csv`; one `_neg,_zero,_pos` triple follows per weighted layer.
pub fn metrics_header(layer_names: &[String]) -> String {
    let mut h = String::from("epoch,train_loss,test_loss,test_accuracy,remaining_ratio,lr");
    for n in layer_names {
        write!(h, ",{n}_neg,{n}_zero,{n}_pos").unwrap();
    }
    h
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    let mut r = format!(
        "{},{},{},{},{},{}",
        m.epoch, m.train_loss, m.test_loss, m.test_accuracy, m.remaining_ratio, m.lr
    );
    for c in &m.layer_counts {
        write!(r, ",{},{},{}", c.neg, c.zero, c.pos).unwrap();
    }
    r
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArchive {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub layer_names: Vec<String>,
    pub metrics: Vec<EpochMetrics>,
    /// Final ternary masks; conv masks are stored as `[kh·kw·c_in, c_out]`.
    pub masks: Vec<Tensor>,
}

/// Full `metrics.csv` contents.
pub fn epoch_summary(archive: &RunArchive) -> String {
    let mut s = metrics_header(&archive.layer_names);
    s.push('\n');
    for m in &archive.metrics {
        s.push_str(&metrics_row(m));
        s.push('\n');
    }
    s
}

impl RunArchive {
    pub fn validate(&self) -> Result<()> {
        if let Some((i, m)) = self.metrics.iter().enumerate().find(|(i, m)| m.epoch != *i) {
            return Err(Error::Invalid(format!(
                "metrics row {i} has epoch {}",
                m.epoch
            )));
        }
        if self.masks.len() != self.layer_names.len() {
            return Err(Error::Invalid("one mask per layer expected".into()));
        }
        Ok(())
    }

    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }

    /// Writes `metrics.csv`, `run.info`, and `masks/ternary.tcsr` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
        let write = |name: &str, s: String| {
            let p = dir.join(name);
            fs::write(&p, s).map_err(|e| Error::io(&p, e))
        };
        write("metrics.csv", epoch_summary(self))?;
        write(
            "run.info",
            format!(
                "run_id = {}\nseed = {}\nconfig_digest = {}\n",
                self.run_id, self.seed, self.config_digest
            ),
        )?;
        let layers = self
            .layer_names
            .iter()
            .zip(&self.masks)
            .map(|(n, m)| sparse::export(n, &Tensor::full(m.shape().to_vec(), 1.0), m))
            .collect::<Result<Vec<_>>>()?;
        sparse::write_tcsr(&masks_dir.join("ternary.tcsr"), &layers)
    }

    /// Reads an archive written by [`RunArchive::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let info = read("run.info")?;
        let field = |k: &str| {
            info.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(a, _)| a.trim() == k)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| Error::Config(format!("run.info lacks `{k}`")))
        };
        let run_id = field("run_id")?;
        let seed = field("seed")?
            .parse()
            .map_err(|_| Error::Config("run.info seed is not an integer".into()))?;
        let config_digest = field("config_digest")?;

        let layers = sparse::read_tcsr(&dir.join("masks").join("ternary.tcsr"))?;
        let layer_names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
        let masks = layers.iter().map(|l| l.reconstruct()).collect();

        let csv = read("metrics.csv")?;
        let metrics_path = dir.join("metrics.csv");
        let bad = |d: String| Error::Format {
            kind: "metrics",
            path: metrics_path.clone(),
            detail: d,
        };
        let mut lines = csv.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        if header != metrics_header(&layer_names) {
            return Err(bad("header does not match the archived layers".into()));
        }
        let metrics = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 + 3 * layer_names.len() {
                    return Err(bad(format!("row {i} has {} fields", f.len())));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {i}: `{s}`")));
                let int = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| bad(format!("row {i}: `{s}`")))
                };
                Ok(EpochMetrics {
                    epoch: int(f[0])?,
                    train_loss: num(f[1])?,
                    test_loss: num(f[2])?,
                    test_accuracy: num(f[3])?,
                    remaining_ratio: num(f[4])?,
                    lr: num(f[5])?,
                    layer_counts: f[6..]
                        .chunks(3)
                        .map(|c| {
                            Ok(MaskCounts {
                                neg: int(c[0])?,
                                zero: int(c[1])?,
                                pos: int(c[2])?,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let archive = Self {
            run_id,
            seed,
            config_digest,
            layer_names,
            metrics,
            masks,
        };
        archive.validate()?;
        Ok(archive)
    }
}

/// Mean and nearest-rank 5 % / 95 % quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Nearest-rank quantile: the `ceil(p·n)`-th smallest value (1-based, at least 1).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Invalid("cannot summarize zero runs".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q05: nearest_rank(&sorted, 0.05),
        q95: nearest_rank(&sorted, 0.95),
    })
}
