//! Training loop, evaluation, multi-seed campaigns, and run-directory output.
//!
//! A run directory holds `metrics.csv`, `summary.csv`, `config.resolved`,
//! `run.info`, `masks/effective.tcsr` (final `W ⊙ ḡ(M)`), and
//! `masks/ternary.tcsr` (final masks with unit magnitude).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{self, EpochMetrics, RunArchive, Summary};
use crate::config::{DatasetKind, RawConfig, TrainConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::layers::{build_network, Network, NetworkInit, TrainMode};
use crate::masking;
use crate::optim::SgdState;
use crate::sparse;
use crate::tensor::{self, Tensor};

/// Standardized train and test splits for `cfg`, truncated to its limits.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no data directory given (data.dir or --data-dir)".into()))?;
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => data::load_mnist_dir(dir)?,
        DatasetKind::Cifar10 => data::load_cifar10_dir(dir)?,
    };
    let cut = |d: Dataset, n: Option<usize>| match n {
        Some(n) => d.take(n),
        None => d,
    };
    Ok((cut(train, cfg.train_limit), cut(test, cfg.test_limit)))
}

/// `(accuracy, mean loss)` with argmax ties going to the lowest class index.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let n = ds.len();
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let mut start = 0;
    while start < n {
        let len = batch_size.min(n - start);
        let x = ds.images.slice_rows(start, len);
        let labels = &ds.labels[start..start + len];
        let logits = net.predict(&x)?;
        let (loss, _) = tensor::softmax_xent(&logits, labels)?;
        loss_sum += loss * len as f64;
        correct += tensor::argmax_rows(&logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        start += len;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

fn layer_counts(net: &Network) -> Result<Vec<masking::MaskCounts>> {
    net.masks().iter().map(masking::mask_distribution).collect()
}

fn metrics_for(
    net: &Network,
    epoch: usize,
    train_loss: f64,
    lr: f64,
    test: &Dataset,
    eval_batch: usize,
) -> Result<EpochMetrics> {
    let (test_accuracy, test_loss) = evaluate(net, test, eval_batch)?;
    Ok(EpochMetrics {
        epoch,
        train_loss,
        test_loss,
        test_accuracy,
        remaining_ratio: net.remaining_ratio(),
        lr,
        layer_counts: layer_counts(net)?,
    })
}

/// Masks as `[rows, c_out]` matrices, the layout stored in archives.
fn masks_2d(net: &Network) -> Result<Vec<Tensor>> {
    net.masks()
        .into_iter()
        .map(|m| {
            let cols = *m.shape().last().unwrap();
            let rows = m.len() / cols;
            m.reshape([rows, cols])
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub archive: RunArchive,
    pub network: Network,
}

/// Trains one network. Row 0 of the metrics is the evaluation before
/// training; row `e` follows `e` epochs. `on_epoch` sees every row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let arch = cfg.architecture()?;
    if train_set.sample_shape() != arch.input_shape.as_slice()
        || test_set.sample_shape() != arch.input_shape.as_slice()
    {
        return Err(Error::shape(
            "train",
            format!(
                "dataset samples {:?} vs architecture input {:?}",
                train_set.sample_shape(),
                arch.input_shape
            ),
        ));
    }
    let mut net = build_network(&arch, &cfg.net, cfg.seed)?;
    let frozen = net.weights_digest();
    let mut sgd = SgdState::new(cfg.optim, &net.param_shapes())?;

    let (_, initial_train_loss) = evaluate(&net, train_set, cfg.eval_batch_size)?;
    let mut metrics = vec![metrics_for(
        &net,
        0,
        initial_train_loss,
        0.0,
        test_set,
        cfg.eval_batch_size,
    )?];
    on_epoch(&metrics[0]);

    for epoch in 0..cfg.epochs {
        let lr = sgd.lr_at(epoch);
        let order = data::epoch_order(cfg.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(idx);
            let (logits, cache) = net.forward(&x)?;
            let (loss, dlogits) = tensor::softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            let grads = net.backward(&cache, &dlogits)?;
            let refs: Vec<&Tensor> = grads.iter().map(|g| &g.param).collect();
            sgd.step(net.params_mut(), &refs, lr)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let row = metrics_for(
            &net,
            epoch + 1,
            train_loss,
            lr,
            test_set,
            cfg.eval_batch_size,
        )?;
        on_epoch(&row);
        metrics.push(row);
    }

    if cfg.net.mode != TrainMode::Baseline && net.weights_digest() != frozen {
        return Err(Error::WeightsMutated(net.layer_names().join(",")));
    }
    let archive = RunArchive {
        run_id: format!("seed-{}", cfg.seed),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        layer_names: net.layer_names(),
        metrics,
        masks: masks_2d(&net)?,
    };
    Ok(TrainOutcome {
        archive,
        network: net,
    })
}

/// Header and rows of `summary.csv`: one row per run, then mean and quantiles.
pub fn summary_csv(runs: &[RunArchive]) -> Result<String> {
    let finals: Vec<&EpochMetrics> = runs
        .iter()
        .map(|r| {
            r.final_metrics()
                .ok_or_else(|| Error::Invalid(format!("run {} has no metrics", r.run_id)))
        })
        .collect::<Result<_>>()?;
    let acc: Vec<f64> = finals.iter().map(|m| m.test_accuracy).collect();
    let rem: Vec<f64> = finals.iter().map(|m| m.remaining_ratio).collect();
    let (sa, sr) = (analysis::summarize(&acc)?, analysis::summarize(&rem)?);
    let mut s = String::from("row,seed,test_accuracy,remaining_ratio\n");
    for (r, m) in runs.iter().zip(&finals) {
        writeln!(
            s,
            "{},{},{},{}",
            r.run_id, r.seed, m.test_accuracy, m.remaining_ratio
        )
        .unwrap();
    }
    for (label, a, b) in [
        ("mean", sa.mean, sr.mean),
        ("q05", sa.q05, sr.q05),
        ("q95", sa.q95, sr.q95),
    ] {
        writeln!(s, "{label},,{a},{b}").unwrap();
    }
    Ok(s)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.archive.save(dir)?;
    write_file(
        &dir.join("config.resolved"),
        format!("{}# digest = {}\n", cfg.resolved_text(), cfg.digest()),
    )?;
    write_file(
        &dir.join("summary.csv"),
        summary_csv(std::slice::from_ref(&outcome.archive))?,
    )?;
    sparse::write_tcsr(
        &dir.join("masks").join("effective.tcsr"),
        &sparse::export_network(&outcome.network)?,
    )
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub runs: Vec<RunArchive>,
    pub accuracy: Summary,
    pub remaining: Summary,
}

/// Trains one run per seed. With `out`, each run lands in `out/seed-<s>` as
/// soon as it finishes and `out/summary.csv` is rewritten after every run.
pub fn campaign(
    cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    test_set: &Dataset,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(u64, &EpochMetrics),
) -> Result<CampaignResult> {
    if seeds.is_empty() {
        return Err(Error::Invalid("campaign needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let outcome = train(&run_cfg, train_set, test_set, &mut |m| on_epoch(seed, m))?;
        if let Some(out) = out {
            write_run(&out.join(format!("seed-{seed}")), &run_cfg, &outcome)?;
        }
        runs.push(outcome.archive);
        if let Some(out) = out {
            write_file(&out.join("summary.csv"), summary_csv(&runs)?)?;
        }
    }
    let finals = |f: fn(&EpochMetrics) -> f64| -> Vec<f64> {
        runs.iter().map(|r| f(r.final_metrics().unwrap())).collect()
    };
    let accuracy = analysis::summarize(&finals(|m| m.test_accuracy))?;
    let remaining = analysis::summarize(&finals(|m| m.remaining_ratio))?;
    Ok(CampaignResult {
        runs,
        accuracy,
        remaining,
    })
}

/// Reads `config.resolved` from a run directory.
pub fn load_run_config(run_dir: &Path) -> Result<TrainConfig> {
    let path = run_dir.join("config.resolved");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut raw = RawConfig::default();
    raw.apply_file_text(&text)?;
    raw.resolve()
}

/// Unmasked network of `cfg`'s architecture carrying the given 2-D layers as weights.
pub fn network_from_layers(cfg: &TrainConfig, layers: &[sparse::TernaryCSR]) -> Result<Network> {
    let init = NetworkInit {
        mode: TrainMode::Baseline,
        ..cfg.net.clone()
    };
    let mut net = build_network(&cfg.architecture()?, &init, cfg.seed)?;
    let weights = net
        .weight_shapes()
        .iter()
        .zip(layers)
        .map(|(shape, l)| l.reconstruct().reshape(shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    net.set_weights(weights)?;
    Ok(net)
}

/// Recomputes `W ⊙ ḡ(M)` for a run: weights are regenerated from the run's
/// config and seed, masks come from `masks/ternary.tcsr`.
pub fn export_effective(run_dir: &Path) -> Result<Vec<sparse::TernaryCSR>> {
    let cfg = load_run_config(run_dir)?;
    let net = build_network(&cfg.architecture()?, &cfg.net, cfg.seed)?;
    let masks = sparse::read_tcsr(&run_dir.join("masks").join("ternary.tcsr"))?;
    if masks.len() != net.weights().len() {
        return Err(Error::Invalid(format!(
            "{} masks for {} weighted layers",
            masks.len(),
            net.weights().len()
        )));
    }
    net.layer_names()
        .iter()
        .zip(net.weights())
        .zip(&masks)
        .map(|((name, w), m)| {
            sparse::export(name, w, &m.reconstruct().reshape(w.shape().to_vec())?)
        })
        .collect()
}

/// Every `seed-*` run directory below `dir`, or `dir` itself if it is a run.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("run.info").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run.info").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
