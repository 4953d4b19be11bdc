use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use supermask_core::analysis::{self, metrics_header, metrics_row};
use supermask_core::config::{parse_override, preset_names};
use supermask_core::init::{ElusRule, InitSpec, Scheme};
use supermask_core::{
    gradcheck, masking, sparse, train, Distribution, RawConfig, RunArchive, SeededRng, TrainConfig,
};

/// Largest relative finite-difference error accepted by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(
    name = "supermask",
    version,
    about = "Train and analyze signed Supermask networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write its run directory.
    Train(TrainArgs),
    /// Train one network per seed and summarize the final metrics.
    Campaign(CampaignArgs),
    /// Evaluate the final effective network of a run on the test split.
    Eval(EvalArgs),
    /// Write the final effective weights of a run as a ternary CSR file.
    ExportSparse(ExportArgs),
    /// Mask statistics over one or more finished runs.
    Analyze(AnalyzeArgs),
    /// Measure pre-activation variance through random masked stacks.
    CheckVariance(VarianceArgs),
    /// Compare backprop against finite differences on tiny random networks.
    Gradcheck(GradcheckArgs),
    /// List the shipped presets, or print one.
    Presets { name: Option<String> },
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset, applied before the config file.
    #[arg(long, default_value = "fcn-elus")]
    preset: String,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting, applied last. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Print no per-epoch progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CampaignArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds or an inclusive range `a..b`.
    #[arg(long, default_value = "0..4")]
    seeds: String,
    /// Parent directory; each run goes to `seed-<s>`.
    #[arg(long, default_value = "runs/campaign")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train` or `campaign`.
    run: PathBuf,
    /// Overrides the data directory recorded in the run.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    run: PathBuf,
    /// Output file, `<run>/masks/effective.tcsr` by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Equality,
    Distribution,
    FilterMap,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: Analysis,
    /// A run directory or a campaign directory of `seed-*` runs.
    runs: PathBuf,
    /// Directory for filter-map CSV and PGM files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image width and height for the filter-map PGM, e.g. `28x28`.
    #[arg(long, default_value = "28x28")]
    image: String,
}

#[derive(Args)]
struct VarianceArgs {
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 0.5)]
    p0: f64,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random networks per family.
    #[arg(long, default_value_t = 10)]
    cases: usize,
}

fn resolve_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut raw = RawConfig::from_preset(&args.preset)?;
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        raw.apply_file_text(&text)
            .with_context(|| format!("in config file {}", path.display()))?;
    }
    for o in &args.overrides {
        let (k, v) = parse_override(o)?;
        raw.set(&k, v)?;
    }
    if let Some(seed) = seed {
        raw.set("seed", seed.to_string())?;
    }
    if let Some(dir) = &args.data_dir {
        raw.set("data.dir", dir.display().to_string())?;
    }
    Ok(raw.resolve()?)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        ensure!(a <= b, "empty seed range `{s}`");
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse::<u64>()
                    .with_context(|| format!("bad seed `{x}`"))
            })
            .collect::<Result<_>>()?
    };
    ensure!(!seeds.is_empty(), "no seeds given");
    Ok(seeds)
}

fn progress(quiet: bool, layer_names: &[String]) -> impl FnMut(&analysis::EpochMetrics) + '_ {
    let mut header = !quiet;
    move |m| {
        if quiet {
            return;
        }
        if header {
            eprintln!("{}", metrics_header(layer_names));
            header = false;
        }
        eprintln!("{}", metrics_row(m));
    }
}

fn layer_names(cfg: &TrainConfig) -> Result<Vec<String>> {
    let net = supermask_core::build_network(&cfg.architecture()?, &cfg.net, cfg.seed)?;
    Ok(net.layer_names())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, a.seed)?;
    let (train_set, test_set) = train::load_datasets(&cfg)?;
    let names = layer_names(&cfg)?;
    let mut on_epoch = progress(a.quiet, &names);
    let outcome = train::train(&cfg, &train_set, &test_set, &mut on_epoch)?;
    train::write_run(&a.out, &cfg, &outcome)?;
    let last = outcome
        .archive
        .final_metrics()
        .expect("row 0 always exists");
    println!(
        "seed {}: test_accuracy {:.4}, remaining_ratio {:.4} -> {}",
        cfg.seed,
        last.test_accuracy,
        last.remaining_ratio,
        a.out.display()
    );
    Ok(())
}

fn cmd_campaign(a: CampaignArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, None)?;
    let seeds = parse_seeds(&a.seeds)?;
    let (train_set, test_set) = train::load_datasets(&cfg)?;
    let names = layer_names(&cfg)?;
    let mut print = progress(a.quiet, &names);
    let mut on_epoch = |seed: u64, m: &analysis::EpochMetrics| {
        if m.epoch == 0 && !a.quiet {
            eprintln!("# seed {seed}");
        }
        print(m);
    };
    let result = train::campaign(
        &cfg,
        &seeds,
        &train_set,
        &test_set,
        Some(&a.out),
        &mut on_epoch,
    )?;
    println!("{} runs -> {}", result.runs.len(), a.out.display());
    println!(
        "test_accuracy   mean {:.4}  q05 {:.4}  q95 {:.4}",
        result.accuracy.mean, result.accuracy.q05, result.accuracy.q95
    );
    println!(
        "remaining_ratio mean {:.4}  q05 {:.4}  q95 {:.4}",
        result.remaining.mean, result.remaining.q05, result.remaining.q95
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = train::load_run_config(&a.run)?;
    if let Some(dir) = a.data_dir {
        cfg.data_dir = Some(dir);
    }
    let layers = train::export_effective(&a.run)?;
    let net = train::network_from_layers(&cfg, &layers)?;
    let (_, test_set) = train::load_datasets(&cfg)?;
    let (acc, loss) = train::evaluate(&net, &test_set, cfg.eval_batch_size)?;
    println!("test_accuracy {acc}");
    println!("test_loss {loss}");
    println!("remaining_ratio {}", remaining(&layers));
    Ok(())
}

fn remaining(layers: &[sparse::TernaryCSR]) -> f64 {
    let nnz: usize = layers.iter().map(|l| l.nnz()).sum();
    let total: usize = layers.iter().map(|l| l.rows * l.cols).sum();
    nnz as f64 / total as f64
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let layers = train::export_effective(&a.run)?;
    let out = a
        .out
        .unwrap_or_else(|| a.run.join("masks").join("effective.tcsr"));
    sparse::write_tcsr(&out, &layers)?;
    println!("layer,rows,cols,nnz,csr_bytes,dense_bytes");
    for l in &layers {
        let (dense, csr) = l.byte_sizes();
        println!("{},{},{},{},{csr},{dense}", l.name, l.rows, l.cols, l.nnz());
    }
    println!("remaining_ratio {}", remaining(&layers));
    println!("compression_rate {}", sparse::compression_rate(&layers));
    println!("wrote {}", out.display());
    Ok(())
}

fn load_runs(dir: &Path) -> Result<Vec<RunArchive>> {
    let dirs = train::run_dirs(dir)?;
    ensure!(!dirs.is_empty(), "no runs found in {}", dir.display());
    dirs.iter()
        .map(|d| RunArchive::load(d).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn parse_image(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once('x')
        .with_context(|| format!("expected WxH, got `{s}`"))?;
    Ok((w.parse()?, h.parse()?))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    match a.kind {
        Analysis::Equality => {
            ensure!(
                runs.len() >= 2,
                "equality needs at least two runs, found {}",
                runs.len()
            );
            println!("layer,pairwise_signed,pairwise_absolute,unanimous_signed,unanimous_absolute");
            for (i, name) in runs[0].layer_names.iter().enumerate() {
                let masks: Vec<_> = runs.iter().map(|r| r.masks[i].clone()).collect();
                println!(
                    "{name},{},{},{},{}",
                    analysis::pairwise_mask_equality(&masks, false)?,
                    analysis::pairwise_mask_equality(&masks, true)?,
                    analysis::unanimous_mask_equality(&masks, false)?,
                    analysis::unanimous_mask_equality(&masks, true)?,
                );
            }
        }
        Analysis::Distribution => {
            println!("run,layer,neg,zero,pos,remaining_ratio");
            for r in &runs {
                for (name, m) in r.layer_names.iter().zip(&r.masks) {
                    let c = masking::mask_distribution(m)?;
                    println!(
                        "{},{name},{},{},{},{}",
                        r.run_id,
                        c.neg,
                        c.zero,
                        c.pos,
                        c.nonzero() as f64 / c.total() as f64
                    );
                }
            }
        }
        Analysis::FilterMap => {
            let (w, h) = parse_image(&a.image)?;
            println!("run,inputs,fully_masked");
            for r in &runs {
                let mask = r.masks.first().context("run has no layers")?;
                let fm = analysis::first_layer_filter_map(mask)?;
                println!("{},{},{}", r.run_id, fm.counts.len(), fm.fully_masked);
                if let Some(out) = &a.out {
                    fs::create_dir_all(out)?;
                    fs::write(
                        out.join(format!("{}-filter-map.csv", r.run_id)),
                        fm.to_csv(),
                    )?;
                    if w * h == fm.counts.len() {
                        fs::write(
                            out.join(format!("{}-filter-map.pgm", r.run_id)),
                            fm.to_pgm(w, h)?,
                        )?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn cmd_variance(a: VarianceArgs) -> Result<()> {
    let elus = InitSpec::new(Scheme::Elus, Distribution::SignedConstant, a.width, a.width)
        .with_rule(ElusRule::Forward)
        .with_p0(a.p0);
    let xavier = InitSpec::new(
        Scheme::Xavier,
        Distribution::SignedConstant,
        a.width,
        a.width,
    );
    let mut rng = SeededRng::new(a.seed);
    let ve = analysis::variance_propagation(a.depth, a.width, a.p0, &elus, a.trials, &mut rng)?;
    let vx = analysis::variance_propagation(a.depth, a.width, a.p0, &xavier, a.trials, &mut rng)?;
    println!("layer,elus_forward,xavier");
    for (l, (e, x)) in ve.iter().zip(&vx).enumerate() {
        println!("{},{e},{x}", l + 1);
    }
    let last = a.depth - 1;
    println!("ratio,{},{}", ve[last] / ve[0], vx[last] / vx[0]);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let reports = gradcheck::run_suite(a.seed, a.cases)?;
    println!("case,max_rel_error,ste_exact,entries");
    let mut ok = true;
    for r in &reports {
        println!(
            "{},{:e},{},{}",
            r.name, r.max_rel_error, r.ste_exact, r.checked_entries
        );
        ok &= r.max_rel_error <= GRADCHECK_TOL && r.ste_exact;
    }
    println!("{}", if ok { "all cases pass" } else { "FAILED" });
    Ok(ok)
}

fn cmd_presets(name: Option<String>) -> Result<()> {
    match name {
        None => preset_names().iter().for_each(|n| println!("{n}")),
        Some(n) => {
            let Some(text) = supermask_core::config::preset(&n) else {
                bail!("unknown preset `{n}`");
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    let ok = match Cli::parse().command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Campaign(a) => cmd_campaign(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::ExportSparse(a) => cmd_export(a).map(|_| true),
        Command::Analyze(a) => cmd_analyze(a).map(|_| true),
        Command::CheckVariance(a) => cmd_variance(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Presets { name } => cmd_presets(name).map(|_| true),
    }?;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
