use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use supermask_core::data::{write_idx_images, write_idx_labels};
use supermask_core::SeededRng;

const GOLDEN_FCN_HEADER: &str = "epoch,train_loss,test_loss,test_accuracy,remaining_ratio,lr,\
dense0_neg,dense0_zero,dense0_pos,dense1_neg,dense1_zero,dense1_pos,dense2_neg,dense2_zero,dense2_pos";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_supermask"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn supermask");
    assert!(
        out.status.success(),
        "supermask {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Random 28x28 digits whose label is carried by the brightness of one row.
fn synthetic_mnist(dir: &Path, n_train: usize, n_test: usize) {
    let mut rng = SeededRng::new(99);
    let mut split = |n: usize, img: &str, lab: &str| {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            for p in 0..784 {
                let bright = p / 28 == 2 * label as usize + 4;
                let v = if bright { 200.0 } else { 40.0 } + 30.0 * rng.symmetric(1.0);
                pixels.push(v as u8);
            }
            labels.push(label);
        }
        write_idx_images(&dir.join(img), 28, 28, &pixels).unwrap();
        write_idx_labels(&dir.join(lab), &labels).unwrap();
    };
    split(
        n_train,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
    );
    split(n_test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir_all(&data).unwrap();
    synthetic_mnist(&data, 120, 40);
    let root = tmp.path().to_path_buf();
    Fixture {
        _tmp: tmp,
        data,
        root,
    }
}

fn train_args<'a>(data: &'a str, out: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--preset",
        "fcn-elus",
        "--data-dir",
        data,
        "--seed",
        seed,
        "--override",
        "optim.epochs=2",
        "--override",
        "batch_size=32",
        "--out",
        out,
        "--quiet",
    ]
}

#[test]
fn train_writes_run_directory_with_golden_header() {
    let f = fixture();
    let out = f.root.join("run");
    run(&train_args(
        f.data.to_str().unwrap(),
        out.to_str().unwrap(),
        "3",
    ));
    for file in [
        "metrics.csv",
        "summary.csv",
        "config.resolved",
        "run.info",
        "masks/effective.tcsr",
        "masks/ternary.tcsr",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], GOLDEN_FCN_HEADER);
    assert_eq!(lines.len(), 1 + 3);
    for (e, row) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 15);
        assert_eq!(cols[0], e.to_string());
        let acc: f64 = cols[3].parse().unwrap();
        let rem: f64 = cols[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&rem));
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("row,seed,test_accuracy,remaining_ratio\nseed-3,3,"));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 3"));
    assert!(resolved.contains("# digest = "));
}

#[test]
fn campaign_and_train_share_metrics_schema() {
    let f = fixture();
    let data = f.data.to_str().unwrap();
    let single = f.root.join("single");
    run(&train_args(data, single.to_str().unwrap(), "1"));
    let camp = f.root.join("camp");
    let o = run(&[
        "campaign",
        "--data-dir",
        data,
        "--seeds",
        "1,2",
        "--override",
        "optim.epochs=2",
        "--override",
        "batch_size=32",
        "--out",
        camp.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(stdout(&o).contains("2 runs"));
    let a = fs::read_to_string(single.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(camp.join("seed-1").join("metrics.csv")).unwrap();
    assert_eq!(a.lines().next(), Some(GOLDEN_FCN_HEADER));
    assert_eq!(
        a, b,
        "campaign run must match the standalone run with the same seed"
    );
    let summary = fs::read_to_string(camp.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary
        .lines()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, ["row", "seed-1", "seed-2", "mean", "q05", "q95"]);
}

#[test]
fn reruns_are_byte_identical() {
    let f = fixture();
    let data = f.data.to_str().unwrap();
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    run(&train_args(data, a.to_str().unwrap(), "7"));
    run(&train_args(data, b.to_str().unwrap(), "7"));
    for file in [
        "metrics.csv",
        "masks/effective.tcsr",
        "masks/ternary.tcsr",
        "config.resolved",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn export_eval_and_analyze_read_finished_runs() {
    let f = fixture();
    let data = f.data.to_str().unwrap();
    let camp = f.root.join("camp");
    run(&[
        "campaign",
        "--data-dir",
        data,
        "--seeds",
        "4..5",
        "--override",
        "optim.epochs=1",
        "--out",
        camp.to_str().unwrap(),
        "--quiet",
    ]);
    let run4 = camp.join("seed-4");

    let exported = f.root.join("x.tcsr");
    let o = run(&[
        "export-sparse",
        run4.to_str().unwrap(),
        "--out",
        exported.to_str().unwrap(),
    ]);
    assert!(stdout(&o).contains("compression_rate"));
    assert_eq!(
        fs::read(&exported).unwrap(),
        fs::read(run4.join("masks/effective.tcsr")).unwrap()
    );

    let o = run(&["eval", run4.to_str().unwrap()]);
    let text = stdout(&o);
    let acc_line = text
        .lines()
        .find(|l| l.starts_with("test_accuracy "))
        .unwrap();
    let metrics = fs::read_to_string(run4.join("metrics.csv")).unwrap();
    let last: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    assert_eq!(acc_line, format!("test_accuracy {}", last[3]));

    let o = run(&["analyze", "equality", camp.to_str().unwrap()]);
    let eq = stdout(&o);
    assert!(eq.starts_with(
        "layer,pairwise_signed,pairwise_absolute,unanimous_signed,unanimous_absolute\n"
    ));
    assert_eq!(eq.lines().count(), 4);

    let o = run(&["analyze", "distribution", run4.to_str().unwrap()]);
    assert_eq!(stdout(&o).lines().count(), 4);

    let maps = f.root.join("maps");
    run(&[
        "analyze",
        "filter-map",
        camp.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]);
    let pgm = fs::read(maps.join("seed-4-filter-map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(pgm.len(), b"P5\n28 28\n255\n".len() + 784);
}

#[test]
fn config_file_and_overrides_layer_in_order() {
    let f = fixture();
    let cfg = f.root.join("exp.cfg");
    fs::write(&cfg, "preset = fcn-he\noptim.epochs = 5\nmask.tau = 0.02\n").unwrap();
    let out = f.root.join("run");
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "optim.epochs=0",
        "--data-dir",
        f.data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("optim.epochs = 0"));
    assert!(resolved.contains("init.rule = scaled_he") || resolved.contains("init.scheme = he"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn invalid_configs_fail_with_messages() {
    let f = fixture();
    let data = f.data.to_str().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (
            &["train", "--data-dir", data, "--override", "optim.bogus=1"],
            "unknown key",
        ),
        (
            &["train", "--preset", "nope", "--data-dir", data],
            "unknown preset",
        ),
        (
            &[
                "train",
                "--preset",
                "fcn-baseline",
                "--data-dir",
                data,
                "--override",
                "mask.tau=0.1",
            ],
            "mask",
        ),
        (&["train", "--data-dir", "/definitely/missing"], "missing"),
        (&["campaign", "--data-dir", data, "--seeds", "5..1"], "seed"),
    ];
    for (args, needle) in cases {
        let o = bin().args(*args).output().unwrap();
        assert!(!o.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&o.stderr).to_lowercase();
        assert!(err.contains(needle), "{args:?}: `{err}` lacks `{needle}`");
    }
}

#[test]
fn gradcheck_and_variance_subcommands_report() {
    let o = run(&["gradcheck", "--cases", "2"]);
    assert!(stdout(&o).trim_end().ends_with("all cases pass"));
    let o = run(&[
        "check-variance",
        "--depth",
        "3",
        "--width",
        "32",
        "--trials",
        "10",
    ]);
    let text = stdout(&o);
    assert!(text.starts_with("layer,elus_forward,xavier\n"));
    assert!(text.lines().last().unwrap().starts_with("ratio,"));
}

#[test]
fn presets_are_listed_and_printable() {
    let names = stdout(&run(&["presets"]));
    for p in [
        "fcn-elus",
        "fcn-he",
        "fcn-xavier",
        "conv2",
        "conv4",
        "conv6",
        "conv8",
        "sinn1",
        "sinn2",
        "fcn-baseline",
    ] {
        assert!(names.lines().any(|l| l == p), "missing preset {p}");
    }
    let text = stdout(&run(&["presets", "fcn-elus"]));
    assert!(text.contains("optim.lr"));
}
