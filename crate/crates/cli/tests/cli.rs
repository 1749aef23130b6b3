use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ldamp::denoise::{load_model, CnnArch, DenoiserModel, DenoiserSpec};
use ldamp::eval::synth::synthetic_image;
use ldamp::eval::write_pgm;
use tempfile::TempDir;

fn ldamp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldamp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ldamp(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Temp directory with `imgs/img.pgm` (80x80), `small.pgm` (32x32) and
/// `other.pgm` (24x24).
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("imgs")).unwrap();
    write_pgm(dir.path().join("imgs/img.pgm"), &synthetic_image(80, 80, 1)).unwrap();
    write_pgm(dir.path().join("small.pgm"), &synthetic_image(32, 32, 2)).unwrap();
    write_pgm(dir.path().join("other.pgm"), &synthetic_image(24, 24, 3)).unwrap();
    dir
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

const TINY: &[&str] = &["--depth", "4", "--width", "4", "--batch-size", "2"];

fn dataset(dir: &Path) {
    ok(dir, &["dataset", "--images", "imgs", "--out-dir", "ds"]);
}

#[test]
fn dataset_on_single_80px_image_has_four_patches() {
    let dir = fixture();
    let stdout = ok(
        dir.path(),
        &[
            "dataset",
            "--images",
            "imgs",
            "--patch-size",
            "40",
            "--stride",
            "40",
            "--out-dir",
            "ds",
        ],
    );
    assert!(stdout.starts_with("4 patches"), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ds/dataset.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["count"], 4);
    assert_eq!(
        fs::metadata(dir.path().join("ds/patches.bin"))
            .unwrap()
            .len(),
        4 * 40 * 40 * 4
    );
    assert!(dir.path().join("ds/dataset.config.json").is_file());
}

#[test]
fn missing_images_is_a_usage_error() {
    let dir = fixture();
    let out = ldamp(dir.path(), &["dataset", "--out-dir", "ds"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!dir.path().join("ds").exists());
}

#[test]
fn unitary_identity_recovery_is_exact() {
    let dir = fixture();
    let args = [
        "recover",
        "--input",
        "small.pgm",
        "--truth",
        "small.pgm",
        "--method",
        "damp",
        "--denoiser",
        "identity",
    ];
    let stdout = ok(
        dir.path(),
        &[&args[..], &["--rate", "1.0", "--op", "cdp", "--iters", "1"]].concat(),
    );
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["psnr_db"], "inf");
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/recover.json")).unwrap())
            .unwrap();
    assert_eq!(written, summary);
}

#[test]
fn trace_has_one_row_per_iteration_and_psnr_needs_truth() {
    let dir = fixture();
    let stdout = ok(
        dir.path(),
        &[
            "recover",
            "--input",
            "small.pgm",
            "--denoiser",
            "dct",
            "--rate",
            "0.3",
            "--iters",
            "10",
        ],
    );
    let rows = csv_rows(&dir.path().join("out/trace.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[2].is_empty()));
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(summary.get("psnr_db").is_none());
    assert_eq!(summary["iters"], 10);
}

fn se_column(path: &Path, col: usize) -> Vec<f64> {
    csv_rows(path)
        .iter()
        .map(|r| r[col].parse().unwrap())
        .collect()
}

#[test]
fn se_identity_theta_doubles_per_layer() {
    let dir = fixture();
    ok(
        dir.path(),
        &[
            "se",
            "--truth",
            "small.pgm",
            "--denoiser",
            "identity",
            "--delta",
            "0.5",
            "--layers",
            "5",
            "--trials",
            "0",
        ],
    );
    let theta = se_column(&dir.path().join("out/se.csv"), 1);
    assert_eq!(theta.len(), 6);
    // Each layer averages 8 draws of mean(g^2) over n = 1024 pixels.
    let tol = 4.0 * (2.0 / (8.0 * 1024.0f64)).sqrt();
    for w in theta.windows(2) {
        assert!((w[1] / w[0] / 2.0 - 1.0).abs() < tol, "{theta:?}");
    }
}

#[test]
fn se_with_many_samples_tracks_measured_mse() {
    let dir = fixture();
    for mc in ["1", "64"] {
        let out = format!("se{mc}");
        ok(
            dir.path(),
            &[
                "se",
                "--truth",
                "small.pgm",
                "--denoiser",
                "identity",
                "--delta",
                "0.5",
                "--layers",
                "4",
                "--mc-samples",
                mc,
                "--out-dir",
                &out,
            ],
        );
    }
    let rel = se_column(&dir.path().join("se64/se.csv"), 4);
    assert!(rel.iter().all(|r| *r < 0.25), "{rel:?}");
    assert_eq!(csv_rows(&dir.path().join("se1/se.csv")).len(), 5);
}

#[test]
fn se_layer_mismatch_with_network_exits_5() {
    let dir = fixture();
    dataset(dir.path());
    ok(
        dir.path(),
        &[
            &[
                "train",
                "--dataset",
                "ds",
                "--regime",
                "e2e",
                "--layers",
                "2",
                "--epochs",
                "0",
                "--out-dir",
                "net",
            ],
            TINY,
        ]
        .concat(),
    );
    let out = ldamp(
        dir.path(),
        &[
            "se",
            "--truth",
            "small.pgm",
            "--model",
            "net/network.json",
            "--layers",
            "3",
        ],
    );
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    ok(
        dir.path(),
        &[
            "se",
            "--truth",
            "small.pgm",
            "--model",
            "net/network.json",
            "--trials",
            "1",
        ],
    );
    assert_eq!(csv_rows(&dir.path().join("out/se.csv")).len(), 3);
}

#[test]
fn dbd_writes_five_bins_and_a_manifest() {
    let dir = fixture();
    dataset(dir.path());
    let stdout = ok(
        dir.path(),
        &[
            &[
                "train",
                "--dataset",
                "ds",
                "--regime",
                "dbd",
                "--bins",
                "default",
                "--epochs",
                "1",
                "--out-dir",
                "bank",
            ],
            TINY,
        ]
        .concat(),
    );
    assert!(stdout.starts_with("5 denoisers"), "{stdout}");
    for i in 0..5 {
        assert!(dir.path().join(format!("bank/bin{i}.ldw")).is_file());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bank/bank.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["bins"].as_array().unwrap().len(), 5);
    let out = ok(
        dir.path(),
        &[
            "recover",
            "--input",
            "small.pgm",
            "--model",
            "bank/bank.json",
            "--method",
            "damp",
            "--iters",
            "3",
        ],
    );
    assert!(out.contains("\"iters\":3"));
}

#[test]
fn zero_epochs_keeps_initial_weights() {
    let dir = fixture();
    dataset(dir.path());
    ok(
        dir.path(),
        &[
            &[
                "train",
                "--dataset",
                "ds",
                "--regime",
                "e2e",
                "--layers",
                "2",
                "--epochs",
                "0",
                "--seed",
                "7",
                "--out-dir",
                "net",
            ],
            TINY,
        ]
        .concat(),
    );
    let arch = CnnArch {
        depth: 4,
        width: 4,
        channels: 1,
        batch_norm: true,
    };
    for l in 0..2 {
        let saved = load_model(dir.path().join(format!("net/layer{l}.ldw"))).unwrap();
        assert_eq!(
            saved,
            DenoiserModel::init(DenoiserSpec::Cnn(arch), 7 + l as u64).unwrap()
        );
    }
    assert!(csv_rows(&dir.path().join("net/loss.csv")).is_empty());
}

#[test]
fn layer_by_layer_stages_freeze_earlier_layers() {
    let dir = fixture();
    dataset(dir.path());
    ok(
        dir.path(),
        &[
            &[
                "train",
                "--dataset",
                "ds",
                "--regime",
                "lbl",
                "--layers",
                "2",
                "--epochs",
                "1",
                "--out-dir",
                "lbl",
            ],
            TINY,
        ]
        .concat(),
    );
    let p = dir.path().join("lbl");
    assert!(p.join("stage1/network.json").is_file() && p.join("stage2/network.json").is_file());
    assert!(!p.join("stage1/layer1.ldw").exists());
    assert_eq!(
        fs::read(p.join("stage1/layer0.ldw")).unwrap(),
        fs::read(p.join("stage2/layer0.ldw")).unwrap()
    );
    assert_ne!(
        fs::read(p.join("stage2/layer0.ldw")).unwrap(),
        fs::read(p.join("stage2/layer1.ldw")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("stage2/layer1.ldw")).unwrap(),
        fs::read(p.join("layer1.ldw")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = fixture();
    let d = dir.path();
    assert_eq!(
        code(&ldamp(
            d,
            &["recover", "--input", "missing.pgm", "--denoiser", "dct"]
        )),
        3
    );
    assert_eq!(
        code(&ldamp(
            d,
            &[
                "recover",
                "--input",
                "small.pgm",
                "--truth",
                "other.pgm",
                "--denoiser",
                "dct"
            ]
        )),
        5
    );
    assert_eq!(code(&ldamp(d, &["recover", "--input", "small.pgm"])), 2);
    assert_eq!(
        code(&ldamp(
            d,
            &[
                "recover",
                "--input",
                "small.pgm",
                "--denoiser",
                "dct",
                "--bogus"
            ]
        )),
        2
    );
    assert_eq!(
        code(&ldamp(d, &["train", "--dataset", "ds", "--regime", "xyz"])),
        2
    );
    dataset(d);
    let diverge = ldamp(
        d,
        &[
            &[
                "train",
                "--dataset",
                "ds",
                "--regime",
                "e2e",
                "--layers",
                "2",
                "--epochs",
                "5",
                "--lr",
                "1e30",
                "--out-dir",
                "div",
            ],
            TINY,
        ]
        .concat(),
    );
    assert_eq!(
        code(&diverge),
        4,
        "{}",
        String::from_utf8_lossy(&diverge.stderr)
    );
}

#[test]
fn bench_empty_single_and_missing_model() {
    let dir = fixture();
    let d = dir.path();
    ok(
        d,
        &[
            "bench",
            "--method",
            "damp=dct",
            "--images",
            "small.pgm",
            "--out-dir",
            "empty",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("empty/bench.csv")).unwrap(),
        "method,rate,image,seed,psnr_db,time_s\n"
    );
    ok(
        d,
        &[
            "bench",
            "--method",
            "damp=dct",
            "--rates",
            "0.3",
            "--images",
            "small.pgm",
            "--out-dir",
            "one",
        ],
    );
    let rows = csv_rows(&d.join("one/bench.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][..4], ["damp", "0.3", "small.pgm", "0"]);
    let missing = ldamp(
        d,
        &[
            "bench",
            "--method",
            "ldamp=nothing/network.json",
            "--rates",
            "0.3",
            "--images",
            "small.pgm",
        ],
    );
    assert_eq!(code(&missing), 2);
}

#[test]
fn config_file_fills_flags_and_rejects_unknown_keys() {
    let dir = fixture();
    let d = dir.path();
    ok(
        d,
        &[
            "recover",
            "--input",
            "small.pgm",
            "--denoiser",
            "dct",
            "--rate",
            "0.4",
            "--iters",
            "3",
            "--no-timing",
            "--out-dir",
            "a",
        ],
    );
    // The resolved configuration alone reproduces the run; explicit flags win.
    ok(
        d,
        &[
            "recover",
            "--config",
            "a/recover.config.json",
            "--out-dir",
            "b",
        ],
    );
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    for (name, bytes) in &a {
        if !name.to_string_lossy().ends_with(".json") {
            assert_eq!(Some(bytes), b.get(name), "{}", name.display());
        }
    }
    fs::write(d.join("bad.json"), r#"{"command": "recover", "iterz": 3}"#).unwrap();
    assert_eq!(code(&ldamp(d, &["recover", "--config", "bad.json"])), 2);
    fs::write(d.join("wrong.json"), r#"{"command": "bench"}"#).unwrap();
    assert_eq!(code(&ldamp(d, &["recover", "--config", "wrong.json"])), 2);
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let dir = fixture();
    let d = dir.path();
    let runs: Vec<Vec<&str>> = vec![
        vec!["dataset", "--images", "imgs", "--augment", "--stride", "20"],
        vec![
            "train",
            "--dataset",
            "run0/dataset.json",
            "--regime",
            "lbl",
            "--layers",
            "2",
            "--epochs",
            "1",
        ],
        vec![
            "train",
            "--dataset",
            "run0/dataset.json",
            "--regime",
            "dbd",
            "--bins",
            "0,20,300",
            "--epochs",
            "1",
        ],
        vec![
            "recover",
            "--input",
            "small.pgm",
            "--truth",
            "small.pgm",
            "--model",
            "run1/network.json",
        ],
        vec![
            "se",
            "--truth",
            "small.pgm",
            "--model",
            "run2/bank.json",
            "--layers",
            "3",
            "--trials",
            "2",
        ],
        vec![
            "bench",
            "--method",
            "dit=dct",
            "--method",
            "ldamp=run1/network.json",
            "--rates",
            "0.2,0.4",
            "--images",
            "small.pgm",
            "--trials",
            "2",
            "--threads",
            "2",
        ],
    ];
    for (i, run) in runs.iter().enumerate() {
        let out = format!("run{i}");
        let mut args = run.clone();
        args.extend(["--seed", "11", "--out-dir", &out, "--no-timing"]);
        if run[0] == "train" {
            args.extend(TINY);
        }
        ok(d, &args);
        let first = tree(&d.join(&out));
        fs::remove_dir_all(d.join(&out)).unwrap();
        ok(d, &args);
        assert_eq!(first, tree(&d.join(&out)), "{run:?} is not reproducible");
        assert!(first.len() >= 2);
    }
}
