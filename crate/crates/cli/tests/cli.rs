//! End-to-end tests of the `dtvae` binary: flag surface, exit codes, file
//! outputs, determinism, and checkpoint resume.

use dtvae_cli::{load_checkpoint, save_checkpoint, strip_wall_column, METRICS_HEADER};
use dtvae_core::fixtures::write_synthetic_mnist;
use dtvae_core::nn::{AdamState, ModelParams};
use dtvae_core::vae::TrainConfig;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dtvae")
}

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

/// Small synthetic dataset shared by every test in this file.
fn data_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tmp_root().join("cli-data");
        if !dir.join("train-images-idx3-ubyte").exists() {
            write_synthetic_mnist(&dir, 400, 80, 555).expect("fixture dataset");
        }
        dir
    })
}

fn small_train_args(out: &Path, seed: u64, epochs: usize) -> Vec<String> {
    [
        "train",
        "--data-dir",
        data_dir().to_str().unwrap(),
        "--latent",
        "8",
        "--rank",
        "4",
        "--epsilon",
        "0.001",
        "--hidden",
        "32",
        "--batch",
        "128",
        "--lr",
        "0.001",
        "--subset",
        "256",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        "--epochs".to_string(),
        epochs.to_string(),
        "--seed".to_string(),
        seed.to_string(),
        "--out".to_string(),
        out.to_str().unwrap().to_string(),
    ])
    .collect()
}

fn read_metrics(out: &Path) -> String {
    std::fs::read_to_string(out.join("metrics.csv")).expect("metrics.csv written")
}

#[test]
fn train_smoke_run_writes_metrics_and_checkpoint() {
    let out = tmp_root().join("cli-smoke");
    let t0 = std::time::Instant::now();
    let status = Command::new(bin())
        .args(small_train_args(&out, 1, 1))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(t0.elapsed().as_secs() < 60, "smoke run took too long");

    let metrics = read_metrics(&out);
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2, "one row per split, one split configured");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "0");
    assert_eq!(fields[1], "train");
    let elbo: f64 = fields[2].parse().unwrap();
    let recon: f64 = fields[3].parse().unwrap();
    let kl: f64 = fields[4].parse().unwrap();
    assert_eq!(elbo, recon - kl);

    let ckpt = load_checkpoint(&out.join("checkpoint.dtvae")).unwrap();
    assert_eq!(ckpt.epoch, 1);
    assert_eq!(ckpt.config.latent, 8);
}

#[test]
fn training_metrics_are_deterministic_given_seed() {
    let out_a = tmp_root().join("cli-det-a");
    let out_b = tmp_root().join("cli-det-b");
    for out in [&out_a, &out_b] {
        let status = Command::new(bin())
            .args(small_train_args(out, 7, 2))
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        strip_wall_column(&read_metrics(&out_a)),
        strip_wall_column(&read_metrics(&out_b))
    );
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let out_full = tmp_root().join("cli-resume-full");
    let out_part = tmp_root().join("cli-resume-part");
    let status = Command::new(bin())
        .args(small_train_args(&out_full, 9, 3))
        .status()
        .unwrap();
    assert!(status.success());

    let status = Command::new(bin())
        .args(small_train_args(&out_part, 9, 1))
        .status()
        .unwrap();
    assert!(status.success());
    let first_leg = read_metrics(&out_part);

    // Continue the interrupted run in place.
    let mut args = small_train_args(&out_part, 9, 3);
    args.push("--resume".into());
    args.push(out_part.join("checkpoint.dtvae").to_str().unwrap().into());
    let out_cont = tmp_root().join("cli-resume-cont");
    // Write the continuation into a fresh dir so both metrics files survive.
    let pos = args.iter().position(|a| a == "--out").unwrap();
    args[pos + 1] = out_cont.to_str().unwrap().into();
    let status = Command::new(bin()).args(args).status().unwrap();
    assert!(status.success());

    // Stitched metrics must equal the uninterrupted run's, minus wall time.
    let full = strip_wall_column(&read_metrics(&out_full));
    let mut stitched_lines: Vec<String> = strip_wall_column(&first_leg)
        .lines()
        .map(String::from)
        .collect();
    stitched_lines.extend(
        strip_wall_column(&read_metrics(&out_cont))
            .lines()
            .skip(1)
            .map(String::from),
    );
    assert_eq!(full, stitched_lines.join("\n"));

    // And the final checkpoints are byte for byte identical.
    let a = std::fs::read(out_full.join("checkpoint.dtvae")).unwrap();
    let b = std::fs::read(out_cont.join("checkpoint.dtvae")).unwrap();
    assert_eq!(a, b);
}

fn write_zero_checkpoint(path: &Path, latent: usize, hidden: usize) -> TrainConfig {
    let cfg = TrainConfig {
        latent,
        rank: 0,
        epsilon: 0.0,
        hidden,
        batch: 16,
        epochs: 0,
        lr: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let params = ModelParams::zeros(cfg.model_config()).unwrap();
    let adam = AdamState::new(&params);
    save_checkpoint(path, &cfg, &params, &adam, 0).unwrap();
    cfg
}

#[test]
fn eval_zero_network_prints_analytic_anchor() {
    let ckpt = tmp_root().join("cli-zero.dtvae");
    write_zero_checkpoint(&ckpt, 8, 16);
    let run = || {
        Command::new(bin())
            .args([
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--data-dir",
                data_dir().to_str().unwrap(),
                "--samples",
                "1",
                "--seed",
                "3",
            ])
            .output()
            .unwrap()
    };
    let out = run();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let value: f64 = stdout
        .trim()
        .strip_prefix("test_elbo=")
        .expect("parseable line")
        .parse()
        .unwrap();
    let anchor = 784.0 * 0.5f64.ln();
    assert!((value - anchor).abs() <= 1e-6, "{value} vs {anchor}");

    // Same checkpoint and seed: identical bytes on stdout.
    assert_eq!(stdout, String::from_utf8(run().stdout).unwrap());
}

#[test]
fn eval_rejects_version_mismatch_with_exit_2() {
    let path = tmp_root().join("cli-badversion.dtvae");
    std::fs::write(&path, b"DTVAE9\n{}\n").unwrap();
    let status = Command::new(bin())
        .args([
            "eval",
            "--checkpoint",
            path.to_str().unwrap(),
            "--data-dir",
            data_dir().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bad_paths_and_flags_exit_2() {
    let status = Command::new(bin())
        .args([
            "train",
            "--data-dir",
            "/nonexistent-dtvae-data",
            "--epochs",
            "1",
            "--out",
            tmp_root().join("cli-nowhere").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = Command::new(bin())
        .args(["train", "--no-such-flag"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_corruption_hook_fails() {
    let out = Command::new(bin())
        .args(["gradcheck", "--seed", "5"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "gradcheck failed:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("worst rel_err"));

    let status = Command::new(bin())
        .args(["gradcheck", "--seed", "5", "--corrupt-block", "enc1.w"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn sample_writes_deterministic_pgms() {
    let ckpt = tmp_root().join("cli-sample-zero.dtvae");
    write_zero_checkpoint(&ckpt, 8, 16);

    // count 0: writes nothing, still succeeds.
    let empty = tmp_root().join("cli-sample-empty");
    let status = Command::new(bin())
        .args([
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--count",
            "0",
            "--seed",
            "1",
            "--out",
            empty.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read_dir(&empty).unwrap().count(), 0);

    let run = |dir: &Path| {
        let status = Command::new(bin())
            .args([
                "sample",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--count",
                "3",
                "--seed",
                "1",
                "--out",
                dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let dir_a = tmp_root().join("cli-sample-a");
    let dir_b = tmp_root().join("cli-sample-b");
    run(&dir_a);
    run(&dir_b);
    for i in 0..3 {
        let name = format!("sample_{i:03}.pgm");
        let a = std::fs::read(dir_a.join(&name)).unwrap();
        let b = std::fs::read(dir_b.join(&name)).unwrap();
        assert_eq!(a, b, "sample bytes differ across identical runs");
        // Zero network decodes to mid-gray everywhere.
        assert!(a[13..].iter().all(|&px| px == 127 || px == 128));
    }
}
