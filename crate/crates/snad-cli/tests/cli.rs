//! End-to-end checks of the `snad` binary: determinism, exit codes, and
//! file contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snad"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("snad-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn snad")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_writes_pairs_and_is_deterministic() {
    let dir = scratch("synth");
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        let res = run(&["synth", "--count", "4", "--size", "32", "--seed", "11", "--out", out.to_str().unwrap()]);
        assert_code(&res, 0);
    }
    let entries: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ppm") || n.ends_with(".pgm"))
        .collect();
    assert_eq!(entries.len(), 8, "4 scenes produce 8 files");
    assert!(a.join("run-config.txt").exists(), "sidecar config missing");
    for name in ["0000_img.ppm", "0003_lbl.pgm"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs across runs");
    }
}

#[test]
fn synth_rejects_small_sizes_with_exit_1() {
    let dir = scratch("synth-small");
    let res = run(&["synth", "--count", "1", "--size", "8", "--out", dir.join("x").to_str().unwrap()]);
    assert_code(&res, 1);
}

#[test]
fn unknown_flags_are_rejected() {
    let res = run(&["synth", "--count", "1", "--frobnicate", "2"]);
    assert_code(&res, 1);
}

#[test]
fn blur_is_reproducible_and_identity_at_size_1() {
    let dir = scratch("blur");
    let ds = dir.join("ds");
    assert_code(&run(&["synth", "--count", "1", "--size", "32", "--out", ds.to_str().unwrap()]), 0);
    let input = ds.join("0000_img.ppm");

    let out1 = dir.join("b1.ppm");
    let out2 = dir.join("b2.ppm");
    for out in [&out1, &out2] {
        let res = run(&[
            "blur",
            "--input",
            input.to_str().unwrap(),
            "--kernel",
            "linear45",
            "--size",
            "25",
            "--noise",
            "0.03",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    assert_eq!(read(&out1), read(&out2), "seeded blur not reproducible");
    assert!(dir.join("b1.ppm.config").exists(), "sidecar config missing");

    let ident = dir.join("ident.ppm");
    let res = run(&[
        "blur",
        "--input",
        input.to_str().unwrap(),
        "--size",
        "1",
        "--noise",
        "0",
        "--out",
        ident.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    assert_eq!(read(&ident), read(&input), "size-1 kernel must be the identity");
}

#[test]
fn kernels_respect_format_flag() {
    let dir = scratch("kernels");
    let res = run(&["kernels", "--count", "3", "--seed", "2", "--out", dir.join("k").to_str().unwrap(), "--format", "snt"]);
    assert_code(&res, 0);
    let names: Vec<String> = std::fs::read_dir(dir.join("k"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".snt")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 0);
}

#[test]
fn metrics_identical_images_report_fixed_points() {
    let dir = scratch("metrics");
    let ds = dir.join("ds");
    assert_code(&run(&["synth", "--count", "1", "--size", "32", "--out", ds.to_str().unwrap()]), 0);
    let img = ds.join("0000_img.ppm");
    let res = run(&["metrics", "--a", img.to_str().unwrap(), "--b", img.to_str().unwrap()]);
    assert_code(&res, 0);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("psnr_db=99.0000"), "{stdout}");
    assert!(stdout.contains("ssim=1.000000"), "{stdout}");
    assert!(stdout.contains("l1_pct=0.000000"), "{stdout}");
}

#[test]
fn metrics_rejects_mismatched_images() {
    let dir = scratch("metrics-bad");
    let a = dir.join("a");
    let b = dir.join("b");
    assert_code(&run(&["synth", "--count", "1", "--size", "32", "--out", a.to_str().unwrap()]), 0);
    assert_code(&run(&["synth", "--count", "1", "--size", "16", "--out", b.to_str().unwrap()]), 0);
    let res = run(&[
        "metrics",
        "--a",
        a.join("0000_img.ppm").to_str().unwrap(),
        "--b",
        b.join("0000_img.ppm").to_str().unwrap(),
    ]);
    assert_code(&res, 1);
}

#[test]
fn check_fast_suites_pass() {
    for suite in ["decomp", "spectral", "norm"] {
        let res = run(&["check", "--suite", suite]);
        assert_code(&res, 0);
        let stdout = String::from_utf8_lossy(&res.stdout);
        assert!(stdout.contains("PASS"), "{suite}: {stdout}");
    }
}

#[test]
fn train_toy_writes_report_and_checkpoints() {
    let dir = scratch("train");
    let ds = dir.join("ds");
    assert_code(&run(&["synth", "--count", "2", "--size", "32", "--out", ds.to_str().unwrap()]), 0);
    let report = dir.join("report.csv");
    let ckpt = dir.join("ckpt");
    let res = run(&[
        "train-toy",
        "--data",
        ds.to_str().unwrap(),
        "--steps",
        "2",
        "--batch",
        "2",
        "--report",
        report.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let csv = String::from_utf8_lossy(&read(&report)).to_string();
    assert!(csv.starts_with("step,rec,tex,adv_g,adv_d,total_g,psnr_train\n"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
    assert!(ckpt.join("generator").join("manifest.tsv").exists());
    assert!(ckpt.join("discriminator").join("manifest.tsv").exists());
    assert!(report.with_extension("csv.config").exists(), "sidecar config missing");
}

#[test]
fn texture_dump_writes_three_channels_and_tensor() {
    let dir = scratch("texture");
    let ds = dir.join("ds");
    assert_code(&run(&["synth", "--count", "1", "--size", "32", "--out", ds.to_str().unwrap()]), 0);
    let out = dir.join("tex");
    let res = run(&[
        "texture",
        "--input",
        ds.join("0000_img.ppm").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    for name in ["texture_r.pgm", "texture_g.pgm", "texture_b.pgm", "texture.snt"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
}
