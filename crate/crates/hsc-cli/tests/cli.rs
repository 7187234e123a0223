//! End-to-end checks of the `hsc` binary: pipeline wiring, artifact
//! determinism, and the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hsc_core::afc::{save_record, TwoAFCRecord};
use hsc_core::image_io::{read_ppm, write_ppm};
use tempfile::TempDir;

fn hsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsc")).args(args).output().expect("spawn hsc")
}

fn stderr_of(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_of(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set", "c1=3", "--set", "c2=2", "--set", "l1=4", "--set", "l2=4",
    "--set", "width=4", "--set", "ctx_hidden=6", "--set", "ctx_layers=2",
    "--set", "epochs=1", "--set", "batch_size=3", "--set", "corpus=synthetic:3",
];

fn train_into(dir: &Path, seed: &str) -> PathBuf {
    let mut args = vec!["train", "--out", dir.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(TINY);
    let o = hsc(&args);
    assert!(o.status.success(), "train failed: {}", stderr_of(&o));
    dir.join("model.ckpt")
}

/// One tiny trained model shared by the read-only tests.
fn shared_model() -> &'static (TempDir, PathBuf) {
    static MODEL: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = train_into(&dir.path().join("run"), "7");
        (dir, ckpt)
    })
}

fn test_image(w: usize, h: usize) -> Vec<f64> {
    (0..3 * w * h).map(|i| ((i * 31 + 7) % 256) as f64 / 255.0).collect()
}

#[test]
fn pipeline_compress_decompress_eval() {
    let (_keep, model) = shared_model();
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("photo.ppm");
    write_ppm(&img_path, &test_image(40, 24), 40, 24).unwrap();

    let o = hsc(&["compress", img_path.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "compress: {}", stderr_of(&o));
    let hsc_path = dir.path().join("photo.hsc");
    assert!(hsc_path.exists());

    let o = hsc(&["decompress", hsc_path.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "decompress: {}", stderr_of(&o));
    let (dec, w, h) = read_ppm(dir.path().join("photo.dec.ppm")).unwrap();
    assert_eq!((w, h), (40, 24));
    assert_eq!(dec.len(), 3 * 40 * 24);

    let csv_path = dir.path().join("eval.csv");
    let o = hsc(&[
        "eval", "synthetic:2",
        "--model", model.to_str().unwrap(),
        "--out", csv_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "eval: {}", stderr_of(&o));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "csv:\n{csv}");
    assert!(lines[0].starts_with("name,bpp,"));
    let fields: Vec<&str> = lines[1].split(',').collect();
    let psnr: f64 = fields[4].parse().unwrap();
    let dpl: f64 = fields[6].parse().unwrap();
    assert!(psnr.is_finite() && psnr > 0.0);
    assert!(dpl >= 0.0);
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_into(&dir.path().join("a"), "11");
    let b = train_into(&dir.path().join("b"), "11");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "checkpoints differ");
    assert_eq!(
        fs::read(dir.path().join("a/train-log.csv")).unwrap(),
        fs::read(dir.path().join("b/train-log.csv")).unwrap(),
        "training logs differ"
    );

    let img_path = dir.path().join("x.ppm");
    write_ppm(&img_path, &test_image(32, 32), 32, 32).unwrap();
    for out in ["one.hsc", "two.hsc"] {
        let o = hsc(&[
            "compress", img_path.to_str().unwrap(),
            "--model", a.to_str().unwrap(),
            "--out", dir.path().join(out).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "compress: {}", stderr_of(&o));
    }
    assert_eq!(
        fs::read(dir.path().join("one.hsc")).unwrap(),
        fs::read(dir.path().join("two.hsc")).unwrap(),
        "bitstreams differ"
    );
}

#[test]
fn decompress_with_the_wrong_model_exits_3() {
    let (_keep, model_a) = shared_model();
    let dir = tempfile::tempdir().unwrap();
    let model_b = train_into(&dir.path().join("other"), "8");
    let img_path = dir.path().join("y.ppm");
    write_ppm(&img_path, &test_image(32, 32), 32, 32).unwrap();
    let o = hsc(&["compress", img_path.to_str().unwrap(), "--model", model_a.to_str().unwrap()]);
    assert!(o.status.success(), "compress: {}", stderr_of(&o));
    let o = hsc(&[
        "decompress", dir.path().join("y.hsc").to_str().unwrap(),
        "--model", model_b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr_of(&o));
    assert!(stderr_of(&o).contains("digest"), "stderr: {}", stderr_of(&o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(hsc(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(hsc(&[]).status.code(), Some(1));
    assert_eq!(hsc(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let o = hsc(&["train", "--out", dir.path().to_str().unwrap(), "--set", "c1=abc"]);
    assert_eq!(o.status.code(), Some(1), "stderr: {}", stderr_of(&o));
    let o = hsc(&["train", "--out", dir.path().to_str().unwrap(), "--set", "nonsense"]);
    assert_eq!(o.status.code(), Some(1), "stderr: {}", stderr_of(&o));
}

#[test]
fn io_errors_exit_2() {
    let (_keep, model) = shared_model();
    let o = hsc(&["compress", "/nonexistent/image.ppm", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", stderr_of(&o));
    let o = hsc(&["decompress", "/nonexistent/stream.hsc", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", stderr_of(&o));
}

#[test]
fn malformed_bitstream_exits_3() {
    let (_keep, model) = shared_model();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("garbage.hsc");
    fs::write(&bad, b"this is not a bitstream").unwrap();
    let o = hsc(&["decompress", bad.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr_of(&o));
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap(), "--seed", "7"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "lr=1e18", "--set", "epochs=3"]);
    let o = hsc(&args);
    assert_eq!(o.status.code(), Some(4), "stderr: {}", stderr_of(&o));
    assert!(dir.path().join("model.ckpt").exists(), "last-good checkpoint missing");
}

fn twoafc_dataset(dir: &Path) {
    let (w, h) = (16, 16);
    for i in 0..3u64 {
        let q = |v: u64| (v % 256) as f64 / 255.0;
        let reference: Vec<f64> = (0..3 * w * h).map(|p| q(p as u64 * 7 + i * 11)).collect();
        let b: Vec<f64> = reference.iter().enumerate().map(|(p, &v)| {
            let n = q(p as u64 * 13 + i) - 0.5;
            (v + 0.4 * n).clamp(0.0, 1.0)
        }).collect();
        let rec = TwoAFCRecord {
            a: reference.clone(),
            b,
            reference,
            w,
            h,
            fraction_a: 1.0,
            method_a: "clean".into(),
            method_b: "noisy".into(),
            bpp: 0.4,
        };
        save_record(dir, &format!("trial-{i:03}"), &rec).unwrap();
    }
}

#[test]
fn metric_fitting_and_scoring_round_trip() {
    let (_keep, model) = shared_model();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("records");
    twoafc_dataset(&data);

    let o = hsc(&[
        "score-2afc", data.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
        "--metric", "psnr",
    ]);
    assert!(o.status.success(), "score psnr: {}", stderr_of(&o));
    assert!(stdout_of(&o).contains("score 1.000000"), "stdout: {}", stdout_of(&o));

    let weights = dir.path().join("weights.ckpt");
    let o = hsc(&[
        "fit-metric", data.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
        "--out", weights.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "fit-metric: {}", stderr_of(&o));
    assert!(weights.exists());

    let o = hsc(&[
        "score-2afc", data.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
        "--weights", weights.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "score dpl: {}", stderr_of(&o));
    assert!(stdout_of(&o).contains("2afc dpl score"), "stdout: {}", stdout_of(&o));

    let o = hsc(&[
        "score-2afc", data.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
        "--metric", "bogus",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
