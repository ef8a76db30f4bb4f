use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bridgepan::raster::{read_raster, write_raster, Raster};
use bridgepan::tensor::Prng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgepan"))
        .args(args)
        .env("BRIDGEPAN_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn noise_raster(w: usize, h: usize, bands: usize, seed: u64) -> Raster {
    let mut prng = Prng::new(seed);
    let data = (0..w * h * bands).map(|_| prng.uniform_range(0.1, 0.9) as f32).collect();
    Raster::new(w, h, bridgepan::raster::default_band_names(bands), data).unwrap()
}

/// Writes two small synthetic triples and returns the dataset directory.
fn dataset(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&["synth", "--out", s(&d), "--count", "2", "--size", "16", "--ratio", "4", "--seed", "3"]);
    d
}

fn train(data: &Path, out: &Path, steps: &str) {
    ok(&["train", "--data-dir", s(data), "--steps", steps, "--batch", "2", "--seed", "7", "--out", s(out)]);
}

#[test]
fn degrade_writes_documented_shapes() {
    let t = tempfile::tempdir().unwrap();
    let (ms, pan) = (t.path().join("ms.bpr"), t.path().join("pan.bpr"));
    write_raster(&ms, &noise_raster(64, 64, 4, 1)).unwrap();
    write_raster(&pan, &noise_raster(256, 256, 1, 2)).unwrap();
    let out = t.path().join("pair");
    ok(&["degrade", "--ms", s(&ms), "--pan", s(&pan), "--ratio", "4", "--out", s(&out)]);
    let dims = |n: &str| {
        let r = read_raster(&out.join(n)).unwrap();
        (r.width(), r.height(), r.bands())
    };
    assert_eq!(dims("ms.bpr"), (16, 16, 4));
    assert_eq!(dims("pan.bpr"), (64, 64, 1));
    assert_eq!(dims("reference.bpr"), (64, 64, 4));
    assert!(out.join("config.json").exists());

    let first = std::fs::read(out.join("ms.bpr")).unwrap();
    ok(&["degrade", "--ms", s(&ms), "--pan", s(&pan), "--ratio", "4", "--out", s(&out)]);
    assert_eq!(first, std::fs::read(out.join("ms.bpr")).unwrap());
}

#[test]
fn degrade_ratio_error_names_dimension() {
    let t = tempfile::tempdir().unwrap();
    let (ms, pan) = (t.path().join("ms.bpr"), t.path().join("pan.bpr"));
    write_raster(&ms, &noise_raster(30, 32, 4, 1)).unwrap();
    write_raster(&pan, &noise_raster(120, 128, 1, 2)).unwrap();
    let o = run(&["degrade", "--ms", s(&ms), "--pan", s(&pan), "--ratio", "4", "--out", s(&t.path().join("p"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("30"), "{err}");
    assert!(!t.path().join("p").join("ms.bpr").exists());
}

#[test]
fn missing_input_is_format_or_io_exit() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["degrade", "--ms", "/nonexistent.bpr", "--pan", "/nonexistent.bpr", "--ratio", "4", "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_zero_steps_and_empty_dataset() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let out = t.path().join("m0");
    train(&data, &out, "0");
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("config.json").exists());

    let empty = t.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&["train", "--data-dir", s(&empty), "--out", s(&t.path().join("m1"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_and_sharpen_are_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    train(&data, &a, "4");
    train(&data, &b, "4");
    let ca = std::fs::read(a.join("model.ckpt")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("model.ckpt")).unwrap());

    let pair = data.join("pair000");
    let sharpen = |out: &Path| {
        ok(&[
            "sharpen", "--ms", s(&pair.join("ms.bpr")), "--pan", s(&pair.join("pan.bpr")),
            "--ckpt", s(&a.join("model.ckpt")), "--eta", "0.05", "--out", s(out),
        ])
    };
    let (fa, fb) = (t.path().join("fa.bpr"), t.path().join("fb.bpr"));
    let da = sharpen(&fa);
    let db = sharpen(&fb);
    assert_eq!(std::fs::read(&fa).unwrap(), std::fs::read(&fb).unwrap());
    assert_eq!(da.split_whitespace().next(), db.split_whitespace().next());
    assert!(t.path().join("fa.bpr.config.json").exists());
}

#[test]
fn eta_zero_matches_default_and_oracle_recovers_reference() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let m = t.path().join("m");
    train(&data, &m, "2");
    let pair = data.join("pair001");
    let (ms, pan, ckpt) = (pair.join("ms.bpr"), pair.join("pan.bpr"), m.join("model.ckpt"));
    let base = |out: &Path, extra: &[&str]| {
        let mut args = vec!["sharpen", "--ms", s(&ms), "--pan", s(&pan), "--ckpt", s(&ckpt), "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args);
    };
    let (x, y) = (t.path().join("x.bpr"), t.path().join("y.bpr"));
    base(&x, &[]);
    base(&y, &["--eta", "0"]);
    assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap());

    let o = t.path().join("o.bpr");
    let reference = pair.join("reference.bpr");
    base(&o, &["--oracle", s(&reference), "--nfe", "5"]);
    let (f, r) = (read_raster(&o).unwrap(), read_raster(&reference).unwrap());
    let err = f.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-5, "oracle error {err}");
}

#[test]
fn sharpen_rejects_variant_mismatch_and_too_many_bands() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let m = t.path().join("m");
    train(&data, &m, "0");
    let pair = data.join("pair000");
    let o = run(&[
        "sharpen", "--ms", s(&pair.join("ms.bpr")), "--pan", s(&pair.join("pan.bpr")),
        "--ckpt", s(&m.join("model.ckpt")), "--variant", "t", "--out", s(&t.path().join("f.bpr")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let wide = t.path().join("wide.bpr");
    write_raster(&wide, &noise_raster(4, 4, 17, 5)).unwrap();
    let o = run(&[
        "sharpen", "--ms", s(&wide), "--pan", s(&pair.join("pan.bpr")),
        "--ckpt", s(&m.join("model.ckpt")), "--out", s(&t.path().join("g.bpr")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!t.path().join("g.bpr").exists());
}

#[test]
fn eval_modes() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let pair = data.join("pair000");
    let reference = pair.join("reference.bpr");
    let out = t.path().join("e");
    ok(&["eval", "--fused", s(&reference), "--ref", s(&reference), "--ratio", "4", "--out", s(&out)]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["psnr"], 99.0);
    assert_eq!(rep["ssim"], 1.0);
    assert_eq!(rep["sam"], 0.0);
    assert_eq!(rep["ergas"], 0.0);
    assert!(out.join("report.csv").exists());

    let mixed = run(&[
        "eval", "--fused", s(&reference), "--ref", s(&reference), "--ms", s(&pair.join("ms.bpr")),
        "--pan", s(&pair.join("pan.bpr")), "--ratio", "4", "--out", s(&out),
    ]);
    assert_eq!(mixed.status.code(), Some(2));
    let no_ratio = run(&["eval", "--fused", s(&reference), "--ref", s(&reference), "--out", s(&out)]);
    assert_eq!(no_ratio.status.code(), Some(2));
}

#[test]
fn baseline_batch_and_unknown_method() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let pair = data.join("pair000");
    let out = t.path().join("b");
    let args = |m: &'static str| -> Vec<String> {
        vec![
            "baseline".into(), "--ms".into(), s(&pair.join("ms.bpr")).into(), "--pan".into(),
            s(&pair.join("pan.bpr")).into(), "--ratio".into(), "4".into(), "--method".into(), m.into(),
            "--ref".into(), s(&pair.join("reference.bpr")).into(), "--out".into(), s(&out).into(),
        ]
    };
    let all = args("all");
    ok(&all.iter().map(String::as_str).collect::<Vec<_>>());
    for m in ["sfim", "ihs", "gs", "brovey"] {
        assert!(out.join(format!("{m}.bpr")).exists(), "{m}");
    }
    let csv = std::fs::read_to_string(out.join("baselines.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");

    let bad = args("pca");
    let o = run(&bad.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for m in ["ihs", "gs", "sfim", "brovey"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn verify_moe_suite_passes_and_usage_errors_exit_two() {
    let out = ok(&["verify", "--suite", "moe"]);
    assert!(out.contains("0 failed"), "{out}");
    assert_eq!(run(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["unknown"]).status.code(), Some(2));
}
