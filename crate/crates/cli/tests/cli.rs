use std::path::Path;
use std::process::{Command, Output};

use nrlg::io::{read_image, read_tensor, write_image};
use nrlg::rng::NoiseRng;
use nrlg::tensor::Tensor;

fn nrlg(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_nrlg")).args(args).output().expect("spawn nrlg");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> Output {
    let out = nrlg(args);
    assert!(out.status.success(), "nrlg {args:?} failed");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Random 8-bit image, so it survives a PGM round trip bit for bit.
fn test_image(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
    let mut rng = NoiseRng::new(seed, 0);
    let data = (0..h * w * c).map(|_| (rng.uniform() * 255.0).floor() / 255.0).collect();
    Tensor::new(vec![h, w, c], data).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn identity_degrade_without_noise_is_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let x = test_image(1, 16, 16, 1);
    let img = dir.path().join("x.pgm");
    write_image(&img, &x).unwrap();
    let y = dir.path().join("y.nrtf");
    ok(&["degrade", "--input", p(&img), "--op", "identity", "--sigma", "0", "--seed", "1", "--out", p(&y)]);
    assert_eq!(read_tensor(&y).unwrap(), x);
    assert!(dir.path().join("y.json").is_file());
    assert!(dir.path().join("y.nrtf.meta.json").is_file());
}

#[test]
fn cs_degrade_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_image(&img, &test_image(2, 16, 16, 1)).unwrap();
    let op = "cs:ratio=0.25,block=8,seed=7";
    let (a, b) = (dir.path().join("a.nrtf"), dir.path().join("b.nrtf"));
    for out in [&a, &b] {
        ok(&["degrade", "--input", p(&img), "--op", op, "--sigma", "0.05", "--seed", "3", "--out", p(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_tensor(&a).unwrap().len(), 4 * 16);
}

#[test]
fn blur_sidecar_records_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.ppm");
    write_image(&img, &test_image(3, 16, 16, 3)).unwrap();
    let y = dir.path().join("y.nrtf");
    ok(&["degrade", "--input", p(&img), "--op", "blur gaussian k=5 std=10", "--sigma", "0.01", "--out", p(&y)]);
    let side = json(&dir.path().join("y.json"));
    let text = side["operator"].to_string();
    assert!(text.contains("gaussian"), "{text}");
    assert!(text.contains('5') && text.contains("10"), "{text}");
    assert_eq!(side["sigma_y"], 0.01);
    assert_eq!(side["geometry"]["channels"], 3);
}

#[test]
fn id_nrlg_identity_noiseless_restores_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let x = test_image(4, 16, 16, 1);
    let img = dir.path().join("x.pgm");
    write_image(&img, &x).unwrap();
    let y = dir.path().join("y.nrtf");
    ok(&["degrade", "--input", p(&img), "--op", "identity", "--out", p(&y)]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "sampler = id_nrlg\nmu = 1\nzeta = 1\n").unwrap();
    let r = dir.path().join("r.pgm");
    ok(&["restore", "--measurement", p(&y), "--config", p(&cfg), "--out", p(&r)]);
    let back = read_image(&r).unwrap();
    let mse = back.sub(&x).norm().powi(2) / x.len() as f64;
    assert!(mse == 0.0 || 10.0 * (1.0 / mse).log10() >= 50.0, "mse {mse}");
    let residuals = std::fs::read_to_string(dir.path().join("r.residuals.csv")).unwrap();
    assert_eq!(residuals.lines().next(), Some("step,t,residual"));
    assert_eq!(residuals.lines().count(), 101);
}

#[test]
fn zeta_zero_runs_repeat_exactly_and_preset_mu_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_image(&img, &test_image(5, 16, 16, 1)).unwrap();
    let y = dir.path().join("y.nrtf");
    ok(&["degrade", "--input", p(&img), "--op", "cs:ratio=0.05,block=8,seed=7", "--out", p(&y)]);

    let cfg = dir.path().join("z.cfg");
    std::fs::write(&cfg, "zeta = 0\nsteps = 20\nseed = 11\n").unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    for out in [&a, &b] {
        ok(&["restore", "--measurement", p(&y), "--config", p(&cfg), "--out", p(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let meta = json(&dir.path().join("a.pgm.meta.json"));
    assert_eq!(meta["guidance"]["mu"], 3.5);
    assert_eq!(meta["guidance"]["mu_from"], "preset");
    assert_eq!(meta["guidance"]["zeta"], 0.0);
    assert_eq!(meta["guidance"]["zeta_from"], "config");
}

#[test]
fn operator_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    write_image(&img, &test_image(6, 16, 16, 1)).unwrap();
    let y = dir.path().join("y.nrtf");
    ok(&["degrade", "--input", p(&img), "--op", "identity", "--out", p(&y)]);
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "operator = sr:factor=4\n").unwrap();
    let out = nrlg(&["restore", "--measurement", p(&y), "--config", p(&cfg), "--out", p(&dir.path().join("r.pgm"))]);
    assert_eq!(out.status.code(), Some(2));
    let missing = nrlg(&["restore", "--measurement", p(&dir.path().join("nope.nrtf")), "--out", "r.pgm"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn batch_restore_writes_one_image_per_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let (imgs, ys, rs) = (dir.path().join("imgs"), dir.path().join("ys"), dir.path().join("rs"));
    std::fs::create_dir(&imgs).unwrap();
    for i in 0..3 {
        write_image(&imgs.join(format!("im{i}.pgm")), &test_image(10 + i, 12, 12, 1)).unwrap();
    }
    ok(&["degrade", "--input", p(&imgs), "--op", "sr:factor=2", "--sigma", "0.05", "--seed", "1", "--out", p(&ys)]);
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "steps = 10\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nrlg"))
        .args(["restore", "--measurement", p(&ys), "--config", p(&cfg), "--out", p(&rs)])
        .env("NRLG_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let seeds: Vec<u64> = (0..3)
        .map(|i| {
            assert!(rs.join(format!("im{i}.pgm")).is_file());
            json(&rs.join(format!("im{i}.pgm.meta.json")))["seed"].as_u64().unwrap()
        })
        .collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2]);

    let csv = ok(&["eval", "--restored", p(&rs), "--reference", p(&imgs)]);
    let text = String::from_utf8(csv.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 5, "{text}");
    assert!(lines[4].starts_with("mean,"));
}

#[test]
fn eval_reports_inf_for_identical_and_20db_for_a_tenth() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::full(vec![16, 16, 1], 0.4);
    let shifted = Tensor::full(vec![16, 16, 1], 0.5);
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    write_image(&a, &x).unwrap();
    write_image(&b, &shifted).unwrap();

    let same = ok(&["eval", "--restored", p(&a), "--reference", p(&a)]);
    let text = String::from_utf8(same.stdout).unwrap();
    assert_eq!(text.lines().nth(1), Some("a,inf,1.000000"));

    let csv = dir.path().join("m.csv");
    ok(&["eval", "--restored", p(&b), "--reference", p(&a), "--out", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    // 8-bit quantization: 0.4 -> 102/255, 0.5 -> 128/255
    let d: f64 = 26.0 / 255.0;
    let expect = 10.0 * (1.0 / (d * d)).log10();
    assert!((row[1].parse::<f64>().unwrap() - expect).abs() < 1e-5, "{row:?}");
    assert!((expect - 20.0).abs() < 0.5);
    assert!(dir.path().join("m.csv.meta.json").is_file());

    let mismatch = nrlg(&["eval", "--restored", p(&a), p(&b), "--reference", p(&a)]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn verify_exit_codes() {
    let out = ok(&["verify", "--suite", "gaussian_marginal"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gaussian_marginal"));
    assert_eq!(nrlg(&["verify", "--suite", "no_such_suite"]).status.code(), Some(2));
}

#[test]
fn verify_protocol_uses_the_builtin_peer() {
    ok(&["verify", "--suite", "protocol"]);
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(nrlg(&["degrade", "--input", "x.pgm"]).status.code(), Some(2));
    assert_eq!(
        nrlg(&["degrade", "--input", "x.pgm", "--op", "warp", "--out", "y.nrtf"]).status.code(),
        Some(2)
    );
}
