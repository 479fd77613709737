use std::path::Path;
use std::process::{Command, Output};

use mediasplat::hydrosim::{degrade, normalize_depth, MediumPreset};
use mediasplat::image::Image;
use mediasplat::io;
use mediasplat::medium::MediumMap;
use mediasplat::render::{render, AlphaMode};
use mediasplat::train::Checkpoint;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mediasplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn gradient(w: usize, h: usize) -> Image {
    Image::from_fn(w, h, 3, |x, y, c| (x as f64 / w as f64 + y as f64 / (2 * h) as f64 + 0.1 * c as f64) / 1.7)
}

#[test]
fn eval_of_identical_images_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        io::create_dir(d).unwrap();
        io::write_raw(&d.join("v0.raw"), &gradient(16, 12)).unwrap();
    }
    let out = ok(&["eval", "--pred", p(&a), "--ref", p(&b), "--task", "restoration"]);
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["psnr"], "inf");
    assert!((rows[0]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rows[1]["record"], "aggregate");
    assert_eq!(rows[1]["task"], "restoration");
}

#[test]
fn simulate_matches_library_degrade() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, depth, out) = (dir.path().join("clean"), dir.path().join("depth"), dir.path().join("out"));
    io::create_dir(&clean).unwrap();
    io::create_dir(&depth).unwrap();
    let img = gradient(20, 14);
    let z = Image::from_fn(20, 14, 1, |x, y, _| 2.0 + 0.1 * x as f64 + 0.05 * y as f64);
    io::write_raw(&clean.join("a.raw"), &img).unwrap();
    io::write_raw(&depth.join("a.raw"), &z).unwrap();
    ok(&[
        "simulate",
        "--clean",
        p(&clean),
        "--depth",
        p(&depth),
        "--out",
        p(&out),
        "--beta-d",
        "0.5,0.4,0.3",
    ]);
    let preset = MediumPreset {
        beta_d: [0.5, 0.4, 0.3],
        ..MediumPreset::underwater()
    };
    let expected = degrade(&img, &normalize_depth(&z), &preset).unwrap();
    assert_eq!(io::read_raw(&out.join("a.raw")).unwrap(), expected);
    let manifest = io::read_text(&out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("min-max"));
}

#[test]
fn train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, renders) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("renders"));
    ok(&[
        "fixture",
        "--out",
        p(&data),
        "--gaussians",
        "30",
        "--train-views",
        "4",
        "--test-views",
        "2",
        "--width",
        "24",
        "--height",
        "16",
    ]);
    let out = ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "30", "--seed", "3"]);
    let validation: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    let logged = validation["novel_view"]["mean_psnr"].as_f64().unwrap();

    let log = io::read_text(&run.join("train_log.jsonl")).unwrap();
    assert_eq!(json_lines(&log).iter().filter(|r| r["record"] == "step").count(), 30);

    let ck = run.join("checkpoint_000030");
    ok(&[
        "render",
        "--checkpoint",
        p(&ck),
        "--cameras",
        p(&data.join("test/cameras.txt")),
        "--out",
        p(&renders),
    ]);
    let metrics = ok(&["eval", "--pred", p(&renders), "--ref", p(&data.join("test/images"))]);
    let agg = json_lines(&metrics).pop().unwrap();
    assert_eq!(agg["views"], 2);
    assert_eq!(agg["mean_psnr"].as_f64().unwrap(), logged);
}

#[test]
fn render_object_component_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, renders) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("renders"));
    ok(&[
        "fixture", "--out", p(&data), "--gaussians", "20", "--train-views", "3", "--test-views", "1", "--width", "16",
        "--height", "12",
    ]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "5"]);
    let ck_dir = run.join("checkpoint_000005");
    let cams_path = data.join("test/cameras.txt");
    ok(&[
        "render",
        "--checkpoint",
        p(&ck_dir),
        "--cameras",
        p(&cams_path),
        "--out",
        p(&renders),
        "--component",
        "object",
        "--alpha-w",
        "0",
    ]);
    let ck = Checkpoint::load(&ck_dir).unwrap();
    let cam = &io::load_cameras(&cams_path).unwrap()[0];
    let map = MediumMap::from_field(&ck.model.field, cam).unwrap();
    let expected = render(&ck.model.cloud, cam, Some(&map), AlphaMode::Raw).unwrap().object;
    assert_eq!(io::read_raw(&renders.join("view_000.raw")).unwrap(), expected);
}

#[test]
fn check_grad_passes_on_a_micro_scene() {
    let out = ok(&["check-grad", "--seed", "2", "--gaussians", "4", "--size", "8"]);
    assert_eq!(out.matches("PASS").count(), 5, "{out}");
}

#[test]
fn bad_input_exits_nonzero() {
    assert!(!cli(&["render", "--bogus"]).status.success());
    assert!(!cli(&["check-grad", "--step", "0.1"]).status.success());

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    io::write_text(&cfg, "no_such_key = 1\n").unwrap();
    let out = cli(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("o")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let missing = cli(&["eval", "--pred", "/nonexistent/a", "--ref", "/nonexistent/b"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/a"));
}
