use std::path::Path;
use std::process::{Command, Output};

use aquasplat::io::checkpoint;
use aquasplat::io::image::read_float_image;
use aquasplat::io::medium_file;
use aquasplat::io::ply::cloud_from_points;
use aquasplat::io::scene::read_scene;
use aquasplat::trainer::{initial_model, TrainConfig};
use aquasplat::MediumParams;
use rand::SeedableRng;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquasplat"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--seed", "7", "--out", "scene", "--surface", "100", "--floaters", "4"], dir);
}

#[test]
fn zero_iterations_reproduce_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(&["train", "--scene", "scene", "--iters", "0", "--seed", "5", "--out", "init.ckpt"], dir.path());

    let scene = read_scene(&dir.path().join("scene")).unwrap();
    let cfg = TrainConfig {
        iterations: 0,
        seed: 5,
        ..TrainConfig::desk()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let expected = initial_model(cloud_from_points(&scene.points), &cfg, &mut rng).unwrap();
    let (saved, header) = checkpoint::load(&dir.path().join("init.ckpt")).unwrap();
    assert_eq!(saved, checkpoint::quantized(&expected));
    assert_eq!(header.n_gaussians, scene.points.len());
}

#[test]
fn radiance_and_underwater_renders_agree_in_clear_water() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(&["train", "--scene", "scene", "--iters", "0", "--out", "m.ckpt"], dir.path());
    let (model, _) = checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let clear = MediumParams::clear(model.medium.grid_d.bbox, 2);
    medium_file::save(&dir.path().join("clear.json"), &clear).unwrap();

    for mode in ["uri", "uwi"] {
        ok(
            &[
                "render", "--checkpoint", "m.ckpt", "--scene", "scene", "--mode", mode, "--medium", "clear.json",
                "--views", "0,5", "--float", "--out", mode,
            ],
            dir.path(),
        );
    }
    for v in ["000", "005"] {
        let uri = read_float_image(&dir.path().join(format!("uri/uri_{v}.f32"))).unwrap();
        let uwi = read_float_image(&dir.path().join(format!("uwi/uwi_{v}.f32"))).unwrap();
        assert_eq!(uri, uwi);
        assert!(uri.data.iter().any(|&x| x > 0.0));
    }
}

#[test]
fn identical_images_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let img = "scene/images/uw_002.f32";
    let out = ok(&["eval", "--image", img, "--gt", img], dir.path());
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["psnr"], 100.0);
    assert_eq!(v["ssim"], 1.0);
}

#[test]
fn render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(&["train", "--scene", "scene", "--iters", "0", "--out", "m.ckpt"], dir.path());
    for out in ["a", "b"] {
        ok(
            &["render", "--checkpoint", "m.ckpt", "--scene", "scene", "--mode", "depth", "--views", "1", "--out", out],
            dir.path(),
        );
    }
    let a = std::fs::read(dir.path().join("a/depth_001.png")).unwrap();
    let b = std::fs::read(dir.path().join("b/depth_001.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn short_run_reports_pruning_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"iterations": 24, "densify_start": 8, "densify_end": 16, "densify_interval": 8,
            "paup_start": 4, "log_interval": 8, "grid_resolution": 8}"#,
    )
    .unwrap();
    ok(&["train", "--scene", "scene", "--config", "cfg.json", "--out", "run.ckpt"], dir.path());

    let report = ok(&["prune-report", "--metrics", "run.ckpt.metrics.jsonl"], dir.path());
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 20 + 1);
    assert_eq!(lines[0]["iteration"], 4);
    assert!(lines.iter().all(|l| l["tau"].as_f64().unwrap() > 0.0));
    assert!(lines[3]["floater_ratio"].is_number());
    assert_eq!(lines[20]["final"], true);

    let eval = ok(&["eval", "--checkpoint", "run.ckpt", "--scene", "scene"], dir.path());
    let v: serde_json::Value = serde_json::from_str(eval.trim()).unwrap();
    assert!(v["psnr"].as_f64().unwrap() > 10.0);
    assert!(v["ssim"].as_f64().unwrap() > 0.0);
    assert!(v["floater_ratio"].is_number());
    assert_eq!(v["views"].as_array().unwrap().len(), 2);
}

#[test]
fn gradient_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--gaussians", "6", "--size", "24"], dir.path());
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["passed"], true);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(dir.path().join("bad.json"), r#"{"iterations": 10, "lr_turbo": 3}"#).unwrap();
    let cases: [&[&str]; 5] = [
        &["train", "--scene", "missing", "--out", "x.ckpt"],
        &["train", "--scene", "scene", "--config", "bad.json", "--out", "x.ckpt"],
        &["train", "--scene", "scene", "--out", "no/such/dir/x.ckpt"],
        &["render", "--checkpoint", "nothing.ckpt", "--scene", "scene", "--mode", "uri", "--out", "r"],
        &["render", "--mode", "sideways"],
    ];
    for args in cases {
        let out = run(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(!err.trim().is_empty(), "{args:?} printed no diagnostic");
    }
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn corrupt_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(&["train", "--scene", "scene", "--iters", "0", "--out", "m.ckpt"], dir.path());
    let p = dir.path().join("m.ckpt");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&p, bytes).unwrap();
    let out = run(&["eval", "--checkpoint", "m.ckpt", "--scene", "scene"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}
