//! `aquasplat`: generate, train, render and evaluate underwater scenes.
//!
//! Exit status is 0 on success, 1 for user errors (bad flags or config,
//! missing or malformed files) and 2 for runtime failures (divergence, a
//! failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use aquasplat::autodiff::{finite_diff_check, sample_params};
use aquasplat::io::checkpoint;
use aquasplat::io::config::load_json;
use aquasplat::io::image::{read_image, write_float_image, write_png};
use aquasplat::io::medium_file;
use aquasplat::io::ply::cloud_from_points;
use aquasplat::io::scene::{read_scene, write_synthetic, SceneData, SynthParams};
use aquasplat::losses::{psnr, ssim};
use aquasplat::paup::GateMode;
use aquasplat::pipeline::ForwardOptions;
use aquasplat::synthetic::{floater_ratio, gradient_check_scene, make_scene};
use aquasplat::trainer::{IterationRecord, MetricsLog, TrainConfig, Trainer};
use aquasplat::{CameraView, Error, Image, Model};

#[derive(Parser)]
#[command(name = "aquasplat", version, about = "Underwater Gaussian splatting with uncertainty pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic underwater scene directory.
    Synth(SynthArgs),
    /// Fit a model to a scene and write a checkpoint.
    Train(TrainArgs),
    /// Render views of a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on held-out views, or compare two images.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
    /// Summarize pruning over a training run's metrics log.
    PruneReport(PruneReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    surface: usize,
    #[arg(long, default_value_t = 25)]
    floaters: usize,
    /// Let attenuation vary linearly across the scene instead of staying
    /// constant.
    #[arg(long)]
    grid_variation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; keys not given keep the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train without uncertainty pruning.
    #[arg(long)]
    no_prune: bool,
    /// Metrics as JSON lines; defaults to the checkpoint path with
    /// `.metrics.jsonl` appended.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resample every view to `WIDTHxHEIGHT` before training.
    #[arg(long, value_parser = parse_size)]
    resize: Option<(usize, usize)>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RenderMode {
    /// Medium-free radiance.
    Uri,
    /// Radiance seen through the learned medium.
    Uwi,
    Depth,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene whose camera poses are rendered.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum)]
    mode: RenderMode,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated view indices; all views by default.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    /// Write 32-bit float images instead of PNG.
    #[arg(long)]
    float: bool,
    /// Replace the checkpoint's medium with this medium file.
    #[arg(long)]
    medium: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "scene", conflicts_with_all = ["image", "gt"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Views to score; the scene's held-out views by default.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    #[arg(long, requires = "gt")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Check a trained model instead of a random one; needs `--scene`.
    #[arg(long, requires = "scene")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    gaussians: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    view: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Sampled parameters per group.
    #[arg(long, default_value_t = 5)]
    per_group: usize,
}

#[derive(Args)]
struct PruneReportArgs {
    /// Metrics log written by `train`.
    #[arg(long)]
    metrics: PathBuf,
}

/// What went wrong, and which exit status it maps to.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DivergenceDetected { .. } | Error::NonDeterministicForward { .. } | Error::TapeMissing => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::User(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|_| format!("bad width '{w}'"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height '{h}'"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::PruneReport(a) => prune_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn require_dir(path: &Path) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::User(format!("{}: not a directory", path.display())))
    }
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::User(format!("{}: no such file", path.display())))
    }
}

/// The parent of an output file must already exist.
fn require_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => require_dir(p),
        _ => Ok(()),
    }
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("report serializes"));
}

fn synth(a: SynthArgs) -> CliResult {
    let scene = make_scene(a.seed, a.surface, a.floaters, a.grid_variation)?;
    let params = SynthParams {
        seed: a.seed,
        n_surface: a.surface,
        n_floaters: a.floaters,
        grid_variation: a.grid_variation,
    };
    write_synthetic(&a.out, &scene, &params)?;
    log::info!(
        "wrote {} views, {} Gaussians ({} floaters) to {}",
        scene.cameras.len(),
        scene.cloud.len(),
        scene.floater_indices.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let base = match a.preset {
                Preset::Desk => TrainConfig::desk(),
                Preset::Full => TrainConfig::full(),
            };
            // Missing keys fall back to the preset, not to the type's default.
            let mut merged = serde_json::to_value(base).expect("config serializes");
            let given: Value = load_json(path)?;
            let Value::Object(given) = given else {
                return Err(CliError::User(format!("{}: config must be a JSON object", path.display())));
            };
            merged
                .as_object_mut()
                .expect("config is an object")
                .extend(given);
            serde_json::from_value(merged).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
        }
        None => match a.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::full(),
        },
    };
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_prune {
        cfg = cfg.without_pruning();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_path(a: &TrainArgs) -> PathBuf {
    a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    })
}

fn write_run(out: &Path, metrics: &Path, model: &Model, cfg: &Value, log: &MetricsLog) -> CliResult {
    checkpoint::save(out, model, Some(cfg))?;
    aquasplat::io::write_atomic(metrics, log.to_json_lines().as_bytes())?;
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    require_dir(&a.scene)?;
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    require_parent(&a.out)?;
    let metrics = metrics_path(&a);
    require_parent(&metrics)?;
    let cfg = train_config(&a)?;
    let cfg_json = serde_json::to_value(&cfg).expect("config serializes");

    let scene = read_scene(&a.scene)?;
    let mut cameras = scene.training_cameras();
    if let Some((w, h)) = a.resize {
        cameras = cameras.iter().map(|c| c.resized(w, h)).collect();
    }
    let truth = scene.regenerate()?;
    let probe = truth.as_ref().map(|t| move |c: &aquasplat::GaussianCloud| floater_ratio(c, t));
    let cloud = cloud_from_points(&scene.points);
    let mut trainer = Trainer::new(cloud, cameras, cfg)?;
    if let Some(p) = &probe {
        trainer = trainer.with_probe(p);
    }
    log::info!(
        "training {} Gaussians on {} views for {} iterations",
        trainer.model.cloud.len(),
        trainer.cameras.len(),
        trainer.config.iterations
    );
    while trainer.iteration() < trainer.config.iterations {
        if let Err(e) = trainer.step() {
            if matches!(e, Error::DivergenceDetected { .. }) {
                write_run(&a.out, &metrics, &trainer.model, &cfg_json, &trainer.log)?;
                log::error!("saved the last finite state to {}", a.out.display());
            }
            return Err(e.into());
        }
        let done = trainer.iteration();
        if done % trainer.config.log_interval == 0 {
            if let Some(c) = trainer.log.checkpoints.last() {
                log::info!(
                    "iter {done}: loss {:.5} psnr {:.2} dB, {} Gaussians",
                    c.mean_loss,
                    c.mean_psnr,
                    c.n_gaussians
                );
            }
        }
    }
    trainer.finalize()?;
    if let Some(f) = &trainer.log.final_prune {
        log::info!("final prune at tau {:.4} removed {} Gaussians", f.tau, f.removed);
    }
    write_run(&a.out, &metrics, &trainer.model, &cfg_json, &trainer.log)?;
    log::info!("wrote {} and {}", a.out.display(), metrics.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model> {
    require_file(path)?;
    Ok(checkpoint::load(path)?.0)
}

fn select_views(scene: &SceneData, views: &[usize], default: Vec<usize>) -> CliResult<Vec<usize>> {
    let views = if views.is_empty() { default } else { views.to_vec() };
    if let Some(&bad) = views.iter().find(|&&v| v >= scene.cameras.len()) {
        return Err(CliError::User(format!(
            "view {bad} does not exist (scene has {})",
            scene.cameras.len()
        )));
    }
    Ok(views)
}

/// Depth scaled by the largest valid depth, for viewing.
fn depth_preview(depth: &Image, valid: &[bool]) -> Image {
    let max = depth
        .data
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d)
        .fold(0.0, f64::max);
    let mut out = depth.clone();
    for (d, &v) in out.data.iter_mut().zip(valid) {
        *d = if v && max > 0.0 { *d / max } else { 0.0 };
    }
    out
}

fn render(a: RenderArgs) -> CliResult {
    require_file(&a.checkpoint)?;
    require_dir(&a.scene)?;
    if let Some(m) = &a.medium {
        require_file(m)?;
    }
    let mut model = load_model(&a.checkpoint)?;
    if let Some(m) = &a.medium {
        model.medium = medium_file::load(m)?;
    }
    let scene = read_scene(&a.scene)?;
    let views = select_views(&scene, &a.views, (0..scene.cameras.len()).collect())?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::User(format!("{}: {e}", a.out.display())))?;
    let tag = match a.mode {
        RenderMode::Uri => "uri",
        RenderMode::Uwi => "uwi",
        RenderMode::Depth => "depth",
    };
    for v in views {
        let r = model.render(&scene.cameras[v])?;
        let img = match a.mode {
            RenderMode::Uri => r.uri,
            RenderMode::Uwi => r.uwi,
            RenderMode::Depth if a.float => r.depth,
            RenderMode::Depth => depth_preview(&r.depth, &r.valid),
        };
        let path = if a.float {
            a.out.join(format!("{tag}_{v:03}.f32"))
        } else {
            a.out.join(format!("{tag}_{v:03}.png"))
        };
        if a.float {
            write_float_image(&path, &img)?;
        } else {
            write_png(&path, &img)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ViewScore {
    view: usize,
    psnr: f64,
    ssim: f64,
}

fn eval(a: EvalArgs) -> CliResult {
    if let (Some(img), Some(gt)) = (&a.image, &a.gt) {
        require_file(img)?;
        require_file(gt)?;
        let (img, gt) = (read_image(img)?, read_image(gt)?);
        print_json(&json!({ "psnr": psnr(&img, &gt)?, "ssim": ssim(&img, &gt)? }));
        return Ok(());
    }
    let (Some(ckpt), Some(scene_dir)) = (&a.checkpoint, &a.scene) else {
        return Err(CliError::User("eval needs --checkpoint and --scene, or --image and --gt".into()));
    };
    require_file(ckpt)?;
    require_dir(scene_dir)?;
    let model = load_model(ckpt)?;
    let scene = read_scene(scene_dir)?;
    let views = select_views(&scene, &a.views, scene.manifest.held_out.clone())?;
    if views.is_empty() {
        return Err(CliError::User("no views to evaluate".into()));
    }
    let mut per_view = Vec::with_capacity(views.len());
    for v in views {
        let cam = &scene.cameras[v];
        let gt = cam.gt_image.as_ref().expect("scene views carry ground truth");
        let r = model.render(cam)?;
        per_view.push(ViewScore {
            view: v,
            psnr: psnr(&r.uwi, gt)?,
            ssim: ssim(&r.uwi, gt)?,
        });
    }
    let k = per_view.len() as f64;
    let floaters = scene.regenerate()?.map(|t| floater_ratio(&model.cloud, &t));
    print_json(&json!({
        "psnr": per_view.iter().map(|s| s.psnr).sum::<f64>() / k,
        "ssim": per_view.iter().map(|s| s.ssim).sum::<f64>() / k,
        "n_gaussians": model.cloud.len(),
        "floater_ratio": floaters,
        "b_infinity": model.medium.b_infinity(),
        "views": per_view,
    }));
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(CliError::User("--step must be positive".into()));
    }
    let (model, cameras): (Model, Vec<CameraView>) = match (&a.checkpoint, &a.scene) {
        (Some(ckpt), Some(dir)) => {
            require_dir(dir)?;
            let model = load_model(ckpt)?;
            (model, read_scene(dir)?.training_cameras())
        }
        _ => gradient_check_scene(a.seed, a.gaussians, a.size)?,
    };
    if a.view >= cameras.len() {
        return Err(CliError::User(format!("view {} does not exist", a.view)));
    }
    // Hard gates are piecewise constant, so differences only see the soft ones.
    let opts = ForwardOptions {
        gate_mode: GateMode::Soft,
        ..ForwardOptions::default()
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
    let params = sample_params(&model, a.per_group, &mut rng);
    let report = finite_diff_check(&model, &cameras, a.view, &opts, &params, a.step, a.tolerance, &mut rng)?;
    print_json(&json!({ "passed": report.passed(), "groups": report.groups, "entries": report.entries }));
    if report.passed() {
        Ok(())
    } else {
        let worst = report
            .groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| format!("{:?} ({:.2e})", g.group, g.max_rel_error))
            .collect::<Vec<_>>()
            .join(", ");
        Err(CliError::Runtime(format!("gradient check failed for {worst}")))
    }
}

#[derive(Serialize)]
struct PruneLine {
    iteration: usize,
    tau: f64,
    n_pruned: usize,
    floater_ratio: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    r#final: bool,
}

fn prune_report(a: PruneReportArgs) -> CliResult {
    require_file(&a.metrics)?;
    let text = std::fs::read_to_string(&a.metrics).map_err(|e| CliError::User(format!("{}: {e}", a.metrics.display())))?;
    let bad = |n: usize, e: &dyn std::fmt::Display| CliError::User(format!("{}: line {n}: {e}", a.metrics.display()));
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut ratios = std::collections::BTreeMap::new();
    let mut last_iteration = 0;
    let mut final_prune = None;
    let mut final_ratio = None;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| bad(n + 1, &e))?;
        if let Some(r) = v.get("iteration") {
            let r: IterationRecord = serde_json::from_value(r.clone()).map_err(|e| bad(n + 1, &e))?;
            last_iteration = last_iteration.max(r.iteration + 1);
            iterations.push(r);
        } else if let Some(c) = v.get("checkpoint") {
            let it = c.get("iteration").and_then(Value::as_u64).ok_or_else(|| bad(n + 1, &"checkpoint without iteration"))?;
            if let Some(f) = c.get("floater_ratio").and_then(Value::as_f64) {
                // The final prune adds a second record at the last iteration.
                ratios.entry(it as usize).or_insert(f);
                final_ratio = Some(f);
            }
        } else if let Some(f) = v.get("final_prune") {
            final_prune = Some((
                f.get("tau").and_then(Value::as_f64).unwrap_or(f64::NAN),
                f.get("removed").and_then(Value::as_u64).unwrap_or(0) as usize,
            ));
        }
    }
    for r in iterations.iter().filter(|r| r.paup_active) {
        print_json(&PruneLine {
            iteration: r.iteration,
            tau: r.tau,
            n_pruned: r.removed,
            floater_ratio: ratios.get(&(r.iteration + 1)).copied(),
            r#final: false,
        });
    }
    if let Some((tau, removed)) = final_prune {
        print_json(&PruneLine {
            iteration: last_iteration,
            tau,
            n_pruned: removed,
            floater_ratio: final_ratio,
            r#final: true,
        });
    }
    Ok(())
}
