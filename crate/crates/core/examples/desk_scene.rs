//! Trains on the synthetic desk scene and reports held-out quality.
//!
//! `cargo run --release -p aquasplat --example desk_scene -- [iterations] [--no-prune]`

use std::time::Instant;

use aquasplat::io::ply::{cloud_from_points, points_from_cloud};
use aquasplat::losses::psnr;
use aquasplat::synthetic::{floater_ratio, make_scene};
use aquasplat::trainer::{train, TrainConfig};

fn main() -> aquasplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let no_prune = args.iter().any(|a| a == "--no-prune");
    let scene = make_scene(0, 500, 25, false)?;
    let init = cloud_from_points(&points_from_cloud(&scene.cloud, None));
    let cams = scene.training_views().iter().map(|&v| scene.cameras[v].clone()).collect();
    let mut cfg = TrainConfig { iterations, ..TrainConfig::desk() };
    if no_prune {
        cfg = cfg.without_pruning();
    }
    let before = floater_ratio(&init, &scene);
    let probe = |c: &aquasplat::GaussianCloud| floater_ratio(c, &scene);
    let start = Instant::now();
    let out = train(init, cams, cfg, Some(&probe))?;
    let secs = start.elapsed().as_secs_f64();
    for c in &out.log.checkpoints {
        println!(
            "iter {:5}  loss {:.5}  psnr {:6.2}  n {:4}  floaters {:5.2}%  b_inf {:.3?}",
            c.iteration, c.mean_loss, c.mean_psnr, c.n_gaussians, c.floater_ratio.unwrap_or(f64::NAN), c.b_infinity
        );
    }
    for &v in &scene.held_out {
        let r = out.model.render(&scene.cameras[v])?;
        println!("held-out view {v}: psnr {:.2} dB", psnr(&r.uwi, &scene.uw_images[v])?);
    }
    let field = out.model.medium.grid_d.dense();
    let g3 = field.value.len() / 3;
    let mean: Vec<f64> = (0..3).map(|c| field.value[c * g3..(c + 1) * g3].iter().sum::<f64>() / g3 as f64).collect();
    println!("beta_D mean {mean:.4?}  b_inf {:.4?}", out.model.medium.b_infinity());
    println!(
        "floaters {before:.2}% -> {:.2}%   time {secs:.1} s ({:.1} ms/iter)",
        floater_ratio(&out.model.cloud, &scene),
        1e3 * secs / iterations.max(1) as f64
    );
    Ok(())
}
