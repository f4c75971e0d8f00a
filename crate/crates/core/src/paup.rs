//! Physics-aware uncertainty pruning.
//!
//! Each Gaussian gets a score mixing its rendering instability across nearby
//! views (`U`) with its disagreement with the water model (`P`). A small
//! network maps the score to a pruning probability `m`; Gaussians at or above
//! the 95th percentile of `m` are dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medium::VMGrid;
use crate::mlp::PruneMlp;
use crate::raster::{center_effective_opacity, rasterize, RenderBundle};
use crate::sh::sh_eval;
use crate::types::{sigmoid, CameraView, GaussianCloud, Image, Vec3};

pub const W_ALPHA: f64 = 0.4;
pub const W_COLOR: f64 = 0.6;
pub const NEIGHBOR_VIEWS: usize = 5;
pub const PRUNE_QUANTILE: f64 = 0.95;
/// Share of the cloud kept unconditionally when the threshold would remove
/// every Gaussian.
pub const MIN_KEEP_FRACTION: f64 = 0.05;
pub const GUMBEL_TEMPERATURE: f64 = 1.0;

/// Learnable mixing weights of the score; kept nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneWeights {
    pub w_u: f64,
    pub w_p: f64,
}

impl Default for PruneWeights {
    fn default() -> Self {
        PruneWeights { w_u: 0.5, w_p: 0.5 }
    }
}

impl PruneWeights {
    pub fn clamp_nonnegative(&mut self) {
        self.w_u = self.w_u.max(0.0);
        self.w_p = self.w_p.max(0.0);
    }

    pub fn score(&self, u: f64, p: f64) -> f64 {
        self.w_u * u + self.w_p * p
    }
}

/// Per-Gaussian pruning state for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PusRecord {
    pub u_component: f64,
    pub p_component: f64,
    pub pus: f64,
    pub prune_prob: f64,
    pub keep: bool,
}

pub fn effective_opacity(bundle: &RenderBundle) -> Vec<f64> {
    bundle.effective_opacity()
}

/// Indices of the `k` camera centers closest to view `current` (itself
/// included), nearest first. Fewer than `k` cameras yields all of them.
pub fn nearest_views(cameras: &[CameraView], current: usize, k: usize) -> Result<Vec<usize>> {
    if cameras.len() < 2 {
        return Err(Error::FewerThanKViews {
            required: 2,
            available: cameras.len(),
        });
    }
    let c0 = cameras[current].center();
    let mut order: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.center() - c0).norm(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Population variances of one Gaussian's samples across views.
pub fn sample_variances(alpha: &[f64], colors: &[[f64; 3]]) -> (f64, f64) {
    let k = alpha.len() as f64;
    let mean_a = alpha.iter().sum::<f64>() / k;
    let var_a = alpha.iter().map(|a| (a - mean_a).powi(2)).sum::<f64>() / k;
    let mut mean_c = [0.0; 3];
    for c in colors {
        for ch in 0..3 {
            mean_c[ch] += c[ch] / k;
        }
    }
    let var_c = colors
        .iter()
        .map(|c| (0..3).map(|ch| (c[ch] - mean_c[ch]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / k;
    (var_a, var_c)
}

/// Variance of effective opacity and of view-dependent color over `views`.
/// `current` may supply the already-rendered bundle of one of the views.
pub fn view_variances(
    cloud: &GaussianCloud,
    views: &[&CameraView],
    current: Option<(usize, &RenderBundle)>,
) -> Result<Vec<(f64, f64)>> {
    if views.len() < 2 {
        return Err(Error::FewerThanKViews {
            required: 2,
            available: views.len(),
        });
    }
    let alphas: Vec<Vec<f64>> = views
        .iter()
        .enumerate()
        .map(|(vi, cam)| match current {
            Some((ci, bundle)) if ci == vi => bundle.effective_opacity(),
            _ => center_effective_opacity(cloud, cam),
        })
        .collect();
    let centers: Vec<Vec3> = views.iter().map(|c| c.center()).collect();
    let mut out = Vec::with_capacity(cloud.len());
    let mut a = vec![0.0; views.len()];
    let mut col = vec![[0.0; 3]; views.len()];
    for (gi, g) in cloud.gaussians.iter().enumerate() {
        for (vi, center) in centers.iter().enumerate() {
            a[vi] = alphas[vi][gi];
            let d = g.mean - center;
            let n = d.norm();
            col[vi] = if n > 0.0 { sh_eval(&g.sh, &(d / n)) } else { sh_eval(&g.sh, &Vec3::z()) };
        }
        out.push(sample_variances(&a, &col));
    }
    Ok(out)
}

pub fn uncertainty_component(var_alpha: f64, var_color: f64) -> f64 {
    W_ALPHA * var_alpha + W_COLOR * var_color
}

/// `U / max U`, clamped to `[0, 1]`; all zeros when the maximum is 0.
pub fn normalize_uncertainty(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        u.iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; u.len()]
    }
}

/// `|z − ẑ| + |α (1 − exp(−β̄ z))|`. Without a valid rendered depth only the
/// second term is kept, evaluated at `ẑ`.
pub fn physics_component(alpha: f64, depth_at_center: Option<f64>, z_hat: f64, beta_bar: f64) -> f64 {
    match depth_at_center {
        Some(z) => (z - z_hat).abs() + (alpha * (1.0 - (-beta_bar * z).exp())).abs(),
        None => (alpha * (1.0 - (-beta_bar * z_hat).exp())).abs(),
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn prune_threshold(m: &[f64]) -> f64 {
    quantile(m, PRUNE_QUANTILE)
}

/// Survivors `m < τ`. If nobody survives, the lowest `⌈5%·N⌉` by `m` are
/// kept, ties broken by index.
pub fn hard_keep(m: &[f64], tau: f64) -> Vec<bool> {
    let mut keep: Vec<bool> = m.iter().map(|&v| v < tau).collect();
    if !m.is_empty() && !keep.iter().any(|&k| k) {
        let n_keep = ((MIN_KEEP_FRACTION * m.len() as f64).ceil() as usize).max(1);
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.sort_by(|&a, &b| m[a].total_cmp(&m[b]).then(a.cmp(&b)));
        for &i in &order[..n_keep] {
            keep[i] = true;
        }
    }
    keep
}

/// Logistic noise, the difference of two standard Gumbel draws.
pub fn logistic_noise(rng: &mut impl Rng) -> f64 {
    let mut gumbel = || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    gumbel() - gumbel()
}

/// Relaxed keep weight `σ((τ − m + g)/T)`; at `T = 0` it is the step function.
pub fn soft_keep(m: f64, tau: f64, temperature: f64, noise: f64) -> f64 {
    let x = tau - m + noise;
    if temperature <= 0.0 {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    sigmoid(x / temperature)
}

/// d[`soft_keep`]/dm.
pub fn soft_keep_grad(m: f64, tau: f64, temperature: f64, noise: f64) -> f64 {
    if temperature <= 0.0 {
        return 0.0;
    }
    let s = soft_keep(m, tau, temperature, noise);
    -s * (1.0 - s) / temperature
}

/// How keep weights are produced during a differentiable pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Forward the deterministic threshold, backpropagate the relaxed weight.
    StraightThrough,
    /// Forward and backpropagate the relaxed weight.
    Soft,
    /// Every weight is 1.
    Off,
}

/// Keep weights, their derivative with respect to `m`, and the hard mask.
#[derive(Clone, Debug)]
pub struct Gates {
    pub weights: Vec<f64>,
    pub d_weight_d_m: Vec<f64>,
    pub keep: Vec<bool>,
}

pub fn compute_gates(m: &[f64], tau: f64, mode: GateMode, temperature: f64, noise: &[f64]) -> Gates {
    let keep = hard_keep(m, tau);
    let n = m.len();
    let (weights, d_weight_d_m) = match mode {
        GateMode::Off => (vec![1.0; n], vec![0.0; n]),
        GateMode::StraightThrough => (
            keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            (0..n).map(|i| soft_keep_grad(m[i], tau, temperature, noise[i])).collect(),
        ),
        GateMode::Soft => (
            (0..n).map(|i| soft_keep(m[i], tau, temperature, noise[i])).collect(),
            (0..n).map(|i| soft_keep_grad(m[i], tau, temperature, noise[i])).collect(),
        ),
    };
    Gates {
        weights,
        d_weight_d_m,
        keep,
    }
}

/// Full scoring of a cloud in one view: the records plus τ.
pub fn score_cloud(
    cloud: &GaussianCloud,
    cameras: &[CameraView],
    current: usize,
    bundle: &RenderBundle,
    depth: &Image,
    u_raw: &[f64],
    beta_d: &VMGrid,
    weights: &PruneWeights,
    mlp: &PruneMlp,
) -> (Vec<PusRecord>, f64) {
    let cam = &cameras[current];
    let center = cam.center();
    let mut records: Vec<PusRecord> = cloud
        .gaussians
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let z_hat = (g.mean - center).norm();
            let z = bundle.splat_of(gi).and_then(|s| {
                let (x, y) = s.center_pixel(bundle.width, bundle.height)?;
                let p = y * bundle.width + x;
                bundle.is_valid(p).then(|| depth.data[p])
            });
            let beta = beta_d.query_beta(&g.mean);
            let beta_bar = (beta[0] + beta[1] + beta[2]) / 3.0;
            let p = physics_component(g.opacity(), z, z_hat, beta_bar);
            let pus = weights.score(u_raw[gi], p);
            PusRecord {
                u_component: u_raw[gi],
                p_component: p,
                pus,
                prune_prob: mlp.prob(pus),
                keep: true,
            }
        })
        .collect();
    let m: Vec<f64> = records.iter().map(|r| r.prune_prob).collect();
    let tau = if m.is_empty() { 0.0 } else { prune_threshold(&m) };
    for (r, k) in records.iter_mut().zip(hard_keep(&m, tau)) {
        r.keep = k;
    }
    (records, tau)
}

/// Eval-time pruning: the mask and the surviving cloud.
pub fn prune(cloud: &GaussianCloud, m: &[f64]) -> (Vec<bool>, GaussianCloud, f64) {
    let tau = prune_threshold(m);
    let keep = hard_keep(m, tau);
    let mut survivors = cloud.clone();
    survivors.retain_mask(&keep);
    (keep, survivors, tau)
}

pub fn render_enhanced_uri(cloud: &GaussianCloud, cam: &CameraView, keep_weights: &[f64]) -> Image {
    rasterize(cloud, cam, Some(keep_weights)).uri
}

/// Per-voxel score for the medium prior: every Gaussian's score is splatted
/// trilinearly into the grid and normalized by the accumulated weight. Voxels
/// no Gaussian reaches get weight 1.
pub fn pus_field(grid: &VMGrid, means: &[Vec3], pus: &[f64]) -> Vec<f64> {
    let g = grid.resolution();
    let mut acc = vec![0.0; g * g * g];
    let mut wsum = vec![0.0; g * g * g];
    for (x, &s) in means.iter().zip(pus) {
        for (idx, w, _) in grid.sample(x).corners() {
            if w == 0.0 {
                continue;
            }
            let n = (idx[0] * g + idx[1]) * g + idx[2];
            acc[n] += w * s;
            wsum[n] += w;
        }
    }
    acc.iter()
        .zip(&wsum)
        .map(|(&a, &w)| if w > 0.0 { a / w } else { 1.0 })
        .collect()
}
