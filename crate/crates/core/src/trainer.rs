//! Optimization loop: per-group Adam, positional learning-rate decay,
//! densification, opacity resets, pruning activation and the final prune.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientBundle;
use crate::error::{Error, Result};
use crate::losses::{psnr, LossTerms, LossWeights};
use crate::medium::{Aabb, MediumParams, GRID_RANK, GRID_RESOLUTION};
use crate::mlp::PruneMlp;
use crate::optim::{AdamConfig, AdamState};
use crate::paup::{hard_keep, prune, GateMode, PruneWeights, GUMBEL_TEMPERATURE};
use crate::pipeline::{backward, forward, view_scores, ForwardOptions, Model};
use crate::sh::SH_COEFFS;
use crate::types::{normalize_quat, rotation_matrix, CameraView, Gaussian3D, GaussianCloud, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Positional rate at the first and last iteration, before scaling by the
    /// scene extent; decays exponentially in between.
    pub lr_mean_init: f64,
    pub lr_mean_final: f64,
    /// Rate of the constant SH band; higher bands use a twentieth of it.
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    /// β grids and veiling light.
    pub lr_medium: f64,
    /// Pruning network and score weights.
    pub lr_prune: f64,
    pub densify_start: usize,
    /// Densification stops after this iteration.
    pub densify_end: usize,
    pub densify_interval: usize,
    /// Growth cap per event as a fraction of the cloud.
    pub densify_rate: f64,
    /// Candidates are the Gaussians above this quantile of mean screen-space
    /// gradient.
    pub densify_quantile: f64,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub split_scale_fraction: f64,
    pub opacity_reset_interval: usize,
    /// Iteration at which pruning enters the forward pass.
    pub paup_start: usize,
    /// Off for the ablation without uncertainty pruning.
    pub paup_enabled: bool,
    /// Apply the pruning threshold once more after the last iteration, on the
    /// probabilities averaged over the training views.
    pub final_prune: bool,
    pub gate_mode: GateMode,
    pub temperature: f64,
    pub weights: LossWeights,
    pub beta_prior: [f64; 3],
    pub grid_resolution: usize,
    pub grid_rank: usize,
    /// Veiling light at initialization.
    pub b_inf_init: [f64; 3],
    /// Iterations between summary log entries.
    pub log_interval: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Schedule for the small synthetic scenes: 3000 iterations with every
    /// interval scaled down.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 3000,
            lr_mean_init: 1.6e-4,
            lr_mean_final: 1.6e-6,
            lr_sh: 0.0025,
            lr_opacity: 0.05,
            lr_scale: 0.005,
            lr_rotation: 0.001,
            lr_medium: 0.001,
            lr_prune: 0.001,
            densify_start: 100,
            densify_end: 1500,
            densify_interval: 100,
            densify_rate: 0.01,
            densify_quantile: 0.99,
            split_scale_fraction: 0.01,
            opacity_reset_interval: 1000,
            paup_start: 100,
            paup_enabled: true,
            final_prune: true,
            gate_mode: GateMode::StraightThrough,
            temperature: GUMBEL_TEMPERATURE,
            weights: LossWeights::default(),
            beta_prior: crate::medium::BETA_PRIOR,
            grid_resolution: GRID_RESOLUTION,
            grid_rank: GRID_RANK,
            b_inf_init: [0.5; 3],
            log_interval: 100,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    /// The long schedule for full-size scenes.
    pub fn full() -> Self {
        TrainConfig {
            iterations: 40_000,
            densify_start: 500,
            densify_end: 15_000,
            opacity_reset_interval: 3000,
            paup_start: 500,
            log_interval: 500,
            ..TrainConfig::desk()
        }
    }

    /// Same run without uncertainty pruning.
    pub fn without_pruning(mut self) -> Self {
        self.paup_enabled = false;
        self.final_prune = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [
            self.lr_mean_init,
            self.lr_mean_final,
            self.lr_sh,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
            self.lr_medium,
            self.lr_prune,
        ];
        if !lrs.iter().all(|&l| l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidConfig("every learning rate must be positive".into()));
        }
        if self.iterations > 0 && self.iterations <= self.densify_start {
            return Err(Error::InvalidConfig(format!(
                "iterations ({}) must exceed densify_start ({})",
                self.iterations, self.densify_start
            )));
        }
        if self.densify_interval == 0 || self.opacity_reset_interval == 0 || self.log_interval == 0 {
            return Err(Error::InvalidConfig("intervals must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.densify_rate) || !(0.0..=1.0).contains(&self.densify_quantile) {
            return Err(Error::InvalidConfig("densify rate and quantile must lie in [0, 1]".into()));
        }
        if !self.b_inf_init.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(Error::InvalidConfig("initial veiling light must lie in (0, 1)".into()));
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn forward_options(&self, iteration: usize) -> ForwardOptions {
        ForwardOptions {
            paup_active: self.paup_enabled && iteration >= self.paup_start,
            gate_mode: self.gate_mode,
            temperature: self.temperature,
            weights: self.weights,
            beta_prior: self.beta_prior,
        }
    }

    /// Positional rate at `iteration`, before extent scaling.
    pub fn lr_mean(&self, iteration: usize) -> f64 {
        let t = if self.iterations <= 1 {
            0.0
        } else {
            (iteration as f64 / (self.iterations - 1) as f64).clamp(0.0, 1.0)
        };
        (self.lr_mean_init.ln() * (1.0 - t) + self.lr_mean_final.ln() * t).exp()
    }
}

/// Radius of the camera rig, padded by 10%, as the positional scale.
pub fn scene_extent(cameras: &[CameraView]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Builds the untrained model around an initial cloud.
pub fn initial_model(cloud: GaussianCloud, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Model> {
    if cloud.is_empty() {
        return Err(Error::InvalidConfig("the initial cloud is empty".into()));
    }
    let bbox = Aabb::around(cloud.gaussians.iter().map(|g| g.mean), 0.1)?;
    let medium = MediumParams::new(bbox, cfg.grid_resolution, cfg.grid_rank, cfg.b_inf_init, rng)?;
    Ok(Model {
        cloud,
        medium,
        mlp: PruneMlp::new(rng),
        prune_weights: PruneWeights::default(),
        uncertainty: None,
    })
}

/// Adam states for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptimizer {
    pub config: AdamConfig,
    pub mean: AdamState,
    pub log_scale: AdamState,
    pub rotation: AdamState,
    pub opacity: AdamState,
    pub sh_dc: AdamState,
    pub sh_rest: AdamState,
    pub grid_d: AdamState,
    pub grid_b: AdamState,
    pub b_inf: AdamState,
    pub mlp: AdamState,
    pub prune_weights: AdamState,
}

/// Learning rates of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub mean: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub medium: f64,
    pub prune: f64,
}

/// Applies one Adam step to the values produced by `gather`, written back
/// with `scatter`.
fn step_group(
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    params: Vec<f64>,
    grads: Vec<f64>,
    scatter: impl FnOnce(&[f64]),
) {
    let mut params = params;
    state.step(&mut params, &grads, lr, cfg);
    scatter(&params);
}

impl ModelOptimizer {
    pub fn new(config: AdamConfig) -> Self {
        ModelOptimizer {
            config,
            mean: AdamState::default(),
            log_scale: AdamState::default(),
            rotation: AdamState::default(),
            opacity: AdamState::default(),
            sh_dc: AdamState::default(),
            sh_rest: AdamState::default(),
            grid_d: AdamState::default(),
            grid_b: AdamState::default(),
            b_inf: AdamState::default(),
            mlp: AdamState::default(),
            prune_weights: AdamState::default(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradientBundle, lr: &StepRates) {
        let cfg = self.config;
        let gs = &mut model.cloud.gaussians;
        let gg = &grads.gaussians;
        debug_assert_eq!(gs.len(), gg.len());

        macro_rules! per_gaussian {
            ($state:expr, $lr:expr, $width:expr, |$g:ident| $get:expr, |$d:ident| $dget:expr, |$gm:ident, $vals:ident| $set:expr) => {{
                let params: Vec<f64> = gs.iter().flat_map(|$g| $get).collect();
                let gvals: Vec<f64> = gg.iter().flat_map(|$d| $dget).collect();
                let mut p = params;
                $state.step(&mut p, &gvals, $lr, &cfg);
                for ($gm, $vals) in gs.iter_mut().zip(p.chunks_exact($width)) {
                    $set;
                }
            }};
        }

        per_gaussian!(self.mean, lr.mean, 3, |g| g.mean.iter().copied().collect::<Vec<_>>(),
            |d| d.d_mean.iter().copied().collect::<Vec<_>>(),
            |g, v| g.mean = Vec3::new(v[0], v[1], v[2]));
        per_gaussian!(self.log_scale, lr.scale, 3, |g| g.log_scale.iter().copied().collect::<Vec<_>>(),
            |d| d.d_log_scale.iter().copied().collect::<Vec<_>>(),
            |g, v| g.log_scale = Vec3::new(v[0], v[1], v[2]));
        per_gaussian!(self.rotation, lr.rotation, 4, |g| g.rotation.to_vec(), |d| d.d_rotation.to_vec(), |g, v| {
            g.rotation.copy_from_slice(v);
            normalize_quat(&mut g.rotation);
        });
        per_gaussian!(self.opacity, lr.opacity, 1, |g| vec![g.opacity_logit], |d| vec![d.d_opacity_logit],
            |g, v| g.opacity_logit = v[0]);
        per_gaussian!(self.sh_dc, lr.sh, 3, |g| g.sh[0].to_vec(), |d| d.d_sh[0].to_vec(),
            |g, v| g.sh[0].copy_from_slice(v));
        per_gaussian!(self.sh_rest, lr.sh / 20.0, 3 * (SH_COEFFS - 1),
            |g| g.sh[1..].iter().flatten().copied().collect::<Vec<_>>(),
            |d| d.d_sh[1..].iter().flatten().copied().collect::<Vec<_>>(),
            |g, v| for (k, c) in v.chunks_exact(3).enumerate() {
                g.sh[k + 1].copy_from_slice(c);
            });

        let medium = &mut model.medium;
        for (state, comps, g) in [
            (&mut self.grid_d, &mut medium.grid_d.comps, &grads.medium.grid_d),
            (&mut self.grid_b, &mut medium.grid_b.comps, &grads.medium.grid_b),
        ] {
            // same layout as `VmComponents::to_flat`
            state.step_parts(
                &mut [
                    (&mut comps.bias, &g.bias),
                    (&mut comps.u, &g.u),
                    (&mut comps.m, &g.m),
                    (&mut comps.v, &g.v),
                    (&mut comps.w, &g.w),
                ],
                lr.medium,
                &cfg,
            );
        }
        step_group(&mut self.b_inf, &cfg, lr.medium, medium.b_inf_logit.to_vec(), grads.medium.d_b_inf_logit.to_vec(), |v| {
            medium.b_inf_logit.copy_from_slice(v)
        });

        let net = &mut model.mlp.net;
        step_group(&mut self.mlp, &cfg, lr.prune, net.params().collect(), grads.mlp.params().collect(), |v| {
            for (p, x) in net.params_mut().zip(v) {
                *p = *x;
            }
        });
        let pw = &mut model.prune_weights;
        step_group(&mut self.prune_weights, &cfg, lr.prune, vec![pw.w_u, pw.w_p], vec![grads.d_w_u, grads.d_w_p], |v| {
            pw.w_u = v[0];
            pw.w_p = v[1];
        });
        pw.clamp_nonnegative();
    }

    /// Reorders the per-Gaussian states after a structural edit; new rows
    /// (`None`) start with zero moments.
    pub fn remap_gaussians(&mut self, sources: &[Option<usize>]) {
        self.mean.remap(3, sources);
        self.log_scale.remap(3, sources);
        self.rotation.remap(4, sources);
        self.opacity.remap(1, sources);
        self.sh_dc.remap(3, sources);
        self.sh_rest.remap(3 * (SH_COEFFS - 1), sources);
    }
}

/// Running screen-space gradient statistics between densification events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub visible: Vec<u32>,
    /// Accumulated world-space mean gradient, for the clone offset.
    pub mean_grad: Vec<Vec3>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad_sum: vec![0.0; n],
            visible: vec![0; n],
            mean_grad: vec![Vec3::zeros(); n],
        }
    }

    pub fn accumulate(&mut self, grads: &GradientBundle, visible: impl Fn(usize) -> bool) {
        for (i, g) in grads.gaussians.iter().enumerate() {
            if visible(i) {
                self.grad_sum[i] += g.d_mean2d_norm;
                self.visible[i] += 1;
                self.mean_grad[i] += g.d_mean;
            }
        }
    }

    pub fn average(&self) -> Vec<f64> {
        self.grad_sum
            .iter()
            .zip(&self.visible)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect()
    }
}

/// What a densification event did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub iteration: usize,
    pub cloned: usize,
    pub split: usize,
    pub n_after: usize,
}

/// Grows the cloud where the mean screen-space gradient is largest. Returns
/// the row sources of the new cloud (`None` for fresh Gaussians).
pub fn densify(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &TrainConfig,
    extent: f64,
    rng: &mut impl Rng,
) -> (Vec<Option<usize>>, DensifyReport) {
    let n = cloud.len();
    let avg = stats.average();
    let mut report = DensifyReport::default();
    let identity: Vec<Option<usize>> = (0..n).map(Some).collect();
    let seen: Vec<f64> = avg.iter().copied().filter(|&a| a > 0.0).collect();
    if seen.is_empty() {
        report.n_after = n;
        return (identity, report);
    }
    let threshold = crate::paup::quantile(&seen, cfg.densify_quantile);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| avg[i] > 0.0 && avg[i] >= threshold).collect();
    candidates.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
    let cap = ((cfg.densify_rate * n as f64).ceil() as usize).max(1);
    candidates.truncate(cap);
    if candidates.is_empty() {
        report.n_after = n;
        return (identity, report);
    }

    let mut split = vec![false; n];
    let mut added: Vec<(Gaussian3D, Option<usize>)> = Vec::new();
    for &i in &candidates {
        let g = cloud.gaussians[i].clone();
        let s = g.scale();
        if s.max() <= cfg.split_scale_fraction * extent {
            // clone, nudged down the accumulated gradient
            let mut c = g.clone();
            let dir = stats.mean_grad[i];
            if dir.norm() > 0.0 {
                c.mean -= dir.normalize() * s.max();
            }
            added.push((c, Some(i)));
            report.cloned += 1;
        } else {
            // split into two samples of the parent, each 1.6× smaller
            split[i] = true;
            let r = rotation_matrix(&g.rotation);
            for _ in 0..2 {
                let z = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
                let mut c = g.clone();
                c.mean = g.mean + r * s.component_mul(&z);
                c.log_scale = g.log_scale.add_scalar(-(1.6f64).ln());
                added.push((c, None));
            }
            report.split += 1;
        }
    }
    let mut gaussians = Vec::with_capacity(n + added.len());
    let mut sources = Vec::with_capacity(n + added.len());
    for (i, g) in cloud.gaussians.drain(..).enumerate() {
        if !split[i] {
            gaussians.push(g);
            sources.push(Some(i));
        }
    }
    for (g, src) in added {
        gaussians.push(g);
        sources.push(src);
    }
    cloud.gaussians = gaussians;
    cloud.generation += 1;
    report.n_after = cloud.len();
    (sources, report)
}

/// Caps every opacity at 0.01.
pub fn opacity_reset(cloud: &mut GaussianCloud) {
    let cap = crate::types::logit(0.01);
    for g in &mut cloud.gaussians {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
}

/// One training iteration's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub view: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub psnr: f64,
    pub n_gaussians: usize,
    pub paup_active: bool,
    /// Pruning threshold and the number of Gaussians the hard threshold
    /// removes this iteration, with how many of those sit exactly at τ.
    pub tau: f64,
    pub removed: usize,
    pub ties: usize,
}

/// Periodic summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub mean_loss: f64,
    pub mean_psnr: f64,
    pub n_gaussians: usize,
    pub floater_ratio: Option<f64>,
    pub b_infinity: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalPruneReport {
    pub tau: f64,
    pub removed: usize,
    pub n_after: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub iterations: Vec<IterationRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub densify: Vec<DensifyReport>,
    pub opacity_resets: Vec<usize>,
    pub final_prune: Option<FinalPruneReport>,
}

impl MetricsLog {
    /// One JSON object per line: iterations, then summaries and events.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for r in &self.iterations {
            push(serde_json::json!({ "iteration": r }));
        }
        for c in &self.checkpoints {
            push(serde_json::json!({ "checkpoint": c }));
        }
        for d in &self.densify {
            push(serde_json::json!({ "densify": d }));
        }
        for r in &self.opacity_resets {
            push(serde_json::json!({ "opacity_reset": r }));
        }
        if let Some(f) = &self.final_prune {
            push(serde_json::json!({ "final_prune": f }));
        }
        out
    }
}

/// Optional per-checkpoint measurement of the cloud, such as a floater ratio
/// against known geometry.
pub type CloudProbe<'a> = &'a dyn Fn(&GaussianCloud) -> f64;

/// Training state. Each call to [`Trainer::step`] runs one iteration; on
/// divergence the model is left at its last finite state.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub cameras: Vec<CameraView>,
    pub optimizer: ModelOptimizer,
    pub log: MetricsLog,
    extent: f64,
    iteration: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    densify_stats: DensifyStats,
    probe: Option<CloudProbe<'a>>,
}

impl<'a> Trainer<'a> {
    /// `cameras` are the training views; all must carry a ground-truth image.
    pub fn new(cloud: GaussianCloud, cameras: Vec<CameraView>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if cameras.len() < 2 {
            return Err(Error::FewerThanKViews {
                required: 2,
                available: cameras.len(),
            });
        }
        for c in &cameras {
            c.validate()?;
            if c.gt_image.is_none() {
                return Err(Error::InvalidConfig(format!("view {} has no ground-truth image", c.view_id)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = initial_model(cloud, &config, &mut rng)?;
        Ok(Self::resume(model, cameras, config, rng))
    }

    fn resume(model: Model, cameras: Vec<CameraView>, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let n = model.cloud.len();
        Trainer {
            extent: scene_extent(&cameras),
            optimizer: ModelOptimizer::new(config.adam),
            config,
            model,
            cameras,
            log: MetricsLog::default(),
            iteration: 0,
            rng,
            order: Vec::new(),
            densify_stats: DensifyStats::new(n),
            probe: None,
        }
    }

    pub fn with_probe(mut self, probe: CloudProbe<'a>) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn scene_extent(&self) -> f64 {
        self.extent
    }

    fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.cameras.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().expect("nonempty view order")
    }

    pub fn rates(&self, iteration: usize) -> StepRates {
        let c = &self.config;
        StepRates {
            mean: c.lr_mean(iteration) * self.extent,
            sh: c.lr_sh,
            opacity: c.lr_opacity,
            scale: c.lr_scale,
            rotation: c.lr_rotation,
            medium: c.lr_medium,
            prune: c.lr_prune,
        }
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration;
        let view = self.next_view();
        let opts = self.config.forward_options(it);
        let tape = forward(&self.model, &self.cameras, view, &opts, None, &mut self.rng)?;
        if !tape.total.is_finite() {
            return Err(Error::DivergenceDetected {
                iteration: it,
                reason: format!("loss is {}", tape.total),
            });
        }
        let grads = backward(&self.model, &self.cameras, &tape)?;
        if !grads.is_finite() {
            return Err(Error::DivergenceDetected {
                iteration: it,
                reason: "non-finite gradient".into(),
            });
        }
        let n = self.model.cloud.len();
        let (removed, ties) = if opts.paup_active {
            let m: Vec<f64> = tape.records.iter().map(|r| r.prune_prob).collect();
            let tau = tape.tau();
            let gone: Vec<usize> = (0..n).filter(|&i| !tape.gates.keep[i]).collect();
            (gone.len(), gone.iter().filter(|&&i| m[i] == tau).count())
        } else {
            (0, 0)
        };
        let gt = self.cameras[view].gt_image.as_ref().expect("validated ground truth");
        self.log.iterations.push(IterationRecord {
            iteration: it,
            view: self.cameras[view].view_id,
            terms: tape.terms,
            total: tape.total,
            psnr: psnr(&tape.uwi, gt)?,
            n_gaussians: n,
            paup_active: opts.paup_active,
            tau: tape.tau(),
            removed,
            ties,
        });
        self.densify_stats
            .accumulate(&grads, |i| tape.base.splat_of(i).is_some());

        let rates = self.rates(it);
        self.optimizer.step(&mut self.model, &grads, &rates);
        self.model.uncertainty = None;
        self.iteration += 1;
        let done = self.iteration;

        let c = &self.config;
        if done >= c.densify_start && done <= c.densify_end && done % c.densify_interval == 0 && done < c.iterations {
            let (sources, mut report) =
                densify(&mut self.model.cloud, &self.densify_stats, c, self.extent, &mut self.rng);
            report.iteration = done;
            if report.cloned + report.split > 0 {
                self.optimizer.remap_gaussians(&sources);
                self.log.densify.push(report);
            }
            self.densify_stats = DensifyStats::new(self.model.cloud.len());
        }
        if done % c.opacity_reset_interval == 0 && done < c.iterations {
            opacity_reset(&mut self.model.cloud);
            let n = self.model.cloud.len();
            self.optimizer.opacity = AdamState::new(n);
            self.log.opacity_resets.push(done);
        }
        if done % c.log_interval == 0 || done == c.iterations {
            self.push_checkpoint_record();
        }
        Ok(())
    }

    fn push_checkpoint_record(&mut self) {
        let window = self.config.log_interval.min(self.log.iterations.len()).max(1);
        let recent = &self.log.iterations[self.log.iterations.len().saturating_sub(window)..];
        let k = recent.len().max(1) as f64;
        self.log.checkpoints.push(CheckpointRecord {
            iteration: self.iteration,
            mean_loss: recent.iter().map(|r| r.total).sum::<f64>() / k,
            mean_psnr: recent.iter().map(|r| r.psnr).sum::<f64>() / k,
            n_gaussians: self.model.cloud.len(),
            floater_ratio: self.probe.map(|p| p(&self.model.cloud)),
            b_infinity: self.model.medium.b_infinity(),
        });
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Averages pruning probabilities and uncertainty over the training views,
    /// stores the uncertainty for rendering and, when enabled, drops the
    /// Gaussians at or above the threshold.
    pub fn finalize(&mut self) -> Result<()> {
        if self.iteration == 0 || !self.config.paup_enabled {
            return Ok(());
        }
        let n = self.model.cloud.len();
        let mut m_sum = vec![0.0; n];
        let mut u_sum = vec![0.0; n];
        for v in 0..self.cameras.len() {
            let (m, u) = view_scores(&self.model, &self.cameras, v)?;
            for i in 0..n {
                m_sum[i] += m[i];
                u_sum[i] += u[i];
            }
        }
        let k = self.cameras.len() as f64;
        let m: Vec<f64> = m_sum.iter().map(|s| s / k).collect();
        let u: Vec<f64> = u_sum.iter().map(|s| s / k).collect();
        if self.config.final_prune {
            let (mask, survivors, tau) = prune(&self.model.cloud, &m);
            debug_assert_eq!(mask, hard_keep(&m, tau));
            self.model.cloud = survivors;
            let u_kept: Vec<f64> = u.iter().zip(&mask).filter(|(_, &k)| k).map(|(&u, _)| u).collect();
            self.model.uncertainty = Some(u_kept);
            self.log.final_prune = Some(FinalPruneReport {
                tau,
                removed: n - self.model.cloud.len(),
                n_after: self.model.cloud.len(),
            });
            let sources: Vec<Option<usize>> =
                mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| Some(i)).collect();
            self.optimizer.remap_gaussians(&sources);
            self.push_checkpoint_record();
        } else {
            self.model.uncertainty = Some(u);
        }
        Ok(())
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub log: MetricsLog,
}

/// Full run: every iteration, then the final prune.
pub fn train(
    cloud: GaussianCloud,
    cameras: Vec<CameraView>,
    config: TrainConfig,
    probe: Option<CloudProbe<'_>>,
) -> Result<TrainOutput> {
    let mut t = Trainer::new(cloud, cameras, config)?;
    if let Some(p) = probe {
        t = t.with_probe(p);
    }
    t.run()?;
    t.finalize()?;
    Ok(TrainOutput {
        model: t.model,
        log: t.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ply::{cloud_from_points, points_from_cloud};
    use crate::raster::rasterize;
    use crate::synthetic::make_scene;

    fn small_run(iterations: usize, seed: u64) -> (TrainOutput, crate::synthetic::SyntheticScene) {
        let scene = make_scene(11, 100, 4, false).unwrap();
        let cloud = cloud_from_points(&points_from_cloud(&scene.cloud, None));
        let cams: Vec<CameraView> = scene.training_views().iter().map(|&v| scene.cameras[v].clone()).collect();
        let cfg = TrainConfig {
            iterations,
            densify_start: 20,
            densify_end: 60,
            densify_interval: 20,
            opacity_reset_interval: 1000,
            paup_start: 10,
            log_interval: 20,
            grid_resolution: 8,
            grid_rank: 2,
            seed,
            ..TrainConfig::desk()
        };
        (train(cloud, cams, cfg, None).unwrap(), scene)
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let scene = make_scene(1, 64, 0, false).unwrap();
        let cloud = cloud_from_points(&points_from_cloud(&scene.cloud, None));
        let cams = scene.cameras.clone();
        let cfg = TrainConfig {
            iterations: 0,
            grid_resolution: 4,
            grid_rank: 1,
            ..TrainConfig::desk()
        };
        let out = train(cloud.clone(), cams, cfg.clone(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        assert_eq!(out.model, initial_model(cloud, &cfg, &mut rng).unwrap());
        assert!(out.log.iterations.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_logs_and_models() {
        let (a, _) = small_run(40, 5);
        let (b, _) = small_run(40, 5);
        assert_eq!(a.log.to_json_lines(), b.log.to_json_lines());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn loss_falls_and_quaternions_stay_unit() {
        let (out, _) = small_run(80, 2);
        let first: f64 = out.log.iterations[..10].iter().map(|r| r.total).sum();
        let last: f64 = out.log.iterations[70..].iter().map(|r| r.total).sum();
        assert!(last < first, "{first} -> {last}");
        for g in &out.model.cloud.gaussians {
            let n: f64 = g.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pruning_never_exceeds_the_quantile_budget() {
        let (out, _) = small_run(40, 3);
        for r in out.log.iterations.iter().filter(|r| r.paup_active) {
            let budget = (0.05 * r.n_gaussians as f64).ceil() as usize;
            assert!(r.removed <= budget + r.ties, "{r:?}");
        }
    }

    #[test]
    fn opacity_reset_caps_only_opaque_gaussians() {
        let mut cloud = GaussianCloud::new(vec![
            Gaussian3D::isotropic(Vec3::zeros(), 0.1, 0.9, [0.5; 3]),
            Gaussian3D::isotropic(Vec3::zeros(), 0.1, 0.005, [0.5; 3]),
        ]);
        opacity_reset(&mut cloud);
        assert!((cloud.gaussians[0].opacity() - 0.01).abs() < 1e-12);
        assert!((cloud.gaussians[1].opacity() - 0.005).abs() < 1e-12);
    }

    fn stats_for(n: usize, hot: &[(usize, f64)]) -> DensifyStats {
        let mut s = DensifyStats::new(n);
        for &(i, g) in hot {
            s.grad_sum[i] = g;
            s.visible[i] = 1;
            s.mean_grad[i] = Vec3::new(1.0, 0.0, 0.0);
        }
        s
    }

    fn grid_cloud(n: usize, sigma: f64) -> GaussianCloud {
        GaussianCloud::new(
            (0..n)
                .map(|i| Gaussian3D::isotropic(Vec3::new(i as f64 * 0.05, 0.0, 3.0), sigma, 0.5, [0.5; 3]))
                .collect(),
        )
    }

    #[test]
    fn zero_gradients_do_not_densify() {
        let mut cloud = grid_cloud(10, 0.05);
        let before = cloud.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (src, rep) = densify(&mut cloud, &DensifyStats::new(10), &TrainConfig::desk(), 1.0, &mut rng);
        assert_eq!(cloud, before);
        assert_eq!(src, (0..10).map(Some).collect::<Vec<_>>());
        assert_eq!(rep.cloned + rep.split, 0);
    }

    #[test]
    fn one_dominant_gradient_densifies_exactly_once() {
        let cfg = TrainConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hot = vec![(3, 10.0)];
        hot.extend((0..10).filter(|&i| i != 3).map(|i| (i, 0.01)));

        let mut small = grid_cloud(10, 0.001);
        let (_, rep) = densify(&mut small, &stats_for(10, &hot), &cfg, 1.0, &mut rng);
        assert_eq!((rep.cloned, rep.split, small.len()), (1, 0, 11));

        let mut large = grid_cloud(10, 0.2);
        let (src, rep) = densify(&mut large, &stats_for(10, &hot), &cfg, 1.0, &mut rng);
        assert_eq!((rep.cloned, rep.split, large.len()), (0, 1, 11));
        assert_eq!(src.iter().filter(|s| s.is_none()).count(), 2);
        assert!(!src.contains(&Some(3)));
    }

    #[test]
    fn split_roughly_preserves_the_rendered_image() {
        let cam = CameraView::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, -1.0, 0.0), 32.0, 32, 32, 0);
        let mut cloud = GaussianCloud::new(vec![Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 3.0), 0.3, 0.6, [0.8, 0.4, 0.2])]);
        let before = rasterize(&cloud, &cam, None).uri;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, rep) = densify(&mut cloud, &stats_for(1, &[(0, 1.0)]), &TrainConfig::desk(), 1.0, &mut rng);
        assert_eq!(rep.split, 1);
        let after = rasterize(&cloud, &cam, None).uri;
        let l1 = crate::losses::l1(&before, &after).unwrap();
        assert!(l1 < 0.05, "{l1}");
    }

    #[test]
    fn learning_rate_decays_exponentially() {
        let c = TrainConfig::desk();
        assert!((c.lr_mean(0) - 1.6e-4).abs() < 1e-18);
        assert!((c.lr_mean(c.iterations - 1) - 1.6e-6).abs() < 1e-18);
        let mid = c.lr_mean((c.iterations - 1) / 2);
        assert!((mid - 1.6e-5).abs() / 1.6e-5 < 1e-2);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig::desk();
        c.lr_opacity = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            iterations: 50,
            ..TrainConfig::desk()
        };
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iterations": 10, "bogus": 1}"#).is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"iterations": 4000}"#).unwrap();
        assert_eq!(parsed.iterations, 4000);
        assert_eq!(parsed.lr_opacity, 0.05);
    }

    #[test]
    fn final_prune_removes_at_most_the_top_share() {
        let (out, _) = small_run(40, 4);
        let fp = out.log.final_prune.clone().unwrap();
        let before = fp.n_after + fp.removed;
        assert!(fp.removed <= (0.05 * before as f64).ceil() as usize + 1);
        assert_eq!(out.model.uncertainty.as_ref().unwrap().len(), out.model.cloud.len());
    }
}
