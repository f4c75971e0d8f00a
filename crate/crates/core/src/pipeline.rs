//! One differentiable pass over a training view.
//!
//! Forward order: base render → multi-view uncertainty → uncertainty-weighted
//! depth → physics score → pruning probabilities and gates → enhanced render →
//! underwater composition → losses. The returned [`Tape`] holds everything
//! [`backward`] needs. Scores, threshold, noise and the voxel score field are
//! constants to the backward pass; gradients reach the pruning network only
//! through the keep weights and the sparsity term.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientBundle;
use crate::error::{Error, Result};
use crate::losses::{
    beta_data_term, beta_data_term_backward_into, factor_norm_backward, loss_img, loss_img_backward,
    loss_papsl, loss_papsl_backward, loss_z, loss_z_backward, LossTerms, LossWeights,
};
use crate::medium::{compose_backward_dense, scratch, compose_underwater, compose_underwater_dense, DenseField, MediumParams, BETA_PRIOR};
use crate::mlp::PruneMlp;
use crate::paup::{
    compute_gates, logistic_noise, nearest_views, normalize_uncertainty, pus_field, score_cloud,
    uncertainty_component, view_variances, GateMode, Gates, PruneWeights, PusRecord, GUMBEL_TEMPERATURE,
    NEIGHBOR_VIEWS,
};
use crate::raster::{blend_backward, projection_backward, rasterize, render_depth, RenderBundle};
use crate::types::{CameraView, GaussianCloud, Image};

/// Everything that is learned.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub medium: MediumParams,
    pub mlp: PruneMlp,
    pub prune_weights: PruneWeights,
    /// Normalized per-Gaussian uncertainty used for depth at render time.
    pub uncertainty: Option<Vec<f64>>,
}

impl Model {
    /// Renders one view: `(radiance, depth, valid mask, underwater image)`.
    pub fn render(&self, cam: &CameraView) -> Result<RenderOutput> {
        let bundle = rasterize(&self.cloud, cam, None);
        let u = match &self.uncertainty {
            Some(u) if u.len() == self.cloud.len() => u.clone(),
            _ => vec![0.0; self.cloud.len()],
        };
        let depth = render_depth(&bundle, &u);
        let valid: Vec<bool> = (0..cam.width * cam.height).map(|p| bundle.is_valid(p)).collect();
        let uwi = compose_underwater(&bundle.uri, &depth, &valid, &self.medium, cam)?;
        Ok(RenderOutput {
            uri: bundle.uri,
            depth,
            valid,
            uwi,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub uri: Image,
    pub depth: Image,
    pub valid: Vec<bool>,
    pub uwi: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub paup_active: bool,
    pub gate_mode: GateMode,
    pub temperature: f64,
    pub weights: LossWeights,
    pub beta_prior: [f64; 3],
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            paup_active: true,
            gate_mode: GateMode::StraightThrough,
            temperature: GUMBEL_TEMPERATURE,
            weights: LossWeights::default(),
            beta_prior: BETA_PRIOR,
        }
    }
}

/// Per-iteration statistics that the backward pass treats as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenStats {
    pub u_raw: Vec<f64>,
    pub u_norm: Vec<f64>,
    pub p: Vec<f64>,
    pub tau: f64,
    pub noise: Vec<f64>,
    pub pus_field: Vec<f64>,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    view: usize,
    n_gaussians: usize,
    generation: u64,
    stats: FrozenStats,
    paup_active: bool,
    gate_mode: GateMode,
    weights: LossWeights,
    beta_prior: [f64; 3],
    pub base: RenderBundle,
    /// Present only when pruning is active; otherwise the base bundle doubles
    /// as the enhanced one.
    pub enhanced: Option<RenderBundle>,
    pub records: Vec<PusRecord>,
    pub gates: Gates,
    pub depth: Image,
    pub valid: Vec<bool>,
    pub uwi: Image,
    field_d: DenseField,
    field_b: DenseField,
    pub terms: LossTerms,
    pub total: f64,
}

impl Tape {
    pub fn stats(&self) -> &FrozenStats {
        &self.stats
    }

    pub fn view(&self) -> usize {
        self.view
    }

    pub fn enhanced_uri(&self) -> &Image {
        &self.enhanced.as_ref().unwrap_or(&self.base).uri
    }

    pub fn tau(&self) -> f64 {
        self.stats.tau
    }
}

fn compute_stats(
    model: &Model,
    cameras: &[CameraView],
    view: usize,
    base: &RenderBundle,
    gate_mode: GateMode,
    rng: &mut impl Rng,
) -> Result<(FrozenStats, Image)> {
    let cloud = &model.cloud;
    let neighbors = nearest_views(cameras, view, NEIGHBOR_VIEWS)?;
    let views: Vec<&CameraView> = neighbors.iter().map(|&i| &cameras[i]).collect();
    let self_slot = neighbors.iter().position(|&i| i == view);
    let variances = view_variances(cloud, &views, self_slot.map(|s| (s, base)))?;
    let u_raw: Vec<f64> = variances.iter().map(|&(a, c)| uncertainty_component(a, c)).collect();
    let u_norm = normalize_uncertainty(&u_raw);
    let depth = render_depth(base, &u_norm);
    let (records, tau) = score_cloud(
        cloud,
        cameras,
        view,
        base,
        &depth,
        &u_raw,
        &model.medium.grid_d,
        &model.prune_weights,
        &model.mlp,
    );
    let p: Vec<f64> = records.iter().map(|r| r.p_component).collect();
    let noise = match gate_mode {
        GateMode::Off => vec![0.0; cloud.len()],
        _ => (0..cloud.len()).map(|_| logistic_noise(rng)).collect(),
    };
    let means: Vec<_> = cloud.gaussians.iter().map(|g| g.mean).collect();
    let pus: Vec<f64> = records.iter().map(|r| r.pus).collect();
    let field = pus_field(&model.medium.grid_d, &means, &pus);
    Ok((
        FrozenStats {
            u_raw,
            u_norm,
            p,
            tau,
            noise,
            pus_field: field,
        },
        depth,
    ))
}

fn inactive_stats(model: &Model) -> FrozenStats {
    let n = model.cloud.len();
    let g = model.medium.grid_d.resolution();
    FrozenStats {
        u_raw: vec![0.0; n],
        u_norm: vec![0.0; n],
        p: vec![0.0; n],
        tau: 0.0,
        noise: vec![0.0; n],
        pus_field: vec![1.0; g * g * g],
    }
}

/// Pruning probabilities and normalized uncertainty of every Gaussian as seen
/// from `cameras[view]`, without gates or losses.
pub fn view_scores(model: &Model, cameras: &[CameraView], view: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let cam = cameras
        .get(view)
        .ok_or_else(|| Error::InvalidConfig(format!("view {view} out of range")))?;
    let base = rasterize(&model.cloud, cam, None);
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (stats, _) = compute_stats(model, cameras, view, &base, GateMode::Off, &mut unused)?;
    let m = (0..model.cloud.len())
        .map(|i| model.mlp.prob(model.prune_weights.score(stats.u_raw[i], stats.p[i])))
        .collect();
    Ok((m, stats.u_norm))
}

/// Runs the full two-branch forward pass on `cameras[view]` against its
/// ground-truth image. `frozen` replaces the per-iteration statistics.
pub fn forward(
    model: &Model,
    cameras: &[CameraView],
    view: usize,
    opts: &ForwardOptions,
    frozen: Option<&FrozenStats>,
    rng: &mut impl Rng,
) -> Result<Tape> {
    let cam = cameras
        .get(view)
        .ok_or_else(|| Error::InvalidConfig(format!("view {view} out of range")))?;
    let gt = cam
        .gt_image
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("view {view} has no ground-truth image")))?;
    cam.validate()?;
    if model.cloud.is_empty() {
        return Err(Error::InvalidConfig("cannot render an empty cloud".into()));
    }
    let n = model.cloud.len();
    let w = opts.weights;
    let base = rasterize(&model.cloud, cam, None);

    let stats = match (frozen, opts.paup_active) {
        (Some(f), _) => {
            let g = model.medium.grid_d.resolution();
            if f.u_raw.len() != n || f.pus_field.len() != g * g * g {
                return Err(Error::InvalidConfig("frozen statistics do not match the model".into()));
            }
            f.clone()
        }
        (None, true) => compute_stats(model, cameras, view, &base, opts.gate_mode, rng)?.0,
        (None, false) => inactive_stats(model),
    };
    let depth = render_depth(&base, &stats.u_norm);
    let valid: Vec<bool> = (0..cam.width * cam.height).map(|p| base.is_valid(p)).collect();

    let records: Vec<PusRecord> = (0..n)
        .map(|i| {
            let pus = model.prune_weights.score(stats.u_raw[i], stats.p[i]);
            PusRecord {
                u_component: stats.u_raw[i],
                p_component: stats.p[i],
                pus,
                prune_prob: model.mlp.prob(pus),
                keep: true,
            }
        })
        .collect();
    let m: Vec<f64> = records.iter().map(|r| r.prune_prob).collect();
    let mode = if opts.paup_active { opts.gate_mode } else { GateMode::Off };
    let gates = compute_gates(&m, stats.tau, mode, opts.temperature, &stats.noise);
    let mut records = records;
    for (r, &k) in records.iter_mut().zip(&gates.keep) {
        r.keep = k || mode == GateMode::Off;
    }

    let enhanced = (mode != GateMode::Off).then(|| rasterize(&model.cloud, cam, Some(&gates.weights)));
    let enh_uri = &enhanced.as_ref().unwrap_or(&base).uri;
    let field_d = model.medium.grid_d.dense();
    let field_b = model.medium.grid_b.dense();
    let uwi = compose_underwater_dense(enh_uri, &depth, &valid, &model.medium, (&field_d, &field_b), cam)?;
    let terms = LossTerms {
        img: loss_img(&uwi, gt, w.lambda_ssim)?,
        papsl: if opts.paup_active {
            loss_papsl(&base.uri, enh_uri, &m, &model.mlp.net, &w)?
        } else {
            0.0
        },
        beta: beta_data_term(&field_d, &stats.pus_field, &opts.beta_prior)?
            + beta_data_term(&field_b, &stats.pus_field, &opts.beta_prior)?
            + w.lambda_r
                * (model.medium.grid_d.comps.factor_sq_norm() + model.medium.grid_b.comps.factor_sq_norm()),
        z: loss_z(&depth, &base, &stats.u_norm),
    };
    let total = terms.total(&w);
    Ok(Tape {
        view,
        n_gaussians: n,
        generation: model.cloud.generation,
        stats,
        paup_active: opts.paup_active,
        gate_mode: mode,
        weights: w,
        beta_prior: opts.beta_prior,
        base,
        enhanced,
        records,
        gates,
        depth,
        valid,
        uwi,
        field_d,
        field_b,
        terms,
        total,
    })
}

fn scale_image(img: &mut Image, s: f64) {
    img.data.iter_mut().for_each(|v| *v *= s);
}

fn add_image(dst: &mut Image, src: &Image) {
    for (a, b) in dst.data.iter_mut().zip(&src.data) {
        *a += b;
    }
}

/// Reverse pass of [`forward`].
pub fn backward(model: &Model, cameras: &[CameraView], tape: &Tape) -> Result<GradientBundle> {
    if tape.n_gaussians != model.cloud.len() || tape.generation != model.cloud.generation {
        return Err(Error::TapeMissing);
    }
    let cam = cameras.get(tape.view).ok_or(Error::TapeMissing)?;
    let gt = cam.gt_image.as_ref().ok_or(Error::TapeMissing)?;
    let w = tape.weights;
    let mut grads = GradientBundle::zeros_like(model);

    // image term and composition
    let d_uwi = loss_img_backward(&tape.uwi, gt, w.lambda_ssim)?;
    let enh_uri = tape.enhanced_uri();
    let comp = compose_backward_dense(
        enh_uri,
        &tape.depth,
        &tape.valid,
        &model.medium,
        (&tape.field_d, &tape.field_b),
        cam,
        &d_uwi,
    )?;
    grads.medium.d_b_inf_logit = comp.d_b_inf_logit;
    let mut d_enh = comp.d_radiance;
    let mut d_depth = comp.d_depth;

    // depth consistency
    let (mut dz_depth, mut dz_center) = loss_z_backward(&tape.depth, &tape.base, &tape.stats.u_norm);
    scale_image(&mut dz_depth, w.lambda_z);
    dz_center.iter_mut().for_each(|v| *v *= w.lambda_z);
    add_image(&mut d_depth, &dz_depth);

    // pruning regularizer
    let n = model.cloud.len();
    let mut d_m = vec![0.0; n];
    let mut d_base_uri = Image::new(cam.width, cam.height, 3);
    if tape.paup_active {
        let pg = loss_papsl_backward(&tape.base.uri, enh_uri, &model.mlp.net, &w)?;
        let s = w.lambda_papsl;
        for (a, b) in d_base_uri.data.iter_mut().zip(&pg.d_uri.data) {
            *a += s * b;
        }
        for (a, b) in d_enh.data.iter_mut().zip(&pg.d_uri_enh.data) {
            *a += s * b;
        }
        d_m.iter_mut().for_each(|v| *v += s * pg.d_prob);
        for (g, d) in grads.mlp.params_mut().zip(pg.d_mlp.params()) {
            *g += s * d;
        }
    }
    if tape.enhanced.is_none() {
        add_image(&mut d_base_uri, &d_enh);
    }

    // base branch: radiance and depth share one blend
    let mut base_sg = blend_backward(&tape.base, Some(&d_base_uri), Some((&d_depth, &tape.stats.u_norm)));
    for (sg, dc) in base_sg.iter_mut().zip(&dz_center) {
        sg.d_depth_center += dc;
    }
    projection_backward(&model.cloud, cam, &tape.base, &base_sg, &mut grads.gaussians, None);

    // enhanced branch and the gate path into the pruning network
    if let Some(enh) = &tape.enhanced {
        let enh_sg = blend_backward(enh, Some(&d_enh), None);
        let mut d_keep = vec![0.0; n];
        projection_backward(&model.cloud, cam, enh, &enh_sg, &mut grads.gaussians, Some(&mut d_keep));
        if tape.gate_mode != GateMode::Off {
            for i in 0..n {
                d_m[i] += d_keep[i] * tape.gates.d_weight_d_m[i];
            }
        }
    }
    if tape.paup_active {
        for (i, r) in tape.records.iter().enumerate() {
            if d_m[i] == 0.0 {
                continue;
            }
            let d_pus = model.mlp.prob_backward(r.pus, d_m[i], &mut grads.mlp);
            grads.d_w_u += d_pus * r.u_component;
            grads.d_w_p += d_pus * r.p_component;
        }
    }

    // medium prior
    let lb = w.lambda_beta;
    for (grid, field, mut d_val, g) in [
        (&model.medium.grid_d, &tape.field_d, comp.d_value_d, &mut grads.medium.grid_d),
        (&model.medium.grid_b, &tape.field_b, comp.d_value_b, &mut grads.medium.grid_b),
    ] {
        beta_data_term_backward_into(field, &tape.stats.pus_field, &tape.beta_prior, lb, &mut d_val)?;
        grid.dense_backward(field, &d_val, g);
        scratch::recycle(d_val);
        factor_norm_backward(&grid.comps, lb * w.lambda_r, g);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, sample_params};
    use crate::medium::Aabb;
    use crate::types::{Gaussian3D, Vec3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(seed: u64) -> (Model, Vec<CameraView>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gs = vec![Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 1.5), 1.5, 0.7, [0.3, 0.4, 0.5])];
        for _ in 0..4 {
            let mut g = Gaussian3D::isotropic(
                Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                rng.random_range(0.15..0.3),
                rng.random_range(0.3..0.7),
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            );
            for k in 1..16 {
                for c in 0..3 {
                    g.sh[k][c] = rng.random_range(-0.1..0.1);
                }
            }
            g.rotation = [0.9, 0.1, -0.2, 0.3];
            g.log_scale.x += 0.3;
            gs.push(g);
        }
        let cloud = GaussianCloud::new(gs);
        let bbox = Aabb::around(cloud.gaussians.iter().map(|g| g.mean), 0.1).unwrap();
        let mut medium = MediumParams::new(bbox, 6, 2, [0.3, 0.4, 0.5], &mut rng).unwrap();
        for x in medium.grid_d.comps.u.iter_mut().chain(medium.grid_b.comps.w.iter_mut()) {
            *x = rng.random_range(-0.5..0.5);
        }
        let mlp = PruneMlp::new(&mut rng);
        let mut cams: Vec<CameraView> = (0..3)
            .map(|i| {
                let eye = Vec3::new(0.4 * (i as f64 - 1.0), 0.1, -4.0);
                CameraView::look_at(eye, Vec3::zeros(), -Vec3::y(), 20.0, 16, 16, i)
            })
            .collect();
        for c in &mut cams {
            let data = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            c.gt_image = Some(Image::from_data(16, 16, 3, data).unwrap());
        }
        (
            Model {
                cloud,
                medium,
                mlp,
                prune_weights: PruneWeights::default(),
                uncertainty: None,
            },
            cams,
        )
    }

    #[test]
    fn backward_without_matching_forward_is_rejected() {
        let (model, cams) = tiny_setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = forward(&model, &cams, 0, &ForwardOptions::default(), None, &mut rng).unwrap();
        let mut other = model.clone();
        other.cloud.gaussians.pop();
        assert!(matches!(backward(&other, &cams, &tape), Err(Error::TapeMissing)));
    }

    #[test]
    fn small_scene_gradients_match_finite_differences() {
        let (model, cams) = tiny_setup(2);
        let opts = ForwardOptions {
            gate_mode: GateMode::Soft,
            ..ForwardOptions::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = sample_params(&model, 4, &mut rng);
        let report = finite_diff_check(&model, &cams, 1, &opts, &params, 1e-5, 1e-3, &mut rng).unwrap();
        for e in &report.entries {
            assert!(e.rel_error <= 1e-3, "{e:?}");
        }
    }

    #[test]
    fn culled_gaussians_get_zero_gradient() {
        let (mut model, cams) = tiny_setup(4);
        model
            .cloud
            .gaussians
            .push(Gaussian3D::isotropic(Vec3::new(0.0, 0.0, -9.0), 0.1, 0.5, [1.0; 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = ForwardOptions::default();
        let tape = forward(&model, &cams, 0, &opts, None, &mut rng).unwrap();
        let g = backward(&model, &cams, &tape).unwrap();
        assert!(g.is_finite());
        assert!(g.gaussians.last().unwrap().is_zero());
    }

    #[test]
    fn doubling_a_weight_doubles_its_term_gradient() {
        let (model, cams) = tiny_setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base_opts = ForwardOptions {
            paup_active: false,
            ..ForwardOptions::default()
        };
        let grad_z = |lz: f64, rng: &mut ChaCha8Rng| {
            let mut o = base_opts;
            o.weights.lambda_z = lz;
            let t = forward(&model, &cams, 0, &o, None, rng).unwrap();
            backward(&model, &cams, &t).unwrap().gaussians[1].d_mean
        };
        let g0 = grad_z(0.0, &mut rng);
        let g1 = grad_z(0.05, &mut rng);
        let g2 = grad_z(0.1, &mut rng);
        for k in 0..3 {
            let (a, b) = (g1[k] - g0[k], g2[k] - g0[k]);
            assert!((b - 2.0 * a).abs() <= 1e-9 * a.abs().max(1e-12), "{a} {b}");
        }
    }
}
