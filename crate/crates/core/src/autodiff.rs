//! Gradient containers and a central-difference checker for the full
//! differentiable pipeline.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::medium::{MediumGrad, VmComponents};
use crate::mlp::DenseNet;
use crate::pipeline::{backward, forward, ForwardOptions, Model};
use crate::sh::SH_COEFFS;
use crate::types::{CameraView, Quat, Vec3};

/// Gradient of one Gaussian's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub d_mean: Vec3,
    pub d_rotation: Quat,
    pub d_log_scale: Vec3,
    pub d_opacity_logit: f64,
    pub d_sh: [[f64; 3]; SH_COEFFS],
    /// Summed norm of the screen-space mean gradient over the views it was
    /// seen in; drives densification, not an optimizer input.
    pub d_mean2d_norm: f64,
}

impl Default for GaussianGrad {
    fn default() -> Self {
        GaussianGrad {
            d_mean: Vec3::zeros(),
            d_rotation: [0.0; 4],
            d_log_scale: Vec3::zeros(),
            d_opacity_logit: 0.0,
            d_sh: [[0.0; 3]; SH_COEFFS],
            d_mean2d_norm: 0.0,
        }
    }
}

impl GaussianGrad {
    pub fn is_finite(&self) -> bool {
        self.d_mean.iter().all(|v| v.is_finite())
            && self.d_rotation.iter().all(|v| v.is_finite())
            && self.d_log_scale.iter().all(|v| v.is_finite())
            && self.d_opacity_logit.is_finite()
            && self.d_sh.iter().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        *self == GaussianGrad::default()
    }
}

/// Gradient of the total loss with respect to every learnable parameter.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub gaussians: Vec<GaussianGrad>,
    pub medium: MediumGrad,
    pub mlp: DenseNet,
    pub d_w_u: f64,
    pub d_w_p: f64,
}

impl GradientBundle {
    pub fn zeros_like(model: &Model) -> Self {
        GradientBundle {
            gaussians: vec![GaussianGrad::default(); model.cloud.len()],
            medium: MediumGrad::zeros_like(&model.medium),
            mlp: model.mlp.net.zeros_like(),
            d_w_u: 0.0,
            d_w_p: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(GaussianGrad::is_finite)
            && self.medium.d_b_inf_logit.iter().all(|v| v.is_finite())
            && self.medium.grid_d.is_finite()
            && self.medium.grid_b.is_finite()
            && self.mlp.params().all(f64::is_finite)
            && self.d_w_u.is_finite()
            && self.d_w_p.is_finite()
    }
}

/// Parameter families reported separately by [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ParamGroup {
    Mean,
    LogScale,
    Rotation,
    Opacity,
    Sh,
    BetaGrid,
    BInfinity,
    Mlp,
    PruneWeights,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Mean,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::BetaGrid,
        ParamGroup::BInfinity,
        ParamGroup::Mlp,
        ParamGroup::PruneWeights,
    ];
}

/// One scalar parameter: a group and a flat index within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRef {
    pub group: ParamGroup,
    pub index: usize,
}

fn grid_slot(c: &mut VmComponents, mut idx: usize) -> &mut f64 {
    if idx < 3 {
        return &mut c.bias[idx];
    }
    idx -= 3;
    for arr in [&mut c.u, &mut c.m, &mut c.v, &mut c.w] {
        if idx < arr.len() {
            return &mut arr[idx];
        }
        idx -= arr.len();
    }
    panic!("grid parameter index out of range");
}

fn grid_get(c: &VmComponents, mut idx: usize) -> f64 {
    if idx < 3 {
        return c.bias[idx];
    }
    idx -= 3;
    for arr in [&c.u, &c.m, &c.v, &c.w] {
        if idx < arr.len() {
            return arr[idx];
        }
        idx -= arr.len();
    }
    panic!("grid parameter index out of range");
}

/// Number of scalars in a parameter group.
pub fn group_size(model: &Model, group: ParamGroup) -> usize {
    let n = model.cloud.len();
    match group {
        ParamGroup::Mean | ParamGroup::LogScale => 3 * n,
        ParamGroup::Rotation => 4 * n,
        ParamGroup::Opacity => n,
        ParamGroup::Sh => 3 * SH_COEFFS * n,
        ParamGroup::BetaGrid => model.medium.grid_d.comps.scalar_count() + model.medium.grid_b.comps.scalar_count(),
        ParamGroup::BInfinity => 3,
        ParamGroup::Mlp => model.mlp.net.param_count(),
        ParamGroup::PruneWeights => 2,
    }
}

/// Mutable access to one scalar parameter of the model.
pub fn param_mut(model: &mut Model, p: ParamRef) -> &mut f64 {
    let i = p.index;
    let gs = &mut model.cloud.gaussians;
    match p.group {
        ParamGroup::Mean => &mut gs[i / 3].mean[i % 3],
        ParamGroup::LogScale => &mut gs[i / 3].log_scale[i % 3],
        ParamGroup::Rotation => &mut gs[i / 4].rotation[i % 4],
        ParamGroup::Opacity => &mut gs[i].opacity_logit,
        ParamGroup::Sh => {
            let (g, r) = (i / (3 * SH_COEFFS), i % (3 * SH_COEFFS));
            &mut gs[g].sh[r / 3][r % 3]
        }
        ParamGroup::BetaGrid => {
            let nd = model.medium.grid_d.comps.scalar_count();
            if i < nd {
                grid_slot(&mut model.medium.grid_d.comps, i)
            } else {
                grid_slot(&mut model.medium.grid_b.comps, i - nd)
            }
        }
        ParamGroup::BInfinity => &mut model.medium.b_inf_logit[i],
        ParamGroup::Mlp => model.mlp.net.params_mut().nth(i).expect("mlp index in range"),
        ParamGroup::PruneWeights => {
            if i == 0 {
                &mut model.prune_weights.w_u
            } else {
                &mut model.prune_weights.w_p
            }
        }
    }
}

/// The analytic gradient entry matching [`param_mut`].
pub fn grad_value(g: &GradientBundle, p: ParamRef) -> f64 {
    let i = p.index;
    match p.group {
        ParamGroup::Mean => g.gaussians[i / 3].d_mean[i % 3],
        ParamGroup::LogScale => g.gaussians[i / 3].d_log_scale[i % 3],
        ParamGroup::Rotation => g.gaussians[i / 4].d_rotation[i % 4],
        ParamGroup::Opacity => g.gaussians[i].d_opacity_logit,
        ParamGroup::Sh => {
            let (n, r) = (i / (3 * SH_COEFFS), i % (3 * SH_COEFFS));
            g.gaussians[n].d_sh[r / 3][r % 3]
        }
        ParamGroup::BetaGrid => {
            let nd = g.medium.grid_d.scalar_count();
            if i < nd {
                grid_get(&g.medium.grid_d, i)
            } else {
                grid_get(&g.medium.grid_b, i - nd)
            }
        }
        ParamGroup::BInfinity => g.medium.d_b_inf_logit[i],
        ParamGroup::Mlp => g.mlp.params().nth(i).expect("mlp index in range"),
        ParamGroup::PruneWeights => {
            if i == 0 {
                g.d_w_u
            } else {
                g.d_w_p
            }
        }
    }
}

/// Up to `per_group` distinct random parameters from every group.
pub fn sample_params(model: &Model, per_group: usize, rng: &mut impl Rng) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for group in ParamGroup::ALL {
        let n = group_size(model, group);
        for index in sample(rng, n, per_group.min(n)) {
            out.push(ParamRef { group, index });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct FdEntry {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: ParamGroup,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<FdEntry>,
    pub groups: Vec<GroupResult>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

/// Denominator floor of the relative error, so exact zeros compare cleanly.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients with central differences of the total loss.
///
/// Iteration statistics (uncertainty, physics scores, threshold, noise and the
/// voxel score field) are captured from one forward pass and then held fixed,
/// so the checked function is deterministic and smooth.
pub fn finite_diff_check(
    model: &Model,
    cameras: &[CameraView],
    view: usize,
    opts: &ForwardOptions,
    params: &[ParamRef],
    step: f64,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<FdReport> {
    let probe = forward(model, cameras, view, opts, None, rng)?;
    let frozen = probe.stats().clone();
    let tape = forward(model, cameras, view, opts, Some(&frozen), rng)?;
    let again = forward(model, cameras, view, opts, Some(&frozen), rng)?;
    let deviation = (tape.total - again.total).abs();
    if deviation != 0.0 || !tape.total.is_finite() {
        return Err(Error::NonDeterministicForward { deviation });
    }
    let grads = backward(model, cameras, &tape)?;

    let mut entries = Vec::with_capacity(params.len());
    for &p in params {
        let mut plus = model.clone();
        *param_mut(&mut plus, p) += step;
        let mut minus = model.clone();
        *param_mut(&mut minus, p) -= step;
        let lp = forward(&plus, cameras, view, opts, Some(&frozen), rng)?.total;
        let lm = forward(&minus, cameras, view, opts, Some(&frozen), rng)?.total;
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = grad_value(&grads, p);
        entries.push(FdEntry {
            param: p,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let errs: Vec<f64> = entries
            .iter()
            .filter(|e| e.param.group == group)
            .map(|e| e.rel_error)
            .collect();
        if errs.is_empty() {
            continue;
        }
        let max_rel_error = errs.iter().copied().fold(0.0, f64::max);
        groups.push(GroupResult {
            group,
            max_rel_error,
            passed: max_rel_error <= tolerance,
        });
    }
    Ok(FdReport {
        step,
        tolerance,
        entries,
        groups,
    })
}
