//! Training objectives and image-quality metrics, each with its adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medium::{DenseField, VmComponents};
use crate::mlp::DenseNet;
use crate::raster::RenderBundle;
use crate::types::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_papsl: f64,
    pub lambda_beta: f64,
    pub lambda_z: f64,
    pub lambda_ssim: f64,
    pub lambda_s: f64,
    pub lambda_w: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_papsl: 0.1,
            lambda_beta: 0.05,
            lambda_z: 0.05,
            lambda_ssim: 0.2,
            lambda_s: 0.01,
            lambda_w: 0.001,
            lambda_r: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_papsl,
            self.lambda_beta,
            self.lambda_z,
            self.lambda_ssim,
            self.lambda_s,
            self.lambda_w,
            self.lambda_r,
        ];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) && self.lambda_ssim <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights out of range: {self:?}")))
        }
    }
}

/// The four sub-losses of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub img: f64,
    pub papsl: f64,
    pub beta: f64,
    pub z: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        loss_total(self, w)
    }
}

pub fn loss_total(t: &LossTerms, w: &LossWeights) -> f64 {
    t.img + w.lambda_papsl * t.papsl + w.lambda_beta * t.beta + w.lambda_z * t.z
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_dims(b)
}

fn check_ssim_size(a: &Image) -> Result<()> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    Ok(())
}

/// Valid-mode correlation of one channel plane with the separable window.
fn correlate_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|t| g[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`correlate_valid`]: scatters a valid-size map back to full size.
fn correlate_valid_adjoint(map: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for t in 0..SSIM_WINDOW {
                rows[(y + t) * ow + x] += g[t] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for t in 0..SSIM_WINDOW {
                out[y * w + x + t] += g[t] * v;
            }
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

struct SsimMoments {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn moments(pa: &[f64], pb: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> SsimMoments {
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    SsimMoments {
        mu_a: correlate_valid(pa, w, h, g),
        mu_b: correlate_valid(pb, w, h, g),
        e_aa: correlate_valid(&sq(pa, pa), w, h, g),
        e_bb: correlate_valid(&sq(pb, pb), w, h, g),
        e_ab: correlate_valid(&sq(pa, pb), w, h, g),
    }
}

#[inline]
fn ssim_terms(ma: f64, mb: f64, eaa: f64, ebb: f64, eab: f64) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * ma * mb + SSIM_C1;
    let a2 = 2.0 * (eab - ma * mb) + SSIM_C2;
    let b1 = ma * ma + mb * mb + SSIM_C1;
    let b2 = (eaa - ma * ma) + (ebb - mb * mb) + SSIM_C2;
    (a1, a2, b1, b2)
}

/// Mean SSIM over every fully-contained window and channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    check_ssim_size(a)?;
    let g = gaussian_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let m = moments(&plane(a, c), &plane(b, c), a.width, a.height, &g);
        for n in 0..m.mu_a.len() {
            let (a1, a2, b1, b2) = ssim_terms(m.mu_a[n], m.mu_b[n], m.e_aa[n], m.e_bb[n], m.e_ab[n]);
            total += (a1 * a2) / (b1 * b2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Gradient of [`ssim`] with respect to `a`.
pub fn ssim_backward(a: &Image, b: &Image) -> Result<Image> {
    check_pair(a, b)?;
    check_ssim_size(a)?;
    let g = gaussian_taps();
    let (w, h) = (a.width, a.height);
    let n_maps = (w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1);
    let scale = 1.0 / (n_maps * a.channels) as f64;
    let mut out = Image::new(w, h, a.channels);
    for c in 0..a.channels {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let m = moments(&pa, &pb, w, h, &g);
        let mut d_mu = vec![0.0; n_maps];
        let mut d_eaa = vec![0.0; n_maps];
        let mut d_eab = vec![0.0; n_maps];
        for n in 0..n_maps {
            let (ma, mb) = (m.mu_a[n], m.mu_b[n]);
            let (a1, a2, b1, b2) = ssim_terms(ma, mb, m.e_aa[n], m.e_bb[n], m.e_ab[n]);
            let d = b1 * b2;
            let s = a1 * a2 / d;
            d_mu[n] = scale * ((2.0 * mb * a2 - 2.0 * mb * a1) / d - s * (2.0 * ma * b2 - 2.0 * ma * b1) / d);
            d_eaa[n] = -scale * s * b1 / d;
            d_eab[n] = scale * 2.0 * a1 / d;
        }
        let t_mu = correlate_valid_adjoint(&d_mu, w, h, &g);
        let t_aa = correlate_valid_adjoint(&d_eaa, w, h, &g);
        let t_ab = correlate_valid_adjoint(&d_eab, w, h, &g);
        for q in 0..w * h {
            out.data[q * a.channels + c] = t_mu[q] + 2.0 * pa[q] * t_aa[q] + pb[q] * t_ab[q];
        }
    }
    Ok(out)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`l1`] with respect to `a`.
pub fn l1_backward(a: &Image, b: &Image) -> Result<Image> {
    check_pair(a, b)?;
    let n = a.data.len() as f64;
    Ok(Image {
        data: a.data.iter().zip(&b.data).map(|(x, y)| sign(x - y) / n).collect(),
        ..*a
    })
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)/2`.
pub fn loss_img(uw: &Image, gt: &Image, lambda_ssim: f64) -> Result<f64> {
    Ok((1.0 - lambda_ssim) * l1(uw, gt)? + lambda_ssim * (1.0 - ssim(uw, gt)?) / 2.0)
}

pub fn loss_img_backward(uw: &Image, gt: &Image, lambda_ssim: f64) -> Result<Image> {
    let mut d = l1_backward(uw, gt)?;
    let ds = ssim_backward(uw, gt)?;
    for (v, s) in d.data.iter_mut().zip(&ds.data) {
        *v = (1.0 - lambda_ssim) * *v - 0.5 * lambda_ssim * s;
    }
    Ok(d)
}

/// `mean|I_UR − I_enh| + λ_s Σ(1 − m) + λ_w ‖φ‖²`, the norm over every
/// network parameter.
pub fn loss_papsl(uri: &Image, uri_enh: &Image, prune_probs: &[f64], mlp: &DenseNet, w: &LossWeights) -> Result<f64> {
    let sparsity: f64 = prune_probs.iter().map(|m| 1.0 - m).sum();
    Ok(l1(uri, uri_enh)? + w.lambda_s * sparsity + w.lambda_w * mlp.sq_norm())
}

/// Adjoints of [`loss_papsl`].
pub struct PapslGrad {
    pub d_uri: Image,
    pub d_uri_enh: Image,
    /// Same for every Gaussian: `−λ_s`.
    pub d_prob: f64,
    pub d_mlp: DenseNet,
}

pub fn loss_papsl_backward(uri: &Image, uri_enh: &Image, mlp: &DenseNet, w: &LossWeights) -> Result<PapslGrad> {
    let d_uri = l1_backward(uri, uri_enh)?;
    let d_uri_enh = Image {
        data: d_uri.data.iter().map(|v| -v).collect(),
        ..d_uri
    };
    let mut d_mlp = mlp.zeros_like();
    for (g, p) in d_mlp.params_mut().zip(mlp.params()) {
        *g = 2.0 * w.lambda_w * p;
    }
    Ok(PapslGrad {
        d_uri,
        d_uri_enh,
        d_prob: -w.lambda_s,
        d_mlp,
    })
}

fn check_field(field: &DenseField, pus: &[f64]) -> Result<()> {
    let g = field.resolution;
    if pus.len() != g * g * g || field.value.len() != 3 * g * g * g {
        return Err(Error::DimensionMismatch {
            expected: (g, g, g),
            actual: (pus.len(), 1, 1),
        });
    }
    Ok(())
}

/// `Σ_x PUS(x) ‖β(x) − prior‖²` for one grid's dense field.
pub fn beta_data_term(field: &DenseField, pus: &[f64], prior: &[f64; 3]) -> Result<f64> {
    check_field(field, pus)?;
    let n = pus.len();
    let mut s = 0.0;
    for c in 0..3 {
        for (x, &w) in pus.iter().enumerate() {
            let d = field.value[c * n + x] - prior[c];
            s += w * d * d;
        }
    }
    Ok(s)
}

/// Gradient of [`beta_data_term`] on the field values.
pub fn beta_data_term_backward(field: &DenseField, pus: &[f64], prior: &[f64; 3]) -> Result<Vec<f64>> {
    let mut d = vec![0.0; field.value.len()];
    beta_data_term_backward_into(field, pus, prior, 1.0, &mut d)?;
    Ok(d)
}

/// Adds `scale` times the gradient of [`beta_data_term`] into `out`.
pub fn beta_data_term_backward_into(
    field: &DenseField,
    pus: &[f64],
    prior: &[f64; 3],
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    check_field(field, pus)?;
    let n = pus.len();
    assert_eq!(out.len(), 3 * n, "gradient buffer must match the field");
    for c in 0..3 {
        for (x, &w) in pus.iter().enumerate() {
            out[c * n + x] += scale * 2.0 * w * (field.value[c * n + x] - prior[c]);
        }
    }
    Ok(())
}

/// Data term over both grids plus `λ_r` times their factor norms.
pub fn loss_beta(
    field_d: &DenseField,
    field_b: &DenseField,
    comps_d: &VmComponents,
    comps_b: &VmComponents,
    pus: &[f64],
    prior: &[f64; 3],
    lambda_r: f64,
) -> Result<f64> {
    Ok(beta_data_term(field_d, pus, prior)?
        + beta_data_term(field_b, pus, prior)?
        + lambda_r * (comps_d.factor_sq_norm() + comps_b.factor_sq_norm()))
}

/// Adds `2 λ_r x` for every factor entry of `comps` into `grad`.
pub fn factor_norm_backward(comps: &VmComponents, lambda_r: f64, grad: &mut VmComponents) {
    for (dst, src) in [
        (&mut grad.u, &comps.u),
        (&mut grad.m, &comps.m),
        (&mut grad.v, &comps.v),
        (&mut grad.w, &comps.w),
    ] {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += 2.0 * lambda_r * s;
        }
    }
}

/// `Σᵢ (1 − Uᵢ)|z(pᵢ) − ẑᵢ|` over Gaussians whose projected center lands on a
/// valid pixel.
pub fn loss_z(depth: &Image, bundle: &RenderBundle, u_norm: &[f64]) -> f64 {
    z_pairs(depth, bundle, u_norm)
        .map(|(_, _, keep, diff)| keep * diff.abs())
        .sum()
}

fn z_pairs<'a>(
    depth: &'a Image,
    bundle: &'a RenderBundle,
    u_norm: &'a [f64],
) -> impl Iterator<Item = (usize, usize, f64, f64)> + 'a {
    bundle.splats.iter().enumerate().filter_map(move |(si, s)| {
        let (x, y) = s.center_pixel(bundle.width, bundle.height)?;
        let p = y * bundle.width + x;
        if !bundle.is_valid(p) {
            return None;
        }
        let keep = 1.0 - u_norm[s.gaussian_index].clamp(0.0, 1.0);
        Some((si, p, keep, depth.data[p] - s.depth_center))
    })
}

/// Adjoints of [`loss_z`]: on the depth map and on each splat's center
/// distance.
pub fn loss_z_backward(depth: &Image, bundle: &RenderBundle, u_norm: &[f64]) -> (Image, Vec<f64>) {
    let mut d_depth = Image::new(depth.width, depth.height, 1);
    let mut d_center = vec![0.0; bundle.splats.len()];
    for (si, p, keep, diff) in z_pairs(depth, bundle, u_norm) {
        let g = keep * sign(diff);
        d_depth.data[p] += g;
        d_center[si] -= g;
    }
    (d_depth, d_center)
}
