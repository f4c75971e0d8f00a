//! Screen-space projection and tile-based front-to-back alpha blending.
//!
//! Splats are binned into 16×16 pixel tiles and each tile's list is sorted by
//! camera distance, ties broken by Gaussian index. Every pixel walks its tile's
//! list and records the blended contributions so the backward pass can replay
//! them without re-sorting.

use crate::autodiff::GaussianGrad;
use crate::sh::{sh_eval, sh_eval_backward};
use crate::types::{covariance_backward, CameraView, Gaussian3D, GaussianCloud, Image, Mat3, Vec3};
use nalgebra::{Matrix2, Matrix2x3};

pub const TILE_SIZE: usize = 16;
/// Low-pass dilation added to the screen covariance diagonal, in px².
pub const COV_DILATION: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;
/// Blending stops once the transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Support radius of the screen-space kernel, in standard deviations.
pub const KERNEL_SIGMAS: f64 = 3.5;

const KERNEL_CUTOFF: f64 = 0.5 * KERNEL_SIGMAS * KERNEL_SIGMAS;
const NO_SPLAT: u32 = u32::MAX;

fn kernel_floor() -> f64 {
    (-KERNEL_CUTOFF).exp()
}

/// Screen-space falloff for a Mahalanobis power `0.5·dᵀΣ⁻¹d`.
///
/// The Gaussian is shifted down by its value at the support boundary and
/// rescaled so it is 1 at the center and reaches 0 continuously at the edge.
#[inline]
pub fn kernel_from_power(power: f64) -> f64 {
    if power >= KERNEL_CUTOFF {
        return 0.0;
    }
    let floor = kernel_floor();
    ((-power).exp() - floor) / (1.0 - floor)
}

/// A Gaussian projected into one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub gaussian_index: usize,
    pub mean2d: [f64; 2],
    /// Dilated screen covariance `(xx, xy, yy)`.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`.
    pub conic: [f64; 3],
    /// Distance from the camera center to the Gaussian mean.
    pub depth_center: f64,
    pub rgb: [f64; 3],
    pub alpha: f64,
    /// Pixel radius of the kernel support.
    pub radius: f64,
    pub cam_mean: Vec3,
    pub view_dir: Vec3,
}

impl Splat2D {
    #[inline]
    pub fn power_at(&self, px: usize, py: usize) -> (f64, f64, f64) {
        let dx = px as f64 + 0.5 - self.mean2d[0];
        let dy = py as f64 + 0.5 - self.mean2d[1];
        let [a, b, c] = self.conic;
        (0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy, dx, dy)
    }

    #[inline]
    pub fn kernel_at(&self, px: usize, py: usize) -> f64 {
        kernel_from_power(self.power_at(px, py).0)
    }

    /// Area of the one-sigma ellipse of the undilated screen covariance.
    pub fn footprint_area(&self) -> f64 {
        let a = self.cov2d[0] - COV_DILATION;
        let c = self.cov2d[2] - COV_DILATION;
        let det = (a * c - self.cov2d[1] * self.cov2d[1]).max(0.0);
        std::f64::consts::PI * det.sqrt()
    }

    /// Pixel containing the projected mean, when it lies inside the image.
    pub fn center_pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let (x, y) = (self.mean2d[0].floor(), self.mean2d[1].floor());
        (x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height)
            .then(|| (x as usize, y as usize))
    }

    /// Inclusive pixel range whose centers lie within the support box.
    fn pixel_box(&self, width: usize, height: usize) -> Option<[usize; 4]> {
        let x0 = (self.mean2d[0] - self.radius - 0.5).ceil().max(0.0);
        let x1 = (self.mean2d[0] + self.radius - 0.5).floor();
        let y0 = (self.mean2d[1] - self.radius - 0.5).ceil().max(0.0);
        let y1 = (self.mean2d[1] + self.radius - 0.5).floor();
        if x1 < x0 || y1 < y0 || x1 < 0.0 || y1 < 0.0 {
            return None;
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        if x0 >= width || y0 >= height {
            return None;
        }
        Some([
            x0,
            (x1 as usize).min(width - 1),
            y0,
            (y1 as usize).min(height - 1),
        ])
    }
}

fn perspective_jacobian(cam: &CameraView, t: &Vec3) -> Matrix2x3<f64> {
    let [fx, fy] = cam.focal;
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    )
}

/// Projects one Gaussian; `None` when it is behind the near plane or its
/// kernel support misses the image.
pub fn project_gaussian(g: &Gaussian3D, index: usize, cam: &CameraView) -> Option<Splat2D> {
    let w = cam.rotation_matrix();
    let t = w * g.mean + cam.translation_vector();
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let j = perspective_jacobian(cam, &t);
    let cov3 = g.covariance();
    let cov_cam = w * cov3 * w.transpose();
    let cov = j * cov_cam * j.transpose() + Matrix2::identity() * COV_DILATION;
    let (a, b, c) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = KERNEL_SIGMAS * lambda_max.sqrt();
    let mean2d = [
        cam.focal[0] * t.x / t.z + cam.principal_point[0],
        cam.focal[1] * t.y / t.z + cam.principal_point[1],
    ];
    let offset = g.mean - cam.center();
    let view_dir = offset.normalize();
    let splat = Splat2D {
        gaussian_index: index,
        mean2d,
        cov2d: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth_center: t.norm(),
        rgb: sh_eval(&g.sh, &view_dir),
        alpha: g.opacity(),
        radius,
        cam_mean: t,
        view_dir,
    };
    splat.pixel_box(cam.width, cam.height)?;
    Some(splat)
}

/// One blended (splat, pixel) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Index into [`RenderBundle::splats`].
    pub splat: u32,
    /// Effective opacity α′ after kernel falloff and keep weight.
    pub alpha: f64,
    pub kernel: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

impl Contribution {
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

/// Everything one forward pass over a view produces.
#[derive(Clone, Debug)]
pub struct RenderBundle {
    pub width: usize,
    pub height: usize,
    pub uri: Image,
    pub final_transmittance: Image,
    pub splats: Vec<Splat2D>,
    /// Gaussian index → splat index, `u32::MAX` when culled.
    splat_of: Vec<u32>,
    /// Per pixel `(start, len)` into `contributions`, front to back.
    pixel_ranges: Vec<(u32, u32)>,
    pub contributions: Vec<Contribution>,
    /// Keep weight applied to each Gaussian.
    pub keep_weights: Vec<f64>,
    /// Set when every Gaussian was culled; the images are black.
    pub empty_frame: bool,
}

impl RenderBundle {
    pub fn num_gaussians(&self) -> usize {
        self.splat_of.len()
    }

    pub fn splat_of(&self, gaussian: usize) -> Option<&Splat2D> {
        match self.splat_of[gaussian] {
            NO_SPLAT => None,
            s => Some(&self.splats[s as usize]),
        }
    }

    pub fn pixel_contributions(&self, pixel: usize) -> &[Contribution] {
        let (start, len) = self.pixel_ranges[pixel];
        &self.contributions[start as usize..(start + len) as usize]
    }

    /// A pixel is valid when something was blended into it.
    pub fn is_valid(&self, pixel: usize) -> bool {
        self.final_transmittance.data[pixel] < 1.0
    }

    /// For each Gaussian, every `(pixel, blend weight)` pair that was blended.
    pub fn per_gaussian_contrib(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.num_gaussians()];
        for pixel in 0..self.pixel_ranges.len() {
            for c in self.pixel_contributions(pixel) {
                let g = self.splats[c.splat as usize].gaussian_index;
                out[g].push((pixel, c.weight()));
            }
        }
        out
    }

    /// Effective opacity of every Gaussian: its opacity times the transmittance
    /// in front of it at its center pixel. Culled Gaussians get 0.
    pub fn effective_opacity(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_gaussians()];
        for (s_idx, splat) in self.splats.iter().enumerate() {
            let Some((x, y)) = splat.center_pixel(self.width, self.height) else {
                continue;
            };
            let pixel = y * self.width + x;
            let t = self
                .pixel_contributions(pixel)
                .iter()
                .find(|c| c.splat as usize == s_idx)
                .map_or(self.final_transmittance.data[pixel], |c| c.transmittance);
            out[splat.gaussian_index] = splat.alpha * t;
        }
        out
    }
}

fn project_all(cloud: &GaussianCloud, cam: &CameraView) -> (Vec<Splat2D>, Vec<u32>) {
    let mut splats = Vec::with_capacity(cloud.len());
    let mut splat_of = vec![NO_SPLAT; cloud.len()];
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if let Some(s) = project_gaussian(g, i, cam) {
            splat_of[i] = splats.len() as u32;
            splats.push(s);
        }
    }
    (splats, splat_of)
}

/// Depth-sorted splat lists for every tile.
fn bin_tiles(splats: &[Splat2D], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (s_idx, s) in splats.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = s.pixel_box(width, height) else {
            continue;
        };
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(s_idx as u32);
            }
        }
    }
    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth_center
                .total_cmp(&sb.depth_center)
                .then(sa.gaussian_index.cmp(&sb.gaussian_index))
        });
    }
    (tiles_x, tiles)
}

/// Renders the cloud, optionally scaling each Gaussian's opacity by a keep
/// weight in `[0, 1]`.
pub fn rasterize(
    cloud: &GaussianCloud,
    cam: &CameraView,
    keep_weights: Option<&[f64]>,
) -> RenderBundle {
    let (width, height) = (cam.width, cam.height);
    let keep: Vec<f64> = match keep_weights {
        Some(w) => {
            assert_eq!(w.len(), cloud.len(), "keep weights must match the cloud");
            w.to_vec()
        }
        None => vec![1.0; cloud.len()],
    };
    let (splats, splat_of) = project_all(cloud, cam);
    let (tiles_x, tiles) = bin_tiles(&splats, width, height);

    let mut uri = Image::new(width, height, 3);
    let mut final_t = Image::filled(width, height, 1, 1.0);
    let mut pixel_ranges = vec![(0u32, 0u32); width * height];
    let mut contributions = Vec::new();

    for (tile_idx, list) in tiles.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let (tx, ty) = (tile_idx % tiles_x, tile_idx / tiles_x);
        for py in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
            for px in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                let pixel = py * width + px;
                let start = contributions.len();
                let mut t = 1.0;
                let mut color = [0.0; 3];
                for &s_idx in list {
                    let s = &splats[s_idx as usize];
                    let kernel = s.kernel_at(px, py);
                    if kernel <= 0.0 {
                        continue;
                    }
                    let a = s.alpha * kernel * keep[s.gaussian_index];
                    let w = a * t;
                    for c in 0..3 {
                        color[c] += s.rgb[c] * w;
                    }
                    contributions.push(Contribution {
                        splat: s_idx,
                        alpha: a,
                        kernel,
                        transmittance: t,
                    });
                    t *= 1.0 - a;
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                pixel_ranges[pixel] = (start as u32, (contributions.len() - start) as u32);
                uri.data[pixel * 3..pixel * 3 + 3].copy_from_slice(&color);
                final_t.data[pixel] = t;
            }
        }
    }

    let empty_frame = splats.is_empty();
    if empty_frame && !cloud.is_empty() {
        log::warn!("every Gaussian was culled in view {}", cam.view_id);
    }
    RenderBundle {
        width,
        height,
        uri,
        final_transmittance: final_t,
        splats,
        splat_of,
        pixel_ranges,
        contributions,
        keep_weights: keep,
        empty_frame,
    }
}

/// Effective opacity of every Gaussian in `cam` without storing a full
/// bundle: only the pixels under projected centers are blended.
pub fn center_effective_opacity(cloud: &GaussianCloud, cam: &CameraView) -> Vec<f64> {
    let (width, height) = (cam.width, cam.height);
    let (splats, _) = project_all(cloud, cam);
    let (tiles_x, tiles) = bin_tiles(&splats, width, height);
    let mut out = vec![0.0; cloud.len()];

    let mut by_pixel: Vec<(usize, u32)> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            s.center_pixel(width, height)
                .map(|(x, y)| (y * width + x, i as u32))
        })
        .collect();
    by_pixel.sort_unstable();

    let mut i = 0;
    while i < by_pixel.len() {
        let pixel = by_pixel[i].0;
        let mut end = i;
        while end < by_pixel.len() && by_pixel[end].0 == pixel {
            end += 1;
        }
        let targets = &by_pixel[i..end];
        let (px, py) = (pixel % width, pixel / width);
        let list = &tiles[(py / TILE_SIZE) * tiles_x + px / TILE_SIZE];
        let mut t = 1.0;
        let mut found = 0;
        for &s_idx in list {
            let s = &splats[s_idx as usize];
            if targets.iter().any(|&(_, tgt)| tgt == s_idx) {
                out[s.gaussian_index] = s.alpha * t;
                found += 1;
            }
            let kernel = s.kernel_at(px, py);
            if kernel <= 0.0 {
                continue;
            }
            t *= 1.0 - s.alpha * kernel;
            if t < MIN_TRANSMITTANCE || found == targets.len() {
                break;
            }
        }
        if found < targets.len() {
            for &(_, tgt) in targets {
                let s = &splats[tgt as usize];
                if out[s.gaussian_index] == 0.0 {
                    out[s.gaussian_index] = s.alpha * t;
                }
            }
        }
        i = end;
    }
    out
}

/// Uncertainty-weighted expected depth: `Σ zᵢ α′ᵢ (1 − Uᵢ) Tᵢ` over the
/// bundle's recorded blend.
pub fn render_depth(bundle: &RenderBundle, uncertainty: &[f64]) -> Image {
    assert_eq!(uncertainty.len(), bundle.num_gaussians());
    let mut depth = Image::new(bundle.width, bundle.height, 1);
    for (pixel, d) in depth.data.iter_mut().enumerate() {
        *d = bundle
            .pixel_contributions(pixel)
            .iter()
            .map(|c| {
                let s = &bundle.splats[c.splat as usize];
                let u = uncertainty[s.gaussian_index].clamp(0.0, 1.0);
                s.depth_center * c.weight() * (1.0 - u)
            })
            .sum();
    }
    depth
}

/// Gradients with respect to one splat's screen-space quantities.
#[derive(Clone, Debug, Default)]
pub struct SplatGrad {
    pub d_rgb: [f64; 3],
    pub d_mean2d: [f64; 2],
    pub d_conic: [f64; 3],
    pub d_alpha: f64,
    pub d_depth_center: f64,
    pub d_keep: f64,
}

/// Reverse pass of the blend. `d_color` is the adjoint of the RGB output and
/// `d_depth` the adjoint of [`render_depth`] with the given uncertainty.
pub fn blend_backward(
    bundle: &RenderBundle,
    d_color: Option<&Image>,
    d_depth: Option<(&Image, &[f64])>,
) -> Vec<SplatGrad> {
    let mut grads = vec![SplatGrad::default(); bundle.splats.len()];
    let floor = kernel_floor();
    for pixel in 0..bundle.width * bundle.height {
        let contribs = bundle.pixel_contributions(pixel);
        if contribs.is_empty() {
            continue;
        }
        let dc = d_color.map(|img| [img.data[3 * pixel], img.data[3 * pixel + 1], img.data[3 * pixel + 2]]);
        let dd = d_depth.map(|(img, _)| img.data[pixel]);
        if dc.is_none_or(|v| v == [0.0; 3]) && dd.is_none_or(|v| v == 0.0) {
            continue;
        }
        let (px, py) = (pixel % bundle.width, pixel / bundle.width);
        let mut suffix_color = [0.0; 3];
        let mut suffix_depth = 0.0;
        for c in contribs.iter().rev() {
            let s = &bundle.splats[c.splat as usize];
            let g = &mut grads[c.splat as usize];
            let w = c.weight();
            let a = c.alpha;
            let inv_one_minus = if 1.0 - a > 1e-12 { 1.0 / (1.0 - a) } else { 0.0 };
            let mut d_a = 0.0;
            if let Some(dc) = dc {
                for ch in 0..3 {
                    g.d_rgb[ch] += w * dc[ch];
                    d_a += dc[ch] * (s.rgb[ch] * c.transmittance - suffix_color[ch] * inv_one_minus);
                    suffix_color[ch] += s.rgb[ch] * w;
                }
            }
            if let (Some(dd), Some((_, unc))) = (dd, d_depth) {
                let keep = 1.0 - unc[s.gaussian_index].clamp(0.0, 1.0);
                let z = s.depth_center * keep;
                g.d_depth_center += dd * w * keep;
                d_a += dd * (z * c.transmittance - suffix_depth * inv_one_minus);
                suffix_depth += z * w;
            }
            if d_a == 0.0 {
                continue;
            }
            let kw = bundle.keep_weights[s.gaussian_index];
            g.d_alpha += d_a * c.kernel * kw;
            g.d_keep += d_a * s.alpha * c.kernel;
            let d_kernel = d_a * s.alpha * kw;
            let d_power = -d_kernel * (c.kernel * (1.0 - floor) + floor) / (1.0 - floor);
            let (_, dx, dy) = s.power_at(px, py);
            let [ca, cb, cc] = s.conic;
            g.d_mean2d[0] -= d_power * (ca * dx + cb * dy);
            g.d_mean2d[1] -= d_power * (cb * dx + cc * dy);
            g.d_conic[0] += 0.5 * d_power * dx * dx;
            g.d_conic[1] += d_power * dx * dy;
            g.d_conic[2] += 0.5 * d_power * dy * dy;
        }
    }
    grads
}

/// Pulls screen-space gradients back through the projection and color
/// evaluation, accumulating into per-Gaussian gradients. Returns the per-splat
/// screen-space positional gradient norms.
pub fn projection_backward(
    cloud: &GaussianCloud,
    cam: &CameraView,
    bundle: &RenderBundle,
    splat_grads: &[SplatGrad],
    out: &mut [GaussianGrad],
    d_keep_out: Option<&mut [f64]>,
) {
    let w = cam.rotation_matrix();
    let center = cam.center();
    let [fx, fy] = cam.focal;
    let mut d_keep_out = d_keep_out;
    for (s, sg) in bundle.splats.iter().zip(splat_grads) {
        let gi = s.gaussian_index;
        let g = &cloud.gaussians[gi];
        let acc = &mut out[gi];
        if let Some(dk) = d_keep_out.as_deref_mut() {
            dk[gi] += sg.d_keep;
        }

        // opacity
        acc.d_opacity_logit += sg.d_alpha * s.alpha * (1.0 - s.alpha);

        // color
        let offset = g.mean - center;
        let dist = offset.norm();
        let d_dir = sh_eval_backward(&g.sh, &s.view_dir, &sg.d_rgb, &mut acc.d_sh);
        let mut d_mean = (d_dir - s.view_dir * s.view_dir.dot(&d_dir)) / dist;

        // conic → screen covariance
        let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let d_q = Matrix2::new(
            sg.d_conic[0],
            0.5 * sg.d_conic[1],
            0.5 * sg.d_conic[1],
            sg.d_conic[2],
        );
        let d_cov2 = -(q * d_q * q);

        // screen covariance → camera covariance and Jacobian
        let t = s.cam_mean;
        let j = perspective_jacobian(cam, &t);
        let cov3 = g.covariance();
        let cov_cam = w * cov3 * w.transpose();
        let d_cov_cam = j.transpose() * d_cov2 * j;
        let d_j = 2.0 * d_cov2 * j * cov_cam;
        let d_cov3: Mat3 = w.transpose() * d_cov_cam * w;
        let (d_rot, d_log) = covariance_backward(&g.rotation, &g.log_scale, &d_cov3);
        for k in 0..4 {
            acc.d_rotation[k] += d_rot[k];
        }
        acc.d_log_scale += d_log;

        // camera-space mean
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_t = Vec3::zeros();
        d_t.x += -fx * iz2 * d_j[(0, 2)];
        d_t.y += -fy * iz2 * d_j[(1, 2)];
        d_t.z += -fx * iz2 * d_j[(0, 0)] + 2.0 * fx * t.x * iz3 * d_j[(0, 2)]
            - fy * iz2 * d_j[(1, 1)]
            + 2.0 * fy * t.y * iz3 * d_j[(1, 2)];
        let [dmx, dmy] = sg.d_mean2d;
        d_t.x += dmx * fx * iz;
        d_t.y += dmy * fy * iz;
        d_t.z += -dmx * fx * t.x * iz2 - dmy * fy * t.y * iz2;
        d_t += t * (sg.d_depth_center / s.depth_center);

        d_mean += w.transpose() * d_t;
        acc.d_mean += d_mean;
        acc.d_mean2d_norm += (dmx * dmx + dmy * dmy).sqrt();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IDENTITY_QUAT;

    fn cam(size: usize, focal: f64) -> CameraView {
        CameraView::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            focal,
            size,
            size,
            0,
        )
    }

    /// Camera whose optical axis passes through the center of pixel (8, 8).
    fn centered_cam() -> CameraView {
        let mut c = cam(16, 20.0);
        c.principal_point = [8.5, 8.5];
        c
    }

    fn opaque(mean: Vec3, sigma: f64, rgb: [f64; 3]) -> Gaussian3D {
        let mut g = Gaussian3D::isotropic(mean, sigma, 0.5, rgb);
        g.opacity_logit = 40.0;
        g
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let c = cam(32, 30.0);
        let g = Gaussian3D::isotropic(Vec3::zeros(), 0.1, 0.5, [1.0; 3]);
        let s = project_gaussian(&g, 0, &c).unwrap();
        assert!((s.mean2d[0] - 16.0).abs() < 1e-12);
        assert!((s.mean2d[1] - 16.0).abs() < 1e-12);
        assert!((s.depth_center - 5.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_screen_covariance_matches_numerical_jacobian() {
        let c = cam(64, 40.0);
        let sigma = 0.2;
        let g = Gaussian3D::isotropic(Vec3::zeros(), sigma, 0.5, [1.0; 3]);
        let s = project_gaussian(&g, 0, &c).unwrap();
        // numerical Jacobian of the pinhole projection at the camera-space mean
        let t = c.to_camera(&g.mean);
        let proj = |p: &Vec3| [c.focal[0] * p.x / p.z, c.focal[1] * p.y / p.z];
        let h = 1e-6;
        let mut jac = Matrix2x3::zeros();
        for k in 0..3 {
            let mut tp = t;
            tp[k] += h;
            let mut tm = t;
            tm[k] -= h;
            let (a, b) = (proj(&tp), proj(&tm));
            jac[(0, k)] = (a[0] - b[0]) / (2.0 * h);
            jac[(1, k)] = (a[1] - b[1]) / (2.0 * h);
        }
        let expected = jac * (Mat3::identity() * sigma * sigma) * jac.transpose();
        assert!((s.cov2d[0] - COV_DILATION - expected[(0, 0)]).abs() < 1e-6);
        assert!((s.cov2d[2] - COV_DILATION - expected[(1, 1)]).abs() < 1e-6);
        assert!(s.cov2d[1].abs() < 1e-9);
        let closed = (40.0 * sigma / 5.0_f64).powi(2);
        assert!((s.cov2d[0] - COV_DILATION - closed).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let c = cam(32, 30.0);
        let g = Gaussian3D::isotropic(Vec3::new(0.0, 0.0, -6.0), 0.1, 0.5, [1.0; 3]);
        assert!(project_gaussian(&g, 0, &c).is_none());
        let far_side = Gaussian3D::isotropic(Vec3::new(100.0, 0.0, 0.0), 0.1, 0.5, [1.0; 3]);
        assert!(project_gaussian(&far_side, 0, &c).is_none());
    }

    #[test]
    fn opaque_singleton_fills_its_center_pixel() {
        let c = centered_cam();
        let cloud = GaussianCloud::new(vec![opaque(Vec3::zeros(), 0.05, [0.2, 0.5, 0.9])]);
        let b = rasterize(&cloud, &c, None);
        let p = 8 * 16 + 8;
        for ch in 0..3 {
            assert!((b.uri.data[p * 3 + ch] - [0.2, 0.5, 0.9][ch]).abs() < 1e-12);
        }
        assert_eq!(b.final_transmittance.data[p], 0.0);
    }

    #[test]
    fn two_term_blend() {
        let c = centered_cam();
        let mut front = Gaussian3D::isotropic(Vec3::zeros(), 0.05, 0.5, [0.0; 3]);
        front.sh[0] = crate::sh::rgb_to_dc([1.0, 0.0, 0.2]);
        let back = opaque(Vec3::new(0.0, 0.0, 1.0), 0.05, [0.0, 1.0, 0.6]);
        // back listed first to show sorting is internal
        let cloud = GaussianCloud::new(vec![back, front]);
        let b = rasterize(&cloud, &c, None);
        let p = 8 * 16 + 8;
        let expected = [0.5, 0.5, 0.4];
        for ch in 0..3 {
            assert!((b.uri.data[p * 3 + ch] - expected[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_examples() {
        let c = centered_cam();
        let single = GaussianCloud::new(vec![opaque(Vec3::new(0.0, 0.0, -2.0), 0.05, [1.0; 3])]);
        let b = rasterize(&single, &c, None);
        let p = 8 * 16 + 8;
        assert!((render_depth(&b, &[0.0]).data[p] - 3.0).abs() < 1e-12);
        assert_eq!(render_depth(&b, &[1.0]).data[p], 0.0);

        let front = Gaussian3D::isotropic(Vec3::new(0.0, 0.0, -3.0), 0.05, 0.5, [1.0; 3]);
        let back = opaque(Vec3::new(0.0, 0.0, -1.0), 0.05, [1.0; 3]);
        let b = rasterize(&GaussianCloud::new(vec![front, back]), &c, None);
        assert!((render_depth(&b, &[0.0, 0.0]).data[p] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_partition_unity() {
        let c = cam(32, 30.0);
        let gs = (0..6)
            .map(|i| {
                let f = i as f64;
                Gaussian3D::isotropic(
                    Vec3::new(0.3 * f - 0.8, 0.2 * f - 0.5, 0.1 * f),
                    0.3,
                    0.3 + 0.1 * f,
                    [0.5; 3],
                )
            })
            .collect();
        let b = rasterize(&GaussianCloud::new(gs), &c, None);
        for pixel in 0..32 * 32 {
            let sum: f64 = b.pixel_contributions(pixel).iter().map(Contribution::weight).sum();
            assert!((sum + b.final_transmittance.data[pixel] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn effective_opacity_chain() {
        let c = centered_cam();
        let gs: Vec<_> = (0..3)
            .map(|i| Gaussian3D::isotropic(Vec3::new(0.0, 0.0, i as f64), 0.05, 0.5, [1.0; 3]))
            .collect();
        let cloud = GaussianCloud::new(gs);
        let b = rasterize(&cloud, &c, None);
        let eff = b.effective_opacity();
        let light = center_effective_opacity(&cloud, &c);
        for (i, want) in [0.5, 0.25, 0.125].iter().enumerate() {
            assert!((eff[i] - want).abs() < 1e-12);
            assert!((light[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_opacity_behind_opaque_is_zero() {
        let c = centered_cam();
        let mut behind = Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 1.0), 0.05, 0.7, [1.0; 3]);
        behind.rotation = IDENTITY_QUAT;
        let cloud = GaussianCloud::new(vec![opaque(Vec3::zeros(), 0.05, [1.0; 3]), behind]);
        let b = rasterize(&cloud, &c, None);
        let eff = b.effective_opacity();
        assert!((eff[0] - 1.0).abs() < 1e-12);
        assert_eq!(eff[1], 0.0);
        assert_eq!(center_effective_opacity(&cloud, &c)[1], 0.0);
    }

    #[test]
    fn zero_keep_weight_reverts_to_background() {
        let c = centered_cam();
        let g = Gaussian3D::isotropic(Vec3::zeros(), 0.1, 0.8, [1.0; 3]);
        let b = rasterize(&GaussianCloud::new(vec![g]), &c, Some(&[0.0]));
        assert!(b.uri.data.iter().all(|&v| v == 0.0));
        assert!(b.final_transmittance.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_frame_is_flagged() {
        let c = cam(16, 20.0);
        let g = Gaussian3D::isotropic(Vec3::new(0.0, 0.0, -10.0), 0.1, 0.8, [1.0; 3]);
        let b = rasterize(&GaussianCloud::new(vec![g]), &c, None);
        assert!(b.empty_frame);
        assert!(b.uri.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_is_continuous_at_support_edge() {
        assert_eq!(kernel_from_power(0.0), 1.0);
        assert!(kernel_from_power(KERNEL_CUTOFF - 1e-12) < 1e-12);
        assert_eq!(kernel_from_power(KERNEL_CUTOFF), 0.0);
    }

    fn random_cloud(seed: u64, n: usize) -> Vec<Gaussian3D> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mean = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let rgb = [rng.random(), rng.random(), rng.random()];
                Gaussian3D::isotropic(mean, rng.random_range(0.05..0.4), rng.random_range(0.05..0.95), rgb)
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn input_order_does_not_change_the_image(seed in 0u64..500, n in 2usize..12, shift in 1usize..11) {
            let c = cam(24, 30.0);
            let gs = random_cloud(seed, n);
            let mut rotated = gs.clone();
            rotated.rotate_left(shift % n);
            rotated.reverse();
            let a = rasterize(&GaussianCloud::new(gs), &c, None);
            let b = rasterize(&GaussianCloud::new(rotated), &c, None);
            for (x, y) in a.uri.data.iter().zip(&b.uri.data) {
                proptest::prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn weights_and_transmittance_partition_unity(seed in 0u64..500, n in 1usize..12) {
            let c = cam(24, 30.0);
            let b = rasterize(&GaussianCloud::new(random_cloud(seed, n)), &c, None);
            for pixel in 0..24 * 24 {
                let sum: f64 = b.pixel_contributions(pixel).iter().map(Contribution::weight).sum();
                proptest::prop_assert!((sum + b.final_transmittance.data[pixel] - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn front_weight_grows_with_its_opacity(o1 in 0.01f64..0.98, d in 0.001f64..0.5, back in 0.0f64..0.99) {
            let c = centered_cam();
            let center = 8 * 16 + 8;
            let front_weight = |o: f64| {
                let gs = vec![
                    Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 1.0), 0.1, back, [0.2; 3]),
                    Gaussian3D::isotropic(Vec3::zeros(), 0.1, o, [0.9; 3]),
                ];
                let b = rasterize(&GaussianCloud::new(gs), &c, None);
                b.pixel_contributions(center)
                    .iter()
                    .filter(|k| b.splats[k.splat as usize].gaussian_index == 1)
                    .map(Contribution::weight)
                    .sum::<f64>()
            };
            let o2 = (o1 + d).min(0.99);
            proptest::prop_assert!(front_weight(o2) >= front_weight(o1));
        }
    }
}
