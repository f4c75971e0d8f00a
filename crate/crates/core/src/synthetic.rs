//! Procedural ground-truth scenes: a textured height-field seabed seen from an
//! arc of cameras through a known medium, with optional floaters planted in
//! the water column.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::medium::{forward_simulate, Aabb, MediumParams, VMGrid, BETA_PRIOR};
use crate::mlp::PruneMlp;
use crate::paup::PruneWeights;
use crate::pipeline::Model;
use crate::raster::{project_gaussian, rasterize};
use crate::sh::rgb_to_dc;
use crate::types::{quat_from_rotation, softplus_inverse, CameraView, Gaussian3D, GaussianCloud, Image, Mat3, Vec3};

/// Veiling light of every generated medium.
pub const TRUE_B_INFINITY: [f64; 3] = [0.2, 0.4, 0.5];
/// Footprint a floater must exceed in at least one view, in square pixels.
pub const FLOATER_MIN_FOOTPRINT: f64 = 4.0;
/// Floater distance threshold in units of the median surface-Gaussian scale.
pub const FLOATER_DISTANCE_SCALES: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_views: usize,
    /// Camera height above the mean seabed level.
    pub camera_height: f64,
    /// Horizontal radius of the camera arc.
    pub arc_radius: f64,
    /// Half-angle of the arc, radians.
    pub arc_half_angle: f64,
    /// Seabed patch spans `[-half_extent, half_extent]²`.
    pub half_extent: f64,
    pub held_out: Vec<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            n_views: 12,
            camera_height: 3.0,
            arc_radius: 1.0,
            arc_half_angle: std::f64::consts::FRAC_PI_4,
            half_extent: 2.5,
            held_out: vec![3, 8],
        }
    }
}

/// Gentle rolling seabed `z = h(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightField {
    pub amplitude: f64,
}

impl HeightField {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.amplitude * ((1.3 * x + 0.4).sin() * (0.9 * y).cos() + 0.5 * (0.7 * x - 1.1 * y).sin())
    }

    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let a = self.amplitude;
        let dx = a * (1.3 * (1.3 * x + 0.4).cos() * (0.9 * y).cos() + 0.35 * (0.7 * x - 1.1 * y).cos());
        let dy = a * (-0.9 * (1.3 * x + 0.4).sin() * (0.9 * y).sin() - 0.55 * (0.7 * x - 1.1 * y).cos());
        (dx, dy)
    }

    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (dx, dy) = self.gradient(x, y);
        Vec3::new(-dx, -dy, 1.0).normalize()
    }

    /// First-order distance from `p` to the surface.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let (dx, dy) = self.gradient(p.x, p.y);
        (p.z - self.height(p.x, p.y)).abs() / (1.0 + dx * dx + dy * dy).sqrt()
    }

    /// Distance along the unit ray `origin + t·dir` to its first surface hit.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<f64> {
        let f = |t: f64| {
            let p = origin + dir * t;
            p.z - self.height(p.x, p.y)
        };
        if f(0.0) <= 0.0 {
            return None;
        }
        let step = 0.02;
        let mut t0 = 0.0;
        while t0 < t_max {
            let t1 = t0 + step;
            if f(t1) <= 0.0 {
                let (mut lo, mut hi) = (t0, t1);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            t0 = t1;
        }
        None
    }
}

/// Procedural albedo, kept inside `[0.1, 0.9]`.
pub fn seabed_color(x: f64, y: f64) -> [f64; 3] {
    [
        0.5 + 0.3 * (2.3 * x + 0.5).sin() * (1.9 * y).cos(),
        0.5 + 0.3 * (1.7 * x - 1.2 * y + 1.0).sin(),
        0.45 + 0.3 * (2.9 * x).cos() * (2.1 * y + 0.3).sin(),
    ]
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Surface Gaussians first, then floaters.
    pub cloud: GaussianCloud,
    /// Every view, with its degraded image as ground truth.
    pub cameras: Vec<CameraView>,
    pub true_medium: MediumParams,
    pub clean_images: Vec<Image>,
    pub uw_images: Vec<Image>,
    pub true_depths: Vec<Image>,
    pub depth_valid: Vec<Vec<bool>>,
    pub floater_indices: Vec<usize>,
    pub surface: HeightField,
    /// Median largest axis scale of the surface Gaussians.
    pub surface_scale: f64,
    pub held_out: Vec<usize>,
}

impl SyntheticScene {
    pub fn floater_distance_threshold(&self) -> f64 {
        FLOATER_DISTANCE_SCALES * self.surface_scale
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|v| !self.held_out.contains(v)).collect()
    }

    /// The cloud without its planted floaters.
    pub fn surface_cloud(&self) -> GaussianCloud {
        let keep: Vec<bool> = (0..self.cloud.len()).map(|i| !self.floater_indices.contains(&i)).collect();
        let mut c = self.cloud.clone();
        c.retain_mask(&keep);
        c
    }
}

pub fn make_scene(seed: u64, n_surface: usize, n_floaters: usize, grid_variation: bool) -> Result<SyntheticScene> {
    make_scene_with(&SceneConfig::default(), seed, n_surface, n_floaters, grid_variation)
}

pub fn make_scene_with(
    cfg: &SceneConfig,
    seed: u64,
    n_surface: usize,
    n_floaters: usize,
    grid_variation: bool,
) -> Result<SyntheticScene> {
    if n_surface == 0 || cfg.n_views < 2 || cfg.width == 0 || cfg.height == 0 {
        return Err(Error::InvalidConfig(
            "a scene needs surface Gaussians, two views and a nonempty image".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface = HeightField { amplitude: 0.15 };
    let cameras = arc_cameras(cfg);

    // surface: jittered grid of normal-aligned flat Gaussians
    let nx = (n_surface as f64).sqrt().ceil() as usize;
    let ny = n_surface.div_ceil(nx);
    let span = 2.0 * cfg.half_extent;
    let (sx, sy) = (span / nx as f64, span / ny as f64);
    let tangent_sigma = 0.75 * sx.max(sy);
    let normal_sigma = 0.1 * tangent_sigma;
    let mut gaussians = Vec::with_capacity(n_surface + n_floaters);
    for i in 0..n_surface {
        let (cx, cy) = ((i % nx) as f64 + 0.5, (i / nx) as f64 + 0.5);
        let x = -cfg.half_extent + sx * (cx + rng.random_range(-0.25..0.25));
        let y = -cfg.half_extent + sy * (cy + rng.random_range(-0.25..0.25));
        let n = surface.normal(x, y);
        let t1 = Vec3::y().cross(&n).normalize();
        let t2 = n.cross(&t1);
        let rot = Mat3::from_columns(&[t1, t2, n]);
        let mut sh = [[0.0; 3]; 16];
        sh[0] = rgb_to_dc(seabed_color(x, y));
        gaussians.push(Gaussian3D {
            mean: Vec3::new(x, y, surface.height(x, y)),
            rotation: quat_from_rotation(&rot),
            log_scale: Vec3::new(tangent_sigma.ln(), tangent_sigma.ln(), normal_sigma.ln()),
            opacity_logit: crate::types::logit(0.95),
            sh,
        });
    }
    let surface_scale = tangent_sigma;
    let delta = FLOATER_DISTANCE_SCALES * surface_scale;

    // floaters: isotropic blobs part way along rays toward the seabed
    let mut floater_indices = Vec::with_capacity(n_floaters);
    for _ in 0..n_floaters {
        let g = place_floater(cfg, &cameras, &surface, delta, &mut rng)?;
        floater_indices.push(gaussians.len());
        gaussians.push(g);
    }
    let cloud = GaussianCloud::new(gaussians);

    let bbox = Aabb::around(
        cloud.gaussians.iter().map(|g| g.mean).chain(cameras.iter().map(|c| c.center())),
        0.05,
    )?;
    let true_medium = if grid_variation {
        ramp_medium(bbox)
    } else {
        MediumParams::constant(bbox, 2, BETA_PRIOR, BETA_PRIOR, TRUE_B_INFINITY)
    };

    let surface_only = {
        let mut c = cloud.clone();
        let keep: Vec<bool> = (0..c.len()).map(|i| i < n_surface).collect();
        c.retain_mask(&keep);
        c
    };
    let mut out_cams = Vec::with_capacity(cameras.len());
    let (mut clean_images, mut uw_images, mut true_depths, mut depth_valid) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for cam in &cameras {
        let clean = rasterize(&surface_only, cam, None).uri;
        let (depth, valid) = true_depth(&surface, cam, cfg.half_extent);
        let uw = forward_simulate(&clean, &depth, &valid, &true_medium, cam)?;
        let mut c = cam.clone();
        c.gt_image = Some(uw.clone());
        out_cams.push(c);
        clean_images.push(clean);
        uw_images.push(uw);
        true_depths.push(depth);
        depth_valid.push(valid);
    }

    Ok(SyntheticScene {
        cloud,
        cameras: out_cams,
        true_medium,
        clean_images,
        uw_images,
        true_depths,
        depth_valid,
        floater_indices,
        surface,
        surface_scale,
        held_out: cfg.held_out.iter().copied().filter(|&v| v < cfg.n_views).collect(),
    })
}

fn arc_cameras(cfg: &SceneConfig) -> Vec<CameraView> {
    (0..cfg.n_views)
        .map(|v| {
            let s = v as f64 / (cfg.n_views - 1) as f64;
            let a = cfg.arc_half_angle * (2.0 * s - 1.0);
            let eye = Vec3::new(cfg.arc_radius * a.sin(), -cfg.arc_radius * a.cos(), cfg.camera_height);
            CameraView::look_at(eye, Vec3::zeros(), Vec3::z(), cfg.width as f64, cfg.width, cfg.height, v)
        })
        .collect()
}

fn place_floater(
    cfg: &SceneConfig,
    cameras: &[CameraView],
    surface: &HeightField,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Gaussian3D> {
    for _ in 0..1000 {
        let cam = &cameras[rng.random_range(0..cameras.len())];
        let px = rng.random_range(cfg.width / 5..cfg.width - cfg.width / 5);
        let py = rng.random_range(cfg.height / 5..cfg.height - cfg.height / 5);
        let dir = cam.pixel_ray(px, py);
        let Some(t_hit) = surface.intersect(&cam.center(), &dir, 100.0) else {
            continue;
        };
        let mean = cam.center() + dir * (t_hit * rng.random_range(0.25..0.6));
        if surface.distance(&mean) <= 1.25 * delta {
            continue;
        }
        let sigma = rng.random_range(0.06..0.1);
        let color = [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
        let g = Gaussian3D::isotropic(mean, sigma, rng.random_range(0.2..=0.6), color);
        let big = project_gaussian(&g, 0, cam).is_some_and(|s| s.footprint_area() > 2.0 * FLOATER_MIN_FOOTPRINT);
        if big {
            return Ok(g);
        }
    }
    Err(Error::InvalidConfig(
        "could not place a floater clear of the surface; use more surface Gaussians".into(),
    ))
}

/// Linear ramp of both coefficient fields along x, from 0.7× to 1.3× the
/// prior. Two grid nodes per axis make trilinear interpolation exact.
fn ramp_medium(bbox: Aabb) -> MediumParams {
    let grid = || {
        let mut g = VMGrid::constant(bbox, 2, 1, BETA_PRIOR.map(|b| softplus_inverse(0.7 * b)));
        let comps = &mut g.comps;
        for c in 0..3 {
            let iu = comps.vec_index(c, 0, 1);
            comps.u[iu] = softplus_inverse(1.3 * BETA_PRIOR[c]) - softplus_inverse(0.7 * BETA_PRIOR[c]);
            let im = comps.mat_index(c, 0, 0, 0);
            comps.m[im..im + 4].fill(1.0);
            for j in 0..2 {
                let iv = comps.vec_index(c, 0, j);
                comps.v[iv] = 1.0;
                comps.w[iv] = 1.0;
            }
        }
        g
    };
    MediumParams {
        b_inf_logit: TRUE_B_INFINITY.map(crate::types::logit),
        grid_d: grid(),
        grid_b: grid(),
    }
}

/// Exact ray-surface distance per pixel; rays missing the patch are invalid.
pub fn true_depth(surface: &HeightField, cam: &CameraView, half_extent: f64) -> (Image, Vec<bool>) {
    let mut depth = Image::new(cam.width, cam.height, 1);
    let mut valid = vec![false; cam.width * cam.height];
    let origin = cam.center();
    for py in 0..cam.height {
        for px in 0..cam.width {
            let dir = cam.pixel_ray(px, py);
            if let Some(t) = surface.intersect(&origin, &dir, 100.0) {
                let hit = origin + dir * t;
                if hit.x.abs() <= half_extent && hit.y.abs() <= half_extent {
                    let p = py * cam.width + px;
                    depth.data[p] = t;
                    valid[p] = true;
                }
            }
        }
    }
    (depth, valid)
}

/// Percentage of Gaussians lying farther than the floater threshold from the
/// true surface while covering more than [`FLOATER_MIN_FOOTPRINT`] square
/// pixels in at least one view.
pub fn floater_ratio(cloud: &GaussianCloud, scene: &SyntheticScene) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let delta = scene.floater_distance_threshold();
    let count = cloud
        .gaussians
        .iter()
        .filter(|g| is_floater(g, scene, delta))
        .count();
    100.0 * count as f64 / cloud.len() as f64
}

fn is_floater(g: &Gaussian3D, scene: &SyntheticScene, delta: f64) -> bool {
    scene.surface.distance(&g.mean) > delta
        && scene.cameras.iter().any(|cam| {
            project_gaussian(g, 0, cam).is_some_and(|s| {
                s.center_pixel(cam.width, cam.height).is_some() && s.footprint_area() > FLOATER_MIN_FOOTPRINT
            })
        })
}

/// Solves the image formation model for the clean radiance given the true
/// medium and depth.
pub fn invert_underwater(
    uw: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    cam: &CameraView,
) -> Image {
    let b_inf = medium.b_infinity();
    let center = cam.center();
    let mut out = Image::new(uw.width, uw.height, 3);
    for py in 0..uw.height {
        for px in 0..uw.width {
            let p = py * uw.width + px;
            if !valid[p] {
                continue;
            }
            let z = depth.data[p];
            let x = center + cam.pixel_ray(px, py) * z;
            let bd = medium.grid_d.query_beta(&x);
            let bb = medium.grid_b.query_beta(&x);
            for c in 0..3 {
                let veil = b_inf[c] * (1.0 - (-bb[c] * z).exp());
                out.data[3 * p + c] = (uw.data[3 * p + c] - veil) * (bd[c] * z).exp();
            }
        }
    }
    out
}

/// A small randomized model for gradient checks: a backdrop Gaussian plus
/// `n_gaussians - 1` anisotropic ones with random higher SH bands, a random
/// medium grid, and three `size`-square views with noise ground truth.
pub fn gradient_check_scene(seed: u64, n_gaussians: usize, size: usize) -> Result<(Model, Vec<CameraView>)> {
    if n_gaussians == 0 || size == 0 {
        return Err(Error::InvalidConfig("gradient check needs at least one Gaussian and one pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = vec![Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 1.5), 1.5, 0.7, [0.3, 0.4, 0.5])];
    for _ in 1..n_gaussians {
        let mean = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5));
        let rgb = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let mut g = Gaussian3D::isotropic(mean, rng.random_range(0.12..0.25), rng.random_range(0.3..0.7), rgb);
        for band in g.sh.iter_mut().skip(1) {
            for c in band.iter_mut() {
                *c = rng.random_range(-0.1..0.1);
            }
        }
        let q = [1.0, rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.rotation = q.map(|v| v / norm);
        g.log_scale.x += rng.random_range(0.0..0.4);
        gs.push(g);
    }
    let cloud = GaussianCloud::new(gs);
    let bbox = Aabb::around(cloud.gaussians.iter().map(|g| g.mean), 0.1)?;
    let mut medium = MediumParams::new(bbox, 6, 2, [0.3, 0.4, 0.5], &mut rng)?;
    for x in medium.grid_d.comps.u.iter_mut().chain(medium.grid_b.comps.w.iter_mut()) {
        *x = rng.random_range(-0.5..0.5);
    }
    let mlp = PruneMlp::new(&mut rng);
    let focal = 1.25 * size as f64;
    let mut cams = Vec::with_capacity(3);
    for i in 0..3 {
        let eye = Vec3::new(0.4 * (i as f64 - 1.0), 0.1, -4.0);
        let mut cam = CameraView::look_at(eye, Vec3::zeros(), -Vec3::y(), focal, size, size, i);
        let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        cam.gt_image = Some(Image::from_data(size, size, 3, data)?);
        cams.push(cam);
    }
    let model = Model {
        cloud,
        medium,
        mlp,
        prune_weights: PruneWeights::default(),
        uncertainty: None,
    };
    Ok((model, cams))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticScene {
        make_scene(7, 100, 10, false).unwrap()
    }

    #[test]
    fn no_floaters_requested_gives_none() {
        let s = make_scene(1, 64, 0, false).unwrap();
        assert!(s.floater_indices.is_empty());
        assert_eq!(s.cloud.len(), 64);
    }

    #[test]
    fn generation_is_a_function_of_the_seed() {
        let a = make_scene(3, 100, 5, true).unwrap();
        let b = make_scene(3, 100, 5, true).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.uw_images, b.uw_images);
        assert_eq!(a.true_medium, b.true_medium);
        let c = make_scene(4, 100, 5, true).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn surface_render_covers_the_central_crop() {
        for n in [100, 500] {
            let s = make_scene(2, n, 0, false).unwrap();
            for cam in &s.cameras {
                let b = rasterize(&s.cloud, cam, None);
                let (w, h) = (cam.width, cam.height);
                let mut thin = 0;
                for py in h / 4..3 * h / 4 {
                    for px in w / 4..3 * w / 4 {
                        if 1.0 - b.final_transmittance.data[py * w + px] < 0.95 {
                            thin += 1;
                        }
                    }
                }
                assert_eq!(thin, 0, "n = {n}, view {}", cam.view_id);
            }
        }
    }

    #[test]
    fn floater_indices_point_into_the_cloud() {
        let s = small();
        assert_eq!(s.floater_indices, (100..110).collect::<Vec<_>>());
        for &i in &s.floater_indices {
            let a = s.cloud.gaussians[i].opacity();
            assert!((0.2 - 1e-12..=0.6 + 1e-12).contains(&a));
        }
    }

    #[test]
    fn floater_ratio_counts_exactly_the_planted_floaters() {
        let s = small();
        assert!((floater_ratio(&s.cloud, &s) - 100.0 * 10.0 / 110.0).abs() < 1e-9);
        assert_eq!(floater_ratio(&s.surface_cloud(), &s), 0.0);
    }

    #[test]
    fn degraded_images_invert_to_the_clean_ones() {
        for variation in [false, true] {
            let s = make_scene(5, 100, 3, variation).unwrap();
            for v in 0..s.cameras.len() {
                let j = invert_underwater(&s.uw_images[v], &s.true_depths[v], &s.depth_valid[v], &s.true_medium, &s.cameras[v]);
                for p in 0..j.pixel_count() {
                    if s.depth_valid[v][p] {
                        for c in 0..3 {
                            assert!((j.data[3 * p + c] - s.clean_images[v].data[3 * p + c]).abs() < 1e-5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ramp_medium_is_linear_along_x() {
        let s = make_scene(5, 100, 0, true).unwrap();
        let b = s.true_medium.grid_d.bbox;
        let at = |t: f64| {
            let x = b.min[0] + t * (b.max[0] - b.min[0]);
            s.true_medium.grid_d.query_beta(&Vec3::new(x, 0.0, 0.0))[0]
        };
        assert!((at(0.0) - 0.07).abs() < 1e-12);
        assert!((at(1.0) - 0.13).abs() < 1e-12);
        assert!((at(0.5) - 0.10).abs() < 1e-12);
    }

    #[test]
    fn true_depth_hits_the_heightfield() {
        let s = small();
        let cam = &s.cameras[0];
        let (d, valid) = (&s.true_depths[0], &s.depth_valid[0]);
        let p = (cam.height / 2) * cam.width + cam.width / 2;
        assert!(valid[p]);
        let hit = cam.center() + cam.pixel_ray(cam.width / 2, cam.height / 2) * d.data[p];
        assert!((hit.z - s.surface.height(hit.x, hit.y)).abs() < 1e-9);
    }

    #[test]
    fn heightfield_gradient_matches_finite_differences() {
        let h = HeightField { amplitude: 0.15 };
        let (x, y, e) = (0.3, -0.8, 1e-6);
        let (dx, dy) = h.gradient(x, y);
        assert!((dx - (h.height(x + e, y) - h.height(x - e, y)) / (2.0 * e)).abs() < 1e-8);
        assert!((dy - (h.height(x, y + e) - h.height(x, y - e)) / (2.0 * e)).abs() < 1e-8);
    }
}
