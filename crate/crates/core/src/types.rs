//! Scene representation shared by every stage: Gaussians, cameras, images,
//! and the rotation/scale parameterization of a Gaussian's covariance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::SH_COEFFS;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// One anisotropic Gaussian primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vec3,
    pub rotation: Quat,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// `sh[k][c]`: coefficient `k` (bands 0..=3) of color channel `c`.
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_from_params(&self.rotation, &self.log_scale)
    }

    /// An isotropic, view-independent Gaussian of color `rgb`.
    pub fn isotropic(mean: Vec3, sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[0] = crate::sh::rgb_to_dc(rgb);
        Gaussian3D {
            mean,
            rotation: IDENTITY_QUAT,
            log_scale: Vec3::repeat(sigma.ln()),
            opacity_logit: logit(opacity),
            sh,
        }
    }
}

/// The learnable scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    /// Bumped by every structural edit, so stale tapes can be detected.
    pub generation: u64,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        GaussianCloud {
            gaussians,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Axis-aligned bounds of the Gaussian means.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.gaussians.first()?.mean;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.mean), hi.sup(&g.mean))
        }))
    }

    pub fn retain_mask(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.gaussians.len());
        let mut it = keep.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        self.generation += 1;
    }
}

/// Rotation matrix of a (not necessarily normalized) quaternion.
pub fn rotation_matrix(q: &Quat) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on [`rotation_matrix`]'s output back to the raw quaternion,
/// including the normalization.
pub fn rotation_matrix_backward(q: &Quat, d_rot: &Mat3) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dn = [dw, dx, dy, dz];
    let unit = [w, x, y, z];
    let dot: f64 = dn.iter().zip(&unit).map(|(a, b)| a * b).sum();
    [
        (dn[0] - unit[0] * dot) / n,
        (dn[1] - unit[1] * dot) / n,
        (dn[2] - unit[2] * dot) / n,
        (dn[3] - unit[3] * dot) / n,
    ]
}

pub fn normalize_quat(q: &mut Quat) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 && n.is_finite() {
        q.iter_mut().for_each(|c| *c /= n);
    } else {
        *q = IDENTITY_QUAT;
    }
}

/// Quaternion of a rotation matrix (Shepperd's method).
pub fn quat_from_rotation(m: &Mat3) -> Quat {
    let trace = m.trace();
    let mut q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    normalize_quat(&mut q);
    q
}

/// Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)).
pub fn covariance_from_params(rotation: &Quat, log_scale: &Vec3) -> Mat3 {
    let r = rotation_matrix(rotation);
    let m = r * Mat3::from_diagonal(&log_scale.map(f64::exp));
    m * m.transpose()
}

/// Backward of [`covariance_from_params`] given a symmetric upstream gradient.
pub fn covariance_backward(rotation: &Quat, log_scale: &Vec3, d_cov: &Mat3) -> (Quat, Vec3) {
    let r = rotation_matrix(rotation);
    let s = log_scale.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    // d(M Mᵀ) with symmetric upstream: dM = (G + Gᵀ) M
    let d_m = (d_cov + d_cov.transpose()) * m;
    let d_r = d_m * Mat3::from_diagonal(&s);
    let mut d_log = Vec3::zeros();
    for k in 0..3 {
        let ds: f64 = (0..3).map(|i| d_m[(i, k)] * r[(i, k)]).sum();
        d_log[k] = ds * s[k];
    }
    (rotation_matrix_backward(rotation, &d_r), d_log)
}

/// Pinhole camera with a world-to-camera rigid transform (x right, y down,
/// z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub gt_image: Option<Image>,
    pub view_id: usize,
}

impl CameraView {
    /// Camera at `eye` looking toward `target`, with `up` roughly the world's
    /// up direction. The principal point is placed at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
        view_id: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rot[(r, c)];
            }
        }
        CameraView {
            rotation,
            translation: [t.x, t.y, t.z],
            focal: [focal, focal],
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
            gt_image: None,
            view_id,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let r = &self.rotation;
        Mat3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation_vector(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    /// Unit world-space direction of the ray through the center of pixel
    /// `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Vec3 {
        let u = px as f64 + 0.5;
        let v = py as f64 + 0.5;
        let d = Vec3::new(
            (u - self.principal_point[0]) / self.focal[0],
            (v - self.principal_point[1]) / self.focal[1],
            1.0,
        );
        (self.rotation_matrix().transpose() * d).normalize()
    }

    /// The same camera at another resolution: intrinsics scale with the image
    /// and the ground truth, if any, is resampled.
    pub fn resized(&self, width: usize, height: usize) -> CameraView {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraView {
            focal: [self.focal[0] * sx, self.focal[1] * sy],
            principal_point: [self.principal_point[0] * sx, self.principal_point[1] * sy],
            width,
            height,
            gt_image: self.gt_image.as_ref().map(|g| g.resized(width, height)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "camera {} has non-positive focal length",
                self.view_id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "camera {} has empty image size",
                self.view_id
            )));
        }
        if let Some(gt) = &self.gt_image {
            if gt.width != self.width || gt.height != self.height || gt.channels != 3 {
                return Err(Error::DimensionMismatch {
                    expected: (self.width, self.height, 3),
                    actual: (gt.width, gt.height, gt.channels),
                });
            }
        }
        Ok(())
    }
}

/// Row-major image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: (width, height, channels),
                actual: (data.len(), 1, 1),
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resample to a new size (pixel-center aligned).
    pub fn resized(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bot = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    out.set(x, y, c, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }
}
