//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Band ordering and signs follow the convention used by the common Gaussian
//! splatting codebases, so coefficients exported from them evaluate the same.

use crate::types::Vec3;

pub const SH_DEGREE: usize = 3;
pub const SH_COEFFS: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1);

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Degree-0 coefficients whose evaluation is the constant color `rgb`.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| c / SH_C0)
}

pub fn basis(d: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of every basis function with respect to the (unnormalized)
/// direction components.
pub fn basis_jacobian(d: &Vec3) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [
            -2.0 * SH_C2[2] * x,
            -2.0 * SH_C2[2] * y,
            4.0 * SH_C2[2] * z,
        ],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ],
        [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ],
        [
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * (-2.0 * y * z),
            SH_C3[5] * (xx - yy),
        ],
        [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            SH_C3[6] * (-6.0 * x * y),
            0.0,
        ],
    ]
}

/// Raw (unclamped) RGB of the coefficients seen along unit direction `dir`.
pub fn sh_eval(coeffs: &[[f64; 3]; SH_COEFFS], dir: &Vec3) -> [f64; 3] {
    let b = basis(dir);
    let mut rgb = [0.0; 3];
    for (bk, ck) in b.iter().zip(coeffs) {
        for c in 0..3 {
            rgb[c] += bk * ck[c];
        }
    }
    rgb
}

/// Backward of [`sh_eval`]: accumulates coefficient gradients into `d_coeffs`
/// and returns the gradient with respect to `dir`.
pub fn sh_eval_backward(
    coeffs: &[[f64; 3]; SH_COEFFS],
    dir: &Vec3,
    d_rgb: &[f64; 3],
    d_coeffs: &mut [[f64; 3]; SH_COEFFS],
) -> Vec3 {
    let b = basis(dir);
    let jac = basis_jacobian(dir);
    let mut d_dir = Vec3::zeros();
    for k in 0..SH_COEFFS {
        let mut proj = 0.0;
        for c in 0..3 {
            d_coeffs[k][c] += b[k] * d_rgb[c];
            proj += coeffs[k][c] * d_rgb[c];
        }
        d_dir.x += proj * jac[k][0];
        d_dir.y += proj * jac[k][1];
        d_dir.z += proj * jac[k][2];
    }
    d_dir
}
