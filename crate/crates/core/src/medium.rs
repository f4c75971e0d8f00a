//! Learnable water medium: veiling light and two low-rank voxel grids holding
//! the per-channel attenuation (β^D) and backscatter (β^B) coefficients.
//!
//! Each grid stores, per channel `c` and rank `r`, a vector `u` over the first
//! axis, a matrix `M` over the other two, and vectors `v`, `w` modulating the
//! matrix rows and columns:
//!
//! ```text
//! β(i, j, k) = softplus(bias_c + Σ_r u[i] · M[j, k] · v[j] · w[k])
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{sigmoid, softplus, softplus_inverse, CameraView, Image, Vec3};

pub const GRID_RESOLUTION: usize = 64;
pub const GRID_RANK: usize = 16;
pub const BETA_PRIOR: [f64; 3] = [0.1, 0.15, 0.2];
const INIT_STD: f64 = 0.01;
const SNAP_EPS: f64 = 1e-9;

/// Axis-aligned box in world space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Aabb {
            min: [min.x, min.y, min.z],
            max: [max.x, max.y, max.z],
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|a| self.max[a] > self.min[a] && (self.max[a] - self.min[a]).is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate bounding box {self:?}")))
        }
    }

    /// Bounds of `points` grown by `margin` of the extent on every side. Flat
    /// axes get a unit extent so the box stays nondegenerate.
    pub fn around(points: impl IntoIterator<Item = Vec3>, margin: f64) -> Result<Self> {
        let mut it = points.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidConfig("bounding box of an empty point set".into()))?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p)));
        let mut ext = hi - lo;
        for e in ext.iter_mut() {
            if *e <= 0.0 {
                *e = 1.0;
            }
        }
        let center = (lo + hi) * 0.5;
        let half = ext * (0.5 + margin);
        Aabb::new(center - half, center + half)
    }
}

/// Factor arrays of one grid. Doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct VmComponents {
    pub resolution: usize,
    pub rank: usize,
    pub bias: [f64; 3],
    /// `[c][r][i]`
    pub u: Vec<f64>,
    /// `[c][r][j][k]`
    pub m: Vec<f64>,
    /// `[c][r][j]`
    pub v: Vec<f64>,
    /// `[c][r][k]`
    pub w: Vec<f64>,
}

impl VmComponents {
    pub fn zeros(resolution: usize, rank: usize) -> Self {
        let nv = 3 * rank * resolution;
        VmComponents {
            resolution,
            rank,
            bias: [0.0; 3],
            u: vec![0.0; nv],
            m: vec![0.0; nv * resolution],
            v: vec![0.0; nv],
            w: vec![0.0; nv],
        }
    }

    #[inline]
    pub fn vec_index(&self, c: usize, r: usize, i: usize) -> usize {
        (c * self.rank + r) * self.resolution + i
    }

    #[inline]
    pub fn mat_index(&self, c: usize, r: usize, j: usize, k: usize) -> usize {
        ((c * self.rank + r) * self.resolution + j) * self.resolution + k
    }

    /// Pre-softplus value at a voxel.
    pub fn raw(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        let mut s = self.bias[c];
        for r in 0..self.rank {
            s += self.u[self.vec_index(c, r, i)]
                * self.m[self.mat_index(c, r, j, k)]
                * self.v[self.vec_index(c, r, j)]
                * self.w[self.vec_index(c, r, k)];
        }
        s
    }

    /// Accumulates `d_raw` at voxel `(i, j, k)` of channel `c` into `grad`.
    pub fn raw_backward(&self, c: usize, i: usize, j: usize, k: usize, d_raw: f64, grad: &mut VmComponents) {
        grad.bias[c] += d_raw;
        for r in 0..self.rank {
            let (iu, im) = (self.vec_index(c, r, i), self.mat_index(c, r, j, k));
            let (iv, iw) = (self.vec_index(c, r, j), self.vec_index(c, r, k));
            let (u, m, v, w) = (self.u[iu], self.m[im], self.v[iv], self.w[iw]);
            grad.u[iu] += d_raw * m * v * w;
            grad.m[im] += d_raw * u * v * w;
            grad.v[iv] += d_raw * u * m * w;
            grad.w[iw] += d_raw * u * m * v;
        }
    }

    /// Sum of squared factor entries (bias excluded).
    pub fn factor_sq_norm(&self) -> f64 {
        [&self.u, &self.m, &self.v, &self.w]
            .iter()
            .flat_map(|a| a.iter())
            .map(|x| x * x)
            .sum()
    }

    /// Visits every scalar together with the matching scalar of `other`.
    pub fn zip_mut(&mut self, other: &VmComponents, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            f(a, *b);
        }
        for (dst, src) in [
            (&mut self.u, &other.u),
            (&mut self.m, &other.m),
            (&mut self.v, &other.v),
            (&mut self.w, &other.w),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                f(a, *b);
            }
        }
    }

    /// Every scalar in the order bias, u, m, v, w.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        out.extend_from_slice(&self.bias);
        for a in [&self.u, &self.m, &self.v, &self.w] {
            out.extend_from_slice(a);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat); `None` on a length mismatch.
    pub fn from_flat(resolution: usize, rank: usize, flat: &[f64]) -> Option<Self> {
        let mut c = VmComponents::zeros(resolution, rank);
        if flat.len() != c.scalar_count() {
            return None;
        }
        c.bias.copy_from_slice(&flat[..3]);
        let mut at = 3;
        for a in [&mut c.u, &mut c.m, &mut c.v, &mut c.w] {
            let len = a.len();
            a.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Some(c)
    }

    pub fn scalar_count(&self) -> usize {
        3 + self.u.len() + self.m.len() + self.v.len() + self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.iter().all(|v| v.is_finite())
            && [&self.u, &self.m, &self.v, &self.w]
                .iter()
                .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Corner indices and interpolation fractions of a trilinear lookup.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearSample {
    pub base: [usize; 3],
    pub frac: [f64; 3],
    /// d(grid coordinate)/d(world coordinate) per axis; 0 where the point was
    /// clamped to the box.
    pub coord_scale: [f64; 3],
}

impl TrilinearSample {
    /// The eight corners with their weights and, per axis, the derivative of
    /// the weight with respect to that axis' fraction.
    pub fn corners(&self) -> [([usize; 3], f64, [f64; 3]); 8] {
        let mut out = [([0; 3], 0.0, [0.0; 3]); 8];
        for (n, slot) in out.iter_mut().enumerate() {
            let bits = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
            let mut idx = [0; 3];
            let mut f = [0.0; 3];
            let mut df = [0.0; 3];
            for a in 0..3 {
                idx[a] = self.base[a] + bits[a];
                (f[a], df[a]) = if bits[a] == 1 {
                    (self.frac[a], 1.0)
                } else {
                    (1.0 - self.frac[a], -1.0)
                };
            }
            let weight = f[0] * f[1] * f[2];
            let dw = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
            *slot = (idx, weight, dw);
        }
        out
    }
}

/// One VM-decomposed voxel grid over a bounding box. Grid nodes sit at
/// `min + i · extent / (G − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VMGrid {
    pub bbox: Aabb,
    pub comps: VmComponents,
}

impl VMGrid {
    /// Grid whose reconstructed value is `init` everywhere up to the small
    /// random factor noise.
    pub fn new(bbox: Aabb, resolution: usize, rank: usize, init: [f64; 3], rng: &mut impl Rng) -> Result<Self> {
        bbox.validate()?;
        if resolution < 2 || rank == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid needs resolution >= 2 and rank >= 1, got {resolution} and {rank}"
            )));
        }
        let mut comps = VmComponents::zeros(resolution, rank);
        comps.bias = init.map(softplus_inverse);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for arr in [&mut comps.u, &mut comps.m, &mut comps.v, &mut comps.w] {
            for x in arr.iter_mut() {
                *x = normal.sample(rng);
            }
        }
        Ok(VMGrid { bbox, comps })
    }

    /// Grid with all factors zero, so the value is exactly `softplus(bias)`.
    pub fn constant(bbox: Aabb, resolution: usize, rank: usize, bias: [f64; 3]) -> Self {
        let mut comps = VmComponents::zeros(resolution, rank);
        comps.bias = bias;
        VMGrid { bbox, comps }
    }

    pub fn resolution(&self) -> usize {
        self.comps.resolution
    }

    pub fn rank(&self) -> usize {
        self.comps.rank
    }

    pub fn vm_reconstruct(&self, i: usize, j: usize, k: usize, channel: usize) -> Result<f64> {
        let g = self.resolution();
        if i >= g || j >= g || k >= g {
            return Err(Error::IndexOutOfRange { i, j, k, resolution: g });
        }
        assert!(channel < 3, "channel index {channel} out of range");
        Ok(softplus(self.comps.raw(channel, i, j, k)))
    }

    /// World position of grid node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let g = (self.resolution() - 1) as f64;
        let idx = [i, j, k];
        Vec3::from_fn(|a, _| {
            let (lo, hi) = (self.bbox.min[a], self.bbox.max[a]);
            lo + idx[a] as f64 * (hi - lo) / g
        })
    }

    pub fn sample(&self, x: &Vec3) -> TrilinearSample {
        let g = self.resolution();
        let last = (g - 1) as f64;
        let mut base = [0; 3];
        let mut frac = [0.0; 3];
        let mut coord_scale = [0.0; 3];
        for a in 0..3 {
            let (lo, hi) = (self.bbox.min[a], self.bbox.max[a]);
            let scale = last / (hi - lo);
            let raw = (x[a] - lo) * scale;
            let mut gc = raw.clamp(0.0, last);
            if raw > 0.0 && raw < last {
                coord_scale[a] = scale;
            }
            if (gc - gc.round()).abs() < SNAP_EPS {
                gc = gc.round();
            }
            let b = (gc.floor() as usize).min(g - 2);
            base[a] = b;
            frac[a] = gc - b as f64;
        }
        TrilinearSample {
            base,
            frac,
            coord_scale,
        }
    }

    /// Trilinear interpolation of the reconstructed β at a world point; points
    /// outside the box are clamped to its boundary.
    pub fn query_beta(&self, x: &Vec3) -> [f64; 3] {
        let s = self.sample(x);
        let mut out = [0.0; 3];
        for (idx, weight, _) in s.corners() {
            if weight == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += weight * softplus(self.comps.raw(c, idx[0], idx[1], idx[2]));
            }
        }
        out
    }

    /// Backward of [`query_beta`]: accumulates component gradients and
    /// returns the gradient with respect to `x`.
    pub fn query_beta_backward(&self, x: &Vec3, d_beta: &[f64; 3], grad: &mut VmComponents) -> Vec3 {
        let s = self.sample(x);
        let mut d_x = Vec3::zeros();
        for (idx, weight, dw) in s.corners() {
            for (c, &db) in d_beta.iter().enumerate() {
                if db == 0.0 {
                    continue;
                }
                let raw = self.comps.raw(c, idx[0], idx[1], idx[2]);
                let value = softplus(raw);
                for a in 0..3 {
                    d_x[a] += db * value * dw[a] * s.coord_scale[a];
                }
                if weight != 0.0 {
                    self.comps
                        .raw_backward(c, idx[0], idx[1], idx[2], db * weight * sigmoid(raw), grad);
                }
            }
        }
        d_x
    }

    /// [`query_beta`](Self::query_beta) read from a precomputed [`dense`](Self::dense)
    /// field instead of the factors.
    pub fn query_field(&self, field: &DenseField, x: &Vec3) -> [f64; 3] {
        let s = self.sample(x);
        let mut out = [0.0; 3];
        for (idx, weight, _) in s.corners() {
            if weight == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += weight * field.value[field.index(c, idx[0], idx[1], idx[2])];
            }
        }
        out
    }

    /// Backward of [`query_field`](Self::query_field): accumulates into the
    /// gradient on the field's values and returns the gradient on `x`.
    pub fn query_field_backward(&self, field: &DenseField, x: &Vec3, d_beta: &[f64; 3], d_value: &mut [f64]) -> Vec3 {
        let s = self.sample(x);
        let mut d_x = Vec3::zeros();
        for (idx, weight, dw) in s.corners() {
            for (c, &db) in d_beta.iter().enumerate() {
                if db == 0.0 {
                    continue;
                }
                let n = field.index(c, idx[0], idx[1], idx[2]);
                for a in 0..3 {
                    d_x[a] += db * field.value[n] * dw[a] * s.coord_scale[a];
                }
                d_value[n] += db * weight;
            }
        }
        d_x
    }

    /// Dense reconstruction of every voxel, via one matrix product per channel.
    pub fn dense(&self) -> DenseField {
        let (g, rank) = (self.resolution(), self.rank());
        let g2 = g * g;
        let mut raw = scratch::zeroed(3 * g * g2);
        let mut a = scratch::zeroed(rank * g2);
        for c in 0..3 {
            self.modulated_matrices(c, &mut a);
            let out = &mut raw[c * g * g2..(c + 1) * g * g2];
            out.fill(self.comps.bias[c]);
            let u = &self.comps.u[c * rank * g..(c + 1) * rank * g];
            // out (G × G²) += Uᵀ (G × R) · A (R × G²); u is stored [r][i]
            unsafe {
                matrixmultiply::dgemm(
                    g, rank, g2, 1.0,
                    u.as_ptr(), 1, g as isize,
                    a.as_ptr(), g2 as isize, 1,
                    1.0,
                    out.as_mut_ptr(), g2 as isize, 1,
                );
            }
        }
        scratch::recycle(a);
        // softplus in place; its derivative shares the exponential
        let mut value = raw;
        let mut slope = scratch::zeroed(value.len());
        for (v, s) in value.iter_mut().zip(slope.iter_mut()) {
            let r = *v;
            if r > 30.0 {
                (*v, *s) = (softplus(r), sigmoid(r));
            } else {
                let e = r.exp();
                (*v, *s) = (e.ln_1p(), e / (1.0 + e));
            }
        }
        DenseField {
            resolution: g,
            value,
            slope,
        }
    }

    /// `A[r][j][k] = M[r][j][k] · v[r][j] · w[r][k]` for channel `c`.
    fn modulated_matrices(&self, c: usize, a: &mut [f64]) {
        let (g, rank) = (self.resolution(), self.rank());
        for r in 0..rank {
            for j in 0..g {
                let vj = self.comps.v[self.comps.vec_index(c, r, j)];
                let row = self.comps.mat_index(c, r, j, 0);
                let w0 = self.comps.vec_index(c, r, 0);
                for k in 0..g {
                    a[(r * g + j) * g + k] = self.comps.m[row + k] * vj * self.comps.w[w0 + k];
                }
            }
        }
    }

    /// Backward of [`dense`](Self::dense) given the gradient on the
    /// post-softplus values.
    pub fn dense_backward(&self, field: &DenseField, d_value: &[f64], grad: &mut VmComponents) {
        let (g, rank) = (self.resolution(), self.rank());
        let g2 = g * g;
        assert_eq!(d_value.len(), 3 * g * g2);
        let mut d_raw = scratch::zeroed(g * g2);
        let mut a = scratch::zeroed(rank * g2);
        let mut d_a = scratch::zeroed(rank * g2);
        for c in 0..3 {
            let off = c * g * g2;
            let mut bias_grad = 0.0;
            for (n, d) in d_raw.iter_mut().enumerate() {
                *d = d_value[off + n] * field.slope[off + n];
                bias_grad += *d;
            }
            grad.bias[c] += bias_grad;
            self.modulated_matrices(c, &mut a);
            let u = &self.comps.u[c * rank * g..(c + 1) * rank * g];
            let du = &mut grad.u[c * rank * g..(c + 1) * rank * g];
            unsafe {
                // dUᵀ (G × R) += dS (G × G²) · Aᵀ (G² × R)
                matrixmultiply::dgemm(
                    g, g2, rank, 1.0,
                    d_raw.as_ptr(), g2 as isize, 1,
                    a.as_ptr(), 1, g2 as isize,
                    1.0,
                    du.as_mut_ptr(), 1, g as isize,
                );
                // dA (R × G²) = U (R × G) · dS (G × G²)
                matrixmultiply::dgemm(
                    rank, g, g2, 1.0,
                    u.as_ptr(), g as isize, 1,
                    d_raw.as_ptr(), g2 as isize, 1,
                    0.0,
                    d_a.as_mut_ptr(), g2 as isize, 1,
                );
            }
            for r in 0..rank {
                let v0 = self.comps.vec_index(c, r, 0);
                for j in 0..g {
                    let vj = self.comps.v[v0 + j];
                    let row = self.comps.mat_index(c, r, j, 0);
                    let mut dv = 0.0;
                    for k in 0..g {
                        let da = d_a[(r * g + j) * g + k];
                        let (m, w) = (self.comps.m[row + k], self.comps.w[v0 + k]);
                        grad.m[row + k] += da * vj * w;
                        dv += da * m * w;
                        grad.w[v0 + k] += da * m * vj;
                    }
                    grad.v[v0 + j] += dv;
                }
            }
        }
        for buf in [d_raw, a, d_a] {
            scratch::recycle(buf);
        }
    }
}

/// Every voxel of a grid, `[c][i][j][k]`.
#[derive(Clone, Debug)]
pub struct DenseField {
    pub resolution: usize,
    pub value: Vec<f64>,
    /// `d value / d raw` at every voxel.
    pub slope: Vec<f64>,
}

impl Drop for DenseField {
    fn drop(&mut self) {
        scratch::recycle(std::mem::take(&mut self.value));
        scratch::recycle(std::mem::take(&mut self.slope));
    }
}

/// Per-thread free list for grid-sized buffers. Several are needed every
/// iteration, and fresh allocations of this size are returned to the OS and
/// refaulted page by page.
pub mod scratch {
    use std::cell::RefCell;

    const MIN_LEN: usize = 1 << 16;
    const KEEP: usize = 16;

    thread_local! {
        static FREE: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    }

    /// A zero-filled vector of `len`, reusing a pooled buffer when one fits.
    pub fn zeroed(len: usize) -> Vec<f64> {
        if len >= MIN_LEN {
            let reused = FREE.with(|f| {
                let mut f = f.borrow_mut();
                let i = f.iter().position(|b| b.capacity() >= len)?;
                Some(f.swap_remove(i))
            });
            if let Some(mut buf) = reused {
                buf.clear();
                buf.resize(len, 0.0);
                return buf;
            }
        }
        vec![0.0; len]
    }

    /// Hands a buffer back for reuse; small ones are simply freed.
    pub fn recycle(buf: Vec<f64>) {
        if buf.capacity() >= MIN_LEN {
            FREE.with(|f| {
                let mut f = f.borrow_mut();
                if f.len() < KEEP {
                    f.push(buf);
                }
            });
        }
    }
}

impl DenseField {
    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.resolution + i) * self.resolution + j) * self.resolution + k
    }
}

/// Veiling light plus the two coefficient grids.
#[derive(Clone, Debug, PartialEq)]
pub struct MediumParams {
    /// Pre-sigmoid veiling light.
    pub b_inf_logit: [f64; 3],
    pub grid_d: VMGrid,
    pub grid_b: VMGrid,
}

impl MediumParams {
    pub fn new(bbox: Aabb, resolution: usize, rank: usize, b_infinity: [f64; 3], rng: &mut impl Rng) -> Result<Self> {
        let grid_d = VMGrid::new(bbox, resolution, rank, BETA_PRIOR, rng)?;
        let grid_b = VMGrid::new(bbox, resolution, rank, BETA_PRIOR, rng)?;
        Ok(MediumParams {
            b_inf_logit: b_infinity.map(crate::types::logit),
            grid_d,
            grid_b,
        })
    }

    /// Noise-free medium with constant coefficients.
    pub fn constant(bbox: Aabb, resolution: usize, beta_d: [f64; 3], beta_b: [f64; 3], b_infinity: [f64; 3]) -> Self {
        MediumParams {
            b_inf_logit: b_infinity.map(crate::types::logit),
            grid_d: VMGrid::constant(bbox, resolution, 1, beta_d.map(softplus_inverse)),
            grid_b: VMGrid::constant(bbox, resolution, 1, beta_b.map(softplus_inverse)),
        }
    }

    /// A medium that neither attenuates nor scatters: composition returns the
    /// radiance image unchanged at every valid pixel.
    pub fn clear(bbox: Aabb, resolution: usize) -> Self {
        const OFF: f64 = -1e3;
        MediumParams {
            b_inf_logit: [OFF; 3],
            grid_d: VMGrid::constant(bbox, resolution, 1, [OFF; 3]),
            grid_b: VMGrid::constant(bbox, resolution, 1, [OFF; 3]),
        }
    }

    pub fn b_infinity(&self) -> [f64; 3] {
        self.b_inf_logit.map(sigmoid)
    }
}

/// Gradient of the medium parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MediumGrad {
    pub d_b_inf_logit: [f64; 3],
    pub grid_d: VmComponents,
    pub grid_b: VmComponents,
}

impl MediumGrad {
    pub fn zeros_like(m: &MediumParams) -> Self {
        MediumGrad {
            d_b_inf_logit: [0.0; 3],
            grid_d: VmComponents::zeros(m.grid_d.resolution(), m.grid_d.rank()),
            grid_b: VmComponents::zeros(m.grid_b.resolution(), m.grid_b.rank()),
        }
    }
}

fn check_compose_inputs(radiance: &Image, depth: &Image, valid: &[bool], cam: &CameraView) -> Result<()> {
    if radiance.channels != 3 {
        return Err(Error::DimensionMismatch {
            expected: (radiance.width, radiance.height, 3),
            actual: radiance.dims(),
        });
    }
    let want = (radiance.width, radiance.height, 1);
    if depth.dims() != want {
        return Err(Error::DimensionMismatch {
            expected: want,
            actual: depth.dims(),
        });
    }
    if valid.len() != radiance.pixel_count() || (cam.width, cam.height) != (radiance.width, radiance.height) {
        return Err(Error::DimensionMismatch {
            expected: want,
            actual: (cam.width, cam.height, valid.len()),
        });
    }
    Ok(())
}

/// Underwater image from a radiance image and a depth map:
/// `J · exp(−β^D(x) z) + B∞ (1 − exp(−β^B(x) z))` with `x` the point at
/// distance `z` along the pixel's ray. Invalid pixels see only veiling light.
pub fn compose_underwater(
    radiance: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    cam: &CameraView,
) -> Result<Image> {
    compose_with(radiance, depth, valid, medium, cam, |x| {
        (medium.grid_d.query_beta(x), medium.grid_b.query_beta(x))
    })
}

/// [`compose_underwater`] with β read from precomputed dense fields of the
/// attenuation and backscatter grids.
pub fn compose_underwater_dense(
    radiance: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    fields: (&DenseField, &DenseField),
    cam: &CameraView,
) -> Result<Image> {
    compose_with(radiance, depth, valid, medium, cam, |x| {
        (medium.grid_d.query_field(fields.0, x), medium.grid_b.query_field(fields.1, x))
    })
}

fn compose_with(
    radiance: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    cam: &CameraView,
    betas: impl Fn(&Vec3) -> ([f64; 3], [f64; 3]),
) -> Result<Image> {
    check_compose_inputs(radiance, depth, valid, cam)?;
    let b_inf = medium.b_infinity();
    let center = cam.center();
    let mut out = Image::new(radiance.width, radiance.height, 3);
    for py in 0..radiance.height {
        for px in 0..radiance.width {
            let p = py * radiance.width + px;
            if !valid[p] {
                out.data[3 * p..3 * p + 3].copy_from_slice(&b_inf);
                continue;
            }
            let z = depth.data[p];
            let x = center + cam.pixel_ray(px, py) * z;
            let (bd, bb) = betas(&x);
            for c in 0..3 {
                let j = radiance.data[3 * p + c];
                out.data[3 * p + c] = j * (-bd[c] * z).exp() + b_inf[c] * (1.0 - (-bb[c] * z).exp());
            }
        }
    }
    Ok(out)
}

/// Degrades a clean image with a known medium; same arithmetic as
/// [`compose_underwater`].
pub fn forward_simulate(
    clean: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    cam: &CameraView,
) -> Result<Image> {
    compose_underwater(clean, depth, valid, medium, cam)
}

/// Adjoints of [`compose_underwater`] with respect to its inputs.
pub struct ComposeGrad {
    pub d_radiance: Image,
    pub d_depth: Image,
    pub medium: MediumGrad,
}

/// Adjoints of [`compose_underwater_dense`]; the grid gradients stay on the
/// dense values, to be pushed through [`VMGrid::dense_backward`].
pub struct DenseComposeGrad {
    pub d_radiance: Image,
    pub d_depth: Image,
    pub d_b_inf_logit: [f64; 3],
    pub d_value_d: Vec<f64>,
    pub d_value_b: Vec<f64>,
}

pub fn compose_backward(
    radiance: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    cam: &CameraView,
    d_out: &Image,
) -> Result<ComposeGrad> {
    let mut g = MediumGrad::zeros_like(medium);
    let (d_radiance, d_depth, d_b_inf_logit) = compose_backward_with(
        radiance,
        depth,
        valid,
        medium,
        cam,
        d_out,
        |x| (medium.grid_d.query_beta(x), medium.grid_b.query_beta(x)),
        |x, d_bd, d_bb| {
            medium.grid_d.query_beta_backward(x, d_bd, &mut g.grid_d)
                + medium.grid_b.query_beta_backward(x, d_bb, &mut g.grid_b)
        },
    )?;
    g.d_b_inf_logit = d_b_inf_logit;
    Ok(ComposeGrad {
        d_radiance,
        d_depth,
        medium: g,
    })
}

pub fn compose_backward_dense(
    radiance: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    fields: (&DenseField, &DenseField),
    cam: &CameraView,
    d_out: &Image,
) -> Result<DenseComposeGrad> {
    let mut d_value_d = scratch::zeroed(fields.0.value.len());
    let mut d_value_b = scratch::zeroed(fields.1.value.len());
    let (d_radiance, d_depth, d_b_inf_logit) = compose_backward_with(
        radiance,
        depth,
        valid,
        medium,
        cam,
        d_out,
        |x| (medium.grid_d.query_field(fields.0, x), medium.grid_b.query_field(fields.1, x)),
        |x, d_bd, d_bb| {
            medium.grid_d.query_field_backward(fields.0, x, d_bd, &mut d_value_d)
                + medium.grid_b.query_field_backward(fields.1, x, d_bb, &mut d_value_b)
        },
    )?;
    Ok(DenseComposeGrad {
        d_radiance,
        d_depth,
        d_b_inf_logit,
        d_value_d,
        d_value_b,
    })
}

#[allow(clippy::too_many_arguments)]
fn compose_backward_with(
    radiance: &Image,
    depth: &Image,
    valid: &[bool],
    medium: &MediumParams,
    cam: &CameraView,
    d_out: &Image,
    betas: impl Fn(&Vec3) -> ([f64; 3], [f64; 3]),
    mut betas_backward: impl FnMut(&Vec3, &[f64; 3], &[f64; 3]) -> Vec3,
) -> Result<(Image, Image, [f64; 3])> {
    check_compose_inputs(radiance, depth, valid, cam)?;
    let b_inf = medium.b_infinity();
    let center = cam.center();
    let mut d_radiance = Image::new(radiance.width, radiance.height, 3);
    let mut d_depth = Image::new(radiance.width, radiance.height, 1);
    let mut d_binf = [0.0; 3];
    for py in 0..radiance.height {
        for px in 0..radiance.width {
            let p = py * radiance.width + px;
            let up = [d_out.data[3 * p], d_out.data[3 * p + 1], d_out.data[3 * p + 2]];
            if !valid[p] {
                for c in 0..3 {
                    d_binf[c] += up[c];
                }
                continue;
            }
            let z = depth.data[p];
            let ray = cam.pixel_ray(px, py);
            let x = center + ray * z;
            let (bd, bb) = betas(&x);
            let mut d_bd = [0.0; 3];
            let mut d_bb = [0.0; 3];
            let mut d_z = 0.0;
            for c in 0..3 {
                let j = radiance.data[3 * p + c];
                let (ed, eb) = ((-bd[c] * z).exp(), (-bb[c] * z).exp());
                d_radiance.data[3 * p + c] = up[c] * ed;
                d_binf[c] += up[c] * (1.0 - eb);
                d_bd[c] = -up[c] * j * ed * z;
                d_bb[c] = up[c] * b_inf[c] * eb * z;
                d_z += up[c] * (-j * ed * bd[c] + b_inf[c] * eb * bb[c]);
            }
            d_z += ray.dot(&betas_backward(&x, &d_bd, &d_bb));
            d_depth.data[p] = d_z;
        }
    }
    let mut d_logit = [0.0; 3];
    for c in 0..3 {
        d_logit[c] = d_binf[c] * b_inf[c] * (1.0 - b_inf[c]);
    }
    Ok((d_radiance, d_depth, d_logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap()
    }

    fn random_grid(g: usize, r: usize, seed: u64) -> VMGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = VMGrid::new(unit_box(), g, r, BETA_PRIOR, &mut rng).unwrap();
        for arr in [&mut grid.comps.u, &mut grid.comps.m, &mut grid.comps.v, &mut grid.comps.w] {
            for x in arr.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        grid
    }

    #[test]
    fn zero_components_give_ln2() {
        let grid = VMGrid::constant(unit_box(), 4, 2, [0.0; 3]);
        assert_eq!(grid.vm_reconstruct(1, 2, 3, 0).unwrap(), 2f64.ln());
    }

    #[test]
    fn initialized_grid_reproduces_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = VMGrid::new(unit_box(), 8, 4, BETA_PRIOR, &mut rng).unwrap();
        for c in 0..3 {
            let v = grid.vm_reconstruct(3, 4, 5, c).unwrap();
            assert!((v - BETA_PRIOR[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_rank_one_grid_is_softplus_one() {
        let mut grid = VMGrid::constant(unit_box(), 4, 1, [0.0; 3]);
        for arr in [&mut grid.comps.u, &mut grid.comps.m, &mut grid.comps.v, &mut grid.comps.w] {
            arr.fill(1.0);
        }
        for (i, j, k) in [(0, 0, 0), (3, 1, 2), (2, 3, 3)] {
            assert_eq!(grid.vm_reconstruct(i, j, k, 1).unwrap(), softplus(1.0));
        }
    }

    #[test]
    fn out_of_range_index_errors() {
        let grid = VMGrid::constant(unit_box(), 4, 1, [0.0; 3]);
        assert!(matches!(grid.vm_reconstruct(4, 0, 0, 0), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn dense_matches_pointwise() {
        let grid = random_grid(8, 4, 3);
        let field = grid.dense();
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..8 {
                        let a = field.value[field.index(c, i, j, k)];
                        let b = grid.vm_reconstruct(i, j, k, c).unwrap();
                        assert!((a - b).abs() < 1e-12);
                        let n = field.index(c, i, j, k);
                        assert!((field.slope[n] - sigmoid(softplus_inverse(field.value[n]))).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn query_at_nodes_is_exact_and_midpoints_interpolate() {
        let grid = random_grid(6, 3, 4);
        for (i, j, k) in [(0, 0, 0), (5, 5, 5), (2, 3, 4), (5, 0, 3)] {
            let q = grid.query_beta(&grid.node_position(i, j, k));
            for c in 0..3 {
                assert_eq!(q[c], grid.vm_reconstruct(i, j, k, c).unwrap());
            }
        }
        let a = grid.node_position(2, 3, 4);
        let b = grid.node_position(3, 3, 4);
        let q = grid.query_beta(&((a + b) * 0.5));
        for c in 0..3 {
            let want = 0.5 * (grid.vm_reconstruct(2, 3, 4, c).unwrap() + grid.vm_reconstruct(3, 3, 4, c).unwrap());
            assert!((q[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_interpolation_between_two_values() {
        // value 0.1 on the i = 0 face and 0.3 on the i = 1 face of a 2-node grid
        let mut grid = VMGrid::constant(unit_box(), 2, 1, [0.0; 3]);
        let lo = softplus_inverse(0.1);
        let hi = softplus_inverse(0.3);
        grid.comps.bias = [lo; 3];
        for c in 0..3 {
            let comps = &mut grid.comps;
            let iu = comps.vec_index(c, 0, 1);
            comps.u[iu] = hi - lo;
            let im = comps.mat_index(c, 0, 0, 0);
            comps.m[im..im + 4].fill(1.0);
            for j in 0..2 {
                let iv = comps.vec_index(c, 0, j);
                comps.v[iv] = 1.0;
                comps.w[iv] = 1.0;
            }
        }
        let q = grid.query_beta(&Vec3::new(0.5, 0.0, 1.0));
        assert!((q[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn continuous_across_cell_faces() {
        let grid = random_grid(5, 2, 8);
        let face = grid.node_position(2, 1, 1).x;
        let y = 0.37;
        let z = 0.61;
        let below = grid.query_beta(&Vec3::new(face - 1e-13, y, z));
        let above = grid.query_beta(&Vec3::new(face + 1e-13, y, z));
        for c in 0..3 {
            assert!((below[c] - above[c]).abs() < 1e-12);
        }
    }

    fn compose_fixture(z: f64) -> (Image, Image, Vec<bool>, MediumParams, CameraView) {
        let cam = CameraView::look_at(Vec3::new(0.5, 0.5, -3.0), Vec3::repeat(0.5), -Vec3::y(), 8.0, 4, 4, 0);
        let medium = MediumParams::constant(unit_box(), 4, [0.1; 3], [0.2; 3], [0.5; 3]);
        let uri = Image::filled(4, 4, 3, 0.8);
        let depth = Image::filled(4, 4, 1, z);
        (uri, depth, vec![true; 16], medium, cam)
    }

    #[test]
    fn compose_scalar_example() {
        let (uri, depth, valid, medium, cam) = compose_fixture(3.0);
        let out = compose_underwater(&uri, &depth, &valid, &medium, &cam).unwrap();
        let want = 0.8 * (-0.3f64).exp() + 0.5 * (1.0 - (-0.6f64).exp());
        assert!((want - 0.8182).abs() < 1e-4);
        for v in &out.data {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_limits() {
        let (uri, depth, valid, medium, cam) = compose_fixture(0.0);
        assert_eq!(compose_underwater(&uri, &depth, &valid, &medium, &cam).unwrap(), uri);
        let far = Image::filled(4, 4, 1, 1e6);
        let out = compose_underwater(&uri, &far, &valid, &medium, &cam).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.5).abs() <= 1e-6));
        let invalid = vec![false; 16];
        let out = compose_underwater(&uri, &depth, &invalid, &medium, &cam).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn compose_rejects_mismatched_depth() {
        let (uri, _, valid, medium, cam) = compose_fixture(1.0);
        let bad = Image::new(3, 4, 1);
        assert!(matches!(
            compose_underwater(&uri, &bad, &valid, &medium, &cam),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn clear_medium_is_identity() {
        let (uri, depth, valid, _, cam) = compose_fixture(2.5);
        let clear = MediumParams::clear(unit_box(), 2);
        assert_eq!(compose_underwater(&uri, &depth, &valid, &clear, &cam).unwrap(), uri);
    }

    #[test]
    fn channel_independence() {
        let (uri, depth, valid, _, cam) = compose_fixture(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let medium = MediumParams::new(unit_box(), 4, 2, [0.3; 3], &mut rng).unwrap();
        let base = compose_underwater(&uri, &depth, &valid, &medium, &cam).unwrap();
        let mut bumped = medium.clone();
        let idx = bumped.grid_d.comps.mat_index(0, 1, 2, 2);
        bumped.grid_d.comps.m[idx] += 0.5;
        bumped.grid_d.comps.bias[0] += 0.1;
        let out = compose_underwater(&uri, &depth, &valid, &bumped, &cam).unwrap();
        for p in 0..16 {
            assert_eq!(out.data[3 * p + 1], base.data[3 * p + 1]);
            assert_eq!(out.data[3 * p + 2], base.data[3 * p + 2]);
        }
    }

    #[test]
    fn dense_backward_matches_pointwise_backward() {
        let grid = random_grid(5, 3, 21);
        let field = grid.dense();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_value: Vec<f64> = (0..field.value.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = VmComponents::zeros(5, 3);
        grid.dense_backward(&field, &d_value, &mut fast);
        let mut slow = VmComponents::zeros(5, 3);
        for c in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    for k in 0..5 {
                        let n = field.index(c, i, j, k);
                        grid.comps.raw_backward(c, i, j, k, d_value[n] * field.slope[n], &mut slow);
                    }
                }
            }
        }
        let mut max_err: f64 = 0.0;
        let mut s = slow.clone();
        s.zip_mut(&fast, |a, b| max_err = max_err.max((*a - b).abs()));
        assert!(max_err < 1e-10, "{max_err}");
    }

    #[test]
    fn dense_field_path_matches_factor_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = CameraView::look_at(Vec3::new(0.5, 0.4, -1.0), Vec3::repeat(0.5), -Vec3::y(), 5.0, 6, 5, 0);
        let mut medium = MediumParams::new(unit_box(), 5, 3, [0.3, 0.4, 0.5], &mut rng).unwrap();
        for x in medium.grid_d.comps.u.iter_mut().chain(medium.grid_b.comps.w.iter_mut()) {
            *x = rng.random_range(-1.0..1.0);
        }
        let n = 30;
        let radiance = Image::from_data(6, 5, 3, (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let depth = Image::from_data(6, 5, 1, (0..n).map(|_| rng.random_range(0.8..2.0)).collect()).unwrap();
        let valid: Vec<bool> = (0..n).map(|p| p % 7 != 3).collect();
        let d_out = Image::from_data(6, 5, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fields = (medium.grid_d.dense(), medium.grid_b.dense());
        let fields = (&fields.0, &fields.1);

        let slow = compose_underwater(&radiance, &depth, &valid, &medium, &cam).unwrap();
        let fast = compose_underwater_dense(&radiance, &depth, &valid, &medium, fields, &cam).unwrap();
        for (a, b) in slow.data.iter().zip(&fast.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let gs = compose_backward(&radiance, &depth, &valid, &medium, &cam, &d_out).unwrap();
        let gf = compose_backward_dense(&radiance, &depth, &valid, &medium, fields, &cam, &d_out).unwrap();
        for (a, b) in gs.d_depth.data.iter().zip(&gf.d_depth.data).chain(gs.d_radiance.data.iter().zip(&gf.d_radiance.data)) {
            assert!((a - b).abs() < 1e-10);
        }
        for c in 0..3 {
            assert!((gs.medium.d_b_inf_logit[c] - gf.d_b_inf_logit[c]).abs() < 1e-12);
        }
        for (grid, field, d_value, want) in [
            (&medium.grid_d, fields.0, &gf.d_value_d, &gs.medium.grid_d),
            (&medium.grid_b, fields.1, &gf.d_value_b, &gs.medium.grid_b),
        ] {
            let mut got = VmComponents::zeros(5, 3);
            grid.dense_backward(field, d_value, &mut got);
            let mut max_err: f64 = 0.0;
            got.zip_mut(want, |a, b| max_err = max_err.max((*a - b).abs()));
            assert!(max_err < 1e-10, "{max_err}");
        }
    }

    #[test]
    fn compose_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = CameraView::look_at(Vec3::new(0.5, 0.5, -1.0), Vec3::repeat(0.5), -Vec3::y(), 4.0, 4, 4, 0);
        let mut medium = MediumParams::new(unit_box(), 4, 2, [0.3, 0.4, 0.5], &mut rng).unwrap();
        for x in medium.grid_d.comps.u.iter_mut().chain(medium.grid_b.comps.m.iter_mut()) {
            *x = rng.random_range(-1.0..1.0);
        }
        let uri = Image::from_data(4, 4, 3, (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let depth = Image::from_data(4, 4, 1, (0..16).map(|_| rng.random_range(1.0..1.8)).collect()).unwrap();
        let mut valid = vec![true; 16];
        valid[5] = false;
        let weights: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_out = Image::from_data(4, 4, 3, weights.clone()).unwrap();
        let f = |uri: &Image, depth: &Image, m: &MediumParams| {
            let o = compose_underwater(uri, depth, &valid, m, &cam).unwrap();
            o.data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = compose_backward(&uri, &depth, &valid, &medium, &cam, &d_out).unwrap();
        let h = 1e-6;
        for p in [0, 3, 10] {
            let mut dp = depth.clone();
            dp.data[p] += h;
            let mut dm = depth.clone();
            dm.data[p] -= h;
            let num = (f(&uri, &dp, &medium) - f(&uri, &dm, &medium)) / (2.0 * h);
            assert!((num - g.d_depth.data[p]).abs() < 1e-6, "depth {p}: {num} vs {}", g.d_depth.data[p]);
        }
        for c in 0..3 {
            let mut mp = medium.clone();
            mp.b_inf_logit[c] += h;
            let mut mm = medium.clone();
            mm.b_inf_logit[c] -= h;
            let num = (f(&uri, &depth, &mp) - f(&uri, &depth, &mm)) / (2.0 * h);
            assert!((num - g.medium.d_b_inf_logit[c]).abs() < 1e-6);
        }
        for idx in [0, 7, 19] {
            let mut mp = medium.clone();
            mp.grid_d.comps.u[idx] += h;
            let mut mm = medium.clone();
            mm.grid_d.comps.u[idx] -= h;
            let num = (f(&uri, &depth, &mp) - f(&uri, &depth, &mm)) / (2.0 * h);
            assert!((num - g.medium.grid_d.u[idx]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn output_bounded_by_radiance_plus_veil(
            j in 0.0f64..1.0, z in 0.0f64..50.0, bd in 0.0f64..2.0, bb in 0.0f64..2.0, binf in 0.01f64..0.99,
        ) {
            let cam = CameraView::look_at(Vec3::new(0.5, 0.5, -3.0), Vec3::repeat(0.5), -Vec3::y(), 2.0, 1, 1, 0);
            let medium = MediumParams::constant(unit_box(), 2, [bd; 3], [bb; 3], [binf; 3]);
            let out = compose_underwater(
                &Image::filled(1, 1, 3, j), &Image::filled(1, 1, 1, z), &[true], &medium, &cam,
            ).unwrap();
            for v in out.data {
                prop_assert!(v >= 0.0);
                prop_assert!(v <= j + binf + 1e-12);
            }
        }

        #[test]
        fn monotone_in_depth_toward_veil(j in 0.0f64..1.0, binf in 0.01f64..0.99, z in 0.0f64..10.0, dz in 0.001f64..5.0) {
            let cam = CameraView::look_at(Vec3::new(0.5, 0.5, -3.0), Vec3::repeat(0.5), -Vec3::y(), 2.0, 1, 1, 0);
            let medium = MediumParams::constant(unit_box(), 2, [0.3; 3], [0.3; 3], [binf; 3]);
            let at = |z: f64| compose_underwater(
                &Image::filled(1, 1, 3, j), &Image::filled(1, 1, 1, z), &[true], &medium, &cam,
            ).unwrap().data[0];
            let (a, b) = (at(z), at(z + dz));
            if binf > j {
                prop_assert!(b >= a - 1e-15);
            } else {
                prop_assert!(b <= a + 1e-15);
            }
        }
    }
}
