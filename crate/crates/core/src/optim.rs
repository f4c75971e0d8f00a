//! Adam over flat parameter slices, one state per parameter group.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group. Rows of `stride` scalars can be
/// reordered when the group is resized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) {
        self.step_parts(&mut [(params, grads)], lr, cfg);
    }

    /// One step over a group stored as several slices; the moments treat them
    /// as one concatenated vector.
    pub fn step_parts(&mut self, parts: &mut [(&mut [f64], &[f64])], lr: f64, cfg: &AdamConfig) {
        let n: usize = parts.iter().map(|(p, g)| {
            assert_eq!(p.len(), g.len());
            p.len()
        }).sum();
        if self.m.len() != n {
            self.m.resize(n, 0.0);
            self.v.resize(n, 0.0);
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut i = 0;
        for (params, grads) in parts.iter_mut() {
            for (p, &g) in params.iter_mut().zip(grads.iter()) {
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                i += 1;
            }
        }
    }

    /// Rebuilds the state for a resized group: new row `r` copies old row
    /// `sources[r]`, or starts at zero when `None`.
    pub fn remap(&mut self, stride: usize, sources: &[Option<usize>]) {
        let pick = |old: &[f64]| {
            let mut out = vec![0.0; sources.len() * stride];
            for (r, src) in sources.iter().enumerate() {
                if let Some(s) = *src {
                    if (s + 1) * stride <= old.len() {
                        out[r * stride..(r + 1) * stride].copy_from_slice(&old[s * stride..(s + 1) * stride]);
                    }
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}
