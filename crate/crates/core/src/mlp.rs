//! Small dense network with ReLU hidden layers and its reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
}

/// Affine layer `y = act(W x + b)`, `W` row-major `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn apply(&self, x: &[f64], pre: &mut Vec<f64>) -> Vec<f64> {
        pre.clear();
        pre.extend((0..self.outputs).map(|o| {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            self.bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
        match self.activation {
            Activation::Relu => pre.iter().map(|&v| v.max(0.0)).collect(),
            Activation::None => pre.clone(),
        }
    }
}

/// Feed-forward stack of [`Layer`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Widths `[in, h1, …, out]`; hidden layers use ReLU, the last none.
    /// Weights and biases are uniform in `±1/√fan_in`.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::None } else { Activation::Relu };
                let mut layer = Layer::zeros(widths[l], widths[l + 1], act);
                let bound = 1.0 / (widths[l] as f64).sqrt();
                for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                    *w = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        DenseNet { layers }
    }

    /// Same shape, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn is_consistent(&self) -> bool {
        !self.layers.is_empty()
            && self.layers.windows(2).all(|w| w[0].outputs == w[1].inputs)
            && self
                .layers
                .iter()
                .all(|l| l.weight.len() == l.inputs * l.outputs && l.bias.len() == l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut pre = Vec::new();
        self.layers
            .iter()
            .fold(x.to_vec(), |h, layer| layer.apply(&h, &mut pre))
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grads`, which must have this network's shape.
    pub fn backward(&self, x: &[f64], upstream: &[f64], grads: &mut DenseNet) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            let out = layer.apply(&h, &mut pre);
            inputs.push(std::mem::replace(&mut h, out));
            pres.push(pre);
        }
        let mut d = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (dv, &p) in d.iter_mut().zip(&pres[l]) {
                    if p <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let g = &mut grads.layers[l];
            let input = &inputs[l];
            let mut d_in = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                g.bias[o] += d[o];
                for i in 0..layer.inputs {
                    g.weight[o * layer.inputs + i] += d[o] * input[i];
                    d_in[i] += d[o] * layer.weight[o * layer.inputs + i];
                }
            }
            d = d_in;
        }
        d
    }

    /// Sum of squared weights and biases.
    pub fn sq_norm(&self) -> f64 {
        self.params().map(|v| v * v).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

pub const PRUNE_HIDDEN: usize = 32;

/// Scalar-to-probability head: `m = sigmoid(φ(pus))` with φ a 1→32→1 net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMlp {
    pub net: DenseNet,
}

impl PruneMlp {
    pub fn new(rng: &mut impl Rng) -> Self {
        PruneMlp {
            net: DenseNet::new(&[1, PRUNE_HIDDEN, 1], rng),
        }
    }

    pub fn logit(&self, pus: f64) -> f64 {
        self.net.forward(&[pus])[0]
    }

    pub fn prob(&self, pus: f64) -> f64 {
        sigmoid(self.logit(pus))
    }

    /// Backward of [`prob`](Self::prob) given `d_m`; returns d/d(pus).
    pub fn prob_backward(&self, pus: f64, d_m: f64, grads: &mut DenseNet) -> f64 {
        let m = self.prob(pus);
        self.net.backward(&[pus], &[d_m * m * (1.0 - m)], grads)[0]
    }
}
