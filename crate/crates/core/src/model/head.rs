//! Affine layers and the hashtag MLP branch.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn build(name: &str, in_dim: usize, out_dim: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        Linear {
            weight: params.register(format!("{name}.weight"), w.into_dyn()),
            bias: params.register(format!("{name}.bias"), Array1::zeros(out_dim).into_dyn()),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = params.slice(self.weight);
        let b = params.slice(self.bias);
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, params: &ParamSet, x: &[f64], grad_out: &[f64], grads: &mut ParamSet) -> Vec<f64> {
        let w = params.slice(self.weight);
        let mut grad_in = vec![0.0; self.in_dim];
        {
            let gw = grads.slice_mut(self.weight);
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += g * xi;
                }
                let wrow = &w[o * self.in_dim..(o + 1) * self.in_dim];
                for (gi, wi) in grad_in.iter_mut().zip(wrow) {
                    *gi += g * wi;
                }
            }
        }
        for (b, g) in grads.slice_mut(self.bias).iter_mut().zip(grad_out) {
            *b += g;
        }
        grad_in
    }
}

/// Two affine layers, each followed by a rectifier and (in training) dropout.
#[derive(Debug, Clone)]
pub struct HashtagMlp {
    pub layers: [Linear; 2],
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    /// Combined rectifier/dropout multipliers per layer.
    gates: [Vec<f64>; 2],
    pub output: Vec<f64>,
}

impl HashtagMlp {
    pub fn build(in_dim: usize, hidden: [usize; 2], dropout: f64, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        HashtagMlp {
            layers: [
                Linear::build("mlp.fc0", in_dim, hidden[0], params, rng),
                Linear::build("mlp.fc1", hidden[0], hidden[1], params, rng),
            ],
            dropout,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers[1].out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// `rng` enables dropout (training mode); `None` is evaluation mode.
    pub fn forward(&self, params: &ParamSet, x: &[f64], mut rng: Option<&mut dyn rand::RngCore>) -> MlpTrace {
        let keep = 1.0 - self.dropout;
        let act = |pre: Vec<f64>, rng: &mut Option<&mut dyn rand::RngCore>| -> (Vec<f64>, Vec<f64>) {
            let gate: Vec<f64> = pre
                .iter()
                .map(|&v| {
                    let relu = if v > 0.0 { 1.0 } else { 0.0 };
                    match rng {
                        Some(r) if self.dropout > 0.0 => {
                            if r.gen::<f64>() < keep {
                                relu / keep
                            } else {
                                0.0
                            }
                        }
                        _ => relu,
                    }
                })
                .collect();
            let out = pre.iter().zip(&gate).map(|(p, g)| p * g).collect();
            (out, gate)
        };
        let (hidden, g0) = act(self.layers[0].forward(params, x), &mut rng);
        let (output, g1) = act(self.layers[1].forward(params, &hidden), &mut rng);
        MlpTrace {
            input: x.to_vec(),
            hidden,
            gates: [g0, g1],
            output,
        }
    }

    pub fn backward(&self, params: &ParamSet, trace: &MlpTrace, grad_out: &[f64], grads: &mut ParamSet) {
        let g1: Vec<f64> = grad_out.iter().zip(&trace.gates[1]).map(|(g, m)| g * m).collect();
        let gh = self.layers[1].backward(params, &trace.hidden, &g1, grads);
        let g0: Vec<f64> = gh.iter().zip(&trace.gates[0]).map(|(g, m)| g * m).collect();
        self.layers[0].backward(params, &trace.input, &g0, grads);
    }
}
