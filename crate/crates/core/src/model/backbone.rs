//! Visual backbone contract and the small convolutional network used for
//! desk-scale training.

use ndarray::{Array1, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

/// Image in, spatial feature map out. The pooled descriptor is always the
/// spatial mean of the feature map, so implementations only provide the map.
pub trait Backbone: Send + Sync {
    /// Opaque per-image state needed by [`Backbone::backward`].
    type Trace: Send;

    fn out_channels(&self) -> usize;

    fn forward(&self, params: &ParamSet, image: ArrayView3<f64>) -> Result<(Array3<f64>, Self::Trace)>;

    /// Accumulates parameter gradients into `grads` given the gradient of
    /// the loss w.r.t. the feature map.
    fn backward(&self, params: &ParamSet, trace: &Self::Trace, grad_features: Array3<f64>, grads: &mut ParamSet);

    fn pretrained(&self) -> bool {
        false
    }
}

pub fn spatial_mean(features: &Array3<f64>) -> Vec<f64> {
    let (_, h, w) = features.dim();
    let area = (h * w) as f64;
    features
        .axis_iter(Axis(0))
        .map(|ch| ch.sum() / area)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyConvConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for TinyConvConfig {
    fn default() -> Self {
        TinyConvConfig {
            channels: vec![8, 16, 16, 32],
            strides: vec![1, 2, 1, 2],
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
}

/// Stack of 3x3 convolutions (padding 1), each followed by a rectifier.
#[derive(Debug, Clone)]
pub struct TinyConvNet {
    layers: Vec<ConvLayer>,
}

pub struct ConvTrace {
    /// Input to every layer (the image for layer 0).
    inputs: Vec<Array3<f64>>,
    /// Post-activation outputs, used for the rectifier mask.
    outputs: Vec<Array3<f64>>,
}

impl TinyConvNet {
    pub fn build(cfg: &TinyConvConfig, in_channels: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.len() != cfg.strides.len() {
            return Err(Error::Config("backbone channels and strides must be non-empty and equal length".into()));
        }
        if cfg.channels.contains(&0) || cfg.strides.contains(&0) {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut in_ch = in_channels;
        for (i, (&out_ch, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let fan_in = (in_ch * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let w = Array4::from_shape_fn((out_ch, in_ch, 3, 3), |_| normal.sample(rng));
            let weight = params.register(format!("backbone.conv{i}.weight"), w.into_dyn());
            let bias = params.register(format!("backbone.conv{i}.bias"), Array1::zeros(out_ch).into_dyn());
            layers.push(ConvLayer {
                weight,
                bias,
                in_ch,
                out_ch,
                stride,
            });
            in_ch = out_ch;
        }
        Ok(TinyConvNet { layers })
    }

    /// Spatial size of the feature map for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers
            .iter()
            .fold((h, w), |(h, w), l| (conv_out(h, l.stride), conv_out(w, l.stride)))
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// 3x3 convolution with zero padding 1.
pub fn conv3x3_forward(input: ArrayView3<f64>, weight: &[f64], bias: &[f64], out_ch: usize, stride: usize) -> Array3<f64> {
    let (in_ch, h, w) = input.dim();
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let input = input.as_standard_layout();
    let x = input.as_slice().expect("standard layout");
    let mut out = Array3::zeros((out_ch, oh, ow));
    let o = out.as_slice_mut().expect("fresh array");
    for co in 0..out_ch {
        let plane = &mut o[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias[co]);
        for ci in 0..in_ch {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = weight[((co * in_ch + ci) * 3 + ky) * 3 + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *ov += wt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient and accumulates weight/bias gradients.
pub fn conv3x3_backward(
    input: ArrayView3<f64>,
    weight: &[f64],
    grad_out: ArrayView3<f64>,
    stride: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Array3<f64> {
    let (in_ch, h, w) = input.dim();
    let (out_ch, oh, ow) = grad_out.dim();
    let input = input.as_standard_layout();
    let x = input.as_slice().expect("standard layout");
    let grad_out = grad_out.as_standard_layout();
    let g = grad_out.as_slice().expect("standard layout");
    let mut grad_in = Array3::zeros((in_ch, h, w));
    let gi = grad_in.as_slice_mut().expect("fresh array");
    for co in 0..out_ch {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        grad_bias[co] += gplane.iter().sum::<f64>();
        for ci in 0..in_ch {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let gin = &mut gi[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((co * in_ch + ci) * 3 + ky) * 3 + kx;
                    let wt = weight[widx];
                    let mut gw = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                let go = gplane[oy * ow + ox];
                                gw += go * xin[base + ix as usize];
                                gin[base + ix as usize] += go * wt;
                            }
                        }
                    }
                    grad_weight[widx] += gw;
                }
            }
        }
    }
    grad_in
}

impl Backbone for TinyConvNet {
    type Trace = ConvTrace;

    fn out_channels(&self) -> usize {
        self.layers.last().expect("at least one layer").out_ch
    }

    fn forward(&self, params: &ParamSet, image: ArrayView3<f64>) -> Result<(Array3<f64>, ConvTrace)> {
        let (c, h, w) = image.dim();
        if c != self.layers[0].in_ch || h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "backbone expects {} input channels, got image {c}x{h}x{w}",
                self.layers[0].in_ch
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = image.to_owned();
        for l in &self.layers {
            let mut y = conv3x3_forward(x.view(), params.slice(l.weight), params.slice(l.bias), l.out_ch, l.stride);
            y.mapv_inplace(|v| v.max(0.0));
            inputs.push(x);
            x = y.clone();
            outputs.push(y);
        }
        Ok((x, ConvTrace { inputs, outputs }))
    }

    fn backward(&self, params: &ParamSet, trace: &ConvTrace, grad_features: Array3<f64>, grads: &mut ParamSet) {
        let mut grad = grad_features;
        for (i, l) in self.layers.iter().enumerate().rev() {
            ndarray::Zip::from(&mut grad)
                .and(&trace.outputs[i])
                .for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
            let mut gw = std::mem::take(grads.get_mut(l.weight));
            let mut gb = std::mem::take(grads.get_mut(l.bias));
            let grad_in = conv3x3_backward(
                trace.inputs[i].view(),
                params.slice(l.weight),
                grad.view(),
                l.stride,
                gw.as_slice_mut().expect("contiguous"),
                gb.as_slice_mut().expect("contiguous"),
            );
            *grads.get_mut(l.weight) = gw;
            *grads.get_mut(l.bias) = gb;
            if i == 0 {
                break;
            }
            grad = grad_in;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_conv(x: &Array3<f64>, w: &Array4<f64>, b: &[f64], stride: usize) -> Array3<f64> {
        let (cin, h, wd) = x.dim();
        let cout = w.dim().0;
        let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        Array3::from_shape_fn((cout, oh, ow), |(co, oy, ox)| {
            let mut s = b[co];
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += w[[co, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let x = Array3::from_shape_fn((3, 7, 6), |_| rng.gen_range(-1.0..1.0));
            let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv3x3_forward(x.view(), w.as_slice().unwrap(), &b, 4, stride);
            let slow = naive_conv(&x, &w, &b, stride);
            assert_eq!(fast.dim(), slow.dim());
            for (a, e) in fast.iter().zip(slow.iter()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = vec![0.0; 3];
        let probe = Array3::from_shape_fn((3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let objective = |x: &Array3<f64>, w: &Array4<f64>| {
            (conv3x3_forward(x.view(), w.as_slice().unwrap(), &b, 3, 2) * &probe).sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv3x3_backward(x.view(), w.as_slice().unwrap(), probe.view(), 2, &mut gw, &mut gb);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h);
            assert!((fd - gx.as_slice().unwrap()[i]).abs() < 1e-8);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.as_slice_mut().unwrap()[i] += h;
            let mut wm = w.clone();
            wm.as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-8);
        }
        for (co, g) in gb.iter().enumerate() {
            let s: f64 = probe.index_axis(Axis(0), co).sum();
            assert!((g - s).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_dims_follow_strides() {
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = TinyConvNet::build(&TinyConvConfig::default(), 3, &mut params, &mut rng).unwrap();
        assert_eq!(net.output_dims(32, 32), (8, 8));
        assert_eq!(net.output_dims(33, 17), (9, 5));
        let (f, _) = net.forward(&params, Array3::zeros((3, 32, 32)).view()).unwrap();
        assert_eq!(f.dim(), (32, 8, 8));
        assert!(net.forward(&params, Array3::zeros((1, 32, 32)).view()).is_err());
    }
}
