//! The intent classifier: visual backbone, optional hashtag MLP branch and a
//! bias-initialized multi-label classifier over the concatenated features.

pub mod backbone;
pub mod checkpoint;
pub mod head;
pub mod params;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskPair;
use crate::saliency::{self, Cam, ContentSets, Resample};
use crate::taxonomy::NUM_CLASSES;
pub use backbone::{spatial_mean, Backbone, TinyConvConfig, TinyConvNet};
pub use head::{HashtagMlp, Linear};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader};
pub use params::{ParamId, ParamSet, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub backbone: TinyConvConfig,
    /// Hashtag feature dimension; 0 builds an image-only model.
    pub hashtag_dim: usize,
    pub mlp_hidden: [usize; 2],
    pub dropout: f64,
    /// Standard deviation of the classifier weight initialization.
    pub classifier_init_std: f64,
    /// Per-channel input normalization `(x - mean) / std`, applied before
    /// the backbone. Empty vectors disable it.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: NUM_CLASSES,
            in_channels: 3,
            backbone: TinyConvConfig::default(),
            hashtag_dim: 0,
            mlp_hidden: [1024, 2048],
            dropout: 0.25,
            classifier_init_std: 0.01,
            input_mean: IMAGENET_MEAN.to_vec(),
            input_std: IMAGENET_STD.to_vec(),
        }
    }
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("num_classes and in_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hashtag_dim > 0 && self.mlp_hidden.contains(&0) {
            return Err(Error::Config("MLP hidden sizes must be positive".into()));
        }
        if !(self.classifier_init_std >= 0.0) {
            return Err(Error::Config("classifier_init_std must be non-negative".into()));
        }
        if self.input_mean.len() != self.input_std.len()
            || !(self.input_mean.is_empty() || self.input_mean.len() == self.in_channels)
        {
            return Err(Error::Config("input_mean and input_std need one entry per input channel, or none".into()));
        }
        if self.input_std.iter().any(|s| !(*s > 0.0)) || self.input_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("input_std must be positive and input_mean finite".into()));
        }
        Ok(())
    }

    pub fn is_multimodal(&self) -> bool {
        self.hashtag_dim > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassificationLoss {
    #[default]
    Bce,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_loc: f64,
    pub pi: f64,
    pub classification: ClassificationLoss,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_loc: 0.1,
            pi: 0.01,
            classification: ClassificationLoss::Bce,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Localization weights searched over during tuning.
pub const LAMBDA_GRID: [f64; 4] = [0.5, 0.1, 0.01, 0.001];

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_loc >= 0.0 && self.lambda_loc.is_finite()) {
            return Err(Error::Config(format!("lambda_loc {} must be finite and >= 0", self.lambda_loc)));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Config(format!("prior pi {} outside (0, 1)", self.pi)));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal alpha must be in [0, 1] and gamma >= 0".into()));
        }
        Ok(())
    }
}

/// Logit bias giving an initial sigmoid activation of `pi`.
pub fn init_classifier_bias(pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Config(format!("prior pi {pi} outside (0, 1)")));
    }
    Ok(-((1.0 - pi) / pi).ln())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Binary cross-entropy on a logit; returns `(loss, d loss / d logit)`.
pub fn bce_with_logits(z: f64, positive: bool) -> (f64, f64) {
    let loss = softplus(if positive { -z } else { z });
    let target = if positive { 1.0 } else { 0.0 };
    (loss, sigmoid(z) - target)
}

/// Focal loss `-a_t (1 - p_t)^gamma log p_t` on a logit.
pub fn focal_with_logits(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (t, a, sign) = if positive { (z, alpha, 1.0) } else { (-z, 1.0 - alpha, -1.0) };
    let q = sigmoid(t);
    let log_q = -softplus(-t);
    let one_minus = 1.0 - q;
    let modulator = one_minus.powf(gamma);
    let loss = -a * modulator * log_q;
    // d/dt of -a (1-q)^g log q with dq/dt = q (1-q)
    let dmod = if gamma == 0.0 { 0.0 } else { gamma * one_minus.powf(gamma - 1.0) };
    let dloss_dt = a * (dmod * q * one_minus * log_q - modulator * one_minus);
    (loss, sign * dloss_dt)
}

/// Summed over classes for one sample; returns the loss and logit gradient.
pub fn classification_loss(logits: &[f64], labels: &[bool], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.iter().any(|z| z.is_nan()) {
        return Err(Error::Numeric("NaN logit".into()));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let (l, g) = match cfg.classification {
            ClassificationLoss::Bce => bce_with_logits(z, y),
            ClassificationLoss::Focal => focal_with_logits(z, y, cfg.focal_alpha, cfg.focal_gamma),
        };
        total += l;
        grad.push(g);
    }
    Ok((total, grad))
}

/// Batch objective: mean over samples of the per-sample classification loss
/// (summed over classes), plus `lambda_loc * loc` where `loc` is already the
/// batch-mean localization loss.
pub fn total_loss(logits: ArrayView2<f64>, labels: ArrayView2<bool>, loc: f64, cfg: &LossConfig) -> Result<f64> {
    if logits.dim() != labels.dim() {
        return Err(Error::Input(format!(
            "logits {:?} and labels {:?} differ in shape",
            logits.dim(),
            labels.dim()
        )));
    }
    if loc.is_nan() {
        return Err(Error::Numeric("NaN localization loss".into()));
    }
    if loc < 0.0 {
        return Err(Error::Input(format!("localization loss {loc} is negative")));
    }
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut sum = 0.0;
    for (z, y) in logits.rows().into_iter().zip(labels.rows()) {
        let z: Vec<f64> = z.to_vec();
        let y: Vec<bool> = y.to_vec();
        sum += classification_loss(&z, &y, cfg)?.0;
    }
    Ok(sum / n as f64 + cfg.lambda_loc * loc)
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub cams: Vec<Cam>,
}

/// Everything retained from a forward pass for backpropagation.
pub struct ForwardTrace {
    backbone: backbone::ConvTrace,
    pub features: Array3<f64>,
    pub pooled: Vec<f64>,
    mlp: Option<head::MlpTrace>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub classification: f64,
    pub localization: f64,
}

#[derive(Debug, Clone)]
pub struct IntentModel {
    cfg: ModelConfig,
    params: ParamSet,
    backbone: TinyConvNet,
    mlp: Option<HashtagMlp>,
    classifier: Linear,
}

impl IntentModel {
    /// Fresh model with every classifier bias set from the prior `pi`.
    pub fn new(cfg: ModelConfig, pi: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bias = init_classifier_bias(pi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = TinyConvNet::build(&cfg.backbone, cfg.in_channels, &mut params, &mut rng)?;
        let mlp = cfg
            .is_multimodal()
            .then(|| HashtagMlp::build(cfg.hashtag_dim, cfg.mlp_hidden, cfg.dropout, &mut params, &mut rng));
        let fused = backbone.out_channels() + mlp.as_ref().map_or(0, HashtagMlp::out_dim);
        let classifier = Linear::build("classifier", fused, cfg.num_classes, &mut params, &mut rng);
        let normal = Normal::new(0.0, cfg.classifier_init_std).expect("validated std");
        for w in params.slice_mut(classifier.weight) {
            *w = normal.sample(&mut rng);
        }
        params.slice_mut(classifier.bias).fill(bias);
        Ok(IntentModel {
            cfg,
            params,
            backbone,
            mlp,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn visual_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn backbone(&self) -> &TinyConvNet {
        &self.backbone
    }

    pub fn mlp(&self) -> Option<&HashtagMlp> {
        self.mlp.as_ref()
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Classifier weights of `class` restricted to the visual dimensions.
    pub fn visual_weights(&self, class: usize) -> &[f64] {
        let w = self.params.slice(self.classifier.weight);
        let stride = self.classifier.in_dim;
        &w[class * stride..class * stride + self.visual_dim()]
    }

    pub fn forward_trace(
        &self,
        image: ArrayView3<f64>,
        hashtag: Option<&[f64]>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardTrace> {
        if !self.cfg.input_mean.is_empty() && image.dim().0 != self.cfg.in_channels {
            return Err(Error::Input(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels,
                image.dim().0
            )));
        }
        let normalized = (!self.cfg.input_mean.is_empty()).then(|| {
            let mut x = image.to_owned();
            for (c, mut ch) in x.axis_iter_mut(ndarray::Axis(0)).enumerate() {
                let (m, s) = (self.cfg.input_mean[c], self.cfg.input_std[c]);
                ch.mapv_inplace(|v| (v - m) / s);
            }
            x
        });
        let input = match &normalized {
            Some(x) => x.view(),
            None => image.view(),
        };
        let (features, trace) = self.backbone.forward(&self.params, input)?;
        let pooled = spatial_mean(&features);
        let mlp = match (hashtag, &self.mlp) {
            (None, _) => None,
            (Some(h), Some(mlp)) => {
                if h.len() != mlp.in_dim() {
                    return Err(Error::Input(format!(
                        "hashtag feature of length {} for MLP input {}",
                        h.len(),
                        mlp.in_dim()
                    )));
                }
                Some(mlp.forward(&self.params, h, rng))
            }
            (Some(_), None) => {
                return Err(Error::Input("image-only model given a hashtag feature".into()));
            }
        };
        let logits = self.classify(&pooled, mlp.as_ref().map(|m| m.output.as_slice()));
        Ok(ForwardTrace {
            backbone: trace,
            features,
            pooled,
            mlp,
            logits,
        })
    }

    fn classify(&self, pooled: &[f64], text: Option<&[f64]>) -> Vec<f64> {
        match text {
            Some(t) => {
                let mut fused = pooled.to_vec();
                fused.extend_from_slice(t);
                self.classifier.forward(&self.params, &fused)
            }
            None => {
                // Image-only: text columns see a zero input.
                let w = self.params.slice(self.classifier.weight);
                let b = self.params.slice(self.classifier.bias);
                let stride = self.classifier.in_dim;
                (0..self.cfg.num_classes)
                    .map(|m| {
                        b[m] + w[m * stride..m * stride + pooled.len()]
                            .iter()
                            .zip(pooled)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    pub fn cams(&self, features: &Array3<f64>, classes: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, Cam>> {
        classes
            .into_iter()
            .map(|m| Ok((m, saliency::compute_cam(features.view(), self.visual_weights(m), m)?)))
            .collect()
    }

    /// Evaluation-mode forward pass returning logits and a CAM per class.
    pub fn forward(&self, image: ArrayView3<f64>, hashtag: Option<&[f64]>) -> Result<ModelOutput> {
        let trace = self.forward_trace(image, hashtag, None)?;
        let cams = (0..self.cfg.num_classes)
            .map(|m| saliency::compute_cam(trace.features.view(), self.visual_weights(m), m))
            .collect::<Result<_>>()?;
        Ok(ModelOutput {
            logits: trace.logits,
            cams,
        })
    }

    /// Backpropagates logit and CAM gradients through the whole network,
    /// accumulating into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        grad_cams: &BTreeMap<usize, Array2<f64>>,
        grads: &mut ParamSet,
    ) -> Result<()> {
        let mut fused = trace.pooled.clone();
        if let Some(m) = &trace.mlp {
            fused.extend_from_slice(&m.output);
        }
        let grad_fused = self.classifier.backward(&self.params, &fused, grad_logits, grads);
        let c = self.visual_dim();
        if let (Some(mlp), Some(mt)) = (&self.mlp, &trace.mlp) {
            mlp.backward(&self.params, mt, &grad_fused[c..], grads);
        }
        let (_, h, w) = trace.features.dim();
        let area = (h * w) as f64;
        let mut grad_features = Array3::zeros(trace.features.dim());
        for (ch, g) in grad_fused[..c].iter().enumerate() {
            grad_features.index_axis_mut(ndarray::Axis(0), ch).fill(g / area);
        }
        let stride = self.classifier.in_dim;
        for (&m, grad_cam) in grad_cams {
            let (gf, gw) = saliency::compute_cam_backward(trace.features.view(), self.visual_weights(m), grad_cam.view())?;
            grad_features += &gf;
            let wrow = &mut grads.slice_mut(self.classifier.weight)[m * stride..m * stride + c];
            for (a, b) in wrow.iter_mut().zip(gw) {
                *a += b;
            }
        }
        self.backbone.backward(&self.params, &trace.backbone, grad_features, grads);
        Ok(())
    }

    /// Forward and backward for one training sample. Gradients of
    /// `weight * (classification + lambda_loc * localization)` are added
    /// to `grads`; unweighted loss terms are returned.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_sample(
        &self,
        image: ArrayView3<f64>,
        hashtag: Option<&[f64]>,
        labels: &[bool],
        masks: Option<&MaskPair>,
        sets: &ContentSets,
        loss_cfg: &LossConfig,
        resample: Resample,
        weight: f64,
        rng: Option<&mut dyn RngCore>,
        grads: &mut ParamSet,
    ) -> Result<SampleLoss> {
        let trace = self.forward_trace(image, hashtag, rng)?;
        let (cls, mut grad_logits) = classification_loss(&trace.logits, labels, loss_cfg)?;
        for g in &mut grad_logits {
            *g *= weight;
        }
        let mut grad_cams = BTreeMap::new();
        let mut loc = 0.0;
        if loss_cfg.lambda_loc > 0.0 && !sets.is_empty() {
            let masks = masks.ok_or_else(|| Error::Config("localization loss needs object/context masks".into()))?;
            let cams = self.cams(&trace.features, sets.iter().map(|(c, _)| c))?;
            let terms = saliency::localization_terms(&cams, masks, sets, resample)?;
            loc = terms.loss;
            for (m, mut g) in terms.grad {
                g *= weight * loss_cfg.lambda_loc;
                grad_cams.insert(m, g);
            }
        }
        self.backward(&trace, &grad_logits, &grad_cams, grads)?;
        Ok(SampleLoss {
            classification: cls,
            localization: loc,
        })
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        // Rebuild the layer layout, then swap in the stored tensors.
        let mut model = IntentModel::new(cfg, 0.5, 0)?;
        model.params.copy_from(&params)?;
        Ok(model)
    }
}
