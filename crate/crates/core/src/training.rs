//! Optimization recipe and the end-to-end training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{write_string, Error, Result};
use crate::evaluation;
use crate::masks::{self, MaskPair};
use crate::model::{save_checkpoint, IntentModel, LossConfig, ParamSet, SampleLoss, Sgd};
use crate::saliency::{ContentSets, Resample};

/// Learning-rate schedule applied after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `every_epochs` epochs.
    Step { every_epochs: usize, gamma: f64 },
    /// Half-cosine from the base rate down to `min_lr` at the last epoch.
    Cosine { min_lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub random_resized_crop: bool,
    pub input_size: usize,
    /// Crop area as a fraction of the image area.
    pub scale: [f64; 2],
    /// Crop aspect ratio (width / height).
    pub ratio: [f64; 2],
    pub hflip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            random_resized_crop: true,
            input_size: 224,
            scale: [0.08, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
            hflip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub schedule: Schedule,
}

pub const IMAGE_ONLY_BASE_LR: f64 = 1e-3;
pub const MULTIMODAL_BASE_LR: f64 = 5e-4;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            momentum: 0.9,
            base_lr: IMAGE_ONLY_BASE_LR,
            warmup_epochs: 5,
            epochs: 30,
            seed: 0,
            augmentation: Augmentation::default(),
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn default_base_lr(multimodal: bool) -> f64 {
        if multimodal {
            MULTIMODAL_BASE_LR
        } else {
            IMAGE_ONLY_BASE_LR
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        let a = &self.augmentation;
        if a.random_resized_crop {
            if a.input_size == 0 {
                return bad("augmentation.input_size must be positive");
            }
            if !(a.scale[0] > 0.0 && a.scale[0] <= a.scale[1] && a.scale[1] <= 1.0) {
                return bad("augmentation.scale must satisfy 0 < lo <= hi <= 1");
            }
            if !(a.ratio[0] > 0.0 && a.ratio[0] <= a.ratio[1]) {
                return bad("augmentation.ratio must satisfy 0 < lo <= hi");
            }
        }
        match self.schedule {
            Schedule::Constant => {}
            Schedule::Step { every_epochs, gamma } => {
                if every_epochs == 0 || !(gamma > 0.0) {
                    return bad("step schedule needs every_epochs > 0 and gamma > 0");
                }
            }
            Schedule::Cosine { min_lr } => {
                if !(0.0..=self.base_lr).contains(&min_lr) {
                    return bad("cosine min_lr must lie in [0, base_lr]");
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_epochs`, then the
/// configured schedule.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let t = step - warm;
    match cfg.schedule {
        Schedule::Constant => cfg.base_lr,
        Schedule::Step { every_epochs, gamma } => {
            let period = (every_epochs * steps_per_epoch).max(1);
            cfg.base_lr * gamma.powi((t / period) as i32)
        }
        Schedule::Cosine { min_lr } => {
            let total = (cfg.epochs.saturating_sub(cfg.warmup_epochs) * steps_per_epoch).max(1);
            let frac = (t as f64 / total as f64).min(1.0);
            min_lr + (cfg.base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Crop box `(top, left, height, width)` following the usual
/// random-resized-crop recipe; falls back to the whole image.
pub fn sample_crop_box(dims: (usize, usize), scale: [f64; 2], ratio: [f64; 2], rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let (h, w) = dims;
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale[0]..=scale[1]);
        let aspect = if lr0 < lr1 { rng.gen_range(lr0..lr1).exp() } else { ratio[0] };
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Applies the same geometric augmentation to an image and its masks.
pub fn augment(
    image: &Array3<f64>,
    masks: Option<&MaskPair>,
    cfg: &Augmentation,
    rng: &mut impl Rng,
) -> (Array3<f64>, Option<MaskPair>) {
    let mut image = image.clone();
    let mut masks = masks.cloned();
    if cfg.random_resized_crop {
        let (_, h, w) = image.dim();
        let (top, left, ch, cw) = sample_crop_box((h, w), cfg.scale, cfg.ratio, rng);
        let crop = image.slice(s![.., top..top + ch, left..left + cw]).to_owned();
        image = masks::resize_image(&crop, cfg.input_size, cfg.input_size);
        if let Some(m) = &mut masks {
            let cut = |x: &masks::Mask| x.slice(s![top..top + ch, left..left + cw]).to_owned();
            let cropped = MaskPair {
                mask_o: cut(&m.mask_o),
                mask_c: cut(&m.mask_c),
                mode: m.mode,
            };
            *m = cropped.resized(cfg.input_size, cfg.input_size);
        }
    }
    if cfg.hflip && rng.gen_bool(0.5) {
        image.invert_axis(ndarray::Axis(2));
        image = image.as_standard_layout().to_owned();
        if let Some(m) = &mut masks {
            *m = m.flipped_horizontally();
        }
    }
    (image, masks)
}

/// Hashtag input for `sample`, or `None` when the model is image-only or
/// hashtags are disabled. Missing features become zero vectors.
pub fn hashtag_input(model: &IntentModel, sample: &Sample, enabled: bool) -> Option<Vec<f64>> {
    let cfg = model.config();
    if !(enabled && cfg.is_multimodal()) {
        return None;
    }
    Some(
        sample
            .hashtag
            .as_ref()
            .map(|f| f.vector.clone())
            .unwrap_or_else(|| vec![0.0; cfg.hashtag_dim]),
    )
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for per-sample randomness, independent of thread scheduling.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub resample: Resample,
    pub threshold: f64,
    pub use_hashtags: bool,
    /// Receives `steps.jsonl`, `epochs.jsonl`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            resample: Resample::default(),
            threshold: evaluation::DEFAULT_THRESHOLD,
            use_hashtags: true,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub classification_loss: f64,
    pub localization_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub classification_loss: f64,
    pub localization_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub macro_f1: f64,
    /// Macro F1 restricted to classes with at least one positive.
    pub macro_f1_present: f64,
}

/// Gradient accumulation splits each batch into this many contiguous shards
/// that are reduced in order, so results do not depend on thread count.
const GRAD_SHARDS: usize = 8;

/// Model plus optimizer state.
pub struct Trainer<'a> {
    model: IntentModel,
    sgd: Sgd,
    cfg: &'a TrainConfig,
    loss: &'a LossConfig,
    sets: &'a ContentSets,
    opts: &'a TrainOptions,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: IntentModel,
        cfg: &'a TrainConfig,
        loss: &'a LossConfig,
        sets: &'a ContentSets,
        opts: &'a TrainOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        sets.validate()?;
        if let Some(&m) = sets.object.iter().chain(&sets.context).find(|&&m| m >= model.num_classes()) {
            return Err(Error::Config(format!("content set names class {m}, model has {}", model.num_classes())));
        }
        let sgd = Sgd::new(model.params(), cfg.momentum);
        Ok(Trainer {
            model,
            sgd,
            cfg,
            loss,
            sets,
            opts,
            step: 0,
        })
    }

    pub fn model(&self) -> &IntentModel {
        &self.model
    }

    pub fn into_model(self) -> IntentModel {
        self.model
    }

    pub fn global_step(&self) -> usize {
        self.step
    }

    fn needs_masks(&self) -> bool {
        self.loss.lambda_loc > 0.0 && !self.sets.is_empty()
    }

    /// Mean-reduced loss and gradients over `indices` at the current weights.
    pub fn batch_gradients(&self, data: &Dataset, indices: &[usize], augment_seed: Option<u64>) -> Result<(SampleLoss, ParamSet)> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let shard = indices.len().div_ceil(GRAD_SHARDS);
        let weight = 1.0 / indices.len() as f64;
        let partials: Vec<Result<(SampleLoss, ParamSet)>> = indices
            .par_chunks(shard)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut grads = self.model.params().zeros_like();
                let mut total = SampleLoss::default();
                for (j, &idx) in chunk.iter().enumerate() {
                    let sample = &data.samples[idx];
                    let pos = (ci * shard + j) as u64;
                    let (image, masks) = match augment_seed {
                        Some(seed) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, self.step as u64, pos));
                            augment(&sample.image, sample.masks.as_ref(), &self.cfg.augmentation, &mut rng)
                        }
                        None => (sample.image.clone(), sample.masks.clone()),
                    };
                    let hashtag = hashtag_input(&self.model, sample, self.opts.use_hashtags);
                    let mut dropout = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ 0xD0, self.step as u64, pos));
                    let l = self.model.accumulate_sample(
                        image.view(),
                        hashtag.as_deref(),
                        &sample.labels,
                        masks.as_ref(),
                        self.sets,
                        self.loss,
                        self.opts.resample,
                        weight,
                        augment_seed.map(|_| &mut dropout as &mut dyn rand::RngCore),
                        &mut grads,
                    )?;
                    total.classification += l.classification * weight;
                    total.localization += l.localization * weight;
                }
                Ok((total, grads))
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut loss, mut grads) = iter.next().expect("non-empty batch")?;
        for p in iter {
            let (l, g) = p?;
            loss.classification += l.classification;
            loss.localization += l.localization;
            grads.add_assign(&g);
        }
        Ok((loss, grads))
    }

    /// One optimizer step on `indices` at learning rate `lr`.
    pub fn step_on(&mut self, data: &Dataset, indices: &[usize], epoch: usize, lr: f64) -> Result<StepRecord> {
        if self.needs_masks() && indices.iter().any(|&i| data.samples[i].masks.is_none()) {
            return Err(Error::Config("localization loss is enabled but a sample has no masks".into()));
        }
        let (loss, grads) = self.batch_gradients(data, indices, Some(self.cfg.seed))?;
        let total = loss.classification + self.loss.lambda_loc * loss.localization;
        if !total.is_finite() || !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at epoch {epoch}, step {}: lr={lr}, classification={}, localization={}",
                self.step, loss.classification, loss.localization
            )));
        }
        self.sgd.step(self.model.params_mut(), &grads, lr);
        let rec = StepRecord {
            epoch,
            step: self.step,
            lr,
            classification_loss: loss.classification,
            localization_loss: loss.localization,
            total_loss: total,
        };
        self.step += 1;
        Ok(rec)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best epoch-end macro F1.
    pub best: IntentModel,
    pub last: IntentModel,
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Trains `model` on `train_set`. Model selection uses `val_set` when given,
/// otherwise the (unaugmented) training set.
pub fn train(
    model: IntentModel,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    sets: &ContentSets,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if train_set.num_classes() != Some(model.num_classes()) {
        return Err(Error::Input(format!(
            "dataset has {} classes, model has {}",
            train_set.num_classes().unwrap_or(0),
            model.num_classes()
        )));
    }
    let mut trainer = Trainer::new(model, cfg, loss, sets, opts)?;
    if trainer.needs_masks() && !train_set.has_masks() {
        return Err(Error::Config("localization loss is enabled but masks are missing".into()));
    }
    let spe = train_set.len().div_ceil(cfg.batch_size);
    let select_on = val_set.unwrap_or(train_set);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5F, 0));
    let (mut steps, mut epochs) = (Vec::new(), Vec::new());
    let mut best = (trainer.model().clone(), 0usize, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let first = steps.len();
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(trainer.global_step(), spe, cfg);
            steps.push(trainer.step_on(train_set, batch, epoch, lr)?);
        }
        let these = &steps[first..];
        let n = these.len() as f64;
        let mean = |f: fn(&StepRecord) -> f64| these.iter().map(f).sum::<f64>() / n;
        let scores = evaluation::predict(trainer.model(), select_on, opts.use_hashtags)?;
        let labels = select_on.label_matrix();
        let report = evaluation::macro_f1(scores.view(), labels.view(), opts.threshold)?;
        let present = evaluation::present_classes(labels.view());
        let rec = EpochRecord {
            epoch,
            steps: these.len(),
            classification_loss: mean(|r| r.classification_loss),
            localization_loss: mean(|r| r.localization_loss),
            total_loss: mean(|r| r.total_loss),
            lr: these.last().map_or(0.0, |r| r.lr),
            macro_f1: report.macro_f1,
            macro_f1_present: evaluation::macro_over(&report.per_class, &present),
        };
        if rec.macro_f1 > best.2 {
            best = (trainer.model().clone(), epoch, rec.macro_f1);
        }
        epochs.push(rec);
        if let Some(dir) = &opts.out_dir {
            write_string(&dir.join("steps.jsonl"), &jsonl(&steps))?;
            write_string(&dir.join("epochs.jsonl"), &jsonl(&epochs))?;
        }
    }
    let last = trainer.into_model();
    if cfg.epochs == 0 {
        best.0 = last.clone();
    }
    if let Some(dir) = &opts.out_dir {
        let meta = |epoch: usize| -> BTreeMap<String, String> {
            [("epoch".to_string(), epoch.to_string()), ("seed".to_string(), cfg.seed.to_string())].into()
        };
        save_checkpoint(&best.0, &meta(best.1), &dir.join("best.ckpt"))?;
        save_checkpoint(&last, &meta(cfg.epochs.saturating_sub(1)), &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        best: best.0,
        last,
        best_epoch: best.1,
        steps,
        epochs,
    })
}

pub fn metrics_paths(dir: &Path) -> [PathBuf; 2] {
    [dir.join("steps.jsonl"), dir.join("epochs.jsonl")]
}
