//! Versioned TOML experiment configuration. Every section is optional and
//! falls back to the defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::DEFAULT_HITL_TAU;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_THRESHOLD;
use crate::hashtags::HashtagConfig;
use crate::masks::MaskConfig;
use crate::model::{LossConfig, ModelConfig};
use crate::saliency::{ContentSets, Resample, DEFAULT_TAU_CAM};
use crate::taxonomy::GroupingConfig;
use crate::training::{Augmentation, Schedule, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Training section. `base_lr` may be omitted, in which case it follows the
/// model: 1e-3 image-only, 5e-4 when hashtag features are fused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub momentum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub augmentation: Augmentation,
    pub schedule: Schedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            momentum: t.momentum,
            base_lr: None,
            warmup_epochs: t.warmup_epochs,
            epochs: t.epochs,
            augmentation: t.augmentation,
            schedule: t.schedule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    pub tau_cam: f64,
    pub resample: Resample,
}

impl Default for SaliencySection {
    fn default() -> Self {
        SaliencySection {
            tau_cam: DEFAULT_TAU_CAM,
            resample: Resample::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub threshold: f64,
    /// Disruption levels for the content study, strictly increasing in [0, 1].
    pub levels: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            threshold: DEFAULT_THRESHOLD,
            levels: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationSection {
    pub hitl_tau: f64,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        AnnotationSection {
            hitl_tau: DEFAULT_HITL_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Governs every random choice; the CLI's `--seed` overrides it.
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub masks: MaskConfig,
    pub saliency: SaliencySection,
    pub hashtags: HashtagConfig,
    pub evaluation: EvaluationSection,
    pub grouping: GroupingConfig,
    pub annotation: AnnotationSection,
    /// Object- and context-dependent class ids used by the localization loss.
    pub content_sets: ContentSets,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            masks: MaskConfig::default(),
            saliency: SaliencySection::default(),
            hashtags: HashtagConfig::default(),
            evaluation: EvaluationSection::default(),
            grouping: GroupingConfig::default(),
            annotation: AnnotationSection::default(),
            content_sets: ContentSets::default(),
        }
    }
}

/// Annotated template listing every hyperparameter at its default.
pub const DEFAULT_CONFIG_TOML: &str = r#"version = 1
seed = 0

[model]
num_classes = 28
in_channels = 3
# 0 = image only; > 0 fuses a hashtag feature of this dimension.
hashtag_dim = 0
mlp_hidden = [1024, 2048]
dropout = 0.25
classifier_init_std = 0.01
input_mean = [0.485, 0.456, 0.406]
input_std = [0.229, 0.224, 0.225]

[model.backbone]
channels = [8, 16, 16, 32]
strides = [1, 2, 1, 2]

[loss]
lambda_loc = 0.1
# Classifier bias prior: b = -ln((1 - pi) / pi).
pi = 0.01
classification = "bce"
focal_alpha = 0.25
focal_gamma = 2.0

[train]
batch_size = 128
momentum = 0.9
# base_lr omitted: 1e-3 image-only, 5e-4 multimodal.
warmup_epochs = 5
epochs = 30

[train.augmentation]
random_resized_crop = true
input_size = 224
scale = [0.08, 1.0]
ratio = [0.75, 1.3333333333333333]
hflip = true

[train.schedule]
kind = "constant"

[masks]
mode = "panoptic"
tau_p = 0.7
min_area = 0.1
area_filter = "all_regions"
tau_det = 0.6
resize_longest = 1280

[saliency]
tau_cam = 0.4
resample = "masks_to_cam"

[hashtags]
k = 150
metric = "euclidean"
pooling = "occurrence"
use_in_training = true

[evaluation]
threshold = 0.5
levels = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]

[grouping]
neutral_band = 0.5

[grouping.gain]
inputs_are_fractions = false

[grouping.cuts]
low = 5.0
high = 15.0
low_is_easy = true

[annotation]
hitl_tau = 0.35

[content_sets]
object = []
context = []
"#;

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&crate::error::read_to_string(path)?)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_string(path, &self.to_toml_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        self.content_sets.validate()?;
        if let Some(c) = self.content_sets.iter().map(|(c, _)| c).find(|&c| c >= self.model.num_classes) {
            return Err(Error::Config(format!("content set class {c} out of range")));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("saliency.tau_cam", self.saliency.tau_cam)?;
        unit("evaluation.threshold", self.evaluation.threshold)?;
        unit("annotation.hitl_tau", self.annotation.hitl_tau)?;
        unit("masks.tau_p", self.masks.tau_p)?;
        unit("masks.tau_det", self.masks.tau_det)?;
        unit("masks.min_area", self.masks.min_area)?;
        if self.hashtags.k == 0 {
            return Err(Error::Config("hashtags.k must be positive".into()));
        }
        let lv = &self.evaluation.levels;
        if lv.len() < 2 || lv.windows(2).any(|w| !(w[0] < w[1])) || lv.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config(
                "evaluation.levels must hold at least two strictly increasing values in [0, 1]".into(),
            ));
        }
        if !(self.grouping.neutral_band >= 0.0) || !(self.grouping.cuts.low <= self.grouping.cuts.high) {
            return Err(Error::Config("grouping needs neutral_band >= 0 and cuts.low <= cuts.high".into()));
        }
        Ok(())
    }

    /// Resolved training config, with the experiment seed and the base rate
    /// filled in from the model kind when unset.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            momentum: t.momentum,
            base_lr: t
                .base_lr
                .unwrap_or_else(|| TrainConfig::default_base_lr(self.model.is_multimodal())),
            warmup_epochs: t.warmup_epochs,
            epochs: t.epochs,
            seed: self.seed,
            augmentation: t.augmentation.clone(),
            schedule: t.schedule,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{IMAGE_ONLY_BASE_LR, MULTIMODAL_BASE_LR};

    #[test]
    fn template_equals_defaults() {
        let parsed = ExperimentConfig::from_toml_str(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
    }

    #[test]
    fn documented_defaults() {
        let c = ExperimentConfig::from_toml_str("version = 1\n").unwrap();
        assert_eq!(c.loss.lambda_loc, 0.1);
        assert_eq!(c.loss.pi, 0.01);
        assert_eq!(c.masks.tau_p, 0.7);
        assert_eq!(c.masks.resize_longest, 1280);
        assert_eq!(c.saliency.tau_cam, 0.4);
        assert_eq!(c.hashtags.k, 150);
        assert_eq!(c.annotation.hitl_tau, 0.35);
        assert_eq!((c.grouping.cuts.low, c.grouping.cuts.high), (5.0, 15.0));
        let t = c.train_config();
        assert_eq!((t.batch_size, t.momentum, t.warmup_epochs), (128, 0.9, 5));
        assert_eq!(t.augmentation.input_size, 224);
        assert_eq!(t.base_lr, IMAGE_ONLY_BASE_LR);
        let mm = ExperimentConfig::from_toml_str("version = 1\n[model]\nhashtag_dim = 300\n").unwrap();
        assert_eq!(mm.train_config().base_lr, MULTIMODAL_BASE_LR);
        let explicit = ExperimentConfig::from_toml_str("version = 1\n[train]\nbase_lr = 0.01\n").unwrap();
        assert_eq!(explicit.train_config().base_lr, 0.01);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in [
            "version = 1\nbogus = 3\n",
            "version = 1\n[loss]\nlamda_loc = 0.1\n",
            "version = 2\n",
            "version = 1\n[saliency]\ntau_cam = 1.5\n",
            "version = 1\n[content_sets]\nobject = [1]\ncontext = [1]\n",
            "version = 1\n[content_sets]\nobject = [40]\n",
            "version = 1\n[evaluation]\nlevels = [0.5, 0.2]\n",
            "version = 1\n[train]\nwarmup_epochs = 50\nepochs = 10\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig { seed: 17, ..Default::default() };
        c.content_sets = ContentSets::new([0, 3], [5]).unwrap();
        c.train.base_lr = Some(0.002);
        c.train.schedule = Schedule::Step { every_epochs: 10, gamma: 0.1 };
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), c.to_toml_string());
    }
}
