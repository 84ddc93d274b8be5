//! The 28-class intent taxonomy and the two class-grouping schemes:
//! difficulty (information gain over random guessing) and content
//! (object/context disruption slopes).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_string, Error, Result};

pub const NUM_CLASSES: usize = 28;
pub const NUM_SUPERCATEGORIES: usize = 9;
pub const TAXONOMY_VERSION: u32 = 1;
pub const GROUPS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentClass {
    pub id: usize,
    pub name: String,
    pub supercategory: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub version: u32,
    pub classes: Vec<IntentClass>,
}

const BUILTIN: [(&str, &str, &str); NUM_CLASSES] = [
    ("Attractive", "power", "Being good looking, attractive."),
    ("BeatCompete", "power", "Beat people in a competition."),
    ("Communicate", "security and belonging", "To communicate or express myself."),
    (
        "CreativeUnique",
        "openness to experience",
        "Being creative (e.g., artistically, scientifically, intellectually). Being unique or different.",
    ),
    (
        "CuriousAdventurousExcitingLife",
        "openness to experience",
        "Exploration. Being curious and adventurous. Having an exciting, stimulating life.",
    ),
    ("EasyLife", "self-fulfill", "Having an easy and comfortable life."),
    ("EnjoyLife", "self-fulfill", "Enjoying life."),
    (
        "FineDesignLearnArt-Arch",
        "openness to experience",
        "Appreciating fine design (man-made wonders like architectures).",
    ),
    (
        "FineDesignLearnArt-Art",
        "openness to experience",
        "Appreciating fine design (artwork).",
    ),
    (
        "FineDesignLearnArt-Culture",
        "openness to experience",
        "Appreciating other cultures.",
    ),
    (
        "GoodParentEmoCloseChild",
        "family",
        "Being a good parent (teaching, transmitting values). Being emotionally close to my children.",
    ),
    (
        "Happy",
        "self-fulfill",
        "Being happy and content. Feeling satisfied with one's life. Feeling good about myself.",
    ),
    ("HardWorking", "ambition and ability", "Being ambitious, hard-working."),
    (
        "Harmony",
        "self-fulfill",
        "Achieving harmony and oneness (with self and the universe).",
    ),
    (
        "Health",
        "health",
        "Being physically active, fit, healthy. Being physically able to do daily activities. Having athletic ability.",
    ),
    ("InLove", "security and belonging", "Being in love."),
    ("InLoveAnimal", "security and belonging", "Being in love with animal."),
    (
        "InspirOthers",
        "power",
        "Inspiring others, influencing, persuading others.",
    ),
    (
        "ManagableMakePlan",
        "virtues",
        "To keep things manageable. To make plans.",
    ),
    ("NatBeauty", "openness to experience", "Experiencing natural beauty."),
    (
        "PassionAbSmthing",
        "self-fulfill",
        "Being really passionate about something.",
    ),
    ("Playful", "self-fulfill", "Being playful, carefree, lighthearted."),
    (
        "ShareFeelings",
        "security and belonging",
        "Sharing my feelings with others.",
    ),
    (
        "SocialLifeFriendship",
        "security and belonging",
        "Being part of a social group. Having people to do things with. Having close friends, others to rely on.",
    ),
    (
        "SuccInOccupHavGdJob",
        "financial and occupational success",
        "Being successful in my occupation. Having a good job.",
    ),
    ("TeachOthers", "virtues", "Teaching others."),
    (
        "ThngsInOrdr",
        "virtues",
        "Keeping things in order (my desk, office, house, etc.).",
    ),
    (
        "WorkILike",
        "financial and occupational success",
        "Having work I really like.",
    ),
];

impl Taxonomy {
    /// The built-in 28-class taxonomy.
    pub fn builtin() -> Self {
        Taxonomy {
            version: TAXONOMY_VERSION,
            classes: BUILTIN
                .iter()
                .enumerate()
                .map(|(id, (name, sup, desc))| IntentClass {
                    id,
                    name: name.to_string(),
                    supercategory: sup.to_string(),
                    description: desc.to_string(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TAXONOMY_VERSION {
            return Err(Error::Input(format!(
                "unsupported taxonomy version {}",
                self.version
            )));
        }
        if self.classes.len() != NUM_CLASSES {
            return Err(Error::Input(format!(
                "taxonomy must have {NUM_CLASSES} classes, found {}",
                self.classes.len()
            )));
        }
        let mut names = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Input(format!(
                    "class ids must be dense 0..{}; position {i} holds id {}",
                    NUM_CLASSES - 1,
                    c.id
                )));
            }
            if c.name.is_empty() || !names.insert(c.name.as_str()) {
                return Err(Error::Input(format!("duplicate or empty class name {:?}", c.name)));
            }
        }
        let supers: HashSet<&str> = self.classes.iter().map(|c| c.supercategory.as_str()).collect();
        if supers.len() != NUM_SUPERCATEGORIES {
            return Err(Error::Input(format!(
                "taxonomy must have {NUM_SUPERCATEGORIES} supercategories, found {}",
                supers.len()
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let t: Taxonomy = serde_json::from_str(s).map_err(|e| Error::parse("taxonomy", e))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }

    pub fn by_name(&self, name: &str) -> Option<&IntentClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn supercategories(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for c in &self.classes {
            if !seen.contains(&c.supercategory.as_str()) {
                seen.push(c.supercategory.as_str());
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContentGroup {
    ObjectDependent,
    ContextDependent,
    Others,
}

/// Ordered `Easy < Medium < Hard`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DifficultyGroup {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rho {
    Positive,
    Neutral,
    Negative,
}

/// How raw scores are fed into the information gain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    /// Logarithm base; `None` means natural log.
    pub log_base: Option<f64>,
    /// Scores are supplied as fractions in [0, 1] and must be scaled to percent.
    pub inputs_are_fractions: bool,
}

/// `D = r * ln(s / r)` with `r` and `s` in percent.
pub fn information_gain(r: f64, s: f64) -> Result<f64> {
    information_gain_with(r, s, &GainConfig::default())
}

pub fn information_gain_with(r: f64, s: f64, cfg: &GainConfig) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) || !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!(
            "information gain needs positive finite scores, got r={r}, s={s}"
        )));
    }
    let (r, s) = if cfg.inputs_are_fractions {
        (r * 100.0, s * 100.0)
    } else {
        (r, s)
    };
    let log = match cfg.log_base {
        None => (s / r).ln(),
        Some(b) if b > 0.0 && b != 1.0 => (s / r).ln() / b.ln(),
        Some(b) => return Err(Error::Config(format!("invalid log base {b}"))),
    };
    Ok(r * log)
}

/// F1 of a classifier that flips a fair coin, for a class with the given
/// positive prevalence: precision = p, recall = 1/2. Returned in percent.
pub fn random_guess_f1(prevalence: f64) -> Result<f64> {
    if !(prevalence > 0.0 && prevalence <= 1.0) {
        return Err(Error::Domain(format!("prevalence {prevalence} outside (0, 1]")));
    }
    Ok(100.0 * prevalence / (prevalence + 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyCuts {
    pub low: f64,
    pub high: f64,
    /// Map `D <= low` to Easy (as the categorization table prints it).
    /// When false the mapping is reversed: `D > high` is Easy.
    pub low_is_easy: bool,
}

impl Default for DifficultyCuts {
    fn default() -> Self {
        DifficultyCuts {
            low: 5.0,
            high: 15.0,
            low_is_easy: true,
        }
    }
}

pub fn assign_difficulty(d: f64) -> Result<DifficultyGroup> {
    assign_difficulty_with(d, &DifficultyCuts::default())
}

pub fn assign_difficulty_with(d: f64, cuts: &DifficultyCuts) -> Result<DifficultyGroup> {
    if d.is_nan() {
        return Err(Error::Domain("information gain is NaN".into()));
    }
    let band = if d <= cuts.low {
        0
    } else if d <= cuts.high {
        1
    } else {
        2
    };
    let band = if cuts.low_is_easy { band } else { 2 - band };
    Ok([DifficultyGroup::Easy, DifficultyGroup::Medium, DifficultyGroup::Hard][band])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisruptionSeries {
    levels: Vec<f64>,
    f1: Vec<f64>,
}

impl DisruptionSeries {
    pub fn new(levels: Vec<f64>, f1: Vec<f64>) -> Result<Self> {
        if levels.len() != f1.len() {
            return Err(Error::Input(format!(
                "{} levels but {} F1 values",
                levels.len(),
                f1.len()
            )));
        }
        if levels.len() < 2 {
            return Err(Error::Domain("a disruption series needs at least two levels".into()));
        }
        if levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input("disruption levels must be strictly increasing".into()));
        }
        if f1.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("F1 values must lie in [0, 1]".into()));
        }
        Ok(DisruptionSeries { levels, f1 })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn f1(&self) -> &[f64] {
        &self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub rho: Rho,
}

pub const DEFAULT_NEUTRAL_BAND: f64 = 0.5;

/// Ordinary least squares `y = alpha * x + beta` over unordered pairs.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Input("x and y lengths differ".into()));
    }
    if xs.len() < 2 {
        return Err(Error::Domain("line fit needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("all disruption levels are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    Ok((alpha, my - alpha * mx))
}

pub fn fit_disruption_line(series: &DisruptionSeries) -> Result<SlopeSummary> {
    fit_disruption_line_with(series, DEFAULT_NEUTRAL_BAND)
}

pub fn fit_disruption_line_with(series: &DisruptionSeries, neutral_band: f64) -> Result<SlopeSummary> {
    let (alpha, beta) = fit_line(&series.levels, &series.f1)?;
    let alpha_bar = alpha / series.levels.len() as f64 * 10.0;
    Ok(SlopeSummary {
        alpha,
        beta,
        alpha_bar,
        rho: classify_rho(alpha_bar, neutral_band),
    })
}

pub fn classify_rho(alpha_bar: f64, neutral_band: f64) -> Rho {
    if alpha_bar.abs() <= neutral_band {
        Rho::Neutral
    } else if alpha_bar > 0.0 {
        Rho::Positive
    } else {
        Rho::Negative
    }
}

pub fn assign_content_group(object: &SlopeSummary, context: &SlopeSummary) -> ContentGroup {
    if object.alpha_bar > context.alpha_bar && context.rho != Rho::Positive {
        ContentGroup::ObjectDependent
    } else if object.alpha_bar < context.alpha_bar && object.rho != Rho::Positive {
        ContentGroup::ContextDependent
    } else {
        ContentGroup::Others
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignment {
    pub class_id: usize,
    pub content_group: ContentGroup,
    pub difficulty_group: DifficultyGroup,
    #[serde(rename = "D")]
    pub d: f64,
    pub alpha_bar_o: f64,
    pub alpha_bar_c: f64,
}

/// Class-id keyed grouping table, the on-disk exchange format between
/// `group-classes` and the evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTable {
    pub version: u32,
    pub classes: Vec<GroupAssignment>,
}

impl GroupTable {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let t: GroupTable = serde_json::from_str(s).map_err(|e| Error::parse("group table", e))?;
        if t.version != GROUPS_VERSION {
            return Err(Error::Input(format!("unsupported group table version {}", t.version)));
        }
        let mut seen = HashSet::new();
        for a in &t.classes {
            if !seen.insert(a.class_id) {
                return Err(Error::Input(format!("class {} listed twice", a.class_id)));
            }
        }
        Ok(t)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("group table serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }

    pub fn content_map(&self) -> BTreeMap<usize, ContentGroup> {
        self.classes.iter().map(|a| (a.class_id, a.content_group)).collect()
    }

    pub fn difficulty_map(&self) -> BTreeMap<usize, DifficultyGroup> {
        self.classes.iter().map(|a| (a.class_id, a.difficulty_group)).collect()
    }

    /// Classes tagged object- and context-dependent, in id order.
    pub fn content_sets(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |g| {
            self.classes
                .iter()
                .filter(|a| a.content_group == g)
                .map(|a| a.class_id)
                .collect()
        };
        (pick(ContentGroup::ObjectDependent), pick(ContentGroup::ContextDependent))
    }
}

/// Per-class inputs for the grouping pipeline.
#[derive(Debug, Clone)]
pub struct ClassEvidence {
    pub class_id: usize,
    pub random_score: f64,
    pub model_score: f64,
    pub object_series: DisruptionSeries,
    pub context_series: DisruptionSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub gain: GainConfig,
    pub cuts: DifficultyCuts,
    pub neutral_band: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            gain: GainConfig::default(),
            cuts: DifficultyCuts::default(),
            neutral_band: DEFAULT_NEUTRAL_BAND,
        }
    }
}

pub fn group_classes(evidence: &[ClassEvidence], cfg: &GroupingConfig) -> Result<GroupTable> {
    let mut classes = Vec::with_capacity(evidence.len());
    let mut seen = HashSet::new();
    for ev in evidence {
        if !seen.insert(ev.class_id) {
            return Err(Error::Input(format!("class {} supplied twice", ev.class_id)));
        }
        let d = information_gain_with(ev.random_score, ev.model_score, &cfg.gain)?;
        let o = fit_disruption_line_with(&ev.object_series, cfg.neutral_band)?;
        let c = fit_disruption_line_with(&ev.context_series, cfg.neutral_band)?;
        classes.push(GroupAssignment {
            class_id: ev.class_id,
            content_group: assign_content_group(&o, &c),
            difficulty_group: assign_difficulty_with(d, &cfg.cuts)?,
            d,
            alpha_bar_o: o.alpha_bar,
            alpha_bar_c: c.alpha_bar,
        });
    }
    classes.sort_by_key(|a| a.class_id);
    Ok(GroupTable {
        version: GROUPS_VERSION,
        classes,
    })
}
