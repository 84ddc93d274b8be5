//! Macro-F1 evaluation, grouped reporting, run aggregation, the content
//! disruption study and the neighbour-count sweep.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{read_to_string, write_string, Error, Result};
use crate::hashtags::{build_hashtag_feature, HashtagConfig, HashtagEncoder, KnnIndex, Metric, Pooling};
use crate::masks::Mask;
use crate::model::{sigmoid, IntentModel, LossConfig};
use crate::saliency::{self, ContentSets, Resample};
use crate::synthetic::NeighborCorpus;
use crate::taxonomy::DisruptionSeries;
use crate::training::{self, hashtag_input, TrainConfig, TrainOptions};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
}

/// Per-class F1 at `threshold` (a score counts as positive when
/// `>= threshold`); a class with no true or predicted positives scores 0.
pub fn macro_f1(scores: ArrayView2<f64>, labels: ArrayView2<bool>, threshold: f64) -> Result<F1Report> {
    if scores.dim() != labels.dim() {
        return Err(Error::Input(format!(
            "scores {:?} and labels {:?} differ in shape",
            scores.dim(),
            labels.dim()
        )));
    }
    let (n, k) = scores.dim();
    if n == 0 {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    if k == 0 {
        return Err(Error::Input("no classes to evaluate".into()));
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for i in 0..n {
                match (scores[[i, c]] >= threshold, labels[[i, c]]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / k as f64;
    Ok(F1Report { per_class, macro_f1 })
}

/// Classes with at least one positive label.
pub fn present_classes(labels: ArrayView2<bool>) -> Vec<usize> {
    (0..labels.ncols()).filter(|&c| labels.column(c).iter().any(|&b| b)).collect()
}

/// Unweighted mean of `per_class` over `classes`; 0 for an empty subset.
pub fn macro_over(per_class: &[f64], classes: &[usize]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| per_class[c]).sum::<f64>() / classes.len() as f64
}

pub fn threshold_sweep(scores: ArrayView2<f64>, labels: ArrayView2<bool>, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| Ok((t, macro_f1(scores, labels, t)?.macro_f1)))
        .collect()
}

pub const ALL_GROUP: &str = "All";

/// Mean F1 within each group, plus `"All"` over every class. Group names are
/// the variant names of `G`.
pub fn group_report<G: Ord + Copy + Debug>(per_class: &[f64], grouping: &BTreeMap<usize, G>) -> Result<BTreeMap<String, f64>> {
    if let Some(c) = (0..per_class.len()).find(|c| !grouping.contains_key(c)) {
        return Err(Error::Config(format!("class {c} is missing from the grouping")));
    }
    if let Some(&c) = grouping.keys().find(|&&c| c >= per_class.len()) {
        return Err(Error::Config(format!("grouping names class {c}, only {} evaluated", per_class.len())));
    }
    let mut sums: BTreeMap<G, (f64, usize)> = BTreeMap::new();
    for (&c, &g) in grouping {
        let e = sums.entry(g).or_default();
        e.0 += per_class[c];
        e.1 += 1;
    }
    let mut out: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(g, (s, n))| (format!("{g:?}"), s / n as f64))
        .collect();
    let all = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };
    out.insert(ALL_GROUP.to_string(), all);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
    pub n: usize,
    pub single_run: bool,
}

/// Mean and sample standard deviation of every metric across runs. A
/// metric absent from some runs is summarized over the runs that have it.
pub fn aggregate_runs(runs: &[BTreeMap<String, f64>]) -> BTreeMap<String, RunSummary> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, &v) in run {
            values.entry(k.as_str()).or_default().push(v);
        }
    }
    values
        .into_iter()
        .map(|(k, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n >= 2 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (
                k.to_string(),
                RunSummary {
                    mean,
                    std,
                    n,
                    single_run: n < 2,
                },
            )
        })
        .collect()
}

/// Sigmoid scores for every sample, in dataset order.
pub fn predict(model: &IntentModel, data: &Dataset, use_hashtags: bool) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = data
        .samples
        .par_iter()
        .map(|s| {
            let h = hashtag_input(model, s, use_hashtags);
            let t = model.forward_trace(s.image.view(), h.as_deref(), None)?;
            Ok(t.logits.iter().map(|&z| sigmoid(z)).collect())
        })
        .collect::<Result<_>>()?;
    let k = model.num_classes();
    Ok(Array2::from_shape_fn((rows.len(), k), |(i, c)| rows[i][c]))
}

pub fn evaluate_model(model: &IntentModel, data: &Dataset, threshold: f64, use_hashtags: bool) -> Result<F1Report> {
    if data.num_classes().is_some_and(|k| k != model.num_classes()) {
        return Err(Error::Input("dataset and model disagree on the class count".into()));
    }
    let scores = predict(model, data, use_hashtags)?;
    macro_f1(scores.view(), data.label_matrix().view(), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForbiddenMass {
    /// Mean over samples and content-set classes of the CAM sum inside the
    /// forbidden region (the per-class localization penalty).
    pub mean_mass: f64,
    /// Same, divided by the CAM's total sum (0 for an all-zero CAM).
    pub mean_fraction: f64,
}

/// How much CAM mass M_O classes put on context pixels and M_C classes put
/// on object pixels, measured in evaluation mode.
pub fn forbidden_cam_mass(model: &IntentModel, data: &Dataset, sets: &ContentSets, resample: Resample) -> Result<ForbiddenMass> {
    if sets.is_empty() {
        return Err(Error::Config("content sets are empty".into()));
    }
    let per: Vec<(f64, f64)> = data
        .samples
        .par_iter()
        .map(|s| {
            let masks = s
                .masks
                .as_ref()
                .ok_or_else(|| Error::Config(format!("sample {} has no masks", s.id)))?;
            let t = model.forward_trace(s.image.view(), None, None)?;
            let cams = model.cams(&t.features, sets.iter().map(|(c, _)| c))?;
            let (mut mass, mut frac) = (0.0, 0.0);
            for (c, is_object) in sets.iter() {
                let cam = &cams[&c];
                let forbidden = if is_object { &masks.mask_c } else { &masks.mask_o };
                let w = saliency::forbidden_weights(forbidden, cam.values.dim(), resample);
                let m = (&cam.values * &w).sum();
                let total = cam.values.sum();
                mass += m;
                frac += if total > 0.0 { m / total } else { 0.0 };
            }
            Ok((mass, frac))
        })
        .collect::<Result<_>>()?;
    let denom = (per.len() * (sets.object.len() + sets.context.len())).max(1) as f64;
    Ok(ForbiddenMass {
        mean_mass: per.iter().map(|p| p.0).sum::<f64>() / denom,
        mean_fraction: per.iter().map(|p| p.1).sum::<f64>() / denom,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Object,
    Context,
}

/// Disjoint removal units covering the target mask, largest first. Segment
/// regions are clipped to the mask; uncovered mask pixels form a final
/// unit. Without segment regions the whole mask is one unit.
pub fn removal_units(sample: &Sample, target: Target) -> Result<Vec<Mask>> {
    let masks = sample
        .masks
        .as_ref()
        .ok_or_else(|| Error::Config(format!("sample {} has no masks", sample.id)))?;
    let mask = match target {
        Target::Object => &masks.mask_o,
        Target::Context => &masks.mask_c,
    };
    let mut clipped: Vec<Mask> = sample
        .regions
        .iter()
        .flatten()
        .map(|r| {
            if r.raster.dim() != mask.dim() {
                return Err(Error::Input(format!("region raster of {} does not match its masks", sample.id)));
            }
            Ok(ndarray::Zip::from(&r.raster).and(mask).map_collect(|&a, &b| a && b))
        })
        .collect::<Result<_>>()?;
    clipped.sort_by_key(|m| std::cmp::Reverse(m.iter().filter(|&&b| b).count()));
    let mut claimed = Mask::from_elem(mask.dim(), false);
    let mut units = Vec::new();
    for m in clipped {
        let unit = ndarray::Zip::from(&m).and(&claimed).map_collect(|&a, &c| a && !c);
        if unit.iter().any(|&b| b) {
            claimed.zip_mut_with(&unit, |c, &u| *c |= u);
            units.push(unit);
        }
    }
    let rest = ndarray::Zip::from(mask).and(&claimed).map_collect(|&a, &c| a && !c);
    if rest.iter().any(|&b| b) {
        units.push(rest);
    }
    // Re-sort: the residual unit may be larger than some regions.
    units.sort_by_key(|m| std::cmp::Reverse(m.iter().filter(|&&b| b).count()));
    Ok(units)
}

/// Blacks out removal units, largest first, until at least `level` of the
/// target area is gone. Level 0 leaves the image untouched.
pub fn disrupt_image(sample: &Sample, target: Target, level: f64) -> Result<ndarray::Array3<f64>> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Input(format!("disruption level {level} outside [0, 1]")));
    }
    let units = removal_units(sample, target)?;
    let mut image = sample.image.clone();
    let total: usize = units.iter().map(|u| u.iter().filter(|&&b| b).count()).sum();
    let goal = level * total as f64;
    let mut removed = 0usize;
    for u in &units {
        if (removed as f64) >= goal {
            break;
        }
        for ((y, x), &b) in u.indexed_iter() {
            if b {
                for c in 0..image.dim().0 {
                    image[[c, y, x]] = 0.0;
                }
            }
        }
        removed += u.iter().filter(|&&b| b).count();
    }
    Ok(image)
}

pub fn disrupt_dataset(data: &Dataset, target: Target, level: f64) -> Result<Dataset> {
    let samples = data
        .samples
        .par_iter()
        .map(|s| {
            Ok(Sample {
                image: disrupt_image(s, target, level)?,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

/// Fine-tune the model on each disrupted variant before evaluating it.
#[derive(Debug, Clone)]
pub struct FineTune<'a> {
    pub train_set: &'a Dataset,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sets: ContentSets,
    pub options: TrainOptions,
}

#[derive(Debug, Clone)]
pub struct StudyConfig<'a> {
    pub levels: Vec<f64>,
    pub target: Target,
    pub threshold: f64,
    pub use_hashtags: bool,
    pub fine_tune: Option<FineTune<'a>>,
}

pub const STUDY_VERSION: u32 = 1;

/// F1 of every class at every disruption level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisruptionStudy {
    pub version: u32,
    pub target: Target,
    pub levels: Vec<f64>,
    /// `f1[class][level]`, in [0, 1].
    pub f1: Vec<Vec<f64>>,
    pub macro_f1: Vec<f64>,
}

impl DisruptionStudy {
    pub fn series(&self, class: usize) -> Result<DisruptionSeries> {
        let f1 = self
            .f1
            .get(class)
            .ok_or_else(|| Error::Input(format!("study has no class {class}")))?;
        DisruptionSeries::new(self.levels.clone(), f1.clone())
    }

    pub fn all_series(&self) -> Result<Vec<DisruptionSeries>> {
        (0..self.f1.len()).map(|c| self.series(c)).collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let st: DisruptionStudy = serde_json::from_str(s).map_err(|e| Error::parse("disruption study", e))?;
        if st.version != STUDY_VERSION {
            return Err(Error::Input(format!("unsupported study version {}", st.version)));
        }
        if st.macro_f1.len() != st.levels.len() {
            return Err(Error::Input("macro_f1 length differs from levels".into()));
        }
        st.all_series()?;
        Ok(st)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }
}

pub fn run_disruption_study(model: &IntentModel, data: &Dataset, cfg: &StudyConfig<'_>) -> Result<DisruptionStudy> {
    if !data.has_masks() {
        return Err(Error::Config("the disruption study needs masks for every image".into()));
    }
    if let Some(ft) = &cfg.fine_tune {
        if !ft.train_set.has_masks() {
            return Err(Error::Config("the fine-tuning set needs masks for every image".into()));
        }
    }
    // Validates level ordering and count up front.
    DisruptionSeries::new(cfg.levels.clone(), vec![0.0; cfg.levels.len()])?;
    let k = model.num_classes();
    let mut f1 = vec![Vec::with_capacity(cfg.levels.len()); k];
    let mut macro_f1 = Vec::with_capacity(cfg.levels.len());
    for &level in &cfg.levels {
        let eval_set = disrupt_dataset(data, cfg.target, level)?;
        let report = match &cfg.fine_tune {
            None => evaluate_model(model, &eval_set, cfg.threshold, cfg.use_hashtags)?,
            Some(ft) => {
                let tuned_on = disrupt_dataset(ft.train_set, cfg.target, level)?;
                let out = training::train(model.clone(), &tuned_on, None, &ft.train, &ft.loss, &ft.sets, &ft.options)?;
                evaluate_model(&out.best, &eval_set, cfg.threshold, cfg.use_hashtags)?
            }
        };
        for (c, v) in report.per_class.iter().enumerate() {
            f1[c].push(*v);
        }
        macro_f1.push(report.macro_f1);
    }
    Ok(DisruptionStudy {
        version: STUDY_VERSION,
        target: cfg.target,
        levels: cfg.levels.clone(),
        f1,
        macro_f1,
    })
}

pub const SCORES_VERSION: u32 = 1;

/// Per-class scores feeding the information gain: a random-guess baseline
/// and the model, both F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScore {
    pub class_id: usize,
    pub random: f64,
    pub model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScores {
    pub version: u32,
    pub classes: Vec<ClassScore>,
}

impl ClassScores {
    /// Baseline is the F1 of guessing positive with probability 1/2 given
    /// each class's prevalence in `labels`. Classes without positives have
    /// no defined baseline and are left out.
    pub fn from_report(report: &F1Report, labels: ArrayView2<bool>) -> Result<Self> {
        if labels.ncols() != report.per_class.len() {
            return Err(Error::Input("report and label widths differ".into()));
        }
        let n = labels.nrows().max(1) as f64;
        let classes = report
            .per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| labels.column(*c).iter().any(|&b| b))
            .map(|(c, &f)| {
                let prevalence = labels.column(c).iter().filter(|&&b| b).count() as f64 / n;
                Ok(ClassScore {
                    class_id: c,
                    random: crate::taxonomy::random_guess_f1(prevalence)?,
                    model: f * 100.0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ClassScores {
            version: SCORES_VERSION,
            classes,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: ClassScores = serde_json::from_str(s).map_err(|e| Error::parse("class scores", e))?;
        if v.version != SCORES_VERSION {
            return Err(Error::Input(format!("unsupported class score version {}", v.version)));
        }
        Ok(v)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialize") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepConfig {
    pub ks: Vec<usize>,
    pub metric: Metric,
    pub pooling: Pooling,
    /// Full-batch gradient steps for the per-k logistic classifier.
    pub epochs: usize,
    pub lr: f64,
    pub threshold: f64,
}

impl Default for KSweepConfig {
    fn default() -> Self {
        KSweepConfig {
            ks: crate::hashtags::SWEEP_KS.to_vec(),
            metric: Metric::Euclidean,
            pooling: Pooling::Occurrence,
            epochs: 300,
            lr: 0.5,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSweepPoint {
    pub k: usize,
    pub macro_f1: f64,
}

/// Hashtag features of every query image, transferred from its `k` nearest
/// database posts.
pub fn transfer_features(corpus: &NeighborCorpus, cfg: &HashtagConfig) -> Result<Array2<f64>> {
    let dim = corpus.posts.first().map_or(0, |p| p.1.len());
    let index = KnnIndex::from_entries(dim, corpus.posts.iter().map(|(id, f, _)| (*id, f.clone())))?;
    let tags = corpus.tags_by_id();
    let mut encoder = HashtagEncoder::new(&corpus.dictionary, &corpus.embeddings);
    let edim = encoder.dim();
    let mut out = Array2::zeros((corpus.queries.len(), edim));
    for (i, (q, _)) in corpus.queries.iter().enumerate() {
        let f = build_hashtag_feature(q, &index, &tags, &mut encoder, cfg)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&f.vector));
    }
    Ok(out)
}

/// Multi-label logistic regression trained by full-batch gradient descent
/// on mean binary cross-entropy. Returns `(weights, biases)`.
pub fn fit_logistic(x: ArrayView2<f64>, y: ArrayView2<bool>, epochs: usize, lr: f64) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let k = y.ncols();
    let mut w = Array2::<f64>::zeros((k, d));
    let mut b = vec![0.0; k];
    for _ in 0..epochs {
        let z = x.dot(&w.t());
        let mut gw = Array2::<f64>::zeros((k, d));
        let mut gb = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                let g = sigmoid(z[[i, c]] + b[c]) - if y[[i, c]] { 1.0 } else { 0.0 };
                gb[c] += g;
                gw.row_mut(c).scaled_add(g, &x.row(i));
            }
        }
        w.scaled_add(-lr / n as f64, &gw);
        for c in 0..k {
            b[c] -= lr * gb[c] / n as f64;
        }
    }
    (w, b)
}

pub fn logistic_scores(x: ArrayView2<f64>, w: &Array2<f64>, b: &[f64]) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    for mut row in z.rows_mut() {
        for (v, bc) in row.iter_mut().zip(b) {
            *v = sigmoid(*v + bc);
        }
    }
    z
}

/// Z-scores every column with statistics from the `fit_rows` only, so the
/// probe sees the same scale whatever the number of pooled neighbours.
/// Constant columns are centred but not scaled.
pub fn standardize_columns(x: &mut Array2<f64>, fit_rows: &[usize]) {
    if fit_rows.is_empty() {
        return;
    }
    let n = fit_rows.len() as f64;
    for mut col in x.columns_mut() {
        let mean = fit_rows.iter().map(|&i| col[i]).sum::<f64>() / n;
        let var = fit_rows.iter().map(|&i| (col[i] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / sd);
    }
}

/// Macro F1 of a hashtag-only classifier as a function of `k`. Even query
/// indices train the classifier, odd ones test it; features are z-scored
/// with training-split statistics.
pub fn knn_sweep(corpus: &NeighborCorpus, cfg: &KSweepConfig) -> Result<Vec<KSweepPoint>> {
    if cfg.ks.is_empty() {
        return Err(Error::Config("k sweep needs at least one k".into()));
    }
    let labels = corpus.query_labels();
    let train_idx: Vec<usize> = (0..corpus.queries.len()).step_by(2).collect();
    let test_idx: Vec<usize> = (1..corpus.queries.len()).step_by(2).collect();
    if test_idx.is_empty() {
        return Err(Error::Input("k sweep needs at least two queries".into()));
    }
    cfg.ks
        .par_iter()
        .map(|&k| {
            let hc = HashtagConfig {
                k,
                metric: cfg.metric,
                pooling: cfg.pooling,
                use_in_training: true,
            };
            let mut x = transfer_features(corpus, &hc)?;
            standardize_columns(&mut x, &train_idx);
            let xt = x.select(ndarray::Axis(0), &train_idx);
            let yt = labels.select(ndarray::Axis(0), &train_idx);
            let (w, b) = fit_logistic(xt.view(), yt.view(), cfg.epochs, cfg.lr);
            let xe = x.select(ndarray::Axis(0), &test_idx);
            let ye = labels.select(ndarray::Axis(0), &test_idx);
            let scores = logistic_scores(xe.view(), &w, &b);
            Ok(KSweepPoint {
                k,
                macro_f1: macro_f1(scores.view(), ye.view(), cfg.threshold)?.macro_f1,
            })
        })
        .collect()
}

/// True when the curve rises to its maximum and then stays flat or falls,
/// allowing wiggles of `tol`, and the maximum beats the first point by
/// more than `tol`.
pub fn is_rise_then_flat_or_peak(values: &[f64], tol: f64) -> bool {
    let Some(peak) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
    else {
        return false;
    };
    if peak == 0 || values[peak] <= values[0] + tol {
        return false;
    }
    let rising = values[..=peak].windows(2).all(|w| w[1] >= w[0] - tol);
    let settling = values[peak..].windows(2).all(|w| w[1] <= w[0] + tol);
    rising && settling
}
