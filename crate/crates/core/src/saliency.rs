//! Class activation maps and the class-conditional localization loss.
//!
//! A CAM is the classifier-weighted sum of backbone feature channels,
//! clamped at zero and divided by its maximum. Classes judged
//! object-dependent are penalized for activation mass on the context mask,
//! context-dependent classes for mass on the object mask.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{write_string, Error, Result};
use crate::masks::{resize_mask, Mask, MaskPair, SegmentRegion};

#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub values: Array2<f64>,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCam {
    pub values: Mask,
    pub tau_cam: f64,
}

/// `sum_c weights[c] * features[c]`.
pub fn raw_class_map(features: ArrayView3<f64>, weights: &[f64]) -> Result<Array2<f64>> {
    let (c, h, w) = features.dim();
    if weights.len() != c {
        return Err(Error::Input(format!(
            "{} class weights for {c} feature channels",
            weights.len()
        )));
    }
    let mut out = Array2::zeros((h, w));
    for (ch, &wt) in weights.iter().enumerate() {
        if wt != 0.0 {
            out.scaled_add(wt, &features.index_axis(ndarray::Axis(0), ch));
        }
    }
    Ok(out)
}

/// Clamp at zero and divide by the maximum; all-zero when nothing is positive.
pub fn normalize_cam(raw: ArrayView2<f64>) -> Array2<f64> {
    let max = raw.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        raw.mapv(|v| v.max(0.0) / max)
    } else {
        Array2::zeros(raw.dim())
    }
}

/// Gradient of a scalar w.r.t. the raw map, given its gradient w.r.t. the
/// normalized map. The maximum is attributed to its first occurrence.
pub fn normalize_cam_backward(raw: ArrayView2<f64>, grad_cam: ArrayView2<f64>) -> Array2<f64> {
    let mut argmax = None;
    let mut max = 0.0f64;
    for (i, &v) in raw.iter().enumerate() {
        if v > max {
            max = v;
            argmax = Some(i);
        }
    }
    let mut grad = Array2::zeros(raw.dim());
    let Some(k) = argmax else {
        return grad;
    };
    let mut weighted = 0.0;
    Zip::from(&mut grad)
        .and(raw)
        .and(grad_cam)
        .for_each(|g, &r, &gc| {
            if r > 0.0 {
                *g = gc / max;
                weighted += gc * r;
            }
        });
    let flat = grad.as_slice_mut().expect("standard layout");
    flat[k] -= weighted / (max * max);
    grad
}

pub fn compute_cam(features: ArrayView3<f64>, class_weights: &[f64], class_id: usize) -> Result<Cam> {
    let raw = raw_class_map(features, class_weights)?;
    Ok(Cam {
        values: normalize_cam(raw.view()),
        class_id,
    })
}

/// Backpropagates `grad_cam` through [`compute_cam`], returning the
/// gradients w.r.t. the feature map and the class weights.
pub fn compute_cam_backward(
    features: ArrayView3<f64>,
    class_weights: &[f64],
    grad_cam: ArrayView2<f64>,
) -> Result<(Array3<f64>, Vec<f64>)> {
    let raw = raw_class_map(features, class_weights)?;
    let grad_raw = normalize_cam_backward(raw.view(), grad_cam);
    let (c, h, w) = features.dim();
    let mut grad_features = Array3::zeros((c, h, w));
    let mut grad_weights = vec![0.0; c];
    for ch in 0..c {
        let f = features.index_axis(ndarray::Axis(0), ch);
        grad_weights[ch] = Zip::from(&f).and(&grad_raw).fold(0.0, |acc, &a, &b| acc + a * b);
        grad_features
            .index_axis_mut(ndarray::Axis(0), ch)
            .scaled_add(class_weights[ch], &grad_raw);
    }
    Ok((grad_features, grad_weights))
}

pub const DEFAULT_TAU_CAM: f64 = 0.4;

pub fn binarize_cam(cam: &Cam, tau_cam: f64) -> Result<BinaryCam> {
    if !(tau_cam > 0.0 && tau_cam < 1.0) {
        return Err(Error::Config(format!("tau_cam {tau_cam} outside (0, 1)")));
    }
    Ok(BinaryCam {
        values: cam.values.mapv(|v| v >= tau_cam),
        tau_cam,
    })
}

/// Which side is resampled when mask and CAM resolutions differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Nearest-neighbour downsampling of the masks to CAM resolution.
    #[default]
    MasksToCam,
    /// Nearest-neighbour upsampling of each CAM to mask resolution.
    CamToMasks,
}

/// Per-pixel weights at CAM resolution such that the loss contribution of
/// a class is `sum(cam * weights)`.
pub fn forbidden_weights(mask: &Mask, cam_dims: (usize, usize), resample: Resample) -> Array2<f64> {
    let (ch, cw) = cam_dims;
    match resample {
        Resample::MasksToCam => resize_mask(mask, ch, cw).mapv(|v| if v { 1.0 } else { 0.0 }),
        Resample::CamToMasks => {
            let (mh, mw) = mask.dim();
            let mut w = Array2::zeros(cam_dims);
            let rows: Vec<usize> = (0..mh).map(|i| ((i as f64 + 0.5) * ch as f64 / mh as f64) as usize).collect();
            let cols: Vec<usize> = (0..mw).map(|j| ((j as f64 + 0.5) * cw as f64 / mw as f64) as usize).collect();
            for ((i, j), &v) in mask.indexed_iter() {
                if v {
                    w[[rows[i].min(ch - 1), cols[j].min(cw - 1)]] += 1.0;
                }
            }
            w
        }
    }
}

/// Object- and context-dependent class sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentSets {
    pub object: BTreeSet<usize>,
    pub context: BTreeSet<usize>,
}

impl ContentSets {
    pub fn new(object: impl IntoIterator<Item = usize>, context: impl IntoIterator<Item = usize>) -> Result<Self> {
        let s = ContentSets {
            object: object.into_iter().collect(),
            context: context.into_iter().collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.object.intersection(&self.context).next() {
            return Err(Error::Config(format!(
                "class {c} is both object- and context-dependent"
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.object.is_empty() && self.context.is_empty()
    }

    /// In-scope classes paired with whether they are object-dependent.
    pub fn iter(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.object
            .iter()
            .map(|&c| (c, true))
            .chain(self.context.iter().map(|&c| (c, false)))
    }
}

/// Loss value and its gradient w.r.t. each in-scope CAM.
#[derive(Debug, Clone)]
pub struct LocalizationTerms {
    pub loss: f64,
    pub grad: BTreeMap<usize, Array2<f64>>,
}

pub fn localization_loss(cams: &BTreeMap<usize, Cam>, masks: &MaskPair, sets: &ContentSets) -> Result<f64> {
    Ok(localization_terms(cams, masks, sets, Resample::MasksToCam)?.loss)
}

pub fn localization_terms(
    cams: &BTreeMap<usize, Cam>,
    masks: &MaskPair,
    sets: &ContentSets,
    resample: Resample,
) -> Result<LocalizationTerms> {
    sets.validate()?;
    let mut loss = 0.0;
    let mut grad = BTreeMap::new();
    let mut cache: Option<((usize, usize), Array2<f64>, Array2<f64>)> = None;
    for (class, is_object) in sets.iter() {
        let cam = cams
            .get(&class)
            .ok_or_else(|| Error::Input(format!("no CAM supplied for class {class}")))?;
        let dims = cam.values.dim();
        if cache.as_ref().map(|c| c.0) != Some(dims) {
            cache = Some((
                dims,
                forbidden_weights(&masks.mask_c, dims, resample),
                forbidden_weights(&masks.mask_o, dims, resample),
            ));
        }
        let (_, on_context, on_object) = cache.as_ref().expect("cache filled");
        let weights = if is_object { on_context } else { on_object };
        loss += Zip::from(&cam.values).and(weights).fold(0.0, |acc, &c, &w| acc + c * w);
        grad.insert(class, weights.clone());
    }
    Ok(LocalizationTerms { loss, grad })
}

/// Fraction of the binarized CAM covered by each region category.
pub fn cam_content_association(cam: &BinaryCam, regions: &[SegmentRegion]) -> BTreeMap<u32, f64> {
    let (h, w) = cam.values.dim();
    let support = cam.values.iter().filter(|&&v| v).count();
    let mut per_category: BTreeMap<u32, Mask> = BTreeMap::new();
    for r in regions {
        let raster = resize_mask(&r.raster, h, w);
        per_category
            .entry(r.category_id)
            .and_modify(|m| Zip::from(m).and(&raster).for_each(|a, &b| *a |= b))
            .or_insert(raster);
    }
    per_category
        .into_iter()
        .map(|(cat, m)| {
            let frac = if support == 0 {
                0.0
            } else {
                let overlap = Zip::from(&cam.values)
                    .and(&m)
                    .fold(0usize, |acc, &a, &b| acc + (a && b) as usize);
                overlap as f64 / support as f64
            };
            (cat, frac)
        })
        .collect()
}

/// Association rows for one intent class, averaged over several models or images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationTable {
    pub version: u32,
    /// intent class id -> region category id -> mean overlap fraction
    pub classes: BTreeMap<usize, BTreeMap<u32, f64>>,
}

impl AssociationTable {
    /// Averages per-sample association maps class by class; categories
    /// absent from a sample count as zero overlap.
    pub fn average(samples: &[(usize, BTreeMap<u32, f64>)]) -> Self {
        let mut sums: BTreeMap<usize, (BTreeMap<u32, f64>, usize)> = BTreeMap::new();
        for (class, assoc) in samples {
            let entry = sums.entry(*class).or_default();
            entry.1 += 1;
            for (&cat, &v) in assoc {
                *entry.0.entry(cat).or_insert(0.0) += v;
            }
        }
        AssociationTable {
            version: 1,
            classes: sums
                .into_iter()
                .map(|(class, (cats, n))| {
                    (class, cats.into_iter().map(|(c, s)| (c, s / n as f64)).collect())
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("association table serializes") + "\n"
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::parse("association table", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }
}

/// Writes a CAM as an 8-bit grayscale raster (value * 255, rounded).
pub fn save_cam_png(cam: &Cam, path: &Path) -> Result<()> {
    let (h, w) = cam.values.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(cam.values[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::parse(path.display().to_string(), e))
}
