//! Dataset manifests and in-memory samples.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_string, Error, Result};
use crate::hashtags::HashtagFeature;
use crate::masks::{
    self, load_mask, load_segmentation_dir, MaskConfig, MaskPair, ResizeLongest, SegmentRegion,
    CONTEXT_MASK_FILE, OBJECT_MASK_FILE,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    /// One `0`/`1` character per class, class 0 first.
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hashtag_feature: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

pub fn parse_label_bits(bits: &str) -> Result<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Input(format!("label mask contains {other:?}"))),
        })
        .collect()
}

pub fn format_label_bits(labels: &[bool]) -> String {
    labels.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl Manifest {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(s).map_err(|e| Error::parse("manifest", e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Input(format!("unsupported manifest version {}", m.version)));
        }
        let width = m.entries.first().map(|e| e.labels.len());
        for e in &m.entries {
            parse_label_bits(&e.labels)?;
            if Some(e.labels.len()) != width {
                return Err(Error::Input(format!("entry {} has a label mask of different width", e.id)));
            }
        }
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `C x H x W`, values in [0, 1].
    pub image: Array3<f64>,
    pub labels: Vec<bool>,
    pub regions: Option<Vec<SegmentRegion>>,
    pub masks: Option<MaskPair>,
    pub hashtag: Option<HashtagFeature>,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.samples.first().map(|s| s.labels.len())
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|s| s.masks.is_some())
    }

    pub fn label_matrix(&self) -> ndarray::Array2<bool> {
        let k = self.num_classes().unwrap_or(0);
        ndarray::Array2::from_shape_fn((self.len(), k), |(i, j)| self.samples[i].labels[j])
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Array3<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::parse("image", e))?
        .to_rgb8();
    Ok(rgb_to_array(&img))
}

fn rgb_to_array(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
    })
}

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

/// Writes a 3-channel image as 8-bit RGB.
pub fn save_image(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {c}")));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (image[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every entry of a manifest. Segmentation dumps are aggregated
/// with `mask_cfg`; a directory without region sidecars may instead hold
/// ready-made `mask_o.png` / `mask_c.png` rasters.
pub fn load_dataset(manifest_path: &Path, mask_cfg: &MaskConfig) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let mut image = load_image(&resolve(base, &e.image))?;
        let labels = parse_label_bits(&e.labels)?;
        let (mut regions, mut masks) = (None, None);
        if let Some(dir) = &e.mask_dir {
            let dir = resolve(base, dir);
            let loaded = load_segmentation_dir(&dir)?;
            if loaded.is_empty() && dir.join(OBJECT_MASK_FILE).exists() {
                masks = Some(MaskPair {
                    mask_o: load_mask(&dir.join(OBJECT_MASK_FILE))?,
                    mask_c: load_mask(&dir.join(CONTEXT_MASK_FILE))?,
                    mode: mask_cfg.mode,
                });
            } else {
                regions = Some(loaded);
            }
        }
        if mask_cfg.resize_longest > 0 {
            let (_, h, w) = image.dim();
            if h.max(w) != mask_cfg.resize_longest {
                image = image.resize_longest_side(mask_cfg.resize_longest)?;
                let (_, nh, nw) = image.dim();
                if let Some(rs) = &mut regions {
                    for r in rs.iter_mut() {
                        r.raster = masks::resize_mask(&r.raster, nh, nw);
                    }
                }
                if let Some(m) = &mut masks {
                    *m = m.resized(nh, nw);
                }
            }
        }
        let (_, h, w) = image.dim();
        if let Some(rs) = &regions {
            masks = Some(mask_cfg.aggregate((h, w), rs)?);
        }
        if let Some(m) = &masks {
            if m.dims() != (h, w) {
                return Err(Error::Input(format!("masks of {} do not match its image", e.id)));
            }
        }
        let hashtag = e
            .hashtag_feature
            .as_ref()
            .map(|p| HashtagFeature::load(&resolve(base, p)))
            .transpose()?;
        samples.push(Sample {
            id: e.id.clone(),
            image,
            labels,
            regions,
            masks,
            hashtag,
        });
    }
    Ok(Dataset { samples })
}

/// Writes images, segmentation dumps and hashtag features under `dir` and
/// returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let image = PathBuf::from(format!("images/{}.png", s.id));
        save_image(&s.image, &dir.join(&image))?;
        let mask_dir = match (&s.regions, &s.masks) {
            (Some(rs), _) => {
                let d = PathBuf::from(format!("masks/{}", s.id));
                masks::save_segmentation_dir(&dir.join(&d), rs)?;
                Some(d)
            }
            (None, Some(m)) => {
                let d = PathBuf::from(format!("masks/{}", s.id));
                masks::save_mask_pair(m, &dir.join(&d))?;
                Some(d)
            }
            (None, None) => None,
        };
        let hashtag_feature = match &s.hashtag {
            Some(f) => {
                let p = PathBuf::from(format!("hashtags/{}.json", s.id));
                f.save(&dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            labels: format_label_bits(&s.labels),
            mask_dir,
            hashtag_feature,
        });
    }
    let path = dir.join("manifest.json");
    Manifest {
        version: MANIFEST_VERSION,
        entries,
    }
    .save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_bits() {
        assert_eq!(parse_label_bits("0110").unwrap(), vec![false, true, true, false]);
        assert!(parse_label_bits("01x").is_err());
        assert_eq!(format_label_bits(&[true, false]), "10");
    }

    #[test]
    fn manifest_validation() {
        let ok = r#"{"version":1,"entries":[{"id":"a","image":"a.png","labels":"01"}]}"#;
        assert_eq!(Manifest::from_json_str(ok).unwrap().entries.len(), 1);
        let ragged = r#"{"version":1,"entries":[{"id":"a","image":"a.png","labels":"01"},{"id":"b","image":"b.png","labels":"1"}]}"#;
        assert!(Manifest::from_json_str(ragged).is_err());
        let unknown = r#"{"version":1,"entries":[],"extra":true}"#;
        assert!(Manifest::from_json_str(unknown).is_err());
        let m = Manifest::from_json_str(ok).unwrap();
        assert_eq!(Manifest::from_json_str(&m.to_json_string()).unwrap(), m);
    }
}
