//! Object/context mask construction from precomputed segmentation dumps.

use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_string, Error, Result};

pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRegion {
    pub raster: Mask,
    pub category_id: u32,
    pub kind: RegionKind,
    pub score: f64,
}

impl SegmentRegion {
    pub fn new(raster: Mask, category_id: u32, kind: RegionKind, score: f64) -> Self {
        SegmentRegion {
            raster,
            category_id,
            kind,
            score,
        }
    }

    pub fn area(&self) -> usize {
        self.raster.iter().filter(|&&v| v).count()
    }

    pub fn area_fraction(&self) -> f64 {
        let total = self.raster.len();
        if total == 0 {
            0.0
        } else {
            self.area() as f64 / total as f64
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raster.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Panoptic,
    Complement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub mask_o: Mask,
    pub mask_c: Mask,
    pub mode: MaskMode,
}

impl MaskPair {
    pub fn dims(&self) -> (usize, usize) {
        self.mask_o.dim()
    }

    /// Both masks resampled with nearest neighbour.
    pub fn resized(&self, height: usize, width: usize) -> MaskPair {
        MaskPair {
            mask_o: resize_mask(&self.mask_o, height, width),
            mask_c: resize_mask(&self.mask_c, height, width),
            mode: self.mode,
        }
    }

    pub fn flipped_horizontally(&self) -> MaskPair {
        MaskPair {
            mask_o: flip_mask(&self.mask_o),
            mask_c: flip_mask(&self.mask_c),
            mode: self.mode,
        }
    }
}

/// Which regions the minimum-area filter applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaFilter {
    AllRegions,
    StuffOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub mode: MaskMode,
    pub tau_p: f64,
    pub min_area: f64,
    pub area_filter: AreaFilter,
    pub tau_det: f64,
    pub resize_longest: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mode: MaskMode::Panoptic,
            tau_p: 0.7,
            min_area: 0.10,
            area_filter: AreaFilter::AllRegions,
            tau_det: 0.6,
            resize_longest: 1280,
        }
    }
}

impl MaskConfig {
    /// In complement mode only thing regions are used, so one segmentation
    /// dump serves both modes.
    pub fn aggregate(&self, dims: (usize, usize), regions: &[SegmentRegion]) -> Result<MaskPair> {
        match self.mode {
            MaskMode::Panoptic => aggregate_masks_panoptic_with(
                dims,
                regions,
                self.tau_p,
                self.min_area,
                self.area_filter,
            ),
            MaskMode::Complement => {
                let things: Vec<SegmentRegion> = regions
                    .iter()
                    .filter(|r| r.kind == RegionKind::Thing)
                    .cloned()
                    .collect();
                aggregate_masks_complement(dims, &things, self.tau_det)
            }
        }
    }
}

fn check_shapes(dims: (usize, usize), regions: &[SegmentRegion]) -> Result<()> {
    for r in regions {
        if r.dims() != dims {
            return Err(Error::Input(format!(
                "region raster {:?} does not match image {:?}",
                r.dims(),
                dims
            )));
        }
    }
    Ok(())
}

fn union_into(acc: &mut Mask, raster: &Mask) {
    Zip::from(acc).and(raster).for_each(|a, &r| *a |= r);
}

/// Thing regions form the object mask, stuff regions the context mask.
/// Pixels claimed by both go to the object mask.
pub fn aggregate_masks_panoptic(
    dims: (usize, usize),
    regions: &[SegmentRegion],
    tau_p: f64,
    min_area: f64,
) -> Result<MaskPair> {
    aggregate_masks_panoptic_with(dims, regions, tau_p, min_area, AreaFilter::AllRegions)
}

pub fn aggregate_masks_panoptic_with(
    dims: (usize, usize),
    regions: &[SegmentRegion],
    tau_p: f64,
    min_area: f64,
    filter: AreaFilter,
) -> Result<MaskPair> {
    check_shapes(dims, regions)?;
    let mut mask_o = Mask::from_elem(dims, false);
    let mut mask_c = Mask::from_elem(dims, false);
    for r in panoptic_qualifying(regions, tau_p, min_area, filter) {
        match r.kind {
            RegionKind::Thing => union_into(&mut mask_o, &r.raster),
            RegionKind::Stuff => union_into(&mut mask_c, &r.raster),
        }
    }
    Zip::from(&mut mask_c).and(&mask_o).for_each(|c, &o| *c &= !o);
    Ok(MaskPair {
        mask_o,
        mask_c,
        mode: MaskMode::Panoptic,
    })
}

pub fn panoptic_qualifying(
    regions: &[SegmentRegion],
    tau_p: f64,
    min_area: f64,
    filter: AreaFilter,
) -> impl Iterator<Item = &SegmentRegion> {
    regions.iter().filter(move |r| {
        let area_checked = match filter {
            AreaFilter::AllRegions => true,
            AreaFilter::StuffOnly => r.kind == RegionKind::Stuff,
        };
        r.score >= tau_p && !(area_checked && r.area_fraction() < min_area)
    })
}

/// Object mask is the union of confident detections; context is everything else.
pub fn aggregate_masks_complement(
    dims: (usize, usize),
    regions: &[SegmentRegion],
    tau_det: f64,
) -> Result<MaskPair> {
    check_shapes(dims, regions)?;
    if let Some(r) = regions.iter().find(|r| r.kind == RegionKind::Stuff) {
        return Err(Error::Input(format!(
            "complement masks take thing regions only, got stuff category {}",
            r.category_id
        )));
    }
    let mut mask_o = Mask::from_elem(dims, false);
    for r in regions.iter().filter(|r| r.score >= tau_det) {
        union_into(&mut mask_o, &r.raster);
    }
    let mask_c = mask_o.mapv(|v| !v);
    Ok(MaskPair {
        mask_o,
        mask_c,
        mode: MaskMode::Complement,
    })
}

/// Output dimensions with the longer side scaled to `target`; the shorter
/// side is rounded half up.
pub fn longest_side_dims(dims: (usize, usize), target: usize) -> Result<(usize, usize)> {
    let (h, w) = dims;
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::Input(format!("cannot resize {h}x{w} to {target}")));
    }
    let long = h.max(w) as u128;
    let scale = |side: usize| -> usize {
        let num = side as u128 * target as u128;
        ((2 * num + long) / (2 * long)).max(1) as usize
    };
    Ok(if h >= w {
        (target, scale(w))
    } else {
        (scale(h), target)
    })
}

fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    let rows: Vec<usize> = (0..height).map(|i| nearest_index(i, height, h)).collect();
    let cols: Vec<usize> = (0..width).map(|j| nearest_index(j, width, w)).collect();
    Mask::from_shape_fn((height, width), |(i, j)| mask[[rows[i], cols[j]]])
}

/// Bilinear resampling of a `C x H x W` image (half-pixel centres).
pub fn resize_image(image: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    if (h, w) == (height, width) {
        return image.clone();
    }
    let coords = |dst: usize, dst_len: usize, src_len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let ys: Vec<_> = (0..height).map(|i| coords(i, height, h)).collect();
    let xs: Vec<_> = (0..width).map(|j| coords(j, width, w)).collect();
    Array3::from_shape_fn((c, height, width), |(ch, i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = image[[ch, y0, x0]] * (1.0 - fx) + image[[ch, y0, x1]] * fx;
        let bottom = image[[ch, y1, x0]] * (1.0 - fx) + image[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Types that can be brought to a fixed longest side.
pub trait ResizeLongest: Sized {
    fn spatial_dims(&self) -> (usize, usize);
    fn resample(&self, height: usize, width: usize) -> Self;

    fn resize_longest_side(&self, target: usize) -> Result<Self> {
        let (h, w) = longest_side_dims(self.spatial_dims(), target)?;
        Ok(self.resample(h, w))
    }
}

impl ResizeLongest for Mask {
    fn spatial_dims(&self) -> (usize, usize) {
        self.dim()
    }
    fn resample(&self, height: usize, width: usize) -> Self {
        resize_mask(self, height, width)
    }
}

impl ResizeLongest for Array3<f64> {
    fn spatial_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.dim();
        (h, w)
    }
    fn resample(&self, height: usize, width: usize) -> Self {
        resize_image(self, height, width)
    }
}

pub fn resize_longest_side<T: ResizeLongest>(input: &T, target: usize) -> Result<T> {
    input.resize_longest_side(target)
}

pub fn flip_mask(mask: &Mask) -> Mask {
    let (h, w) = mask.dim();
    Mask::from_shape_fn((h, w), |(i, j)| mask[[i, w - 1 - j]])
}

// ---------------------------------------------------------------------------
// On-disk segmentation dumps: `<stem>.png` raster + `<stem>.json` sidecar.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub category_id: u32,
    pub kind: RegionKind,
    pub score: f64,
}

impl RegionRecord {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let r: RegionRecord = serde_json::from_str(s).map_err(|e| Error::parse("region sidecar", e))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::Input(format!("region score {} outside [0, 1]", r.score)));
        }
        Ok(r)
    }
}

pub const OBJECT_MASK_FILE: &str = "mask_o.png";
pub const CONTEXT_MASK_FILE: &str = "mask_c.png";

/// Decodes an 8-bit single channel raster; values above 127 are set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::parse("mask png", e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] > 127
    }))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_png(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Reads every `<stem>.json` sidecar in `dir` (sorted by name) together
/// with its `<stem>.png` raster.
pub fn load_segmentation_dir(dir: &Path) -> Result<Vec<SegmentRegion>> {
    let mut sidecars: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    let mut regions = Vec::with_capacity(sidecars.len());
    for sidecar in sidecars {
        let rec = RegionRecord::from_json_str(&read_to_string(&sidecar)?)?;
        let raster = load_mask(&sidecar.with_extension("png"))?;
        regions.push(SegmentRegion::new(raster, rec.category_id, rec.kind, rec.score));
    }
    Ok(regions)
}

pub fn save_segmentation_dir(dir: &Path, regions: &[SegmentRegion]) -> Result<()> {
    for (i, r) in regions.iter().enumerate() {
        let stem = format!("region_{i:03}");
        save_mask(&r.raster, &dir.join(format!("{stem}.png")))?;
        let rec = RegionRecord {
            category_id: r.category_id,
            kind: r.kind,
            score: r.score,
        };
        write_string(
            &dir.join(format!("{stem}.json")),
            &(serde_json::to_string(&rec).expect("sidecar serializes") + "\n"),
        )?;
    }
    Ok(())
}

pub fn save_mask_pair(pair: &MaskPair, dir: &Path) -> Result<()> {
    save_mask(&pair.mask_o, &dir.join(OBJECT_MASK_FILE))?;
    save_mask(&pair.mask_c, &dir.join(CONTEXT_MASK_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(dims: (usize, usize), r0: usize, r1: usize, c0: usize, c1: usize) -> Mask {
        Mask::from_shape_fn(dims, |(i, j)| i >= r0 && i < r1 && j >= c0 && j < c1)
    }

    #[test]
    fn panoptic_empty() {
        let p = aggregate_masks_panoptic((4, 5), &[], 0.7, 0.1).unwrap();
        assert!(p.mask_o.iter().all(|v| !v));
        assert!(p.mask_c.iter().all(|v| !v));
        assert_eq!(p.mode, MaskMode::Panoptic);
    }

    #[test]
    fn panoptic_score_threshold() {
        let r = SegmentRegion::new(rect((10, 10), 0, 5, 0, 10), 1, RegionKind::Thing, 0.69);
        let p = aggregate_masks_panoptic((10, 10), std::slice::from_ref(&r), 0.7, 0.1).unwrap();
        assert!(p.mask_o.iter().all(|v| !v));
        let r = SegmentRegion { score: 0.7, ..r };
        let p = aggregate_masks_panoptic((10, 10), &[r], 0.7, 0.1).unwrap();
        assert_eq!(p.mask_o.iter().filter(|&&v| v).count(), 50);
    }

    #[test]
    fn panoptic_area_filter() {
        let r = SegmentRegion::new(rect((10, 10), 0, 3, 0, 3), 1, RegionKind::Thing, 0.9);
        assert!((r.area_fraction() - 0.09).abs() < 1e-12);
        let p = aggregate_masks_panoptic((10, 10), std::slice::from_ref(&r), 0.7, 0.1).unwrap();
        assert!(p.mask_o.iter().all(|v| !v));
        let p = aggregate_masks_panoptic_with((10, 10), &[r], 0.7, 0.1, AreaFilter::StuffOnly).unwrap();
        assert_eq!(p.mask_o.iter().filter(|&&v| v).count(), 9);
    }

    #[test]
    fn panoptic_overlap_goes_to_things() {
        let t = SegmentRegion::new(rect((4, 4), 0, 2, 0, 4), 1, RegionKind::Thing, 0.9);
        let s = SegmentRegion::new(rect((4, 4), 1, 4, 0, 4), 90, RegionKind::Stuff, 0.9);
        let p = aggregate_masks_panoptic((4, 4), &[t, s], 0.7, 0.1).unwrap();
        assert_eq!(p.mask_o, rect((4, 4), 0, 2, 0, 4));
        assert_eq!(p.mask_c, rect((4, 4), 2, 4, 0, 4));
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let r = SegmentRegion::new(rect((3, 3), 0, 3, 0, 3), 1, RegionKind::Thing, 0.9);
        assert!(matches!(
            aggregate_masks_panoptic((4, 4), std::slice::from_ref(&r), 0.7, 0.1),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            aggregate_masks_complement((4, 4), &[r], 0.6),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn complement_examples() {
        let p = aggregate_masks_complement((4, 4), &[], 0.6).unwrap();
        assert!(p.mask_o.iter().all(|v| !v));
        assert!(p.mask_c.iter().all(|&v| v));

        let a = SegmentRegion::new(rect((8, 8), 0, 4, 0, 4), 1, RegionKind::Thing, 0.8);
        let b = SegmentRegion::new(rect((8, 8), 2, 6, 2, 6), 2, RegionKind::Thing, 0.7);
        let p = aggregate_masks_complement((8, 8), &[a.clone(), b.clone()], 0.6).unwrap();
        let expected = Mask::from_shape_fn((8, 8), |ix| a.raster[ix] || b.raster[ix]);
        assert_eq!(p.mask_o, expected);

        let weak = SegmentRegion { score: 0.59, ..a };
        let p = aggregate_masks_complement((8, 8), &[weak], 0.6).unwrap();
        assert!(p.mask_c.iter().all(|&v| v));

        let stuff = SegmentRegion::new(rect((8, 8), 0, 1, 0, 1), 3, RegionKind::Stuff, 0.9);
        assert!(matches!(
            aggregate_masks_complement((8, 8), &[stuff], 0.6),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn longest_side_examples() {
        assert_eq!(longest_side_dims((2560, 1280), 1280).unwrap(), (1280, 640));
        assert_eq!(longest_side_dims((1280, 720), 1280).unwrap(), (1280, 720));
        assert_eq!(longest_side_dims((100, 300), 1280).unwrap(), (427, 1280));
        assert!(longest_side_dims((0, 3), 1280).is_err());
    }

    #[test]
    fn longest_side_matches_exact_ratio_oracle() {
        for h in 1..60usize {
            for w in 1..60usize {
                let (oh, ow) = longest_side_dims((h, w), 97).unwrap();
                let (long, short, out_short) = if h >= w { (h, w, ow) } else { (w, h, oh) };
                let exact = short as f64 * 97.0 / long as f64;
                let expected = ((exact + 0.5).floor() as usize).max(1);
                assert_eq!(out_short, expected, "{h}x{w}");
                assert_eq!(oh.max(ow), 97);
            }
        }
    }

    #[test]
    fn resize_mask_and_image() {
        let m = rect((4, 8), 0, 2, 0, 8);
        let r = resize_longest_side(&m, 16).unwrap();
        assert_eq!(r.dim(), (8, 16));
        assert_eq!(r, rect((8, 16), 0, 4, 0, 16));
        let img = Array3::from_elem((3, 5, 10), 0.25);
        let r = resize_longest_side(&img, 20).unwrap();
        assert_eq!(r.dim(), (3, 10, 20));
        assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn sidecar_parsing() {
        let r = RegionRecord::from_json_str(r#"{"category_id":3,"kind":"stuff","score":0.8}"#).unwrap();
        assert_eq!(r.kind, RegionKind::Stuff);
        assert!(RegionRecord::from_json_str(r#"{"category_id":3,"kind":"stuff","score":1.8}"#).is_err());
        assert!(RegionRecord::from_json_str(r#"{"category_id":3,"kind":"blob","score":0.1}"#).is_err());
    }

    #[test]
    fn segmentation_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let regions = vec![
            SegmentRegion::new(rect((6, 7), 0, 3, 0, 7), 5, RegionKind::Thing, 0.75),
            SegmentRegion::new(rect((6, 7), 3, 6, 0, 7), 120, RegionKind::Stuff, 0.5),
        ];
        save_segmentation_dir(dir.path(), &regions).unwrap();
        let back = load_segmentation_dir(dir.path()).unwrap();
        assert_eq!(back, regions);
        let pair = aggregate_masks_panoptic((6, 7), &back, 0.5, 0.1).unwrap();
        save_mask_pair(&pair, dir.path()).unwrap();
        assert_eq!(load_mask(&dir.path().join(OBJECT_MASK_FILE)).unwrap(), pair.mask_o);
    }

    fn region_strategy() -> impl Strategy<Value = SegmentRegion> {
        (
            proptest::collection::vec(any::<bool>(), 36),
            any::<bool>(),
            0.0f64..1.0,
        )
            .prop_map(|(bits, thing, score)| {
                SegmentRegion::new(
                    Mask::from_shape_vec((6, 6), bits).unwrap(),
                    1,
                    if thing { RegionKind::Thing } else { RegionKind::Stuff },
                    score,
                )
            })
    }

    proptest! {
        #[test]
        fn panoptic_disjoint_and_monotone(
            regions in proptest::collection::vec(region_strategy(), 0..6),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = aggregate_masks_panoptic((6, 6), &regions, lo, 0.1).unwrap();
            let b = aggregate_masks_panoptic((6, 6), &regions, hi, 0.1).unwrap();
            for p in [&a, &b] {
                prop_assert!(p.mask_o.iter().zip(p.mask_c.iter()).all(|(o, c)| !(*o && *c)));
            }
            prop_assert!(a.mask_o.iter().zip(b.mask_o.iter()).all(|(x, y)| *x || !*y));
            // Context loses pixels only to newly qualifying things.
            let union_a = a.mask_o.iter().zip(a.mask_c.iter()).map(|(o, c)| *o || *c);
            let union_b = b.mask_o.iter().zip(b.mask_c.iter()).map(|(o, c)| *o || *c);
            prop_assert!(union_a.zip(union_b).all(|(x, y)| x || !y));
        }

        #[test]
        fn complement_partitions_pixels(regions in proptest::collection::vec(region_strategy(), 0..6)) {
            let things: Vec<_> = regions.into_iter().map(|r| SegmentRegion { kind: RegionKind::Thing, ..r }).collect();
            let p = aggregate_masks_complement((6, 6), &things, 0.6).unwrap();
            prop_assert!(p.mask_o.iter().zip(p.mask_c.iter()).all(|(o, c)| *o != *c));
        }

        #[test]
        fn aggregation_is_idempotent(regions in proptest::collection::vec(region_strategy(), 0..6)) {
            let p = aggregate_masks_panoptic((6, 6), &regions, 0.5, 0.0).unwrap();
            let again = aggregate_masks_panoptic((6, 6), &[
                SegmentRegion::new(p.mask_o.clone(), 0, RegionKind::Thing, 1.0),
                SegmentRegion::new(p.mask_c.clone(), 0, RegionKind::Stuff, 1.0),
            ], 0.5, 0.0).unwrap();
            prop_assert_eq!(again, p);
        }
    }
}
