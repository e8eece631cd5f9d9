//! Down-sampling in space and time, normalization, imputation, augmentation
//! and segmentation-channel stacking.

mod augment;
mod resample;
mod stats;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{concatenate, s, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_chapter, write_chapter, write_manifest, Chapter, DatasetManifest, LabelMask, RgbImage,
    SemanticRecord, Split,
};
use crate::error::{Error, Result};

pub use augment::{augment, augment_sequence, flip_mask, flip_rgb, AugmentConfig, AugmentDraw};
pub use resample::{resize_area, resize_nearest};
pub use stats::{denormalize, fit_norm_stats, normalize, NormStats, STD_FLOOR};

/// Frames per stacked sequence input.
pub const SEQUENCE_FRAMES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionTier {
    Full,
    S1,
    S2,
    S3,
}

impl ResolutionTier {
    pub const ALL: [ResolutionTier; 4] = [Self::Full, Self::S1, Self::S2, Self::S3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::S1 => "s1",
            Self::S2 => "s2",
            Self::S3 => "s3",
        }
    }

    /// (width, height)
    pub fn dims(self) -> (usize, usize) {
        match self {
            Self::Full => (1920, 1080),
            Self::S1 => (640, 360),
            Self::S2 => (320, 180),
            Self::S3 => (160, 90),
        }
    }
}

impl fmt::Display for ResolutionTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResolutionTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!("unknown resolution tier {s:?} (full, s1, s2, s3)"))
            })
    }
}

fn check_16_9(h: usize, w: usize) -> Result<()> {
    if w == 0 || h == 0 || w * 9 != h * 16 {
        return Err(Error::invalid(format!("image {w}x{h} is not 16:9")));
    }
    Ok(())
}

/// Area-averaged resize of an H×W×C image in [0, 1] to the tier size.
pub fn downsample_spatial(image: ArrayView3<f64>, tier: ResolutionTier) -> Result<Array3<f64>> {
    let (h, w, _) = image.dim();
    check_16_9(h, w)?;
    let (tw, th) = tier.dims();
    Ok(resize_area(image, th, tw))
}

pub fn to_unit(image: &RgbImage) -> Array3<f64> {
    image.mapv(|v| v as f64 / 255.0)
}

pub fn to_u8(image: ArrayView3<f64>) -> RgbImage {
    image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Resizes an 8-bit image; identity when already at tier size.
pub fn downsample_rgb(image: &RgbImage, tier: ResolutionTier) -> Result<RgbImage> {
    let (h, w, _) = image.dim();
    check_16_9(h, w)?;
    if (w, h) == tier.dims() {
        return Ok(image.clone());
    }
    Ok(to_u8(
        downsample_spatial(to_unit(image).view(), tier)?.view(),
    ))
}

pub fn downsample_mask(mask: ArrayView2<u8>, tier: ResolutionTier) -> Result<LabelMask> {
    let (h, w) = mask.dim();
    check_16_9(h, w)?;
    let (tw, th) = tier.dims();
    Ok(resize_nearest(mask, th, tw))
}

/// Keeps every `stride`-th frame by position. On a raw chapter this keeps
/// frame indices that are multiples of `stride`; repeated application
/// composes multiplicatively.
pub fn downsample_temporal(chapter: &Chapter, stride: u32) -> Result<Chapter> {
    if stride == 0 {
        return Err(Error::invalid("temporal stride must be at least 1"));
    }
    Ok(Chapter {
        chapter_id: chapter.chapter_id.clone(),
        route_id: chapter.route_id.clone(),
        split: chapter.split,
        frame_stride: chapter.frame_stride * stride,
        frames: chapter
            .frames
            .iter()
            .step_by(stride as usize)
            .cloned()
            .collect(),
    })
}

/// Sets every missing field to zero, keeping the flags.
pub fn impute(record: &SemanticRecord) -> SemanticRecord {
    let mut out = record.clone();
    for (v, m) in out.values.iter_mut().zip(&out.missing) {
        if *m {
            *v = 0.0;
        }
    }
    out
}

/// H×W×3 image plus one-hot planes of the mask → H×W×(3 + n_classes).
pub fn stack_mask(
    image: ArrayView3<f64>,
    mask: ArrayView2<u8>,
    n_classes: usize,
) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if c != 3 || mask.dim() != (h, w) {
        return Err(Error::shape(
            "stack_mask",
            (h, w, 3),
            (image.dim(), mask.dim()),
        ));
    }
    let mut out = Array3::<f64>::zeros((h, w, 3 + n_classes));
    out.slice_mut(s![.., .., 0..3]).assign(&image);
    for ((y, x), &k) in mask.indexed_iter() {
        if k as usize >= n_classes {
            return Err(Error::OutOfRange(format!(
                "mask class {k} at ({y}, {x}) is not below {n_classes}"
            )));
        }
        out[[y, x, 3 + k as usize]] = 1.0;
    }
    Ok(out)
}

/// Channel-wise concatenation of exactly ten stacked frames, oldest first.
pub fn stack_sequence(frames: &[Array3<f64>]) -> Result<Array3<f64>> {
    if frames.len() != SEQUENCE_FRAMES {
        return Err(Error::invalid(format!(
            "stack_sequence needs {SEQUENCE_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    concatenate(Axis(2), &views)
        .map_err(|e| Error::shape("stack_sequence", frames[0].dim(), e.to_string()))
}

/// `<root>_<tier>_<stride>` beside the dataset root.
pub fn cache_dir(root: &Path, tier: ResolutionTier, stride: u32) -> PathBuf {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    root.with_file_name(format!("{name}_{}_{stride}", tier.name()))
}

pub const NORM_STATS_FILE: &str = "norm_stats.json";

/// Writes a resized, temporally strided copy of the dataset plus
/// `norm_stats.json` fitted on its train split.
pub fn prepare_cache(
    manifest: &DatasetManifest,
    tier: ResolutionTier,
    stride: u32,
    out_root: &Path,
) -> Result<(DatasetManifest, NormStats)> {
    let mut out = manifest.clone();
    out.root_path = out_root.to_path_buf();
    out.resolution = (tier.dims().0 as u32, tier.dims().1 as u32);
    out.frame_stride = manifest.frame_stride * stride;
    let mut train = Vec::new();
    for (entry, out_entry) in manifest.chapters.iter().zip(out.chapters.iter_mut()) {
        let chapter = downsample_temporal(&load_chapter(manifest, entry)?, stride)?;
        let mut resized = chapter.clone();
        for f in &mut resized.frames {
            f.front_image = downsample_rgb(&f.front_image, tier)?;
            f.map_image = f
                .map_image
                .as_ref()
                .map(|m| downsample_rgb(m, tier))
                .transpose()?;
            f.seg_mask = downsample_mask(f.seg_mask.view(), tier)?;
        }
        write_chapter(out_root, &resized)?;
        out_entry.frame_count = resized.len();
        if resized.split == Split::Train {
            train.push(resized);
        }
    }
    let stats = fit_norm_stats(&train)?;
    write_manifest(&out, out_root)?;
    stats.save(&out_root.join(NORM_STATS_FILE))?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, load_manifest, synth::simulate_chapter, GenConfig};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn chapter(n: usize) -> Chapter {
        let cfg = GenConfig {
            n_routes: 1,
            chapters_per_route: 1,
            frames_per_chapter: n,
            resolution: (32, 18),
            ..Default::default()
        };
        simulate_chapter(&cfg, 0, 0)
    }

    #[test]
    fn tier_dimensions() {
        let img = Array3::<f64>::from_elem((1080, 1920, 3), 0.5);
        for (tier, dims) in [
            (ResolutionTier::S1, (360, 640, 3)),
            (ResolutionTier::S2, (180, 320, 3)),
            (ResolutionTier::S3, (90, 160, 3)),
        ] {
            let out = downsample_spatial(img.view(), tier).unwrap();
            assert_eq!(out.dim(), dims);
            assert!(out.iter().all(|v| (*v - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn spatial_identity_and_aspect_check() {
        let img = Array3::from_shape_fn((90, 160, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 11) as f64 / 10.0
        });
        assert_eq!(
            downsample_spatial(img.view(), ResolutionTier::S3).unwrap(),
            img
        );
        let bad = Array3::<f64>::zeros((100, 160, 3));
        assert!(downsample_spatial(bad.view(), ResolutionTier::S3).is_err());
    }

    #[test]
    fn temporal_stride_examples() {
        let c = chapter(300);
        let d = downsample_temporal(&c, 40).unwrap();
        let idx: Vec<u32> = d.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![0, 40, 80, 120, 160, 200, 240, 280]);
        d.validate().unwrap();
        assert_eq!(downsample_temporal(&c, 1).unwrap(), c);
        assert_eq!(downsample_temporal(&c, 10).unwrap().len(), 30);
        assert!(downsample_temporal(&c, 0).is_err());
    }

    #[test]
    fn temporal_strides_compose() {
        let c = chapter(120);
        for (a, b) in [(2, 5), (3, 4), (1, 7)] {
            let twice = downsample_temporal(&downsample_temporal(&c, a).unwrap(), b).unwrap();
            assert_eq!(twice, downsample_temporal(&c, a * b).unwrap());
        }
    }

    #[test]
    fn impute_examples() {
        let rec = SemanticRecord::new(vec![3.0; 20], vec![true; 20]).unwrap();
        let out = impute(&rec);
        assert!(out.values.iter().all(|v| *v == 0.0) && out.missing.iter().all(|m| *m));
        let rec = SemanticRecord::new(vec![3.0; 20], vec![false; 20]).unwrap();
        assert_eq!(impute(&rec), rec);
        let mut missing = vec![false; 20];
        missing[3] = true;
        let out = impute(&SemanticRecord::new(vec![3.0; 20], missing).unwrap());
        assert_eq!(out.values[3], 0.0);
        assert!(out
            .values
            .iter()
            .enumerate()
            .all(|(i, v)| i == 3 || *v == 3.0));
    }

    #[test]
    fn stack_mask_channels() {
        let img = Array3::<f64>::from_elem((9, 16, 3), 0.25);
        let zero = Array2::<u8>::zeros((9, 16));
        let out = stack_mask(img.view(), zero.view(), 20).unwrap();
        assert_eq!(out.dim(), (9, 16, 23));
        assert!(out.slice(s![.., .., 3]).iter().all(|v| *v == 1.0));
        assert!(out.slice(s![.., .., 4..]).iter().all(|v| *v == 0.0));
        let bad = Array2::<u8>::from_elem((9, 16), 20);
        assert!(stack_mask(img.view(), bad.view(), 20).is_err());
    }

    #[test]
    fn stack_sequence_channels() {
        let frames: Vec<Array3<f64>> = (0..10)
            .map(|k| Array3::from_elem((9, 16, 23), k as f64))
            .collect();
        let out = stack_sequence(&frames).unwrap();
        assert_eq!(out.dim(), (9, 16, 230));
        assert!(out.slice(s![.., .., 0..23]).iter().all(|v| *v == 0.0));
        assert!(out.slice(s![.., .., 207..230]).iter().all(|v| *v == 9.0));
        assert!(stack_sequence(&frames[..9]).is_err());
    }

    #[test]
    fn cache_dir_naming() {
        assert_eq!(
            cache_dir(Path::new("/data/synth"), ResolutionTier::S3, 2),
            PathBuf::from("/data/synth_s3_2")
        );
    }

    #[test]
    fn prepare_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let cfg = GenConfig {
            n_routes: 3,
            chapters_per_route: 1,
            frames_per_chapter: 20,
            resolution: (320, 180),
            ..Default::default()
        };
        let m = generate_synthetic(&cfg, &root, false).unwrap();
        let out_root = cache_dir(&root, ResolutionTier::S3, 2);
        let (pm, stats) = prepare_cache(&m, ResolutionTier::S3, 2, &out_root).unwrap();
        let loaded = load_manifest(&out_root).unwrap();
        assert_eq!(loaded, pm);
        assert_eq!(loaded.resolution, (160, 90));
        assert!(loaded.chapters.iter().all(|c| c.frame_count == 10));
        let ch = load_chapter(&loaded, &loaded.chapters[0]).unwrap();
        assert_eq!(ch.frames[1].frame_index, 2);
        assert_eq!(ch.frames[0].front_image.dim(), (90, 160, 3));
        assert_eq!(
            NormStats::load(&out_root.join(NORM_STATS_FILE)).unwrap(),
            stats
        );
    }

    proptest! {
        #[test]
        fn normalize_round_trip(x in -1e4f64..1e4, m in -1e3f64..1e3, s in 1e-3f64..1e3) {
            prop_assert!((denormalize(normalize(x, m, s), m, s) - x).abs() <= 1e-12 * x.abs().max(1.0));
        }

        #[test]
        fn one_hot_planes_sum_to_one(seed in 0u64..1000, h in 1usize..8, w in 1usize..8) {
            let mask = Array2::from_shape_fn((h, w), |(y, x)| ((seed as usize + y * 31 + x * 7) % 20) as u8);
            let img = Array3::<f64>::zeros((h, w, 3));
            let out = stack_mask(img.view(), mask.view(), 20).unwrap();
            let sums = out.slice(s![.., .., 3..]).sum_axis(Axis(2));
            prop_assert!(sums.iter().all(|v| *v == 1.0));
        }

        #[test]
        fn temporal_kept_indices(stride in 1u32..50, n in 12usize..120) {
            let c = chapter(n);
            let d = downsample_temporal(&c, stride).unwrap();
            prop_assert_eq!(d.len(), n.div_ceil(stride as usize));
            prop_assert!(d.frames.iter().all(|f| f.frame_index % stride == 0));
        }
    }
}
