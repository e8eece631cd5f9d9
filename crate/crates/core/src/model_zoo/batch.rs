//! Assembles model batches from loaded chapters.

use std::ops::Range;

use ndarray::{s, Array3, Array5, ArrayViewMut3};
use rand_chacha::ChaCha8Rng;

use super::{Batch, InputKind, ModelSpec};
use crate::dataset::{load_sequence, Chapter, FrameRecord, LabelMask, RgbImage};
use crate::error::{Error, Result};
use crate::preprocess::{AugmentConfig, AugmentDraw, NormStats, SEQUENCE_FRAMES};

/// One prediction target: frame `position` of chapter `chapter`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub chapter: usize,
    pub position: usize,
}

/// Positions with enough history for the model's input window.
pub fn eligible_positions(spec: &ModelSpec, chapter_len: usize) -> Range<usize> {
    spec.history().min(chapter_len)..chapter_len
}

pub struct BatchBuilder<'a> {
    spec: &'a ModelSpec,
    stats: &'a NormStats,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(spec: &'a ModelSpec, stats: &'a NormStats) -> Result<Self> {
        stats.check_train_only()?;
        Ok(Self { spec, stats })
    }

    fn fill_rgb(&self, mut dst: ArrayViewMut3<f64>, img: &RgbImage) {
        for c in 0..3 {
            let (m, sd) = (self.stats.image_mean[c], self.stats.image_std[c]);
            dst.slice_mut(s![c, .., ..]).assign(
                &img.slice(s![.., .., c])
                    .mapv(|v| (v as f64 / 255.0 - m) / sd),
            );
        }
    }

    fn fill_onehot(&self, mut dst: ArrayViewMut3<f64>, mask: &LabelMask) -> Result<()> {
        let n = self.spec.n_seg_classes;
        for ((y, x), &k) in mask.indexed_iter() {
            if k as usize >= n {
                return Err(Error::OutOfRange(format!(
                    "mask class {k} at ({y}, {x}) is not below {n}"
                )));
            }
            dst[[k as usize, y, x]] = 1.0;
        }
        Ok(())
    }

    /// Builds inputs and targets for `samples`. With `augment`, one transform
    /// is drawn per sample and applied to every frame of its window.
    pub fn build(
        &self,
        chapters: &[Chapter],
        samples: &[SampleRef],
        mut augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
    ) -> Result<Batch> {
        let spec = self.spec;
        let inputs = spec.inputs();
        let (w, h) = spec.image_size;
        let n = samples.len();
        let mut images: Vec<Array5<f64>> = inputs
            .iter()
            .map(|i| Array5::zeros((n, i.steps, i.channels, h, w)))
            .collect();
        let sem_steps = inputs[0].steps;
        let mut semantic = (spec.semantic_dim > 0)
            .then(|| Array3::<f64>::zeros((n, sem_steps, spec.semantic_dim)));
        let mut targets = ndarray::Array2::<f64>::zeros((n, 2));
        let mut zone_tags = Vec::with_capacity(n);
        let stacked_width = 3 + spec.n_seg_classes;

        for (b, sample) in samples.iter().enumerate() {
            let chapter = chapters.get(sample.chapter).ok_or_else(|| {
                Error::OutOfRange(format!("chapter {} of {}", sample.chapter, chapters.len()))
            })?;
            let p = sample.position;
            if p < spec.history() || p >= chapter.len() {
                return Err(Error::OutOfRange(format!(
                    "position {p} in chapter {} ({} frames) lacks the {} frames of history {} needs",
                    chapter.chapter_id,
                    chapter.len(),
                    spec.history(),
                    spec.variant
                )));
            }
            let draw = match augment.as_mut() {
                Some((cfg, rng)) => AugmentDraw::sample(cfg, *rng),
                None => AugmentDraw::IDENTITY,
            };
            let prepare = |f: &FrameRecord| -> Result<FrameRecord> {
                if (f.height(), f.width()) != (h, w) {
                    return Err(Error::shape(
                        format!("frame {} of {}", f.frame_index, f.chapter_id),
                        (h, w),
                        (f.height(), f.width()),
                    ));
                }
                Ok(if draw == AugmentDraw::IDENTITY {
                    f.clone()
                } else {
                    draw.apply(f)
                })
            };

            for (spec_in, img) in inputs.iter().zip(images.iter_mut()) {
                match spec_in.kind {
                    InputKind::Front | InputKind::Stacked { frames: 1 } => {
                        let window = load_sequence(chapter, p, spec_in.steps, spec.frame_offset)?;
                        for (k, f) in window.into_iter().enumerate() {
                            let f = prepare(f)?;
                            let mut dst = img.slice_mut(s![b, k, .., .., ..]);
                            self.fill_rgb(dst.slice_mut(s![0..3, .., ..]), &f.front_image);
                            if spec_in.kind != InputKind::Front {
                                self.fill_onehot(dst.slice_mut(s![3.., .., ..]), &f.seg_mask)?;
                            }
                        }
                    }
                    InputKind::Stacked { frames } => {
                        debug_assert_eq!(frames, SEQUENCE_FRAMES);
                        let window = load_sequence(chapter, p, frames, 1)?;
                        for (j, f) in window.into_iter().enumerate() {
                            let f = prepare(f)?;
                            let off = j * stacked_width;
                            let mut dst = img.slice_mut(s![b, 0, off..off + stacked_width, .., ..]);
                            self.fill_rgb(dst.slice_mut(s![0..3, .., ..]), &f.front_image);
                            self.fill_onehot(dst.slice_mut(s![3.., .., ..]), &f.seg_mask)?;
                        }
                    }
                    InputKind::Map => {
                        let f = &chapter.frames[p];
                        let map = f.map_image.as_ref().ok_or_else(|| {
                            Error::invalid(format!(
                                "{} needs map images; frame {} of {} has none",
                                spec.variant, f.frame_index, f.chapter_id
                            ))
                        })?;
                        if map.dim() != (h, w, 3) {
                            return Err(Error::shape("map image", (h, w, 3), map.dim()));
                        }
                        self.fill_rgb(img.slice_mut(s![b, 0, .., .., ..]), map);
                    }
                }
            }

            if let Some(sem) = semantic.as_mut() {
                let with_folder = spec.semantic_dim > crate::dataset::N_SEMANTIC;
                let window = load_sequence(chapter, p, sem_steps, spec.frame_offset)?;
                for (k, f) in window.into_iter().enumerate() {
                    let feats = self.stats.semantic_features(&f.semantic, with_folder);
                    for (d, v) in feats.into_iter().enumerate() {
                        sem[[b, k, d]] = v;
                    }
                }
            }

            let current = &chapter.frames[p];
            let angle = if draw.flip {
                -current.angle_deg
            } else {
                current.angle_deg
            };
            let (a, v) = self.stats.normalize_targets(angle, current.speed_kmh);
            targets[[b, 0]] = a;
            targets[[b, 1]] = v;
            zone_tags.push(current.zone_tags.clone());
        }

        Ok(Batch {
            images: images.into_iter().map(|a| a.into_dyn()).collect(),
            semantic: semantic.map(|a| a.into_dyn()),
            targets: Some(targets.into_dyn()),
            zone_tags,
        })
    }
}
