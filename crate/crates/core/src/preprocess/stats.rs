use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Chapter, SemanticRecord, Split, N_SEMANTIC};
use crate::error::{Error, Result};

/// Lower bound applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel image statistics and scalar target statistics, fitted on the
/// training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
    pub angle_mean: f64,
    pub angle_std: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub semantic_mean: Vec<f64>,
    pub semantic_std: Vec<f64>,
    /// Split the statistics were fitted on; consumers reject anything but train.
    pub fitted_on: Split,
    pub n_frames: usize,
}

/// Welford accumulator; exact zero variance for constant input.
#[derive(Clone, Copy, Debug, Default)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn mean_std(&self) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 1.0);
        }
        let var = (self.m2 / self.n as f64).max(0.0);
        (self.mean, var.sqrt().max(STD_FLOOR))
    }
}

/// Fits statistics over every frame of the given training chapters.
///
/// Image statistics use exact integer sums of the 8-bit pixels, so they do not
/// depend on frame order. Semantic statistics skip missing entries.
pub fn fit_norm_stats(train: &[Chapter]) -> Result<NormStats> {
    if let Some(c) = train.iter().find(|c| c.split != Split::Train) {
        return Err(Error::invalid(format!(
            "normalization statistics must be fitted on the train split; chapter {} is {}",
            c.chapter_id,
            c.split.as_str()
        )));
    }
    let n_frames: usize = train.iter().map(Chapter::len).sum();
    if n_frames == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let mut sum = [0u64; 3];
    let mut sumsq = [0u64; 3];
    let mut pixels = 0u64;
    let mut angle = Running::default();
    let mut speed = Running::default();
    let mut sem = vec![Running::default(); N_SEMANTIC];
    for f in train.iter().flat_map(|c| &c.frames) {
        for px in f
            .front_image
            .as_standard_layout()
            .as_slice()
            .unwrap()
            .chunks_exact(3)
        {
            for k in 0..3 {
                let v = px[k] as u64;
                sum[k] += v;
                sumsq[k] += v * v;
            }
        }
        pixels += (f.height() * f.width()) as u64;
        angle.push(f.angle_deg);
        speed.push(f.speed_kmh);
        for (i, acc) in sem.iter_mut().enumerate() {
            if !f.semantic.missing[i] {
                acc.push(f.semantic.values[i]);
            }
        }
    }
    let mut image_mean = [0.0; 3];
    let mut image_std = [0.0; 3];
    for k in 0..3 {
        // integer moments are exact; scale to [0, 1] units at the end
        let n = pixels as f64;
        let mean = sum[k] as f64 / n;
        let var = ((sumsq[k] as f64 - sum[k] as f64 * mean) / n).max(0.0);
        image_mean[k] = mean / 255.0;
        image_std[k] = (var.sqrt() / 255.0).max(STD_FLOOR);
    }
    let (angle_mean, angle_std) = angle.mean_std();
    let (speed_mean, speed_std) = speed.mean_std();
    let (semantic_mean, semantic_std) = sem.iter().map(Running::mean_std).unzip();
    Ok(NormStats {
        image_mean,
        image_std,
        angle_mean,
        angle_std,
        speed_mean,
        speed_std,
        semantic_mean,
        semantic_std,
        fitted_on: Split::Train,
        n_frames,
    })
}

pub fn normalize(x: f64, mean: f64, std: f64) -> f64 {
    (x - mean) / std
}

pub fn denormalize(z: f64, mean: f64, std: f64) -> f64 {
    z * std + mean
}

impl NormStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let stats: Self = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        stats.check_train_only()?;
        Ok(stats)
    }

    /// Leakage guard for anything that feeds training.
    pub fn check_train_only(&self) -> Result<()> {
        if self.fitted_on != Split::Train {
            return Err(Error::invalid(format!(
                "normalization statistics were fitted on {}, expected train",
                self.fitted_on.as_str()
            )));
        }
        Ok(())
    }

    pub fn normalize_targets(&self, angle_deg: f64, speed_kmh: f64) -> (f64, f64) {
        (
            normalize(angle_deg, self.angle_mean, self.angle_std),
            normalize(speed_kmh, self.speed_mean, self.speed_std),
        )
    }

    pub fn denormalize_targets(&self, angle_norm: f64, speed_norm: f64) -> (f64, f64) {
        (
            denormalize(angle_norm, self.angle_mean, self.angle_std),
            denormalize(speed_norm, self.speed_mean, self.speed_std),
        )
    }

    /// Model input for one semantic record: z-scored present fields, 0 for
    /// missing ones (the training mean), followed by the folder indicators
    /// when `with_folder` is set.
    pub fn semantic_features(&self, record: &SemanticRecord, with_folder: bool) -> Vec<f64> {
        let mut out: Vec<f64> = (0..N_SEMANTIC)
            .map(|i| {
                if record.missing[i] {
                    0.0
                } else {
                    normalize(
                        record.values[i],
                        self.semantic_mean[i],
                        self.semantic_std[i],
                    )
                }
            })
            .collect();
        if with_folder {
            match &record.folder_onehot {
                Some(oh) => out.extend_from_slice(oh),
                None => out.extend(std::iter::repeat_n(0.0, crate::dataset::N_FOLDERS)),
            }
        }
        out
    }
}
