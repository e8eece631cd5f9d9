//! Optimisation of any [`ModelSpec`] on a prepared dataset, with per-target
//! best-checkpoint selection.

mod presets;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, Chapter, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model_zoo::checkpoint::{load_model, save_model};
use crate::model_zoo::layers::Ctx;
use crate::model_zoo::{
    build_model, eligible_positions, loss_graph, Batch, BatchBuilder, Model, ModelSpec, Prediction,
    SampleRef,
};
use crate::preprocess::{fit_norm_stats, AugmentConfig, NormStats, ResolutionTier};
use crate::series::{PredictionSeries, SeriesPoint};
use crate::tensor::optim::Adam;
use crate::tensor::Graph;

pub use presets::{scaled_lr, Preset, MAX_LR, PRESETS};

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Samples per forward pass when predicting.
pub const EVAL_BATCH: usize = 32;
pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_ANGLE_FILE: &str = "best_angle.safetensors";
pub const BEST_SPEED_FILE: &str = "best_speed.safetensors";
pub const LAST_FILE: &str = "last.safetensors";

const META_STATS: &str = "norm_stats";
const META_EPOCH: &str = "epoch";
pub const META_TRAIN_CONFIG: &str = "train_config";
const META_VAL_ANGLE: &str = "val_angle_mse";
const META_VAL_SPEED: &str = "val_speed_mse";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// lr0 for five epochs, then lr0/3, lr0/6 after epoch 15 and lr0/10
    /// after epoch 20.
    M2SingleDecay,
    /// lr0 halved after epochs 20, 30 and 40.
    #[serde(rename = "halve_20_30_40")]
    Halve20_30_40,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::M2SingleDecay => "m2_single_decay",
            Self::Halve20_30_40 => "halve_20_30_40",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Constant, Self::M2SingleDecay, Self::Halve20_30_40]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown schedule {s:?}")))
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(schedule: Schedule, lr0: f64, epoch: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::M2SingleDecay => match epoch {
            0..=4 => lr0,
            5..=14 => lr0 / 3.0,
            15..=19 => lr0 / 6.0,
            _ => lr0 / 10.0,
        },
        Schedule::Halve20_30_40 => {
            let passed = [20, 30, 40].iter().filter(|&&t| epoch >= t).count();
            lr0 / f64::from(1u32 << passed)
        }
    }
}

/// Sum of the mean squared angle error and mean squared speed error, in
/// normalized units. `targets` is B×2.
pub fn loss(pred: &Prediction, targets: ArrayView2<f64>) -> Result<f64> {
    let n = pred.len();
    if targets.dim() != (n, 2) || pred.speed_norm.len() != n {
        return Err(Error::shape("loss targets", (n, 2), targets.dim()));
    }
    if n == 0 {
        return Err(Error::invalid("loss of an empty batch"));
    }
    let mut sa = 0.0;
    let mut ss = 0.0;
    for i in 0..n {
        sa += (pred.angle_norm[i] - targets[[i, 0]]).powi(2);
        ss += (pred.speed_norm[i] - targets[[i, 1]]).powi(2);
    }
    Ok(sa / n as f64 + ss / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Resolution the prepared data must have.
    pub tier: ResolutionTier,
    /// Temporal stride the prepared data must have.
    pub temporal_stride: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 2,
            schedule: Schedule::Constant,
            seed: 0,
            augment: AugmentConfig::default(),
            tier: ResolutionTier::S3,
            temporal_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.temporal_stride == 0 {
            return Err(Error::invalid("temporal_stride must be at least 1"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_angle_mse: f64,
    pub val_speed_mse: f64,
}

/// Files written by [`train`] plus the per-epoch history.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSet {
    pub best_angle: PathBuf,
    pub best_speed: PathBuf,
    pub last: PathBuf,
    pub history: Vec<EpochRecord>,
}

impl CheckpointSet {
    /// Running minimum of the validation angle MSE after each epoch.
    pub fn best_angle_curve(&self) -> Vec<f64> {
        running_min(self.history.iter().map(|r| r.val_angle_mse))
    }

    pub fn best_speed_curve(&self) -> Vec<f64> {
        running_min(self.history.iter().map(|r| r.val_speed_mse))
    }
}

fn running_min(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut best = f64::INFINITY;
    xs.map(|x| {
        best = best.min(x);
        best
    })
    .collect()
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub stats: Option<NormStats>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let (model, mut meta) = load_model(path)?;
        let stats = match meta.remove(META_STATS) {
            Some(json) => Some(serde_json::from_str(&json).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("bad normalization statistics: {e}"),
            })?),
            None => None,
        };
        Ok(Self { model, stats, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.meta.clone();
        if let Some(stats) = &self.stats {
            meta.insert(
                META_STATS.into(),
                serde_json::to_string(stats).map_err(|e| Error::Serde(e.to_string()))?,
            );
        }
        save_model(&self.model, path, &meta)
    }

    /// The statistics the model was trained with.
    pub fn norm_stats(&self) -> Result<&NormStats> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint carries no normalization statistics"))?;
        stats.check_train_only()?;
        Ok(stats)
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One optimisation step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::invalid("training batch without targets"))?;
    let (value, grads, updates) = {
        let mut g = Graph::new(&model.store);
        let mut cx = Ctx::train(&mut g, rng);
        let (a, v) = model.forward_graph(&mut cx, batch)?;
        let l = loss_graph(&mut g, a, v, targets)?;
        let value = g.value(l).iter().next().copied().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = g.backward(l)?;
        (value, grads, g.take_bn_updates())
    };
    adam.step(&mut model.store, &grads);
    for u in updates {
        let m = BN_MOMENTUM;
        model
            .store
            .value_mut(u.running_mean)
            .zip_mut_with(&u.batch_mean.into_dyn(), |r, b| *r = (1.0 - m) * *r + m * b);
        model
            .store
            .value_mut(u.running_var)
            .zip_mut_with(&u.batch_var.into_dyn(), |r, b| *r = (1.0 - m) * *r + m * b);
    }
    Ok(value)
}

/// Every position of every chapter that has enough history.
pub fn eligible_samples(spec: &ModelSpec, chapters: &[Chapter]) -> Vec<SampleRef> {
    chapters
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| {
            eligible_positions(spec, c.len()).map(move |p| SampleRef {
                chapter: ci,
                position: p,
            })
        })
        .collect()
}

/// Evaluation-mode predictions for `samples`, denormalized.
pub fn predict_samples(
    model: &Model,
    stats: &NormStats,
    chapters: &[Chapter],
    samples: &[SampleRef],
) -> Result<Vec<(f64, f64)>> {
    let builder = BatchBuilder::new(&model.spec, stats)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = builder.build(chapters, chunk, None)?;
        let mut p = model.forward(&batch)?;
        p.attach_stats(stats);
        out.extend(p.angle_deg.unwrap().into_iter().zip(p.speed_kmh.unwrap()));
    }
    Ok(out)
}

/// Raw-unit (angle, speed) MSE of the model on every eligible frame.
pub fn validation_mse(
    model: &Model,
    stats: &NormStats,
    chapters: &[Chapter],
) -> Result<(f64, f64)> {
    let samples = eligible_samples(&model.spec, chapters);
    if samples.is_empty() {
        return Err(Error::invalid("no validation frame has enough history"));
    }
    let preds = predict_samples(model, stats, chapters, &samples)?;
    let (mut sa, mut ss) = (0.0, 0.0);
    for (s, (a, v)) in samples.iter().zip(preds) {
        let f = &chapters[s.chapter].frames[s.position];
        sa += (a - f.angle_deg).powi(2);
        ss += (v - f.speed_kmh).powi(2);
    }
    let n = samples.len() as f64;
    Ok((sa / n, ss / n))
}

/// Denormalized prediction for every frame of `chapter`; frames without
/// enough history carry no values.
pub fn predict_chapter(
    model: &Model,
    chapter: &Chapter,
    stats: &NormStats,
) -> Result<PredictionSeries> {
    stats.check_train_only()?;
    let chapters = std::slice::from_ref(chapter);
    let samples = eligible_samples(&model.spec, chapters);
    let preds = predict_samples(model, stats, chapters, &samples)?;
    let mut points: Vec<SeriesPoint> = chapter
        .frames
        .iter()
        .map(|f| SeriesPoint {
            chapter_id: chapter.chapter_id.clone(),
            frame_index: f.frame_index,
            timestamp_ms: f.timestamp_ms,
            angle_deg: None,
            speed_kmh: None,
        })
        .collect();
    for (s, (a, v)) in samples.iter().zip(preds) {
        points[s.position].angle_deg = Some(a);
        points[s.position].speed_kmh = Some(v);
    }
    Ok(PredictionSeries { points })
}

/// Loads the given split of a prepared manifest, checking it matches `cfg`.
pub fn load_prepared(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    split: Split,
) -> Result<Vec<Chapter>> {
    let (w, h) = cfg.tier.dims();
    if manifest.resolution != (w as u32, h as u32) {
        return Err(Error::invalid(format!(
            "dataset resolution {}x{} does not match tier {} ({w}x{h}); prepare the data first",
            manifest.resolution.0,
            manifest.resolution.1,
            cfg.tier.name()
        )));
    }
    if manifest.frame_stride != cfg.temporal_stride {
        return Err(Error::invalid(format!(
            "dataset temporal stride {} does not match the configured stride {}",
            manifest.frame_stride, cfg.temporal_stride
        )));
    }
    load_split(manifest, split)
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Trains `spec` on the train split of a prepared dataset, validating each
/// epoch, and writes `last`, `best_angle`, `best_speed` checkpoints and
/// `history.csv` into `out_dir`.
pub fn train(
    spec: &ModelSpec,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<CheckpointSet> {
    cfg.validate()?;
    let train_chapters = load_prepared(manifest, cfg, Split::Train)?;
    let val_chapters = load_prepared(manifest, cfg, Split::Validation)?;
    if train_chapters.is_empty() || val_chapters.is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and validation splits",
        ));
    }
    train_on(spec, &train_chapters, &val_chapters, cfg, out_dir)
}

/// [`train`] on chapters already in memory.
pub fn train_on(
    spec: &ModelSpec,
    train_chapters: &[Chapter],
    val_chapters: &[Chapter],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<CheckpointSet> {
    cfg.validate()?;
    let stats = fit_norm_stats(train_chapters)?;
    let (w, h) = spec.image_size;
    if let Some(f) = train_chapters.iter().flat_map(|c| c.frames.first()).next() {
        if (f.width(), f.height()) != (w, h) {
            return Err(Error::shape(
                "training images",
                (w, h),
                (f.width(), f.height()),
            ));
        }
    }
    let mut model = build_model(spec, cfg.seed)?;
    let builder = BatchBuilder::new(spec, &stats)?;
    let mut samples = eligible_samples(spec, train_chapters);
    if samples.len() < 2 {
        return Err(Error::invalid(
            "fewer than two training frames have enough history",
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut order_rng = stream(cfg.seed, 1);
    let mut aug_rng = stream(cfg.seed ^ cfg.augment.seed, 2);
    let mut dropout_rng = stream(cfg.seed, 3);
    let mut adam = Adam::new(cfg.lr0, cfg.betas, cfg.weight_decay);
    let cfg_json = serde_json::to_string(cfg)?;
    let mut set = CheckpointSet {
        best_angle: out_dir.join(BEST_ANGLE_FILE),
        best_speed: out_dir.join(BEST_SPEED_FILE),
        last: out_dir.join(LAST_FILE),
        history: Vec::new(),
    };
    let (mut best_a, mut best_s) = (f64::INFINITY, f64::INFINITY);

    for epoch in 0..cfg.epochs {
        adam.lr = lr_at(cfg.schedule, cfg.lr0, epoch);
        samples.sort_unstable();
        samples.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            // batch statistics need at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let batch = builder.build(train_chapters, chunk, Some((&cfg.augment, &mut aug_rng)))?;
            let l = train_step(&mut model, &mut adam, &batch, &mut dropout_rng)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            total += l;
            n_batches += 1;
        }
        let (va, vs) = validation_mse(&model, &stats, val_chapters)?;
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: total / n_batches.max(1) as f64,
            val_angle_mse: va,
            val_speed_mse: vs,
        };
        log::info!(
            "epoch {epoch}: lr {:.2e} train loss {:.4} val angle mse {va:.3} val speed mse {vs:.3}",
            record.lr,
            record.train_loss
        );
        set.history.push(record);
        let mut meta = BTreeMap::new();
        meta.insert(META_EPOCH.to_string(), epoch.to_string());
        meta.insert(META_TRAIN_CONFIG.to_string(), cfg_json.clone());
        meta.insert(META_VAL_ANGLE.to_string(), format!("{va:e}"));
        meta.insert(META_VAL_SPEED.to_string(), format!("{vs:e}"));
        let ckpt = Checkpoint {
            model,
            stats: Some(stats.clone()),
            meta,
        };
        ckpt.save(&set.last)?;
        if va < best_a {
            best_a = va;
            ckpt.save(&set.best_angle)?;
        }
        if vs < best_s {
            best_s = vs;
            ckpt.save(&set.best_speed)?;
        }
        model = ckpt.model;
        write_history(&out_dir.join(HISTORY_FILE), &set.history)?;
    }
    if cfg.epochs == 0 {
        let ckpt = Checkpoint {
            model,
            stats: Some(stats),
            meta: BTreeMap::from([(META_TRAIN_CONFIG.to_string(), cfg_json)]),
        };
        for p in [&set.last, &set.best_angle, &set.best_speed] {
            ckpt.save(p)?;
        }
        write_history(&out_dir.join(HISTORY_FILE), &set.history)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests;
