//! Named hyperparameter bundles, one per reported model variant.

use super::{Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::model_zoo::{BackboneFamily, ModelSpec, Variant};
use crate::preprocess::{AugmentConfig, ResolutionTier};

use BackboneFamily::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub variant: Variant,
    /// Backbone family per image branch at full scale.
    pub backbones: &'static [BackboneFamily],
    pub semantic_dim: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub tier: ResolutionTier,
}

pub const PRESETS: [Preset; 8] = [
    Preset {
        name: "model1",
        variant: Variant::M1,
        backbones: &[Residual34],
        semantic_dim: 0,
        lr0: 1e-4,
        batch_size: 64,
        epochs: 2,
        schedule: Schedule::Constant,
        tier: ResolutionTier::S2,
    },
    Preset {
        name: "model1-r152",
        variant: Variant::M1,
        backbones: &[Residual152],
        semantic_dim: 0,
        lr0: 1e-4,
        batch_size: 8,
        epochs: 1,
        schedule: Schedule::Constant,
        tier: ResolutionTier::S2,
    },
    Preset {
        name: "model1-sem20",
        variant: Variant::M1,
        backbones: &[Residual34],
        semantic_dim: 20,
        lr0: 1e-4,
        batch_size: 8,
        epochs: 5,
        schedule: Schedule::Constant,
        tier: ResolutionTier::S3,
    },
    Preset {
        name: "model1-sem47",
        variant: Variant::M1,
        backbones: &[Residual34],
        semantic_dim: 47,
        lr0: 1e-4,
        batch_size: 64,
        epochs: 1,
        schedule: Schedule::Constant,
        tier: ResolutionTier::S2,
    },
    Preset {
        name: "model2-single",
        variant: Variant::M2Single,
        backbones: &[Dense121],
        semantic_dim: 0,
        lr0: 3e-4,
        batch_size: 13,
        epochs: 90,
        schedule: Schedule::M2SingleDecay,
        tier: ResolutionTier::S3,
    },
    Preset {
        name: "model2-stacked",
        variant: Variant::M2Stacked,
        backbones: &[Dense121],
        semantic_dim: 0,
        lr0: 3e-4,
        batch_size: 13,
        epochs: 90,
        schedule: Schedule::M2SingleDecay,
        tier: ResolutionTier::S3,
    },
    Preset {
        name: "model2-sequence",
        variant: Variant::M2Sequence,
        backbones: &[Residual34, Dense201, Dense121],
        semantic_dim: 0,
        lr0: 3e-3,
        batch_size: 13,
        epochs: 50,
        schedule: Schedule::Halve20_30_40,
        tier: ResolutionTier::S3,
    },
    Preset {
        name: "model3",
        variant: Variant::M3,
        backbones: &[Residual50, Residual34],
        semantic_dim: 20,
        lr0: 1e-4,
        batch_size: 64,
        epochs: 10,
        schedule: Schedule::Constant,
        tier: ResolutionTier::S3,
    },
];

/// Largest learning rate among the presets.
pub const MAX_LR: f64 = 3e-3;

/// `min(lr0 / scale, MAX_LR)`, or `lr0` itself when it already exceeds the cap.
pub fn scaled_lr(lr0: f64, scale: f64) -> f64 {
    if scale >= 1.0 {
        lr0
    } else {
        (lr0 / scale).min(MAX_LR.max(lr0))
    }
}

impl Preset {
    pub fn names() -> Vec<&'static str> {
        PRESETS.iter().map(|p| p.name).collect()
    }

    pub fn get(name: &str) -> Result<&'static Preset> {
        PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown preset {name:?}; available presets: {}",
                Self::names().join(", ")
            ))
        })
    }

    /// Model spec at `scale`; with `toy` every backbone is the small CNN.
    pub fn model_spec(
        &self,
        image_size: (usize, usize),
        scale: f64,
        toy: bool,
    ) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.variant, image_size, Some(self.backbones))?;
        if toy {
            spec = spec.with_toy_backbones();
        }
        spec.semantic_dim = self.semantic_dim;
        spec.scale = scale;
        spec.validate()?;
        Ok(spec)
    }

    /// Training hyperparameters for a model built at width `scale`. Narrower
    /// models take a proportionally larger Adam step, capped at the largest
    /// preset rate; at scale 1 the preset rate is used unchanged.
    pub fn train_config(&self, seed: u64, scale: f64) -> TrainConfig {
        TrainConfig {
            lr0: scaled_lr(self.lr0, scale),
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: self.schedule,
            seed,
            augment: AugmentConfig {
                seed,
                ..AugmentConfig::default()
            },
            tier: self.tier,
            temporal_stride: 1,
        }
    }
}
