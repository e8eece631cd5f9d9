//! Run configuration: one TOML file covering every stage.
//!
//! ```toml
//! seed = 7                 # shared by generation, training and augmentation
//! out = "runs"             # output root
//! data = "data"            # raw dataset root; else $DRIVEFUSION_DATA, else <out>/data
//!
//! [gen]                    # synthetic dataset
//! n_routes = 4
//! chapters_per_route = 4
//! frames_per_chapter = 300
//! resolution = [160, 90]
//!
//! [prep]
//! tier = "s3"              # full | s1 | s2 | s3
//! stride = 2
//!
//! [train]
//! preset = "model1"
//! scale = 0.25             # width multiplier
//! backbone = "toy"         # toy | reported
//! epochs = 5               # optional overrides of the preset
//! batch_size = 16
//! lr = 4e-4
//!
//! [kinematics]
//! dt = 0.1
//! gain_k = 1.0
//! initial_heading = 0.0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use drivefusion::dataset::GenConfig;
use drivefusion::preprocess::{cache_dir, ResolutionTier};
use drivefusion::trajectory::KinematicsConfig;
use serde::{Deserialize, Serialize};

pub const DATA_ENV: &str = "DRIVEFUSION_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub gen: GenConfig,
    pub prep: PrepSection,
    pub train: TrainSection,
    pub kinematics: KinematicsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs"),
            data: None,
            gen: GenConfig::default(),
            prep: PrepSection::default(),
            train: TrainSection::default(),
            kinematics: KinematicsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepSection {
    pub tier: ResolutionTier,
    pub stride: u32,
}

impl Default for PrepSection {
    fn default() -> Self {
        Self {
            tier: ResolutionTier::S3,
            stride: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackboneChoice {
    /// Small CNN for every image branch.
    Toy,
    /// The backbone families each preset reports.
    Reported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: String,
    pub scale: f64,
    pub backbone: BackboneChoice,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            preset: "model1".into(),
            scale: 1.0,
            backbone: BackboneChoice::Reported,
            epochs: None,
            batch_size: None,
            lr: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| drivefusion::Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| drivefusion::Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        drivefusion::trainer::Preset::get(&self.train.preset)?;
        if !(self.train.scale > 0.0 && self.train.scale.is_finite()) {
            bail!(drivefusion::Error::invalid(format!(
                "scale must be positive, got {}",
                self.train.scale
            )));
        }
        if self.prep.stride == 0 {
            bail!(drivefusion::Error::invalid("stride must be at least 1"));
        }
        self.kinematics.validate()?;
        self.gen.validate()?;
        Ok(())
    }

    /// Raw dataset root.
    pub fn data_root(&self) -> PathBuf {
        self.data
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.out.join("data"))
    }

    /// Prepared dataset for the configured tier and stride.
    pub fn prepared_root(&self) -> PathBuf {
        cache_dir(&self.data_root(), self.prep.tier, self.prep.stride)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.train.preset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 3
            [prep]
            stride = 2
            [train]
            preset = "model2-single"
            scale = 0.25
            backbone = "toy"
            [gen]
            frames_per_chapter = 50
            resolution = [32, 18]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.prep.tier, ResolutionTier::S3);
        assert_eq!(cfg.gen.n_routes, 4);
        assert_eq!(cfg.gen.resolution, (32, 18));
        assert_eq!(cfg.train.backbone, BackboneChoice::Toy);
        assert_eq!(cfg.kinematics, KinematicsConfig::default());
        cfg.validate().unwrap();
        let again: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_presets() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        let cfg: RunConfig = toml::from_str("[train]\npreset = \"model9\"").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model2-sequence"), "{err}");
    }

    #[test]
    fn prepared_root_sits_beside_the_data() {
        let cfg = RunConfig {
            data: Some(PathBuf::from("/x/data")),
            prep: PrepSection {
                tier: ResolutionTier::S3,
                stride: 2,
            },
            ..RunConfig::default()
        };
        assert_eq!(cfg.prepared_root(), PathBuf::from("/x/data_s3_2"));
        assert_eq!(cfg.run_dir(), PathBuf::from("runs/model1"));
    }
}
