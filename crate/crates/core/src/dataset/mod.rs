//! Dataset schema, synthetic generation, on-disk layout and chapter splits.
//!
//! A dataset root holds `manifest.json` plus one directory per chapter with
//! `front_NNNNN.png`, `map_NNNNN.png`, `seg_NNNNN.png` and `labels.csv`.

mod io;
mod split;
pub mod synth;

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{chapter_dir, load_chapter, load_manifest, load_split, write_chapter, write_manifest};
pub use split::{largest_remainder, split_chapters, SplitOptions};
pub use synth::{generate_synthetic, GenConfig};

/// Frames are sampled at 10 fps.
pub const FRAME_INTERVAL_MS: i64 = 100;
pub const N_SEMANTIC: usize = 20;
pub const N_FOLDERS: usize = 27;
pub const N_SEG_CLASSES: usize = 20;

/// Names of the 20 semantic fields, in column order.
pub const SEMANTIC_FIELDS: [&str; N_SEMANTIC] = [
    "latitude",
    "longitude",
    "speed_limit",
    "free_flow_speed",
    "heading",
    "road_index",
    "dist_to_signal",
    "dist_to_yield",
    "dist_to_pedestrian_crossing",
    "dist_to_intersection",
    "road_width",
    "lane_count",
    "abs_curvature_ahead",
    "lead_vehicle_distance",
    "traffic_density",
    "dist_to_zone_change",
    "next_speed_limit",
    "slope",
    "road_class",
    "noise",
];

/// Segmentation classes rendered by the generator (Cityscapes-like order).
pub const SEG_CLASSES: [&str; N_SEG_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic_light",
    "traffic_sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
    "lane_marking",
];

/// Zone tag vocabulary.
pub mod zone {
    pub const ZONE30: &str = "Zone30";
    pub const ZONE50: &str = "Zone50";
    pub const ZONE80: &str = "Zone80";
    pub const LEFT: &str = "Left";
    pub const STRAIGHT: &str = "Straight";
    pub const RIGHT: &str = "Right";
    pub const PEDESTRIAN: &str = "Pedestrian";
    pub const TRAFFIC_LIGHT: &str = "TrafficLight";
    pub const YIELD: &str = "Yield";

    pub const ALL: [&str; 9] = [
        ZONE30,
        ZONE50,
        ZONE80,
        RIGHT,
        STRAIGHT,
        LEFT,
        PEDESTRIAN,
        TRAFFIC_LIGHT,
        YIELD,
    ];
    pub const MANEUVERS: [&str; 3] = [LEFT, STRAIGHT, RIGHT];

    /// Maneuver tag for a steering angle: straight within ±10°.
    pub fn maneuver(angle_deg: f64) -> &'static str {
        if angle_deg <= -10.0 {
            LEFT
        } else if angle_deg >= 10.0 {
            RIGHT
        } else {
            STRAIGHT
        }
    }

    pub fn speed_zone(limit_kmh: f64) -> &'static str {
        if limit_kmh <= 40.0 {
            ZONE30
        } else if limit_kmh <= 65.0 {
            ZONE50
        } else {
            ZONE80
        }
    }
}

/// H×W×3, 8-bit per channel; value `v` stands for `v / 255` in [0, 1].
pub type RgbImage = Array3<u8>;
/// H×W class indices.
pub type LabelMask = Array2<u8>;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticRecord {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    /// One-hot route folder indicator (27 entries) when available.
    pub folder_onehot: Option<Vec<f64>>,
}

impl SemanticRecord {
    pub fn new(values: Vec<f64>, missing: Vec<bool>) -> Result<Self> {
        if values.len() != N_SEMANTIC || missing.len() != N_SEMANTIC {
            return Err(Error::shape(
                "semantic record",
                N_SEMANTIC,
                (values.len(), missing.len()),
            ));
        }
        Ok(Self {
            values,
            missing,
            folder_onehot: None,
        })
    }

    pub fn with_folder(mut self, folder: usize) -> Self {
        let mut onehot = vec![0.0; N_FOLDERS];
        onehot[folder % N_FOLDERS] = 1.0;
        self.folder_onehot = Some(onehot);
        self
    }

    /// 20, or 47 with the folder indicators.
    pub fn feature_count(&self) -> usize {
        N_SEMANTIC + self.folder_onehot.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub chapter_id: String,
    pub frame_index: u32,
    pub timestamp_ms: i64,
    pub front_image: RgbImage,
    pub map_image: Option<RgbImage>,
    pub seg_mask: LabelMask,
    pub semantic: SemanticRecord,
    pub angle_deg: f64,
    pub speed_kmh: f64,
    pub zone_tags: BTreeSet<String>,
}

impl FrameRecord {
    pub fn height(&self) -> usize {
        self.front_image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.front_image.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chapter {
    pub chapter_id: String,
    pub route_id: String,
    pub split: Split,
    /// Frame-index spacing between consecutive frames (1 unless temporally
    /// down-sampled).
    pub frame_stride: u32,
    pub frames: Vec<FrameRecord>,
}

impl Chapter {
    /// Checks ordering, spacing and chapter membership of the frames.
    pub fn validate(&self) -> Result<()> {
        for (pos, f) in self.frames.iter().enumerate() {
            if f.chapter_id != self.chapter_id {
                return Err(Error::invalid(format!(
                    "frame {} belongs to {} not {}",
                    f.frame_index, f.chapter_id, self.chapter_id
                )));
            }
            let expected = pos as u32 * self.frame_stride;
            if f.frame_index != expected {
                return Err(Error::invalid(format!(
                    "chapter {}: frame at position {pos} has index {}, expected {expected}",
                    self.chapter_id, f.frame_index
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChapterEntry {
    pub chapter_id: String,
    pub route_id: String,
    pub split: Split,
    pub frame_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root_path: PathBuf,
    pub chapters: Vec<ChapterEntry>,
    /// (width, height)
    pub resolution: (u32, u32),
    pub n_seg_classes: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub frame_stride: u32,
}

fn one() -> u32 {
    1
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.chapters {
            if !seen.insert(c.chapter_id.as_str()) {
                return Err(Error::Integrity {
                    path: self.root_path.clone(),
                    reason: format!("duplicate chapter id {}", c.chapter_id),
                });
            }
        }
        Ok(())
    }

    pub fn chapters_in(&self, split: Split) -> impl Iterator<Item = &ChapterEntry> {
        self.chapters.iter().filter(move |c| c.split == split)
    }

    pub fn total_frames(&self) -> usize {
        self.chapters.iter().map(|c| c.frame_count).sum()
    }

    /// Route folder index used for the one-hot indicator.
    pub fn folder_index(route_id: &str) -> usize {
        route_id
            .rsplit('_')
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0)
            % N_FOLDERS
    }
}

/// `length` frames ending at position `end_index`, `stride` positions apart,
/// oldest first.
pub fn load_sequence(
    chapter: &Chapter,
    end_index: usize,
    length: usize,
    stride: usize,
) -> Result<Vec<&FrameRecord>> {
    if length == 0 || stride == 0 {
        return Err(Error::invalid(
            "sequence length and stride must be positive",
        ));
    }
    let span = (length - 1) * stride;
    if end_index < span || end_index >= chapter.frames.len() {
        return Err(Error::OutOfRange(format!(
            "sequence of {length} frames (stride {stride}) ending at {end_index} in chapter {} of {} frames",
            chapter.chapter_id,
            chapter.frames.len()
        )));
    }
    Ok((0..length)
        .map(|k| &chapter.frames[end_index - span + k * stride])
        .collect())
}
