//! Per-frame prediction series and their CSV form.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Chapter;
use crate::error::{Error, Result};

/// One frame of a series. Frames without enough history carry no values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub chapter_id: String,
    pub frame_index: u32,
    pub timestamp_ms: i64,
    pub angle_deg: Option<f64>,
    pub speed_kmh: Option<f64>,
}

impl SeriesPoint {
    pub fn value(&self) -> Option<(f64, f64)> {
        Some((self.angle_deg?, self.speed_kmh?))
    }

    fn key(&self) -> (&str, u32, i64) {
        (&self.chapter_id, self.frame_index, self.timestamp_ms)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSeries {
    pub points: Vec<SeriesPoint>,
}

impl PredictionSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of frames carrying a prediction.
    pub fn n_present(&self) -> usize {
        self.points.iter().filter(|p| p.value().is_some()).count()
    }

    /// Ground truth of the given chapters as a series.
    pub fn truth(chapters: &[Chapter]) -> Self {
        Self {
            points: chapters
                .iter()
                .flat_map(|c| {
                    c.frames.iter().map(|f| SeriesPoint {
                        chapter_id: c.chapter_id.clone(),
                        frame_index: f.frame_index,
                        timestamp_ms: f.timestamp_ms,
                        angle_deg: Some(f.angle_deg),
                        speed_kmh: Some(f.speed_kmh),
                    })
                })
                .collect(),
        }
    }

    /// Zone tags of the given chapters in the same frame order as [`Self::truth`].
    pub fn zone_tags(chapters: &[Chapter]) -> Vec<BTreeSet<String>> {
        chapters
            .iter()
            .flat_map(|c| c.frames.iter().map(|f| f.zone_tags.clone()))
            .collect()
    }

    /// Errors unless both series list the same frames in the same order.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Misaligned(format!(
                "{} frames vs {} frames",
                self.len(),
                other.len()
            )));
        }
        for (i, (a, b)) in self.points.iter().zip(&other.points).enumerate() {
            if a.key() != b.key() {
                return Err(Error::Misaligned(format!(
                    "row {i}: {} frame {} at {} ms vs {} frame {} at {} ms",
                    a.chapter_id,
                    a.frame_index,
                    a.timestamp_ms,
                    b.chapter_id,
                    b.frame_index,
                    b.timestamp_ms
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for p in &self.points {
            w.serialize(p).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            });
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let expected = [
            "chapter_id",
            "frame_index",
            "timestamp_ms",
            "angle_deg",
            "speed_kmh",
        ];
        let headers = r.headers().map_err(|e| csv_err(path, e))?;
        if headers.iter().ne(expected) {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: format!(
                    "header {:?}, expected {expected:?}",
                    headers.iter().collect::<Vec<_>>()
                ),
            });
        }
        let points = r
            .deserialize()
            .collect::<std::result::Result<Vec<SeriesPoint>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { points })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> PredictionSeries {
        PredictionSeries {
            points: (0..4)
                .map(|i| SeriesPoint {
                    chapter_id: "route_00_ch000".into(),
                    frame_index: i,
                    timestamp_ms: i as i64 * 100,
                    angle_deg: (i > 0).then_some(i as f64 * 0.1 + 1e-13),
                    speed_kmh: (i > 0).then_some(30.0 / 7.0),
                })
                .collect(),
        }
    }

    #[test]
    fn csv_round_trip_keeps_absent_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let s = series();
        s.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("chapter_id,frame_index,timestamp_ms,angle_deg,speed_kmh\n"));
        assert!(text.contains("route_00_ch000,0,0,,\n"));
        assert_eq!(PredictionSeries::read_csv(&path).unwrap(), s);
        assert_eq!(s.n_present(), 3);
    }

    #[test]
    fn alignment() {
        let a = series();
        let mut b = series();
        assert!(a.check_aligned(&b).is_ok());
        b.points[2].timestamp_ms += 1;
        assert!(matches!(a.check_aligned(&b), Err(Error::Misaligned(_))));
        b.points.pop();
        assert!(a.check_aligned(&b).is_err());
    }

    #[test]
    fn bad_header_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(
            PredictionSeries::read_csv(&path),
            Err(Error::Integrity { .. })
        ));
    }
}
