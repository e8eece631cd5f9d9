//! Overall and per-zone mean squared error in raw units, plus the absolute
//! steering angle histogram.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::zone;
use crate::error::{Error, Result};
use crate::series::PredictionSeries;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub mse_angle: f64,
    pub mse_speed: f64,
    /// `mse_angle + mse_speed`.
    pub combined: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub mse_angle: f64,
    pub mse_speed: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Overall,
    pub per_zone: BTreeMap<String, ZoneMetrics>,
    pub n_samples: usize,
}

/// Sum in ascending order so the result does not depend on input order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Mean squared difference of equal-length nonempty slices.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Misaligned(format!(
            "{} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse of an empty series"));
    }
    let sq = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .collect();
    Ok(ordered_sum(sq) / pred.len() as f64)
}

fn overall(pairs: &[((f64, f64), (f64, f64))]) -> Result<Overall> {
    let (pa, ps): (Vec<f64>, Vec<f64>) = pairs.iter().map(|p| p.0).unzip();
    let (ta, ts): (Vec<f64>, Vec<f64>) = pairs.iter().map(|p| p.1).unzip();
    let mse_angle = mse(&pa, &ta)?;
    let mse_speed = mse(&ps, &ts)?;
    Ok(Overall {
        mse_angle,
        mse_speed,
        combined: mse_angle + mse_speed,
    })
}

/// Metrics over frames where both series carry values. Each tag's MSE covers
/// the frames carrying it; tags may overlap and tags with no scored frames are
/// omitted.
pub fn per_zone_report(
    pred: &PredictionSeries,
    truth: &PredictionSeries,
    zone_tags: &[BTreeSet<String>],
) -> Result<EvalReport> {
    pred.check_aligned(truth)?;
    if zone_tags.len() != pred.len() {
        return Err(Error::Misaligned(format!(
            "{} tag sets for {} frames",
            zone_tags.len(),
            pred.len()
        )));
    }
    let mut all = Vec::new();
    let mut by_zone: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for ((p, t), tags) in pred.points.iter().zip(&truth.points).zip(zone_tags) {
        if let (Some(pv), Some(tv)) = (p.value(), t.value()) {
            all.push((pv, tv));
            for tag in tags {
                by_zone.entry(tag).or_default().push((pv, tv));
            }
        }
    }
    if all.is_empty() {
        return Err(Error::invalid(
            "no frame carries both a prediction and a target",
        ));
    }
    let per_zone = by_zone
        .into_iter()
        .map(|(tag, pairs)| {
            let o = overall(&pairs)?;
            Ok((
                tag.to_string(),
                ZoneMetrics {
                    mse_angle: o.mse_angle,
                    mse_speed: o.mse_speed,
                    count: pairs.len(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        overall: overall(&all)?,
        per_zone,
        n_samples: all.len(),
    })
}

fn display_label(tag: &str) -> &str {
    if tag == zone::TRAFFIC_LIGHT {
        "Traffic Light"
    } else {
        tag
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Aligned plain-text table: one row per zone in vocabulary order, then
    /// any other tags alphabetically, then the overall row.
    pub fn to_table(&self) -> String {
        let mut tags: Vec<&str> = zone::ALL
            .iter()
            .copied()
            .filter(|t| self.per_zone.contains_key(*t))
            .collect();
        tags.extend(
            self.per_zone
                .keys()
                .map(String::as_str)
                .filter(|t| !zone::ALL.contains(t)),
        );
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>12} {:>12} {:>8}",
            "Zone", "MSE Angle", "MSE Speed", "Combined", "Count"
        );
        for tag in tags {
            let z = &self.per_zone[tag];
            let _ = writeln!(
                out,
                "{:<14} {:>12.3} {:>12.3} {:>12.3} {:>8}",
                display_label(tag),
                z.mse_angle,
                z.mse_speed,
                z.mse_angle + z.mse_speed,
                z.count
            );
        }
        let o = &self.overall;
        let _ = writeln!(
            out,
            "{:<14} {:>12.3} {:>12.3} {:>12.3} {:>8}",
            "Overall", o.mse_angle, o.mse_speed, o.combined, self.n_samples
        );
        out
    }
}

/// Counts of |angle| over bins of `bin_width_deg` covering [0, 180]; 180
/// itself falls in the last bin.
pub fn angle_histogram(values: &[f64], bin_width_deg: f64) -> Result<Vec<usize>> {
    if !(bin_width_deg > 0.0 && bin_width_deg <= 180.0) {
        return Err(Error::invalid(format!(
            "bin width must be in (0, 180], got {bin_width_deg}"
        )));
    }
    let n_bins = (180.0 / bin_width_deg).ceil() as usize;
    let mut counts = vec![0; n_bins];
    for &v in values {
        if !(v.abs() <= 180.0) {
            return Err(Error::OutOfRange(format!("angle {v} outside [-180, 180]")));
        }
        let k = ((v.abs() / bin_width_deg).floor() as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    Ok(counts)
}
