//! Prior-weighted and plain averaging of member prediction series.
//!
//! The prior-weighted rule weights each member's prediction by the training
//! histogram mass of the bin that prediction falls in, then normalizes over
//! members.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{PredictionSeries, SeriesPoint};

pub const ANGLE_BINS: usize = 100;
pub const SPEED_BINS: usize = 30;

/// Normalized histogram of training targets over evenly spaced bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinPrior {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
    pub probs: Vec<f64>,
}

impl BinPrior {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::invalid(format!(
                "prior bounds must satisfy lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.n_bins == 0 || self.probs.len() != self.n_bins {
            return Err(Error::invalid(format!(
                "prior has {} probabilities for {} bins",
                self.probs.len(),
                self.n_bins
            )));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("prior probabilities must be non-negative"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "prior probabilities sum to {total}"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let prior: Self = serde_json::from_str(&text).map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        prior.validate().map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(prior)
    }
}

/// Histogram of `values` over `n_bins` bins spanning their range.
pub fn build_prior(values: &[f64], n_bins: usize) -> Result<BinPrior> {
    if values.is_empty() {
        return Err(Error::invalid("cannot build a prior from no values"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("a prior needs at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("prior values must be finite"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + f64::EPSILON * lo.abs().max(1.0);
    }
    let mut prior = BinPrior {
        lo,
        hi,
        n_bins,
        probs: vec![0.0; n_bins],
    };
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        counts[bin_index(&prior, v)] += 1;
    }
    let n = values.len() as f64;
    prior.probs = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(prior)
}

/// `floor((v - lo) / width)` clamped to the valid bins.
pub fn bin_index(prior: &BinPrior, v: f64) -> usize {
    let k = ((v - prior.lo) / prior.width()).floor();
    if k.is_nan() || k < 0.0 {
        0
    } else {
        (k as usize).min(prior.n_bins - 1)
    }
}

/// Σ w_m·p_m / Σ w_m with w_m the prior mass of p_m's bin; the arithmetic
/// mean when every weight is zero. Members are summed in sorted order and the
/// result is clamped to their range, so the output does not depend on member
/// order and never leaves the members' interval.
pub fn prior_weighted_average(preds: &[f64], prior: &BinPrior) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("cannot average zero predictions"));
    }
    let mut sorted = preds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Ok(min);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &p in &sorted {
        let w = prior.probs[bin_index(prior, p)];
        num += w * p;
        den += w;
    }
    let v = if den > 0.0 {
        num / den
    } else {
        mean_sorted(&sorted)
    };
    Ok(v.clamp(min, max))
}

fn mean_sorted(sorted: &[f64]) -> f64 {
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

fn combine(
    series: &[PredictionSeries],
    f: impl Fn(&[f64], usize) -> Result<f64>,
) -> Result<PredictionSeries> {
    let first = series
        .first()
        .ok_or_else(|| Error::invalid("no member series"))?;
    for s in &series[1..] {
        first.check_aligned(s)?;
    }
    let points = (0..first.len())
        .map(|i| {
            let values: Option<Vec<(f64, f64)>> =
                series.iter().map(|s| s.points[i].value()).collect();
            let p = &first.points[i];
            let (angle_deg, speed_kmh) = match values {
                Some(v) => {
                    let a: Vec<f64> = v.iter().map(|x| x.0).collect();
                    let s: Vec<f64> = v.iter().map(|x| x.1).collect();
                    (Some(f(&a, 0)?), Some(f(&s, 1)?))
                }
                None => (None, None),
            };
            Ok(SeriesPoint {
                chapter_id: p.chapter_id.clone(),
                frame_index: p.frame_index,
                timestamp_ms: p.timestamp_ms,
                angle_deg,
                speed_kmh,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionSeries { points })
}

/// Element-wise mean of aligned series. A frame missing in any member is
/// missing in the result.
pub fn plain_average(series: &[PredictionSeries]) -> Result<PredictionSeries> {
    combine(series, |v, _| {
        let mut sorted = v.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        Ok(if min == max {
            min
        } else {
            mean_sorted(&sorted).clamp(min, max)
        })
    })
}

/// Per-frame prior-weighted average, angle and speed independently.
pub fn ensemble_series(
    series: &[PredictionSeries],
    angle_prior: &BinPrior,
    speed_prior: &BinPrior,
) -> Result<PredictionSeries> {
    angle_prior.validate()?;
    speed_prior.validate()?;
    combine(series, |v, target| {
        prior_weighted_average(
            v,
            if target == 0 {
                angle_prior
            } else {
                speed_prior
            },
        )
    })
}
