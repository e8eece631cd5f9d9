//! Dead-reckoning path reconstruction from steering angle and speed.
//!
//! Heading changes at a rate proportional to the steering angle; both inputs
//! are held constant over each time step (forward Euler, pre-step heading).

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicsConfig {
    /// Seconds between samples.
    pub dt: f64,
    /// Heading degrees per steering degree per second.
    pub gain_k: f64,
    /// Radians; 0 points along +x.
    pub initial_heading: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            gain_k: 1.0,
            initial_heading: 0.0,
        }
    }
}

impl KinematicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.gain_k > 0.0 && self.gain_k.is_finite()) {
            return Err(Error::invalid(format!(
                "gain_k must be positive, got {}",
                self.gain_k
            )));
        }
        if !self.initial_heading.is_finite() {
            return Err(Error::invalid("initial heading must be finite"));
        }
        Ok(())
    }
}

/// Positions in meters starting at the origin, one more than the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub points: Vec<(f64, f64)>,
    /// Heading in radians at each point.
    pub headings: Vec<f64>,
}

pub fn integrate_path(
    angles_deg: &[f64],
    speeds_kmh: &[f64],
    cfg: &KinematicsConfig,
) -> Result<Path> {
    cfg.validate()?;
    if angles_deg.len() != speeds_kmh.len() {
        return Err(Error::shape(
            "path inputs",
            angles_deg.len(),
            speeds_kmh.len(),
        ));
    }
    let n = angles_deg.len();
    let mut points = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    let (mut x, mut y, mut theta) = (0.0f64, 0.0f64, cfg.initial_heading);
    points.push((x, y));
    headings.push(theta);
    for (&a, &s) in angles_deg.iter().zip(speeds_kmh) {
        let step = s / 3.6 * cfg.dt;
        x += step * theta.cos();
        y += step * theta.sin();
        theta += (cfg.gain_k * a * cfg.dt).to_radians();
        points.push((x, y));
        headings.push(theta);
    }
    Ok(Path { points, headings })
}

/// Sum of segment lengths in meters.
pub fn path_length(path: &Path) -> f64 {
    path.points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .sum()
}

pub fn write_path_csv(path: &Path, out: &FsPath) -> Result<()> {
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_record(["step", "x_m", "y_m", "heading_rad"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for (i, (&(x, y), h)) in path.points.iter().zip(&path.headings).enumerate() {
        w.write_record([i.to_string(), x.to_string(), y.to_string(), h.to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

pub fn read_path_csv(src: &FsPath) -> Result<Path> {
    let mut r = csv::Reader::from_path(src).map_err(|e| Error::Load {
        path: src.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::Integrity {
        path: src.to_path_buf(),
        reason,
    };
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header != vec!["step", "x_m", "y_m", "heading_rad"] {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let (mut points, mut headings) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("{e}: {:?}", &rec[i])))
        };
        points.push((f(1)?, f(2)?));
        headings.push(f(3)?);
    }
    Ok(Path { points, headings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(dt: f64) -> KinematicsConfig {
        KinematicsConfig {
            dt,
            ..Default::default()
        }
    }

    #[test]
    fn straight_line_and_standstill() {
        let p = integrate_path(&[0.0; 10], &[36.0; 10], &cfg(0.1)).unwrap();
        assert_eq!(p.points.len(), 11);
        assert_eq!(p.points[0], (0.0, 0.0));
        assert!((p.points[10].0 - 10.0).abs() < 1e-12);
        assert!(p.points.iter().all(|q| q.1 == 0.0));
        assert!((path_length(&p) - 10.0).abs() < 1e-12);
        let still = integrate_path(&[25.0; 20], &[0.0; 20], &cfg(0.1)).unwrap();
        assert!(still.points.iter().all(|&q| q == (0.0, 0.0)));
        let empty = integrate_path(&[], &[], &cfg(0.1)).unwrap();
        assert_eq!(empty.points, vec![(0.0, 0.0)]);
        assert_eq!(path_length(&empty), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(integrate_path(&[0.0; 3], &[1.0; 2], &cfg(0.1)).is_err());
        assert!(integrate_path(&[0.0], &[1.0], &cfg(0.0)).is_err());
        let neg = KinematicsConfig {
            gain_k: -1.0,
            ..Default::default()
        };
        assert!(integrate_path(&[0.0], &[1.0], &neg).is_err());
    }

    /// Largest distance from the analytic circle of radius v/ω centred at
    /// (0, R) over one full revolution.
    fn circle_deviation(dt: f64) -> f64 {
        let omega = 10f64.to_radians();
        let radius = 10.0 / omega;
        let steps = (36.0 / dt).round() as usize;
        let p = integrate_path(&vec![10.0; steps], &vec![36.0; steps], &cfg(dt)).unwrap();
        p.points
            .iter()
            .map(|&(x, y)| (x.hypot(y - radius) - radius).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_turn_follows_circle_with_first_order_error() {
        let radius = 10.0 / 10f64.to_radians();
        assert!((radius - 57.2958).abs() < 1e-4);
        let d: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| circle_deviation(dt))
            .collect();
        assert!(d[0] < 0.01 * radius, "{d:?}");
        for w in d.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}, {d:?}");
        }
    }

    #[test]
    fn path_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("path.csv");
        let p = integrate_path(&[1.0, -2.5, 7.0], &[30.0, 31.0, 29.5], &cfg(0.1)).unwrap();
        write_path_csv(&p, &file).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        assert!(text.starts_with("step,x_m,y_m,heading_rad\n0,0,0,0\n"));
        assert_eq!(read_path_csv(&file).unwrap(), p);
    }

    fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (0usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec(-180.0f64..180.0, n),
                prop::collection::vec(0.0f64..130.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn length_depends_only_on_speed((angles, speeds) in inputs(), dt in 0.01f64..0.5) {
            let p = integrate_path(&angles, &speeds, &cfg(dt)).unwrap();
            let expected: f64 = speeds.iter().map(|s| s / 3.6 * dt).sum();
            prop_assert!((path_length(&p) - expected).abs() <= 1e-9 * expected.max(1.0));
        }

        #[test]
        fn mirror_symmetry((angles, speeds) in inputs()) {
            let p = integrate_path(&angles, &speeds, &cfg(0.1)).unwrap();
            let neg: Vec<f64> = angles.iter().map(|a| -a).collect();
            let m = integrate_path(&neg, &speeds, &cfg(0.1)).unwrap();
            for (a, b) in p.points.iter().zip(&m.points) {
                prop_assert_eq!(a.0, b.0);
                prop_assert_eq!(a.1, -b.1);
            }
        }

        #[test]
        fn rotation_equivariance((angles, speeds) in inputs(), phi in -3.0f64..3.0) {
            let p = integrate_path(&angles, &speeds, &cfg(0.1)).unwrap();
            let rotated = KinematicsConfig { initial_heading: phi, ..cfg(0.1) };
            let r = integrate_path(&angles, &speeds, &rotated).unwrap();
            let (s, c) = phi.sin_cos();
            for (a, b) in p.points.iter().zip(&r.points) {
                prop_assert!((a.0 * c - a.1 * s - b.0).abs() <= 1e-9);
                prop_assert!((a.0 * s + a.1 * c - b.1).abs() <= 1e-9);
            }
        }
    }
}
