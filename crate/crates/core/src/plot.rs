//! Static SVG charts: prediction overlays, driven paths, the absolute angle
//! histogram and training curves.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use crate::error::{Error, Result};
use crate::series::PredictionSeries;
use crate::trainer::EpochRecord;
use crate::trajectory::Path;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;

/// A labelled polyline in data coordinates.
pub struct Curve<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Roughly `n` round tick values covering [lo, hi].
fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / n.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{:.3}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.04 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn bounds<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Option<((f64, f64), (f64, f64))> {
    let mut b: Option<((f64, f64), (f64, f64))> = None;
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        b = Some(match b {
            None => ((x, x), (y, y)),
            Some(((x0, x1), (y0, y1))) => ((x0.min(x), x1.max(x)), (y0.min(y), y1.max(y))),
        });
    }
    b
}

/// One chart panel placed at a vertical offset inside a document.
struct Panel {
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x.0) / (self.x.1 - self.x.0) * (self.width - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height
            - MARGIN_B
            - (y - self.y.0) / (self.y.1 - self.y.0) * (self.height - MARGIN_T - MARGIN_B)
    }

    fn frame(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, r) = (MARGIN_L, self.width - MARGIN_R);
        let (t, b) = (self.top + MARGIN_T, self.top + self.height - MARGIN_B);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="15">{}</text>"#,
            (l + r) / 2.0,
            self.top + 20.0,
            escape(title)
        );
        for v in ticks(self.x.0, self.x.1, 8) {
            let x = self.px(v);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.1}" y1="{t:.1}" x2="{x:.1}" y2="{b:.1}" stroke="#e5e5e5"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"##,
                b + 15.0,
                fmt_tick(v)
            );
        }
        for v in ticks(self.y.0, self.y.1, 6) {
            let y = self.py(v);
            let _ = writeln!(
                out,
                r##"<line x1="{l:.1}" y1="{y:.1}" x2="{r:.1}" y2="{y:.1}" stroke="#e5e5e5"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##,
                l - 5.0,
                y + 4.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            out,
            r##"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##,
            r - l,
            b - t
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            (l + r) / 2.0,
            b + 34.0,
            escape(x_label)
        );
        let (cx, cy) = (16.0, (t + b) / 2.0);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{cy:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {cx:.1} {cy:.1})">{}</text>"#,
            escape(y_label)
        );
    }

    fn curves(&self, out: &mut String, curves: &[Curve]) {
        for (i, c) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            // break the line wherever a value is missing
            let mut d = String::new();
            let mut pen_down = false;
            for &(x, y) in &c.points {
                if x.is_finite() && y.is_finite() {
                    let _ = write!(
                        d,
                        "{}{:.2},{:.2} ",
                        if pen_down { "L" } else { "M" },
                        self.px(x),
                        self.py(y)
                    );
                    pen_down = true;
                } else {
                    pen_down = false;
                }
            }
            let _ = writeln!(
                out,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.3"/>"#,
                d.trim_end()
            );
            let (lx, ly) = (
                MARGIN_L + 10.0,
                self.top + MARGIN_T + 16.0 + 16.0 * i as f64,
            );
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2.5"/><text x="{:.1}" y="{ly:.1}" font-size="12">{}</text>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0,
                lx + 24.0,
                escape(c.label)
            );
        }
    }
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Single-panel line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, curves: &[Curve]) -> Result<String> {
    let ((x0, x1), (y0, y1)) = bounds(curves.iter().flat_map(|c| &c.points))
        .ok_or_else(|| Error::invalid("nothing to plot"))?;
    let panel = Panel {
        top: 0.0,
        width: 900.0,
        height: 420.0,
        x: padded(x0, x1),
        y: padded(y0, y1),
    };
    let mut body = String::new();
    panel.frame(&mut body, title, x_label, y_label);
    panel.curves(&mut body, curves);
    Ok(document(panel.width, panel.height, &body))
}

/// Truth and prediction over time, one panel per target.
pub fn predictions_svg(pred: &PredictionSeries, truth: &PredictionSeries) -> Result<String> {
    pred.check_aligned(truth)?;
    if pred.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let t0 = truth.points[0].timestamp_ms as f64;
    let x = |i: usize| (truth.points[i].timestamp_ms as f64 - t0) / 1000.0;
    let series = |s: &PredictionSeries, angle: bool| -> Vec<(f64, f64)> {
        s.points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    x(i),
                    (if angle { p.angle_deg } else { p.speed_kmh }).unwrap_or(f64::NAN),
                )
            })
            .collect()
    };
    let mut body = String::new();
    for (k, (angle, title, unit)) in [
        (true, "Steering angle", "angle (deg)"),
        (false, "Speed", "speed (km/h)"),
    ]
    .into_iter()
    .enumerate()
    {
        let curves = [
            Curve {
                label: "truth",
                points: series(truth, angle),
            },
            Curve {
                label: "prediction",
                points: series(pred, angle),
            },
        ];
        let ((x0, x1), (y0, y1)) =
            bounds(curves.iter().flat_map(|c| &c.points)).unwrap_or(((0.0, 1.0), (0.0, 1.0)));
        let panel = Panel {
            top: 400.0 * k as f64,
            width: 900.0,
            height: 400.0,
            x: padded(x0, x1),
            y: padded(y0, y1),
        };
        panel.frame(&mut body, title, "time (s)", unit);
        panel.curves(&mut body, &curves);
    }
    Ok(document(900.0, 800.0, &body))
}

/// Driven paths in kilometers with equal scale on both axes.
pub fn path_svg(paths: &[(&str, &Path)]) -> Result<String> {
    let km: Vec<Curve> = paths
        .iter()
        .map(|(label, p)| Curve {
            label,
            points: p
                .points
                .iter()
                .map(|&(x, y)| (x / 1000.0, y / 1000.0))
                .collect(),
        })
        .collect();
    let ((x0, x1), (y0, y1)) = bounds(km.iter().flat_map(|c| &c.points))
        .ok_or_else(|| Error::invalid("nothing to plot"))?;
    let size = 640.0;
    let plot = size - MARGIN_L - MARGIN_R;
    let plot_h = size - MARGIN_T - MARGIN_B;
    // a common span keeps one kilometer the same length on both axes
    let span = ((x1 - x0).max(y1 - y0) * 1.08).max(0.01);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let sx = span;
    let sy = span * plot_h / plot;
    let panel = Panel {
        top: 0.0,
        width: size,
        height: size,
        x: (cx - sx / 2.0, cx + sx / 2.0),
        y: (cy - sy / 2.0, cy + sy / 2.0),
    };
    let mut body = String::new();
    panel.frame(&mut body, "Driven path", "x (km)", "y (km)");
    panel.curves(&mut body, &km);
    Ok(document(size, size, &body))
}

/// Bar chart of absolute angle counts.
pub fn histogram_svg(counts: &[usize], bin_width_deg: f64) -> Result<String> {
    if counts.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let panel = Panel {
        top: 0.0,
        width: 900.0,
        height: 420.0,
        x: (0.0, bin_width_deg * counts.len() as f64),
        y: (0.0, top * 1.05),
    };
    let mut body = String::new();
    panel.frame(
        &mut body,
        "Absolute steering angle",
        "|angle| (deg)",
        "count",
    );
    for (i, &c) in counts.iter().enumerate() {
        let (xa, xb) = (
            panel.px(i as f64 * bin_width_deg),
            panel.px((i + 1) as f64 * bin_width_deg),
        );
        let (ya, yb) = (panel.py(c as f64), panel.py(0.0));
        let _ = writeln!(
            body,
            r#"<rect x="{:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            xa + 0.5,
            (xb - xa - 1.0).max(0.5),
            yb - ya,
            PALETTE[0]
        );
    }
    Ok(document(panel.width, panel.height, &body))
}

/// Training loss per epoch, with validation MSE in a second panel.
pub fn loss_svg(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(Error::invalid("empty training history"));
    }
    let epoch = |r: &EpochRecord| r.epoch as f64 + 1.0;
    let panels = [
        (
            "Training loss",
            "loss (normalized units)",
            vec![Curve {
                label: "train loss",
                points: history.iter().map(|r| (epoch(r), r.train_loss)).collect(),
            }],
        ),
        (
            "Validation MSE",
            "MSE",
            vec![
                Curve {
                    label: "angle (deg²)",
                    points: history
                        .iter()
                        .map(|r| (epoch(r), r.val_angle_mse))
                        .collect(),
                },
                Curve {
                    label: "speed ((km/h)²)",
                    points: history
                        .iter()
                        .map(|r| (epoch(r), r.val_speed_mse))
                        .collect(),
                },
            ],
        ),
    ];
    let mut body = String::new();
    for (k, (title, unit, curves)) in panels.iter().enumerate() {
        let ((x0, x1), (y0, y1)) =
            bounds(curves.iter().flat_map(|c| &c.points)).unwrap_or(((0.0, 1.0), (0.0, 1.0)));
        let panel = Panel {
            top: 380.0 * k as f64,
            width: 900.0,
            height: 380.0,
            x: padded(x0, x1),
            y: padded(y0.min(0.0), y1),
        };
        panel.frame(&mut body, title, "epoch", unit);
        panel.curves(&mut body, curves);
    }
    Ok(document(900.0, 760.0, &body))
}

pub fn write_svg(svg: &str, path: &FsPath) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
