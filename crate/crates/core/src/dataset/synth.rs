//! Procedural stand-in for a recorded driving corpus.
//!
//! Each chapter is a kinematic vehicle simulation (bicycle model) driven by a
//! band-limited random steering process and a speed controller that reacts
//! to speed-limit zones, curves, traffic lights, yield signs and occupied
//! pedestrian crossings. Frames are rendered from the simulated future path
//! with a pinhole camera, so the segmentation mask is exact by construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{
    split_chapters, write_chapter, write_manifest, zone, Chapter, ChapterEntry, DatasetManifest,
    FrameRecord, SemanticRecord, Split, SplitOptions, FRAME_INTERVAL_MS, N_SEMANTIC,
};
use crate::error::{Error, Result};

const DT: f64 = FRAME_INTERVAL_MS as f64 / 1000.0;
const WHEELBASE_M: f64 = 2.7;
const STEERING_RATIO: f64 = 15.0;
const CAMERA_HEIGHT_M: f64 = 1.4;
const LOOKAHEAD_M: f64 = 80.0;
/// Extra simulated frames past the chapter end so the last frames still
/// have a future path to render.
const TAIL_FRAMES: usize = 400;
const EVENT_TAG_DISTANCE_M: f64 = 30.0;
const MAP_HORIZON_M: f64 = 500.0;

// Segmentation class ids, see `SEG_CLASSES`.
const C_ROAD: u8 = 0;
const C_SIDEWALK: u8 = 1;
const C_BUILDING: u8 = 2;
const C_FENCE: u8 = 4;
const C_POLE: u8 = 5;
const C_TRAFFIC_LIGHT: u8 = 6;
const C_TRAFFIC_SIGN: u8 = 7;
const C_VEGETATION: u8 = 8;
const C_TERRAIN: u8 = 9;
const C_SKY: u8 = 10;
const C_PERSON: u8 = 11;
const C_CAR: u8 = 13;
const C_LANE: u8 = 19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_routes: usize,
    pub chapters_per_route: usize,
    pub frames_per_chapter: usize,
    /// (width, height), must be 16:9.
    pub resolution: (u32, u32),
    pub seed: u64,
    #[serde(default = "default_max_step")]
    pub max_angle_step: f64,
    #[serde(default = "default_classes")]
    pub n_seg_classes: usize,
    /// Chapter split fractions (train, validation, test).
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default = "default_true")]
    pub with_map: bool,
}

fn default_max_step() -> f64 {
    5.0
}
fn default_classes() -> usize {
    super::N_SEG_CLASSES
}
fn default_split() -> (f64, f64, f64) {
    (548.0 / 682.0, 36.0 / 682.0, 98.0 / 682.0)
}
fn default_true() -> bool {
    true
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_routes: 4,
            chapters_per_route: 4,
            frames_per_chapter: 300,
            resolution: (160, 90),
            seed: 7,
            max_angle_step: default_max_step(),
            n_seg_classes: default_classes(),
            split: default_split(),
            with_map: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_chapter < 12 {
            return Err(Error::invalid(format!(
                "frames_per_chapter must be at least 12, got {}",
                self.frames_per_chapter
            )));
        }
        let (w, h) = self.resolution;
        if w == 0 || h == 0 || w as u64 * 9 != h as u64 * 16 {
            return Err(Error::invalid(format!("resolution {w}x{h} is not 16:9")));
        }
        if self.n_routes == 0 || self.chapters_per_route == 0 {
            return Err(Error::invalid("need at least one route and chapter"));
        }
        if self.n_seg_classes < 20 || self.n_seg_classes > 255 {
            return Err(Error::invalid("n_seg_classes must lie in [20, 255]"));
        }
        if self.max_angle_step <= 0.0 {
            return Err(Error::invalid("max_angle_step must be positive"));
        }
        Ok(())
    }

    pub fn chapter_id(route: usize, chapter: usize) -> String {
        format!("route_{route:02}_ch{chapter:03}")
    }

    pub fn route_id(route: usize) -> String {
        format!("route_{route:02}")
    }
}

/// Generates the dataset under `root` and returns its manifest.
pub fn generate_synthetic(
    config: &GenConfig,
    root: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    config.validate()?;
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        if !overwrite {
            return Err(Error::AlreadyExists(manifest_path));
        }
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::new();
    for route in 0..config.n_routes {
        for ch in 0..config.chapters_per_route {
            let chapter = simulate_chapter(config, route, ch);
            write_chapter(root, &chapter)?;
            entries.push(ChapterEntry {
                chapter_id: chapter.chapter_id.clone(),
                route_id: chapter.route_id.clone(),
                split: Split::Train,
                frame_count: chapter.frames.len(),
            });
        }
    }
    let manifest = DatasetManifest {
        root_path: root.to_path_buf(),
        chapters: entries,
        resolution: config.resolution,
        n_seg_classes: config.n_seg_classes,
        seed: config.seed,
        frame_stride: 1,
    };
    let allow_empty = config.split.1 == 0.0 || config.split.2 == 0.0;
    let manifest = split_chapters(
        &manifest,
        config.split,
        config.seed,
        SplitOptions { allow_empty },
    )?;
    write_manifest(&manifest, root)?;
    Ok(manifest)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct RouteProfile {
    /// 0 urban, 1 suburban, 2 highway.
    kind: usize,
    speed_factor: f64,
    brightness: f64,
}

impl RouteProfile {
    fn new(seed: u64, route: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, route as u64, 0xA11CE));
        Self {
            kind: route % 3,
            speed_factor: rng.random_range(0.85..1.0),
            brightness: rng.random_range(0.85..1.1),
        }
    }

    fn draw_limit(&self, rng: &mut ChaCha8Rng) -> f64 {
        let weights = match self.kind {
            0 => [0.6, 0.3, 0.1],
            1 => [0.25, 0.5, 0.25],
            _ => [0.1, 0.25, 0.65],
        };
        let u: f64 = rng.random();
        if u < weights[0] {
            30.0
        } else if u < weights[0] + weights[1] {
            50.0
        } else {
            80.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EventKind {
    Signal,
    Yield,
    Crossing,
    Intersection,
}

const EVENT_KINDS: [EventKind; 4] = [
    EventKind::Signal,
    EventKind::Yield,
    EventKind::Crossing,
    EventKind::Intersection,
];

impl EventKind {
    fn mean_spacing_m(self, limit: f64) -> f64 {
        let z = if limit <= 40.0 {
            0
        } else if limit <= 65.0 {
            1
        } else {
            2
        };
        match self {
            EventKind::Signal => [150.0, 350.0, 1500.0][z],
            EventKind::Yield => [200.0, 400.0, 2000.0][z],
            EventKind::Crossing => [120.0, 300.0, 3000.0][z],
            EventKind::Intersection => [100.0, 250.0, 1000.0][z],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Event {
    at_s: f64,
    /// Frames the vehicle must wait at a red light or occupied crossing.
    blocking_frames: u32,
}

impl Event {
    fn spawn(kind: EventKind, s: f64, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        let gap = Exp::new(1.0 / kind.mean_spacing_m(limit))
            .unwrap()
            .sample(rng)
            + 25.0;
        let blocking_frames = match kind {
            EventKind::Signal if rng.random::<f64>() < 0.5 => rng.random_range(20..60),
            EventKind::Crossing if rng.random::<f64>() < 0.4 => rng.random_range(10..35),
            _ => 0,
        };
        Self {
            at_s: s + gap,
            blocking_frames,
        }
    }
}

/// Simulator state recorded once per frame (before the update).
#[derive(Clone, Debug)]
struct Sample {
    x: f64,
    y: f64,
    heading: f64,
    s: f64,
    angle: f64,
    speed: f64,
    limit: f64,
    next_limit: f64,
    zone_left: usize,
    /// Distance ahead per event kind, plus whether that event blocks.
    events: [(f64, bool); 4],
    lead: Option<f64>,
    road_index: u32,
    density: f64,
}

fn half_width(limit: f64) -> f64 {
    if limit <= 40.0 {
        3.0
    } else if limit <= 65.0 {
        3.5
    } else {
        5.0
    }
}

fn simulate(config: &GenConfig, profile: RouteProfile, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let total = config.frames_per_chapter + TAIL_FRAMES;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut limit = profile.draw_limit(rng);
    let mut next_limit = profile.draw_limit(rng);
    let mut zone_left: usize = rng.random_range(100..400);
    let (mut x, mut y) = (0.0, 0.0);
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut s = 0.0;
    let mut angle: f64 = 0.0;
    let mut speed = limit * profile.speed_factor * rng.random_range(0.5..1.0);
    let mut target_angle = 0.0;
    let mut seg_left = 0usize;
    let mut events: Vec<Event> = EVENT_KINDS
        .iter()
        .map(|k| Event::spawn(*k, s, limit, rng))
        .collect();
    let mut lead: Option<f64> = None;
    let mut road_index = 0u32;
    let mut density: f64 = rng.random_range(0.1..0.9);
    let max_step = config.max_angle_step;

    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        if zone_left == 0 {
            limit = next_limit;
            next_limit = profile.draw_limit(rng);
            zone_left = rng.random_range(150..400);
        }
        zone_left -= 1;

        if seg_left == 0 {
            let p_straight = if limit <= 40.0 {
                0.4
            } else if limit <= 65.0 {
                0.5
            } else {
                0.7
            };
            target_angle = if rng.random::<f64>() < p_straight {
                1.5 * noise.sample(rng)
            } else {
                let mean = if limit <= 40.0 {
                    45.0
                } else if limit <= 65.0 {
                    25.0
                } else {
                    6.0
                };
                let mag: f64 = Exp::new(1.0 / mean).unwrap().sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * mag.min(170.0)
            };
            seg_left = rng.random_range(20..60);
        }
        seg_left -= 1;

        for (k, ev) in events.iter_mut().enumerate() {
            if ev.at_s - s < 0.0 {
                if EVENT_KINDS[k] == EventKind::Intersection {
                    road_index += 1;
                }
                *ev = Event::spawn(EVENT_KINDS[k], s, limit, rng);
            }
        }

        lead = match lead {
            Some(d) if rng.random::<f64>() < 0.01 => {
                let _ = d;
                None
            }
            Some(d) => Some((d + 0.3 * noise.sample(rng)).clamp(8.0, 60.0)),
            None if rng.random::<f64>() < 0.01 * density => Some(rng.random_range(15.0..50.0)),
            None => None,
        };
        density = (density + 0.005 * noise.sample(rng)).clamp(0.0, 1.0);

        let mut ev_state = [(0.0, false); 4];
        for (k, ev) in events.iter().enumerate() {
            ev_state[k] = (ev.at_s - s, ev.blocking_frames > 0);
        }
        out.push(Sample {
            x,
            y,
            heading,
            s,
            angle,
            speed,
            limit,
            next_limit,
            zone_left,
            events: ev_state,
            lead,
            road_index,
            density,
        });

        // speed controller
        let mut target_speed =
            limit * profile.speed_factor * (1.0 - 0.45 * (angle.abs() / 60.0).min(1.0));
        let stop_profile = |d: f64| 3.6 * (2.0 * 2.0 * (d - 4.0).max(0.0)).sqrt();
        for (k, ev) in events.iter().enumerate() {
            let d = ev.at_s - s;
            match EVENT_KINDS[k] {
                EventKind::Signal | EventKind::Crossing if ev.blocking_frames > 0 && d < 70.0 => {
                    target_speed = target_speed.min(stop_profile(d));
                }
                EventKind::Yield if d < 25.0 => target_speed = target_speed.min(20.0 + d),
                _ => {}
            }
        }
        let accel = (target_speed - speed).clamp(-0.9, 0.35) + 0.05 * noise.sample(rng);
        speed = (speed + accel).clamp(0.0, 160.0);
        for (k, ev) in events.iter_mut().enumerate() {
            let d = ev.at_s - s;
            if matches!(EVENT_KINDS[k], EventKind::Signal | EventKind::Crossing)
                && ev.blocking_frames > 0
                && d < 8.0
                && speed < 3.0
            {
                ev.blocking_frames -= 1;
            }
        }

        let step =
            (0.15 * (target_angle - angle) + 0.3 * noise.sample(rng)).clamp(-max_step, max_step);
        angle = (angle + step).clamp(-180.0, 180.0);

        let v = speed / 3.6;
        let delta = (angle / STEERING_RATIO).to_radians();
        // positive steering turns right, i.e. clockwise
        heading -= v * delta.tan() / WHEELBASE_M * DT;
        x += v * heading.cos() * DT;
        y += v * heading.sin() * DT;
        s += v * DT;
    }
    out
}

/// A point of the future path in the vehicle frame: forward, left, arc length.
#[derive(Clone, Copy, Debug)]
struct PathPoint {
    fwd: f64,
    left: f64,
    arc: f64,
}

fn future_path(samples: &[Sample], t: usize) -> Vec<PathPoint> {
    let o = &samples[t];
    let (c, sn) = (o.heading.cos(), o.heading.sin());
    let mut pts = vec![PathPoint {
        fwd: 0.0,
        left: 0.0,
        arc: 0.0,
    }];
    let mut last_dir = 0.0;
    for p in &samples[t + 1..] {
        let arc = p.s - o.s;
        if arc > LOOKAHEAD_M {
            break;
        }
        let (dx, dy) = (p.x - o.x, p.y - o.y);
        let fwd = dx * c + dy * sn;
        let left = -dx * sn + dy * c;
        if fwd <= pts.last().unwrap().fwd + 1e-3 {
            if arc > pts.last().unwrap().arc + 1e-3 && fwd < pts.last().unwrap().fwd {
                break;
            }
            continue;
        }
        last_dir = p.heading - o.heading;
        pts.push(PathPoint { fwd, left, arc });
    }
    // extend straight along the last heading up to the lookahead
    let (dc, ds) = (last_dir.cos(), last_dir.sin());
    if dc > 0.2 {
        while pts.last().unwrap().arc < LOOKAHEAD_M * 1.5 {
            let l = *pts.last().unwrap();
            pts.push(PathPoint {
                fwd: l.fwd + 2.0 * dc,
                left: l.left + 2.0 * ds,
                arc: l.arc + 2.0,
            });
        }
    }
    pts
}

fn lateral_at(pts: &[PathPoint], fwd: f64) -> f64 {
    match pts.iter().position(|p| p.fwd >= fwd) {
        Some(0) => pts[0].left,
        Some(i) => {
            let (a, b) = (pts[i - 1], pts[i]);
            let t = (fwd - a.fwd) / (b.fwd - a.fwd);
            a.left + t * (b.left - a.left)
        }
        None => {
            let n = pts.len();
            if n < 2 {
                return pts[n - 1].left;
            }
            let (a, b) = (pts[n - 2], pts[n - 1]);
            let slope = (b.left - a.left) / (b.fwd - a.fwd);
            b.left + slope * (fwd - b.fwd)
        }
    }
}

fn point_at_arc(pts: &[PathPoint], arc: f64) -> Option<PathPoint> {
    let i = pts.iter().position(|p| p.arc >= arc)?;
    if i == 0 {
        return Some(pts[0]);
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let t = (arc - a.arc) / (b.arc - a.arc).max(1e-9);
    Some(PathPoint {
        fwd: a.fwd + t * (b.fwd - a.fwd),
        left: a.left + t * (b.left - a.left),
        arc,
    })
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<[f64; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            rgb: vec![[0.0; 3]; w * h],
            mask: vec![0; w * h],
        }
    }

    fn put(&mut self, r: isize, c: isize, color: [f64; 3], class: u8) {
        if r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w {
            let i = r as usize * self.w + c as usize;
            self.rgb[i] = color;
            self.mask[i] = class;
        }
    }

    fn rect(&mut self, top: f64, bottom: f64, left: f64, right: f64, color: [f64; 3], class: u8) {
        let r0 = top.floor().max(0.0) as isize;
        let r1 = bottom.ceil().min(self.h as f64) as isize;
        let c0 = left.floor().max(0.0) as isize;
        let c1 = right.ceil().min(self.w as f64) as isize;
        for r in r0..r1 {
            for c in c0..c1 {
                self.put(r, c, color, class);
            }
        }
    }

    fn disc(&mut self, cy: f64, cx: f64, radius: f64, color: [f64; 3], class: u8) {
        let r = radius.max(0.5);
        for y in (cy - r).floor() as isize..=(cy + r).ceil() as isize {
            for x in (cx - r).floor() as isize..=(cx + r).ceil() as isize {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    self.put(y, x, color, class);
                }
            }
        }
    }

    fn finish(self, brightness: f64, rng: &mut ChaCha8Rng) -> (Array3<u8>, Array2<u8>) {
        let noise = Normal::new(0.0, 0.015).unwrap();
        let mut img = Array3::<u8>::zeros((self.h, self.w, 3));
        for (i, px) in self.rgb.iter().enumerate() {
            let (r, c) = (i / self.w, i % self.w);
            for k in 0..3 {
                let v = (px[k] * brightness + noise.sample(rng)).clamp(0.0, 1.0);
                img[[r, c, k]] = (v * 255.0).round() as u8;
            }
        }
        let mask = Array2::from_shape_vec((self.h, self.w), self.mask).unwrap();
        (img, mask)
    }
}

struct Camera {
    w: f64,
    horizon: f64,
    focal: f64,
}

impl Camera {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w: w as f64,
            horizon: 0.42 * h as f64,
            focal: 0.75 * w as f64,
        }
    }

    fn col(&self, fwd: f64, left: f64) -> f64 {
        self.w / 2.0 - self.focal * left / fwd
    }

    /// Image row of a point at `height` metres above the road.
    fn row(&self, fwd: f64, height: f64) -> f64 {
        self.horizon + self.focal * (CAMERA_HEIGHT_M - height) / fwd
    }
}

fn building_height(key: u64) -> f64 {
    (mix_seed(key, 17, 3) % 1000) as f64 / 1000.0
}

fn render_front(
    samples: &[Sample],
    t: usize,
    size: (usize, usize),
    profile: RouteProfile,
    chapter_key: u64,
    rng: &mut ChaCha8Rng,
) -> (Array3<u8>, Array2<u8>) {
    let (w, h) = size;
    let cam = Camera::new(w, h);
    let o = &samples[t];
    let pts = future_path(samples, t);
    let hw = half_width(o.limit);
    let mut cv = Canvas::new(w, h);
    let zone_kind = if o.limit <= 40.0 {
        0
    } else if o.limit <= 65.0 {
        1
    } else {
        2
    };

    // sky and skyline
    for r in 0..h {
        let rf = r as f64 + 0.5;
        if rf > cam.horizon {
            break;
        }
        let tint = 0.15 * rf / cam.horizon;
        for c in 0..w {
            cv.put(
                r as isize,
                c as isize,
                [0.55 + tint, 0.7 + tint, 0.95],
                C_SKY,
            );
        }
    }
    let pan = (o.heading.to_degrees() * 2.0) as i64;
    for c in 0..w {
        let key = ((c as i64 + pan).div_euclid(6)) as u64 ^ chapter_key;
        let (height, color, class) = match zone_kind {
            0 => (
                0.35 * cam.horizon * (0.3 + building_height(key)),
                [0.55, 0.5, 0.48],
                C_BUILDING,
            ),
            1 => (
                0.12 * cam.horizon * (0.5 + building_height(key)),
                [0.3, 0.45, 0.25],
                C_VEGETATION,
            ),
            _ => (0.05 * cam.horizon, [0.25, 0.4, 0.25], C_VEGETATION),
        };
        let top = (cam.horizon - height).max(0.0);
        cv.rect(top, cam.horizon, c as f64, c as f64 + 1.0, color, class);
    }

    // ground, road and markings
    for r in 0..h {
        let rf = r as f64 + 0.5;
        if rf <= cam.horizon {
            continue;
        }
        let fwd = cam.focal * CAMERA_HEIGHT_M / (rf - cam.horizon);
        let center = cam.col(fwd, lateral_at(&pts, fwd));
        let half = cam.focal * hw / fwd;
        let line = (cam.focal * 0.15 / fwd).max(0.6);
        let dashed = (o.s + fwd).rem_euclid(6.0) < 3.0;
        for c in 0..w {
            let off = (c as f64 + 0.5 - center).abs();
            let (color, class) = if off <= half {
                if off >= half - line || (dashed && off <= line / 2.0) {
                    ([0.92, 0.92, 0.9], C_LANE)
                } else {
                    ([0.33, 0.33, 0.35], C_ROAD)
                }
            } else {
                match zone_kind {
                    0 if off <= half * 1.6 => ([0.62, 0.6, 0.56], C_SIDEWALK),
                    0 => ([0.48, 0.47, 0.45], C_BUILDING),
                    1 => ([0.47, 0.43, 0.3], C_TERRAIN),
                    _ if off <= half * 1.25 => ([0.6, 0.6, 0.62], C_FENCE),
                    _ => ([0.22, 0.5, 0.2], C_VEGETATION),
                }
            };
            cv.put(r as isize, c as isize, color, class);
        }
    }

    // objects, far to near
    let mut objects: Vec<(f64, usize)> = Vec::new();
    for (k, (d, _)) in o.events.iter().enumerate() {
        if EVENT_KINDS[k] != EventKind::Intersection && *d > 3.0 && *d < 60.0 {
            objects.push((*d, k));
        }
    }
    if let Some(d) = o.lead {
        objects.push((d, 99));
    }
    objects.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (d, k) in objects {
        let Some(p) = point_at_arc(&pts, d) else {
            continue;
        };
        if p.fwd < 2.0 {
            continue;
        }
        let scale = cam.focal / p.fwd;
        if k == 99 {
            let col = cam.col(p.fwd, p.left);
            cv.rect(
                cam.row(p.fwd, 1.4),
                cam.row(p.fwd, 0.0),
                col - 0.9 * scale,
                col + 0.9 * scale,
                [0.45, 0.1, 0.12],
                C_CAR,
            );
            continue;
        }
        let (_, blocking) = o.events[k];
        let side = p.left - (hw + 1.0);
        let col = cam.col(p.fwd, side);
        let pole = (0.15 * scale).max(1.0);
        cv.rect(
            cam.row(p.fwd, 2.6),
            cam.row(p.fwd, 0.0),
            col - pole / 2.0,
            col + pole / 2.0,
            [0.3, 0.3, 0.3],
            C_POLE,
        );
        let head = (0.35 * scale).max(1.0);
        let top = cam.row(p.fwd, 2.6);
        match EVENT_KINDS[k] {
            EventKind::Signal => {
                let color = if blocking {
                    [0.9, 0.1, 0.1]
                } else {
                    [0.1, 0.85, 0.2]
                };
                cv.rect(
                    top - 2.0 * head,
                    top,
                    col - head / 2.0,
                    col + head / 2.0,
                    [0.1, 0.1, 0.1],
                    C_TRAFFIC_LIGHT,
                );
                cv.disc(top - head, col, head * 0.4, color, C_TRAFFIC_LIGHT);
            }
            EventKind::Yield => {
                cv.rect(
                    top - head,
                    top,
                    col - head,
                    col + head,
                    [0.95, 0.85, 0.1],
                    C_TRAFFIC_SIGN,
                );
            }
            EventKind::Crossing => {
                cv.rect(
                    top - head,
                    top,
                    col - head,
                    col + head,
                    [0.15, 0.35, 0.85],
                    C_TRAFFIC_SIGN,
                );
                // zebra stripes across the road
                for stripe in 0..4 {
                    let lat = p.left - hw + (stripe as f64 + 0.25) * hw / 2.0;
                    let c0 = cam.col(p.fwd, lat);
                    let c1 = cam.col(p.fwd, lat + 0.5 * hw / 2.0);
                    cv.rect(
                        cam.row(p.fwd - 1.0, 0.0),
                        cam.row(p.fwd + 1.0, 0.0),
                        c0.min(c1),
                        c0.max(c1),
                        [0.95, 0.95, 0.95],
                        C_LANE,
                    );
                }
                if blocking {
                    let pc = cam.col(p.fwd, p.left);
                    cv.rect(
                        cam.row(p.fwd, 1.7),
                        cam.row(p.fwd, 0.0),
                        pc - 0.3 * scale,
                        pc + 0.3 * scale,
                        [0.8, 0.4, 0.2],
                        C_PERSON,
                    );
                }
            }
            EventKind::Intersection => {}
        }
    }
    cv.finish(profile.brightness, rng)
}

fn render_map(
    samples: &[Sample],
    t: usize,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Array3<u8> {
    let (w, h) = size;
    let o = &samples[t];
    let ppm = h as f64 / 140.0;
    let row0 = h as f64 - 20.0 * ppm;
    let mut cv = Canvas::new(w, h);
    cv.rect(0.0, h as f64, 0.0, w as f64, [0.93, 0.92, 0.88], 0);
    let (c, sn) = (o.heading.cos(), o.heading.sin());
    let lo = t.saturating_sub(200);
    let hi = samples.len().min(t + 1200);
    for (j, p) in samples[lo..hi].iter().enumerate() {
        if (j + lo) % 2 != 0 {
            continue;
        }
        let (dx, dy) = (p.x - o.x, p.y - o.y);
        let fwd = dx * c + dy * sn;
        let left = -dx * sn + dy * c;
        let color = if p.limit <= 40.0 {
            [0.99, 0.99, 0.99]
        } else if p.limit <= 65.0 {
            [0.98, 0.9, 0.55]
        } else {
            [0.95, 0.65, 0.2]
        };
        cv.disc(
            row0 - fwd * ppm,
            w as f64 / 2.0 - left * ppm,
            (half_width(p.limit) * ppm).max(1.2),
            color,
            0,
        );
    }
    let pts = future_path(samples, t);
    for (k, (d, blocking)) in o.events.iter().enumerate() {
        let Some(p) = point_at_arc(&pts, *d) else {
            continue;
        };
        let color = match EVENT_KINDS[k] {
            EventKind::Signal if *blocking => [0.9, 0.1, 0.1],
            EventKind::Signal => [0.1, 0.7, 0.2],
            EventKind::Yield => [0.9, 0.8, 0.1],
            EventKind::Crossing => [0.2, 0.3, 0.9],
            EventKind::Intersection => [0.4, 0.4, 0.4],
        };
        cv.disc(
            row0 - p.fwd * ppm,
            w as f64 / 2.0 - p.left * ppm,
            1.5,
            color,
            0,
        );
    }
    cv.disc(row0, w as f64 / 2.0, 2.0, [0.1, 0.1, 0.4], 0);
    cv.finish(1.0, rng).0
}

fn semantic_record(samples: &[Sample], t: usize, rng: &mut ChaCha8Rng) -> SemanticRecord {
    let o = &samples[t];
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut values = vec![0.0; N_SEMANTIC];
    let mut missing = vec![false; N_SEMANTIC];
    let lat0: f64 = 47.37;
    values[0] = lat0 + o.y / 111_320.0;
    values[1] = 8.54 + o.x / (111_320.0 * lat0.to_radians().cos());
    values[2] = o.limit;
    values[3] = o.limit * 0.9 + 2.0 * noise.sample(rng);
    values[4] = o.heading.to_degrees().rem_euclid(360.0);
    values[5] = (o.road_index % 10) as f64;
    for k in 0..4 {
        let d = o.events[k].0;
        if d > MAP_HORIZON_M {
            missing[6 + k] = true;
        } else {
            values[6 + k] = d;
        }
    }
    values[10] = 2.0 * half_width(o.limit);
    values[11] = if o.limit > 65.0 { 4.0 } else { 2.0 };
    // mean |curvature| over the next 20 m, in 1/km
    let ahead: Vec<&Sample> = samples[t..]
        .iter()
        .take_while(|p| p.s - o.s <= 20.0)
        .collect();
    let curv = if ahead.len() >= 2 {
        let first = ahead[0];
        let last = ahead[ahead.len() - 1];
        let ds = (last.s - first.s).max(1e-6);
        ((last.heading - first.heading) / ds).abs() * 1000.0
    } else {
        0.0
    };
    values[12] = curv + 0.5 * noise.sample(rng).abs();
    match o.lead {
        Some(d) => values[13] = d,
        None => missing[13] = true,
    }
    values[14] = o.density;
    values[15] = o.zone_left as f64 * DT * o.speed / 3.6;
    values[16] = o.next_limit;
    values[17] = 0.02 * noise.sample(rng);
    values[18] = if o.limit <= 40.0 {
        0.0
    } else if o.limit <= 65.0 {
        1.0
    } else {
        2.0
    };
    values[19] = noise.sample(rng);
    for i in [0usize, 1, 3] {
        if rng.random::<f64>() < 0.02 {
            missing[i] = true;
        }
    }
    for i in 0..N_SEMANTIC {
        if missing[i] {
            values[i] = 0.0;
        }
    }
    SemanticRecord::new(values, missing).expect("20 fields")
}

fn zone_tags(o: &Sample) -> BTreeSet<String> {
    let mut tags = BTreeSet::new();
    tags.insert(zone::speed_zone(o.limit).to_string());
    tags.insert(zone::maneuver(o.angle).to_string());
    let near = |k: usize| o.events[k].0 < EVENT_TAG_DISTANCE_M;
    if near(0) {
        tags.insert(zone::TRAFFIC_LIGHT.to_string());
    }
    if near(1) {
        tags.insert(zone::YIELD.to_string());
    }
    if near(2) {
        tags.insert(zone::PEDESTRIAN.to_string());
    }
    tags
}

/// Simulates and renders one chapter in memory.
pub fn simulate_chapter(config: &GenConfig, route: usize, chapter: usize) -> Chapter {
    let profile = RouteProfile::new(config.seed, route);
    let key = mix_seed(config.seed, route as u64 + 1, chapter as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let samples = simulate(config, profile, &mut rng);
    let size = (config.resolution.0 as usize, config.resolution.1 as usize);
    let chapter_id = GenConfig::chapter_id(route, chapter);
    let folder = route % super::N_FOLDERS;
    let frames = (0..config.frames_per_chapter)
        .map(|t| {
            let (front, mask) = render_front(&samples, t, size, profile, key, &mut rng);
            let map_image = config
                .with_map
                .then(|| render_map(&samples, t, size, &mut rng));
            let o = &samples[t];
            FrameRecord {
                chapter_id: chapter_id.clone(),
                frame_index: t as u32,
                timestamp_ms: t as i64 * FRAME_INTERVAL_MS,
                front_image: front,
                map_image,
                seg_mask: mask,
                semantic: semantic_record(&samples, t, &mut rng).with_folder(folder),
                angle_deg: o.angle,
                speed_kmh: o.speed,
                zone_tags: zone_tags(o),
            }
        })
        .collect();
    Chapter {
        chapter_id,
        route_id: GenConfig::route_id(route),
        split: Split::Train,
        frame_stride: 1,
        frames,
    }
}
