use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameRecord, LabelMask, RgbImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_brightness: f64,
    pub brightness_range: (f64, f64),
    pub p_affine: f64,
    pub max_translate_frac: f64,
    pub max_rotate_deg: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_brightness: 0.1,
            brightness_range: (0.2, 0.75),
            p_affine: 0.25,
            max_translate_frac: 0.05,
            max_rotate_deg: 5.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No transform is ever applied.
    pub fn disabled() -> Self {
        Self {
            p_flip: 0.0,
            p_brightness: 0.0,
            p_affine: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip", self.p_flip),
            ("p_brightness", self.p_brightness),
            ("p_affine", self.p_affine),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "brightness_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if self.max_translate_frac < 0.0 || self.max_rotate_deg < 0.0 {
            return Err(Error::invalid("affine magnitudes must be non-negative"));
        }
        Ok(())
    }
}

/// One sampled transform. Sampling always consumes the same number of draws,
/// so the rng stream stays aligned whatever was selected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub brightness: Option<f64>,
    /// (dx fraction of width, dy fraction of height, rotation degrees)
    pub affine: Option<(f64, f64, f64)>,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        brightness: None,
        affine: None,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let u_flip: f64 = rng.random();
        let u_bright: f64 = rng.random();
        let factor: f64 = rng.random();
        let u_affine: f64 = rng.random();
        let tx: f64 = rng.random();
        let ty: f64 = rng.random();
        let rot: f64 = rng.random();
        let (lo, hi) = cfg.brightness_range;
        let t = cfg.max_translate_frac;
        Self {
            flip: u_flip < cfg.p_flip,
            brightness: (u_bright < cfg.p_brightness).then(|| lo + factor * (hi - lo)),
            affine: (u_affine < cfg.p_affine).then(|| {
                (
                    (2.0 * tx - 1.0) * t,
                    (2.0 * ty - 1.0) * t,
                    (2.0 * rot - 1.0) * cfg.max_rotate_deg,
                )
            }),
        }
    }

    /// Applies the transform to the front image, segmentation mask and angle.
    /// Map images are never touched; brightness never reaches the mask.
    pub fn apply(&self, frame: &FrameRecord) -> FrameRecord {
        let mut out = frame.clone();
        if self.flip {
            out.front_image = flip_rgb(&out.front_image);
            out.seg_mask = flip_mask(&out.seg_mask);
            out.angle_deg = -out.angle_deg;
        }
        if let Some(k) = self.brightness {
            out.front_image
                .mapv_inplace(|v| (v as f64 * k).round().clamp(0.0, 255.0) as u8);
        }
        if let Some((dx, dy, deg)) = self.affine {
            let (h, w) = (out.height(), out.width());
            let map = AffineMap::new(h, w, dx * w as f64, dy * h as f64, deg);
            let (img, mask) = (&out.front_image, &out.seg_mask);
            let new_img = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                let (sy, sx) = map.source(y, x);
                img[[sy, sx, c]]
            });
            let new_mask = Array2::from_shape_fn((h, w), |(y, x)| {
                let (sy, sx) = map.source(y, x);
                mask[[sy, sx]]
            });
            out.front_image = new_img;
            out.seg_mask = new_mask;
        }
        out
    }
}

/// Inverse mapping for rotation about the image centre followed by a
/// translation; nearest neighbour with border replication.
struct AffineMap {
    h: usize,
    w: usize,
    cos: f64,
    sin: f64,
    cx: f64,
    cy: f64,
    dx: f64,
    dy: f64,
}

impl AffineMap {
    fn new(h: usize, w: usize, dx: f64, dy: f64, deg: f64) -> Self {
        let r = deg.to_radians();
        Self {
            h,
            w,
            cos: r.cos(),
            sin: r.sin(),
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            dx,
            dy,
        }
    }

    fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let px = x as f64 + 0.5 - self.cx - self.dx;
        let py = y as f64 + 0.5 - self.cy - self.dy;
        let sx = self.cos * px + self.sin * py + self.cx;
        let sy = -self.sin * px + self.cos * py + self.cy;
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clamp(sy, self.h), clamp(sx, self.w))
    }
}

pub fn flip_rgb(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

pub fn flip_mask(mask: &LabelMask) -> LabelMask {
    let mut out = mask.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// Samples one transform from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(
    frame: &FrameRecord,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> FrameRecord {
    AugmentDraw::sample(cfg, rng).apply(frame)
}

/// Applies a single sampled transform to every frame of a sequence.
pub fn augment_sequence<R: Rng + ?Sized>(
    frames: &[&FrameRecord],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<FrameRecord> {
    let draw = AugmentDraw::sample(cfg, rng);
    frames.iter().map(|f| draw.apply(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth::simulate_chapter, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame() -> FrameRecord {
        let cfg = GenConfig {
            n_routes: 1,
            chapters_per_route: 1,
            frames_per_chapter: 12,
            resolution: (64, 36),
            ..Default::default()
        };
        let mut f = simulate_chapter(&cfg, 0, 0).frames[5].clone();
        f.angle_deg = 30.0;
        f
    }

    fn forced_flip() -> AugmentConfig {
        AugmentConfig {
            p_flip: 1.0,
            ..AugmentConfig::disabled()
        }
    }

    #[test]
    fn flip_negates_angle_and_mirrors_columns() {
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = augment(&f, &forced_flip(), &mut rng);
        assert_eq!(g.angle_deg, -30.0);
        assert_eq!(g.speed_kmh, f.speed_kmh);
        let w = f.width();
        for c in 0..w {
            assert_eq!(g.front_image[[10, c, 1]], f.front_image[[10, w - 1 - c, 1]]);
            assert_eq!(g.seg_mask[[30, c]], f.seg_mask[[30, w - 1 - c]]);
        }
        assert_eq!(g.map_image, f.map_image);
    }

    #[test]
    fn flip_is_involution() {
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = augment(
            &augment(&f, &forced_flip(), &mut rng),
            &forced_flip(),
            &mut rng,
        );
        assert_eq!(g, f);
    }

    #[test]
    fn disabled_is_identity() {
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&f, &AugmentConfig::disabled(), &mut rng), f);
    }

    #[test]
    fn brightness_darkens_image_only() {
        let f = frame();
        let cfg = AugmentConfig {
            p_brightness: 1.0,
            ..AugmentConfig::disabled()
        };
        let g = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(g.seg_mask, f.seg_mask);
        assert!(g
            .front_image
            .iter()
            .zip(f.front_image.iter())
            .all(|(a, b)| a <= b));
        assert!(
            g.front_image.iter().map(|v| *v as u64).sum::<u64>()
                < f.front_image.iter().map(|v| *v as u64).sum::<u64>() * 3 / 4 + 1000
        );
    }

    #[test]
    fn affine_moves_mask_with_image() {
        let f = frame();
        let cfg = AugmentConfig {
            p_affine: 1.0,
            max_translate_frac: 0.2,
            ..AugmentConfig::disabled()
        };
        let g = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(g.angle_deg, f.angle_deg);
        assert_ne!(g.seg_mask, f.seg_mask);
        // sky pixels in the output must map to sky-coloured pixels
        let sky = 10u8;
        for ((y, x), m) in g.seg_mask.indexed_iter() {
            if *m == sky {
                assert!(g.front_image[[y, x, 2]] > 150);
            }
        }
    }

    #[test]
    fn same_rng_state_same_transform() {
        let f = frame();
        let cfg = AugmentConfig {
            p_flip: 0.5,
            p_brightness: 0.5,
            p_affine: 0.5,
            ..AugmentConfig::default()
        };
        let a = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            p_flip: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            brightness_range: (0.0, 0.5),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
