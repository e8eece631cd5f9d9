//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N ...: PASS|FAIL` line to stderr (uncaptured) before asserting.
//!
//! Run with `cargo test -p drivefusion-cli --test acceptance`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use drivefusion::dataset::synth::simulate_chapter;
use drivefusion::dataset::{
    generate_synthetic, load_manifest, load_split, Chapter, GenConfig, Split,
};
use drivefusion::ensemble::{
    build_prior, ensemble_series, plain_average, prior_weighted_average, BinPrior, ANGLE_BINS,
    SPEED_BINS,
};
use drivefusion::evaluate::{angle_histogram, mse, per_zone_report, EvalReport};
use drivefusion::model_zoo::layers::Ctx;
use drivefusion::model_zoo::{
    build_model, loss_graph, scaled, BackboneFamily, Batch, ModelSpec, Variant,
};
use drivefusion::preprocess::{
    denormalize, downsample_mask, downsample_spatial, downsample_temporal, fit_norm_stats,
    flip_mask, flip_rgb, normalize, prepare_cache, stack_mask, stack_sequence, to_unit,
    AugmentDraw, ResolutionTier,
};
use drivefusion::series::{PredictionSeries, SeriesPoint};
use drivefusion::tensor::gradcheck::check_gradients;
use drivefusion::trainer::{
    eligible_samples, predict_chapter, train, Checkpoint, CheckpointSet, Preset, PRESETS,
};
use drivefusion::trajectory::{integrate_path, path_length, KinematicsConfig};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Collects named checks and reports them as one line.
struct Verdict {
    id: u32,
    name: &'static str,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(id: u32, name: &'static str) -> Self {
        Self {
            id,
            name,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn budget(&mut self, used: Duration, limit: Duration) {
        self.note(format!(
            "cpu {:.1}s of {:.0}s",
            used.as_secs_f64(),
            limit.as_secs_f64()
        ));
        self.check(used < limit, format!("cpu time {used:?} exceeds {limit:?}"));
    }

    fn finish(self) {
        let status = if self.failures.is_empty() {
            "PASS"
        } else {
            "FAIL"
        };
        let mut detail = self.notes.join("; ");
        if !self.failures.is_empty() {
            detail = format!("{detail}; failed: {}", self.failures.join("; "));
        }
        // written straight to the stream so the line survives output capture
        let _ = writeln!(
            std::io::stderr(),
            "criterion {} {}: {status} ({detail})",
            self.id,
            self.name
        );
        assert!(
            self.failures.is_empty(),
            "criterion {} failed: {:?}",
            self.id,
            self.failures
        );
    }
}

fn timespec(ts: libc::timespec) -> Duration {
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// CPU time consumed by the calling thread (each test runs on its own thread).
fn thread_cpu() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime failed");
    timespec(ts)
}

/// CPU time of every waited-for child process.
fn children_cpu() -> Duration {
    // SAFETY: zeroed rusage is a valid value and getrusage only writes to it.
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::getrusage(libc::RUSAGE_CHILDREN, &mut ru) };
    assert_eq!(rc, 0, "getrusage failed");
    let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, t.tv_usec as u32 * 1000);
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn small_chapter(frames: usize, resolution: (u32, u32), chapter: usize) -> Chapter {
    let cfg = GenConfig {
        n_routes: 1,
        chapters_per_route: chapter + 1,
        frames_per_chapter: frames,
        resolution,
        ..GenConfig::default()
    };
    simulate_chapter(&cfg, 0, chapter)
}

#[test]
fn criterion_1_preprocessing() {
    let t0 = thread_cpu();
    let mut v = Verdict::new(1, "preprocessing");

    let ch = small_chapter(20, (160, 90), 0);
    let flip = AugmentDraw {
        flip: true,
        ..AugmentDraw::IDENTITY
    };
    let mut flips = 0;
    for f in &ch.frames {
        v.check(
            flip_rgb(&flip_rgb(&f.front_image)) == f.front_image,
            "rgb flip is not an involution",
        );
        v.check(
            flip_mask(&flip_mask(&f.seg_mask)) == f.seg_mask,
            "mask flip is not an involution",
        );
        let once = flip.apply(f);
        v.check(
            once.angle_deg == -f.angle_deg,
            "flip does not negate the angle",
        );
        v.check(once.speed_kmh == f.speed_kmh, "flip changes the speed");
        v.check(flip.apply(&once) == *f, "flipping a frame twice changes it");
        flips += 1;
    }
    v.note(format!("{flips} frames flipped twice"));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let x = rng.random_range(-540.0..540.0);
        let mean = rng.random_range(-50.0..150.0);
        let std = rng.random_range(0.5..300.0);
        worst = worst.max((denormalize(normalize(x, mean, std), mean, std) - x).abs());
    }
    let stats = fit_norm_stats(std::slice::from_ref(&ch)).unwrap();
    for f in &ch.frames {
        let (a, s) = stats.normalize_targets(f.angle_deg, f.speed_kmh);
        let (a2, s2) = stats.denormalize_targets(a, s);
        worst = worst
            .max((a2 - f.angle_deg).abs())
            .max((s2 - f.speed_kmh).abs());
    }
    v.note(format!("normalize round trip max error {worst:.1e}"));
    v.check(
        worst <= 1e-12,
        format!("normalize round trip error {worst:e}"),
    );

    let full = Array3::from_shape_fn((1080, 1920, 3), |(y, x, c)| {
        ((y * 31 + x * 7 + c) % 256) as f64 / 255.0
    });
    let mask = Array2::from_shape_fn((1080, 1920), |(y, x)| ((y / 10 + x / 10) % 20) as u8);
    for (tier, w, h) in [
        (ResolutionTier::S1, 640, 360),
        (ResolutionTier::S2, 320, 180),
        (ResolutionTier::S3, 160, 90),
    ] {
        v.check(
            tier.dims() == (w, h),
            format!("{} dims {:?}", tier.name(), tier.dims()),
        );
        let img = downsample_spatial(full.view(), tier).unwrap();
        v.check(
            img.shape() == [h, w, 3],
            format!("{} image shape {:?}", tier.name(), img.shape()),
        );
        let m = downsample_mask(mask.view(), tier).unwrap();
        v.check(
            m.shape() == [h, w],
            format!("{} mask shape {:?}", tier.name(), m.shape()),
        );
    }
    v.check(
        ResolutionTier::Full.dims() == (1920, 1080),
        "full tier dims",
    );

    for frames in [300, 120, 10] {
        let ch = small_chapter(frames, (32, 18), 1);
        let sub = downsample_temporal(&ch, 10).unwrap();
        v.check(
            sub.len() * 10 == ch.len(),
            format!("stride 10 keeps {} of {frames}", sub.len()),
        );
        v.check(
            sub.frames
                .iter()
                .enumerate()
                .all(|(i, f)| f.frame_index == 10 * i as u32),
            "stride 10 keeps the wrong frames",
        );
        v.check(sub.validate().is_ok(), "subsampled chapter is inconsistent");
    }
    v.note("tier dims and stride 10 exact".to_string());

    v.budget(thread_cpu() - t0, Duration::from_secs(10));
    v.finish();
}

#[test]
fn criterion_2_channel_arithmetic() {
    let mut v = Verdict::new(2, "channel arithmetic");
    let ch = small_chapter(10, (160, 90), 2);
    let mut stacked = Vec::new();
    for f in &ch.frames {
        let img = to_unit(&f.front_image);
        let s = stack_mask(img.view(), f.seg_mask.view(), 20).unwrap();
        v.check(
            s.shape() == [90, 160, 23],
            format!("stack_mask shape {:?}", s.shape()),
        );
        let mut bad = 0usize;
        for y in 0..90 {
            for x in 0..160 {
                let total: f64 = (3..23).map(|c| s[[y, x, c]]).sum();
                let hot = (3..23).filter(|&c| s[[y, x, c]] == 1.0).count();
                let class = f.seg_mask[[y, x]] as usize;
                if total != 1.0 || hot != 1 || s[[y, x, 3 + class]] != 1.0 {
                    bad += 1;
                }
                for c in 0..3 {
                    if s[[y, x, c]] != img[[y, x, c]] {
                        bad += 1;
                    }
                }
            }
        }
        v.check(bad == 0, format!("{bad} pixels with bad planes"));
        stacked.push(s);
    }
    let seq = stack_sequence(&stacked).unwrap();
    v.check(
        seq.shape() == [90, 160, 230],
        format!("stack_sequence shape {:?}", seq.shape()),
    );
    for (k, s) in stacked.iter().enumerate() {
        let same = (0..23).all(|c| {
            seq.index_axis(ndarray::Axis(2), 23 * k + c) == s.index_axis(ndarray::Axis(2), c)
        });
        v.check(
            same,
            format!("frame {k} is not at channels {}..{}", 23 * k, 23 * k + 23),
        );
    }
    v.note("23 and 230 channels, one-hot planes sum to 1 at every pixel".to_string());
    v.finish();
}

fn noise(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

#[test]
fn criterion_3_gradient_check() {
    let t0 = thread_cpu();
    let mut v = Verdict::new(3, "gradient check");
    let mut spec = ModelSpec::new(Variant::M1, (16, 9), Some(&[BackboneFamily::ToyConv])).unwrap();
    spec.scale = 1.0 / 16.0;
    spec.backbones[0].feature_dim = 128;
    spec.semantic_dim = 20;
    let mut model = build_model(&spec, 11).unwrap();
    v.check(
        scaled(model.spec.backbones[0].feature_dim, model.spec.scale) == 8,
        "unexpected feature width",
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Batch {
        images: vec![noise(&[3, 2, 3, 9, 16], &mut rng)],
        semantic: Some(noise(&[3, 2, 20], &mut rng)),
        targets: Some(noise(&[3, 2], &mut rng)),
        zone_tags: vec![Default::default(); 3],
    };
    let net = model.clone();
    let targets = batch.targets.clone().unwrap();
    let report = check_gradients(&mut model.store, 1e-5, 1e-6, |g| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut cx = Ctx::train(g, &mut rng);
        let (a, s) = net.forward_graph(&mut cx, &batch)?;
        loss_graph(cx.g, a, s, &targets)
    })
    .unwrap();
    v.note(format!(
        "{} parameters, max relative error {:.2e} at {}",
        report.checked, report.max_rel_error, report.worst
    ));
    v.check(
        report.checked == model.parameter_count(),
        "not every parameter was checked",
    );
    v.check(
        report.max_rel_error < 1e-4,
        format!("relative error {:e}", report.max_rel_error),
    );
    v.budget(thread_cpu() - t0, minutes(2));
    v.finish();
}

/// Combined validation MSE of predicting the training mean for every scored
/// sample.
fn constant_mean_baseline(spec: &ModelSpec, train: &[Chapter], val: &[Chapter]) -> f64 {
    let stats = fit_norm_stats(train).unwrap();
    let samples = eligible_samples(spec, val);
    let (mut a, mut s) = (0.0, 0.0);
    for r in &samples {
        let f = &val[r.chapter].frames[r.position];
        a += (f.angle_deg - stats.angle_mean).powi(2);
        s += (f.speed_kmh - stats.speed_mean).powi(2);
    }
    (a + s) / samples.len() as f64
}

#[test]
fn criterion_4_training_efficacy() {
    let mut v = Verdict::new(4, "training efficacy");
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        resolution: (160, 90),
        ..GenConfig::default()
    };
    let raw = generate_synthetic(&gen, &dir.path().join("data"), false).unwrap();
    v.check(
        raw.chapters.len() == 16,
        format!("{} chapters", raw.chapters.len()),
    );
    let prepared = dir.path().join("data_s3_2");
    prepare_cache(&raw, ResolutionTier::S3, 2, &prepared).unwrap();
    let m = load_manifest(&prepared).unwrap();
    let train_split = load_split(&m, Split::Train).unwrap();
    let val_split = load_split(&m, Split::Validation).unwrap();

    for preset in &PRESETS {
        let t0 = thread_cpu();
        let spec = preset
            .model_spec((160, 90), 0.25, true)
            .unwrap()
            .with_frame_stride(2);
        let mut cfg = preset.train_config(1, 0.25);
        cfg.epochs = 5;
        cfg.tier = ResolutionTier::S3;
        cfg.temporal_stride = 2;
        let set = train(&spec, &m, &cfg, &dir.path().join(preset.name)).unwrap();
        let last = set.history.last().unwrap();
        let model_mse = last.val_angle_mse + last.val_speed_mse;
        let base = constant_mean_baseline(&spec, &train_split, &val_split);
        let gain = 1.0 - model_mse / base;
        let used = thread_cpu() - t0;
        let limit = if spec.history() > 1 {
            minutes(45)
        } else {
            minutes(15)
        };
        v.note(format!(
            "{} {:.1}% over baseline {:.0} in {:.0}s",
            preset.name,
            100.0 * gain,
            base,
            used.as_secs_f64()
        ));
        v.check(
            gain >= 0.30,
            format!("{} improves only {:.1}%", preset.name, 100.0 * gain),
        );
        v.check(used < limit, format!("{} took {used:?}", preset.name));
    }
    v.finish();
}

fn random_prior(rng: &mut ChaCha8Rng, n_bins: usize) -> BinPrior {
    let values: Vec<f64> = (0..500)
        .map(|_| rng.random_range(-90.0f64..90.0).powi(3) / 8100.0)
        .collect();
    build_prior(&values, n_bins).unwrap()
}

/// Angle predictions from the best-angle checkpoint and speed predictions
/// from the best-speed checkpoint of one run.
fn best_predictions(set: &CheckpointSet, val: &[Chapter]) -> PredictionSeries {
    let predict = |path: &Path| -> PredictionSeries {
        let ckpt = Checkpoint::load(path).unwrap();
        let stats = ckpt.norm_stats().unwrap();
        let mut out = PredictionSeries::default();
        for ch in val {
            out.points
                .extend(predict_chapter(&ckpt.model, ch, stats).unwrap().points);
        }
        out
    };
    let angle = predict(&set.best_angle);
    let speed = predict(&set.best_speed);
    PredictionSeries {
        points: angle
            .points
            .into_iter()
            .zip(speed.points)
            .map(|(a, s)| SeriesPoint {
                speed_kmh: s.speed_kmh,
                ..a
            })
            .collect(),
    }
}

fn combined_mse(pred: &PredictionSeries, val: &[Chapter]) -> f64 {
    let truth = PredictionSeries::truth(val);
    per_zone_report(pred, &truth, &PredictionSeries::zone_tags(val))
        .unwrap()
        .overall
        .combined
}

#[test]
fn criterion_5_ensemble() {
    let mut v = Verdict::new(5, "ensemble");
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let (mut convex, mut perm, mut idem) = (true, true, true);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..2000 {
        let prior = random_prior(&mut rng, ANGLE_BINS);
        worst_sum = worst_sum.max((prior.probs.iter().sum::<f64>() - 1.0).abs());
        let n = rng.random_range(1..8);
        let mut preds: Vec<f64> = (0..n).map(|_| rng.random_range(-120.0..120.0)).collect();
        let e = prior_weighted_average(&preds, &prior).unwrap();
        let (lo, hi) = preds
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                (a.min(x), b.max(x))
            });
        convex &= lo <= e && e <= hi;
        preds.shuffle(&mut rng);
        perm &= prior_weighted_average(&preds, &prior).unwrap().to_bits() == e.to_bits();
        let x = preds[0];
        idem &= prior_weighted_average(&vec![x; n], &prior).unwrap() == x;
    }
    v.check(convex, "weighted average left the members' range");
    v.check(perm, "member order changed the result");
    v.check(idem, "identical members did not return themselves");
    v.check(
        worst_sum <= 1e-9,
        format!("prior probabilities sum off by {worst_sum:e}"),
    );
    let mut worked = BinPrior {
        lo: 0.0,
        hi: 40.0,
        n_bins: 2,
        probs: vec![0.3, 0.1],
    };
    let e = prior_weighted_average(&[10.0, 30.0], &worked).unwrap();
    v.check(e == 15.0, format!("worked example gives {e}"));
    worked.probs = vec![0.75, 0.25];
    v.check(
        prior_weighted_average(&[10.0, 30.0], &worked).unwrap() == 15.0,
        "normalized worked example",
    );
    v.note(format!(
        "properties exact over 2000 cases, prior sum error {worst_sum:.1e}, worked example 15"
    ));

    // members: toy semantic-fusion models; per trial a pool of candidate seeds
    // is trained and the two with the lowest validation MSE are combined
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        resolution: (160, 90),
        split: (0.625, 0.25, 0.125),
        seed: 21,
        ..GenConfig::default()
    };
    let raw = generate_synthetic(&gen, &dir.path().join("data"), false).unwrap();
    let prepared = dir.path().join("data_s3_2");
    prepare_cache(&raw, ResolutionTier::S3, 2, &prepared).unwrap();
    let m = load_manifest(&prepared).unwrap();
    let train_split = load_split(&m, Split::Train).unwrap();
    let val = load_split(&m, Split::Validation).unwrap();
    let values = |angle: bool| -> Vec<f64> {
        train_split
            .iter()
            .flat_map(|c| &c.frames)
            .map(|f| if angle { f.angle_deg } else { f.speed_kmh })
            .collect()
    };
    let angle_prior = build_prior(&values(true), ANGLE_BINS).unwrap();
    let speed_prior = build_prior(&values(false), SPEED_BINS).unwrap();

    const POOL: u64 = 4;
    let preset = Preset::get("model1-sem20").unwrap();
    let spec = preset
        .model_spec((160, 90), 0.25, true)
        .unwrap()
        .with_frame_stride(2);
    let (mut wins, mut within, mut mean_wins) = (0, 0, 0);
    let mut lines = Vec::new();
    for trial in 0..5u64 {
        let mut pool = Vec::new();
        for k in 0..POOL {
            let seed = 10 * trial + k;
            let mut cfg = preset.train_config(seed, 0.25);
            cfg.epochs = 5;
            cfg.batch_size = 32;
            cfg.tier = ResolutionTier::S3;
            cfg.temporal_stride = 2;
            let run = dir.path().join(format!("run{seed}"));
            let set = train(&spec, &m, &cfg, &run).unwrap();
            let pred = best_predictions(&set, &val);
            pool.push((combined_mse(&pred, &val), pred));
            std::fs::remove_dir_all(&run).unwrap();
        }
        pool.sort_by(|a, b| a.0.total_cmp(&b.0));
        let members = [pool[0].1.clone(), pool[1].1.clone()];
        let best = pool[0].0;
        let ens_mse = combined_mse(
            &ensemble_series(&members, &angle_prior, &speed_prior).unwrap(),
            &val,
        );
        let mean_mse = combined_mse(&plain_average(&members).unwrap(), &val);
        wins += usize::from(ens_mse < best);
        within += usize::from(ens_mse <= 1.05 * best);
        mean_wins += usize::from(mean_mse < best);
        lines.push(format!("{:.0}/{:.0}->{:.0}", pool[0].0, pool[1].0, ens_mse));
    }
    v.note(format!(
        "best two of {POOL} seeds -> weighted ensemble {}",
        lines.join(" ")
    ));
    v.note(format!(
        "better on {wins}/5, within 5% on {within}/5 (plain average better on {mean_wins}/5)"
    ));
    v.check(
        within == 5,
        format!(
            "ensemble worse than the best member by >5% on {} seeds",
            5 - within
        ),
    );
    v.check(
        wins >= 3,
        format!("ensemble better on only {wins} of 5 seeds"),
    );
    v.finish();
}

#[test]
fn criterion_6_trajectory() {
    let t0 = thread_cpu();
    let mut v = Verdict::new(6, "trajectory");
    let cfg = KinematicsConfig::default();

    let straight = integrate_path(&[0.0; 50], &[36.0; 50], &cfg).unwrap();
    v.check(
        straight
            .points
            .iter()
            .enumerate()
            .all(|(i, p)| *p == (i as f64, 0.0)),
        "zero angle at 36 km/h is not 1 m per step along x",
    );
    let still = integrate_path(&[15.0; 40], &[0.0; 40], &cfg).unwrap();
    v.check(
        still.points.iter().all(|p| *p == (0.0, 0.0)),
        "zero speed moved",
    );

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mirror_ok = true;
    let mut worst_len: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..300);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-90.0..90.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..130.0)).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let p = integrate_path(&a, &s, &cfg).unwrap();
        let q = integrate_path(&neg, &s, &cfg).unwrap();
        mirror_ok &= p
            .points
            .iter()
            .zip(&q.points)
            .all(|(u, w)| u.0 == w.0 && u.1 == -w.1);
        let expected: f64 = s.iter().map(|v| v / 3.6 * cfg.dt).sum();
        worst_len = worst_len.max((path_length(&p) - expected).abs());
    }
    v.check(mirror_ok, "negated angles do not mirror the path exactly");
    v.check(
        worst_len <= 1e-9,
        format!("path length off by {worst_len:e}"),
    );

    // constant input traces a circle of radius v/omega around (0, R)
    let (angle, speed_kmh) = (10.0, 36.0);
    let deviation = |dt: f64| -> f64 {
        let c = KinematicsConfig { dt, ..cfg };
        let n = (36.0 / dt).round() as usize;
        let p = integrate_path(&vec![angle; n], &vec![speed_kmh; n], &c).unwrap();
        let r = (speed_kmh / 3.6) / (angle * c.gain_k).to_radians();
        p.points
            .iter()
            .map(|(x, y)| ((x * x + (y - r) * (y - r)).sqrt() - r).abs())
            .fold(0.0, f64::max)
    };
    let d = [deviation(0.1), deviation(0.05), deviation(0.025)];
    let ratios = [d[0] / d[1], d[1] / d[2]];
    v.check(
        ratios.iter().all(|r| (r - 2.0).abs() <= 0.2),
        format!("deviation ratios {ratios:?}"),
    );
    v.note(format!(
        "exact straight/standstill/mirror, length error {worst_len:.1e}, halving ratios {:.3} {:.3}",
        ratios[0], ratios[1]
    ));
    v.budget(thread_cpu() - t0, Duration::from_secs(5));
    v.finish();
}

#[test]
fn criterion_7_evaluation() {
    let t0 = thread_cpu();
    let mut v = Verdict::new(7, "evaluation");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let chapters: Vec<Chapter> = (0..3).map(|c| small_chapter(150, (32, 18), c)).collect();
    let truth = PredictionSeries::truth(&chapters);
    let tags = PredictionSeries::zone_tags(&chapters);
    let mut pred = truth.clone();
    for (i, p) in pred.points.iter_mut().enumerate() {
        if i % 17 == 0 {
            p.angle_deg = None;
            p.speed_kmh = None;
        } else {
            p.angle_deg = p.angle_deg.map(|a| a + rng.random_range(-40.0..40.0));
            p.speed_kmh = p.speed_kmh.map(|s| s + rng.random_range(-5.0..5.0));
        }
    }
    let report = per_zone_report(&pred, &truth, &tags).unwrap();
    let n = report.n_samples as f64;
    let maneuvers = drivefusion::dataset::zone::MANEUVERS;
    let (mut sum_a, mut sum_s) = (0.0, 0.0);
    for m in maneuvers {
        if let Some(z) = report.per_zone.get(m) {
            sum_a += z.count as f64 * z.mse_angle;
            sum_s += z.count as f64 * z.mse_speed;
        }
    }
    let gap = (sum_a - n * report.overall.mse_angle)
        .abs()
        .max((sum_s - n * report.overall.mse_speed).abs());
    v.check(
        gap <= 1e-6,
        format!("maneuver reconciliation off by {gap:e}"),
    );
    let count: usize = maneuvers
        .iter()
        .filter_map(|m| report.per_zone.get(*m))
        .map(|z| z.count)
        .sum();
    v.check(
        count == report.n_samples,
        "maneuver tags do not partition the scored frames",
    );

    let o = &report.overall;
    v.check(
        (o.combined - (o.mse_angle + o.mse_speed)).abs() <= 1e-9,
        "combined is not angle + speed",
    );
    let table = EvalReport {
        overall: drivefusion::evaluate::Overall {
            mse_angle: 831.504,
            mse_speed: 4.543,
            combined: 831.504 + 4.543,
        },
        per_zone: Default::default(),
        n_samples: 1,
    };
    v.check(
        (table.overall.combined - 836.047).abs() <= 1e-9,
        "831.504 + 4.543 != 836.047",
    );
    let direct = mse(&[1.0, 2.0, 3.0], &[1.0, 4.0, 0.0]).unwrap();
    v.check(direct == 13.0 / 3.0, format!("mse example gives {direct}"));

    let angles: Vec<f64> = (0..5000)
        .map(|_| rng.random_range(-180.0..=180.0))
        .collect();
    let mut hist_ok = true;
    for w in [1.0, 5.0, 7.0, 30.0, 180.0] {
        hist_ok &= angle_histogram(&angles, w).unwrap().iter().sum::<usize>() == angles.len();
    }
    v.check(hist_ok, "histogram counts do not sum to n");
    v.note(format!(
        "reconciliation gap {gap:.1e} over {} frames, histogram partitions",
        report.n_samples
    ));
    v.budget(thread_cpu() - t0, Duration::from_secs(5));
    v.finish();
}

const PIPELINE: &str = r#"
seed = 5

[gen]
n_routes = 2
chapters_per_route = 4
frames_per_chapter = 60
resolution = [160, 90]
split = [0.5, 0.25, 0.25]

[prep]
tier = "s3"
stride = 2

[train]
scale = 0.125
backbone = "toy"
epochs = 2
batch_size = 16
"#;

fn run_pipeline(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    std::fs::write(dir.join("run.toml"), PIPELINE).unwrap();
    let step = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_drivefusion"))
            .current_dir(dir)
            .env_remove("DRIVEFUSION_DATA")
            .env("RUST_LOG", "warn")
            .arg("--config")
            .arg("run.toml")
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    step(&["gen"]);
    step(&["prep"]);
    let members = ["model1", "model2-single"];
    for preset in members {
        step(&["train", "--preset", preset]);
        step(&["predict", "--preset", preset]);
        step(&[
            "eval",
            "--predictions",
            &format!("runs/{preset}/predictions_validation.csv"),
        ]);
    }
    let files: Vec<String> = members
        .iter()
        .map(|p| format!("runs/{p}/predictions_validation.csv"))
        .collect();
    let mut args = vec!["ensemble", "--members"];
    args.extend(files.iter().map(String::as_str));
    step(&args);
    step(&["eval", "--predictions", "runs/ensemble/predictions.csv"]);
    [
        "runs/model1/predictions_validation_report.json",
        "runs/model2-single/predictions_validation_report.json",
        "runs/ensemble/predictions_report.json",
    ]
    .iter()
    .map(|f| (PathBuf::from(f), std::fs::read(dir.join(f)).unwrap()))
    .collect()
}

#[test]
fn criterion_8_determinism() {
    let c0 = children_cpu();
    let mut v = Verdict::new(8, "determinism");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(a.path());
    let second = run_pipeline(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        v.check(x == y, format!("{} differs between runs", name.display()));
        let report: EvalReport = serde_json::from_slice(x).unwrap();
        v.check(
            report.n_samples > 0 && report.overall.combined.is_finite(),
            format!("{} is degenerate", name.display()),
        );
    }
    v.note(format!(
        "{} metric files bit-identical across two runs",
        first.len()
    ));
    v.budget(children_cpu() - c0, minutes(20));
    v.finish();
}
