//! End-to-end use of the library API on a tiny dataset.

use drivefusion::dataset::{generate_synthetic, load_manifest, load_split, GenConfig, Split};
use drivefusion::ensemble::{build_prior, ensemble_series, plain_average, ANGLE_BINS, SPEED_BINS};
use drivefusion::evaluate::per_zone_report;
use drivefusion::preprocess::{prepare_cache, ResolutionTier};
use drivefusion::series::PredictionSeries;
use drivefusion::trainer::{
    predict_chapter, read_history, train, Checkpoint, Preset, HISTORY_FILE,
};
use drivefusion::trajectory::{integrate_path, KinematicsConfig};

#[test]
fn generate_prepare_train_predict_ensemble_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        n_routes: 2,
        chapters_per_route: 2,
        frames_per_chapter: 40,
        resolution: (160, 90),
        split: (0.5, 0.25, 0.25),
        seed: 4,
        ..GenConfig::default()
    };
    let raw = generate_synthetic(&gen, &dir.path().join("data"), false).unwrap();
    let prepared = dir.path().join("data_s3_2");
    prepare_cache(&raw, ResolutionTier::S3, 2, &prepared).unwrap();
    let m = load_manifest(&prepared).unwrap();
    assert_eq!(m.frame_stride, 2);

    let preset = Preset::get("model1").unwrap();
    let spec = preset
        .model_spec((160, 90), 0.125, true)
        .unwrap()
        .with_frame_stride(2);
    let mut cfg = preset.train_config(3, 0.125);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.tier = ResolutionTier::S3;
    cfg.temporal_stride = 2;
    let run = dir.path().join("run");
    let set = train(&spec, &m, &cfg, &run).unwrap();
    assert_eq!(read_history(&run.join(HISTORY_FILE)).unwrap(), set.history);

    let val = load_split(&m, Split::Validation).unwrap();
    let ckpt = Checkpoint::load(&set.last).unwrap();
    let stats = ckpt.norm_stats().unwrap();
    let mut pred = PredictionSeries::default();
    for ch in &val {
        pred.points
            .extend(predict_chapter(&ckpt.model, ch, stats).unwrap().points);
    }
    assert!(pred.n_present() > 0 && pred.n_present() < pred.len());

    let train_split = load_split(&m, Split::Train).unwrap();
    let angles: Vec<f64> = train_split
        .iter()
        .flat_map(|c| &c.frames)
        .map(|f| f.angle_deg)
        .collect();
    let speeds: Vec<f64> = train_split
        .iter()
        .flat_map(|c| &c.frames)
        .map(|f| f.speed_kmh)
        .collect();
    let pa = build_prior(&angles, ANGLE_BINS).unwrap();
    let ps = build_prior(&speeds, SPEED_BINS).unwrap();
    let members = [pred.clone(), pred.clone()];
    assert_eq!(ensemble_series(&members, &pa, &ps).unwrap(), pred);
    assert_eq!(plain_average(&members).unwrap(), pred);

    let truth = PredictionSeries::truth(&val);
    let report = per_zone_report(&pred, &truth, &PredictionSeries::zone_tags(&val)).unwrap();
    assert_eq!(report.n_samples, pred.n_present());
    assert!(report.overall.combined.is_finite());

    let scored: Vec<(f64, f64)> = pred.points.iter().filter_map(|p| p.value()).collect();
    let (a, s): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
    let path = integrate_path(&a, &s, &KinematicsConfig::default()).unwrap();
    assert_eq!(path.points.len(), a.len() + 1);
}
