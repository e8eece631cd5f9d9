use super::*;
use crate::dataset::{synth::simulate_chapter, GenConfig};
use crate::model_zoo::{BackboneFamily, Variant};
use ndarray::array;

fn chapters(n: usize, frames: usize, split: Split) -> Vec<Chapter> {
    let cfg = GenConfig {
        n_routes: 1,
        chapters_per_route: 8,
        frames_per_chapter: frames,
        resolution: (32, 18),
        ..Default::default()
    };
    (0..n)
        .map(|c| {
            let offset = if split == Split::Train { 0 } else { 4 };
            let mut ch = simulate_chapter(&cfg, 0, c + offset);
            ch.split = split;
            ch
        })
        .collect()
}

fn toy(variant: Variant) -> ModelSpec {
    let mut spec = ModelSpec::new(variant, (32, 18), None)
        .unwrap()
        .with_toy_backbones();
    spec.scale = 0.125;
    spec
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 1e-3,
        batch_size: 16,
        epochs: 2,
        seed,
        ..Default::default()
    }
}

fn pred(a: &[f64], s: &[f64]) -> Prediction {
    Prediction {
        angle_norm: a.to_vec(),
        speed_norm: s.to_vec(),
        angle_deg: None,
        speed_kmh: None,
    }
}

#[test]
fn loss_examples() {
    assert_eq!(
        loss(&pred(&[1.0], &[2.0]), array![[0.0, 0.0]].view()).unwrap(),
        5.0
    );
    let t = array![[0.3, -1.0], [2.0, 0.5]];
    assert_eq!(
        loss(&pred(&[0.3, 2.0], &[-1.0, 0.5]), t.view()).unwrap(),
        0.0
    );
    let base = loss(&pred(&[1.0, -2.0], &[0.5, 3.0]), t.view()).unwrap();
    let doubled = pred(
        &[0.3 + 2.0 * 0.7, 2.0 - 2.0 * 4.0],
        &[-1.0 + 2.0 * 1.5, 0.5 + 2.0 * 2.5],
    );
    assert!((loss(&doubled, t.view()).unwrap() - 4.0 * base).abs() < 1e-12);
    assert!(loss(&pred(&[1.0], &[1.0]), t.view()).is_err());
}

#[test]
fn schedules() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b;
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 16), 5e-5));
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 0), 3e-4));
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 4), 3e-4));
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 5), 1e-4));
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 14), 1e-4));
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 20), 3e-5));
    assert!(close(lr_at(Schedule::M2SingleDecay, 3e-4, 89), 3e-5));
    assert_eq!(lr_at(Schedule::Halve20_30_40, 0.003, 35), 0.00075);
    assert_eq!(lr_at(Schedule::Halve20_30_40, 0.003, 19), 0.003);
    assert_eq!(lr_at(Schedule::Halve20_30_40, 0.003, 40), 0.000375);
    for e in [0, 7, 1000] {
        assert_eq!(lr_at(Schedule::Constant, 0.123, e), 0.123);
    }
    assert_eq!(
        "halve_20_30_40".parse::<Schedule>().unwrap(),
        Schedule::Halve20_30_40
    );
    let json = serde_json::to_string(&Schedule::Halve20_30_40).unwrap();
    assert_eq!(json, "\"halve_20_30_40\"");
}

#[test]
fn presets_bind_reported_hyperparameters() {
    let m1 = Preset::get("model1").unwrap().train_config(0, 1.0);
    assert_eq!(m1.lr0, 0.0001);
    assert_eq!(m1.betas, (0.9, 0.999));
    assert_eq!(m1.weight_decay, 0.0);
    let m2 = Preset::get("model2-single").unwrap().train_config(0, 1.0);
    assert_eq!((m2.lr0, m2.batch_size, m2.epochs), (0.0003, 13, 90));
    assert_eq!(m2.schedule, Schedule::M2SingleDecay);
    let seq = Preset::get("model2-sequence").unwrap().train_config(0, 1.0);
    assert_eq!((seq.lr0, seq.schedule), (0.003, Schedule::Halve20_30_40));
    assert!((Preset::get("model1").unwrap().train_config(0, 0.25).lr0 - 4e-4).abs() < 1e-15);
    assert!(
        (Preset::get("model2-single")
            .unwrap()
            .train_config(0, 0.25)
            .lr0
            - 1.2e-3)
            .abs()
            < 1e-15
    );
    assert!(
        (Preset::get("model2-sequence")
            .unwrap()
            .train_config(0, 0.25)
            .lr0
            - 3e-3)
            .abs()
            < 1e-15
    );
    assert_eq!(scaled_lr(1e-4, 0.01), MAX_LR);
    let err = Preset::get("model9").unwrap_err().to_string();
    assert!(
        err.contains("model2-stacked") && err.contains("model3"),
        "{err}"
    );
    for p in PRESETS {
        let reported = p.model_spec((160, 90), 1.0, false).unwrap();
        assert_eq!(
            reported.backbones.iter().map(|b| b.family).collect::<Vec<_>>(),
            p.backbones
        );
        let toy = p.model_spec((160, 90), 0.25, true).unwrap();
        assert!(toy
            .backbones
            .iter()
            .all(|b| b.family == BackboneFamily::ToyConv));
    }
    let spec = Preset::get("model2-single")
        .unwrap()
        .model_spec((160, 90), 1.0, false)
        .unwrap();
    assert_eq!(spec.backbones[0].in_channels, 23);
    assert_eq!(spec.decoder_dims, vec![200, 50, 10]);
}

#[test]
fn frame_offset_follows_stride() {
    assert_eq!(toy(Variant::M1).frame_offset, 4);
    assert_eq!(toy(Variant::M1).with_frame_stride(2).frame_offset, 2);
    assert_eq!(toy(Variant::M3).with_frame_stride(10).frame_offset, 1);
    assert_eq!(
        toy(Variant::M2Sequence).with_frame_stride(2).frame_offset,
        1
    );
}

#[test]
fn training_is_deterministic_and_bests_are_monotone() {
    let tr = chapters(2, 40, Split::Train);
    let va = chapters(1, 30, Split::Validation);
    let spec = toy(Variant::M1);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train_on(&spec, &tr, &va, &quick_cfg(4), d1.path()).unwrap();
    let b = train_on(&spec, &tr, &va, &quick_cfg(4), d2.path()).unwrap();
    assert_eq!(a.history.len(), 2);
    assert_eq!(a.history, b.history);
    for f in [LAST_FILE, BEST_ANGLE_FILE, BEST_SPEED_FILE, HISTORY_FILE] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        read_history(&d1.path().join(HISTORY_FILE)).unwrap(),
        a.history
    );
    let header = std::fs::read_to_string(d1.path().join(HISTORY_FILE)).unwrap();
    assert!(header.starts_with("epoch,lr,train_loss,val_angle_mse,val_speed_mse\n"));
    for curve in [a.best_angle_curve(), a.best_speed_curve()] {
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    }
    // the stored best-angle checkpoint reproduces its recorded score
    let best = Checkpoint::load(&a.best_angle).unwrap();
    let (vaa, _) = validation_mse(&best.model, best.norm_stats().unwrap(), &va).unwrap();
    assert_eq!(vaa, a.best_angle_curve()[1]);
    let c = train_on(&spec, &tr, &va, &quick_cfg(5), d2.path()).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn one_step_reduces_batch_loss() {
    let tr = chapters(2, 40, Split::Train);
    let stats = fit_norm_stats(&tr).unwrap();
    for seed in 0..5 {
        let spec = toy(Variant::M2Single);
        let mut model = build_model(&spec, seed).unwrap();
        let builder = BatchBuilder::new(&spec, &stats).unwrap();
        let samples: Vec<_> = eligible_samples(&spec, &tr)
            .into_iter()
            .step_by(5)
            .take(12)
            .collect();
        let batch = builder.build(&tr, &samples, None).unwrap();
        let batch_loss = |m: &Model| {
            let mut g = Graph::new(&m.store);
            let mut rng = stream(seed, 9);
            let mut cx = Ctx::train(&mut g, &mut rng);
            let (a, v) = m.forward_graph(&mut cx, &batch).unwrap();
            let l = loss_graph(&mut g, a, v, batch.targets.as_ref().unwrap()).unwrap();
            g.value(l).iter().next().copied().unwrap()
        };
        let before = batch_loss(&model);
        let mut adam = Adam::new(1e-3, (0.9, 0.999), 0.0);
        let mut rng = stream(seed, 9);
        let reported = train_step(&mut model, &mut adam, &batch, &mut rng).unwrap();
        assert_eq!(reported, before);
        let after = batch_loss(&model);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn non_finite_loss_is_reported_with_position() {
    let tr = chapters(2, 40, Split::Train);
    let va = chapters(1, 30, Split::Validation);
    let cfg = TrainConfig {
        lr0: 1e250,
        ..quick_cfg(0)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train_on(&toy(Variant::M2Single), &tr, &va, &cfg, dir.path()).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { epoch: 0, .. }),
        "{err}"
    );
}

#[test]
fn empty_or_invalid_inputs_are_rejected() {
    let tr = chapters(1, 40, Split::Train);
    let dir = tempfile::tempdir().unwrap();
    assert!(train_on(&toy(Variant::M1), &tr, &[], &quick_cfg(0), dir.path()).is_err());
    assert!(train_on(&toy(Variant::M1), &[], &tr, &quick_cfg(0), dir.path()).is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..quick_cfg(0)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn chapter_prediction_marks_frames_without_history() {
    let ch = chapters(1, 300, Split::Train).remove(0);
    let stats = fit_norm_stats(std::slice::from_ref(&ch)).unwrap();
    let mut model = build_model(&toy(Variant::M2Stacked), 1).unwrap();
    let series = predict_chapter(&model, &ch, &stats).unwrap();
    assert_eq!(series.len(), 300);
    assert_eq!(series.n_present(), 291);
    assert!(series.points[..9].iter().all(|p| p.value().is_none()));
    for p in &series.points[9..] {
        let (a, v) = p.value().unwrap();
        assert!(a.is_finite() && v.is_finite() && a.abs() <= 270.0);
    }
    model.zero_output_layers();
    let flat = predict_chapter(&model, &ch, &stats).unwrap();
    for p in &flat.points[9..] {
        assert_eq!(p.value().unwrap(), (stats.angle_mean, stats.speed_mean));
    }
    let mut foreign = stats.clone();
    foreign.fitted_on = Split::Validation;
    assert!(predict_chapter(&model, &ch, &foreign).is_err());
    let ckpt = Checkpoint {
        model,
        stats: None,
        meta: Default::default(),
    };
    assert!(ckpt.norm_stats().is_err());
}
