//! One function per subcommand. Each resolves its inputs from the run
//! configuration and flags, then consults its stage stamp before working.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use drivefusion::dataset::{
    generate_synthetic, load_chapter, load_manifest, load_split, Chapter, DatasetManifest, Split,
};
use drivefusion::ensemble::{
    build_prior, ensemble_series, plain_average, BinPrior, ANGLE_BINS, SPEED_BINS,
};
use drivefusion::evaluate::{angle_histogram, per_zone_report};
use drivefusion::plot;
use drivefusion::preprocess::prepare_cache;
use drivefusion::series::PredictionSeries;
use drivefusion::trainer::{
    load_prepared, predict_chapter, read_history, train, Checkpoint, Preset, TrainConfig,
    HISTORY_FILE, LAST_FILE, META_TRAIN_CONFIG,
};
use drivefusion::trajectory::{integrate_path, path_length, write_path_csv};
use drivefusion::Error;
use serde_json::json;

use crate::config::{BackboneChoice, RunConfig};
use crate::stage::{file_digest, Plan, Stage};
use crate::{Cli, Command, EnsembleMode};

pub const RUN_FILE: &str = "run.json";

/// Config file, then global flags on top.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        cfg.out = out.clone();
    }
    if let Some(data) = &cli.global.data {
        cfg.data = Some(data.clone());
    }
    cfg.gen.seed = cfg.seed;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let force = cli.global.force;
    match cli.command {
        Command::Gen {
            routes,
            chapters,
            frames,
            width,
        } => {
            if let Some(v) = routes {
                cfg.gen.n_routes = v;
            }
            if let Some(v) = chapters {
                cfg.gen.chapters_per_route = v;
            }
            if let Some(v) = frames {
                cfg.gen.frames_per_chapter = v;
            }
            if let Some(w) = width {
                cfg.gen.resolution = (w, w * 9 / 16);
            }
            cfg.validate()?;
            cmd_gen(&cfg, force)
        }
        Command::Prep { tier, stride } => {
            if let Some(t) = tier {
                cfg.prep.tier = t.into();
            }
            if let Some(s) = stride {
                cfg.prep.stride = s;
            }
            cfg.validate()?;
            cmd_prep(&cfg, force)
        }
        Command::Train {
            preset,
            scale,
            backbone,
            epochs,
            batch_size,
            lr,
        } => {
            if let Some(p) = preset {
                cfg.train.preset = p;
            }
            if let Some(s) = scale {
                cfg.train.scale = s;
            }
            if let Some(b) = backbone {
                cfg.train.backbone = b;
            }
            cfg.train.epochs = epochs.or(cfg.train.epochs);
            cfg.train.batch_size = batch_size.or(cfg.train.batch_size);
            cfg.train.lr = lr.or(cfg.train.lr);
            cfg.validate()?;
            cmd_train(&cfg, force)
        }
        Command::Predict {
            checkpoint,
            preset,
            split,
            output,
        } => {
            if let Some(p) = preset {
                cfg.train.preset = p;
            }
            cfg.validate()?;
            cmd_predict(&cfg, checkpoint, split.into(), output, force)
        }
        Command::Ensemble {
            members,
            prior_angle,
            prior_speed,
            mode,
            output,
        } => cmd_ensemble(
            &cfg,
            &members,
            prior_angle,
            prior_speed,
            mode,
            output,
            force,
        ),
        Command::Eval {
            predictions,
            split,
            output,
        } => cmd_eval(&cfg, &predictions, split.into(), output, force),
        Command::Path {
            input,
            chapter,
            output,
        } => {
            cfg.kinematics.validate()?;
            cmd_path(&cfg, &input, chapter, output, force)
        }
        Command::Plot {
            predictions,
            run,
            histogram,
            chapter,
            output,
        } => cmd_plot(&cfg, predictions, run, histogram, chapter, output, force),
    }
}

fn manifest_digest(root: &Path) -> Result<String> {
    file_digest(&root.join("manifest.json"))
}

pub fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<()> {
    let root = cfg.data_root();
    let stage = Stage::new(
        "gen",
        &root,
        json!({ "gen": cfg.gen }),
        vec![root.join("manifest.json")],
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    let m = generate_synthetic(&cfg.gen, &root, true)?;
    stage.finish()?;
    println!(
        "generated {} chapters in {}",
        m.chapters.len(),
        root.display()
    );
    Ok(())
}

pub fn cmd_prep(cfg: &RunConfig, force: bool) -> Result<()> {
    let raw = cfg.data_root();
    let manifest = load_manifest(&raw)?;
    let out = cfg.prepared_root();
    let stage = Stage::new(
        "prep",
        &out,
        json!({ "source": manifest_digest(&raw)?, "tier": cfg.prep.tier, "stride": cfg.prep.stride }),
        vec![
            out.join("manifest.json"),
            out.join(drivefusion::preprocess::NORM_STATS_FILE),
        ],
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let (m, _) = prepare_cache(&manifest, cfg.prep.tier, cfg.prep.stride, &out)?;
    stage.finish()?;
    println!(
        "prepared {} chapters at {}x{}, stride {} in {}",
        m.chapters.len(),
        m.resolution.0,
        m.resolution.1,
        m.frame_stride,
        out.display()
    );
    Ok(())
}

fn prepared_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    Ok(load_manifest(&cfg.prepared_root())?)
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<()> {
    let preset = Preset::get(&cfg.train.preset)?;
    let manifest = prepared_manifest(cfg)?;
    let image_size = (
        manifest.resolution.0 as usize,
        manifest.resolution.1 as usize,
    );
    let toy = cfg.train.backbone == BackboneChoice::Toy;
    let spec = preset
        .model_spec(image_size, cfg.train.scale, toy)?
        .with_frame_stride(manifest.frame_stride);
    let mut tc = preset.train_config(cfg.seed, cfg.train.scale);
    tc.tier = cfg.prep.tier;
    tc.temporal_stride = manifest.frame_stride;
    if let Some(e) = cfg.train.epochs {
        tc.epochs = e;
    }
    if let Some(b) = cfg.train.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = cfg.train.lr {
        tc.lr0 = lr;
    }
    if preset.tier != tc.tier {
        log::info!(
            "{} reports tier {}; training on the prepared tier {}",
            preset.name,
            preset.tier,
            tc.tier
        );
    }
    let dir = cfg.run_dir();
    let run = json!({ "preset": preset.name, "model_spec": spec, "train_config": tc });
    let outputs = [
        LAST_FILE,
        drivefusion::trainer::BEST_ANGLE_FILE,
        drivefusion::trainer::BEST_SPEED_FILE,
        HISTORY_FILE,
        RUN_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();
    let stage = Stage::new(
        "train",
        &dir,
        json!({ "run": run, "data": manifest_digest(&cfg.prepared_root())? }),
        outputs,
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    let set = train(&spec, &manifest, &tc, &dir)?;
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&run)?)
        .map_err(|e| Error::io(dir.join(RUN_FILE), e))?;
    stage.finish()?;
    if let Some(last) = set.history.last() {
        println!(
            "trained {} for {} epochs: val angle mse {:.3}, val speed mse {:.3}; checkpoints in {}",
            preset.name,
            set.history.len(),
            last.val_angle_mse,
            last.val_speed_mse,
            dir.display()
        );
    }
    Ok(())
}

/// Chapters of `split` from the prepared dataset.
fn split_chapters(cfg: &RunConfig, split: Split) -> Result<Vec<Chapter>> {
    let manifest = prepared_manifest(cfg)?;
    Ok(load_split(&manifest, split)?)
}

pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    split: Split,
    output: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.run_dir().join(LAST_FILE));
    if !ckpt_path.is_file() {
        bail!(Error::Load {
            path: ckpt_path,
            reason: "checkpoint not found; train first".into()
        });
    }
    let dir = ckpt_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let output = output.unwrap_or_else(|| dir.join(format!("predictions_{}.csv", split.as_str())));
    let prepared = cfg.prepared_root();
    let stage = Stage::new(
        "predict",
        output.parent().unwrap_or(Path::new(".")),
        json!({
            "checkpoint": file_digest(&ckpt_path)?,
            "data": manifest_digest(&prepared)?,
            "split": split,
            "output": output,
        }),
        vec![output.clone()],
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let stats = ckpt.norm_stats()?;
    let tc: TrainConfig = match ckpt.meta.get(META_TRAIN_CONFIG) {
        Some(j) => serde_json::from_str(j).map_err(|e| Error::Integrity {
            path: ckpt_path.clone(),
            reason: format!("bad train config: {e}"),
        })?,
        None => bail!(Error::Integrity {
            path: ckpt_path.clone(),
            reason: "checkpoint carries no train config".into()
        }),
    };
    let manifest = load_manifest(&prepared)?;
    let chapters = load_prepared(&manifest, &tc, split)?;
    if chapters.is_empty() {
        bail!(Error::invalid(format!(
            "the {} split is empty",
            split.as_str()
        )));
    }
    let mut series = PredictionSeries::default();
    for ch in &chapters {
        series
            .points
            .extend(predict_chapter(&ckpt.model, ch, stats)?.points);
    }
    if let Some(d) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    series.write_csv(&output)?;
    stage.finish()?;
    println!(
        "wrote {} predictions ({} frames) to {}",
        series.n_present(),
        series.len(),
        output.display()
    );
    Ok(())
}

fn load_or_build_prior(
    cfg: &RunConfig,
    path: Option<PathBuf>,
    angle: bool,
) -> Result<(BinPrior, PathBuf)> {
    if let Some(p) = path {
        return Ok((BinPrior::load(&p)?, p));
    }
    let train = split_chapters(cfg, Split::Train)?;
    let values: Vec<f64> = train
        .iter()
        .flat_map(|c| &c.frames)
        .map(|f| if angle { f.angle_deg } else { f.speed_kmh })
        .collect();
    let prior = build_prior(&values, if angle { ANGLE_BINS } else { SPEED_BINS })?;
    let dir = cfg.out.join("priors");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join(if angle {
        "angle_prior.json"
    } else {
        "speed_prior.json"
    });
    prior.save(&p)?;
    Ok((prior, p))
}

pub fn cmd_ensemble(
    cfg: &RunConfig,
    members: &[PathBuf],
    prior_angle: Option<PathBuf>,
    prior_speed: Option<PathBuf>,
    mode: EnsembleMode,
    output: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let output = output.unwrap_or_else(|| cfg.out.join("ensemble").join("predictions.csv"));
    let series: Vec<PredictionSeries> = members
        .iter()
        .map(|m| PredictionSeries::read_csv(m))
        .collect::<std::result::Result<_, _>>()?;
    let (combined, stamp) = match mode {
        EnsembleMode::Mean => (
            plain_average(&series)?,
            json!({ "mode": "mean", "members": digests(members)? }),
        ),
        EnsembleMode::Weighted => {
            let (pa, pa_path) = load_or_build_prior(cfg, prior_angle, true)?;
            let (ps, ps_path) = load_or_build_prior(cfg, prior_speed, false)?;
            (
                ensemble_series(&series, &pa, &ps)?,
                json!({
                    "mode": "weighted",
                    "members": digests(members)?,
                    "priors": [file_digest(&pa_path)?, file_digest(&ps_path)?],
                }),
            )
        }
    };
    let dir = output
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let stage = Stage::new(
        "ensemble",
        dir,
        json!({ "inputs": stamp, "output": output }),
        vec![output.clone()],
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    combined.write_csv(&output)?;
    stage.finish()?;
    println!(
        "ensembled {} members into {}",
        members.len(),
        output.display()
    );
    Ok(())
}

fn digests(paths: &[PathBuf]) -> Result<Vec<String>> {
    paths.iter().map(|p| file_digest(p)).collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: &Path,
    split: Split,
    output: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let output = output.unwrap_or_else(|| with_suffix(predictions, "_report.json"));
    let table_path = output.with_extension("txt");
    let prepared = cfg.prepared_root();
    let dir = output
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let stage = Stage::new(
        "eval",
        dir,
        json!({
            "predictions": file_digest(predictions)?,
            "data": manifest_digest(&prepared)?,
            "split": split,
            "output": output,
        }),
        vec![output.clone(), table_path.clone()],
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    let pred = PredictionSeries::read_csv(predictions)?;
    let chapters = split_chapters(cfg, split)?;
    let truth = PredictionSeries::truth(&chapters);
    let report = per_zone_report(&pred, &truth, &PredictionSeries::zone_tags(&chapters))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.save_json(&output)?;
    let table = report.to_table();
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    stage.finish()?;
    print!("{table}");
    Ok(())
}

/// Present (angle, speed) values of one chapter, in frame order.
fn chapter_values(
    series: &PredictionSeries,
    chapter: Option<&str>,
) -> Result<(String, Vec<f64>, Vec<f64>)> {
    let id = match chapter {
        Some(c) => c.to_string(),
        None => series
            .points
            .first()
            .map(|p| p.chapter_id.clone())
            .ok_or_else(|| Error::invalid("prediction file is empty"))?,
    };
    let (angles, speeds): (Vec<f64>, Vec<f64>) = series
        .points
        .iter()
        .filter(|p| p.chapter_id == id)
        .filter_map(|p| p.value())
        .unzip();
    if angles.is_empty() {
        bail!(Error::invalid(format!(
            "chapter {id} has no predicted frames"
        )));
    }
    Ok((id, angles, speeds))
}

pub fn cmd_path(
    cfg: &RunConfig,
    input: &Path,
    chapter: Option<String>,
    output: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let series = PredictionSeries::read_csv(input)?;
    let (id, angles, speeds) = chapter_values(&series, chapter.as_deref())?;
    let output = output.unwrap_or_else(|| cfg.out.join("paths").join(format!("{id}.csv")));
    let dir = output
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let stage = Stage::new(
        "path",
        dir,
        json!({ "input": file_digest(input)?, "chapter": id, "kinematics": cfg.kinematics, "output": output }),
        vec![output.clone()],
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    let path = integrate_path(&angles, &speeds, &cfg.kinematics)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_path_csv(&path, &output)?;
    stage.finish()?;
    let end = path.points[path.points.len() - 1];
    println!(
        "{id}: {} steps, length {:.1} m, end ({:.1}, {:.1}) m -> {}",
        angles.len(),
        path_length(&path),
        end.0,
        end.1,
        output.display()
    );
    Ok(())
}

fn find_chapter(cfg: &RunConfig, id: &str) -> Result<Chapter> {
    let manifest = prepared_manifest(cfg)?;
    let entry = manifest
        .chapters
        .iter()
        .find(|c| c.chapter_id == id)
        .ok_or_else(|| {
            Error::invalid(format!(
                "chapter {id} is not in {}",
                manifest.root_path.display()
            ))
        })?;
    Ok(load_chapter(&manifest, entry)?)
}

pub fn cmd_plot(
    cfg: &RunConfig,
    predictions: Option<PathBuf>,
    run: Option<PathBuf>,
    histogram: bool,
    chapter: Option<String>,
    output: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    if predictions.is_none() && run.is_none() && !histogram {
        bail!(Error::invalid(
            "nothing to plot: pass --predictions, --run or --histogram"
        ));
    }
    let dir = output.unwrap_or_else(|| cfg.out.join("plots"));
    let mut outputs = Vec::new();
    let mut stamp = serde_json::Map::new();
    if let Some(p) = &predictions {
        stamp.insert("predictions".into(), json!(file_digest(p)?));
        stamp.insert("chapter".into(), json!(chapter));
        stamp.insert("kinematics".into(), json!(cfg.kinematics));
        outputs.push(dir.join("predictions.svg"));
        outputs.push(dir.join("path.svg"));
    }
    if let Some(r) = &run {
        stamp.insert("history".into(), json!(file_digest(&r.join(HISTORY_FILE))?));
        outputs.push(dir.join("loss.svg"));
    }
    if histogram {
        stamp.insert("data".into(), json!(manifest_digest(&cfg.prepared_root())?));
        outputs.push(dir.join("angle_histogram.svg"));
    }
    let stage = Stage::new(
        "plot",
        &dir,
        serde_json::Value::Object(stamp),
        outputs.clone(),
    );
    if let Plan::Skip = stage.plan(force)? {
        return Ok(());
    }
    if let Some(p) = &predictions {
        let series = PredictionSeries::read_csv(p)?;
        let (id, angles, speeds) = chapter_values(&series, chapter.as_deref())?;
        let ch = find_chapter(cfg, &id)?;
        let truth = PredictionSeries::truth(std::slice::from_ref(&ch));
        let pred = PredictionSeries {
            points: series
                .points
                .iter()
                .filter(|q| q.chapter_id == id)
                .cloned()
                .collect(),
        };
        plot::write_svg(
            &plot::predictions_svg(&pred, &truth)?,
            &dir.join("predictions.svg"),
        )?;
        let predicted = integrate_path(&angles, &speeds, &cfg.kinematics)?;
        let (ta, ts): (Vec<f64>, Vec<f64>) =
            ch.frames.iter().map(|f| (f.angle_deg, f.speed_kmh)).unzip();
        let actual = integrate_path(&ta, &ts, &cfg.kinematics)?;
        plot::write_svg(
            &plot::path_svg(&[("truth", &actual), ("prediction", &predicted)])?,
            &dir.join("path.svg"),
        )?;
    }
    if let Some(r) = &run {
        let history = read_history(&r.join(HISTORY_FILE))?;
        plot::write_svg(&plot::loss_svg(&history)?, &dir.join("loss.svg"))?;
    }
    if histogram {
        let train = split_chapters(cfg, Split::Train)?;
        let angles: Vec<f64> = train
            .iter()
            .flat_map(|c| &c.frames)
            .map(|f| f.angle_deg)
            .collect();
        let counts = angle_histogram(&angles, 5.0)?;
        plot::write_svg(
            &plot::histogram_svg(&counts, 5.0)?,
            &dir.join("angle_histogram.svg"),
        )?;
    }
    stage.finish()?;
    for o in outputs {
        println!("wrote {}", o.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_paths() {
        assert_eq!(
            with_suffix(Path::new("a/p.csv"), "_report.json"),
            PathBuf::from("a/p_report.json")
        );
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let data: anyhow::Error = Error::Load {
            path: "x".into(),
            reason: "gone".into(),
        }
        .into();
        assert_eq!(crate::exit_code(&data), 2);
        let usage: anyhow::Error = Error::invalid("bad").into();
        assert_eq!(crate::exit_code(&usage), 1);
        assert_eq!(crate::exit_code(&usage.context("while training")), 1);
        let wrapped = anyhow::Error::from(Error::Misaligned("x".into())).context("ensemble");
        assert_eq!(crate::exit_code(&wrapped), 2);
    }
}
