use std::path::{Path, PathBuf};
use std::process::Command;

use drivefusion::evaluate::EvalReport;
use drivefusion::series::PredictionSeries;
use drivefusion::trajectory::read_path_csv;

const CONFIG: &str = r#"
seed = 3

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
preset = "model1"
scale = 0.125
backbone = "toy"
epochs = 1
batch_size = 16
"#;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn drivefusion(dir: &Path, args: &[&str]) -> Out {
    let out = Command::new(env!("CARGO_BIN_EXE_drivefusion"))
        .current_dir(dir)
        .env_remove("DRIVEFUSION_DATA")
        .args(args)
        .output()
        .expect("binary runs");
    Out {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Out {
    let out = drivefusion(dir, args);
    assert_eq!(
        out.code, 0,
        "{args:?}\nstdout: {}\nstderr: {}",
        out.stdout, out.stderr
    );
    out
}

fn workdir() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let root = dir.path().to_path_buf();
    (dir, root)
}

#[test]
fn pipeline_commands_chain_and_restart() {
    let (_guard, dir) = workdir();
    let c = ["--config", "run.toml"];
    let with =
        |extra: &[&str]| -> Vec<String> { c.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["gen"]);
    assert!(dir.join("runs/data/manifest.json").is_file());
    run(&["prep"]);
    assert!(dir.join("runs/data_s3_2/norm_stats.json").is_file());
    run(&["train"]);
    let last = dir.join("runs/model1/last.safetensors");
    let stamp = std::fs::metadata(&last).unwrap().modified().unwrap();

    // a completed stage with identical inputs is a no-op
    let again = run(&["train"]);
    assert!(again.stderr.contains("up to date"), "{}", again.stderr);
    assert_eq!(std::fs::metadata(&last).unwrap().modified().unwrap(), stamp);
    // different inputs over existing outputs need --force
    let clash = drivefusion(
        &dir,
        &with(&["train", "--epochs", "2"])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(clash.code, 1, "{}", clash.stderr);
    assert!(
        clash.stderr.contains("--force") || clash.stderr.contains("overwrite"),
        "{}",
        clash.stderr
    );

    run(&["predict"]);
    let preds = dir.join("runs/model1/predictions_validation.csv");
    let series = PredictionSeries::read_csv(&preds).unwrap();
    assert!(series.n_present() > 0);

    let eval = run(&[
        "eval",
        "--predictions",
        "runs/model1/predictions_validation.csv",
    ]);
    assert!(eval.stdout.contains("Overall"));
    let report =
        EvalReport::load_json(&dir.join("runs/model1/predictions_validation_report.json")).unwrap();
    assert!(report.overall.combined.is_finite() && report.n_samples > 0);
    assert!(dir
        .join("runs/model1/predictions_validation_report.txt")
        .is_file());

    // identical members ensemble to themselves
    let p = "runs/model1/predictions_validation.csv";
    run(&["ensemble", "--members", p, p, "--output", "runs/ens.csv"]);
    assert_eq!(
        PredictionSeries::read_csv(&dir.join("runs/ens.csv")).unwrap(),
        series
    );
    assert!(dir.join("runs/priors/angle_prior.json").is_file());
    run(&[
        "ensemble",
        "--members",
        p,
        p,
        "--mode",
        "mean",
        "--output",
        "runs/mean.csv",
    ]);
    assert_eq!(
        PredictionSeries::read_csv(&dir.join("runs/mean.csv")).unwrap(),
        series
    );

    // a zero-angle series dead-reckons to a straight line
    let mut straight = series.clone();
    for q in &mut straight.points {
        q.angle_deg = q.angle_deg.map(|_| 0.0);
    }
    straight.write_csv(&dir.join("straight.csv")).unwrap();
    run(&[
        "path",
        "--input",
        "straight.csv",
        "--output",
        "runs/straight_path.csv",
    ]);
    let path = read_path_csv(&dir.join("runs/straight_path.csv")).unwrap();
    assert!(path.points.len() > 2);
    assert!(path.points.iter().all(|q| q.1 == 0.0));
    assert!(path.headings.iter().all(|h| *h == 0.0));

    run(&[
        "plot",
        "--predictions",
        p,
        "--run",
        "runs/model1",
        "--histogram",
    ]);
    for f in [
        "predictions.svg",
        "path.svg",
        "loss.svg",
        "angle_histogram.svg",
    ] {
        let svg = std::fs::read_to_string(dir.join("runs/plots").join(f)).unwrap();
        assert!(svg.starts_with("<svg"), "{f}");
    }
    let svg = std::fs::read_to_string(dir.join("runs/plots/predictions.svg")).unwrap();
    assert!(svg.contains(">truth<") && svg.contains(">prediction<"));
}

#[test]
fn unknown_preset_is_a_usage_error_listing_presets() {
    let (_guard, dir) = workdir();
    let out = drivefusion(&dir, &["train", "--preset", "model9"]);
    assert_eq!(out.code, 1);
    for name in ["model1", "model1-r152", "model2-sequence", "model3"] {
        assert!(out.stderr.contains(name), "{}", out.stderr);
    }
}

#[test]
fn missing_inputs_are_data_errors_naming_the_path() {
    let (_guard, dir) = workdir();
    let out = drivefusion(&dir, &["eval", "--predictions", "nowhere.csv"]);
    assert_eq!(out.code, 2, "{}", out.stderr);
    assert!(out.stderr.contains("nowhere.csv"), "{}", out.stderr);
    let out = drivefusion(&dir, &["--out", "elsewhere", "prep"]);
    assert_eq!(out.code, 2, "{}", out.stderr);
    assert!(
        out.stderr.contains("elsewhere/data/manifest.json"),
        "{}",
        out.stderr
    );
    let out = drivefusion(&dir, &["--config", "absent.toml", "gen"]);
    assert_eq!(out.code, 2, "{}", out.stderr);
}

#[test]
fn bad_flags_are_usage_errors() {
    let (_guard, dir) = workdir();
    assert_eq!(drivefusion(&dir, &["train", "--scale"]).code, 1);
    assert_eq!(drivefusion(&dir, &["frobnicate"]).code, 1);
    assert_eq!(
        drivefusion(&dir, &["train", "--scale", "-1", "--config", "run.toml"]).code,
        1
    );
    assert_eq!(drivefusion(&dir, &["--help"]).code, 0);
}

#[test]
fn data_root_defaults_to_the_environment() {
    let (_guard, dir) = workdir();
    let out = Command::new(env!("CARGO_BIN_EXE_drivefusion"))
        .current_dir(&dir)
        .env("DRIVEFUSION_DATA", dir.join("envdata"))
        .args(["prep"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("envdata"));
}
