//! Black-box tests of the `capcast` binary: pipeline smoke, determinism,
//! config handling, and exit-code categories.

use std::path::Path;
use std::process::{Command, Output};

fn capcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small-but-real config so CLI tests stay fast.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let config = serde_json::json!({
        "seed": 7,
        "model": {
            "history_len": 8,
            "horizon": 4,
            "channels": [8, 16],
            "heads": 2,
            "time_embed_dim": 16
        },
        "diffusion": {
            "timesteps": 30,
            "beta_end": 0.45,
            "epochs": 15,
            "batch_size": 8,
            "ensemble": 6
        },
        "eval": { "folds": 2, "history_lens": [8] },
        "synth": {
            "vehicles": 4,
            "weeks": 24,
            "session_records": 110,
            "noise_std": 0.2,
            "emit_raw_logs": false
        }
    });
    std::fs::write(&path, config.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn emit_default_config_round_trips_table_one_values() {
    let out = capcast(&["--emit-default-config"]);
    assert_success(&out);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["diffusion"]["timesteps"], 700);
    assert_eq!(cfg["diffusion"]["epochs"], 1000);
    assert_eq!(cfg["diffusion"]["batch_size"], 16);
    assert_eq!(cfg["diffusion"]["ensemble"], 40);
    assert_eq!(cfg["diffusion"]["beta_start"], 1e-4);
    assert_eq!(cfg["diffusion"]["beta_end"], 2e-2);
    assert_eq!(cfg["eval"]["folds"], 5);
    assert_eq!(cfg["synth"]["vehicles"], 20);
    assert_eq!(cfg["synth"]["weeks"], 120);
}

#[test]
fn unknown_config_key_is_rejected_with_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sead": 3}"#).unwrap();
    let out = capcast(&[
        "--config",
        bad.to_str().unwrap(),
        "synth",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "config errors exit 4");
}

#[test]
fn missing_input_file_gives_io_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = capcast(&[
        "ingest",
        "--input",
        "/nonexistent/raw.csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn wrong_schema_gives_schema_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b,c\n1,2,3\n").unwrap();
    let out = capcast(&[
        "ingest",
        "--input",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // forecast with mismatched feature columns is a schema error too
    let out = capcast(&[
        "forecast",
        "--checkpoint",
        dir.path().join("nock").to_str().unwrap(),
        "--input",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("out2").to_str().unwrap(),
    ]);
    assert!(
        matches!(out.status.code(), Some(2) | Some(3)),
        "missing checkpoint or schema: {:?}",
        out.status.code()
    );
}

#[test]
fn full_pipeline_smoke_synth_train_forecast_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let synth_dir = dir.path().join("synth");
    let out = capcast(&[
        "--config",
        &config,
        "synth",
        "--out",
        synth_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let features = synth_dir.join("features.csv");
    assert!(features.exists());
    assert!(synth_dir.join("ground_truth.csv").exists());
    assert!(synth_dir.join("manifest.json").exists());
    assert!(synth_dir.join("config.json").exists());

    // feature selection report
    let feat_dir = dir.path().join("features");
    let out = capcast(&[
        "--config",
        &config,
        "features",
        "--input",
        features.to_str().unwrap(),
        "--out",
        feat_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let selection: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(feat_dir.join("selection.json")).unwrap())
            .unwrap();
    assert!(selection["f3"].as_array().unwrap().len() >= 1);

    // train a checkpoint
    let train_dir = dir.path().join("train");
    let out = capcast(&[
        "--config",
        &config,
        "train",
        "--input",
        features.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let ckpt = train_dir.join("checkpoint");
    for file in ["manifest.json", "weights.bin", "config.json", "normalizer.json"] {
        assert!(ckpt.join(file).exists(), "missing {file}");
    }

    // forecast from it
    let fc_dir = dir.path().join("forecast");
    let out = capcast(&[
        "--config",
        &config,
        "forecast",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        features.to_str().unwrap(),
        "--out",
        fc_dir.to_str().unwrap(),
        "--vehicle",
        "v01",
    ]);
    assert_success(&out);
    let forecast = std::fs::read_to_string(fc_dir.join("forecast.csv")).unwrap();
    let mut lines = forecast.lines();
    assert_eq!(
        lines.next().unwrap(),
        "vehicle_id,week,mean_ah,std_ah,lower95_ah,upper95_ah"
    );
    assert_eq!(lines.count(), 4, "one row per horizon step");
    assert!(fc_dir.join("trajectories.csv").exists());

    // cross-validated evaluation
    let eval_dir = dir.path().join("eval");
    let out = capcast(&[
        "--config",
        &config,
        "evaluate",
        "--input",
        features.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    let rows = metrics.as_array().unwrap();
    assert_eq!(rows.len(), 2, "one row per fold");
    for row in rows {
        assert!(row["rmse_rel"].as_f64().unwrap() >= row["mae_rel"].as_f64().unwrap());
        let picp = row["picp"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&picp));
    }
    assert!(eval_dir.join("scatter.svg").exists());
    assert!(eval_dir.join("error_box.svg").exists());
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let synth_dir = dir.path().join("synth");
    assert_success(&capcast(&[
        "--config",
        &config,
        "synth",
        "--out",
        synth_dir.to_str().unwrap(),
    ]));
    let features = synth_dir.join("features.csv");

    let mut blobs = Vec::new();
    for run in ["a", "b"] {
        let train_dir = dir.path().join(run);
        assert_success(&capcast(&[
            "--config",
            &config,
            "train",
            "--input",
            features.to_str().unwrap(),
            "--out",
            train_dir.to_str().unwrap(),
        ]));
        blobs.push(std::fs::read(train_dir.join("checkpoint/weights.bin")).unwrap());
    }
    assert_eq!(blobs[0], blobs[1], "same seed must give identical checkpoints");
}

#[test]
fn commands_do_not_mutate_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let synth_dir = dir.path().join("synth");
    assert_success(&capcast(&[
        "--config",
        &config,
        "synth",
        "--out",
        synth_dir.to_str().unwrap(),
    ]));
    let features = synth_dir.join("features.csv");
    let before = std::fs::read(&features).unwrap();
    assert_success(&capcast(&[
        "--config",
        &config,
        "features",
        "--input",
        features.to_str().unwrap(),
        "--out",
        dir.path().join("f").to_str().unwrap(),
    ]));
    assert_eq!(before, std::fs::read(&features).unwrap());
}
