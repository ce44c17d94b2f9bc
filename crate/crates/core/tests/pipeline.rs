//! End-to-end pipeline checks at desk scale: synthetic fleet through ingest,
//! selection, training, forecasting, and report emission.

use capcast_core::config::{
    DiffusionConfig, FeatureConfig, GbdtConfig, IngestConfig, ModelConfig, SynthConfig,
};
use capcast_core::eval::{
    emit_report, make_folds, read_metrics_json, recompute_rows, run_experiment, ExperimentConfig,
    FeatureMode,
};
use capcast_core::features::build_feature_table;
use capcast_core::ingest;
use capcast_core::synth;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        history_len: 8,
        horizon: 4,
        channels: vec![8, 16],
        heads: 2,
        time_embed_dim: 16,
        ..ModelConfig::default()
    }
}

fn tiny_diffusion_config() -> DiffusionConfig {
    DiffusionConfig {
        timesteps: 40,
        beta_end: 0.35,
        epochs: 30,
        batch_size: 8,
        ensemble: 8,
        ..DiffusionConfig::default()
    }
}

fn tiny_experiment(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: tiny_model_config(),
        diffusion: tiny_diffusion_config(),
        features: FeatureConfig::default(),
        gbdt: GbdtConfig {
            rounds: 30,
            ..GbdtConfig::default()
        },
        history_lens: vec![8],
        stride: 1,
        max_gap: 2,
        feature_mode: FeatureMode::F3,
        seed,
        collect_trajectories: true,
    }
}

#[test]
fn raw_logs_flow_through_ingest_into_a_feature_table() {
    let cfg = SynthConfig {
        vehicles: 2,
        weeks: 10,
        sessions_per_week: 2,
        session_records: 120,
        noise_std: 0.0,
        emit_raw_logs: true,
    };
    let fleet = synth::generate_fleet(&cfg, &IngestConfig::default(), 3).unwrap();
    assert!(!fleet.records.is_empty());

    // write + reparse the raw CSV, then rebuild the table from scratch
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    synth::write_raw_logs(&fleet.records, &raw).unwrap();
    let out = ingest::ingest_log_file(&raw, &IngestConfig::default()).unwrap();
    assert_eq!(out.summary.parse.skipped, 0);
    let table = build_feature_table(&out.week_segments, &out.weekly).unwrap();
    assert_eq!(table.rows.len(), fleet.table.rows.len());
    for (a, b) in table.rows.iter().zip(&fleet.table.rows) {
        assert_eq!(a.vehicle_id, b.vehicle_id);
        assert_eq!(a.week, b.week);
        // CSV quantization of SOC bounds the reparse error well under 0.1%
        assert!((a.capacity - b.capacity).abs() < 1e-4 * a.capacity.abs());
    }
}

#[test]
fn experiment_runs_scores_and_emits_reports() {
    let cfg = SynthConfig {
        vehicles: 4,
        weeks: 26,
        noise_std: 0.25,
        emit_raw_logs: false,
        ..SynthConfig::default()
    };
    let fleet = synth::generate_fleet(&cfg, &IngestConfig::default(), 17).unwrap();
    let plan = make_folds(&fleet.table.vehicle_ids(), 2, 5).unwrap();
    let exp = tiny_experiment(9);
    let output = run_experiment(&fleet.table, &plan, &exp).unwrap();

    assert_eq!(output.rows.len(), 2, "one row per fold");
    for row in &output.rows {
        assert!(row.rmse_rel >= row.mae_rel, "rmse >= mae on every row");
        assert!(row.picp >= 0.0 && row.picp <= 100.0);
        assert!(row.ci_width_rel >= 0.0);
        assert!(row.n_points > 0);
    }
    assert!(!output.records.is_empty());
    for r in &output.records {
        assert!(r.lower_ah <= r.mean_ah && r.mean_ah <= r.upper_ah);
        assert_eq!(r.trajectories.len(), 8);
    }

    // independent recomputation from the dumped trajectories
    let recomputed = recompute_rows(&output.records, 1.96).unwrap();
    assert_eq!(recomputed.len(), output.rows.len());
    for (a, b) in output.rows.iter().zip(&recomputed) {
        assert!((a.rmse_rel - b.rmse_rel).abs() < 1e-9);
        assert!((a.mae_rel - b.mae_rel).abs() < 1e-9);
        assert!((a.ci_width_rel - b.ci_width_rel).abs() < 1e-9);
        assert!((a.picp - b.picp).abs() < 1e-9);
    }

    // report files land on disk and the json round-trips
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&output, dir.path()).unwrap();
    assert!(written.iter().any(|f| f == "metrics.json"));
    assert!(written.iter().any(|f| f.ends_with(".svg")));
    assert!(written.iter().any(|f| f.starts_with("forecast_")));
    let back = read_metrics_json(&dir.path().join("metrics.json")).unwrap();
    assert_eq!(back, output.rows);
}

#[test]
fn experiment_is_seed_deterministic() {
    let cfg = SynthConfig {
        vehicles: 3,
        weeks: 20,
        noise_std: 0.2,
        emit_raw_logs: false,
        ..SynthConfig::default()
    };
    let fleet = synth::generate_fleet(&cfg, &IngestConfig::default(), 21).unwrap();
    let plan = make_folds(&fleet.table.vehicle_ids(), 3, 2).unwrap();
    let mut exp = tiny_experiment(33);
    exp.diffusion.epochs = 10;
    let a = run_experiment(&fleet.table, &plan, &exp).unwrap();
    let b = run_experiment(&fleet.table, &plan, &exp).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.mean_ah.to_bits(), y.mean_ah.to_bits());
        assert_eq!(x.std_ah.to_bits(), y.std_ah.to_bits());
    }
}

#[test]
fn shuffled_label_control_scores_worse_than_the_trained_model() {
    // negative control: destroying the history/future relationship by
    // shuffling capacities within each vehicle must hurt point accuracy
    use rand::{Rng, SeedableRng};
    let cfg = SynthConfig {
        vehicles: 3,
        weeks: 30,
        noise_std: 0.05,
        emit_raw_logs: false,
        ..SynthConfig::default()
    };
    let fleet = synth::generate_fleet(&cfg, &IngestConfig::default(), 41).unwrap();
    let plan = make_folds(&fleet.table.vehicle_ids(), 3, 4).unwrap();
    let mut exp = tiny_experiment(55);
    exp.diffusion.epochs = 250;
    let honest = run_experiment(&fleet.table, &plan, &exp).unwrap();

    let mut shuffled = fleet.table.clone();
    // seeded random permutation of capacities within each vehicle
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for id in shuffled.vehicle_ids() {
        let idx: Vec<usize> = shuffled
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.vehicle_id == id)
            .map(|(i, _)| i)
            .collect();
        let mut caps: Vec<f64> = idx.iter().map(|&i| shuffled.rows[i].capacity).collect();
        for i in (1..caps.len()).rev() {
            let j = rng.random_range(0..=i);
            caps.swap(i, j);
        }
        for (pos, &i) in idx.iter().enumerate() {
            shuffled.rows[i].capacity = caps[pos];
        }
    }
    let control = run_experiment(&shuffled, &plan, &exp).unwrap();

    let mean_rmse = |rows: &[capcast_core::eval::MetricsRow]| {
        rows.iter().map(|r| r.rmse_rel).sum::<f64>() / rows.len() as f64
    };
    assert!(
        mean_rmse(&control.rows) > 1.5 * mean_rmse(&honest.rows),
        "control {} vs honest {}",
        mean_rmse(&control.rows),
        mean_rmse(&honest.rows)
    );
}
