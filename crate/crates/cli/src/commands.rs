//! Command implementations. Each writes into its own output directory and
//! finishes with `config.json` (the effective configuration) plus
//! `manifest.json` listing every file produced, so a run can be reproduced
//! from the directory alone.

use std::path::Path;

use capcast_core::config::{seed_for, RunConfig};
use capcast_core::diffusion::{build_schedule, sample_ensemble, train, TrainConfig};
use capcast_core::error::{CoreError, Result};
use capcast_core::eval::{
    emit_report, make_folds, make_windows, run_experiment, run_feature_ablation,
    run_model_ablation, ExperimentConfig, ExperimentOutput, FeatureMode, WindowSpec,
};
use capcast_core::features::{
    fit_normalizer, select_features, selection_candidates, FeatureTable, Normalizer,
};
use capcast_core::ingest;
use capcast_core::model::{CduaConfig, CduaModel};
use capcast_core::synth;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Finish a run directory: effective config, seed, and the file list.
fn write_run_metadata(cfg: &RunConfig, command: &str, out: &Path, files: &[String]) -> Result<()> {
    std::fs::write(out.join("config.json"), cfg.to_json_pretty())?;
    let mut entries = Vec::new();
    for name in files.iter().chain([&"config.json".to_string()]) {
        let meta = std::fs::metadata(out.join(name))?;
        entries.push(serde_json::json!({ "name": name, "bytes": meta.len() }));
    }
    let manifest = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "files": entries,
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let fleet = synth::generate_fleet(&cfg.synth, &cfg.ingest, seed_for(cfg.seed, "synth"))?;
    let mut files = Vec::new();
    if !fleet.records.is_empty() {
        synth::write_raw_logs(&fleet.records, &out.join("raw_logs.csv"))?;
        files.push("raw_logs.csv".to_string());
    }
    fleet.table.write_csv(&out.join("features.csv"))?;
    files.push("features.csv".to_string());
    synth::write_ground_truth(&fleet.ground_truth, &out.join("ground_truth.csv"))?;
    files.push("ground_truth.csv".to_string());
    println!(
        "synth: {} vehicles x {} weeks -> {} rows{}",
        cfg.synth.vehicles,
        cfg.synth.weeks,
        fleet.table.rows.len(),
        if fleet.records.is_empty() {
            " (weekly mode)".to_string()
        } else {
            format!(", {} raw records", fleet.records.len())
        }
    );
    write_run_metadata(cfg, "synth", out, &files)
}

pub fn cmd_ingest(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let result = ingest::ingest_log_file(input, &cfg.ingest)?;
    ingest::write_weekly_labels(&result.weekly, &out.join("labels.csv"))?;
    let table = capcast_core::features::build_feature_table(&result.week_segments, &result.weekly)?;
    table.write_csv(&out.join("features.csv"))?;
    println!(
        "ingest: {} rows parsed ({} skipped), {} segments ({} valid), {} weekly rows",
        result.summary.parse.rows,
        result.summary.parse.skipped,
        result.summary.segments_total,
        result.summary.segments_valid,
        table.rows.len()
    );
    for (reason, count) in &result.summary.rejections {
        println!("  rejected {count}: {reason}");
    }
    write_run_metadata(
        cfg,
        "ingest",
        out,
        &["labels.csv".to_string(), "features.csv".to_string()],
    )
}

pub fn cmd_features(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let table = FeatureTable::read_csv(input)?;
    let selection = select_features(&table, &cfg.features, &cfg.gbdt)?;
    capcast_core::features::write_selection_json(&selection, &out.join("selection.json"))?;
    println!(
        "features: F1 {} + F2 {} -> F3 {} ({:?})",
        selection.f1.len(),
        selection.f2.len(),
        selection.f3.len(),
        selection.f3
    );
    write_run_metadata(cfg, "features", out, &["selection.json".to_string()])
}

/// Resolve the configured feature set against a table.
fn resolve_feature_names(cfg: &RunConfig, table: &FeatureTable) -> Result<Vec<String>> {
    match cfg.eval.feature_set.as_str() {
        "all" => Ok(selection_candidates()),
        "custom" => {
            let known = selection_candidates();
            for name in &cfg.eval.custom_features {
                if !known.contains(name) {
                    return Err(CoreError::Config(format!("unknown feature `{name}`")));
                }
            }
            Ok(cfg.eval.custom_features.clone())
        }
        "f1" | "f2" | "f3" => {
            let selection = select_features(table, &cfg.features, &cfg.gbdt)?;
            Ok(match cfg.eval.feature_set.as_str() {
                "f1" => selection.f1,
                "f2" => selection.f2,
                _ => selection.f3,
            })
        }
        other => Err(CoreError::Config(format!("unknown feature set `{other}`"))),
    }
}

pub fn cmd_train(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let table = FeatureTable::read_csv(input)?;
    let feature_names = resolve_feature_names(cfg, &table)?;
    let rows: Vec<&capcast_core::features::WeeklyFeatureRow> = table.rows.iter().collect();
    let normalizer = fit_normalizer(
        &rows,
        &feature_names,
        &table.catalog,
        cfg.model.horizon,
        cfg.features.normalizer_slack,
    )?;
    let spec = WindowSpec {
        history_len: cfg.model.history_len,
        horizon: cfg.model.horizon,
        stride: 1,
        max_gap: cfg.eval.max_gap_interp,
    };
    let mut windows = Vec::new();
    for id in table.vehicle_ids() {
        let rows = table.rows_for(&id);
        windows.extend(
            make_windows(&rows, &spec, &normalizer, cfg.model.condition_on_capacity)?
                .into_iter()
                .map(|w| w.window),
        );
    }
    if windows.is_empty() {
        return Err(CoreError::Validation(
            "no training windows; series too short for the window shape".into(),
        ));
    }
    let schedule = build_schedule(
        cfg.diffusion.timesteps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    let cdua_cfg = CduaConfig::from_model_config(&cfg.model, feature_names.len());
    let mut model = CduaModel::new(cdua_cfg, seed_for(cfg.seed, "init"))?;
    let report = train(
        &mut model,
        &windows,
        &schedule,
        &TrainConfig {
            epochs: cfg.diffusion.epochs,
            batch_size: cfg.diffusion.batch_size,
            learning_rate: cfg.diffusion.learning_rate,
            seed: seed_for(cfg.seed, "train"),
        },
    )?;

    let ckpt = out.join("checkpoint");
    model.save(&ckpt)?;
    std::fs::write(
        ckpt.join("normalizer.json"),
        serde_json::to_string_pretty(&normalizer)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?,
    )?;
    let mut wtr = csv::WriterBuilder::new().from_path(out.join("loss_history.csv"))?;
    wtr.write_record(["epoch", "loss"])?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        wtr.write_record([epoch.to_string(), format!("{loss:.9}")])?;
    }
    wtr.flush()?;
    println!(
        "train: {} windows, {} epochs, loss {:.5} -> {:.5}",
        windows.len(),
        report.epoch_losses.len(),
        report.epoch_losses.first().unwrap_or(&f64::NAN),
        report.epoch_losses.last().unwrap_or(&f64::NAN)
    );
    write_run_metadata(
        cfg,
        "train",
        out,
        &[
            "checkpoint/manifest.json".to_string(),
            "checkpoint/weights.bin".to_string(),
            "checkpoint/config.json".to_string(),
            "checkpoint/normalizer.json".to_string(),
            "loss_history.csv".to_string(),
        ],
    )
}

fn load_checkpoint(dir: &Path) -> Result<(CduaModel, Normalizer)> {
    let model = CduaModel::load(dir)?;
    let norm_path = dir.join("normalizer.json");
    if !norm_path.exists() {
        return Err(CoreError::Checkpoint(format!(
            "missing normalizer.json in {}",
            dir.display()
        )));
    }
    let normalizer: Normalizer = serde_json::from_str(&std::fs::read_to_string(norm_path)?)
        .map_err(|e| CoreError::Checkpoint(format!("bad normalizer.json: {e}")))?;
    Ok((model, normalizer))
}

pub fn cmd_forecast(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    vehicle: Option<&str>,
) -> Result<()> {
    ensure_dir(out)?;
    let (model, normalizer) = load_checkpoint(checkpoint)?;
    let table = FeatureTable::read_csv(input)?;
    let vehicles: Vec<String> = match vehicle {
        Some(v) => {
            if !table.rows.iter().any(|r| r.vehicle_id == v) {
                return Err(CoreError::Validation(format!("vehicle `{v}` not in input")));
            }
            vec![v.to_string()]
        }
        None => table.vehicle_ids(),
    };
    let schedule = build_schedule(
        cfg.diffusion.timesteps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    let horizon = model.config.horizon;
    let history_len = model.config.history_len;

    let mut wtr = csv::Writer::from_path(out.join("forecast.csv"))?;
    wtr.write_record(["vehicle_id", "week", "mean_ah", "std_ah", "lower95_ah", "upper95_ah"])?;
    let mut traj_rows: Vec<(String, u32, Vec<f64>)> = Vec::new();
    let mut forecasted = 0usize;
    for id in &vehicles {
        let rows = table.rows_for(id);
        // forecasting conditions on the history block ending at the newest
        // observed week; no future targets exist yet
        let Some(block) = latest_history_block(&rows, history_len, &normalizer, &model)? else {
            log::warn!("vehicle `{id}`: series shorter than {history_len} weeks, skipped");
            continue;
        };
        let (x, anchor, last_week) = block;
        let ctx = model.encode_context(&x)?;
        let ens = sample_ensemble(
            &model,
            &schedule,
            &ctx,
            horizon,
            cfg.diffusion.ensemble,
            seed_for(cfg.seed, &format!("forecast/{id}/{last_week}")),
            cfg.diffusion.ci_z,
        )?;
        let ens = ens.affine(anchor, normalizer.delta_scale)?;
        for h in 0..horizon {
            let week = last_week + 1 + h as u32;
            wtr.write_record([
                id.as_str(),
                &week.to_string(),
                &format!("{:.6}", ens.mean[h]),
                &format!("{:.6}", ens.std[h]),
                &format!("{:.6}", ens.lower[h]),
                &format!("{:.6}", ens.upper[h]),
            ])?;
            traj_rows.push((
                id.clone(),
                week,
                ens.trajectories.iter().map(|t| t[h]).collect(),
            ));
        }
        forecasted += 1;
    }
    wtr.flush()?;
    let mut files = vec!["forecast.csv".to_string()];
    if cfg.eval.dump_trajectories {
        let mut wtr = csv::Writer::from_path(out.join("trajectories.csv"))?;
        let mut header = vec!["vehicle_id".to_string(), "week".into()];
        for i in 0..cfg.diffusion.ensemble {
            header.push(format!("traj_{i}"));
        }
        wtr.write_record(&header)?;
        for (id, week, traj) in &traj_rows {
            let mut rec = vec![id.clone(), week.to_string()];
            rec.extend(traj.iter().map(|v| format!("{v:.6}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        files.push("trajectories.csv".to_string());
    }
    println!("forecast: {forecasted} vehicles, horizon {horizon}");
    write_run_metadata(cfg, "forecast", out, &files)
}

/// Normalized history block ending at the newest available week, plus its
/// anchor and that week's index.
fn latest_history_block(
    rows: &[&capcast_core::features::WeeklyFeatureRow],
    history_len: usize,
    normalizer: &Normalizer,
    model: &CduaModel,
) -> Result<Option<(capcast_core::nn::Tensor, f64, u32)>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let mut sorted: Vec<&capcast_core::features::WeeklyFeatureRow> = rows.to_vec();
    sorted.sort_by_key(|r| r.week);
    if sorted.len() < history_len {
        return Ok(None);
    }
    let tail = &sorted[sorted.len() - history_len..];
    // require a contiguous tail; interpolation already happened upstream in
    // evaluation flows, so a gappy tail here is a data problem worth refusing
    for pair in tail.windows(2) {
        if pair[1].week != pair[0].week + 1 {
            return Err(CoreError::Validation(format!(
                "vehicle `{}`: non-contiguous final {history_len} weeks (gap at {})",
                pair[0].vehicle_id, pair[1].week
            )));
        }
    }
    let anchor = tail[history_len - 1].capacity;
    let d = normalizer.feature_names.len();
    let channels = d + usize::from(model.config.condition_on_capacity);
    let mut x = capcast_core::nn::Tensor::zeros(&[1, history_len, channels]);
    let catalog = capcast_core::features::feature_catalog();
    for (i, row) in tail.iter().enumerate() {
        for (j, name) in normalizer.feature_names.iter().enumerate() {
            let raw = row
                .candidate(name, &catalog)
                .ok_or_else(|| CoreError::Schema(format!("missing feature `{name}`")))?;
            x.data_mut()[i * channels + j] = normalizer.norm_feature(j, raw);
        }
        if model.config.condition_on_capacity {
            x.data_mut()[i * channels + d] =
                normalizer.norm_capacity_anchored(anchor, row.capacity);
        }
    }
    let last_week = tail[history_len - 1].week;
    Ok(Some((x, anchor, last_week)))
}

fn experiment_config(cfg: &RunConfig) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        model: cfg.model.clone(),
        diffusion: cfg.diffusion.clone(),
        features: cfg.features.clone(),
        gbdt: cfg.gbdt.clone(),
        history_lens: cfg.eval.history_lens.clone(),
        stride: 1,
        max_gap: cfg.eval.max_gap_interp,
        feature_mode: FeatureMode::parse(&cfg.eval.feature_set, &cfg.eval.custom_features)?,
        seed: cfg.seed,
        collect_trajectories: cfg.eval.dump_trajectories,
    })
}

fn finish_experiment(
    cfg: &RunConfig,
    command: &str,
    output: &ExperimentOutput,
    out: &Path,
) -> Result<()> {
    let files = emit_report(output, out)?;
    for row in &output.rows {
        println!(
            "{} {} L={} fold {}: rmse {:.3}% mae {:.3}% ciw {:.3}% picp {:.1}% (n={})",
            row.variant,
            row.feature_set,
            row.horizon,
            row.fold,
            row.rmse_rel,
            row.mae_rel,
            row.ci_width_rel,
            row.picp,
            row.n_points
        );
    }
    write_run_metadata(cfg, command, out, &files)
}

pub fn cmd_evaluate(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let table = FeatureTable::read_csv(input)?;
    let plan = make_folds(&table.vehicle_ids(), cfg.eval.folds, seed_for(cfg.seed, "folds"))?;
    let exp = experiment_config(cfg)?;
    let output = run_experiment(&table, &plan, &exp)?;
    finish_experiment(cfg, "evaluate", &output, out)
}

pub fn cmd_ablate(cfg: &RunConfig, input: &Path, mode: &str, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let table = FeatureTable::read_csv(input)?;
    let plan = make_folds(&table.vehicle_ids(), cfg.eval.folds, seed_for(cfg.seed, "folds"))?;
    let exp = experiment_config(cfg)?;
    let output = match mode {
        "features" => run_feature_ablation(&table, &plan, &exp)?,
        "model" => run_model_ablation(&table, &plan, &exp)?,
        other => {
            return Err(CoreError::Config(format!(
                "ablate mode must be `features` or `model`, got `{other}`"
            )))
        }
    };
    finish_experiment(cfg, "ablate", &output, out)
}
