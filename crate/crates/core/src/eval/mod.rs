//! Metrics, fold and window construction, rolling-forecast experiments, and
//! the feature/model ablation drivers.
//!
//! Relative metrics divide by each vehicle's first smoothed weekly capacity
//! and report percent. Fleet-level numbers are sample-count-weighted means of
//! the per-vehicle values. Train/test hygiene is structural: normalizer
//! fitting, feature selection, and training only ever see rows filtered
//! through the fold's training split, and an overlapping split aborts the
//! experiment.

pub mod plots;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    seed_for, DiffusionConfig, FeatureConfig, GbdtConfig, ModelConfig, ModelVariant,
};
use crate::diffusion::{
    build_schedule, sample_ensemble, train, SupervisedWindow, TrainConfig,
};
use crate::error::{CoreError, Result};
use crate::features::{
    fit_normalizer, select_features, selection_candidates, FeatureTable, Normalizer,
    WeeklyFeatureRow,
};
use crate::model::{CduaConfig, CduaModel};
use crate::nn::Tensor;

// ---------------------------------------------------------------------------
// point metrics

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(CoreError::Validation("rmse needs equal non-empty inputs".into()));
    }
    let acc: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((acc / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(CoreError::Validation("mae needs equal non-empty inputs".into()));
    }
    let acc: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(acc / y.len() as f64)
}

/// Mean interval width; bounds must not be inverted.
pub fn ci_width(lower: &[f64], upper: &[f64]) -> Result<f64> {
    if lower.is_empty() || lower.len() != upper.len() {
        return Err(CoreError::Validation("ci_width needs equal non-empty inputs".into()));
    }
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Err(CoreError::Validation("interval bounds inverted".into()));
    }
    Ok(lower.iter().zip(upper).map(|(l, u)| u - l).sum::<f64>() / lower.len() as f64)
}

/// Percent of targets inside the closed interval.
pub fn picp(y: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != lower.len() || y.len() != upper.len() {
        return Err(CoreError::Validation("picp needs equal non-empty inputs".into()));
    }
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Err(CoreError::Validation("interval bounds inverted".into()));
    }
    let inside = y
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(v, (l, u))| **l <= **v && **v <= **u)
        .count();
    Ok(100.0 * inside as f64 / y.len() as f64)
}

/// Metric in Ah to percent of a reference capacity.
pub fn relativize(metric_ah: f64, reference_ah: f64) -> Result<f64> {
    if reference_ah == 0.0 {
        return Err(CoreError::Numeric("zero reference capacity".into()));
    }
    Ok(100.0 * metric_ah / reference_ah)
}

// ---------------------------------------------------------------------------
// folds

/// Vehicle-level cross-validation plan. Test sets partition the fleet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    /// k = 1 puts every vehicle in both train and test.
    pub degenerate: bool,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        if self.degenerate {
            return self.folds[fold].clone();
        }
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle then near-equal partition; 20 vehicles at k=5 gives five
/// disjoint sets of four.
pub fn make_folds(vehicle_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(CoreError::InvalidParam("k must be >= 1".into()));
    }
    if vehicle_ids.is_empty() {
        return Err(CoreError::Validation("no vehicles to fold".into()));
    }
    if k > vehicle_ids.len() {
        return Err(CoreError::InvalidParam(format!(
            "k={k} exceeds {} vehicles",
            vehicle_ids.len()
        )));
    }
    use rand::{Rng, SeedableRng};
    let mut order: Vec<String> = vehicle_ids.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan {
        folds,
        degenerate: k == 1,
    })
}

// ---------------------------------------------------------------------------
// windows

#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    pub history_len: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Missing-week runs up to this length are linearly interpolated; longer
    /// runs drop any window that touches them.
    pub max_gap: u32,
}

/// A supervised window plus the bookkeeping needed to score it.
#[derive(Debug, Clone)]
pub struct EvalWindow {
    pub window: SupervisedWindow,
    pub vehicle_id: String,
    pub start_week: u32,
    pub future_weeks: Vec<u32>,
    /// Raw Ah targets; `None` where the target is masked padding.
    pub y_true_ah: Vec<Option<f64>>,
    /// Last observed history capacity; the window's normalization anchor.
    pub anchor_ah: f64,
}

struct GridCell {
    capacity: f64,
    features: Vec<f64>,
    available: bool,
}

/// Dense week grid with linear interpolation of short gaps.
fn build_grid(rows: &[&WeeklyFeatureRow], max_gap: u32) -> (u32, Vec<GridCell>) {
    debug_assert!(!rows.is_empty());
    let week0 = rows.iter().map(|r| r.week).min().unwrap();
    let week1 = rows.iter().map(|r| r.week).max().unwrap();
    let n = (week1 - week0 + 1) as usize;
    let n_feat = rows[0].features.len();
    let mut grid: Vec<GridCell> = (0..n)
        .map(|_| GridCell {
            capacity: 0.0,
            features: vec![0.0; n_feat],
            available: false,
        })
        .collect();
    for row in rows {
        let at = (row.week - week0) as usize;
        grid[at].capacity = row.capacity;
        grid[at].features = row.features.clone();
        grid[at].available = true;
    }
    // interpolate interior runs of length <= max_gap
    let mut i = 0usize;
    while i < n {
        if grid[i].available {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < n && !grid[i].available {
            i += 1;
        }
        let run_len = i - run_start;
        if run_start == 0 || i == n || run_len > max_gap as usize {
            continue; // leading/trailing gaps stay missing
        }
        let left = run_start - 1;
        let right = i;
        for j in run_start..i {
            let f = (j - left) as f64 / (right - left) as f64;
            grid[j].capacity =
                grid[left].capacity * (1.0 - f) + grid[right].capacity * f;
            grid[j].features = (0..n_feat)
                .map(|k| grid[left].features[k] * (1.0 - f) + grid[right].features[k] * f)
                .collect();
            grid[j].available = true;
        }
    }
    (week0, grid)
}

/// Sliding windows over one vehicle's rows. Histories must be fully
/// available; futures may run past the series end (masked) but a long gap
/// inside the horizon drops the window. Windows carry normalized inputs.
pub fn make_windows(
    rows: &[&WeeklyFeatureRow],
    spec: &WindowSpec,
    normalizer: &Normalizer,
    condition_on_capacity: bool,
) -> Result<Vec<EvalWindow>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    if spec.stride == 0 {
        return Err(CoreError::InvalidParam("stride must be >= 1".into()));
    }
    let vehicle = rows[0].vehicle_id.clone();
    let (week0, grid) = build_grid(rows, spec.max_gap);
    let n = grid.len();
    let (l, h) = (spec.history_len, spec.horizon);
    if n < l {
        return Ok(Vec::new());
    }
    let d = normalizer.feature_names.len();
    let channels = d + usize::from(condition_on_capacity);
    let feature_indices: Vec<Option<usize>> = normalizer
        .feature_names
        .iter()
        .map(|name| {
            if name == crate::features::WEEK_FEATURE {
                Ok(None)
            } else {
                feature_index(name).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + l <= n {
        let hist = &grid[start..start + l];
        if hist.iter().all(|c| c.available) {
            let anchor = hist[l - 1].capacity;
            let mut dropped = false;
            let mut y0 = Vec::with_capacity(h);
            let mut mask = Vec::with_capacity(h);
            let mut y_true = Vec::with_capacity(h);
            let mut future_weeks = Vec::with_capacity(h);
            for step in 0..h {
                let idx = start + l + step;
                future_weeks.push(week0 + (start + l + step) as u32);
                if idx >= n {
                    y0.push(0.0);
                    mask.push(false);
                    y_true.push(None);
                } else if grid[idx].available {
                    y0.push(normalizer.norm_capacity_anchored(anchor, grid[idx].capacity));
                    mask.push(true);
                    y_true.push(Some(grid[idx].capacity));
                } else {
                    dropped = true;
                    break;
                }
            }
            if !dropped && mask.iter().any(|&m| m) {
                let mut x = Tensor::zeros(&[l, channels]);
                for (i, cell) in hist.iter().enumerate() {
                    for (j, name) in normalizer.feature_names.iter().enumerate() {
                        let raw = if name == crate::features::WEEK_FEATURE {
                            (week0 + (start + i) as u32) as f64
                        } else {
                            cell.features[feature_indices[j].expect("non-week feature")]
                        };
                        x.data_mut()[i * channels + j] = normalizer.norm_feature(j, raw);
                    }
                    if condition_on_capacity {
                        x.data_mut()[i * channels + d] =
                            normalizer.norm_capacity_anchored(anchor, cell.capacity);
                    }
                }
                out.push(EvalWindow {
                    window: SupervisedWindow::new(x, y0, mask),
                    vehicle_id: vehicle.clone(),
                    start_week: week0 + start as u32,
                    future_weeks,
                    y_true_ah: y_true,
                    anchor_ah: anchor,
                });
            }
        }
        start += spec.stride;
    }
    Ok(out)
}

/// Catalog position of a selected feature name; `week` never reaches here.
fn feature_index(name: &str) -> Result<usize> {
    crate::features::feature_catalog()
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| CoreError::InvalidParam(format!("unknown feature `{name}`")))
}

// ---------------------------------------------------------------------------
// experiments

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureMode {
    F1,
    F2,
    F3,
    All,
    Custom(Vec<String>),
}

impl FeatureMode {
    pub fn label(&self) -> String {
        match self {
            FeatureMode::F1 => "f1".into(),
            FeatureMode::F2 => "f2".into(),
            FeatureMode::F3 => "f3".into(),
            FeatureMode::All => "all".into(),
            FeatureMode::Custom(_) => "custom".into(),
        }
    }

    pub fn parse(s: &str, custom: &[String]) -> Result<Self> {
        match s {
            "f1" => Ok(FeatureMode::F1),
            "f2" => Ok(FeatureMode::F2),
            "f3" => Ok(FeatureMode::F3),
            "all" => Ok(FeatureMode::All),
            "custom" => {
                if custom.is_empty() {
                    return Err(CoreError::Config(
                        "feature_set=custom needs custom_features".into(),
                    ));
                }
                Ok(FeatureMode::Custom(custom.to_vec()))
            }
            other => Err(CoreError::Config(format!("unknown feature set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub features: FeatureConfig,
    pub gbdt: GbdtConfig,
    pub history_lens: Vec<usize>,
    pub stride: usize,
    pub max_gap: u32,
    pub feature_mode: FeatureMode,
    pub seed: u64,
    pub collect_trajectories: bool,
}

/// One line of metrics.json.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub feature_set: String,
    pub horizon: usize,
    pub fold: usize,
    pub rmse_rel: f64,
    pub mae_rel: f64,
    pub ci_width_rel: f64,
    pub picp: f64,
    pub n_points: usize,
}

/// One scored forecast point, with its raw trajectories when dumping is on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub variant: String,
    pub feature_set: String,
    pub horizon: usize,
    pub fold: usize,
    pub vehicle_id: String,
    pub week: u32,
    pub y_true_ah: f64,
    pub mean_ah: f64,
    pub std_ah: f64,
    pub lower_ah: f64,
    pub upper_ah: f64,
    pub reference_ah: f64,
    pub trajectories: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<ForecastRecord>,
}

fn table_from_rows(rows: &[&WeeklyFeatureRow]) -> FeatureTable {
    FeatureTable::new(rows.iter().map(|r| (*r).clone()).collect())
}

/// First smoothed weekly capacity per vehicle, the relative-metric reference.
pub fn vehicle_references(table: &FeatureTable) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, (u32, f64)> = BTreeMap::new();
    for row in &table.rows {
        let slot = out
            .entry(row.vehicle_id.clone())
            .or_insert((row.week, row.capacity));
        if row.week < slot.0 {
            *slot = (row.week, row.capacity);
        }
    }
    out.into_iter().map(|(k, (_, c))| (k, c)).collect()
}

fn resolve_features(
    mode: &FeatureMode,
    train_table: &FeatureTable,
    cfg: &ExperimentConfig,
) -> Result<Vec<String>> {
    let names = match mode {
        FeatureMode::All => selection_candidates(),
        FeatureMode::Custom(list) => {
            let known = selection_candidates();
            for name in list {
                if !known.contains(name) {
                    return Err(CoreError::Config(format!("unknown feature `{name}`")));
                }
            }
            list.clone()
        }
        FeatureMode::F1 | FeatureMode::F2 | FeatureMode::F3 => {
            let selection = select_features(train_table, &cfg.features, &cfg.gbdt)?;
            match mode {
                FeatureMode::F1 => selection.f1,
                FeatureMode::F2 => selection.f2,
                _ => selection.f3,
            }
        }
    };
    if names.is_empty() {
        return Err(CoreError::Validation(
            "feature selection produced an empty set".into(),
        ));
    }
    Ok(names)
}

/// Cross-validated rolling-forecast experiment: per fold and history length,
/// select features and fit the normalizer on training vehicles only, train
/// the diffusion model, then score ensembles on the held-out vehicles.
pub fn run_experiment(
    table: &FeatureTable,
    plan: &FoldPlan,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let references = vehicle_references(table);
    let schedule = build_schedule(
        cfg.diffusion.timesteps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    let variant_label = cfg.model.variant.name().to_string();
    let feature_label = cfg.feature_mode.label();
    let mut out = ExperimentOutput::default();

    for fold in 0..plan.k() {
        let test_ids = plan.folds[fold].clone();
        let train_ids = plan.train_ids(fold);
        if !plan.degenerate {
            for id in &train_ids {
                if test_ids.contains(id) {
                    return Err(CoreError::Validation(format!(
                        "fold {fold}: vehicle `{id}` leaks between train and test"
                    )));
                }
            }
        }
        let train_rows: Vec<&WeeklyFeatureRow> = table
            .rows
            .iter()
            .filter(|r| train_ids.contains(&r.vehicle_id))
            .collect();
        if train_rows.is_empty() {
            return Err(CoreError::Validation(format!("fold {fold} has no training rows")));
        }
        let train_table = table_from_rows(&train_rows);
        let feature_names = resolve_features(&cfg.feature_mode, &train_table, cfg)?;

        for &history_len in &cfg.history_lens {
            let normalizer = fit_normalizer(
                &train_rows,
                &feature_names,
                &table.catalog,
                cfg.model.horizon,
                cfg.features.normalizer_slack,
            )?;
            let spec = WindowSpec {
                history_len,
                horizon: cfg.model.horizon,
                stride: cfg.stride,
                max_gap: cfg.max_gap,
            };
            let mut train_windows = Vec::new();
            for id in &train_ids {
                let rows = train_table.rows_for(id);
                train_windows.extend(
                    make_windows(&rows, &spec, &normalizer, cfg.model.condition_on_capacity)?
                        .into_iter()
                        .map(|w| w.window),
                );
            }
            if train_windows.is_empty() {
                return Err(CoreError::Validation(format!(
                    "fold {fold}, history {history_len}: no training windows"
                )));
            }

            let mut model_cfg = cfg.model.clone();
            model_cfg.history_len = history_len;
            let cdua_cfg = CduaConfig::from_model_config(&model_cfg, feature_names.len());
            let arm = format!("{variant_label}/{feature_label}/{fold}/{history_len}");
            let mut model = CduaModel::new(cdua_cfg, seed_for(cfg.seed, &format!("init/{arm}")))?;
            train(
                &mut model,
                &train_windows,
                &schedule,
                &TrainConfig {
                    epochs: cfg.diffusion.epochs,
                    batch_size: cfg.diffusion.batch_size,
                    learning_rate: cfg.diffusion.learning_rate,
                    seed: seed_for(cfg.seed, &format!("train/{arm}")),
                },
            )?;

            // held-out forecasts, parallel across windows
            let mut test_windows = Vec::new();
            for id in &test_ids {
                let rows: Vec<&WeeklyFeatureRow> = table.rows_for(id);
                test_windows.extend(make_windows(
                    &rows,
                    &spec,
                    &normalizer,
                    cfg.model.condition_on_capacity,
                )?);
            }
            let ensembles: Vec<crate::diffusion::ForecastEnsemble> = test_windows
                .par_iter()
                .map(|w| -> Result<crate::diffusion::ForecastEnsemble> {
                    let x = w
                        .window
                        .x
                        .clone()
                        .reshaped(vec![1, history_len, w.window.x.shape()[1]])?;
                    let ctx = model.encode_context(&x)?;
                    let norm_ens = sample_ensemble(
                        &model,
                        &schedule,
                        &ctx,
                        cfg.model.horizon,
                        cfg.diffusion.ensemble,
                        seed_for(
                            cfg.seed,
                            &format!("sample/{arm}/{}/{}", w.vehicle_id, w.start_week),
                        ),
                        cfg.diffusion.ci_z,
                    )?;
                    norm_ens.affine(w.anchor_ah, normalizer.delta_scale)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut fold_records = Vec::new();
            for (w, ens) in test_windows.iter().zip(&ensembles) {
                let reference = *references.get(&w.vehicle_id).ok_or_else(|| {
                    CoreError::Validation(format!("no reference for {}", w.vehicle_id))
                })?;
                for (step, y_true) in w.y_true_ah.iter().enumerate() {
                    let Some(y_true) = y_true else { continue };
                    fold_records.push(ForecastRecord {
                        variant: variant_label.clone(),
                        feature_set: feature_label.clone(),
                        horizon: history_len,
                        fold,
                        vehicle_id: w.vehicle_id.clone(),
                        week: w.future_weeks[step],
                        y_true_ah: *y_true,
                        mean_ah: ens.mean[step],
                        std_ah: ens.std[step],
                        lower_ah: ens.lower[step],
                        upper_ah: ens.upper[step],
                        reference_ah: reference,
                        trajectories: if cfg.collect_trajectories {
                            ens.trajectories.iter().map(|t| t[step]).collect()
                        } else {
                            Vec::new()
                        },
                    });
                }
            }
            if !fold_records.is_empty() {
                out.rows.push(summarize_records(
                    &fold_records,
                    &variant_label,
                    &feature_label,
                    history_len,
                    fold,
                )?);
            }
            out.records.extend(fold_records);
        }
    }
    Ok(out)
}

/// Per-vehicle metrics relativized then pooled by sample count.
fn summarize_records(
    records: &[ForecastRecord],
    variant: &str,
    feature_set: &str,
    horizon: usize,
    fold: usize,
) -> Result<MetricsRow> {
    let mut by_vehicle: BTreeMap<&str, Vec<&ForecastRecord>> = BTreeMap::new();
    for r in records {
        by_vehicle.entry(&r.vehicle_id).or_default().push(r);
    }
    let mut acc = (0.0, 0.0, 0.0, 0.0, 0usize); // rmse, mae, width, picp, n
    for (_, recs) in by_vehicle {
        let y: Vec<f64> = recs.iter().map(|r| r.y_true_ah).collect();
        let yh: Vec<f64> = recs.iter().map(|r| r.mean_ah).collect();
        let lo: Vec<f64> = recs.iter().map(|r| r.lower_ah).collect();
        let hi: Vec<f64> = recs.iter().map(|r| r.upper_ah).collect();
        let reference = recs[0].reference_ah;
        let n = recs.len();
        acc.0 += relativize(rmse(&y, &yh)?, reference)? * n as f64;
        acc.1 += relativize(mae(&y, &yh)?, reference)? * n as f64;
        acc.2 += relativize(ci_width(&lo, &hi)?, reference)? * n as f64;
        acc.3 += picp(&y, &lo, &hi)? * n as f64;
        acc.4 += n;
    }
    let n = acc.4 as f64;
    Ok(MetricsRow {
        variant: variant.to_string(),
        feature_set: feature_set.to_string(),
        horizon,
        fold,
        rmse_rel: acc.0 / n,
        mae_rel: acc.1 / n,
        ci_width_rel: acc.2 / n,
        picp: acc.3 / n,
        n_points: acc.4,
    })
}

/// Independent recomputation of every metrics row from dumped records. When
/// trajectories were dumped, ensemble statistics are rebuilt from them
/// instead of trusting the stored mean/std.
pub fn recompute_rows(records: &[ForecastRecord], ci_z: f64) -> Result<Vec<MetricsRow>> {
    let mut groups: BTreeMap<(String, String, usize, usize), Vec<ForecastRecord>> = BTreeMap::new();
    for r in records {
        let mut r = r.clone();
        if !r.trajectories.is_empty() {
            let n = r.trajectories.len() as f64;
            let mean = r.trajectories.iter().sum::<f64>() / n;
            let var = r
                .trajectories
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n;
            r.mean_ah = mean;
            r.std_ah = var.sqrt();
            r.lower_ah = mean - ci_z * r.std_ah;
            r.upper_ah = mean + ci_z * r.std_ah;
        }
        groups
            .entry((r.variant.clone(), r.feature_set.clone(), r.horizon, r.fold))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((variant, feature_set, horizon, fold), recs) in groups {
        rows.push(summarize_records(&recs, &variant, &feature_set, horizon, fold)?);
    }
    Ok(rows)
}

/// Three arms differing only in the feature column set; seeds and folds are
/// shared so the comparison is like for like.
pub fn run_feature_ablation(
    table: &FeatureTable,
    plan: &FoldPlan,
    base: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    for mode in [FeatureMode::F1, FeatureMode::F2, FeatureMode::F3] {
        let mut cfg = base.clone();
        cfg.feature_mode = mode;
        let arm = run_experiment(table, plan, &cfg)?;
        out.rows.extend(arm.rows);
        out.records.extend(arm.records);
    }
    Ok(out)
}

/// Four variants over shared data, folds, and seeds.
pub fn run_model_ablation(
    table: &FeatureTable,
    plan: &FoldPlan,
    base: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    for variant in [
        ModelVariant::Backbone,
        ModelVariant::NoSelfAttn,
        ModelVariant::NoCrossAttn,
        ModelVariant::Full,
    ] {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        let arm = run_experiment(table, plan, &cfg)?;
        out.rows.extend(arm.rows);
        out.records.extend(arm.records);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// report emission

pub fn write_metrics_json(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(rows)
        .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CoreError::Schema(format!("bad metrics.json: {e}")))
}

/// metrics.json, per-vehicle forecast CSVs (with trajectory columns when
/// dumped), and the three SVG plots.
pub fn emit_report(output: &ExperimentOutput, out_dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    write_metrics_json(&output.rows, &out_dir.join("metrics.json"))?;
    written.push("metrics.json".to_string());

    // forecasts grouped per vehicle
    let mut by_vehicle: BTreeMap<&str, Vec<&ForecastRecord>> = BTreeMap::new();
    for r in &output.records {
        by_vehicle.entry(&r.vehicle_id).or_default().push(r);
    }
    let n_traj = output
        .records
        .iter()
        .map(|r| r.trajectories.len())
        .max()
        .unwrap_or(0);
    for (vehicle, recs) in &by_vehicle {
        let name = format!("forecast_{vehicle}.csv");
        let mut wtr = csv::Writer::from_path(out_dir.join(&name))?;
        let mut header = vec![
            "vehicle_id".to_string(),
            "week".into(),
            "variant".into(),
            "feature_set".into(),
            "horizon".into(),
            "fold".into(),
            "y_true_ah".into(),
            "mean_ah".into(),
            "std_ah".into(),
            "lower95_ah".into(),
            "upper95_ah".into(),
        ];
        for i in 0..n_traj {
            header.push(format!("traj_{i}"));
        }
        wtr.write_record(&header)?;
        for r in recs {
            let mut rec = vec![
                r.vehicle_id.clone(),
                r.week.to_string(),
                r.variant.clone(),
                r.feature_set.clone(),
                r.horizon.to_string(),
                r.fold.to_string(),
                format!("{:.9}", r.y_true_ah),
                format!("{:.9}", r.mean_ah),
                format!("{:.9}", r.std_ah),
                format!("{:.9}", r.lower_ah),
                format!("{:.9}", r.upper_ah),
            ];
            for i in 0..n_traj {
                rec.push(
                    r.trajectories
                        .get(i)
                        .map(|v| format!("{v:.9}"))
                        .unwrap_or_default(),
                );
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        written.push(name);
    }

    // plots: band per vehicle (first arm), pooled scatter, per-variant boxes
    for (vehicle, recs) in &by_vehicle {
        let first_arm: Vec<&&ForecastRecord> = recs
            .iter()
            .filter(|r| {
                r.variant == recs[0].variant
                    && r.feature_set == recs[0].feature_set
                    && r.horizon == recs[0].horizon
                    && r.fold == recs[0].fold
            })
            .collect();
        let weeks: Vec<u32> = first_arm.iter().map(|r| r.week).collect();
        let truth: Vec<f64> = first_arm.iter().map(|r| r.y_true_ah).collect();
        let mean: Vec<f64> = first_arm.iter().map(|r| r.mean_ah).collect();
        let lower: Vec<f64> = first_arm.iter().map(|r| r.lower_ah).collect();
        let upper: Vec<f64> = first_arm.iter().map(|r| r.upper_ah).collect();
        let name = format!("forecast_band_{vehicle}.svg");
        std::fs::write(
            out_dir.join(&name),
            plots::forecast_band_svg(
                &format!("forecast band: {vehicle}"),
                &weeks,
                &truth,
                &mean,
                &lower,
                &upper,
            ),
        )?;
        written.push(name);
    }
    let y_true: Vec<f64> = output.records.iter().map(|r| r.y_true_ah).collect();
    let y_pred: Vec<f64> = output.records.iter().map(|r| r.mean_ah).collect();
    std::fs::write(
        out_dir.join("scatter.svg"),
        plots::scatter_svg("predicted vs true", &y_true, &y_pred),
    )?;
    written.push("scatter.svg".to_string());

    let mut by_variant: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &output.records {
        by_variant
            .entry(r.variant.clone())
            .or_default()
            .push((r.mean_ah - r.y_true_ah).abs());
    }
    let groups: Vec<(String, Vec<f64>)> = by_variant.into_iter().collect();
    std::fs::write(
        out_dir.join("error_box.svg"),
        plots::error_box_svg("absolute error by variant", &groups),
    )?;
    written.push("error_box.svg".to_string());

    Ok(written)
}
