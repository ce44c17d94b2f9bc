//! Weekly feature table and the hybrid feature-selection stage.
//!
//! Nine base signals (current, pack voltage, SOC, max/min cell voltage, cell
//! voltage difference, max/min temperature, temperature difference) times
//! three statistics (mean, sum, population std) give the 27 weekly features;
//! the week ordinal joins them as a 28th selection candidate.
//!
//! Selection is two-route: F1 keeps candidates whose absolute pooled Pearson
//! correlation with capacity exceeds the threshold, F2 keeps candidates whose
//! normalized boosted-tree gain importance exceeds its threshold, and F3 is
//! their order-stable deduplicated union.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{FeatureConfig, GbdtConfig};
use crate::error::{CoreError, Result};
use crate::gbdt;
use crate::ingest::{ChargingSegment, VehicleWeekSegments};

pub const WEEK_FEATURE: &str = "week";

const SIGNALS: [&str; 9] = [
    "current",
    "pack_voltage",
    "soc",
    "max_cell_voltage",
    "min_cell_voltage",
    "voltage_diff",
    "max_temp",
    "min_temp",
    "temp_diff",
];
const STATS: [&str; 3] = ["mean", "sum", "std"];

/// The 27 weekly feature names, in canonical column order.
pub fn feature_catalog() -> Vec<String> {
    let mut names = Vec::with_capacity(27);
    for signal in SIGNALS {
        for stat in STATS {
            names.push(format!("{stat}_{signal}"));
        }
    }
    names
}

/// Selection candidates: the week ordinal plus the 27 catalog features.
pub fn selection_candidates() -> Vec<String> {
    let mut names = vec![WEEK_FEATURE.to_string()];
    names.extend(feature_catalog());
    names
}

/// One vehicle-week: capacity label plus the 27 aggregate features in
/// catalog order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklyFeatureRow {
    pub vehicle_id: String,
    pub week: u32,
    pub capacity: f64,
    pub features: Vec<f64>,
}

impl WeeklyFeatureRow {
    /// Value of a selection candidate by name.
    pub fn candidate(&self, name: &str, catalog: &[String]) -> Option<f64> {
        if name == WEEK_FEATURE {
            return Some(self.week as f64);
        }
        catalog
            .iter()
            .position(|c| c == name)
            .map(|i| self.features[i])
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub rows: Vec<WeeklyFeatureRow>,
    pub catalog: Vec<String>,
}

impl FeatureTable {
    pub fn new(rows: Vec<WeeklyFeatureRow>) -> Self {
        Self {
            rows,
            catalog: feature_catalog(),
        }
    }

    pub fn vehicle_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for row in &self.rows {
            if !seen.contains(&row.vehicle_id) {
                seen.push(row.vehicle_id.clone());
            }
        }
        seen
    }

    pub fn rows_for(&self, vehicle: &str) -> Vec<&WeeklyFeatureRow> {
        self.rows.iter().filter(|r| r.vehicle_id == vehicle).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["vehicle_id".to_string(), "week".into(), "capacity_ah".into()];
        header.extend(self.catalog.iter().cloned());
        wtr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.vehicle_id.clone(),
                row.week.to_string(),
                format!("{:.9}", row.capacity),
            ];
            rec.extend(row.features.iter().map(|v| format!("{v:.9}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let catalog = feature_catalog();
        let mut positions = Vec::with_capacity(catalog.len() + 3);
        for name in ["vehicle_id", "week", "capacity_ah"]
            .into_iter()
            .chain(catalog.iter().map(|s| s.as_str()))
        {
            positions.push(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| CoreError::Schema(format!("missing column `{name}`")))?,
            );
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let get = |i: usize| {
                rec.get(positions[i])
                    .ok_or_else(|| CoreError::Schema("short row".into()))
            };
            let vehicle_id = get(0)?.to_string();
            let week: u32 = get(1)?
                .parse()
                .map_err(|_| CoreError::Schema("bad week value".into()))?;
            let capacity: f64 = get(2)?
                .parse()
                .map_err(|_| CoreError::Schema("bad capacity value".into()))?;
            let mut features = Vec::with_capacity(catalog.len());
            for i in 0..catalog.len() {
                features.push(
                    get(3 + i)?
                        .parse()
                        .map_err(|_| CoreError::Schema("bad feature value".into()))?,
                );
            }
            rows.push(WeeklyFeatureRow {
                vehicle_id,
                week,
                capacity,
                features,
            });
        }
        Ok(Self { rows, catalog })
    }
}

struct Accumulator {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        }
    }
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }
    fn stats(&self) -> (f64, f64, f64) {
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        (mean, self.sum, var.sqrt())
    }
}

/// 27 features over every record of the week's valid segments.
pub fn compute_weekly_features(segments: &[ChargingSegment]) -> Result<Vec<f64>> {
    if segments.is_empty() || segments.iter().all(|s| s.records.is_empty()) {
        return Err(CoreError::Validation("empty vehicle-week".into()));
    }
    let mut accs: Vec<Accumulator> = (0..SIGNALS.len()).map(|_| Accumulator::new()).collect();
    for seg in segments {
        for r in &seg.records {
            accs[0].push(r.current);
            accs[1].push(r.pack_voltage);
            accs[2].push(r.soc);
            accs[3].push(r.max_cell_voltage);
            accs[4].push(r.min_cell_voltage);
            accs[5].push(r.max_cell_voltage - r.min_cell_voltage);
            accs[6].push(r.max_temp);
            accs[7].push(r.min_temp);
            accs[8].push(r.max_temp - r.min_temp);
        }
    }
    let mut out = Vec::with_capacity(27);
    for acc in &accs {
        let (mean, sum, std) = acc.stats();
        out.push(mean);
        out.push(sum);
        out.push(std);
    }
    Ok(out)
}

/// Assemble feature rows from grouped vehicle-week segments and the filtered
/// weekly capacity labels.
pub fn build_feature_table(
    week_segments: &[VehicleWeekSegments],
    weekly: &BTreeMap<String, crate::ingest::WeeklySeries>,
) -> Result<FeatureTable> {
    let mut rows = Vec::new();
    for vw in week_segments {
        let Some(series) = weekly.get(&vw.vehicle_id) else {
            continue;
        };
        let Some(label) = series.get(&vw.week) else {
            continue;
        };
        rows.push(WeeklyFeatureRow {
            vehicle_id: vw.vehicle_id.clone(),
            week: vw.week,
            capacity: label.capacity,
            features: compute_weekly_features(&vw.segments)?,
        });
    }
    Ok(FeatureTable::new(rows))
}

/// Pearson correlation coefficient.
pub fn pearson_corr(x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != z.len() || x.len() < 2 {
        return Err(CoreError::Validation(format!(
            "pearson needs two equal-length series of >= 2 points, got {} and {}",
            x.len(),
            z.len()
        )));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_z = z.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_z = 0.0;
    for (&xi, &zi) in x.iter().zip(z) {
        let dx = xi - mean_x;
        let dz = zi - mean_z;
        cov += dx * dz;
        var_x += dx * dx;
        var_z += dz * dz;
    }
    if var_x == 0.0 || var_z == 0.0 {
        return Err(CoreError::Numeric(
            "pearson undefined for a constant series".into(),
        ));
    }
    Ok(cov / (var_x * var_z).sqrt())
}

/// |Pearson| against capacity for every non-constant candidate, pooled over
/// all vehicles.
pub fn pearson_scores(table: &FeatureTable) -> Result<BTreeMap<String, f64>> {
    if table.rows.len() < 2 {
        return Err(CoreError::Validation("need >= 2 rows for correlation".into()));
    }
    let capacity: Vec<f64> = table.rows.iter().map(|r| r.capacity).collect();
    let mut out = BTreeMap::new();
    for name in selection_candidates() {
        let series: Vec<f64> = table
            .rows
            .iter()
            .map(|r| r.candidate(&name, &table.catalog).unwrap())
            .collect();
        match pearson_corr(&series, &capacity) {
            Ok(rho) => {
                out.insert(name, rho.abs());
            }
            Err(CoreError::Numeric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Candidates whose |pooled correlation with capacity| exceeds `threshold`,
/// sorted by descending score. Constant candidates are skipped.
pub fn select_by_pearson(table: &FeatureTable, threshold: f64) -> Result<Vec<String>> {
    let scores = pearson_scores(table)?;
    let mut hits: Vec<(String, f64)> = scores
        .into_iter()
        .filter(|(_, s)| *s > threshold)
        .collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(hits.into_iter().map(|(n, _)| n).collect())
}

/// Fit the boosted-tree ranker on (candidates -> capacity) and return
/// normalized gain importances by name.
pub fn importance_scores(
    table: &FeatureTable,
    gbdt_cfg: &GbdtConfig,
) -> Result<BTreeMap<String, f64>> {
    let names = selection_candidates();
    let data: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| {
            names
                .iter()
                .map(|n| r.candidate(n, &table.catalog).unwrap())
                .collect()
        })
        .collect();
    let targets: Vec<f64> = table.rows.iter().map(|r| r.capacity).collect();
    let fit = gbdt::fit(&data, &targets, gbdt_cfg)?;
    let importance = fit.model.gain_importance()?;
    Ok(names.into_iter().zip(importance).collect())
}

/// Candidates whose normalized gain importance exceeds `threshold`, sorted by
/// descending importance.
pub fn select_by_importance(
    table: &FeatureTable,
    threshold: f64,
    gbdt_cfg: &GbdtConfig,
) -> Result<Vec<String>> {
    let scores = importance_scores(table, gbdt_cfg)?;
    let mut hits: Vec<(String, f64)> = scores
        .into_iter()
        .filter(|(_, s)| *s > threshold)
        .collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(hits.into_iter().map(|(n, _)| n).collect())
}

/// The two selected sets, their union, and the per-candidate scores.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FeatureSelection {
    pub f1: Vec<String>,
    pub f2: Vec<String>,
    pub f3: Vec<String>,
    /// name -> (|pearson|, importance)
    pub scores: BTreeMap<String, (f64, f64)>,
}

/// Order-stable deduplicated union: F1 first, then F2 entries not already
/// present.
pub fn merge_feature_sets(f1: Vec<String>, f2: Vec<String>) -> FeatureSelection {
    let mut f3 = f1.clone();
    for name in &f2 {
        if !f3.contains(name) {
            f3.push(name.clone());
        }
    }
    FeatureSelection {
        f1,
        f2,
        f3,
        scores: BTreeMap::new(),
    }
}

/// Full hybrid selection over a (training) table.
pub fn select_features(
    table: &FeatureTable,
    cfg: &FeatureConfig,
    gbdt_cfg: &GbdtConfig,
) -> Result<FeatureSelection> {
    let pearson = pearson_scores(table)?;
    let importance = importance_scores(table, gbdt_cfg)?;
    let f1 = select_by_pearson(table, cfg.pearson_threshold)?;
    let f2 = select_by_importance(table, cfg.importance_threshold, gbdt_cfg)?;
    let mut selection = merge_feature_sets(f1, f2);
    for name in selection_candidates() {
        let p = pearson.get(&name).copied().unwrap_or(0.0);
        let i = importance.get(&name).copied().unwrap_or(0.0);
        selection.scores.insert(name, (p, i));
    }
    Ok(selection)
}

/// Min-max normalizer fit on training rows only. Features share one pooled
/// range; capacity is normalized per vehicle, with the pooled training range
/// as the fallback for vehicles outside the training fold.
///
/// Forecast windows use a different capacity transform: values are anchored
/// to the window's last observed history capacity and divided by
/// `delta_scale`, the training-fold standard deviation of capacity changes
/// over horizon-length spans. Anchoring keeps unseen vehicles inside the
/// trained target distribution; an absolute per-vehicle mapping leaves their
/// levels out of range and biases every forecast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_names: Vec<String>,
    pub feature_ranges: Vec<(f64, f64)>,
    pub capacity_ranges: BTreeMap<String, (f64, f64)>,
    pub fallback_capacity_range: (f64, f64),
    /// Std of train-fold capacity deltas across 1..=horizon week spans.
    pub delta_scale: f64,
    pub slack: f64,
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn norm(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        0.5
    } else {
        (v - lo) / (hi - lo)
    }
}

fn denorm(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        lo
    } else {
        lo + v * (hi - lo)
    }
}

/// Fit on the training slice. Degenerate (constant) columns map to 0.5 with a
/// warning. `horizon` bounds the week spans entering the delta scale.
pub fn fit_normalizer(
    train_rows: &[&WeeklyFeatureRow],
    feature_names: &[String],
    catalog: &[String],
    horizon: usize,
    slack: f64,
) -> Result<Normalizer> {
    if train_rows.is_empty() {
        return Err(CoreError::Validation("normalizer needs training rows".into()));
    }
    let mut feature_ranges = Vec::with_capacity(feature_names.len());
    for name in feature_names {
        let range = range_of(
            train_rows
                .iter()
                .map(|r| r.candidate(name, catalog).expect("known feature")),
        );
        if range.0 == range.1 {
            log::warn!("feature `{name}` is constant on the training fold; mapping to 0.5");
        }
        feature_ranges.push(range);
    }
    let mut capacity_ranges = BTreeMap::new();
    let mut per_vehicle: BTreeMap<&str, Vec<(u32, f64)>> = BTreeMap::new();
    for row in train_rows {
        let slot = capacity_ranges
            .entry(row.vehicle_id.clone())
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        slot.0 = slot.0.min(row.capacity);
        slot.1 = slot.1.max(row.capacity);
        per_vehicle
            .entry(row.vehicle_id.as_str())
            .or_default()
            .push((row.week, row.capacity));
    }
    let fallback_capacity_range = range_of(train_rows.iter().map(|r| r.capacity));

    // capacity deltas over spans of up to `horizon` weeks
    let mut deltas = Vec::new();
    for series in per_vehicle.values_mut() {
        series.sort_by_key(|(w, _)| *w);
        for i in 0..series.len() {
            for j in (i + 1)..series.len() {
                let span = series[j].0 - series[i].0;
                if span == 0 {
                    continue;
                }
                if span > horizon.max(1) as u32 {
                    break;
                }
                deltas.push(series[j].1 - series[i].1);
            }
        }
    }
    let delta_scale = if deltas.len() >= 2 {
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / deltas.len() as f64;
        // the mean fade also carries signal; include it in the scale
        (var + mean * mean).sqrt().max(1e-9)
    } else {
        (fallback_capacity_range.1 - fallback_capacity_range.0).max(1e-9)
    };

    Ok(Normalizer {
        feature_names: feature_names.to_vec(),
        feature_ranges,
        capacity_ranges,
        fallback_capacity_range,
        delta_scale,
        slack,
    })
}

impl Normalizer {
    pub fn capacity_range(&self, vehicle: &str) -> (f64, f64) {
        self.capacity_ranges
            .get(vehicle)
            .copied()
            .unwrap_or(self.fallback_capacity_range)
    }

    pub fn norm_capacity(&self, vehicle: &str, v: f64) -> f64 {
        norm(v, self.capacity_range(vehicle))
    }

    pub fn denorm_capacity(&self, vehicle: &str, v: f64) -> f64 {
        denorm(v, self.capacity_range(vehicle))
    }

    /// Capacity-scale factor for spreads (std): the range width.
    pub fn capacity_scale(&self, vehicle: &str) -> f64 {
        let (lo, hi) = self.capacity_range(vehicle);
        hi - lo
    }

    /// Window-anchored capacity transform used by forecasting windows.
    pub fn norm_capacity_anchored(&self, anchor_ah: f64, v: f64) -> f64 {
        (v - anchor_ah) / self.delta_scale
    }

    pub fn denorm_capacity_anchored(&self, anchor_ah: f64, v: f64) -> f64 {
        anchor_ah + v * self.delta_scale
    }

    pub fn norm_feature(&self, idx: usize, v: f64) -> f64 {
        norm(v, self.feature_ranges[idx])
    }

    /// Normalized feature vector for a row, in `feature_names` order.
    pub fn norm_row(&self, row: &WeeklyFeatureRow, catalog: &[String]) -> Vec<f64> {
        self.feature_names
            .iter()
            .enumerate()
            .map(|(i, name)| self.norm_feature(i, row.candidate(name, catalog).expect("feature")))
            .collect()
    }

    /// True when a normalized value sits outside [0 - slack, 1 + slack].
    pub fn beyond_slack(&self, v: f64) -> bool {
        v < -self.slack || v > 1.0 + self.slack
    }
}

pub fn write_selection_json(selection: &FeatureSelection, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(selection)
        .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ChargingRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn segment_with(values: &[f64]) -> ChargingSegment {
        let records: Vec<ChargingRecord> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ChargingRecord {
                vehicle_id: "v1".into(),
                timestamp: i as i64 * 8,
                current: v,
                pack_voltage: 350.0,
                soc: 50.0,
                max_cell_voltage: 3.65,
                min_cell_voltage: 3.60,
                max_temp: 30.0,
                min_temp: 26.0,
            })
            .collect();
        ChargingSegment {
            vehicle_id: "v1".into(),
            start_time: 0,
            end_time: values.len() as i64 * 8,
            sample_interval: 8.0,
            records,
        }
    }

    #[test]
    fn catalog_has_27_names_and_28_candidates() {
        assert_eq!(feature_catalog().len(), 27);
        assert_eq!(selection_candidates().len(), 28);
        assert_eq!(selection_candidates()[0], WEEK_FEATURE);
    }

    #[test]
    fn constant_signal_stats() {
        let seg = segment_with(&vec![-40.0; 100]);
        let features = compute_weekly_features(&[seg]).unwrap();
        let catalog = feature_catalog();
        let at = |name: &str| features[catalog.iter().position(|c| c == name).unwrap()];
        assert_eq!(at("mean_pack_voltage"), 350.0);
        assert_eq!(at("sum_pack_voltage"), 35000.0);
        assert_eq!(at("std_pack_voltage"), 0.0);
        assert!(at("std_current").abs() < 1e-9);
        assert!((at("mean_voltage_diff") - 0.05).abs() < 1e-12);
    }

    #[test]
    fn segment_union_equals_concatenation() {
        let a = segment_with(&[-40.0, -42.0, -44.0]);
        let b = segment_with(&[-46.0, -48.0]);
        let merged = segment_with(&[-40.0, -42.0, -44.0, -46.0, -48.0]);
        let split = compute_weekly_features(&[a, b]).unwrap();
        let joint = compute_weekly_features(&[merged]).unwrap();
        for (x, y) in split.iter().zip(&joint) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_stats_for_1_2_3() {
        let seg = segment_with(&[1.0, 2.0, 3.0]);
        let features = compute_weekly_features(&[seg]).unwrap();
        let catalog = feature_catalog();
        let at = |name: &str| features[catalog.iter().position(|c| c == name).unwrap()];
        assert!((at("mean_current") - 2.0).abs() < 1e-12);
        assert!((at("sum_current") - 6.0).abs() < 1e-12);
        // population std of {1,2,3} = sqrt(2/3)
        assert!((at("std_current") - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pearson_hand_cases() {
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // direct evaluation: cov 4, variances 5 and 5 -> 0.8
        assert!(
            (pearson_corr(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs()
                < 1e-12
        );
        assert!(matches!(
            pearson_corr(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn pearson_sign_scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = x
            .iter()
            .map(|v| v * 1.3 + rng.random_range(-0.5..0.5))
            .collect();
        let base = pearson_corr(&x, &z).unwrap();
        for (a, b) in [(2.5, 1.0), (-0.7, -3.0), (0.01, 100.0)] {
            let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let got = pearson_corr(&scaled, &z).unwrap();
            let want = a.signum() * base;
            assert!((got - want).abs() < 1e-12, "a={a}: {got} vs {want}");
        }
    }

    fn synthetic_table(n: usize, seed: u64) -> FeatureTable {
        // capacity declines with week; feature 0 tracks capacity, feature 1
        // is independent noise, the rest stay constant
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog = feature_catalog();
        let rows: Vec<WeeklyFeatureRow> = (0..n)
            .map(|i| {
                let week = i as u32;
                let capacity = 100.0 - 0.05 * i as f64 + rng.random_range(-0.05..0.05);
                let mut features = vec![1.0; catalog.len()];
                features[0] = capacity + rng.random_range(-1e-4..1e-4);
                features[1] = rng.random_range(-1.0..1.0);
                WeeklyFeatureRow {
                    vehicle_id: "v1".into(),
                    week,
                    capacity,
                    features,
                }
            })
            .collect();
        FeatureTable::new(rows)
    }

    #[test]
    fn near_copy_feature_selected_noise_excluded() {
        let table = synthetic_table(2000, 3);
        let f1 = select_by_pearson(&table, 0.6).unwrap();
        let catalog = feature_catalog();
        assert!(f1.contains(&catalog[0]), "tracking feature must be in F1: {f1:?}");
        assert!(f1.contains(&WEEK_FEATURE.to_string()), "week trends with capacity");
        assert!(
            !f1.contains(&catalog[1]),
            "independent noise must stay out at n=2000"
        );
    }

    #[test]
    fn raising_the_threshold_never_adds_features() {
        let table = synthetic_table(300, 4);
        let loose = select_by_pearson(&table, 0.3).unwrap();
        let tight = select_by_pearson(&table, 0.8).unwrap();
        for name in &tight {
            assert!(loose.contains(name));
        }
        assert!(tight.len() <= loose.len());
    }

    #[test]
    fn merge_is_order_stable_dedup() {
        let sel = merge_feature_sets(
            vec!["week".into(), "a".into()],
            vec!["week".into(), "b".into()],
        );
        assert_eq!(sel.f3, vec!["week", "a", "b"]);
        assert_eq!(
            sel.f3.iter().filter(|n| n.as_str() == "week").count(),
            1,
            "week appears once"
        );

        let sub = merge_feature_sets(vec!["a".into(), "b".into()], vec!["b".into()]);
        assert_eq!(sub.f3, vec!["a", "b"]);
    }

    #[test]
    fn union_bounds_hold() {
        let table = synthetic_table(300, 5);
        let f1 = select_by_pearson(&table, 0.6).unwrap();
        let f2 = select_by_importance(&table, 0.01, &GbdtConfig::default()).unwrap();
        let sel = merge_feature_sets(f1.clone(), f2.clone());
        for n in &f1 {
            assert!(sel.f3.contains(n));
        }
        for n in &f2 {
            assert!(sel.f3.contains(n));
        }
        assert!(sel.f3.len() <= f1.len() + f2.len());
    }

    #[test]
    fn importance_route_finds_the_informative_feature() {
        let table = synthetic_table(400, 6);
        let f2 = select_by_importance(&table, 0.01, &GbdtConfig::default()).unwrap();
        let catalog = feature_catalog();
        assert!(f2.contains(&catalog[0]), "f2 = {f2:?}");
    }

    #[test]
    fn normalizer_midpoint_roundtrip_and_degenerate_rule() {
        let table = synthetic_table(50, 7);
        let rows: Vec<&WeeklyFeatureRow> = table.rows.iter().collect();
        let names = vec![feature_catalog()[0].clone(), feature_catalog()[2].clone()];
        let norm = fit_normalizer(&rows, &names, &table.catalog, 8, 0.5).unwrap();

        // feature range [2, 4] -> value 3 maps to 0.5
        let mut custom = norm.clone();
        custom.feature_ranges[0] = (2.0, 4.0);
        assert_eq!(custom.norm_feature(0, 3.0), 0.5);

        // degenerate feature (constant column) maps to 0.5
        assert_eq!(norm.norm_feature(1, 1.0), 0.5);

        // capacity round trip
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let v = rng.random_range(90.0..101.0);
            let n = norm.norm_capacity("v1", v);
            let back = norm.denorm_capacity("v1", n);
            assert!((back - v).abs() < 1e-12);
        }
        // unseen vehicle falls back to the pooled training range
        assert_eq!(norm.capacity_range("ghost"), norm.fallback_capacity_range);
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let table = synthetic_table(20, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        table.write_csv(&path).unwrap();
        let back = FeatureTable::read_csv(&path).unwrap();
        assert_eq!(back.rows.len(), table.rows.len());
        for (a, b) in table.rows.iter().zip(&back.rows) {
            assert_eq!(a.vehicle_id, b.vehicle_id);
            assert_eq!(a.week, b.week);
            assert!((a.capacity - b.capacity).abs() < 1e-8);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
