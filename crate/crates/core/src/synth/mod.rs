//! Seeded synthetic fleets with known ground truth.
//!
//! Two generation paths share the same degradation profiles:
//!
//! * raw-log mode emits 8-second multi-stage constant-current charging
//!   sessions whose Coulomb-counted capacity reproduces the (noisy) weekly
//!   observation, then runs the real ingest pipeline to build the table;
//! * weekly mode writes the feature table directly from parametric signal
//!   curves, which is orders of magnitude faster for model-level tests.
//!
//! Several columns drift deterministically with the capacity ratio so
//! feature selection has true positives to find.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::config::{seed_for, IngestConfig, SynthConfig};
use crate::error::{CoreError, Result};
use crate::features::{build_feature_table, feature_catalog, FeatureTable, WeeklyFeatureRow};
use crate::ingest::{ingest_records, ChargingRecord, SECONDS_PER_WEEK};

const BASE_EPOCH: i64 = 1_600_000_000;
const CELLS_IN_SERIES: f64 = 96.0;

/// Piecewise-linear fade with an optional knee plus Gaussian observation
/// noise on the weekly capacity.
#[derive(Debug, Clone)]
pub struct DegradationProfile {
    pub initial_capacity: f64,
    /// Ah lost per week before the knee.
    pub linear_fade: f64,
    pub knee_week: Option<u32>,
    /// Additional Ah lost per week after the knee.
    pub knee_fade: f64,
    pub noise_std: f64,
    pub weeks: u32,
}

impl DegradationProfile {
    pub fn true_capacity(&self, week: u32) -> f64 {
        let mut cap = self.initial_capacity - self.linear_fade * week as f64;
        if let Some(knee) = self.knee_week {
            if week > knee {
                cap -= self.knee_fade * (week - knee) as f64;
            }
        }
        cap
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(CoreError::InvalidParam("noise_std must be >= 0".into()));
        }
        let terminal = self.true_capacity(self.weeks.saturating_sub(1));
        if terminal <= 0.0 {
            return Err(CoreError::InvalidParam(format!(
                "profile hits {terminal} Ah before the horizon ends"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProfileSeries {
    pub true_caps: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Weekly true and observed capacities for one profile.
pub fn generate_profile(seed: u64, profile: &DegradationProfile) -> Result<ProfileSeries> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut true_caps = Vec::with_capacity(profile.weeks as usize);
    let mut observed = Vec::with_capacity(profile.weeks as usize);
    for week in 0..profile.weeks {
        let cap = profile.true_capacity(week);
        let noise: f64 = rng.sample(StandardNormal);
        true_caps.push(cap);
        observed.push(cap + profile.noise_std * noise);
    }
    Ok(ProfileSeries {
        true_caps,
        observed,
    })
}

/// Shape of one synthetic charging session.
#[derive(Debug, Clone)]
pub struct SessionTemplate {
    /// Records per session; keep above the ingest validity floor.
    pub records: usize,
    pub sample_interval: f64,
    /// Stage-one current magnitude in amperes; stage two runs at half.
    pub stage_current: f64,
    pub soc_start: f64,
}

impl Default for SessionTemplate {
    fn default() -> Self {
        Self {
            records: 450,
            sample_interval: 8.0,
            stage_current: 50.0,
            soc_start: 20.0,
        }
    }
}

/// Emit one multi-stage constant-current session whose Coulomb-counted
/// capacity equals `target_capacity` exactly: SOC is integrated charge scaled
/// by the target, so the estimator inverts without error.
pub fn synthesize_session(
    vehicle_id: &str,
    target_capacity: f64,
    capacity_ratio: f64,
    start_time: i64,
    template: &SessionTemplate,
    rng: &mut ChaCha8Rng,
) -> Vec<ChargingRecord> {
    let n = template.records;
    let dt_h = template.sample_interval / 3600.0;
    let stage1 = (n * 3) / 5;
    let mut records = Vec::with_capacity(n);
    let mut charge_ah = 0.0;
    let aging = 1.0 - capacity_ratio; // 0 fresh, grows as the pack fades
    for k in 0..n {
        // idle bracket samples make the per-sample Coulomb sum equal the
        // recorded SOC span exactly
        let current = if k == 0 || k == n - 1 {
            0.0
        } else if k < stage1 {
            -template.stage_current
        } else {
            -template.stage_current / 2.0
        };
        charge_ah += -current * dt_h;
        let soc = template.soc_start + 100.0 * charge_ah / target_capacity;
        let progress = k as f64 / n as f64;
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
        let pack_voltage = 330.0 + 20.0 * capacity_ratio + 12.0 * (soc / 100.0) + jitter;
        let cell_mid = pack_voltage / CELLS_IN_SERIES;
        let spread = 0.010 + 0.012 * aging;
        let max_temp = 26.0 + 4.0 * aging + 2.5 * progress + jitter.abs();
        records.push(ChargingRecord {
            vehicle_id: vehicle_id.to_string(),
            timestamp: start_time + (k as f64 * template.sample_interval) as i64,
            current,
            pack_voltage,
            soc,
            max_cell_voltage: cell_mid + spread / 2.0,
            min_cell_voltage: cell_mid - spread / 2.0,
            max_temp,
            min_temp: max_temp - 1.5 - 1.0 * aging,
        });
    }
    records
}

#[derive(Debug, Clone)]
pub struct GroundTruthRow {
    pub vehicle_id: String,
    pub week: u32,
    pub true_capacity: f64,
}

#[derive(Debug)]
pub struct SyntheticFleet {
    /// Raw telemetry, empty when raw logs are disabled.
    pub records: Vec<ChargingRecord>,
    pub table: FeatureTable,
    pub ground_truth: Vec<GroundTruthRow>,
}

fn draw_profile(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> DegradationProfile {
    let initial_capacity = rng.random_range(100.0..112.0);
    let linear_fade = rng.random_range(0.04..0.10);
    let knee_week = if rng.random::<bool>() && cfg.weeks > 20 {
        Some(rng.random_range(cfg.weeks / 3..(2 * cfg.weeks) / 3))
    } else {
        None
    };
    DegradationProfile {
        initial_capacity,
        linear_fade,
        knee_week,
        knee_fade: rng.random_range(0.02..0.06),
        noise_std: cfg.noise_std,
        weeks: cfg.weeks,
    }
}

/// Full synthetic dataset. With raw logs enabled the table comes from the
/// real ingest pipeline; otherwise it is generated parametrically.
pub fn generate_fleet(
    cfg: &SynthConfig,
    ingest_cfg: &IngestConfig,
    seed: u64,
) -> Result<SyntheticFleet> {
    if cfg.vehicles == 0 || cfg.weeks == 0 {
        return Err(CoreError::InvalidParam("empty fleet requested".into()));
    }
    let mut ground_truth = Vec::new();
    if cfg.emit_raw_logs {
        let mut all_records = Vec::new();
        for v in 0..cfg.vehicles {
            let vehicle_id = format!("v{:02}", v + 1);
            let mut vrng = ChaCha8Rng::seed_from_u64(seed_for(seed, &format!("vehicle/{v}")));
            let profile = draw_profile(cfg, &mut vrng);
            let series = generate_profile(
                seed_for(seed, &format!("profile/{v}")),
                &profile,
            )?;
            let template = SessionTemplate {
                records: cfg.session_records,
                ..Default::default()
            };
            for week in 0..cfg.weeks {
                let observed = series.observed[week as usize].max(1.0);
                let ratio = observed / profile.initial_capacity;
                for s in 0..cfg.sessions_per_week {
                    let start = BASE_EPOCH
                        + week as i64 * SECONDS_PER_WEEK
                        + s as i64 * 21_600
                        + 3_600;
                    all_records.extend(synthesize_session(
                        &vehicle_id,
                        observed,
                        ratio,
                        start,
                        &template,
                        &mut vrng,
                    ));
                }
                ground_truth.push(GroundTruthRow {
                    vehicle_id: vehicle_id.clone(),
                    week,
                    true_capacity: series.true_caps[week as usize],
                });
            }
        }
        let ingested = ingest_records(all_records.clone(), ingest_cfg)?;
        let table = build_feature_table(&ingested.week_segments, &ingested.weekly)?;
        Ok(SyntheticFleet {
            records: all_records,
            table,
            ground_truth,
        })
    } else {
        let mut rows = Vec::new();
        for v in 0..cfg.vehicles {
            let vehicle_id = format!("v{:02}", v + 1);
            let mut vrng = ChaCha8Rng::seed_from_u64(seed_for(seed, &format!("vehicle/{v}")));
            let profile = draw_profile(cfg, &mut vrng);
            let series = generate_profile(
                seed_for(seed, &format!("profile/{v}")),
                &profile,
            )?;
            for week in 0..cfg.weeks {
                let observed = series.observed[week as usize];
                rows.push(parametric_row(
                    &vehicle_id,
                    week,
                    observed,
                    observed / profile.initial_capacity,
                    &mut vrng,
                ));
                ground_truth.push(GroundTruthRow {
                    vehicle_id: vehicle_id.clone(),
                    week,
                    true_capacity: series.true_caps[week as usize],
                });
            }
        }
        Ok(SyntheticFleet {
            records: Vec::new(),
            table: FeatureTable::new(rows),
            ground_truth,
        })
    }
}

/// One weekly row from parametric signal curves: a handful of columns track
/// the capacity ratio, the rest are noise around fixed levels.
fn parametric_row(
    vehicle_id: &str,
    week: u32,
    capacity: f64,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> WeeklyFeatureRow {
    let catalog = feature_catalog();
    let mut features = vec![0.0; catalog.len()];
    let mut noise = |scale: f64| -> f64 { rng.sample::<f64, _>(StandardNormal) * scale };
    let aging = 1.0 - ratio;
    for (i, name) in catalog.iter().enumerate() {
        features[i] = match name.as_str() {
            "mean_pack_voltage" => 330.0 + 20.0 * ratio + noise(0.15),
            "sum_pack_voltage" => (330.0 + 20.0 * ratio) * 900.0 + noise(120.0),
            "mean_min_cell_voltage" => 3.45 + 0.20 * ratio + noise(0.002),
            "sum_min_cell_voltage" => (3.45 + 0.20 * ratio) * 900.0 + noise(1.5),
            "sum_max_cell_voltage" => (3.47 + 0.20 * ratio) * 900.0 + noise(1.5),
            "mean_voltage_diff" => 0.010 + 0.012 * aging + noise(0.0004),
            "std_current" => 16.0 + 6.0 * aging + noise(0.3),
            "sum_soc" => 40_000.0 * ratio + noise(300.0),
            "mean_soc" => 45.0 + noise(1.0),
            "mean_current" => -40.0 + noise(0.5),
            "sum_current" => -36_000.0 + noise(400.0),
            "mean_max_temp" | "mean_min_temp" => 27.0 + 3.0 * aging + noise(0.3),
            "mean_temp_diff" => 2.0 + 1.0 * aging + noise(0.1),
            _ => 1.0 + noise(0.05),
        };
    }
    WeeklyFeatureRow {
        vehicle_id: vehicle_id.to_string(),
        week,
        capacity,
        features,
    }
}

/// `vehicle_id,week,true_capacity_ah`
pub fn write_ground_truth(rows: &[GroundTruthRow], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["vehicle_id", "week", "true_capacity_ah"])?;
    for row in rows {
        wtr.write_record([
            row.vehicle_id.as_str(),
            &row.week.to_string(),
            &format!("{:.6}", row.true_capacity),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Raw-log CSV in the ingest schema.
pub fn write_raw_logs(records: &[ChargingRecord], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(crate::ingest::RAW_LOG_COLUMNS)?;
    for r in records {
        wtr.write_record([
            r.vehicle_id.as_str(),
            &r.timestamp.to_string(),
            &format!("{:.4}", r.current),
            &format!("{:.4}", r.pack_voltage),
            // SOC sits in the Coulomb-counting denominator; keep enough
            // digits that a reparse stays inside the 0.1% contract
            &format!("{:.8}", r.soc),
            &format!("{:.5}", r.max_cell_voltage),
            &format!("{:.5}", r.min_cell_voltage),
            &format!("{:.2}", r.max_temp),
            &format!("{:.2}", r.min_temp),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
