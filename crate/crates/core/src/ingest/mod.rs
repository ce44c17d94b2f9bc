//! Charging-log ingestion: CSV parsing, session isolation, Coulomb-counted
//! capacity labels, weekly aggregation, and median-filter denoising.
//!
//! Sessions are split wherever consecutive samples are more than
//! `gap_split_s` seconds apart (strictly greater; an exact 10 s gap keeps the
//! session). A segment is valid when it has more than `min_points` records, a
//! SOC trace that never backtracks more than `soc_backtrack_tol` points below
//! its running maximum, and a SOC span of at least `min_soc_span` points.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::config::IngestConfig;
use crate::error::{CoreError, Result};

pub const SECONDS_PER_WEEK: i64 = 604_800;

/// Expected raw-log header, in order.
pub const RAW_LOG_COLUMNS: [&str; 9] = [
    "vehicle_id",
    "timestamp",
    "current_a",
    "pack_voltage_v",
    "soc_pct",
    "max_cell_v",
    "min_cell_v",
    "max_temp_c",
    "min_temp_c",
];

/// One 8-second telemetry sample. Current is negative while charging.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingRecord {
    pub vehicle_id: String,
    pub timestamp: i64,
    pub current: f64,
    pub pack_voltage: f64,
    pub soc: f64,
    pub max_cell_voltage: f64,
    pub min_cell_voltage: f64,
    pub max_temp: f64,
    pub min_temp: f64,
}

impl ChargingRecord {
    /// Field-level sanity used while parsing; violations count as malformed
    /// rows rather than panics.
    pub fn plausible(&self) -> bool {
        (0.0..=100.0).contains(&self.soc)
            && self.min_cell_voltage <= self.max_cell_voltage
            && self.min_temp <= self.max_temp
            && self.current.is_finite()
            && self.pack_voltage.is_finite()
    }
}

/// One contiguous charging session of a single vehicle.
#[derive(Debug, Clone)]
pub struct ChargingSegment {
    pub vehicle_id: String,
    pub records: Vec<ChargingRecord>,
    pub start_time: i64,
    pub end_time: i64,
    /// Nominal sampling interval in seconds (median gap; 8 for single-record
    /// segments).
    pub sample_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentRejection {
    TooShort,
    SocBacktrack,
    SpanTooSmall,
}

impl std::fmt::Display for SegmentRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentRejection::TooShort => write!(f, "too few data points"),
            SegmentRejection::SocBacktrack => write!(f, "unstable SOC transition"),
            SegmentRejection::SpanTooSmall => write!(f, "SOC span below minimum"),
        }
    }
}

/// Capacity estimate for a single valid segment.
#[derive(Debug, Clone)]
pub struct SegmentCapacityEstimate {
    pub vehicle_id: String,
    pub week_index: u32,
    pub capacity: f64,
    pub soc_span: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParseStats {
    pub rows: usize,
    pub skipped: usize,
}

/// Parse a raw charging log. Malformed rows are tallied and skipped; a header
/// that does not contain every required column is a schema error.
pub fn parse_charging_log(path: &Path) -> Result<(Vec<ChargingRecord>, ParseStats)> {
    let file = std::fs::File::open(path)?;
    parse_charging_reader(file)
}

pub fn parse_charging_reader<R: Read>(reader: R) -> Result<(Vec<ChargingRecord>, ParseStats)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::Schema(format!("unreadable header: {e}")))?
        .clone();
    let mut index = [0usize; 9];
    for (slot, name) in RAW_LOG_COLUMNS.iter().enumerate() {
        index[slot] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| CoreError::Schema(format!("missing required column `{name}`")))?;
    }
    let mut records = Vec::new();
    let mut stats = ParseStats::default();
    for row in rdr.records() {
        stats.rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                stats.skipped += 1;
                continue;
            }
        };
        match parse_row(&row, &index) {
            Some(rec) if rec.plausible() => records.push(rec),
            _ => stats.skipped += 1,
        }
    }
    Ok((records, stats))
}

fn parse_row(row: &csv::StringRecord, index: &[usize; 9]) -> Option<ChargingRecord> {
    let get = |i: usize| row.get(index[i]);
    let num = |i: usize| get(i).and_then(|s| s.trim().parse::<f64>().ok());
    Some(ChargingRecord {
        vehicle_id: get(0)?.to_string(),
        timestamp: get(1).and_then(|s| s.trim().parse::<i64>().ok())?,
        current: num(2)?,
        pack_voltage: num(3)?,
        soc: num(4)?,
        max_cell_voltage: num(5)?,
        min_cell_voltage: num(6)?,
        max_temp: num(7)?,
        min_temp: num(8)?,
    })
}

fn median_gap(records: &[ChargingRecord]) -> f64 {
    if records.len() < 2 {
        return 8.0;
    }
    let mut gaps: Vec<i64> = records.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    gaps.sort_unstable();
    gaps[gaps.len() / 2] as f64
}

/// Split one vehicle's time-sorted records into sessions wherever the gap
/// exceeds `gap_split_s`. The concatenation of all segments reproduces the
/// input exactly.
pub fn split_sessions(
    records: Vec<ChargingRecord>,
    gap_split_s: i64,
) -> Result<Vec<ChargingSegment>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let vehicle = records[0].vehicle_id.clone();
    for w in records.windows(2) {
        if w[1].vehicle_id != vehicle {
            return Err(CoreError::Validation(
                "split_sessions expects records of a single vehicle".into(),
            ));
        }
        if w[1].timestamp < w[0].timestamp {
            return Err(CoreError::Validation(format!(
                "records for vehicle `{vehicle}` are not time-sorted"
            )));
        }
    }
    let mut segments = Vec::new();
    let mut current: Vec<ChargingRecord> = Vec::new();
    for rec in records {
        if let Some(last) = current.last() {
            if rec.timestamp - last.timestamp > gap_split_s {
                segments.push(finish_segment(std::mem::take(&mut current)));
            }
        }
        current.push(rec);
    }
    segments.push(finish_segment(current));
    Ok(segments)
}

fn finish_segment(records: Vec<ChargingRecord>) -> ChargingSegment {
    let interval = median_gap(&records);
    ChargingSegment {
        vehicle_id: records[0].vehicle_id.clone(),
        start_time: records[0].timestamp,
        end_time: records[records.len() - 1].timestamp,
        sample_interval: interval,
        records,
    }
}

/// Quality gate: point count, stable SOC transition, minimum span.
pub fn validate_segment(seg: &ChargingSegment, cfg: &IngestConfig) -> Option<SegmentRejection> {
    if seg.records.len() <= cfg.min_points {
        return Some(SegmentRejection::TooShort);
    }
    let mut running_max = f64::NEG_INFINITY;
    for rec in &seg.records {
        if rec.soc < running_max - cfg.soc_backtrack_tol {
            return Some(SegmentRejection::SocBacktrack);
        }
        running_max = running_max.max(rec.soc);
    }
    let span = seg.records[seg.records.len() - 1].soc - seg.records[0].soc;
    if span < cfg.min_soc_span {
        return Some(SegmentRejection::SpanTooSmall);
    }
    None
}

/// Coulomb counting: `C = -(sum_k I_k * dt) / ((SOC_end - SOC_start)/100)`
/// with `dt` the fixed sampling interval, in hours. Charging current is
/// negative, so the estimate comes out positive.
pub fn estimate_segment_capacity(seg: &ChargingSegment) -> Result<SegmentCapacityEstimate> {
    let first = seg
        .records
        .first()
        .ok_or_else(|| CoreError::Validation("empty segment".into()))?;
    let last = seg.records.last().unwrap();
    let soc_span = (last.soc - first.soc) / 100.0;
    if soc_span == 0.0 {
        return Err(CoreError::Numeric(
            "segment SOC span is zero; capacity undefined".into(),
        ));
    }
    let dt_hours = seg.sample_interval / 3600.0;
    let charge_ah: f64 = seg.records.iter().map(|r| r.current * dt_hours).sum();
    Ok(SegmentCapacityEstimate {
        vehicle_id: seg.vehicle_id.clone(),
        week_index: 0,
        capacity: -charge_ah / soc_span,
        soc_span,
        valid: true,
    })
}

/// Weekly capacity label plus how many valid segments produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeeklyCapacity {
    pub capacity: f64,
    pub n_segments: usize,
}

/// Per-vehicle weekly label series. Weeks without a valid segment are simply
/// absent, never zero.
pub type WeeklySeries = BTreeMap<u32, WeeklyCapacity>;

/// Mean per (vehicle, week) of the valid estimates. Week indices count down
/// from each vehicle's earliest estimate (its fleet epoch).
pub fn aggregate_weekly(estimates: &[SegmentCapacityEstimate]) -> BTreeMap<String, WeeklySeries> {
    let mut out: BTreeMap<String, BTreeMap<u32, (f64, usize)>> = BTreeMap::new();
    for est in estimates.iter().filter(|e| e.valid) {
        let slot = out
            .entry(est.vehicle_id.clone())
            .or_default()
            .entry(est.week_index)
            .or_insert((0.0, 0));
        slot.0 += est.capacity;
        slot.1 += 1;
    }
    out.into_iter()
        .map(|(vehicle, weeks)| {
            let series = weeks
                .into_iter()
                .map(|(week, (sum, n))| {
                    (
                        week,
                        WeeklyCapacity {
                            capacity: sum / n as f64,
                            n_segments: n,
                        },
                    )
                })
                .collect();
            (vehicle, series)
        })
        .collect()
}

/// Sliding-window median with replicate padding. Output length equals input
/// length; every output lies within the min/max of its window.
pub fn median_filter(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window == 0 {
        return Err(CoreError::InvalidParam(format!(
            "median filter window must be odd, got {window}"
        )));
    }
    if window > series.len() {
        return Err(CoreError::InvalidParam(format!(
            "median filter window {window} exceeds series length {}",
            series.len()
        )));
    }
    let half = window / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0.0; window];
    for i in 0..n {
        for (k, slot) in buf.iter_mut().enumerate() {
            let j = i as isize - half as isize + k as isize;
            let j = j.clamp(0, n as isize - 1) as usize;
            *slot = series[j];
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(buf[half]);
    }
    Ok(out)
}

/// Everything the downstream feature stage needs from one vehicle-week.
#[derive(Debug, Clone)]
pub struct VehicleWeekSegments {
    pub vehicle_id: String,
    pub week: u32,
    pub segments: Vec<ChargingSegment>,
}

#[derive(Debug, Default, Clone)]
pub struct IngestSummary {
    pub parse: ParseStats,
    pub segments_total: usize,
    pub segments_valid: usize,
    pub rejections: Vec<(SegmentRejection, usize)>,
}

/// Full ingest result: filtered weekly labels plus the valid segments grouped
/// by vehicle-week for feature computation.
#[derive(Debug)]
pub struct IngestOutput {
    pub weekly: BTreeMap<String, WeeklySeries>,
    pub week_segments: Vec<VehicleWeekSegments>,
    pub summary: IngestSummary,
}

/// Run the whole ingest pipeline over already-parsed records.
pub fn ingest_records(records: Vec<ChargingRecord>, cfg: &IngestConfig) -> Result<IngestOutput> {
    ingest_records_with_stats(records, cfg, ParseStats::default())
}

fn ingest_records_with_stats(
    records: Vec<ChargingRecord>,
    cfg: &IngestConfig,
    parse: ParseStats,
) -> Result<IngestOutput> {
    // group per vehicle in first-seen order, then process independently
    let mut order: Vec<String> = Vec::new();
    let mut by_vehicle: BTreeMap<String, Vec<ChargingRecord>> = BTreeMap::new();
    for rec in records {
        if !by_vehicle.contains_key(&rec.vehicle_id) {
            order.push(rec.vehicle_id.clone());
        }
        by_vehicle.entry(rec.vehicle_id.clone()).or_default().push(rec);
    }

    let mut summary = IngestSummary {
        parse,
        ..Default::default()
    };
    let mut reject_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut estimates: Vec<SegmentCapacityEstimate> = Vec::new();
    let mut week_segments: Vec<VehicleWeekSegments> = Vec::new();

    for vehicle in order {
        let recs = by_vehicle.remove(&vehicle).unwrap();
        let epoch = recs.first().map(|r| r.timestamp).unwrap_or(0);
        let segments = split_sessions(recs, cfg.gap_split_s)?;
        summary.segments_total += segments.len();
        let mut weekly_groups: BTreeMap<u32, Vec<ChargingSegment>> = BTreeMap::new();
        for seg in segments {
            match validate_segment(&seg, cfg) {
                Some(reason) => {
                    *reject_counts.entry(reason.to_string()).or_default() += 1;
                }
                None => {
                    summary.segments_valid += 1;
                    let week = ((seg.start_time - epoch) / SECONDS_PER_WEEK) as u32;
                    let mut est = estimate_segment_capacity(&seg)?;
                    est.week_index = week;
                    estimates.push(est);
                    weekly_groups.entry(week).or_default().push(seg);
                }
            }
        }
        for (week, segs) in weekly_groups {
            week_segments.push(VehicleWeekSegments {
                vehicle_id: vehicle.clone(),
                week,
                segments: segs,
            });
        }
    }
    summary.rejections = reject_counts
        .into_iter()
        .map(|(k, v)| {
            let reason = match k.as_str() {
                "too few data points" => SegmentRejection::TooShort,
                "unstable SOC transition" => SegmentRejection::SocBacktrack,
                _ => SegmentRejection::SpanTooSmall,
            };
            (reason, v)
        })
        .collect();

    // weekly mean, then median-filter each vehicle's capacity trajectory
    let mut weekly = aggregate_weekly(&estimates);
    for series in weekly.values_mut() {
        let weeks: Vec<u32> = series.keys().copied().collect();
        let caps: Vec<f64> = series.values().map(|w| w.capacity).collect();
        if caps.len() >= cfg.median_window {
            let filtered = median_filter(&caps, cfg.median_window)?;
            for (week, value) in weeks.iter().zip(filtered) {
                series.get_mut(week).unwrap().capacity = value;
            }
        }
    }

    Ok(IngestOutput {
        weekly,
        week_segments,
        summary,
    })
}

/// Parse a log file and run the pipeline.
pub fn ingest_log_file(path: &Path, cfg: &IngestConfig) -> Result<IngestOutput> {
    let (records, stats) = parse_charging_log(path)?;
    ingest_records_with_stats(records, cfg, stats)
}

/// Write the weekly labels CSV: `vehicle_id,week,capacity_ah,n_segments`.
pub fn write_weekly_labels(
    weekly: &BTreeMap<String, WeeklySeries>,
    path: &Path,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["vehicle_id", "week", "capacity_ah", "n_segments"])
        .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
    for (vehicle, series) in weekly {
        for (week, cap) in series {
            wtr.write_record([
                vehicle.as_str(),
                &week.to_string(),
                &format!("{:.6}", cap.capacity),
                &cap.n_segments.to_string(),
            ])
            .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(vehicle: &str, ts: i64, current: f64, soc: f64) -> ChargingRecord {
        ChargingRecord {
            vehicle_id: vehicle.to_string(),
            timestamp: ts,
            current,
            pack_voltage: 350.0,
            soc,
            max_cell_voltage: 3.65,
            min_cell_voltage: 3.60,
            max_temp: 28.0,
            min_temp: 25.0,
        }
    }

    fn constant_current_segment(n: usize, current: f64, soc_start: f64, soc_end: f64) -> ChargingSegment {
        let records: Vec<ChargingRecord> = (0..n)
            .map(|i| {
                let frac = i as f64 / (n - 1) as f64;
                rec("v1", i as i64 * 8, current, soc_start + frac * (soc_end - soc_start))
            })
            .collect();
        finish_segment(records)
    }

    #[test]
    fn parse_well_formed_and_corrupt_rows() {
        let csv = "vehicle_id,timestamp,current_a,pack_voltage_v,soc_pct,max_cell_v,min_cell_v,max_temp_c,min_temp_c\n\
                   v1,100,-50,350,20,3.6,3.5,28,25\n\
                   v1,108,-50,350,oops,3.6,3.5,28,25\n\
                   v1,116,-50,350,21,3.6,3.5,28,25\n";
        let (records, stats) = parse_charging_reader(csv.as_bytes()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(stats.skipped, 1);
        assert_eq!(stats.rows, 3);
    }

    #[test]
    fn parse_empty_file_with_header_is_ok() {
        let csv = "vehicle_id,timestamp,current_a,pack_voltage_v,soc_pct,max_cell_v,min_cell_v,max_temp_c,min_temp_c\n";
        let (records, stats) = parse_charging_reader(csv.as_bytes()).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.rows, 0);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "vehicle_id,timestamp,current_a\nv1,100,-50\n";
        let err = parse_charging_reader(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, CoreError::Schema(_)));
    }

    #[test]
    fn out_of_range_soc_counts_as_malformed() {
        let csv = "vehicle_id,timestamp,current_a,pack_voltage_v,soc_pct,max_cell_v,min_cell_v,max_temp_c,min_temp_c\n\
                   v1,100,-50,350,150,3.6,3.5,28,25\n";
        let (records, stats) = parse_charging_reader(csv.as_bytes()).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.skipped, 1);
    }

    #[test]
    fn regular_eight_second_stream_is_one_segment() {
        let records: Vec<_> = (0..10).map(|i| rec("v1", i * 8, -50.0, 20.0 + i as f64)).collect();
        let segs = split_sessions(records, 10).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].records.len(), 10);
    }

    #[test]
    fn one_hour_gap_splits_in_two() {
        let mut records: Vec<_> = (0..5).map(|i| rec("v1", i * 8, -50.0, 20.0)).collect();
        records.extend((0..5).map(|i| rec("v1", 3600 + i * 8, -50.0, 30.0)));
        let segs = split_sessions(records, 10).unwrap();
        assert_eq!(segs.len(), 2);
    }

    #[test]
    fn exact_ten_second_gap_keeps_the_session() {
        // boundary rule: only strictly greater gaps split
        let records = vec![rec("v1", 0, -50.0, 20.0), rec("v1", 10, -50.0, 21.0)];
        let segs = split_sessions(records, 10).unwrap();
        assert_eq!(segs.len(), 1);
        let records = vec![rec("v1", 0, -50.0, 20.0), rec("v1", 11, -50.0, 21.0)];
        let segs = split_sessions(records, 10).unwrap();
        assert_eq!(segs.len(), 2);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let records = vec![rec("v1", 100, -50.0, 20.0), rec("v1", 50, -50.0, 21.0)];
        assert!(split_sessions(records, 10).is_err());
    }

    #[test]
    fn segment_partition_reproduces_the_stream() {
        let mut records = Vec::new();
        let mut ts = 0i64;
        for chunk in 0..7 {
            for i in 0..40 {
                records.push(rec("v1", ts + i * 8, -40.0, 20.0 + i as f64));
            }
            ts += 40 * 8 + 100 * (chunk + 1);
        }
        let original = records.clone();
        let segs = split_sessions(records, 10).unwrap();
        let rebuilt: Vec<ChargingRecord> =
            segs.into_iter().flat_map(|s| s.records).collect();
        assert_eq!(rebuilt, original);
    }

    #[test]
    fn validity_gate_matches_the_three_criteria() {
        let cfg = IngestConfig::default();
        let good = constant_current_segment(150, -50.0, 20.0, 70.0);
        assert_eq!(validate_segment(&good, &cfg), None);

        let short = constant_current_segment(80, -50.0, 20.0, 70.0);
        assert_eq!(validate_segment(&short, &cfg), Some(SegmentRejection::TooShort));

        let narrow = constant_current_segment(150, -50.0, 50.0, 52.0);
        assert_eq!(validate_segment(&narrow, &cfg), Some(SegmentRejection::SpanTooSmall));

        let mut backtrack = constant_current_segment(150, -50.0, 20.0, 70.0);
        backtrack.records[75].soc = backtrack.records[74].soc - 2.0;
        assert_eq!(
            validate_segment(&backtrack, &cfg),
            Some(SegmentRejection::SocBacktrack)
        );
    }

    #[test]
    fn constant_current_capacity_closed_form() {
        // 450 samples at 8 s of -50 A is exactly one hour of charge;
        // SOC 20 -> 70 gives C = 50 Ah / 0.5 = 100 Ah
        let seg = constant_current_segment(450, -50.0, 20.0, 70.0);
        let est = estimate_segment_capacity(&seg).unwrap();
        assert!((est.capacity - 100.0).abs() < 1e-9, "{}", est.capacity);
    }

    #[test]
    fn zero_span_is_a_division_guard_error() {
        let seg = constant_current_segment(450, -50.0, 20.0, 20.0);
        assert!(matches!(
            estimate_segment_capacity(&seg),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn piecewise_current_capacity_matches_hand_sum() {
        // -50 A then -25 A for 1800 s each (225 samples at 8 s per phase);
        // charge = (50*225 + 25*225) * 8/3600 = 37.5 Ah; SOC 20 -> 57.5
        let mut records = Vec::new();
        for i in 0..225 {
            records.push(rec("v1", i * 8, -50.0, 20.0 + i as f64 * 0.1));
        }
        for i in 0..225 {
            records.push(rec("v1", 1800 + i * 8, -25.0, 42.5 + i as f64 * 0.05));
        }
        records.last_mut().unwrap().soc = 57.5;
        let seg = finish_segment(records);
        let est = estimate_segment_capacity(&seg).unwrap();
        assert!((est.capacity - 100.0).abs() < 1e-9, "{}", est.capacity);
    }

    #[test]
    fn weekly_mean_and_missing_weeks() {
        let mk = |week, cap| SegmentCapacityEstimate {
            vehicle_id: "v1".into(),
            week_index: week,
            capacity: cap,
            soc_span: 0.5,
            valid: true,
        };
        let weekly = aggregate_weekly(&[mk(0, 100.0), mk(0, 102.0), mk(2, 99.0)]);
        let series = &weekly["v1"];
        assert_eq!(series[&0].capacity, 101.0);
        assert_eq!(series[&0].n_segments, 2);
        assert!(!series.contains_key(&1), "missing week must stay missing");
        assert_eq!(series[&2].capacity, 99.0);
    }

    #[test]
    fn weekly_mean_is_permutation_invariant() {
        let mk = |week, cap| SegmentCapacityEstimate {
            vehicle_id: "v1".into(),
            week_index: week,
            capacity: cap,
            soc_span: 0.5,
            valid: true,
        };
        let mut ests = vec![mk(0, 100.0), mk(0, 104.0), mk(0, 96.5), mk(1, 90.0)];
        let a = aggregate_weekly(&ests);
        ests.reverse();
        let b = aggregate_weekly(&ests);
        assert_eq!(a["v1"][&0], b["v1"][&0]);
    }

    #[test]
    fn median_filter_hand_case_and_guards() {
        assert_eq!(median_filter(&[1.0, 9.0, 2.0], 3).unwrap(), vec![1.0, 2.0, 2.0]);
        assert!(median_filter(&[1.0, 2.0], 2).is_err());
        assert!(median_filter(&[1.0, 2.0], 5).is_err());
        let constant = vec![5.0; 11];
        assert_eq!(median_filter(&constant, 5).unwrap(), constant);
    }

    #[test]
    fn median_filter_removes_isolated_spike() {
        let mut ramp: Vec<f64> = (0..21).map(|i| i as f64).collect();
        ramp[10] = 400.0;
        let filtered = median_filter(&ramp, 5).unwrap();
        assert!((filtered[10] - 10.0).abs() <= 2.0, "spike survived: {}", filtered[10]);
        assert_eq!(filtered[0], 0.0);
        assert_eq!(filtered[20], 20.0);
    }

    /// Naive oracle: sort the replicated-padded window for every position.
    fn median_oracle(series: &[f64], window: usize) -> Vec<f64> {
        let half = window / 2;
        let n = series.len();
        (0..n)
            .map(|i| {
                let mut w: Vec<f64> = (0..window)
                    .map(|k| {
                        let j = (i as isize - half as isize + k as isize)
                            .clamp(0, n as isize - 1) as usize;
                        series[j]
                    })
                    .collect();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                w[half]
            })
            .collect()
    }

    #[test]
    fn median_filter_matches_naive_oracle_on_random_series() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for case in 0..1000 {
            let n = rng.random_range(9..40usize);
            let series: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            for window in [3usize, 5, 7, 9] {
                let got = median_filter(&series, window).unwrap();
                let want = median_oracle(&series, window);
                assert_eq!(got, want, "case {case} window {window}");
            }
        }
    }

    #[test]
    fn median_filter_idempotent_on_monotone_with_window_3() {
        let series: Vec<f64> = (0..30).map(|i| (i * i) as f64 * 0.1).collect();
        let once = median_filter(&series, 3).unwrap();
        let twice = median_filter(&once, 3).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, series);
    }
}
