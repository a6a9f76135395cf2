//! Windowing, per-channel aggregation, imputation, encoding and fusion.
//!
//! Column registry (canonical order, one row per takeover event):
//!
//! | source  | columns | aggregation |
//! |---------|---------|-------------|
//! | eye     | gaze_x_mean, gaze_y_mean, pupil_size_mean, time_to_first_fixation, fixation_duration_mean, fixation_sequence | means over the window; pupil averaged across both eyes; fixations are runs of one AOI code lasting ≥ 100 ms; time to first fixation in deciseconds from window start |
//! | ppg     | sdnn, rmssd, pnn50 | HRV over detected beats |
//! | gsr     | gsr_peak_count, gsr_peak_amplitude | phasic peak count and mean amplitude |
//! | survey  | gender_M, gender_W, nasa_tlx, pss10 | one-hot gender; questionnaire scores as ordinal values |
//! | task    | ndrt_C, ndrt_U, ndrt_R, ndrt_S | one-hot |
//! | vehicle | right_lane_distance, left_lane_distance, distance_to_hazard, steering_angle_std, throttle_angle, brake_angle, velocity | means, except steering (standard deviation) and hazard distance (last value in window) |

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, FilterSpec, TimeSeries};
use crate::error::{Error, Result};
use crate::hrv;
use crate::labeling::Ndrt;

pub const DEFAULT_WINDOW_S: f64 = 10.0;
pub const SPARSE_COLUMN_THRESHOLD: f64 = 0.5;
/// Gaps longer than this invalidate the channel's features for a window.
pub const MAX_INTERPOLATED_GAP_S: f64 = 1.0;
pub const MIN_FIXATION_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Eye,
    Ppg,
    Gsr,
    Survey,
    Task,
    Vehicle,
}

/// A raw sensor stream the extractor knows about.
#[derive(Debug, Clone, Copy)]
pub struct ChannelDef {
    pub name: &'static str,
    pub source: Source,
    pub rate_hz: f64,
    /// Plausible raw value range, when one is declared.
    pub range: Option<(f64, f64)>,
}

pub const CHANNELS: [ChannelDef; 14] = [
    ChannelDef { name: "ppg", source: Source::Ppg, rate_hz: 256.0, range: None },
    ChannelDef { name: "gsr", source: Source::Gsr, rate_hz: 256.0, range: Some((0.0, 100.0)) },
    ChannelDef { name: "gaze_x", source: Source::Eye, rate_hz: 60.0, range: Some((0.0, 1920.0)) },
    ChannelDef { name: "gaze_y", source: Source::Eye, rate_hz: 60.0, range: Some((0.0, 1080.0)) },
    ChannelDef { name: "pupil_left", source: Source::Eye, rate_hz: 60.0, range: Some((0.0, 7.0)) },
    ChannelDef { name: "pupil_right", source: Source::Eye, rate_hz: 60.0, range: Some((0.0, 7.0)) },
    // 0 = no AOI, 1 = monitor, 2 = cellphone, 3 = tablet.
    ChannelDef { name: "aoi", source: Source::Eye, rate_hz: 60.0, range: Some((0.0, 3.0)) },
    ChannelDef { name: "right_lane_distance", source: Source::Vehicle, rate_hz: 20.0, range: Some((0.73, 2.4)) },
    ChannelDef { name: "left_lane_distance", source: Source::Vehicle, rate_hz: 20.0, range: Some((1.02, 2.8)) },
    ChannelDef { name: "distance_to_hazard", source: Source::Vehicle, rate_hz: 20.0, range: Some((98.0, 131.0)) },
    ChannelDef { name: "steering_angle", source: Source::Vehicle, rate_hz: 20.0, range: Some((-180.0, 114.0)) },
    ChannelDef { name: "throttle_angle", source: Source::Vehicle, rate_hz: 20.0, range: Some((15.0, 21.0)) },
    ChannelDef { name: "brake_angle", source: Source::Vehicle, rate_hz: 20.0, range: Some((0.0, 17.0)) },
    ChannelDef { name: "velocity", source: Source::Vehicle, rate_hz: 20.0, range: Some((0.0, 55.0)) },
];

pub fn channel_def(name: &str) -> Option<&'static ChannelDef> {
    CHANNELS.iter().find(|c| c.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ColumnKind {
    Numeric,
    /// One column of a one-hot group.
    Indicator { group: String, category: String },
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarDef {
    pub name: &'static str,
    pub source: Source,
    /// Table-1 value range used by [`validate_ranges`].
    pub range: Option<(f64, f64)>,
}

/// Non-categorical features, in canonical order within their source.
pub const SCALARS: [ScalarDef; 20] = [
    ScalarDef { name: "gaze_x_mean", source: Source::Eye, range: Some((0.0, 1920.0)) },
    ScalarDef { name: "gaze_y_mean", source: Source::Eye, range: Some((0.0, 1080.0)) },
    ScalarDef { name: "pupil_size_mean", source: Source::Eye, range: Some((0.0, 7.0)) },
    ScalarDef { name: "time_to_first_fixation", source: Source::Eye, range: Some((1.0, 90.0)) },
    ScalarDef { name: "fixation_duration_mean", source: Source::Eye, range: Some((100.0, 1500.0)) },
    ScalarDef { name: "fixation_sequence", source: Source::Eye, range: Some((1.0, 2500.0)) },
    ScalarDef { name: "sdnn", source: Source::Ppg, range: Some((45.0, 75.0)) },
    ScalarDef { name: "rmssd", source: Source::Ppg, range: Some((25.0, 43.0)) },
    ScalarDef { name: "pnn50", source: Source::Ppg, range: Some((18.0, 28.0)) },
    ScalarDef { name: "gsr_peak_count", source: Source::Gsr, range: Some((1.0, 6.0)) },
    ScalarDef { name: "gsr_peak_amplitude", source: Source::Gsr, range: Some((0.01, 1.58)) },
    ScalarDef { name: "nasa_tlx", source: Source::Survey, range: Some((1.0, 21.0)) },
    ScalarDef { name: "pss10", source: Source::Survey, range: Some((0.0, 4.0)) },
    ScalarDef { name: "right_lane_distance", source: Source::Vehicle, range: Some((0.73, 2.4)) },
    ScalarDef { name: "left_lane_distance", source: Source::Vehicle, range: Some((1.02, 2.8)) },
    ScalarDef { name: "distance_to_hazard", source: Source::Vehicle, range: Some((98.0, 131.0)) },
    ScalarDef { name: "steering_angle_std", source: Source::Vehicle, range: None },
    ScalarDef { name: "throttle_angle", source: Source::Vehicle, range: Some((15.0, 21.0)) },
    ScalarDef { name: "brake_angle", source: Source::Vehicle, range: Some((0.0, 17.0)) },
    ScalarDef { name: "velocity", source: Source::Vehicle, range: Some((0.0, 55.0)) },
];

fn scalar_index(name: &str) -> usize {
    SCALARS
        .iter()
        .position(|s| s.name == name)
        .unwrap_or_else(|| panic!("'{name}' is not a registered feature"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    W,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::M, Gender::W];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::W => "W",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Gender::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownCategory {
                field: "gender".into(),
                value: s.into(),
            })
    }
}

/// Per-event context that does not come from sensor streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMeta {
    pub event_id: String,
    pub subject_id: String,
    pub ndrt: Option<Ndrt>,
    pub gender: Option<Gender>,
    /// Most recent composite score before the trial, 1–21.
    pub nasa_tlx: Option<u8>,
    /// Session-start category, 0–4.
    pub pss10: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub event_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub channel_slices: BTreeMap<String, TimeSeries>,
}

/// Half-open `[tor_time - width_s, tor_time)` slice of every channel.
pub fn segment_window(
    event_id: &str,
    channels: &BTreeMap<String, TimeSeries>,
    tor_time: f64,
    width_s: f64,
) -> Result<Window> {
    let t_start = tor_time - width_s;
    let mut channel_slices = BTreeMap::new();
    for (name, series) in channels {
        let rate = series.sample_rate_hz;
        let offset = (t_start - series.t0) * rate;
        let count = (rate * width_s).round() as usize;
        let insufficient = || Error::InsufficientHistory {
            channel: name.clone(),
            t_start,
        };
        if offset < -1e-6 {
            return Err(insufficient());
        }
        let start = offset.round() as usize;
        if start + count > series.len() {
            return Err(insufficient());
        }
        let slice = TimeSeries {
            channel_name: name.clone(),
            sample_rate_hz: rate,
            t0: series.time_at(start),
            values: series.values[start..start + count].to_vec(),
        };
        channel_slices.insert(name.clone(), slice);
    }
    Ok(Window {
        event_id: event_id.to_string(),
        t_start,
        t_end: tor_time,
        channel_slices,
    })
}

/// Session-level preprocessing applied before windowing.
///
/// PPG is min-max normalized, gap-interpolated, high-passed (order 2,
/// 0.5 Hz) then low-passed (order 1, 6 Hz); GSR is gap-interpolated. Gaps
/// longer than [`MAX_INTERPOLATED_GAP_S`] are re-marked missing afterwards.
pub fn preprocess_channels(channels: &BTreeMap<String, TimeSeries>) -> Result<BTreeMap<String, TimeSeries>> {
    let mut out = BTreeMap::new();
    for (name, series) in channels {
        let prepared = match name.as_str() {
            "ppg" => prepare_ppg(series)?,
            "gsr" => remask_long_gaps(series, dsp::interpolate_gaps(series)?),
            _ => series.clone(),
        };
        out.insert(name.clone(), prepared);
    }
    Ok(out)
}

pub fn prepare_ppg(raw: &TimeSeries) -> Result<TimeSeries> {
    let normalized = dsp::minmax_normalize(raw)?;
    let dense = dsp::interpolate_gaps(&normalized)?;
    let high = dsp::butterworth_filter(&dense, &FilterSpec::high_pass(2, 0.5))?;
    let band = dsp::butterworth_filter(&high, &FilterSpec::low_pass(1, 6.0))?;
    Ok(remask_long_gaps(raw, band))
}

fn remask_long_gaps(raw: &TimeSeries, mut dense: TimeSeries) -> TimeSeries {
    let limit = (MAX_INTERPOLATED_GAP_S * raw.sample_rate_hz).floor() as usize;
    let mut i = 0;
    while i < raw.len() {
        if raw.values[i].is_nan() {
            let start = i;
            while i < raw.len() && raw.values[i].is_nan() {
                i += 1;
            }
            if i - start > limit {
                dense.values[start..i].fill(f64::NAN);
            }
        } else {
            i += 1;
        }
    }
    dense
}

/// Features of one event before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub event_id: String,
    pub subject_id: String,
    /// Aligned with [`SCALARS`].
    pub values: Vec<Option<f64>>,
    pub gender: Option<Gender>,
    pub ndrt: Option<Ndrt>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values[scalar_index(name)]
    }

    fn set(&mut self, name: &str, value: Option<f64>) {
        self.values[scalar_index(name)] = value.filter(|v| v.is_finite());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeFlag {
    pub feature: String,
    pub value: f64,
    pub range: (f64, f64),
}

/// Features whose value falls outside the declared Table-1 range.
pub fn validate_ranges(vector: &FeatureVector) -> Vec<RangeFlag> {
    SCALARS
        .iter()
        .zip(&vector.values)
        .filter_map(|(def, value)| {
            let (value, range) = (value.as_ref()?, def.range?);
            (*value < range.0 || *value > range.1).then(|| RangeFlag {
                feature: def.name.to_string(),
                value: *value,
                range,
            })
        })
        .collect()
}

fn usable(slice: Option<&TimeSeries>) -> Option<&TimeSeries> {
    slice.filter(|s| !s.is_empty() && s.longest_gap_s() <= MAX_INTERPOLATED_GAP_S)
}

fn nanmean(values: &[f64]) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn nanstd(values: &[f64]) -> Option<f64> {
    let observed: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    (!observed.is_empty()).then(|| dsp::mean_std(&observed).1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    pub aoi: u8,
    pub start: usize,
    pub len: usize,
}

/// Runs of a single non-zero AOI code lasting at least [`MIN_FIXATION_S`].
pub fn fixations(aoi: &TimeSeries) -> Vec<Fixation> {
    let min_len = (MIN_FIXATION_S * aoi.sample_rate_hz).ceil() as usize;
    let code = |v: f64| -> Option<u8> { (!v.is_nan() && v >= 0.5).then(|| v.round() as u8) };
    let mut out = Vec::new();
    let mut i = 0;
    let values = &aoi.values;
    while i < values.len() {
        match code(values[i]) {
            Some(c) => {
                let start = i;
                while i < values.len() && code(values[i]) == Some(c) {
                    i += 1;
                }
                if i - start >= min_len {
                    out.push(Fixation { aoi: c, start, len: i - start });
                }
            }
            None => i += 1,
        }
    }
    out
}

/// Aggregates one window into the registry's features. Absent or gappy
/// channels leave their features missing.
pub fn extract_features(window: &Window, meta: &EventMeta) -> Result<FeatureVector> {
    if let Some(unknown) = window.channel_slices.keys().find(|name| channel_def(name).is_none()) {
        return Err(Error::UnknownChannel(unknown.clone()));
    }
    let mut fv = FeatureVector {
        event_id: meta.event_id.clone(),
        subject_id: meta.subject_id.clone(),
        values: vec![None; SCALARS.len()],
        gender: meta.gender,
        ndrt: meta.ndrt,
    };
    let slice = |name: &str| usable(window.channel_slices.get(name));
    let mean_of = |name: &str| slice(name).and_then(|s| nanmean(&s.values));

    fv.set("gaze_x_mean", mean_of("gaze_x"));
    fv.set("gaze_y_mean", mean_of("gaze_y"));
    let pupil = match (mean_of("pupil_left"), mean_of("pupil_right")) {
        (Some(l), Some(r)) => Some(0.5 * (l + r)),
        (l, r) => l.or(r),
    };
    fv.set("pupil_size_mean", pupil);
    if let Some(aoi) = slice("aoi") {
        let fix = fixations(aoi);
        let rate = aoi.sample_rate_hz;
        fv.set("fixation_sequence", Some(fix.len() as f64));
        if let Some(first) = fix.first() {
            fv.set("time_to_first_fixation", Some((first.start as f64 / rate * 10.0).round()));
            let mean_len = fix.iter().map(|f| f.len as f64).sum::<f64>() / fix.len() as f64;
            fv.set("fixation_duration_mean", Some(mean_len / rate * 1000.0));
        }
    }

    if let Some(ppg) = slice("ppg") {
        if let Ok(metrics) = hrv::detect_beats(ppg).and_then(|b| hrv::hrv_metrics(&b)) {
            fv.set("sdnn", Some(metrics.sdnn_ms));
            fv.set("rmssd", Some(metrics.rmssd_ms));
            fv.set("pnn50", Some(metrics.pnn50_pct));
        }
    }

    if let Some(gsr) = slice("gsr") {
        let dense = dsp::interpolate_gaps(gsr)?;
        let peaks = dsp::detect_gsr_peaks(&dense);
        fv.set("gsr_peak_count", Some(peaks.count as f64));
        fv.set("gsr_peak_amplitude", peaks.mean_amplitude());
    }

    fv.set("nasa_tlx", meta.nasa_tlx.map(f64::from));
    fv.set("pss10", meta.pss10.map(f64::from));

    fv.set("right_lane_distance", mean_of("right_lane_distance"));
    fv.set("left_lane_distance", mean_of("left_lane_distance"));
    fv.set(
        "distance_to_hazard",
        slice("distance_to_hazard").and_then(|s| s.values.iter().rev().find(|v| !v.is_nan()).copied()),
    );
    fv.set("steering_angle_std", slice("steering_angle").and_then(|s| nanstd(&s.values)));
    fv.set("throttle_angle", mean_of("throttle_angle"));
    fv.set("brake_angle", mean_of("brake_angle"));
    fv.set("velocity", mean_of("velocity"));
    Ok(fv)
}

/// Indicator expansion over an ordered domain.
pub fn one_hot(field: &str, value: &str, domain: &[&str]) -> Result<Vec<f64>> {
    let hit = domain.iter().position(|d| *d == value).ok_or_else(|| Error::UnknownCategory {
        field: field.into(),
        value: value.into(),
    })?;
    Ok((0..domain.len()).map(|i| if i == hit { 1.0 } else { 0.0 }).collect())
}

const GENDER_DOMAIN: [&str; 2] = ["M", "W"];
const NDRT_DOMAIN: [&str; 4] = ["C", "U", "R", "S"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Normalization {
    ZScore { mean: f64, std: f64 },
    MinMax { min: f64, max: f64 },
}

impl Normalization {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            Normalization::ZScore { mean, std } => (v - mean) / std,
            Normalization::MinMax { min, max } => (v - min) / (max - min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub source: Source,
    pub kind: ColumnKind,
    pub missing_fraction: f64,
    /// Training mean used to fill missing cells, once fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impute_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

/// Canonical fused column layout before any column is dropped.
pub fn canonical_columns() -> Vec<ColumnMeta> {
    let numeric = |def: &ScalarDef| ColumnMeta {
        name: def.name.to_string(),
        source: def.source,
        kind: ColumnKind::Numeric,
        missing_fraction: 0.0,
        impute_value: None,
        normalization: None,
    };
    let indicator = |source: Source, group: &str, category: &str| ColumnMeta {
        name: format!("{group}_{category}"),
        source,
        kind: ColumnKind::Indicator {
            group: group.to_string(),
            category: category.to_string(),
        },
        missing_fraction: 0.0,
        impute_value: None,
        normalization: None,
    };
    let mut cols = Vec::new();
    for source in [Source::Eye, Source::Ppg, Source::Gsr, Source::Survey, Source::Task, Source::Vehicle] {
        if source == Source::Survey {
            cols.extend(GENDER_DOMAIN.iter().map(|c| indicator(source, "gender", c)));
        }
        if source == Source::Task {
            cols.extend(NDRT_DOMAIN.iter().map(|c| indicator(source, "ndrt", c)));
        }
        cols.extend(SCALARS.iter().filter(|d| d.source == source).map(numeric));
    }
    cols
}

/// Encoded row in [`canonical_columns`] order; missing cells are `NaN`.
pub fn encode(vector: &FeatureVector) -> Result<Vec<f64>> {
    let gender = match vector.gender {
        Some(g) => one_hot("gender", g.as_str(), &GENDER_DOMAIN)?,
        None => vec![f64::NAN; GENDER_DOMAIN.len()],
    };
    let ndrt = match vector.ndrt {
        Some(n) => one_hot("ndrt", n.as_str(), &NDRT_DOMAIN)?,
        None => vec![f64::NAN; NDRT_DOMAIN.len()],
    };
    let mut row = Vec::new();
    for col in canonical_columns() {
        let value = match &col.kind {
            ColumnKind::Numeric => vector.get(&col.name).unwrap_or(f64::NAN),
            ColumnKind::Indicator { group, category } => {
                let (values, domain): (&[f64], &[&str]) = if group == "gender" {
                    (&gender, &GENDER_DOMAIN)
                } else {
                    (&ndrt, &NDRT_DOMAIN)
                };
                values[domain.iter().position(|d| d == category).expect("category in domain")]
            }
        };
        row.push(value);
    }
    Ok(row)
}

/// Rectangular per-event feature table with column metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub event_ids: Vec<String>,
    pub subject_ids: Vec<String>,
    pub columns: Vec<ColumnMeta>,
    /// Row-major; `NaN` marks a missing cell.
    pub rows: Vec<Vec<f64>>,
    pub dropped: Vec<DroppedColumn>,
}

impl FeatureMatrix {
    /// Encodes and stacks vectors in event-id order.
    pub fn from_vectors(vectors: &[FeatureVector]) -> Result<Self> {
        let mut sorted: Vec<&FeatureVector> = vectors.iter().collect();
        sorted.sort_by(|a, b| a.event_id.cmp(&b.event_id));
        let rows = sorted.iter().map(|v| encode(v)).collect::<Result<Vec<_>>>()?;
        let mut matrix = Self {
            event_ids: sorted.iter().map(|v| v.event_id.clone()).collect(),
            subject_ids: sorted.iter().map(|v| v.subject_id.clone()).collect(),
            columns: canonical_columns(),
            rows,
            dropped: Vec::new(),
        };
        matrix.refresh_missing_fractions();
        Ok(matrix)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.rows.iter().flatten().any(|v| v.is_nan())
    }

    pub fn refresh_missing_fractions(&mut self) {
        let n = self.rows.len().max(1) as f64;
        for (j, col) in self.columns.iter_mut().enumerate() {
            col.missing_fraction = self.rows.iter().filter(|r| r[j].is_nan()).count() as f64 / n;
        }
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            event_ids: rows.iter().map(|&i| self.event_ids[i].clone()).collect(),
            subject_ids: rows.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
            dropped: self.dropped.clone(),
        }
    }

    fn retain_columns(&mut self, keep: &[bool], reason: impl Fn(&ColumnMeta) -> String) {
        let mut dropped = Vec::new();
        let columns = std::mem::take(&mut self.columns);
        for (col, &k) in columns.iter().zip(keep) {
            if !k {
                dropped.push(DroppedColumn {
                    name: col.name.clone(),
                    reason: reason(col),
                });
            }
        }
        self.columns = columns.into_iter().zip(keep).filter(|(_, &k)| k).map(|(c, _)| c).collect();
        for row in &mut self.rows {
            *row = row.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
        }
        self.dropped.extend(dropped);
    }

    /// Removes columns whose missing fraction is strictly above `threshold`.
    pub fn drop_sparse_columns(&self, threshold: f64) -> Result<FeatureMatrix> {
        let mut out = self.clone();
        out.refresh_missing_fractions();
        let keep: Vec<bool> = out.columns.iter().map(|c| c.missing_fraction <= threshold).collect();
        out.retain_columns(&keep, |c| {
            format!("missing fraction {:.4} exceeds {threshold}", c.missing_fraction)
        });
        if out.columns.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        Ok(out)
    }

    /// Fills missing cells with column means over `train_rows` only.
    pub fn impute_mean(&self, train_rows: &[usize]) -> Result<FeatureMatrix> {
        let mut out = self.clone();
        for j in 0..out.columns.len() {
            let observed: Vec<f64> = train_rows.iter().map(|&i| out.rows[i][j]).filter(|v| !v.is_nan()).collect();
            if observed.is_empty() {
                return Err(Error::AllMissingColumn(out.columns[j].name.clone()));
            }
            let mean = observed.iter().sum::<f64>() / observed.len() as f64;
            out.columns[j].impute_value = Some(mean);
            for row in &mut out.rows {
                if row[j].is_nan() {
                    row[j] = mean;
                }
            }
        }
        Ok(out)
    }

    /// Normalizes numeric columns with statistics fit on `train_rows`: min-max
    /// for PPG-derived columns, z-score for the rest. Indicator columns stay
    /// 0/1. Columns constant on the training rows are dropped.
    pub fn fuse_and_normalize(&self, train_rows: &[usize]) -> Result<FeatureMatrix> {
        if self.has_missing() {
            return Err(Error::InvalidData("impute missing values before normalizing".into()));
        }
        let mut out = self.clone();
        let mut keep = vec![true; out.columns.len()];
        for j in 0..out.columns.len() {
            let col = &out.columns[j];
            if col.kind != ColumnKind::Numeric {
                continue;
            }
            let values: Vec<f64> = train_rows.iter().map(|&i| out.rows[i][j]).collect();
            let norm = if col.source == Source::Ppg {
                let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (max > min).then_some(Normalization::MinMax { min, max })
            } else {
                let (mean, std) = dsp::mean_std(&values);
                (std > 0.0).then_some(Normalization::ZScore { mean, std })
            };
            match norm {
                Some(norm) => {
                    for row in &mut out.rows {
                        row[j] = norm.apply(row[j]);
                    }
                    out.columns[j].normalization = Some(norm);
                }
                None => keep[j] = false,
            }
        }
        out.retain_columns(&keep, |_| "constant on training rows".to_string());
        if out.columns.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        Ok(out)
    }

    /// Indices of the one-hot groups, by group name.
    pub fn indicator_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, c) in self.columns.iter().enumerate() {
            if let ColumnKind::Indicator { group, .. } = &c.kind {
                groups.entry(group.as_str()).or_default().push(j);
            }
        }
        groups.into_values().collect()
    }
}

/// Fitted imputation and normalization, replayable on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Output columns in order, with fitted statistics.
    pub columns: Vec<ColumnMeta>,
    /// Columns removed at any stage; tolerated in input and ignored.
    pub dropped: Vec<DroppedColumn>,
}

impl Preprocessor {
    /// Imputes then normalizes `matrix` using `train_rows`; returns the transformed matrix too.
    pub fn fit(matrix: &FeatureMatrix, train_rows: &[usize]) -> Result<(Preprocessor, FeatureMatrix)> {
        let fused = matrix.impute_mean(train_rows)?.fuse_and_normalize(train_rows)?;
        let pre = Preprocessor {
            columns: fused.columns.clone(),
            dropped: fused.dropped.clone(),
        };
        Ok((pre, fused))
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Realigns `matrix` by column name, imputes and normalizes with the fitted statistics.
    pub fn transform(&self, matrix: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        for name in matrix.column_names() {
            let known = self.columns.iter().any(|c| c.name == name) || self.dropped.iter().any(|d| d.name == name);
            if !known {
                return Err(Error::SchemaMismatch(format!("unknown column '{name}'")));
            }
        }
        let positions = self
            .columns
            .iter()
            .map(|c| {
                matrix
                    .column_index(&c.name)
                    .ok_or_else(|| Error::SchemaMismatch(format!("missing column '{}'", c.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(matrix
            .rows
            .iter()
            .map(|row| {
                self.columns
                    .iter()
                    .zip(&positions)
                    .map(|(col, &p)| {
                        let mut v = row[p];
                        if v.is_nan() {
                            v = col.impute_value.unwrap_or(f64::NAN);
                        }
                        match &col.normalization {
                            Some(n) => n.apply(v),
                            None => v,
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

/// One recorded (subject, trial) session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub subject_id: String,
    pub trial_id: String,
    pub channels: BTreeMap<String, TimeSeries>,
}

/// A takeover event ready for extraction: where to cut and what metadata to attach.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionJob {
    pub meta: EventMeta,
    pub trial_id: String,
    pub tor_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionWarning {
    pub event_id: String,
    pub message: String,
}

/// Preprocesses each session, then extracts every job's window in parallel.
/// Events whose window cannot be cut are reported as warnings and skipped.
pub fn extract_all(
    sessions: &[SessionData],
    jobs: &[ExtractionJob],
    width_s: f64,
) -> Result<(Vec<FeatureVector>, Vec<ExtractionWarning>)> {
    let prepared: Vec<(String, String, BTreeMap<String, TimeSeries>)> = sessions
        .par_iter()
        .map(|s| Ok((s.subject_id.clone(), s.trial_id.clone(), preprocess_channels(&s.channels)?)))
        .collect::<Result<_>>()?;
    let empty = BTreeMap::new();
    let results: Vec<std::result::Result<FeatureVector, ExtractionWarning>> = jobs
        .par_iter()
        .map(|job| {
            let channels = prepared
                .iter()
                .find(|(subject, trial, _)| *subject == job.meta.subject_id && *trial == job.trial_id)
                .map(|(_, _, c)| c)
                .unwrap_or(&empty);
            segment_window(&job.meta.event_id, channels, job.tor_time, width_s)
                .and_then(|w| extract_features(&w, &job.meta))
                .map_err(|e| ExtractionWarning {
                    event_id: job.meta.event_id.clone(),
                    message: e.to_string(),
                })
        })
        .collect();
    let mut vectors = Vec::new();
    let mut warnings = Vec::new();
    for r in results {
        match r {
            Ok(v) => vectors.push(v),
            Err(w) => warnings.push(w),
        }
    }
    Ok((vectors, warnings))
}
