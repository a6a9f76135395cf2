//! On-disk formats.
//!
//! Study directory:
//!
//! ```text
//! channels/<subject>_<trial>_<channel>.csv   t,<channel>   (empty cell = missing)
//! events.csv                                 one row per takeover request
//! survey.csv                                 subject_id,trial_id,gender,nasa_tlx,pss10
//! plant.json                                 generator spec and intended classes
//! ```
//!
//! Feature table: `event_id,subject_id,<columns...>` plus a JSON sidecar with
//! column metadata, dropped columns and extraction warnings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dsp::TimeSeries;
use crate::error::{Error, Result};
use crate::features::{canonical_columns, ColumnMeta, DroppedColumn, ExtractionWarning, FeatureMatrix, SessionData, CHANNELS};
use crate::labeling::TakeoverEvent;
use crate::pipeline::{Study, SurveyRecord};
use crate::synth::{PlantRecord, SessionSpec, SyntheticStudy};

pub const CHANNEL_DIR: &str = "channels";
pub const EVENTS_FILE: &str = "events.csv";
pub const SURVEY_FILE: &str = "survey.csv";
pub const PLANT_FILE: &str = "plant.json";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    text.push('\n');
    text
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn parse_cell(text: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    if text.is_empty() {
        Ok(f64::NAN)
    } else {
        text.parse()
    }
}

pub fn channel_csv(series: &TimeSeries) -> String {
    let mut out = String::with_capacity(series.len() * 20);
    writeln!(out, "t,{}", series.channel_name).expect("write to string");
    for (i, v) in series.values.iter().enumerate() {
        writeln!(out, "{:.6},{}", series.time_at(i), cell(*v)).expect("write to string");
    }
    out
}

/// Reads a channel file; the rate comes from `rate_hz`, the start time from the first row.
pub fn parse_channel_csv(text: &str, name: &str, rate_hz: f64, origin: &Path) -> Result<TimeSeries> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != format!("t,{name}") {
        return Err(Error::SchemaMismatch(format!("{}: expected header 't,{name}'", origin.display())));
    }
    let mut t0 = None;
    let mut values = Vec::new();
    for (row, line) in lines.enumerate() {
        let bad = || Error::InvalidData(format!("{}: malformed row {}", origin.display(), row + 2));
        let (t, v) = line.split_once(',').ok_or_else(bad)?;
        if t0.is_none() {
            t0 = Some(t.parse::<f64>().map_err(|_| bad())?);
        }
        values.push(parse_cell(v).map_err(|_| bad())?);
    }
    TimeSeries::new(name, rate_hz, t0.unwrap_or(0.0), values)
}

fn csv_string<T: Serialize>(rows: &[T], header_if_empty: &str) -> String {
    if rows.is_empty() {
        return format!("{header_if_empty}\n");
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer.serialize(r).expect("in-memory rows serialize");
    }
    String::from_utf8(writer.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

fn parse_csv<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(origin, e)))
        .collect()
}

const EVENTS_HEADER: &str =
    "event_id,subject_id,trial_id,alarm_type,t_alarm,t_takeover,t_incident,lateral_deviation_m,ndrt";

pub fn events_csv(events: &[TakeoverEvent]) -> String {
    csv_string(events, EVENTS_HEADER)
}

pub fn parse_events_csv(text: &str, origin: &Path) -> Result<Vec<TakeoverEvent>> {
    let events: Vec<TakeoverEvent> = parse_csv(text, origin)?;
    let mut seen = BTreeSet::new();
    for e in &events {
        e.validate()?;
        if !seen.insert(e.event_id.as_str()) {
            return Err(Error::InvalidData(format!("duplicate event id '{}'", e.event_id)));
        }
    }
    Ok(events)
}

pub fn survey_csv(records: &[SurveyRecord]) -> String {
    csv_string(records, "subject_id,trial_id,gender,nasa_tlx,pss10")
}

pub fn parse_survey_csv(text: &str, origin: &Path) -> Result<Vec<SurveyRecord>> {
    parse_csv(text, origin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantFile {
    pub spec: SessionSpec,
    pub events: Vec<PlantRecord>,
}

pub fn channel_path(dir: &Path, subject: &str, trial: &str, channel: &str) -> PathBuf {
    dir.join(CHANNEL_DIR).join(format!("{subject}_{trial}_{channel}.csv"))
}

/// Every file of a generated study, rendered in memory.
pub fn render_study(study: &SyntheticStudy) -> Vec<(PathBuf, String)> {
    let mut files = Vec::new();
    for s in &study.sessions {
        for (name, series) in &s.channels {
            files.push((channel_path(Path::new(""), &s.subject_id, &s.trial_id, name), channel_csv(series)));
        }
    }
    files.push((PathBuf::from(EVENTS_FILE), events_csv(&study.events())));
    files.push((PathBuf::from(SURVEY_FILE), survey_csv(&study.survey)));
    let plant = PlantFile {
        spec: study.spec.clone(),
        events: study.plant.clone(),
    };
    files.push((PathBuf::from(PLANT_FILE), to_json(&plant)));
    files
}

pub fn export_study(study: &SyntheticStudy, dir: &Path) -> Result<()> {
    for (relative, contents) in render_study(study) {
        write_text(&dir.join(relative), &contents)?;
    }
    Ok(())
}

/// Reads a study directory. Missing channel files and a missing survey file
/// become warnings; a missing events file is an error.
pub fn ingest_dir(dir: &Path) -> Result<(Study, Vec<String>)> {
    let events_path = dir.join(EVENTS_FILE);
    let events = parse_events_csv(&read_text(&events_path)?, &events_path)?;
    let mut warnings = Vec::new();
    let survey_path = dir.join(SURVEY_FILE);
    let survey = if survey_path.exists() {
        parse_survey_csv(&read_text(&survey_path)?, &survey_path)?
    } else {
        warnings.push(format!("{} not found; survey features will be missing", survey_path.display()));
        Vec::new()
    };
    let sessions_needed: BTreeSet<(String, String)> =
        events.iter().map(|e| (e.subject_id.clone(), e.trial_id.clone())).collect();
    let mut sessions = Vec::new();
    for (subject, trial) in sessions_needed {
        let mut channels = BTreeMap::new();
        for def in &CHANNELS {
            let path = channel_path(dir, &subject, &trial, def.name);
            if !path.exists() {
                warnings.push(format!("missing channel file {}", path.display()));
                continue;
            }
            let series = parse_channel_csv(&read_text(&path)?, def.name, def.rate_hz, &path)?;
            channels.insert(def.name.to_string(), series);
        }
        sessions.push(SessionData {
            subject_id: subject,
            trial_id: trial,
            channels,
        });
    }
    Ok((Study { sessions, events, survey }, warnings))
}

/// Column metadata and audit trail written next to a feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub window_s: f64,
    pub columns: Vec<ColumnMeta>,
    pub dropped: Vec<DroppedColumn>,
    pub warnings: Vec<ExtractionWarning>,
}

pub fn sidecar_path(features_path: &Path) -> PathBuf {
    features_path.with_extension("meta.json")
}

pub fn features_csv(matrix: &FeatureMatrix) -> String {
    let mut out = String::from("event_id,subject_id");
    for c in &matrix.columns {
        out.push(',');
        out.push_str(&c.name);
    }
    out.push('\n');
    for ((id, subject), row) in matrix.event_ids.iter().zip(&matrix.subject_ids).zip(&matrix.rows) {
        out.push_str(id);
        out.push(',');
        out.push_str(subject);
        for v in row {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');
    }
    out
}

/// Parses a feature table. Column metadata comes from `known` when given,
/// otherwise from the canonical registry; unknown names are a schema error.
pub fn parse_features_csv(text: &str, known: Option<&FeatureSidecar>, origin: &Path) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::csv(origin, e))?.clone();
    if headers.get(0) != Some("event_id") || headers.get(1) != Some("subject_id") {
        return Err(Error::SchemaMismatch(format!("{}: expected event_id,subject_id first", origin.display())));
    }
    let registry = canonical_columns();
    let columns = headers
        .iter()
        .skip(2)
        .map(|name| {
            known
                .and_then(|k| k.columns.iter().find(|c| c.name == name))
                .or_else(|| registry.iter().find(|c| c.name == name))
                .cloned()
                .ok_or_else(|| Error::SchemaMismatch(format!("unknown feature column '{name}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = FeatureMatrix {
        event_ids: Vec::new(),
        subject_ids: Vec::new(),
        columns,
        rows: Vec::new(),
        dropped: known.map(|k| k.dropped.clone()).unwrap_or_default(),
    };
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(origin, e))?;
        let bad = || Error::InvalidData(format!("{}: malformed row {}", origin.display(), r + 2));
        matrix.event_ids.push(record.get(0).ok_or_else(bad)?.to_string());
        matrix.subject_ids.push(record.get(1).ok_or_else(bad)?.to_string());
        let row = record
            .iter()
            .skip(2)
            .map(|v| parse_cell(v).map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        matrix.rows.push(row);
    }
    Ok(matrix)
}

/// Reads a feature table and, when present, its sidecar.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let side = sidecar_path(path);
    let sidecar: Option<FeatureSidecar> = if side.exists() { Some(read_json(&side)?) } else { None };
    parse_features_csv(&read_text(path)?, sidecar.as_ref(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{AlarmType, Ndrt};

    #[test]
    fn channel_round_trip_with_gaps() {
        let ts = TimeSeries::new("gsr", 256.0, 0.0, vec![1.5, f64::NAN, 2.25, 0.1 + 0.2]).unwrap();
        let text = channel_csv(&ts);
        assert!(text.starts_with("t,gsr\n0.000000,1.5\n0.003906,\n"));
        let back = parse_channel_csv(&text, "gsr", 256.0, Path::new("x")).unwrap();
        assert_eq!(back.values[0], 1.5);
        assert!(back.values[1].is_nan());
        assert_eq!(back.values[3], 0.1 + 0.2);
        assert!(parse_channel_csv(&text, "ppg", 256.0, Path::new("x")).is_err());
    }

    #[test]
    fn events_round_trip() {
        let events = vec![TakeoverEvent {
            event_id: "S01_T1_01".into(),
            subject_id: "S01".into(),
            trial_id: "T1".into(),
            alarm_type: AlarmType::NoAlarm,
            t_alarm: 25.123456,
            t_takeover: None,
            t_incident: 38.123456,
            lateral_deviation_m: None,
            ndrt: Ndrt::U,
        }];
        let text = events_csv(&events);
        assert!(text.starts_with(EVENTS_HEADER));
        assert_eq!(parse_events_csv(&text, Path::new("e")).unwrap(), events);
        assert_eq!(events_csv(&[]), format!("{EVENTS_HEADER}\n"));
    }

    #[test]
    fn features_round_trip_and_unknown_column() {
        let mut columns = canonical_columns();
        columns.truncate(2);
        let matrix = FeatureMatrix {
            event_ids: vec!["e1".into(), "e2".into()],
            subject_ids: vec!["s1".into(), "s2".into()],
            columns,
            rows: vec![vec![1.0, f64::NAN], vec![-0.5, 1e-12]],
            dropped: Vec::new(),
        };
        let text = features_csv(&matrix);
        let back = parse_features_csv(&text, None, Path::new("f")).unwrap();
        assert_eq!(back.event_ids, matrix.event_ids);
        assert_eq!(back.rows[1], matrix.rows[1]);
        assert!(back.rows[0][1].is_nan());
        let bad = text.replacen("gaze_x_mean", "mystery", 1);
        assert!(matches!(parse_features_csv(&bad, None, Path::new("f")), Err(Error::SchemaMismatch(_))));
    }
}
