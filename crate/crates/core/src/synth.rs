//! Deterministic synthetic study generator with plantable class structure.
//!
//! Every takeover request gets an epoch of constant latent state around it.
//! Three latents in [0, 1] drive the sensor streams:
//!
//! | latent    | planted from          | drives |
//! |-----------|-----------------------|--------|
//! | time      | takeover-time class   | pupil size, fixation length, velocity, throttle |
//! | intention | take over or not      | gaze position, time to first fixation, brake |
//! | quality   | lateral-deviation class | steering variability, lane distances, hazard distance |
//!
//! Each latent is `s * center(class) + (1 - s) * u` plus a jitter scaled by
//! `s`, where `s` is the separability and `u` is uniform noise. With `s = 1`
//! the classes occupy disjoint latent ranges; with `s = 0` every stream is
//! independent of the labels. NDRT load shapes heart-rate variability and
//! skin-conductance response rate; the NDRT takeover-time offset is also
//! scaled by `s`.
//!
//! During the arithmetic task the sensors express `1 - time` instead of
//! `time`, so time classes are separable only jointly with the NDRT column
//! and no single linear boundary fits every task. Each event also draws a
//! small traffic/habit offset for these channels.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::TimeSeries;
use crate::error::{Error, Result};
use crate::features::{channel_def, Gender, SessionData, CHANNELS};
use crate::labeling::{label_event, AlarmType, Intention, Ndrt, Quality, TakeoverEvent, Time5, TIME5_EDGES_S};
use crate::pipeline::{Study, SurveyRecord};

/// Shortest and longest takeover time the generator emits.
pub const TAKEOVER_RANGE_S: (f64, f64) = (0.3, 12.0);
/// Incident follows the request by this long.
pub const INCIDENT_DELAY_S: f64 = 13.0;
const TIME5_CENTERS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
/// Quality latent centers in class-index order (low, medium, high).
const QUALITY_CENTERS: [f64; 3] = [0.15, 0.85, 0.5];
const LATENT_JITTER: f64 = 0.035;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub tors_per_trial: usize,
    /// True, no and false alarm counts per trial.
    pub alarm_mix: [usize; 3],
    /// Probability of a takeover per alarm type, same order as `alarm_mix`.
    pub takeover_probability: [f64; 3],
    pub physio_rate_hz: f64,
    pub eye_rate_hz: f64,
    pub vehicle_rate_hz: f64,
    /// Mean gap between consecutive requests.
    pub tor_spacing_s: f64,
    /// Time before the first request.
    pub lead_in_s: f64,
    /// Time5 class probabilities before the NDRT shift.
    pub time5_weights: [f64; 5],
    /// Added to the takeover time per NDRT (C, U, R, S), scaled by separability.
    pub ndrt_offset_s: [f64; 4],
    /// RR standard deviation per NDRT (C, U, R, S).
    pub ndrt_sdnn_ms: [f64; 4],
    /// Mean RR interval per NDRT (C, U, R, S).
    pub ndrt_rr_ms: [f64; 4],
    /// Skin-conductance responses per minute at stress 0 and stress 1.
    pub gsr_rate_per_min: [f64; 2],
    /// Lateral deviation range per quality class (low, medium, high).
    pub quality_ranges_m: [[f64; 2]; 3],
    pub separability: f64,
    pub seed: u64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            n_subjects: 17,
            trials_per_subject: 3,
            tors_per_trial: 15,
            alarm_mix: [6, 3, 6],
            takeover_probability: [0.9, 0.6, 0.7],
            physio_rate_hz: 256.0,
            eye_rate_hz: 60.0,
            vehicle_rate_hz: 20.0,
            tor_spacing_s: 25.0,
            lead_in_s: 25.0,
            time5_weights: [1.0, 1.0, 1.0, 1.0, 2.0],
            ndrt_offset_s: [-0.5, 0.2, 0.6, -0.3],
            ndrt_sdnn_ms: [70.0, 60.0, 50.0, 50.0],
            ndrt_rr_ms: [820.0, 790.0, 760.0, 750.0],
            gsr_rate_per_min: [9.0, 30.0],
            quality_ranges_m: [[0.2, 3.4], [7.1, 9.8], [3.6, 6.9]],
            separability: 0.9,
            seed: 0,
        }
    }
}

impl SessionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_subjects == 0 || self.trials_per_subject == 0 || self.tors_per_trial == 0 {
            return bad("subject, trial and request counts must be positive");
        }
        if self.alarm_mix.iter().sum::<usize>() != self.tors_per_trial {
            return bad("alarm mix must sum to tors_per_trial");
        }
        if [self.physio_rate_hz, self.eye_rate_hz, self.vehicle_rate_hz]
            .iter()
            .any(|r| !(r.is_finite() && *r > 0.0))
        {
            return bad("sample rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return bad("separability must lie in [0, 1]");
        }
        if self.takeover_probability.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("takeover probabilities must lie in [0, 1]");
        }
        // Windows of 10 s before each request must stay inside its own epoch.
        if !(self.tor_spacing_s >= 24.0) || !(self.lead_in_s >= 20.0) {
            return bad("requests need at least 24 s spacing and 20 s lead-in");
        }
        if self.time5_weights.iter().any(|w| !(*w >= 0.0)) || self.time5_weights.iter().sum::<f64>() <= 0.0 {
            return bad("time5 weights must be non-negative with a positive sum");
        }
        if self.ndrt_sdnn_ms.iter().chain(&self.ndrt_rr_ms).any(|v| !(*v > 0.0)) {
            return bad("RR parameters must be positive");
        }
        if self.gsr_rate_per_min.iter().any(|v| !(*v >= 0.0)) {
            return bad("response rates must be non-negative");
        }
        let mut ranges = self.quality_ranges_m;
        ranges.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if ranges.iter().any(|r| !(r[0] >= 0.0 && r[0] <= r[1])) {
            return bad("quality ranges must be ordered and non-negative");
        }
        Ok(())
    }

    pub fn n_events(&self) -> usize {
        self.n_subjects * self.trials_per_subject * self.tors_per_trial
    }
}

/// What the generator intended for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub event_id: String,
    pub intention: Intention,
    pub time5: Option<Time5>,
    pub quality: Option<Quality>,
    pub ndrt: Ndrt,
    pub stress: f64,
    pub time_latent: f64,
    pub intention_latent: f64,
    pub quality_latent: f64,
}

/// One generated (subject, trial) recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub subject_id: String,
    pub trial_id: String,
    pub channels: BTreeMap<String, TimeSeries>,
    pub events: Vec<TakeoverEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudy {
    pub spec: SessionSpec,
    pub sessions: Vec<SyntheticSession>,
    pub survey: Vec<SurveyRecord>,
    pub plant: Vec<PlantRecord>,
}

impl SyntheticStudy {
    pub fn events(&self) -> Vec<TakeoverEvent> {
        self.sessions.iter().flat_map(|s| s.events.iter().cloned()).collect()
    }

    pub fn to_study(&self) -> Study {
        Study {
            sessions: self
                .sessions
                .iter()
                .map(|s| SessionData {
                    subject_id: s.subject_id.clone(),
                    trial_id: s.trial_id.clone(),
                    channels: s.channels.clone(),
                })
                .collect(),
            events: self.events(),
            survey: self.survey.clone(),
        }
    }
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

pub fn trial_id(index: usize) -> String {
    format!("T{}", index + 1)
}

/// Values are stored on a 1e-6 grid so text export is exact.
fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn latent(rng: &mut ChaCha8Rng, s: f64, center: Option<f64>) -> f64 {
    let u: f64 = rng.random();
    match center {
        Some(c) => (s * c + (1.0 - s) * u + s * rng.random_range(-LATENT_JITTER..=LATENT_JITTER)).clamp(0.0, 1.0),
        None => u,
    }
}

fn time5_range(class: Time5) -> (f64, f64) {
    let [a, b, c, d] = TIME5_EDGES_S;
    match class {
        Time5::Lowest => (TAKEOVER_RANGE_S.0, a),
        Time5::Low => (a, b),
        Time5::Medium => (b, c),
        Time5::High => (c, d),
        Time5::Highest => (d, TAKEOVER_RANGE_S.1),
    }
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Latent state of one epoch around a request.
#[derive(Debug, Clone)]
struct Epoch {
    end: f64,
    t_alarm: f64,
    ndrt: Ndrt,
    stress: f64,
    time_latent: f64,
    intention_latent: f64,
    quality_latent: f64,
    context: Context,
}

fn ndrt_load(ndrt: Ndrt) -> f64 {
    match ndrt {
        Ndrt::C => 0.25,
        Ndrt::U => 0.5,
        Ndrt::R => 0.75,
        Ndrt::S => 1.0,
    }
}

/// Time latent as the sensors see it: mirrored under the arithmetic task.
fn expressed_time(e: &Epoch) -> f64 {
    match e.ndrt {
        Ndrt::S => 1.0 - e.time_latent,
        Ndrt::C | Ndrt::U | Ndrt::R => e.time_latent,
    }
}

/// Per-event nuisance context around a request: traffic sets speed and
/// throttle, gaze habits stretch fixation runs.
#[derive(Debug, Clone)]
struct Context {
    pupil_mm: f64,
    fixation_scale: f64,
    throttle: f64,
    velocity: f64,
}

impl Context {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        Self {
            pupil_mm: 0.03 * normal.sample(rng),
            fixation_scale: rng.random_range(0.95..1.05),
            throttle: 0.3 * normal.sample(rng),
            velocity: 2.0 * normal.sample(rng),
        }
    }
}

fn aoi_code(ndrt: Ndrt) -> f64 {
    match ndrt {
        Ndrt::C => 1.0,
        Ndrt::U => 2.0,
        Ndrt::R | Ndrt::S => 3.0,
    }
}

struct TrialPlan {
    epochs: Vec<Epoch>,
    events: Vec<TakeoverEvent>,
    plant: Vec<PlantRecord>,
    duration: f64,
}

fn plan_trial(spec: &SessionSpec, subject: &str, trial: &str, pss10: u8, rng: &mut ChaCha8Rng) -> Result<TrialPlan> {
    let s = spec.separability;
    let mut alarms: Vec<AlarmType> = [AlarmType::TrueAlarm, AlarmType::NoAlarm, AlarmType::FalseAlarm]
        .iter()
        .zip(spec.alarm_mix)
        .flat_map(|(a, n)| std::iter::repeat_n(*a, n))
        .collect();
    alarms.shuffle(rng);

    let jitter = (spec.tor_spacing_s - 24.0).min(3.0) / 2.0;
    let times: Vec<f64> = (0..spec.tors_per_trial)
        .map(|k| spec.lead_in_s + k as f64 * spec.tor_spacing_s + rng.random_range(-jitter..=jitter) + jitter)
        .collect();
    let duration = times.last().expect("at least one request") + INCIDENT_DELAY_S + 2.0;

    let mut epochs = Vec::new();
    let mut events = Vec::new();
    let mut plant = Vec::new();
    for (k, (&t_alarm, &alarm)) in times.iter().zip(&alarms).enumerate() {
        let event_id = format!("{subject}_{trial}_{:02}", k + 1);
        let ndrt = Ndrt::ALL[rng.random_range(0..4)];
        let takes_over = rng.random::<f64>() < spec.takeover_probability[alarm as usize];

        let mut t_takeover = None;
        let mut lateral = None;
        if takes_over {
            let class = Time5::ALL[weighted_pick(rng, &spec.time5_weights)];
            let (lo, hi) = time5_range(class);
            let base = rng.random_range(lo..hi);
            let t = (base + s * spec.ndrt_offset_s[ndrt.index()]).clamp(TAKEOVER_RANGE_S.0, TAKEOVER_RANGE_S.1);
            t_takeover = Some(quantize(t_alarm + t));
            let q = rng.random_range(0..3);
            let [lo, hi] = spec.quality_ranges_m[q];
            lateral = Some(quantize(rng.random_range(lo..=hi)));
        }
        let event = TakeoverEvent {
            event_id: event_id.clone(),
            subject_id: subject.to_string(),
            trial_id: trial.to_string(),
            alarm_type: alarm,
            t_alarm: quantize(t_alarm),
            t_takeover,
            t_incident: quantize(t_alarm + INCIDENT_DELAY_S),
            lateral_deviation_m: lateral,
            ndrt,
        };
        let labels = label_event(&event)?;
        let tk = labels.intention == Intention::Tk;
        let time_latent = latent(rng, s, labels.time5.map(|c| TIME5_CENTERS[c as usize]));
        let intention_latent = latent(rng, s, Some(if tk { 0.8 } else { 0.2 }));
        let quality_latent = latent(rng, s, labels.quality.map(|q| QUALITY_CENTERS[q as usize]));
        let stress = 0.5 * f64::from(pss10) / 4.0 + 0.5 * ndrt_load(ndrt);

        let end = times.get(k + 1).map_or(duration, |next| 0.5 * (t_alarm + next));
        epochs.push(Epoch {
            end,
            t_alarm: event.t_alarm,
            ndrt,
            stress,
            time_latent,
            intention_latent,
            quality_latent,
            context: Context::draw(rng),
        });
        plant.push(PlantRecord {
            event_id,
            intention: labels.intention,
            time5: labels.time5,
            quality: labels.quality,
            ndrt,
            stress,
            time_latent,
            intention_latent,
            quality_latent,
        });
        events.push(event);
    }
    Ok(TrialPlan {
        epochs,
        events,
        plant,
        duration,
    })
}

fn epoch_at(epochs: &[Epoch], t: f64, cursor: &mut usize) -> usize {
    while *cursor + 1 < epochs.len() && t >= epochs[*cursor].end {
        *cursor += 1;
    }
    *cursor
}

fn clamp_to_range(name: &str, v: f64) -> f64 {
    match channel_def(name).and_then(|d| d.range) {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    }
}

fn series(name: &str, rate: f64, values: Vec<f64>) -> TimeSeries {
    let values = values.into_iter().map(|v| quantize(clamp_to_range(name, v))).collect();
    TimeSeries::new(name, rate, 0.0, values).expect("positive rate")
}

fn ppg_channel(spec: &SessionSpec, plan: &TrialPlan, rng: &mut ChaCha8Rng) -> TimeSeries {
    let rate = spec.physio_rate_hz;
    let n = (plan.duration * rate).ceil() as usize;
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut beats = Vec::new();
    let mut t = rng.random_range(0.0..0.8);
    let mut cursor = 0;
    let mut ar = 0.0;
    let rho: f64 = 0.5;
    while t < plan.duration + 1.0 {
        beats.push(t);
        let e = &plan.epochs[epoch_at(&plan.epochs, t, &mut cursor)];
        let sd = spec.ndrt_sdnn_ms[e.ndrt.index()] / 1000.0;
        ar = rho * ar + (1.0 - rho * rho).sqrt() * sd * std_normal.sample(rng);
        t += (spec.ndrt_rr_ms[e.ndrt.index()] / 1000.0 + ar).clamp(0.45, 1.4);
    }
    let width = 0.06;
    let reach = (4.0 * width * rate).ceil() as isize;
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            1.0 + 0.15 * (2.0 * std::f64::consts::PI * 0.2 * t).sin() + 0.005 * std_normal.sample(rng)
        })
        .collect();
    for b in beats {
        let amp = 0.9 + 0.2 * rng.random::<f64>();
        let center = (b * rate).round() as isize;
        for i in (center - reach).max(0)..(center + reach + 1).min(n as isize) {
            let dt = i as f64 / rate - b;
            values[i as usize] += amp * (-dt * dt / (2.0 * width * width)).exp();
        }
    }
    series("ppg", rate, values)
}

fn gsr_channel(spec: &SessionSpec, plan: &TrialPlan, pss10: u8, rng: &mut ChaCha8Rng) -> TimeSeries {
    let rate = spec.physio_rate_hz;
    let n = (plan.duration * rate).ceil() as usize;
    let tonic = 2.0 + 0.75 * f64::from(pss10);
    let mut values = vec![tonic; n];
    let (slow, fast): (f64, f64) = (4.0, 0.75);
    let peak_at = (slow / fast).ln() * slow * fast / (slow - fast);
    let norm = (-peak_at / slow).exp() - (-peak_at / fast).exp();
    let reach = (25.0 * rate) as usize;
    let mut t = 0.0;
    let mut cursor = 0;
    loop {
        let e = &plan.epochs[epoch_at(&plan.epochs, t, &mut cursor)];
        let [r0, r1] = spec.gsr_rate_per_min;
        let per_s = (r0 + (r1 - r0) * e.stress) / 60.0;
        if per_s <= 0.0 {
            break;
        }
        t += Exp::new(per_s).expect("positive rate").sample(rng);
        if t >= plan.duration {
            break;
        }
        let amp = rng.random_range(0.05..1.5);
        let first = (t * rate).ceil() as usize;
        for (i, v) in values.iter_mut().enumerate().skip(first).take(reach) {
            let tau = i as f64 / rate - t;
            *v += amp * ((-tau / slow).exp() - (-tau / fast).exp()) / norm;
        }
    }
    series("gsr", rate, values)
}

fn eye_channels(spec: &SessionSpec, plan: &TrialPlan, rng: &mut ChaCha8Rng) -> Vec<TimeSeries> {
    let rate = spec.eye_rate_hz;
    let n = (plan.duration * rate).ceil() as usize;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut gaze_x = Vec::with_capacity(n);
    let mut gaze_y = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    let mut aoi = Vec::with_capacity(n);
    let mut cursor = 0;
    for i in 0..n {
        let t = i as f64 / rate;
        let e = &plan.epochs[epoch_at(&plan.epochs, t, &mut cursor)];
        gaze_x.push(500.0 + 900.0 * e.intention_latent + 25.0 * normal.sample(rng));
        gaze_y.push(250.0 + 550.0 * e.intention_latent + 15.0 * normal.sample(rng));
        let pupil = 2.5 + e.context.pupil_mm + 3.0 * expressed_time(e);
        left.push(pupil + 0.04 * normal.sample(rng));
        right.push(pupil + 0.04 * normal.sample(rng));

        // Fixation runs start after a latency measured from the feature window start.
        let first = e.t_alarm - 10.0 + 0.3 + 2.7 * e.intention_latent;
        let run = (0.25 + 0.9 * expressed_time(e)) * e.context.fixation_scale;
        let gap = 0.1;
        let code = if t < first {
            0.0
        } else {
            let phase = (t - first) % (run + gap);
            if phase < run {
                aoi_code(e.ndrt)
            } else {
                0.0
            }
        };
        aoi.push(code);
    }
    vec![
        series("gaze_x", rate, gaze_x),
        series("gaze_y", rate, gaze_y),
        series("pupil_left", rate, left),
        series("pupil_right", rate, right),
        series("aoi", rate, aoi),
    ]
}

fn vehicle_channels(spec: &SessionSpec, plan: &TrialPlan, rng: &mut ChaCha8Rng) -> Vec<TimeSeries> {
    let rate = spec.vehicle_rate_hz;
    let n = (plan.duration * rate).ceil() as usize;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let names = [
        "right_lane_distance",
        "left_lane_distance",
        "distance_to_hazard",
        "steering_angle",
        "throttle_angle",
        "brake_angle",
        "velocity",
    ];
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); names.len()];
    let mut cursor = 0;
    let tau = 2.0 * std::f64::consts::PI;
    for i in 0..n {
        let t = i as f64 / rate;
        let e = &plan.epochs[epoch_at(&plan.epochs, t, &mut cursor)];
        let drift = (tau * t / 37.0).sin();
        let q = e.quality_latent;
        let row = [
            1.0 + 1.2 * q + 0.01 * drift + 0.005 * normal.sample(rng),
            1.3 + 1.3 * (1.0 - q) + 0.01 * drift + 0.005 * normal.sample(rng),
            100.0 + 28.0 * q + 0.05 * normal.sample(rng),
            (2.0 + 25.0 * q) * (tau * 0.4 * t).sin() + 0.2 * normal.sample(rng),
            15.5 + e.context.throttle + 5.0 * expressed_time(e) + 0.02 * drift + 0.02 * normal.sample(rng),
            0.5 + 14.0 * e.intention_latent + 0.05 * normal.sample(rng),
            15.0 + e.context.velocity + 35.0 * expressed_time(e) + 0.1 * drift + 0.1 * normal.sample(rng),
        ];
        for (col, v) in cols.iter_mut().zip(row) {
            col.push(v);
        }
    }
    names.iter().zip(cols).map(|(name, values)| series(name, rate, values)).collect()
}

/// Per-subject state drawn once.
struct Subject {
    survey: Vec<SurveyRecord>,
    sessions: Vec<SyntheticSession>,
    plant: Vec<PlantRecord>,
}

fn generate_subject(spec: &SessionSpec, index: usize) -> Result<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let subject = subject_id(index);
    let gender = Gender::ALL[rng.random_range(0..2)];
    let pss10: u8 = rng.random_range(0..=4);
    let mut out = Subject {
        survey: Vec::new(),
        sessions: Vec::new(),
        plant: Vec::new(),
    };
    for t in 0..spec.trials_per_subject {
        let trial = trial_id(t);
        let nasa_tlx: u8 = rng.random_range(1..=21);
        let plan = plan_trial(spec, &subject, &trial, pss10, &mut rng)?;
        let mut channels = BTreeMap::new();
        let mut streams = vec![ppg_channel(spec, &plan, &mut rng), gsr_channel(spec, &plan, pss10, &mut rng)];
        streams.extend(eye_channels(spec, &plan, &mut rng));
        streams.extend(vehicle_channels(spec, &plan, &mut rng));
        for s in streams {
            channels.insert(s.channel_name.clone(), s);
        }
        debug_assert_eq!(channels.len(), CHANNELS.len());
        out.survey.push(SurveyRecord {
            subject_id: subject.clone(),
            trial_id: trial.clone(),
            gender: Some(gender),
            nasa_tlx: Some(nasa_tlx),
            pss10: Some(pss10),
        });
        out.plant.extend(plan.plant);
        out.sessions.push(SyntheticSession {
            subject_id: subject.clone(),
            trial_id: trial,
            channels,
            events: plan.events,
        });
    }
    Ok(out)
}

/// Builds the whole study. Subject `i` draws from ChaCha8 stream `i` of
/// `spec.seed`, so subjects can be generated in parallel.
pub fn generate(spec: &SessionSpec) -> Result<SyntheticStudy> {
    spec.validate()?;
    let subjects = (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let mut study = SyntheticStudy {
        spec: spec.clone(),
        sessions: Vec::new(),
        survey: Vec::new(),
        plant: Vec::new(),
    };
    for s in subjects {
        study.sessions.extend(s.sessions);
        study.survey.extend(s.survey);
        study.plant.extend(s.plant);
    }
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(separability: f64, seed: u64) -> SessionSpec {
        SessionSpec {
            n_subjects: 2,
            trials_per_subject: 1,
            separability,
            seed,
            ..SessionSpec::default()
        }
    }

    #[test]
    fn default_study_event_count() {
        assert_eq!(SessionSpec::default().n_events(), 765);
        let study = generate(&small(0.9, 1)).unwrap();
        assert_eq!(study.events().len(), 30);
        assert_eq!(study.plant.len(), 30);
    }

    #[test]
    fn alarm_mix_per_trial() {
        let study = generate(&small(0.5, 2)).unwrap();
        for session in &study.sessions {
            let count = |a| session.events.iter().filter(|e| e.alarm_type == a).count();
            assert_eq!(
                [count(AlarmType::TrueAlarm), count(AlarmType::NoAlarm), count(AlarmType::FalseAlarm)],
                [6, 3, 6]
            );
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small(0.5, 0);
        spec.alarm_mix = [5, 3, 6];
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        let spec = SessionSpec { separability: 1.5, ..small(0.5, 0) };
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        let spec = SessionSpec { eye_rate_hz: 0.0, ..small(0.5, 0) };
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn channels_stay_in_declared_ranges_and_cover_history() {
        let study = generate(&small(1.0, 3)).unwrap();
        for session in &study.sessions {
            assert_eq!(session.channels.len(), CHANNELS.len());
            for (name, ts) in &session.channels {
                if let Some((lo, hi)) = channel_def(name).unwrap().range {
                    assert!(ts.values.iter().all(|v| (lo..=hi).contains(v)), "{name}");
                }
                for e in &session.events {
                    assert!(e.t_alarm - 10.0 >= ts.t0);
                    assert!(e.t_incident <= ts.t_end());
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small(0.7, 5)).unwrap();
        assert_eq!(a, generate(&small(0.7, 5)).unwrap());
        let b = generate(&small(0.7, 6)).unwrap();
        let times = |s: &SyntheticStudy| s.events().iter().map(|e| e.t_alarm).collect::<Vec<_>>();
        assert_ne!(times(&a), times(&b));
    }

    #[test]
    fn full_separability_gives_disjoint_time_latents() {
        let study = generate(&SessionSpec { n_subjects: 4, ..small(1.0, 7) }).unwrap();
        for class in Time5::ALL {
            for p in study.plant.iter().filter(|p| p.time5 == Some(class)) {
                assert!((p.time_latent - TIME5_CENTERS[class as usize]).abs() <= LATENT_JITTER + 1e-12);
            }
        }
    }

    #[test]
    fn ndrt_offset_moves_mean_takeover_time() {
        let mean_for = |offset: f64| {
            let mut spec = SessionSpec { n_subjects: 6, ..small(1.0, 9) };
            spec.ndrt_offset_s = [offset; 4];
            let study = generate(&spec).unwrap();
            let times: Vec<f64> = study.events().iter().filter_map(|e| e.takeover_time()).collect();
            times.iter().sum::<f64>() / times.len() as f64
        };
        let means = [mean_for(-1.0), mean_for(0.0), mean_for(1.0)];
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn quantized_values_print_short() {
        let study = generate(&small(0.3, 4)).unwrap();
        let v = study.sessions[0].channels["velocity"].values[17];
        let text = v.to_string();
        assert!(text.split('.').nth(1).map_or(0, str::len) <= 6, "{text}");
        assert_eq!(text.parse::<f64>().unwrap(), v);
    }
}
