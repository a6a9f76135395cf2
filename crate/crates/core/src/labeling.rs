//! Ground-truth labels for takeover intention, time and quality.
//!
//! Quality naming follows the study's convention: `low` means the driver
//! stayed in the lane (P < 3.5 m), `high` means a safe one-lane swerve
//! (3.5 m ≤ P ≤ 7 m) and `medium` means too much deviation (P > 7 m).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME3_LOW_BELOW_S: f64 = 2.6;
pub const TIME3_HIGH_ABOVE_S: f64 = 6.1;
pub const TIME5_EDGES_S: [f64; 4] = [1.5, 2.6, 4.7, 6.1];
pub const QUALITY_LANE_M: f64 = 3.5;
pub const QUALITY_SAFE_MAX_M: f64 = 7.0;
/// Largest deviation the study labels; beyond it the label is extrapolated.
pub const QUALITY_LABELED_MAX_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmType {
    TrueAlarm,
    NoAlarm,
    FalseAlarm,
}

impl AlarmType {
    pub fn as_str(self) -> &'static str {
        match self {
            AlarmType::TrueAlarm => "true_alarm",
            AlarmType::NoAlarm => "no_alarm",
            AlarmType::FalseAlarm => "false_alarm",
        }
    }
}

impl FromStr for AlarmType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true_alarm" => Ok(AlarmType::TrueAlarm),
            "no_alarm" => Ok(AlarmType::NoAlarm),
            "false_alarm" => Ok(AlarmType::FalseAlarm),
            other => Err(Error::UnknownCategory {
                field: "alarm_type".into(),
                value: other.into(),
            }),
        }
    }
}

/// Non-driving related task: conversation, cellphone, reading, solving arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ndrt {
    C,
    U,
    R,
    S,
}

impl Ndrt {
    pub const ALL: [Ndrt; 4] = [Ndrt::C, Ndrt::U, Ndrt::R, Ndrt::S];

    pub fn as_str(self) -> &'static str {
        match self {
            Ndrt::C => "C",
            Ndrt::U => "U",
            Ndrt::R => "R",
            Ndrt::S => "S",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Ndrt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ndrt::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownCategory {
                field: "ndrt".into(),
                value: s.into(),
            })
    }
}

impl fmt::Display for Ndrt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One takeover request and the driver's response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TakeoverEvent {
    pub event_id: String,
    pub subject_id: String,
    pub trial_id: String,
    pub alarm_type: AlarmType,
    pub t_alarm: f64,
    pub t_takeover: Option<f64>,
    pub t_incident: f64,
    pub lateral_deviation_m: Option<f64>,
    pub ndrt: Ndrt,
}

impl TakeoverEvent {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_alarm < self.t_incident) {
            return Err(Error::InvalidData(format!(
                "event {}: t_alarm must precede t_incident",
                self.event_id
            )));
        }
        if let Some(t) = self.t_takeover {
            if t < self.t_alarm {
                return Err(Error::InvalidData(format!(
                    "event {}: takeover before the alarm",
                    self.event_id
                )));
            }
        }
        Ok(())
    }

    /// Seconds from request to resumed manual control.
    pub fn takeover_time(&self) -> Option<f64> {
        self.t_takeover.map(|t| t - self.t_alarm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intention {
    #[serde(rename = "NTK")]
    Ntk,
    #[serde(rename = "TK")]
    Tk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Time3 {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Time5 {
    Lowest,
    Low,
    Medium,
    High,
    Highest,
}

impl Time5 {
    pub const ALL: [Time5; 5] = [Time5::Lowest, Time5::Low, Time5::Medium, Time5::High, Time5::Highest];

    /// The three-class bin this class refines.
    pub fn coarsen(self) -> Time3 {
        match self {
            Time5::Lowest | Time5::Low => Time3::Low,
            Time5::Medium | Time5::High => Time3::Medium,
            Time5::Highest => Time3::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Low,
    Medium,
    High,
}

/// TK iff the driver took over inside `[t_alarm, t_incident)`.
pub fn label_intention(event: &TakeoverEvent) -> Intention {
    match event.t_takeover {
        Some(t) if event.t_alarm <= t && t < event.t_incident => Intention::Tk,
        _ => Intention::Ntk,
    }
}

pub fn label_time3(t: f64) -> Result<Time3> {
    if !(t >= 0.0) {
        return Err(Error::NegativeTime(t));
    }
    Ok(if t < TIME3_LOW_BELOW_S {
        Time3::Low
    } else if t <= TIME3_HIGH_ABOVE_S {
        Time3::Medium
    } else {
        Time3::High
    })
}

pub fn label_time5(t: f64) -> Result<Time5> {
    if !(t >= 0.0) {
        return Err(Error::NegativeTime(t));
    }
    let [a, b, c, d] = TIME5_EDGES_S;
    Ok(if t < a {
        Time5::Lowest
    } else if t < b {
        Time5::Low
    } else if t < c {
        Time5::Medium
    } else if t <= d {
        Time5::High
    } else {
        Time5::Highest
    })
}

/// Quality from lateral deviation; also reports whether P lies beyond the labeled 10 m range.
pub fn label_quality_audited(p: f64) -> Result<(Quality, bool)> {
    if !(p >= 0.0) {
        return Err(Error::NegativeDeviation(p));
    }
    let quality = if p < QUALITY_LANE_M {
        Quality::Low
    } else if p <= QUALITY_SAFE_MAX_M {
        Quality::High
    } else {
        Quality::Medium
    };
    Ok((quality, p > QUALITY_LABELED_MAX_M))
}

pub fn label_quality(p: f64) -> Result<Quality> {
    label_quality_audited(p).map(|(q, _)| q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub intention: Intention,
    pub time3: Option<Time3>,
    pub time5: Option<Time5>,
    pub quality: Option<Quality>,
    /// Set when the quality label was extrapolated past 10 m.
    pub quality_extrapolated: bool,
}

/// All labels for one event; time and quality exist only for TK events.
pub fn label_event(event: &TakeoverEvent) -> Result<LabelSet> {
    let intention = label_intention(event);
    if intention == Intention::Ntk {
        return Ok(LabelSet {
            intention,
            time3: None,
            time5: None,
            quality: None,
            quality_extrapolated: false,
        });
    }
    let t = event.takeover_time().expect("TK implies a takeover time");
    let (quality, quality_extrapolated) = match event.lateral_deviation_m {
        Some(p) => {
            let (q, flag) = label_quality_audited(p)?;
            (Some(q), flag)
        }
        None => (None, false),
    };
    Ok(LabelSet {
        intention,
        time3: Some(label_time3(t)?),
        time5: Some(label_time5(t)?),
        quality,
        quality_extrapolated,
    })
}

/// Prediction target; each gets its own output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Intention,
    Time3,
    Time5,
    Quality,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Intention, Task::Time3, Task::Time5, Task::Quality];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Intention => "intention",
            Task::Time3 => "time3",
            Task::Time5 => "time5",
            Task::Quality => "quality",
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Task::Intention => &["NTK", "TK"],
            Task::Time3 | Task::Quality => &["low", "medium", "high"],
            Task::Time5 => &["lowest", "low", "medium", "high", "highest"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Intention => 2,
            Task::Time3 | Task::Quality => 3,
            Task::Time5 => 5,
        }
    }

    /// Class index for this task, or `None` when the event carries no label for it.
    pub fn class_of(self, labels: &LabelSet) -> Option<usize> {
        match self {
            Task::Intention => Some(labels.intention as usize),
            Task::Time3 => labels.time3.map(|c| c as usize),
            Task::Time5 => labels.time5.map(|c| c as usize),
            Task::Quality => labels.quality.map(|c| c as usize),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task '{s}'")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(t_takeover: Option<f64>) -> TakeoverEvent {
        TakeoverEvent {
            event_id: "e".into(),
            subject_id: "s".into(),
            trial_id: "1".into(),
            alarm_type: AlarmType::TrueAlarm,
            t_alarm: 100.0,
            t_takeover,
            t_incident: 113.0,
            lateral_deviation_m: Some(5.0),
            ndrt: Ndrt::R,
        }
    }

    #[test]
    fn intention_cases() {
        assert_eq!(label_intention(&event(Some(103.0))), Intention::Tk);
        assert_eq!(label_intention(&event(None)), Intention::Ntk);
        assert_eq!(label_intention(&event(Some(114.0))), Intention::Ntk);
        assert_eq!(label_intention(&event(Some(113.0))), Intention::Ntk);
    }

    #[test]
    fn time3_boundaries() {
        assert_eq!(label_time3(2.5).unwrap(), Time3::Low);
        assert_eq!(label_time3(2.6).unwrap(), Time3::Medium);
        assert_eq!(label_time3(6.1).unwrap(), Time3::Medium);
        assert_eq!(label_time3(6.2).unwrap(), Time3::High);
        assert!(matches!(label_time3(-0.1), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn time5_boundaries() {
        assert_eq!(label_time5(0.0).unwrap(), Time5::Lowest);
        assert_eq!(label_time5(1.5).unwrap(), Time5::Low);
        assert_eq!(label_time5(2.6).unwrap(), Time5::Medium);
        assert_eq!(label_time5(4.7).unwrap(), Time5::High);
        assert_eq!(label_time5(6.1).unwrap(), Time5::High);
        assert_eq!(label_time5(6.10001).unwrap(), Time5::Highest);
        assert!(label_time5(f64::NAN).is_err());
    }

    #[test]
    fn quality_boundaries() {
        assert_eq!(label_quality(2.0).unwrap(), Quality::Low);
        assert_eq!(label_quality(3.5).unwrap(), Quality::High);
        assert_eq!(label_quality(5.0).unwrap(), Quality::High);
        assert_eq!(label_quality(7.0).unwrap(), Quality::High);
        assert_eq!(label_quality(8.0).unwrap(), Quality::Medium);
        assert_eq!(label_quality_audited(10.0).unwrap(), (Quality::Medium, false));
        assert_eq!(label_quality_audited(12.0).unwrap(), (Quality::Medium, true));
        assert!(matches!(label_quality(-1.0), Err(Error::NegativeDeviation(_))));
    }

    #[test]
    fn ntk_events_only_carry_intention() {
        let labels = label_event(&event(None)).unwrap();
        assert_eq!(labels.intention, Intention::Ntk);
        assert!(labels.time3.is_none() && labels.time5.is_none() && labels.quality.is_none());
        let labels = label_event(&event(Some(104.0))).unwrap();
        assert_eq!(labels.time3, Some(Time3::Medium));
        assert_eq!(labels.time5, Some(Time5::Medium));
        assert_eq!(labels.quality, Some(Quality::High));
        assert_eq!(Task::Time5.class_of(&labels), Some(2));
        assert_eq!(Task::Intention.class_of(&labels), Some(1));
    }

    #[test]
    fn parsing_round_trips() {
        for n in Ndrt::ALL {
            assert_eq!(n.as_str().parse::<Ndrt>().unwrap(), n);
        }
        assert!(matches!("X".parse::<Ndrt>(), Err(Error::UnknownCategory { .. })));
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
            assert_eq!(t.class_names().len(), t.num_classes());
        }
        assert_eq!("no_alarm".parse::<AlarmType>().unwrap(), AlarmType::NoAlarm);
    }
}
