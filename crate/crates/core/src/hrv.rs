//! PPG beat detection and time-domain heart-rate variability.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dsp::TimeSeries;
use crate::error::{Error, Result};

/// Fraction of the rolling 2 s max envelope a beat peak must reach.
pub const BEAT_ENVELOPE_FRACTION: f64 = 0.6;
pub const BEAT_ENVELOPE_WINDOW_S: f64 = 2.0;
pub const REFRACTORY_S: f64 = 0.3;
/// Inter-beat intervals outside this range are not normal-to-normal.
pub const RR_GATE_S: (f64, f64) = (0.3, 2.0);
pub const MIN_BEATS: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatTrain {
    /// Strictly increasing, seconds.
    pub beat_times: Vec<f64>,
}

impl BeatTrain {
    pub fn new(beat_times: Vec<f64>) -> Result<Self> {
        if beat_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidData("beat times must be strictly increasing".into()));
        }
        Ok(Self { beat_times })
    }

    pub fn len(&self) -> usize {
        self.beat_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beat_times.is_empty()
    }

    /// Successive intervals in milliseconds.
    pub fn rr_intervals_ms(&self) -> Vec<f64> {
        self.beat_times.windows(2).map(|w| (w[1] - w[0]) * 1000.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrvMetrics {
    pub sdnn_ms: f64,
    pub rmssd_ms: f64,
    pub pnn50_pct: f64,
}

impl HrvMetrics {
    /// SDNN (sample std), RMSSD and pNN50 from RR intervals in milliseconds.
    pub fn from_rr_ms(rr: &[f64]) -> Result<Self> {
        if rr.len() < 2 {
            return Err(Error::TooFewBeats {
                found: rr.len() + usize::from(!rr.is_empty()),
                needed: MIN_BEATS,
            });
        }
        let n = rr.len() as f64;
        let mean = rr.iter().sum::<f64>() / n;
        let sdnn_ms = (rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();

        let diffs: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
        let m = diffs.len() as f64;
        let rmssd_ms = (diffs.iter().map(|d| d * d).sum::<f64>() / m).sqrt();
        let over = diffs.iter().filter(|d| d.abs() > 50.0).count() as f64;
        Ok(Self {
            sdnn_ms,
            rmssd_ms,
            pnn50_pct: 100.0 * over / m,
        })
    }
}

pub fn hrv_metrics(beats: &BeatTrain) -> Result<HrvMetrics> {
    if beats.len() < MIN_BEATS {
        return Err(Error::TooFewBeats {
            found: beats.len(),
            needed: MIN_BEATS,
        });
    }
    HrvMetrics::from_rr_ms(&beats.rr_intervals_ms())
}

/// Centered sliding maximum, `half` samples each side.
fn sliding_max(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut deque: VecDeque<usize> = VecDeque::new();
    // Window for output i is [i - half, i + half]; push index j = i + half.
    for j in 0..n + half {
        if j < n {
            let v = values[j];
            if !v.is_nan() {
                while deque.back().is_some_and(|&b| values[b] <= v) {
                    deque.pop_back();
                }
                deque.push_back(j);
            }
        }
        if j >= half {
            let i = j - half;
            while deque.front().is_some_and(|&f| f + half < i) {
                deque.pop_front();
            }
            if let Some(&f) = deque.front() {
                out[i] = values[f];
            }
        }
    }
    out
}

/// Adaptive-threshold peak picking on a normalized, band-filtered PPG trace.
///
/// Returns the longest run of beats whose successive intervals all fall in
/// [`RR_GATE_S`].
pub fn detect_beats(ppg: &TimeSeries) -> Result<BeatTrain> {
    let x = &ppg.values;
    let rate = ppg.sample_rate_hz;
    let n = x.len();
    let too_few = |found| Error::TooFewBeats {
        found,
        needed: MIN_BEATS,
    };
    if n < 3 {
        return Err(too_few(0));
    }
    let envelope = sliding_max(x, (BEAT_ENVELOPE_WINDOW_S * rate / 2.0).round() as usize);
    let refractory = (REFRACTORY_S * rate).round() as usize;

    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        let v = x[i];
        if !(v > x[i - 1] && v >= x[i + 1]) || envelope[i] <= 0.0 || v < BEAT_ENVELOPE_FRACTION * envelope[i] {
            continue;
        }
        match peaks.last_mut() {
            Some(last) if i - *last < refractory => {
                if v > x[*last] {
                    *last = i;
                }
            }
            _ => peaks.push(i),
        }
    }

    let times: Vec<f64> = peaks.iter().map(|&i| ppg.time_at(i)).collect();
    let in_gate = |a: f64, b: f64| {
        let d = b - a;
        d >= RR_GATE_S.0 && d <= RR_GATE_S.1
    };
    let (mut best, mut start) = ((0, 0), 0);
    for end in 1..=times.len() {
        if end == times.len() || !in_gate(times[end - 1], times[end]) {
            if end - start > best.1 - best.0 {
                best = (start, end);
            }
            start = end;
        }
    }
    let run = times[best.0..best.1].to_vec();
    if run.len() < MIN_BEATS {
        return Err(too_few(run.len()));
    }
    BeatTrain::new(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gaussian pulses at the given beat times.
    fn pulse_train(rate: f64, seconds: f64, beats: &[f64]) -> TimeSeries {
        let n = (rate * seconds) as usize;
        let values = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                beats
                    .iter()
                    .map(|b| (-(t - b).powi(2) / (2.0 * 0.05f64.powi(2))).exp())
                    .sum()
            })
            .collect();
        TimeSeries::new("ppg", rate, 0.0, values).unwrap()
    }

    #[test]
    fn steady_75_bpm_train() {
        let beats: Vec<f64> = (0..13).map(|k| 0.2 + 0.8 * k as f64).collect();
        let train = detect_beats(&pulse_train(256.0, 10.0, &beats)).unwrap();
        assert!((12..=13).contains(&train.len()), "{}", train.len());
        for rr in train.rr_intervals_ms() {
            assert!((rr - 800.0).abs() <= 1000.0 / 256.0, "rr {rr}");
        }
    }

    #[test]
    fn jittered_pulse_shows_in_interval_pair() {
        let mut beats: Vec<f64> = (0..12).map(|k| 0.4 + 0.8 * k as f64).collect();
        beats[5] += 0.05;
        let train = detect_beats(&pulse_train(256.0, 10.0, &beats)).unwrap();
        let rr = train.rr_intervals_ms();
        let tol = 1000.0 / 256.0;
        assert!((rr[4] - 850.0).abs() <= tol, "{rr:?}");
        assert!((rr[5] - 750.0).abs() <= tol, "{rr:?}");
    }

    #[test]
    fn flat_signal_has_too_few_beats() {
        let flat = TimeSeries::new("ppg", 256.0, 0.0, vec![0.5; 2560]).unwrap();
        assert!(matches!(detect_beats(&flat), Err(Error::TooFewBeats { .. })));
    }

    #[test]
    fn longest_gated_run_survives_a_dropout() {
        // 3 s pause splits the train; the longer side wins.
        let mut beats: Vec<f64> = (0..4).map(|k| 0.3 + 0.8 * k as f64).collect();
        beats.extend((0..6).map(|k| 5.5 + 0.75 * k as f64));
        let train = detect_beats(&pulse_train(256.0, 10.0, &beats)).unwrap();
        assert_eq!(train.len(), 6);
        assert!((train.beat_times[0] - 5.5).abs() < 0.01);
    }

    #[test]
    fn constant_intervals() {
        let m = HrvMetrics::from_rr_ms(&[800.0, 800.0, 800.0]).unwrap();
        assert_eq!((m.sdnn_ms, m.rmssd_ms, m.pnn50_pct), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_interval_hand_values() {
        let m = HrvMetrics::from_rr_ms(&[800.0, 860.0]).unwrap();
        assert!((m.sdnn_ms - 1800f64.sqrt()).abs() < 1e-12);
        assert!((m.sdnn_ms - 42.4264).abs() < 1e-4);
        assert!((m.rmssd_ms - 60.0).abs() < 1e-12);
        assert_eq!(m.pnn50_pct, 100.0);
    }

    #[test]
    fn metrics_need_two_intervals() {
        assert!(HrvMetrics::from_rr_ms(&[800.0]).is_err());
        let beats = BeatTrain::new(vec![0.0, 0.8]).unwrap();
        assert!(matches!(hrv_metrics(&beats), Err(Error::TooFewBeats { found: 2, .. })));
    }

    #[test]
    fn beat_train_must_increase() {
        assert!(BeatTrain::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn sliding_max_brute_force() {
        let v: Vec<f64> = (0..100).map(|i| ((i * 13) % 17) as f64).collect();
        let fast = sliding_max(&v, 4);
        for i in 0..v.len() {
            let lo = i.saturating_sub(4);
            let hi = (i + 4).min(v.len() - 1);
            let m = v[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(fast[i], m);
        }
    }
}
