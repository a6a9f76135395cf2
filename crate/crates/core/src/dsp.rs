//! Signal preprocessing for uniformly sampled sensor channels.
//!
//! Missing samples are stored as `NaN`. Normalizers skip them, the
//! Butterworth filters refuse them (call [`interpolate_gaps`] first).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Onset threshold above the rolling baseline, microsiemens.
pub const GSR_ONSET_THRESHOLD_US: f64 = 0.01;
/// Width of the trailing rolling-median baseline window.
pub const GSR_BASELINE_WINDOW_S: f64 = 4.0;
/// Minimum separation between two reported GSR peaks.
pub const GSR_MIN_SEPARATION_S: f64 = 1.0;

/// One uniformly sampled channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub channel_name: String,
    pub sample_rate_hz: f64,
    /// Time of the first sample, seconds.
    pub t0: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(channel_name: impl Into<String>, sample_rate_hz: f64, t0: f64, values: Vec<f64>) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidData(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        Ok(Self {
            channel_name: channel_name.into(),
            sample_rate_hz,
            t0,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + index as f64 / self.sample_rate_hz
    }

    /// Time just past the last sample.
    pub fn t_end(&self) -> f64 {
        self.time_at(self.values.len())
    }

    fn with_values(&self, values: Vec<f64>) -> TimeSeries {
        TimeSeries {
            channel_name: self.channel_name.clone(),
            sample_rate_hz: self.sample_rate_hz,
            t0: self.t0,
            values,
        }
    }

    /// Longest run of missing samples, in seconds.
    pub fn longest_gap_s(&self) -> f64 {
        let mut longest = 0usize;
        let mut run = 0usize;
        for v in &self.values {
            if v.is_nan() {
                run += 1;
                longest = longest.max(run);
            } else {
                run = 0;
            }
        }
        longest as f64 / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    HighPass,
    LowPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoff_hz: f64,
}

impl FilterSpec {
    pub fn high_pass(order: usize, cutoff_hz: f64) -> Self {
        Self {
            kind: FilterKind::HighPass,
            order,
            cutoff_hz,
        }
    }

    pub fn low_pass(order: usize, cutoff_hz: f64) -> Self {
        Self {
            kind: FilterKind::LowPass,
            order,
            cutoff_hz,
        }
    }

    /// Leading span of output that is still dominated by the start-up transient.
    pub fn warmup_s(&self) -> f64 {
        (3.0 / self.cutoff_hz).max(1.0)
    }

    pub fn warmup_samples(&self, sample_rate_hz: f64) -> usize {
        (self.warmup_s() * sample_rate_hz).ceil() as usize
    }

    fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidFilter("order must be at least 1".into()));
        }
        if !(self.cutoff_hz.is_finite() && self.cutoff_hz > 0.0) {
            return Err(Error::InvalidFilter(format!("cutoff must be positive, got {}", self.cutoff_hz)));
        }
        let nyquist_hz = sample_rate_hz / 2.0;
        if self.cutoff_hz >= nyquist_hz {
            return Err(Error::InvalidCutoff {
                cutoff_hz: self.cutoff_hz,
                nyquist_hz,
            });
        }
        Ok(())
    }
}

/// Second-order (or first-order when `b2 == a2 == 0`) section, transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Section {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Section {
    fn run(&self, values: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in values.iter_mut() {
            let x = *v;
            let y = self.b0 * x + z1;
            z1 = self.b1 * x - self.a1 * y + z2;
            z2 = self.b2 * x - self.a2 * y;
            *v = y;
        }
    }
}

/// Bilinear-transform Butterworth cascade with a prewarped cutoff.
fn design_sections(spec: &FilterSpec, sample_rate_hz: f64) -> Vec<Section> {
    let k = (PI * spec.cutoff_hz / sample_rate_hz).tan();
    let k2 = k * k;
    let n = spec.order;
    let mut sections = Vec::with_capacity(n.div_ceil(2));
    for i in 0..n / 2 {
        // Conjugate pole pair i of the analog prototype.
        let q = 1.0 / (2.0 * (PI * (2 * i + 1) as f64 / (2 * n) as f64).sin());
        let norm = 1.0 / (1.0 + k / q + k2);
        let a1 = 2.0 * (k2 - 1.0) * norm;
        let a2 = (1.0 - k / q + k2) * norm;
        let section = match spec.kind {
            FilterKind::LowPass => Section {
                b0: k2 * norm,
                b1: 2.0 * k2 * norm,
                b2: k2 * norm,
                a1,
                a2,
            },
            FilterKind::HighPass => Section {
                b0: norm,
                b1: -2.0 * norm,
                b2: norm,
                a1,
                a2,
            },
        };
        sections.push(section);
    }
    if n % 2 == 1 {
        let norm = 1.0 / (1.0 + k);
        let a1 = (k - 1.0) * norm;
        let section = match spec.kind {
            FilterKind::LowPass => Section {
                b0: k * norm,
                b1: k * norm,
                b2: 0.0,
                a1,
                a2: 0.0,
            },
            FilterKind::HighPass => Section {
                b0: norm,
                b1: -norm,
                b2: 0.0,
                a1,
                a2: 0.0,
            },
        };
        sections.push(section);
    }
    sections
}

/// Single causal forward pass of a Butterworth filter, starting from rest.
///
/// The first [`FilterSpec::warmup_samples`] outputs carry the start-up transient.
pub fn butterworth_filter(series: &TimeSeries, spec: &FilterSpec) -> Result<TimeSeries> {
    spec.validate(series.sample_rate_hz)?;
    if series.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "channel '{}' has missing or non-finite samples; interpolate before filtering",
            series.channel_name
        )));
    }
    let mut values = series.values.clone();
    for section in design_sections(spec, series.sample_rate_hz) {
        section.run(&mut values);
    }
    Ok(series.with_values(values))
}

/// Maps observed samples onto `[0, 1]`; missing samples stay missing.
pub fn minmax_normalize(series: &TimeSeries) -> Result<TimeSeries> {
    let observed = series.values.iter().copied().filter(|v| !v.is_nan());
    let (mut lo, mut hi, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for v in observed {
        lo = lo.min(v);
        hi = hi.max(v);
        count += 1;
    }
    if count < 2 {
        return Err(Error::DegenerateSeries(format!(
            "channel '{}' needs at least 2 observed samples",
            series.channel_name
        )));
    }
    if hi <= lo {
        return Err(Error::DegenerateSeries(format!(
            "channel '{}' is constant",
            series.channel_name
        )));
    }
    let range = hi - lo;
    Ok(series.with_values(series.values.iter().map(|v| (v - lo) / range).collect()))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-score with the population standard deviation.
pub fn zscore_normalize(column: &[f64]) -> Result<Vec<f64>> {
    if column.len() < 2 {
        return Err(Error::DegenerateSeries("z-score needs at least 2 values".into()));
    }
    let (mean, std) = mean_std(column);
    if std == 0.0 || !std.is_finite() {
        return Err(Error::DegenerateSeries("zero standard deviation".into()));
    }
    Ok(column.iter().map(|v| (v - mean) / std).collect())
}

/// Linearly interpolates missing samples; leading and trailing gaps hold the nearest observation.
pub fn interpolate_gaps(series: &TimeSeries) -> Result<TimeSeries> {
    let observed: Vec<usize> = (0..series.len()).filter(|&i| !series.values[i].is_nan()).collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(Error::DegenerateSeries(format!(
                "channel '{}' has no observed samples",
                series.channel_name
            )))
        }
    };
    let mut values = series.values.clone();
    for v in values.iter_mut().take(first) {
        *v = series.values[first];
    }
    for v in values.iter_mut().skip(last + 1) {
        *v = series.values[last];
    }
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a > 1 {
            let (va, vb) = (series.values[a], series.values[b]);
            for i in a + 1..b {
                let frac = (i - a) as f64 / (b - a) as f64;
                values[i] = va + frac * (vb - va);
            }
        }
    }
    Ok(series.with_values(values))
}

/// Detected phasic GSR responses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    pub count: usize,
    /// Height above the rolling baseline at onset, microsiemens.
    pub amplitudes: Vec<f64>,
    pub indices: Vec<usize>,
}

impl PeakSet {
    pub fn mean_amplitude(&self) -> Option<f64> {
        (self.count > 0).then(|| self.amplitudes.iter().sum::<f64>() / self.count as f64)
    }
}

/// Trailing rolling median over `window` samples (truncated at the start).
pub fn rolling_median(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut sorted: Vec<f64> = Vec::with_capacity(window);
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if !v.is_nan() {
            let pos = sorted.partition_point(|s| s.total_cmp(&v).is_lt());
            sorted.insert(pos, v);
        }
        if i >= window {
            let old = values[i - window];
            if !old.is_nan() {
                let pos = sorted.partition_point(|s| s.total_cmp(&old).is_lt());
                sorted.remove(pos);
            }
        }
        out.push(match sorted.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        });
    }
    out
}

/// Phasic peak detection on a skin-conductance channel (microsiemens).
///
/// A peak is a local maximum whose height above the trailing 4 s median
/// baseline, taken at the start of its rise, exceeds 0.01 µS. Peaks closer
/// than 1 s keep the larger amplitude.
pub fn detect_gsr_peaks(series: &TimeSeries) -> PeakSet {
    let x = &series.values;
    let n = x.len();
    if n < 3 {
        return PeakSet::default();
    }
    let rate = series.sample_rate_hz;
    let baseline = rolling_median(x, (GSR_BASELINE_WINDOW_S * rate).round() as usize);

    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for i in 1..n - 1 {
        if !(x[i] > x[i - 1] && x[i] >= x[i + 1]) {
            continue;
        }
        let mut onset = i;
        while onset > 0 && x[onset - 1] < x[onset] {
            onset -= 1;
        }
        let amplitude = x[i] - baseline[onset];
        if amplitude > GSR_ONSET_THRESHOLD_US {
            candidates.push((i, amplitude));
        }
    }

    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let min_gap = (GSR_MIN_SEPARATION_S * rate).round() as usize;
    let mut accepted: Vec<(usize, f64)> = Vec::new();
    for (idx, amp) in candidates {
        if accepted.iter().all(|&(other, _)| idx.abs_diff(other) >= min_gap) {
            accepted.push((idx, amp));
        }
    }
    accepted.sort_by_key(|&(idx, _)| idx);

    PeakSet {
        count: accepted.len(),
        amplitudes: accepted.iter().map(|&(_, a)| a).collect(),
        indices: accepted.iter().map(|&(i, _)| i).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rate: f64, values: Vec<f64>) -> TimeSeries {
        TimeSeries::new("test", rate, 0.0, values).unwrap()
    }

    fn sine(rate: f64, freq: f64, seconds: f64) -> TimeSeries {
        let n = (rate * seconds) as usize;
        series(rate, (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect())
    }

    #[test]
    fn minmax_maps_endpoints() {
        let out = minmax_normalize(&series(1.0, vec![2.0, 4.0, 6.0])).unwrap();
        assert_eq!(out.values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn minmax_rejects_constant() {
        assert!(matches!(
            minmax_normalize(&series(1.0, vec![5.0, 5.0, 5.0])),
            Err(Error::DegenerateSeries(_))
        ));
    }

    #[test]
    fn minmax_keeps_missing_and_argmax() {
        let s = series(256.0, (0..512).map(|i| ((i % 200) as f64).sqrt()).collect());
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        };
        let out = minmax_normalize(&s).unwrap();
        assert_eq!(argmax(&s.values), argmax(&out.values));
        assert!(out.values.iter().all(|v| (0.0..=1.0).contains(v)));

        let gappy = series(1.0, vec![1.0, f64::NAN, 3.0]);
        let out = minmax_normalize(&gappy).unwrap();
        assert!(out.values[1].is_nan());
    }

    #[test]
    fn zscore_hand_values() {
        let z = zscore_normalize(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(zscore_normalize(&[7.0, 7.0]), Err(Error::DegenerateSeries(_))));
    }

    #[test]
    fn high_pass_rejects_dc() {
        let s = series(256.0, vec![1.0; 256 * 12]);
        let out = butterworth_filter(&s, &FilterSpec::high_pass(2, 0.5)).unwrap();
        let tail = &out.values[256 * 10..];
        assert!(tail.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn low_pass_passes_dc() {
        let s = series(256.0, vec![1.0; 256 * 5]);
        let spec = FilterSpec::low_pass(1, 6.0);
        let out = butterworth_filter(&s, &spec).unwrap();
        let warm = spec.warmup_samples(256.0);
        assert!(out.values[warm..].iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_order_low_pass_attenuation_at_10hz() {
        let s = sine(256.0, 10.0, 20.0);
        let out = butterworth_filter(&s, &FilterSpec::low_pass(1, 6.0)).unwrap();
        // Trailing 10 cycles.
        let tail = &out.values[out.len() - 256..];
        let amp = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let analytic = 1.0 / (1.0 + (10.0f64 / 6.0).powi(2)).sqrt();
        assert!((amp - analytic).abs() / analytic < 0.02, "amp {amp} vs {analytic}");
    }

    #[test]
    fn higher_orders_are_stable_and_match_dc_gain() {
        for order in 1..=6 {
            let s = series(256.0, vec![1.0; 256 * 20]);
            let lp = butterworth_filter(&s, &FilterSpec::low_pass(order, 6.0)).unwrap();
            assert!((lp.values.last().unwrap() - 1.0).abs() < 1e-6, "order {order}");
            let hp = butterworth_filter(&s, &FilterSpec::high_pass(order, 2.0)).unwrap();
            assert!(hp.values.last().unwrap().abs() < 1e-6, "order {order}");
        }
    }

    #[test]
    fn second_order_high_pass_is_minus_3db_at_cutoff() {
        let s = sine(256.0, 0.5, 60.0);
        let out = butterworth_filter(&s, &FilterSpec::high_pass(2, 0.5)).unwrap();
        let tail = &out.values[out.len() - 512 * 2..];
        let amp = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - std::f64::consts::FRAC_1_SQRT_2).abs() < 5e-3, "amp {amp}");
    }

    #[test]
    fn cutoff_at_nyquist_is_rejected() {
        let s = series(20.0, vec![0.0; 10]);
        assert!(matches!(
            butterworth_filter(&s, &FilterSpec::low_pass(1, 10.0)),
            Err(Error::InvalidCutoff { .. })
        ));
        assert!(matches!(
            butterworth_filter(&s, &FilterSpec::low_pass(0, 1.0)),
            Err(Error::InvalidFilter(_))
        ));
    }

    #[test]
    fn filter_refuses_missing_samples() {
        let s = series(20.0, vec![0.0, f64::NAN, 1.0]);
        assert!(butterworth_filter(&s, &FilterSpec::low_pass(1, 1.0)).is_err());
    }

    #[test]
    fn interpolation_fills_interior_and_edges() {
        let s = series(1.0, vec![f64::NAN, 1.0, f64::NAN, f64::NAN, 4.0, f64::NAN]);
        assert_eq!(s.longest_gap_s(), 2.0);
        let out = interpolate_gaps(&s).unwrap();
        assert_eq!(out.values, vec![1.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
        assert!(interpolate_gaps(&series(1.0, vec![f64::NAN; 3])).is_err());
    }

    #[test]
    fn rolling_median_matches_brute_force() {
        let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 23) as f64 * 0.5).collect();
        let fast = rolling_median(&values, 16);
        for i in 0..values.len() {
            let mut w: Vec<f64> = values[i.saturating_sub(15)..=i].to_vec();
            w.sort_by(f64::total_cmp);
            let m = if w.len() % 2 == 1 {
                w[w.len() / 2]
            } else {
                0.5 * (w[w.len() / 2 - 1] + w[w.len() / 2])
            };
            assert_eq!(fast[i], m);
        }
    }

    fn bump_series(center_s: f64, height: f64) -> TimeSeries {
        let rate = 256.0;
        let values = (0..(rate * 10.0) as usize)
            .map(|i| {
                let t = i as f64 / rate;
                2.0 + height * (-(t - center_s).powi(2) / (2.0 * 0.3f64.powi(2))).exp()
            })
            .collect();
        series(rate, values)
    }

    #[test]
    fn flat_gsr_has_no_peaks() {
        let peaks = detect_gsr_peaks(&series(256.0, vec![3.0; 2560]));
        assert_eq!(peaks.count, 0);
        assert!(peaks.amplitudes.is_empty());
        assert_eq!(peaks.mean_amplitude(), None);
    }

    #[test]
    fn single_bump_is_recovered() {
        let peaks = detect_gsr_peaks(&bump_series(6.0, 0.5));
        assert_eq!(peaks.count, 1);
        assert!((peaks.amplitudes[0] - 0.5).abs() / 0.5 < 0.05);
        assert_eq!(peaks.indices[0], (6.0 * 256.0) as usize);
    }

    #[test]
    fn bump_detection_is_shift_equivariant() {
        let a = detect_gsr_peaks(&bump_series(5.0, 0.4));
        let b = detect_gsr_peaks(&bump_series(5.0 + 64.0 / 256.0, 0.4));
        assert_eq!(a.count, 1);
        assert_eq!(b.indices[0], a.indices[0] + 64);
    }

    #[test]
    fn close_bumps_are_merged_by_separation_rule() {
        let rate = 256.0;
        let values = (0..2560)
            .map(|i| {
                let t = i as f64 / rate;
                let g = |c: f64, h: f64| h * (-(t - c).powi(2) / (2.0 * 0.1f64.powi(2))).exp();
                1.0 + g(5.0, 0.3) + g(5.6, 0.2) + g(8.0, 0.2)
            })
            .collect();
        let peaks = detect_gsr_peaks(&series(rate, values));
        assert_eq!(peaks.count, 2);
        assert_eq!(peaks.indices[0], 5 * 256);
    }
}
