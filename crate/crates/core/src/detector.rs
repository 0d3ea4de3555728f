//! Matched filtering and first-significant-peak pseudorange extraction.
//!
//! Alignment convention: the filter output is the cross-correlation
//!
//! ```text
//! y[n] = sum_k h[k] * x[n + k]
//! ```
//!
//! so a replica whose first sample sits at recording index `n0` produces
//! its peak at `y[n0]`. This equals the convolution of the recording with
//! the time-reversed replica, shifted left by `replica.len() - 1`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{SampledSignal, SequenceLayout};

/// Sound speed in fresh water, m/s.
pub const DEFAULT_SOUND_SPEED: f64 = 1_480.0;

/// Products of lengths at or below this are correlated directly.
const DIRECT_LIMIT: usize = 1 << 16;

/// Matched-filter output `y[n]`, one value per recording sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl CorrelationSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn argmax(&self) -> Option<usize> {
        self.values
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
    }

    /// Divides by the largest magnitude so that `max |y| == 1`.
    pub fn normalized(&self) -> Result<Self> {
        let peak = self.max_abs();
        if peak == 0.0 {
            return Err(Error::AllZeroRecording);
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / peak).collect(),
            normalized: true,
        })
    }

    /// Background level for the detection gate: the median magnitude, but
    /// never below 1e-9 of the peak so that FFT round-off in silent
    /// stretches cannot pass as a detection.
    pub fn noise_floor(&self) -> f64 {
        self.median_abs().max(1e-9 * self.max_abs())
    }

    pub fn median_abs(&self) -> f64 {
        let mut mags: Vec<f64> = self.values.iter().map(|v| v.abs()).collect();
        if mags.is_empty() {
            return 0.0;
        }
        let mid = mags.len() / 2;
        let (_, m, _) = mags.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    }
}

/// Which function of the filter output peaks are picked on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Magnitude of the analytic (Hilbert) filter output. Immune to
    /// carrier-cycle slips.
    Envelope,
    /// The real filter output as is.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakPolicy {
    /// Fraction of the per-window maximum a peak must reach, in (0, 1).
    pub threshold: f64,
    /// A window's maximum must exceed this multiple of the series' median
    /// magnitude for anything in it to count as a detection.
    pub min_peak_to_floor: f64,
    pub statistic: Statistic,
    /// Half-width of each chirp's search window in samples. Defaults to half
    /// the layout stagger.
    pub guard: Option<usize>,
    /// Parabolic sub-sample peak interpolation.
    pub refine: bool,
}

impl Default for PeakPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_peak_to_floor: 6.0,
            statistic: Statistic::Envelope,
            guard: None,
            refine: false,
        }
    }
}

impl PeakPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(
                "detector.threshold",
                format!("must lie in (0, 1), got {}", self.threshold),
            ));
        }
        if !(self.min_peak_to_floor >= 0.0 && self.min_peak_to_floor.is_finite()) {
            return Err(Error::config(
                "detector.min_peak_to_floor",
                format!("must be finite and non-negative, got {}", self.min_peak_to_floor),
            ));
        }
        Ok(())
    }

    fn half_width(&self, layout: &SequenceLayout) -> Result<usize> {
        let half = layout.stagger_samples / 2;
        match self.guard {
            None => Ok(half),
            Some(g) if g <= half => Ok(g),
            Some(g) => Err(Error::config(
                "detector.guard",
                format!("{g} samples makes windows of a {}-sample stagger overlap", layout.stagger_samples),
            )),
        }
    }
}

/// Half-open sample interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub start: usize,
    pub end: usize,
}

impl SearchWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn around(center: usize, half: usize, len: usize) -> Self {
        Self {
            start: center.saturating_sub(half).min(len),
            end: (center + half).min(len),
        }
    }
}

/// One epoch's pseudorange observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudorangeSet {
    /// Meters, one per speaker: `c / sample_rate * peak_samples[i]`.
    pub ranges: Vec<f64>,
    /// Stagger-adjusted arrival sample per speaker, counted from the origin.
    pub peak_samples: Vec<f64>,
    /// Matched-filter peak index in the recording.
    pub raw_peaks: Vec<usize>,
    pub epoch: u64,
    pub c: f64,
    pub sample_rate: f64,
}

impl PseudorangeSet {
    /// Converts adjusted sample numbers to pseudoranges.
    pub fn from_samples(peak_samples: Vec<f64>, c: f64, sample_rate: f64) -> Self {
        let ranges = peak_samples.iter().map(|s| samples_to_range(*s, c, sample_rate)).collect();
        Self {
            ranges,
            raw_peaks: peak_samples.iter().map(|s| s.max(0.0).round() as usize).collect(),
            peak_samples,
            epoch: 0,
            c,
            sample_rate,
        }
    }

    /// Re-references the sample numbers to `origin` (the recording sample
    /// matching the nominal transmit time) and recomputes the ranges.
    pub fn with_origin(mut self, origin: f64) -> Self {
        for (s, r) in self.peak_samples.iter_mut().zip(self.ranges.iter_mut()) {
            *s -= origin;
            *r = samples_to_range(*s, self.c, self.sample_rate);
        }
        self
    }

    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// `P = c / F_s * s`.
pub fn samples_to_range(samples: f64, c: f64, sample_rate: f64) -> f64 {
    c / sample_rate * samples
}

fn check_inputs(recording: &SampledSignal, replica: &SampledSignal) -> Result<()> {
    if recording.sample_rate() != replica.sample_rate() {
        return Err(Error::SampleRateMismatch(recording.sample_rate(), replica.sample_rate()));
    }
    if replica.len() > recording.len() {
        return Err(Error::ReplicaTooLong {
            replica: replica.len(),
            recording: recording.len(),
        });
    }
    if recording.samples().iter().all(|x| *x == 0.0) {
        return Err(Error::AllZeroRecording);
    }
    Ok(())
}

/// Cross-correlates the recording with the replica. The output has the
/// recording's length; the recording is zero-extended past its end.
pub fn matched_filter(recording: &SampledSignal, replica: &SampledSignal) -> Result<CorrelationSeries> {
    check_inputs(recording, replica)?;
    let x = recording.samples();
    let h = replica.samples();
    let values = if x.len() * h.len() <= DIRECT_LIMIT {
        correlate_direct(x, h)
    } else {
        correlate_fft(x, h)
    };
    Ok(CorrelationSeries {
        values,
        normalized: false,
    })
}

/// Magnitude of the analytic matched-filter output: the real part equals
/// [`matched_filter`], the imaginary part is its Hilbert transform.
pub fn matched_filter_envelope(recording: &SampledSignal, replica: &SampledSignal) -> Result<CorrelationSeries> {
    check_inputs(recording, replica)?;
    let analytic = analytic_correlation(recording.samples(), replica.samples());
    Ok(CorrelationSeries {
        values: analytic.iter().map(|z| z.norm()).collect(),
        normalized: false,
    })
}

/// Computes the detection statistic chosen by `policy`.
pub fn detection_series(
    recording: &SampledSignal,
    replica: &SampledSignal,
    statistic: Statistic,
) -> Result<CorrelationSeries> {
    match statistic {
        Statistic::Envelope => matched_filter_envelope(recording, replica),
        Statistic::Raw => matched_filter(recording, replica),
    }
}

pub fn correlate_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| h.iter().zip(&x[n..]).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn correlate_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    let spec = correlation_spectrum(x, h);
    finish(spec, x.len(), |_, z| z)
}

fn analytic_correlation(x: &[f64], h: &[f64]) -> Vec<Complex<f64>> {
    let spec = correlation_spectrum(x, h);
    let size = spec.buf.len();
    let half = size / 2;
    let mut buf = spec.buf;
    // Keep DC and Nyquist, double positive frequencies, drop negative ones.
    for (k, z) in buf.iter_mut().enumerate() {
        if k == 0 || k == half {
            continue;
        }
        if k < half {
            *z *= 2.0;
        } else {
            *z = Complex::new(0.0, 0.0);
        }
    }
    spec.inverse.process(&mut buf);
    let scale = 1.0 / size as f64;
    buf.truncate(x.len());
    buf.iter().map(|z| z * scale).collect()
}

struct Spectrum {
    buf: Vec<Complex<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn correlation_spectrum(x: &[f64], h: &[f64]) -> Spectrum {
    let size = (x.len() + h.len()).next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);

    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut xf = pad(x);
    let mut hf = pad(h);
    forward.process(&mut xf);
    forward.process(&mut hf);
    for (a, b) in xf.iter_mut().zip(&hf) {
        *a *= b.conj();
    }
    Spectrum { buf: xf, inverse }
}

fn finish(spec: Spectrum, len: usize, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let mut buf = spec.buf;
    let scale = 1.0 / buf.len() as f64;
    spec.inverse.process(&mut buf);
    buf.iter().take(len).enumerate().map(|(i, z)| f(i, z.re * scale)).collect()
}

/// Earliest local maximum in `window` reaching `threshold` times the
/// window's maximum. Returns `None` when the window is empty, flat, or its
/// maximum does not clear the detection gate.
pub fn pick_first_peak(series: &CorrelationSeries, policy: &PeakPolicy, window: SearchWindow) -> Option<usize> {
    pick_in_window(&series.values, series.noise_floor(), policy, window)
}

fn pick_in_window(values: &[f64], floor: f64, policy: &PeakPolicy, window: SearchWindow) -> Option<usize> {
    let end = window.end.min(values.len());
    if window.start >= end {
        return None;
    }
    let w = &values[window.start..end];
    let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) || top < policy.min_peak_to_floor * floor {
        return None;
    }
    let cut = policy.threshold * top;

    let mut i = 0;
    while i < w.len() {
        let v = w[i];
        if v < cut || (i > 0 && w[i - 1] >= v) {
            i += 1;
            continue;
        }
        // Walk across a plateau; it is a peak if it then descends or ends.
        let mut j = i;
        while j + 1 < w.len() && w[j + 1] == v {
            j += 1;
        }
        if j + 1 == w.len() || w[j + 1] < v {
            return Some(window.start + i);
        }
        i = j + 1;
    }
    None
}

/// Vertex offset in (-0.5, 0.5) of the parabola through `i - 1, i, i + 1`.
pub fn parabolic_offset(values: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= values.len() {
        return 0.0;
    }
    let (a, b, c) = (values[i - 1], values[i], values[i + 1]);
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
}

/// Aligns the expected sequence comb to the filter output and returns the
/// index of channel 0's slot center.
///
/// The strongest sample is assumed to belong to one of the channels; each
/// assignment centers the comb on it and is scored by the sum of the slot
/// maxima. The best-scoring assignment wins, the earliest channel on ties.
fn align_sequence(values: &[f64], layout: &SequenceLayout, half: usize) -> Option<usize> {
    let span = layout.onset(layout.n_channels - 1);
    if values.len() <= span {
        return None;
    }
    let strongest = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b })
        .0;
    let slot_max = |center: usize| {
        let w = SearchWindow::around(center, half, values.len());
        values[w.start..w.end].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    (0..layout.n_channels)
        .filter(|&j| layout.onset(j) <= strongest)
        .map(|j| {
            let anchor = strongest - layout.onset(j);
            let score: f64 = (0..layout.n_channels).map(|i| slot_max(anchor + layout.onset(i))).sum();
            (anchor, score)
        })
        .fold(None, |best: Option<(usize, f64)>, (a, sc)| match best {
            Some((_, b)) if b >= sc => best,
            _ => Some((a, sc)),
        })
        .map(|(a, _)| a)
}

/// The per-channel search windows used by [`extract_pseudoranges`].
pub fn search_windows(
    series: &CorrelationSeries,
    layout: &SequenceLayout,
    policy: &PeakPolicy,
    sample_rate: f64,
) -> Result<Vec<SearchWindow>> {
    let half = policy.half_width(layout)?;
    let anchor = align_sequence(&series.values, layout, half).ok_or_else(|| {
        let need = layout.onset(layout.n_channels - 1) + 1;
        Error::RecordingTooShort {
            required: need as f64 / sample_rate,
            actual: series.len() as f64 / sample_rate,
        }
    })?;
    Ok((0..layout.n_channels)
        .map(|i| SearchWindow::around(anchor + layout.onset(i), half, series.len()))
        .collect())
}

/// Matched-filters the recording, picks the first significant peak in each
/// channel's slot, removes the known stagger and converts to meters.
/// Sample numbers are counted from recording sample 0; see
/// [`PseudorangeSet::with_origin`] to re-reference them.
pub fn extract_pseudoranges(
    recording: &SampledSignal,
    replica: &SampledSignal,
    layout: &SequenceLayout,
    policy: &PeakPolicy,
    c: f64,
) -> Result<PseudorangeSet> {
    policy.validate()?;
    let series = detection_series(recording, replica, policy.statistic)?;
    extract_from_series(&series, layout, policy, c, recording.sample_rate())
}

pub fn extract_from_series(
    series: &CorrelationSeries,
    layout: &SequenceLayout,
    policy: &PeakPolicy,
    c: f64,
    sample_rate: f64,
) -> Result<PseudorangeSet> {
    let windows = search_windows(series, layout, policy, sample_rate)?;
    let floor = series.noise_floor();

    let mut raw_peaks = Vec::with_capacity(windows.len());
    let mut missing = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        match pick_in_window(&series.values, floor, policy, *w) {
            Some(p) => raw_peaks.push(p),
            None => missing.push(i),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingDetections { speakers: missing });
    }

    let peak_samples: Vec<f64> = raw_peaks
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let frac = if policy.refine {
                parabolic_offset(&series.values, p)
            } else {
                0.0
            };
            p as f64 + frac - layout.onset(i) as f64
        })
        .collect();
    let mut set = PseudorangeSet::from_samples(peak_samples, c, sample_rate);
    set.raw_peaks = raw_peaks;
    Ok(set)
}
