//! Chirp synthesis and multi-channel transmission sequences.
//!
//! A ranging transmission is one identical linear chirp per speaker, each
//! channel delayed by `stagger_samples` relative to the previous one, and
//! optionally followed by a short command chirp. All waveforms are real
//! and uniformly sampled.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sampling rate of the transmitter and receiver, Hz.
pub const DEFAULT_SAMPLE_RATE: f64 = 48_000.0;

/// Parameters of a linear frequency sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChirpSpec {
    pub f_start: f64,
    pub f_end: f64,
    /// Seconds.
    pub duration: f64,
    pub sample_rate: f64,
    /// Peak absolute amplitude of the generated waveform, in (0, 1].
    pub amplitude: f64,
    /// Fraction of the chirp length covered by a raised-cosine ramp at each
    /// end. Zero (the default) gives a rectangular envelope.
    pub taper: f64,
}

impl Default for ChirpSpec {
    /// 10 ms, 4.5 kHz to 8.5 kHz up-chirp at 48 kHz.
    fn default() -> Self {
        Self {
            f_start: 4_500.0,
            f_end: 8_500.0,
            duration: 0.010,
            sample_rate: DEFAULT_SAMPLE_RATE,
            amplitude: 1.0,
            taper: 0.0,
        }
    }
}

impl ChirpSpec {
    pub fn new(f_start: f64, f_end: f64, duration: f64, sample_rate: f64) -> Self {
        Self {
            f_start,
            f_end,
            duration,
            sample_rate,
            ..Self::default()
        }
    }

    /// Number of samples, `duration * sample_rate` rounded to nearest.
    pub fn sample_count(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    /// Checks every invariant and returns the rounded sample count.
    pub fn validate(&self) -> Result<usize> {
        let bad = |msg: String| Err(Error::InvalidChirp(msg));
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        let nyquist = self.sample_rate / 2.0;
        for (name, f) in [("f_start", self.f_start), ("f_end", self.f_end)] {
            if !(f.is_finite() && f > 0.0) {
                return bad(format!("{name} must be positive, got {f}"));
            }
            if f >= nyquist {
                return bad(format!("{name} = {f} Hz violates Nyquist ({nyquist} Hz)"));
            }
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return bad(format!("amplitude must lie in (0, 1], got {}", self.amplitude));
        }
        if !(0.0..=0.5).contains(&self.taper) {
            return bad(format!("taper must lie in [0, 0.5], got {}", self.taper));
        }
        let n = self.sample_count();
        if n < 2 {
            return bad(format!(
                "duration {} s at {} Hz rounds to {n} sample(s); need at least 2",
                self.duration, self.sample_rate
            ));
        }
        Ok(n)
    }

    /// Sweep rate in Hz/s, chosen so the last sample sits exactly at `f_end`.
    pub fn sweep_rate(&self) -> f64 {
        let n = self.sample_count().max(2);
        (self.f_end - self.f_start) / ((n - 1) as f64 / self.sample_rate)
    }

    /// Instantaneous frequency at sample `n`, Hz.
    pub fn instantaneous_frequency(&self, n: usize) -> f64 {
        self.f_start + self.sweep_rate() * n as f64 / self.sample_rate
    }

    /// Occupied band as `(low, high)` in Hz.
    pub fn band(&self) -> (f64, f64) {
        (self.f_start.min(self.f_end), self.f_start.max(self.f_end))
    }
}

/// A uniformly sampled real waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl SampledSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidSignal(format!(
                "sample_rate must be positive, got {sample_rate}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidSignal("signal has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidSignal(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: f64) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Copy of `range`, clipped to the signal bounds.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        let start = start.min(end);
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn reversed(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.reverse();
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Several equal-length channels sharing one sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannel {
    channels: Vec<Vec<f64>>,
    sample_rate: f64,
}

impl MultiChannel {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidSignal("no channels".into()));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidSignal(format!(
                "sample_rate must be positive, got {sample_rate}"
            )));
        }
        let len = channels[0].len();
        if let Some(i) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::InvalidSignal(format!(
                "channel {i} has {} samples, channel 0 has {len}",
                channels[i].len()
            )));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn from_signals(signals: &[SampledSignal]) -> Result<Self> {
        let Some(first) = signals.first() else {
            return Err(Error::InvalidSignal("no channels".into()));
        };
        let rate = first.sample_rate();
        if let Some(s) = signals.iter().find(|s| s.sample_rate() != rate) {
            return Err(Error::SampleRateMismatch(rate, s.sample_rate()));
        }
        Self::new(signals.iter().map(|s| s.samples().to_vec()).collect(), rate)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn to_signal(&self, i: usize) -> Result<SampledSignal> {
        SampledSignal::new(self.channels[i].clone(), self.sample_rate)
    }
}

/// Timing of the staggered ranging sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceLayout {
    pub n_channels: usize,
    /// Onset offset between consecutive channels.
    pub stagger_samples: usize,
    /// Seconds between repetitions of the whole sequence.
    pub period: f64,
    /// Samples from the last ranging chirp onset to the command chirp onset.
    pub command_slot_offset: usize,
}

impl Default for SequenceLayout {
    /// Four channels, 200 ms apart at 48 kHz, repeated every 10 s.
    fn default() -> Self {
        Self {
            n_channels: 4,
            stagger_samples: 9_600,
            period: 10.0,
            command_slot_offset: 9_600,
        }
    }
}

impl SequenceLayout {
    pub fn onset(&self, channel: usize) -> usize {
        channel * self.stagger_samples
    }

    /// Onset of the command chirp, counted from the first channel's onset.
    pub fn command_onset(&self) -> usize {
        self.onset(self.n_channels.saturating_sub(1)) + self.command_slot_offset
    }

    /// Total samples occupied by one sequence.
    pub fn sequence_len(&self, chirp_len: usize, command_len: Option<usize>) -> usize {
        let ranging = self.onset(self.n_channels.saturating_sub(1)) + chirp_len;
        match command_len {
            Some(n) => ranging.max(self.command_onset() + n),
            None => ranging,
        }
    }

    pub fn period_samples(&self, sample_rate: f64) -> usize {
        (self.period * sample_rate).round() as usize
    }

    pub fn validate(&self, chirp_len: usize, command_len: Option<usize>, sample_rate: f64) -> Result<()> {
        if self.n_channels < 4 {
            return Err(Error::InvalidLayout(format!(
                "n_channels must be at least 4, got {}",
                self.n_channels
            )));
        }
        if self.stagger_samples < chirp_len {
            return Err(Error::InvalidLayout(format!(
                "stagger of {} samples overlaps a {chirp_len}-sample chirp",
                self.stagger_samples
            )));
        }
        if command_len.is_some() && self.command_slot_offset < chirp_len {
            return Err(Error::InvalidLayout(format!(
                "command slot offset {} overlaps the last {chirp_len}-sample ranging chirp",
                self.command_slot_offset
            )));
        }
        let needed = self.sequence_len(chirp_len, command_len);
        if self.period_samples(sample_rate) < needed {
            return Err(Error::InvalidLayout(format!(
                "period {} s is shorter than one sequence ({needed} samples)",
                self.period
            )));
        }
        Ok(())
    }
}

/// Synthesizes a linear chirp starting at phase zero (sine convention).
pub fn generate_chirp(spec: &ChirpSpec) -> Result<SampledSignal> {
    let n = spec.validate()?;
    let fs = spec.sample_rate;
    let k = spec.sweep_rate();
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (2.0 * PI * (spec.f_start * t + 0.5 * k * t * t)).sin()
        })
        .collect();

    let ramp = (spec.taper * n as f64).round() as usize;
    if ramp > 0 {
        for i in 0..ramp {
            let w = 0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos());
            samples[i] *= w;
            samples[n - 1 - i] *= w;
        }
    }

    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return Err(Error::InvalidChirp("chirp is identically zero".into()));
    }
    let gain = spec.amplitude / peak;
    samples.iter_mut().for_each(|s| *s *= gain);
    SampledSignal::new(samples, fs)
}

/// Lays out one ranging sequence: channel `i` starts at `i * stagger_samples`.
/// A command chirp, if given, goes on channel 0 at `layout.command_onset()`.
pub fn assemble_sequence(
    chirp: &SampledSignal,
    layout: &SequenceLayout,
    command: Option<&SampledSignal>,
) -> Result<MultiChannel> {
    let cmd_len = command.map(|c| c.len());
    let fs = chirp.sample_rate();
    validate_pair(chirp, command)?;
    layout.validate(chirp.len(), cmd_len, fs)?;

    let len = layout.sequence_len(chirp.len(), cmd_len);
    let mut channels = vec![vec![0.0; len]; layout.n_channels];
    place_sequence(&mut channels, 0, chirp, layout, command);
    MultiChannel::new(channels, fs)
}

/// Repeats the ranging sequence once per entry of `commands`, one period
/// apart, with that epoch's optional command chirp.
pub fn assemble_epochs(
    chirp: &SampledSignal,
    layout: &SequenceLayout,
    commands: &[Option<&SampledSignal>],
) -> Result<MultiChannel> {
    if commands.is_empty() {
        return Err(Error::InvalidLayout("at least one epoch is required".into()));
    }
    let fs = chirp.sample_rate();
    let longest_cmd = commands.iter().flatten().map(|c| c.len()).max();
    for cmd in commands {
        validate_pair(chirp, *cmd)?;
    }
    layout.validate(chirp.len(), longest_cmd, fs)?;

    let period = layout.period_samples(fs);
    let last = layout.sequence_len(chirp.len(), longest_cmd);
    let len = (commands.len() - 1) * period + last;
    let mut channels = vec![vec![0.0; len]; layout.n_channels];
    for (epoch, cmd) in commands.iter().enumerate() {
        place_sequence(&mut channels, epoch * period, chirp, layout, *cmd);
    }
    MultiChannel::new(channels, fs)
}

fn validate_pair(chirp: &SampledSignal, command: Option<&SampledSignal>) -> Result<()> {
    match command {
        Some(c) if c.sample_rate() != chirp.sample_rate() => {
            Err(Error::SampleRateMismatch(chirp.sample_rate(), c.sample_rate()))
        }
        _ => Ok(()),
    }
}

fn place_sequence(
    channels: &mut [Vec<f64>],
    base: usize,
    chirp: &SampledSignal,
    layout: &SequenceLayout,
    command: Option<&SampledSignal>,
) {
    for (i, ch) in channels.iter_mut().enumerate() {
        let at = base + layout.onset(i);
        ch[at..at + chirp.len()].copy_from_slice(chirp.samples());
    }
    if let Some(cmd) = command {
        let at = base + layout.command_onset();
        channels[0][at..at + cmd.len()].copy_from_slice(cmd.samples());
    }
}
