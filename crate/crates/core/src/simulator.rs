//! Synthetic receiver recordings and end-to-end scenario runs.
//!
//! Every speaker's channel reaches the microphone delayed by
//! `range / c + clock_bias + pre_roll`, rounded to the nearest whole sample
//! unless fractional delays are enabled, optionally scaled by spherical spreading and followed by explicit echo
//! taps. White Gaussian noise is added last.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::commander::Command;
use crate::detector::{PeakPolicy, DEFAULT_SOUND_SPEED};
use crate::error::{Error, Result};
use crate::pipeline::{FixStatus, Located, Locator};
use crate::signal::{assemble_epochs, generate_chirp, ChirpSpec, MultiChannel, SampledSignal, SequenceLayout};
use crate::solver::{predict_range, Constellation, Point3, SolverSettings, Volume};

/// Reference distance for spherical spreading, meters.
const SPREADING_REF: f64 = 1.0;
/// Spreading gain is capped at this distance to avoid blowing up near a speaker.
const SPREADING_MIN_RANGE: f64 = 0.1;

/// A delayed, scaled copy of the direct path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    /// Seconds after the direct arrival; strictly positive.
    pub delay: f64,
    /// Relative to the direct path.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// Sound speed, m/s.
    pub c: f64,
    /// Additive noise standard deviation relative to unit chirp amplitude.
    pub noise_sigma: f64,
    /// Apply 1/r spreading loss per path.
    pub spreading: bool,
    pub multipath_taps: Vec<Tap>,
    pub seed: u64,
    /// Apply the exact (sub-sample) delay of every path with an FFT phase
    /// shift instead of rounding to the nearest sample.
    pub fractional_delay: bool,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            c: DEFAULT_SOUND_SPEED,
            noise_sigma: 0.0,
            spreading: false,
            multipath_taps: Vec::new(),
            seed: 0,
            fractional_delay: false,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidChannel(format!("c must be positive, got {}", self.c)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidChannel(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        for (i, t) in self.multipath_taps.iter().enumerate() {
            if !(t.delay > 0.0 && t.delay.is_finite()) {
                return Err(Error::InvalidChannel(format!(
                    "tap {i} delay must be positive (echoes follow the direct path), got {}",
                    t.delay
                )));
            }
            if !t.amplitude.is_finite() {
                return Err(Error::InvalidChannel(format!("tap {i} amplitude is not finite")));
            }
        }
        Ok(())
    }

    fn rng_for(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverState {
    pub position: Point3,
    /// Receiver clock offset, seconds.
    pub clock_bias: f64,
    /// Seconds of audio captured.
    pub recording_length: f64,
    /// The recording starts this many seconds before the nominal transmit
    /// time, leaving room for negative clock biases.
    pub pre_roll: f64,
}

impl ReceiverState {
    pub fn new(position: Point3, clock_bias: f64) -> Self {
        Self {
            position,
            clock_bias,
            recording_length: 2.5,
            pre_roll: 0.0,
        }
    }
}

/// Exact arrival of each speaker's channel, in samples from the start of
/// the recording.
fn arrival_delays(constellation: &Constellation, receiver: &ReceiverState, c: f64, sample_rate: f64) -> Result<Vec<f64>> {
    constellation
        .speakers()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = predict_range(s, &receiver.position) / c + receiver.clock_bias + receiver.pre_roll;
            let d = t * sample_rate;
            if d.round() < 0.0 {
                Err(Error::InvalidChannel(format!(
                    "speaker {i} arrives {:.6} s before the recording starts; increase pre_roll",
                    -t
                )))
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Arrival sample of each speaker's channel in the recording.
pub fn arrival_samples(
    constellation: &Constellation,
    receiver: &ReceiverState,
    c: f64,
    sample_rate: f64,
) -> Result<Vec<usize>> {
    Ok(arrival_delays(constellation, receiver, c, sample_rate)?
        .into_iter()
        .map(|d| d.round() as usize)
        .collect())
}

/// Zero padding on each side of a fractionally shifted segment, samples.
const SHIFT_PAD: usize = 64;

/// Delays `x` by `frac` samples (band-limited, circular over a padded
/// buffer). The result starts `SHIFT_PAD` samples before `x` does.
pub fn fractional_shift(x: &[f64], frac: f64) -> Vec<f64> {
    let n = (x.len() + 2 * SHIFT_PAD).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); n];
    for (b, v) in buf[SHIFT_PAD..].iter_mut().zip(x) {
        b.re = *v;
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        if 2 * k == n {
            // Nyquist bin: keep the result real.
            *b *= (std::f64::consts::PI * frac).cos();
        } else {
            let f = if 2 * k < n { k as f64 } else { k as f64 - n as f64 };
            *b *= Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * f * frac / n as f64);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().take(x.len() + 2 * SHIFT_PAD).map(|b| b.re / n as f64).collect()
}

/// Mixes the transmitted channels into one mono recording.
pub fn simulate_reception(
    sequence: &MultiChannel,
    constellation: &Constellation,
    receiver: &ReceiverState,
    channel: &ChannelModel,
) -> Result<SampledSignal> {
    simulate_stream(sequence, constellation, receiver, channel, 0)
}

fn simulate_stream(
    sequence: &MultiChannel,
    constellation: &Constellation,
    receiver: &ReceiverState,
    channel: &ChannelModel,
    stream: u64,
) -> Result<SampledSignal> {
    channel.validate()?;
    if sequence.n_channels() != constellation.len() {
        return Err(Error::InvalidChannel(format!(
            "{} transmit channels for {} speakers",
            sequence.n_channels(),
            constellation.len()
        )));
    }
    let fs = sequence.sample_rate();
    let delays = arrival_delays(constellation, receiver, channel.c, fs)?;
    let taps: Vec<(f64, f64)> = std::iter::once((0.0, 1.0))
        .chain(channel.multipath_taps.iter().map(|t| (t.delay * fs, t.amplitude)))
        .collect();
    // Whole-sample offset of every (speaker, tap) path.
    let place = |d: f64| if channel.fractional_delay { d } else { d.round() };
    let latest = delays
        .iter()
        .flat_map(|a| taps.iter().map(move |t| place(place(*a) + t.0)))
        .fold(0.0, f64::max);

    let len = (receiver.recording_length * fs).round() as usize;
    let required = latest.ceil() as usize + sequence.len();
    if len < required {
        return Err(Error::RecordingTooShort {
            required: required as f64 / fs,
            actual: len as f64 / fs,
        });
    }

    let mut out = vec![0.0; len];
    for (i, (&arrival, speaker)) in delays.iter().zip(constellation.speakers()).enumerate() {
        let gain = if channel.spreading {
            SPREADING_REF / predict_range(speaker, &receiver.position).max(SPREADING_MIN_RANGE)
        } else {
            1.0
        };
        let src = sequence.channel(i);
        let Some(first) = src.iter().position(|v| *v != 0.0) else {
            continue;
        };
        let last = src.iter().rposition(|v| *v != 0.0).unwrap_or(first);
        for &(offset, amp) in &taps {
            let g = gain * amp;
            let at = place(place(arrival) + offset);
            if channel.fractional_delay {
                let whole = at.floor();
                let shifted = fractional_shift(&src[first..=last], at - whole);
                let start = whole as i64 + first as i64 - SHIFT_PAD as i64;
                for (k, v) in shifted.iter().enumerate() {
                    let j = start + k as i64;
                    if (0..len as i64).contains(&j) {
                        out[j as usize] += g * v;
                    }
                }
            } else {
                let at = at as usize;
                for (k, v) in src.iter().enumerate().take(last + 1).skip(first) {
                    if *v != 0.0 {
                        out[at + k] += g * v;
                    }
                }
            }
        }
    }

    if channel.noise_sigma > 0.0 {
        let mut rng = channel.rng_for(stream);
        let normal = Normal::new(0.0, channel.noise_sigma).expect("validated sigma");
        for v in out.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    SampledSignal::new(out, fs)
}

/// Fixed parts of a scenario: what is transmitted and how it is processed.
#[derive(Debug, Clone)]
pub struct ScenarioSetup {
    pub constellation: Constellation,
    pub chirp: ChirpSpec,
    pub layout: SequenceLayout,
    pub channel: ChannelModel,
    pub policy: PeakPolicy,
    pub solver: SolverSettings,
    /// Fixes outside this volume are out of bounds.
    pub volume: Option<Volume>,
}

impl ScenarioSetup {
    pub fn new(constellation: Constellation) -> Self {
        let layout = SequenceLayout {
            n_channels: constellation.len(),
            ..SequenceLayout::default()
        };
        Self {
            constellation,
            chirp: ChirpSpec::default(),
            layout,
            channel: ChannelModel::default(),
            policy: PeakPolicy::default(),
            solver: SolverSettings::default(),
            volume: Some(Volume::default()),
        }
    }

    pub fn locator(&self, pre_roll: f64) -> Result<Locator> {
        Ok(Locator::new(
            &self.chirp,
            self.layout.clone(),
            self.policy.clone(),
            self.constellation.clone(),
            self.solver.clone(),
            self.channel.c,
        )?
        .with_origin((pre_roll * self.chirp.sample_rate).round())
        .with_volume(self.volume.clone()))
    }

    /// Builds the transmitted sequence for `epochs` repetitions.
    pub fn transmission(&self, commands: &[Option<SampledSignal>]) -> Result<MultiChannel> {
        let chirp = generate_chirp(&self.chirp)?;
        let refs: Vec<Option<&SampledSignal>> = commands.iter().map(|c| c.as_ref()).collect();
        if refs.is_empty() {
            assemble_epochs(&chirp, &self.layout, &[None])
        } else {
            assemble_epochs(&chirp, &self.layout, &refs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointResult {
    pub index: usize,
    pub truth: ReceiverState,
    #[serde(flatten)]
    pub located: Located,
}

impl WaypointResult {
    /// 3D position error of a usable estimate.
    pub fn rmse(&self) -> Option<f64> {
        self.error().map(|e| e.norm())
    }

    /// Horizontal (x, y) position error of a usable estimate.
    pub fn xy_rmse(&self) -> Option<f64> {
        self.error().map(|e| Vector2::new(e.x, e.y).norm())
    }

    pub fn error(&self) -> Option<Point3> {
        if !self.located.status.has_estimate() {
            return None;
        }
        self.located.fix.as_ref().map(|f| f.estimate.position - self.truth.position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub results: Vec<WaypointResult>,
}

impl ScenarioReport {
    fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
        let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        Self::mean(self.results.iter().filter_map(|r| r.rmse()))
    }

    pub fn mean_xy_rmse(&self) -> Option<f64> {
        Self::mean(self.results.iter().filter_map(|r| r.xy_rmse()))
    }

    pub fn count(&self, status: FixStatus) -> usize {
        self.results.iter().filter(|r| r.located.status == status).count()
    }
}

/// Synthesizes, detects and solves every waypoint. Waypoints run in
/// parallel; waypoint `i` draws noise from PRNG stream `i` of the channel
/// seed, so results do not depend on scheduling.
pub fn run_scenario(setup: &ScenarioSetup, waypoints: &[ReceiverState]) -> Result<ScenarioReport> {
    setup.channel.validate()?;
    let sequence = setup.transmission(&[])?;
    let locators: Vec<Locator> = {
        let mut rolls: Vec<f64> = waypoints.iter().map(|w| w.pre_roll).collect();
        rolls.sort_by(f64::total_cmp);
        rolls.dedup();
        rolls.iter().map(|r| setup.locator(*r)).collect::<Result<_>>()?
    };
    let locator_for = |w: &ReceiverState| {
        locators
            .iter()
            .find(|l| l.origin == (w.pre_roll * setup.chirp.sample_rate).round())
            .expect("one locator per pre_roll")
    };

    let results = waypoints
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let located = match simulate_stream(&sequence, &setup.constellation, w, &setup.channel, i as u64) {
                Ok(rec) => locator_for(w).locate(&rec),
                Err(e) => Located {
                    status: FixStatus::Miss,
                    pseudoranges: None,
                    fix: None,
                    message: Some(e.to_string()),
                },
            };
            WaypointResult {
                index: i,
                truth: w.clone(),
                located,
            }
        })
        .collect();
    Ok(ScenarioReport { results })
}

/// A multi-epoch recording for one receiver state, one epoch per entry of
/// `commands`.
pub fn simulate_epochs(
    setup: &ScenarioSetup,
    receiver: &ReceiverState,
    commands: &[Option<SampledSignal>],
    stream: u64,
) -> Result<SampledSignal> {
    let sequence = setup.transmission(commands)?;
    let epochs = commands.len().max(1);
    let period = setup.layout.period;
    let mut rx = receiver.clone();
    rx.recording_length = receiver.recording_length + (epochs - 1) as f64 * period;
    simulate_stream(&sequence, &setup.constellation, &rx, &setup.channel, stream)
}

/// Convenience pairing of a command with its replica, for building fixtures.
pub fn command_replicas(
    codebook: &crate::commander::CommandCodebook,
    commands: &[Option<Command>],
) -> Vec<Option<SampledSignal>> {
    commands
        .iter()
        .map(|c| c.and_then(|c| codebook.replica(c).cloned()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{extract_pseudoranges, matched_filter};
    use crate::signal::assemble_sequence;

    const C: f64 = 1_480.0;
    const FS: f64 = 48_000.0;

    fn square() -> Constellation {
        Constellation::with_uniform_sigma(
            vec![
                Point3::new(3.0, 0.0, 1.0),
                Point3::new(0.0, 3.0, 2.0),
                Point3::new(-3.0, 0.0, 1.0),
                Point3::new(0.0, -3.0, 2.0),
            ],
            0.05,
        )
        .unwrap()
    }

    fn sequence() -> (SampledSignal, MultiChannel) {
        let chirp = generate_chirp(&ChirpSpec::default()).unwrap();
        let seq = assemble_sequence(&chirp, &SequenceLayout::default(), None).unwrap();
        (chirp, seq)
    }

    #[test]
    fn equidistant_receiver_sees_equal_arrivals() {
        let k = Constellation::with_uniform_sigma(
            vec![
                Point3::new(3.0, 0.0, 1.5),
                Point3::new(0.0, 3.0, 1.5),
                Point3::new(-3.0, 0.0, 1.5),
                Point3::new(0.0, -3.0, 1.5),
            ],
            0.05,
        )
        .unwrap();
        let (chirp, seq) = sequence();
        let rx = ReceiverState::new(Point3::new(0.0, 0.0, 1.5), 0.0);
        let rec = simulate_reception(&seq, &k, &rx, &ChannelModel::default()).unwrap();
        let pr = extract_pseudoranges(&rec, &chirp, &SequenceLayout::default(), &PeakPolicy::default(), C).unwrap();
        assert!(pr.peak_samples.iter().all(|s| *s == pr.peak_samples[0]));
        assert_eq!(pr.peak_samples[0], (3.0 / C * FS).round());
    }

    #[test]
    fn bias_inflates_every_pseudorange() {
        let k = square();
        let (chirp, seq) = sequence();
        let pos = Point3::new(0.5, -0.3, 1.2);
        let layout = SequenceLayout::default();
        let base = simulate_reception(&seq, &k, &ReceiverState::new(pos, 0.0), &ChannelModel::default()).unwrap();
        let biased = simulate_reception(&seq, &k, &ReceiverState::new(pos, 0.5), &ChannelModel::default()).unwrap();
        let p0 = extract_pseudoranges(&base, &chirp, &layout, &PeakPolicy::default(), C).unwrap();
        let p1 = extract_pseudoranges(&biased, &chirp, &layout, &PeakPolicy::default(), C).unwrap();
        for (a, b) in p0.ranges.iter().zip(&p1.ranges) {
            assert!(((b - a) - 740.0).abs() <= C / FS + 1e-9);
        }
    }

    #[test]
    fn echo_moves_global_max_but_not_first_peak() {
        let k = square();
        let (chirp, seq) = sequence();
        let rx = ReceiverState::new(Point3::new(0.2, 0.1, 1.4), 0.0);
        let channel = ChannelModel {
            multipath_taps: vec![Tap {
                delay: 0.005,
                amplitude: 1.2,
            }],
            ..ChannelModel::default()
        };
        let rec = simulate_reception(&seq, &k, &rx, &channel).unwrap();
        let clean = simulate_reception(&seq, &k, &rx, &ChannelModel::default()).unwrap();

        let layout = SequenceLayout::default();
        let direct = extract_pseudoranges(&clean, &chirp, &layout, &PeakPolicy::default(), C).unwrap();
        let echoed = extract_pseudoranges(&rec, &chirp, &layout, &PeakPolicy::default(), C).unwrap();
        assert_eq!(direct.peak_samples, echoed.peak_samples);

        // The raw global maximum sits on the echo of some channel.
        let y = matched_filter(&rec, &chirp).unwrap();
        let g = y.argmax().unwrap();
        let echo_lag = (0.005 * FS) as usize;
        assert!(echoed.raw_peaks.iter().any(|p| g.abs_diff(p + echo_lag) <= 8), "{g}");
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let k = square();
        let (_, seq) = sequence();
        let rx = ReceiverState::new(Point3::new(0.0, 0.0, 1.0), 0.1);
        let ch = ChannelModel {
            noise_sigma: 0.3,
            seed: 7,
            ..ChannelModel::default()
        };
        let a = simulate_reception(&seq, &k, &rx, &ch).unwrap();
        let b = simulate_reception(&seq, &k, &rx, &ch).unwrap();
        assert_eq!(a, b);
        let c = simulate_reception(&seq, &k, &rx, &ChannelModel { seed: 8, ..ch }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_short_recording_reports_minimum() {
        let k = square();
        let (_, seq) = sequence();
        let mut rx = ReceiverState::new(Point3::new(0.0, 0.0, 1.0), 0.0);
        rx.recording_length = 0.5;
        match simulate_reception(&seq, &k, &rx, &ChannelModel::default()) {
            Err(Error::RecordingTooShort { required, .. }) => assert!(required > 0.6 && required < 0.62),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_arrival_needs_pre_roll() {
        let k = square();
        let (_, seq) = sequence();
        let rx = ReceiverState::new(Point3::new(0.0, 0.0, 1.0), -0.3);
        assert!(simulate_reception(&seq, &k, &rx, &ChannelModel::default()).is_err());
        let rx = ReceiverState {
            pre_roll: 0.5,
            ..rx
        };
        assert!(simulate_reception(&seq, &k, &rx, &ChannelModel::default()).is_ok());
    }

    #[test]
    fn invalid_taps_rejected() {
        let ch = ChannelModel {
            multipath_taps: vec![Tap {
                delay: 0.0,
                amplitude: 0.5,
            }],
            ..ChannelModel::default()
        };
        assert!(ch.validate().is_err());
        assert!(ChannelModel {
            noise_sigma: -1.0,
            ..ChannelModel::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn spreading_attenuates_far_speakers() {
        let k = square();
        let (_, seq) = sequence();
        let rx = ReceiverState::new(Point3::new(2.0, 0.0, 1.0), 0.0);
        let ch = ChannelModel {
            spreading: true,
            ..ChannelModel::default()
        };
        let rec = simulate_reception(&seq, &k, &rx, &ch).unwrap();
        let arr = arrival_samples(&k, &rx, C, FS).unwrap();
        let peak = |i: usize| {
            let at = arr[i] + i * 9_600;
            rec.samples()[at..at + 480].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        // speaker 0 is 1 m away, speaker 2 is 5 m away
        assert!((peak(0) - 1.0).abs() < 1e-3);
        assert!((peak(2) - 0.2).abs() < 1e-3);
    }

    #[test]
    fn empty_scenario() {
        let setup = ScenarioSetup::new(square());
        let report = run_scenario(&setup, &[]).unwrap();
        assert!(report.results.is_empty());
        assert_eq!(report.mean_rmse(), None);
    }

    #[test]
    fn zero_fractional_shift_is_identity() {
        let (chirp, _) = sequence();
        let y = fractional_shift(chirp.samples(), 0.0);
        for (k, v) in chirp.samples().iter().enumerate() {
            assert!((y[SHIFT_PAD + k] - v).abs() < 1e-12);
        }
        assert!(y[..SHIFT_PAD].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn whole_sample_shift_matches_indexing() {
        let (chirp, _) = sequence();
        let y = fractional_shift(chirp.samples(), 1.0);
        for (k, v) in chirp.samples().iter().enumerate() {
            assert!((y[SHIFT_PAD + k + 1] - v).abs() < 1e-9);
        }
    }

    #[test]
    fn refined_detection_follows_fractional_delays() {
        let (chirp, seq) = sequence();
        let k = square();
        let rx = ReceiverState::new(Point3::new(0.4, -0.3, 1.2), 0.013);
        let ch = ChannelModel {
            fractional_delay: true,
            ..ChannelModel::default()
        };
        let rec = simulate_reception(&seq, &k, &rx, &ch).unwrap();
        let policy = PeakPolicy {
            refine: true,
            ..PeakPolicy::default()
        };
        let pr = extract_pseudoranges(&rec, &chirp, &SequenceLayout::default(), &policy, C).unwrap();
        for (s, got) in k.speakers().iter().zip(&pr.ranges) {
            let want = predict_range(s, &rx.position) + C * rx.clock_bias;
            // A tenth of a sample.
            assert!((got - want).abs() < 0.1 * C / FS, "{got} vs {want}");
        }
    }
}
