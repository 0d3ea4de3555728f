//! One-way command link: a short chirp after the ranging sequence selects a
//! motion primitive.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::SearchWindow;
use crate::error::{Error, Result};
use crate::signal::{generate_chirp, ChirpSpec, SampledSignal};

/// Windows whose energy is below this fraction of the slot's loudest window
/// score zero, so round-off in silence cannot produce a match.
const QUIET_WINDOW_RATIO: f64 = 1e-6;

pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Forward,
    Left,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Self::Forward, Self::Left, Self::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Left => "left",
            Self::Right => "right",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(Self::Forward),
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(Error::InvalidCodebook(format!(
                "unknown command `{other}` (expected forward, left or right)"
            ))),
        }
    }
}

/// Parses a scenario command entry; `"none"` or an empty string means no
/// command this epoch.
pub fn parse_optional_command(s: &str) -> Result<Option<Command>> {
    match s.trim() {
        "" => Ok(None),
        t if t.eq_ignore_ascii_case("none") => Ok(None),
        t => t.parse().map(Some),
    }
}

/// Default command chirps: 5 ms up-chirps in three bands below the ranging
/// band.
pub fn default_command_specs(sample_rate: f64) -> Vec<(Command, ChirpSpec)> {
    [(Command::Forward, 1_000.0), (Command::Left, 2_000.0), (Command::Right, 3_000.0)]
        .into_iter()
        .map(|(c, f0)| (c, ChirpSpec::new(f0, f0 + 800.0, 0.005, sample_rate)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    command: Command,
    spec: ChirpSpec,
    replica: SampledSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandCodebook {
    entries: Vec<Entry>,
    detection_threshold: f64,
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

impl CommandCodebook {
    /// Rejects duplicate ids, mismatched sample rates and any band that
    /// overlaps another entry or `ranging_band`.
    pub fn new(entries: Vec<(Command, ChirpSpec)>, detection_threshold: f64, ranging_band: (f64, f64)) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidCodebook("codebook is empty".into()));
        }
        if !(detection_threshold > 0.0 && detection_threshold <= 1.0) {
            return Err(Error::InvalidCodebook(format!(
                "detection_threshold must be in (0, 1], got {detection_threshold}"
            )));
        }
        let fs = entries[0].1.sample_rate;
        let mut built: Vec<Entry> = Vec::with_capacity(entries.len());
        for (command, spec) in entries {
            let band = spec.band();
            if built.iter().any(|e| e.command == command) {
                return Err(Error::InvalidCodebook(format!("duplicate entry for `{command}`")));
            }
            if spec.sample_rate != fs {
                return Err(Error::InvalidCodebook(format!(
                    "`{command}` sample rate {} differs from {fs}",
                    spec.sample_rate
                )));
            }
            if overlaps(band, ranging_band) {
                return Err(Error::InvalidCodebook(format!(
                    "`{command}` band {:?} overlaps the ranging band {:?}",
                    band, ranging_band
                )));
            }
            if let Some(other) = built.iter().find(|e| overlaps(e.spec.band(), band)) {
                return Err(Error::InvalidCodebook(format!(
                    "`{command}` band {:?} overlaps `{}` band {:?}",
                    band,
                    other.command,
                    other.spec.band()
                )));
            }
            let replica = generate_chirp(&spec).map_err(|e| Error::InvalidCodebook(format!("`{command}`: {e}")))?;
            built.push(Entry { command, spec, replica });
        }
        Ok(Self {
            entries: built,
            detection_threshold,
        })
    }

    pub fn default_for(ranging: &ChirpSpec) -> Result<Self> {
        Self::new(
            default_command_specs(ranging.sample_rate),
            DEFAULT_DETECTION_THRESHOLD,
            ranging.band(),
        )
    }

    pub fn detection_threshold(&self) -> f64 {
        self.detection_threshold
    }

    pub fn commands(&self) -> impl Iterator<Item = Command> + '_ {
        self.entries.iter().map(|e| e.command)
    }

    pub fn spec(&self, command: Command) -> Option<&ChirpSpec> {
        self.entries.iter().find(|e| e.command == command).map(|e| &e.spec)
    }

    pub fn replica(&self, command: Command) -> Option<&SampledSignal> {
        self.entries.iter().find(|e| e.command == command).map(|e| &e.replica)
    }

    pub fn sample_rate(&self) -> f64 {
        self.entries[0].spec.sample_rate
    }

    /// Longest replica, in samples.
    pub fn max_len(&self) -> usize {
        self.entries.iter().map(|e| e.replica.len()).max().unwrap_or(0)
    }

    /// For every ordered pair `(i, j)` with `i != j`: the peak normalized
    /// correlation of replica `j` against a clean recording of command `i`,
    /// and the margin `1 - peak` below the self-match.
    pub fn separation_margins(&self) -> Vec<Separation> {
        let mut out = Vec::new();
        for a in &self.entries {
            // Pad so every alignment of the probe is evaluated.
            let pad = self.max_len();
            let mut x = vec![0.0; pad];
            x.extend_from_slice(a.replica.samples());
            x.extend(std::iter::repeat_n(0.0, pad));
            for b in self.entries.iter().filter(|b| b.command != a.command) {
                let peak = normalized_scores(&x, b.replica.samples())
                    .into_iter()
                    .fold(0.0f64, f64::max);
                out.push(Separation {
                    sent: a.command,
                    probe: b.command,
                    peak,
                    margin: 1.0 - peak,
                });
            }
        }
        out
    }

    pub fn min_separation(&self) -> Option<f64> {
        self.separation_margins()
            .iter()
            .map(|s| s.margin)
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub sent: Command,
    pub probe: Command,
    pub peak: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandDecision {
    /// `None` when no replica clears the detection threshold.
    pub command: Option<Command>,
    /// Best normalized correlation peak over all replicas.
    pub score: f64,
    /// Per-replica peaks in codebook order.
    pub scores: Vec<(Command, f64)>,
    /// Recording sample where the winning replica aligned best.
    pub onset: Option<usize>,
}

/// Cosine similarity between `h` and every length-`h.len()` window of `x`.
fn normalized_scores(x: &[f64], h: &[f64]) -> Vec<f64> {
    let m = h.len();
    if x.len() < m || m == 0 {
        return Vec::new();
    }
    let h_norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = x.len() - m + 1;
    let mut energy = Vec::with_capacity(n);
    let mut e: f64 = x[..m].iter().map(|v| v * v).sum();
    energy.push(e);
    for k in 1..n {
        e += x[k + m - 1] * x[k + m - 1] - x[k - 1] * x[k - 1];
        energy.push(e.max(0.0));
    }
    let loudest = energy.iter().copied().fold(0.0, f64::max);
    (0..n)
        .map(|k| {
            if !(loudest > 0.0) || energy[k] < QUIET_WINDOW_RATIO * loudest {
                return 0.0;
            }
            let dot: f64 = h.iter().zip(&x[k..k + m]).map(|(a, b)| a * b).sum();
            // The running sum can drift slightly; recompute the window norm.
            let w: f64 = x[k..k + m].iter().map(|v| v * v).sum();
            dot / (h_norm * w.sqrt())
        })
        .collect()
}

/// Matched-filters `slot` against each replica and picks the replica with
/// the highest normalized peak, if it reaches the threshold. Replica
/// alignments start anywhere in the slot; the replica may extend past the
/// slot end as far as the recording allows.
pub fn classify_command(
    recording: &SampledSignal,
    codebook: &CommandCodebook,
    slot: SearchWindow,
) -> Result<CommandDecision> {
    if recording.sample_rate() != codebook.sample_rate() {
        return Err(Error::SampleRateMismatch(recording.sample_rate(), codebook.sample_rate()));
    }
    if slot.start >= slot.end || slot.end > recording.len() {
        return Err(Error::InvalidSignal(format!(
            "command slot [{}, {}) is outside the {}-sample recording",
            slot.start,
            slot.end,
            recording.len()
        )));
    }
    let x = recording.samples();
    let mut scores = Vec::with_capacity(codebook.entries.len());
    let mut best: (Option<Command>, f64, Option<usize>) = (None, 0.0, None);
    for entry in &codebook.entries {
        let m = entry.replica.len();
        let stop = (slot.end - 1 + m).min(x.len());
        let s = normalized_scores(&x[slot.start..stop], entry.replica.samples());
        let (k, peak) = s
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        scores.push((entry.command, peak));
        if peak > best.1 {
            best = (Some(entry.command), peak, Some(slot.start + k));
        }
    }
    let detected = best.1 >= codebook.detection_threshold;
    Ok(CommandDecision {
        command: if detected { best.0 } else { None },
        score: best.1,
        scores,
        onset: if detected { best.2 } else { None },
    })
}
