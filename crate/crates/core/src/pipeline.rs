//! Recording-to-fix processing shared by the simulator and the CLI.

use serde::{Deserialize, Serialize};

use crate::commander::{classify_command, CommandCodebook, CommandDecision};
use crate::detector::{
    detection_series, extract_pseudoranges, pick_first_peak, search_windows, PeakPolicy, PseudorangeSet, SearchWindow,
};
use crate::error::{Error, Result};
use crate::signal::{generate_chirp, ChirpSpec, SampledSignal, SequenceLayout};
use crate::solver::{bancroft, solve_fix, Constellation, FixEstimate, PositionFix, SolverSettings, Volume};

/// Outcome class of one localization attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixStatus {
    Ok,
    /// Iteration limit reached; the estimate is the best iterate.
    NotConverged,
    /// GDOP above the cutoff at the solution, or the solution left the
    /// volume.
    OutOfBounds,
    /// Singular geometry.
    Unsolvable,
    /// At least one chirp was not detected.
    Miss,
    /// A second exact solution lies in the volume, so the pseudoranges
    /// cannot tell the two positions apart.
    Ambiguous,
}

impl FixStatus {
    pub fn label(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::NotConverged => "not converged",
            Self::OutOfBounds => "Out of Bounds",
            Self::Unsolvable => "unsolvable",
            Self::Miss => "miss",
            Self::Ambiguous => "ambiguous",
        }
    }

    /// Whether the estimate may be reported as a position.
    pub fn has_estimate(self) -> bool {
        matches!(self, Self::Ok | Self::NotConverged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub status: FixStatus,
    pub pseudoranges: Option<PseudorangeSet>,
    pub fix: Option<PositionFix>,
    pub message: Option<String>,
}

/// Roots closer than this to the estimate are the estimate itself, meters.
const AMBIGUITY_SEPARATION: f64 = 0.05;

/// Everything the receiver needs to turn a recording into a fix.
#[derive(Debug, Clone)]
pub struct Locator {
    pub replica: SampledSignal,
    pub layout: SequenceLayout,
    pub policy: PeakPolicy,
    pub constellation: Constellation,
    pub solver: SolverSettings,
    pub c: f64,
    /// Recording sample corresponding to the nominal transmit time.
    pub origin: f64,
    /// Fixes landing outside this volume are reported out of bounds.
    pub volume: Option<Volume>,
}

impl Locator {
    pub fn new(
        chirp: &ChirpSpec,
        layout: SequenceLayout,
        policy: PeakPolicy,
        constellation: Constellation,
        solver: SolverSettings,
        c: f64,
    ) -> Result<Self> {
        if layout.n_channels != constellation.len() {
            return Err(Error::config(
                "layout.n_channels",
                format!("{} channels for {} speakers", layout.n_channels, constellation.len()),
            ));
        }
        policy.validate()?;
        solver.validate()?;
        Ok(Self {
            replica: generate_chirp(chirp)?,
            layout,
            policy,
            constellation,
            solver,
            c,
            origin: 0.0,
            volume: None,
        })
    }

    pub fn with_origin(mut self, origin: f64) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_volume(mut self, volume: Option<Volume>) -> Self {
        self.volume = volume;
        self
    }

    pub fn pseudoranges(&self, recording: &SampledSignal) -> Result<PseudorangeSet> {
        Ok(extract_pseudoranges(recording, &self.replica, &self.layout, &self.policy, self.c)?.with_origin(self.origin))
    }

    /// Detect, then solve. Detection and geometry failures are folded into
    /// the returned status rather than propagated.
    pub fn locate(&self, recording: &SampledSignal) -> Located {
        let pr = match self.pseudoranges(recording) {
            Ok(pr) => pr,
            Err(e) => {
                return Located {
                    status: FixStatus::Miss,
                    pseudoranges: None,
                    fix: None,
                    message: Some(e.to_string()),
                }
            }
        };
        let init = self.solver.initial_estimate();
        let (status, fix, message) = match solve_fix(&pr, &self.constellation, &init, &self.solver) {
            Ok(fix) => {
                let margin = self.solver.volume_margin;
                let outside = self
                    .volume
                    .as_ref()
                    .is_some_and(|v| !v.contains_within(&fix.estimate.position, margin));
                if outside {
                    let msg = format!("estimate {:?} lies outside the volume", fix.estimate.position.as_slice());
                    (FixStatus::OutOfBounds, Some(fix), Some(msg))
                } else if let Some(other) = self.rival_solution(&pr.ranges, &fix.estimate) {
                    let msg = format!(
                        "second solution {:?} also lies in the volume",
                        other.position.as_slice()
                    );
                    (FixStatus::Ambiguous, Some(fix), Some(msg))
                } else if !fix.converged {
                    (FixStatus::NotConverged, Some(fix), None)
                } else {
                    (FixStatus::Ok, Some(fix), None)
                }
            }
            Err(e @ Error::OutOfBounds { .. }) => (FixStatus::OutOfBounds, None, Some(e.to_string())),
            Err(e) => (FixStatus::Unsolvable, None, Some(e.to_string())),
        };
        Located {
            status,
            pseudoranges: Some(pr),
            fix,
            message,
        }
    }

    /// An exact solution distinct from `estimate` that also lies in the
    /// volume, if any.
    fn rival_solution(&self, ranges: &[f64], estimate: &FixEstimate) -> Option<FixEstimate> {
        let volume = self.volume.as_ref().filter(|_| self.solver.reject_ambiguous)?;
        bancroft(&self.constellation, ranges, self.c).into_iter().find(|r| {
            (r.position - estimate.position).norm() > AMBIGUITY_SEPARATION
                && volume.contains_within(&r.position, self.solver.volume_margin)
        })
    }
}

/// Cuts a multi-epoch recording into one segment per sequence period. A
/// trailing partial period is kept if it is non-empty.
pub fn split_epochs(recording: &SampledSignal, layout: &SequenceLayout) -> Result<Vec<SampledSignal>> {
    let period = layout.period_samples(recording.sample_rate());
    if period == 0 {
        return Err(Error::InvalidLayout("period rounds to zero samples".into()));
    }
    (0..recording.len())
        .step_by(period)
        .map(|start| recording.slice(start, (start + period).min(recording.len())))
        .collect()
}

/// Locates the command slot from the ranging sequence and classifies it.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub replica: SampledSignal,
    pub layout: SequenceLayout,
    pub policy: PeakPolicy,
    pub codebook: CommandCodebook,
}

impl Decoder {
    pub fn new(chirp: &ChirpSpec, layout: SequenceLayout, policy: PeakPolicy, codebook: CommandCodebook) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            replica: generate_chirp(chirp)?,
            layout,
            policy,
            codebook,
        })
    }

    /// Expected command window in one epoch's recording. The command plays
    /// on channel 0, so it arrives `command_onset()` samples after channel
    /// 0's ranging chirp.
    pub fn command_slot(&self, recording: &SampledSignal) -> Result<SearchWindow> {
        let series = detection_series(recording, &self.replica, self.policy.statistic)?;
        let windows = search_windows(&series, &self.layout, &self.policy, recording.sample_rate())?;
        let first = pick_first_peak(&series, &self.policy, windows[0])
            .ok_or(Error::MissingDetections { speakers: vec![0] })?;
        let expected = first + self.layout.command_onset();
        let half = self.codebook.max_len().max(1);
        let slot = SearchWindow::around(expected, half, recording.len());
        if slot.start >= slot.end {
            return Err(Error::RecordingTooShort {
                required: (expected + self.codebook.max_len()) as f64 / recording.sample_rate(),
                actual: recording.duration(),
            });
        }
        Ok(slot)
    }

    pub fn decode(&self, recording: &SampledSignal) -> Result<CommandDecision> {
        let slot = self.command_slot(recording)?;
        classify_command(recording, &self.codebook, slot)
    }
}
