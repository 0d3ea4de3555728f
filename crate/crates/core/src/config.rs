//! TOML configuration shared by every subcommand, and scenario files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::commander::{Command, CommandCodebook};
use crate::detector::{PeakPolicy, DEFAULT_SOUND_SPEED};
use crate::error::{Error, Result};
use crate::pipeline::{Decoder, Locator};
use crate::signal::{ChirpSpec, SequenceLayout};
use crate::simulator::{ChannelModel, ReceiverState, ScenarioSetup};
use crate::solver::{Constellation, Point3, SolverSettings, Volume, DEFAULT_SIGMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstellationConfig {
    /// Speaker positions in the tank frame, meters.
    pub speakers: Vec<[f64; 3]>,
    /// Pseudorange standard deviation applied to every speaker, meters.
    pub sigma: f64,
    /// Per-speaker standard deviations; overrides `sigma` when present.
    pub sigmas: Option<Vec<f64>>,
}

impl Default for ConstellationConfig {
    /// Four speakers near the wall of a 7.3 m x 2.7 m cylindrical tank,
    /// z measured up from the floor.
    fn default() -> Self {
        Self {
            speakers: vec![
                [3.4, 0.0, 0.5],
                [-1.7, 2.9, 2.5],
                [-1.7, -2.9, 1.0],
                [0.0, 0.2, 2.6],
            ],
            sigma: DEFAULT_SIGMA,
            sigmas: None,
        }
    }
}

impl ConstellationConfig {
    pub fn build(&self) -> Result<Constellation> {
        let speakers: Vec<Point3> = self.speakers.iter().map(|p| Point3::from(*p)).collect();
        let sigmas = self
            .sigmas
            .clone()
            .unwrap_or_else(|| vec![self.sigma; speakers.len()]);
        Constellation::new(speakers, sigmas)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverConfig {
    /// Seconds of audio captured per epoch.
    pub recording_length: f64,
    /// Seconds the recording starts before the nominal transmit time.
    pub pre_roll: f64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            recording_length: 2.5,
            pre_roll: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandsConfig {
    pub detection_threshold: f64,
    pub forward: ChirpSpec,
    pub left: ChirpSpec,
    pub right: ChirpSpec,
}

impl Default for CommandsConfig {
    fn default() -> Self {
        let spec = |f0: f64| ChirpSpec::new(f0, f0 + 800.0, 0.005, crate::signal::DEFAULT_SAMPLE_RATE);
        Self {
            detection_threshold: crate::commander::DEFAULT_DETECTION_THRESHOLD,
            forward: spec(1_000.0),
            left: spec(2_000.0),
            right: spec(3_000.0),
        }
    }
}

impl CommandsConfig {
    pub fn entries(&self) -> Vec<(Command, ChirpSpec)> {
        vec![
            (Command::Forward, self.forward.clone()),
            (Command::Left, self.left.clone()),
            (Command::Right, self.right.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdopConfig {
    /// Grid spacing, meters.
    pub spacing: f64,
}

impl Default for GdopConfig {
    fn default() -> Self {
        Self { spacing: 0.1 }
    }
}

/// Everything the toolkit needs, with tank-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    /// Sound speed the receiver assumes when converting delays to meters.
    pub sound_speed: f64,
    pub chirp: ChirpSpec,
    pub layout: SequenceLayout,
    pub constellation: ConstellationConfig,
    /// Simulated channel; its `c` is the true propagation speed.
    pub channel: ChannelModel,
    pub detector: PeakPolicy,
    pub solver: SolverSettings,
    pub receiver: ReceiverConfig,
    pub commands: CommandsConfig,
    pub volume: Volume,
    pub gdop: GdopConfig,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            sound_speed: DEFAULT_SOUND_SPEED,
            chirp: ChirpSpec::default(),
            layout: SequenceLayout::default(),
            constellation: ConstellationConfig::default(),
            channel: ChannelModel::default(),
            detector: PeakPolicy::default(),
            solver: SolverSettings::default(),
            receiver: ReceiverConfig::default(),
            commands: CommandsConfig::default(),
            volume: Volume::default(),
            gdop: GdopConfig::default(),
        }
    }
}

/// Re-labels any error with the config section it came from.
fn in_section<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(field, other.to_string()),
    })
}

impl ToolkitConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config("<toml>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("{message} (in {})", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<toml>", e.to_string()))
    }

    /// Cross-checks every section against the others.
    pub fn validate(&self) -> Result<()> {
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return Err(Error::config("sound_speed", format!("must be positive, got {}", self.sound_speed)));
        }
        let chirp_len = in_section("chirp", self.chirp.validate())?;
        let fs = self.chirp.sample_rate;
        let codebook = self.codebook()?;
        in_section("layout", self.layout.validate(chirp_len, Some(codebook.max_len()), fs))?;
        let constellation = self.constellation()?;
        if self.layout.n_channels != constellation.len() {
            return Err(Error::config(
                "layout.n_channels",
                format!(
                    "{} channels but {} speakers in constellation.speakers",
                    self.layout.n_channels,
                    constellation.len()
                ),
            ));
        }
        self.detector.validate()?;
        // Search windows must not overlap.
        if let Some(g) = self.detector.guard {
            if g > self.layout.stagger_samples / 2 {
                return Err(Error::config(
                    "detector.guard",
                    format!("{g} exceeds half the {}-sample stagger", self.layout.stagger_samples),
                ));
            }
        }
        self.solver.validate()?;
        in_section("channel", self.channel.validate())?;
        in_section("volume", self.volume.validate())?;
        if !(self.gdop.spacing > 0.0 && self.gdop.spacing.is_finite()) {
            return Err(Error::config("gdop.spacing", format!("must be positive, got {}", self.gdop.spacing)));
        }
        let r = &self.receiver;
        if !(r.pre_roll >= 0.0 && r.pre_roll.is_finite()) {
            return Err(Error::config("receiver.pre_roll", format!("must be non-negative, got {}", r.pre_roll)));
        }
        let seq_secs = self.layout.sequence_len(chirp_len, Some(codebook.max_len())) as f64 / fs;
        if !(r.recording_length >= seq_secs) {
            return Err(Error::config(
                "receiver.recording_length",
                format!("{} s cannot hold one {seq_secs:.3} s sequence", r.recording_length),
            ));
        }
        Ok(())
    }

    pub fn constellation(&self) -> Result<Constellation> {
        in_section("constellation", self.constellation.build())
    }

    pub fn codebook(&self) -> Result<CommandCodebook> {
        if self.commands.entries().iter().any(|(_, s)| s.sample_rate != self.chirp.sample_rate) {
            return Err(Error::config(
                "commands",
                "command chirps must use the ranging chirp's sample_rate",
            ));
        }
        in_section(
            "commands",
            CommandCodebook::new(self.commands.entries(), self.commands.detection_threshold, self.chirp.band()),
        )
    }

    /// Sample index of the nominal transmit time in a recording.
    pub fn origin_samples(&self) -> f64 {
        (self.receiver.pre_roll * self.chirp.sample_rate).round()
    }

    pub fn locator(&self) -> Result<Locator> {
        Ok(Locator::new(
            &self.chirp,
            self.layout.clone(),
            self.detector.clone(),
            self.constellation()?,
            self.solver.clone(),
            self.sound_speed,
        )?
        .with_origin(self.origin_samples())
        .with_volume(Some(self.volume.clone())))
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Decoder::new(&self.chirp, self.layout.clone(), self.detector.clone(), self.codebook()?)
    }

    pub fn scenario_setup(&self) -> Result<ScenarioSetup> {
        Ok(ScenarioSetup {
            constellation: self.constellation()?,
            chirp: self.chirp.clone(),
            layout: self.layout.clone(),
            channel: self.channel.clone(),
            policy: self.detector.clone(),
            solver: self.solver.clone(),
            volume: Some(self.volume.clone()),
        })
    }

    pub fn receiver_state(&self, position: Point3, clock_bias: f64) -> ReceiverState {
        ReceiverState {
            position,
            clock_bias,
            recording_length: self.receiver.recording_length,
            pre_roll: self.receiver.pre_roll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSpec {
    pub position: [f64; 3],
    #[serde(default)]
    pub clock_bias: f64,
    /// One entry per epoch: `forward`, `left`, `right` or `none`.
    #[serde(default)]
    pub commands: Vec<String>,
}

impl WaypointSpec {
    pub fn parsed_commands(&self) -> Result<Vec<Option<Command>>> {
        self.commands
            .iter()
            .map(|c| crate::commander::parse_optional_command(c))
            .collect()
    }
}

/// Receiver positions to simulate, with optional overrides of the config's
/// constellation and channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub constellation: Option<ConstellationConfig>,
    #[serde(default)]
    pub channel: Option<ChannelModel>,
    #[serde(default)]
    pub waypoints: Vec<WaypointSpec>,
}

impl ScenarioFile {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Self = toml::from_str(s).map_err(|e| Error::config("<scenario>", e.message().to_string()))?;
        for (i, w) in sc.waypoints.iter().enumerate() {
            if !w.position.iter().all(|v| v.is_finite()) || !w.clock_bias.is_finite() {
                return Err(Error::config(format!("waypoints[{i}]"), "position and clock_bias must be finite"));
            }
            in_section(&format!("waypoints[{i}].commands"), w.parsed_commands())?;
        }
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("<scenario>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The config with this scenario's overrides applied and validated.
    pub fn apply(&self, config: &ToolkitConfig) -> Result<ToolkitConfig> {
        let mut cfg = config.clone();
        if let Some(k) = &self.constellation {
            cfg.constellation = k.clone();
            cfg.layout.n_channels = k.speakers.len();
        }
        if let Some(ch) = &self.channel {
            cfg.channel = ch.clone();
        }
        if let Some(seed) = self.seed {
            cfg.channel.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
