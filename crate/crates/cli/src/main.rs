//! `uwpr`: generate, simulate, locate, map GDOP and decode commands from a
//! TOML config.
//!
//! Exit status: 0 success, 2 configuration error, 3 data error (unreadable
//! or undetectable audio), 4 unsolvable geometry.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use uwpr::config::{ScenarioFile, ToolkitConfig};
use uwpr::pipeline::{split_epochs, FixStatus};
use uwpr::report::{events_json_lines, gdop_csv, CommandEvent, FixRow, FixesReport, GdopExport, GdopSummary};
use uwpr::signal::{generate_chirp, MultiChannel, SampledSignal};
use uwpr::simulator::{command_replicas, simulate_epochs};
use uwpr::solver::{gdop_map, Point3};
use uwpr::wav::{read_wav, write_mono, write_wav};
use uwpr::Error;

const MANIFEST_SCHEMA: &str = "uwpr.truth";
const MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "uwpr", version, about = "Acoustic pseudorange localization toolkit")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the channel noise seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective config as TOML.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the ranging sequence and the command chirps as WAV files.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one recording per scenario waypoint plus a truth manifest.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate position and clock bias for every epoch of each recording.
    Locate {
        recordings: Vec<PathBuf>,
        /// Truth manifest from `simulate`; its recordings are located and
        /// compared against ground truth.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Map GDOP over the configured volume.
    Gdop {
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the command chirp of every epoch as JSON lines.
    Decode {
        recording: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Unsolvable(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Unsolvable(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Data(m) | Self::Unsolvable(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config { .. }
            | Error::InvalidChirp(_)
            | Error::InvalidLayout(_)
            | Error::InvalidConstellation(_)
            | Error::InvalidChannel(_)
            | Error::InvalidCodebook(_) => Self::Config(m),
            Error::SingularLinearization { .. } | Error::Unsolvable { .. } | Error::OutOfBounds { .. } => {
                Self::Unsolvable(m)
            }
            _ => Self::Data(m),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn with_path(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        let m = format!("{}: {}", path.display(), f.message());
        match f {
            Failure::Config(_) => Failure::Config(m),
            Failure::Data(_) => Failure::Data(m),
            Failure::Unsolvable(_) => Failure::Unsolvable(m),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(cli: &Cli) -> CliResult<ToolkitConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ToolkitConfig::load(p)?,
        None => ToolkitConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.channel.seed = seed;
    }
    Ok(cfg)
}

/// Writes to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Data(format!("stdout: {e}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    version: u32,
    seed: u64,
    recordings: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    /// Relative to the manifest's directory.
    file: String,
    position: [f64; 3],
    clock_bias: f64,
    commands: Vec<String>,
    /// Scale applied so the recording fits 16-bit PCM.
    gain: f64,
}

fn cmd_gen(cfg: &ToolkitConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let setup = cfg.scenario_setup()?;
    let sequence = setup.transmission(&[])?;
    let path = out.join("sequence.wav");
    write_wav(&sequence, &path).map_err(with_path(&path))?;
    println!("{}", path.display());
    let codebook = cfg.codebook()?;
    for cmd in codebook.commands() {
        let spec = codebook.spec(cmd).expect("codebook command has a spec");
        let path = out.join(format!("command_{cmd}.wav"));
        write_mono(&generate_chirp(spec)?, &path).map_err(with_path(&path))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli, scenario: &Path, out: &Path) -> CliResult<()> {
    let base = load_config(cli)?;
    let sc = ScenarioFile::load(scenario)?;
    if sc.waypoints.is_empty() {
        return Err(Failure::Config(format!("{}: no waypoints", scenario.display())));
    }
    let mut cfg = sc.apply(&base)?;
    if let Some(seed) = cli.seed {
        cfg.channel.seed = seed;
    }
    let setup = cfg.scenario_setup()?;
    let codebook = cfg.codebook()?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let mut recordings = Vec::with_capacity(sc.waypoints.len());
    for (i, w) in sc.waypoints.iter().enumerate() {
        let replicas = command_replicas(&codebook, &w.parsed_commands()?);
        let rx = cfg.receiver_state(Point3::from(w.position), w.clock_bias);
        let rec = simulate_epochs(&setup, &rx, &replicas, i as u64)?;
        let peak = rec.peak();
        let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
        let file = format!("rec_{:03}.wav", i + 1);
        let path = out.join(&file);
        write_mono(&rec.scaled(gain), &path).map_err(with_path(&path))?;
        recordings.push(ManifestEntry {
            file,
            position: w.position,
            clock_bias: w.clock_bias,
            commands: w.commands.clone(),
            gain,
        });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        seed: cfg.channel.seed,
        recordings,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(out.join("truth.json"), json).map_err(io_err(out))?;
    // Locating needs the constellation the scenario used.
    fs::write(out.join("config.toml"), cfg.to_toml_string()?).map_err(io_err(out))?;
    println!("{} recordings in {}", manifest.recordings.len(), out.display());
    Ok(())
}

fn read_channel0(path: &Path) -> CliResult<SampledSignal> {
    let wav: MultiChannel = read_wav(path).map_err(with_path(path))?;
    wav.to_signal(0).map_err(with_path(path))
}

/// Per-period segments, without a trailing stub too short for a sequence.
fn epochs_of(cfg: &ToolkitConfig, rec: &SampledSignal) -> CliResult<Vec<SampledSignal>> {
    let mut epochs = split_epochs(rec, &cfg.layout)?;
    let min_len = cfg.layout.sequence_len(cfg.chirp.sample_count(), None);
    if epochs.len() > 1 && epochs.last().is_some_and(|e| e.len() < min_len) {
        epochs.pop();
    }
    Ok(epochs)
}

fn cmd_locate(
    cfg: &ToolkitConfig,
    recordings: &[PathBuf],
    manifest: Option<&Path>,
    format: Format,
    out: Option<&Path>,
) -> CliResult<()> {
    let mut inputs: Vec<(PathBuf, Option<([f64; 3], f64)>)> = recordings.iter().map(|p| (p.clone(), None)).collect();
    if let Some(m) = manifest {
        let text = fs::read_to_string(m).map_err(|e| Failure::Config(format!("{}: {e}", m.display())))?;
        let parsed: Manifest =
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", m.display())))?;
        if parsed.schema != MANIFEST_SCHEMA || parsed.version != MANIFEST_VERSION {
            return Err(Failure::Config(format!(
                "{}: expected schema {MANIFEST_SCHEMA} version {MANIFEST_VERSION}",
                m.display()
            )));
        }
        let dir = m.parent().unwrap_or(Path::new("."));
        inputs.extend(
            parsed
                .recordings
                .into_iter()
                .map(|r| (dir.join(&r.file), Some((r.position, r.clock_bias)))),
        );
    }
    if inputs.is_empty() {
        return Err(Failure::Config("no recordings given".into()));
    }

    let locator = cfg.locator()?;
    let mut rows = Vec::new();
    for (path, truth) in &inputs {
        let rec = read_channel0(path)?;
        let epochs = epochs_of(cfg, &rec).map_err(|f| Failure::Data(format!("{}: {}", path.display(), f.message())))?;
        let single = epochs.len() == 1;
        let mut misses = Vec::new();
        for (k, epoch) in epochs.iter().enumerate() {
            let located = locator.locate(epoch);
            if located.status == FixStatus::Miss {
                misses.push(located.message.clone().unwrap_or_default());
            }
            let source = if single {
                path.display().to_string()
            } else {
                format!("{}#{}", path.display(), k + 1)
            };
            rows.push(FixRow::new(rows.len() + 1, source, &located, *truth));
        }
        if misses.len() == epochs.len() {
            eprintln!("{}: no ranging sequence detected ({})", path.display(), misses[0]);
        }
    }

    let report = FixesReport::new(rows);
    let text = match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json() + "\n",
    };
    emit(out, &text)?;

    let count = |pred: fn(FixStatus) -> bool| report.rows.iter().filter(|r| pred(r.status)).count();
    let geometry = count(|s| matches!(s, FixStatus::OutOfBounds | FixStatus::Unsolvable | FixStatus::Ambiguous));
    let misses = count(|s| s == FixStatus::Miss);
    if geometry > 0 {
        Err(Failure::Unsolvable(format!(
            "{geometry} of {} fixes have unsolvable geometry",
            report.rows.len()
        )))
    } else if misses > 0 {
        Err(Failure::Data(format!("{misses} of {} epochs missed a chirp", report.rows.len())))
    } else {
        Ok(())
    }
}

fn cmd_gdop(cfg: &ToolkitConfig, format: Format, out: Option<&Path>) -> CliResult<()> {
    let grid = gdop_map(&cfg.constellation()?, &cfg.volume, cfg.gdop.spacing, cfg.sound_speed)?;
    let summary = GdopSummary::new(&grid);
    let text = match format {
        Format::Csv => gdop_csv(&grid),
        Format::Json => {
            let export = GdopExport {
                summary: summary.clone(),
                grid,
            };
            serde_json::to_string_pretty(&export).expect("GDOP export serializes") + "\n"
        }
    };
    emit(out, &text)?;
    // Keep stdout machine-parseable when it carries the grid.
    if out.is_some() {
        print!("{}", summary.to_text());
    } else {
        eprint!("{}", summary.to_text());
    }
    Ok(())
}

fn cmd_decode(cfg: &ToolkitConfig, recording: &Path, out: Option<&Path>) -> CliResult<()> {
    let decoder = cfg.decoder()?;
    let rec = read_channel0(recording)?;
    let mut events = Vec::new();
    for (k, epoch) in epochs_of(cfg, &rec)?.iter().enumerate() {
        match decoder.decode(epoch) {
            Ok(d) => events.push(CommandEvent {
                epoch: k as u64 + 1,
                command: d.command,
                score: d.score,
            }),
            // No ranging sequence means no command slot.
            Err(Error::MissingDetections { .. } | Error::AllZeroRecording | Error::RecordingTooShort { .. }) => {}
            Err(e) => return Err(with_path(recording)(e)),
        }
    }
    emit(out, &events_json_lines(&events))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Cmd::Config { out } => emit(out.as_deref(), &load_config(cli)?.to_toml_string()?),
        Cmd::Gen { out } => cmd_gen(&load_config(cli)?, out),
        Cmd::Simulate { scenario, out } => cmd_simulate(cli, scenario, out),
        Cmd::Locate {
            recordings,
            manifest,
            format,
            out,
        } => cmd_locate(&load_config(cli)?, recordings, manifest.as_deref(), *format, out.as_deref()),
        Cmd::Gdop { format, out } => cmd_gdop(&load_config(cli)?, *format, out.as_deref()),
        Cmd::Decode { recording, out } => cmd_decode(&load_config(cli)?, recording, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("uwpr: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
