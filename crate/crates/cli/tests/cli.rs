use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use uwpr::signal::SampledSignal;
use uwpr::wav::{read_wav, write_mono};

fn uwpr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwpr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

/// Nine well-conditioned points with a poorly conditioned one at position 5.
const TABLE_SCENARIO: &str = r#"
seed = 3
[[waypoints]]
position = [0.4, -0.8, 1.2]
[[waypoints]]
position = [1.0, 1.0, 0.5]
[[waypoints]]
position = [-1.0, 0.5, 1.5]
[[waypoints]]
position = [0.0, 0.0, 1.0]
[[waypoints]]
position = [0.85, 0.35, 2.7]
[[waypoints]]
position = [-0.5, -1.5, 0.8]
[[waypoints]]
position = [1.5, -0.5, 1.8]
[[waypoints]]
position = [-1.2, -0.3, 0.6]
[[waypoints]]
position = [0.6, 1.6, 1.4]
[[waypoints]]
position = [-0.2, 1.0, 2.0]
clock_bias = 0.2
"#;

#[test]
fn config_round_trip_is_identity() {
    let dir = TempDir::new().unwrap();
    let first = uwpr(dir.path(), &["config", "--out", "a.toml"]);
    assert!(first.status.success());
    let second = uwpr(dir.path(), &["config", "--config", "a.toml"]);
    assert!(second.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("a.toml")).unwrap(), stdout(&second));
}

#[test]
fn three_speakers_are_rejected_as_config_error() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "three.toml",
        "[constellation]\nspeakers = [[3.4, 0.0, 0.5], [-1.7, 2.9, 2.5], [-1.7, -2.9, 1.0]]\n[layout]\nn_channels = 3\n",
    );
    let o = uwpr(dir.path(), &["gen", "--config", "three.toml", "--out", "g"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_channels"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_names_the_field() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "bad.toml", "[solver]\ntolerance = 1e-6\n");
    let o = uwpr(dir.path(), &["gdop", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tolerance"), "{}", stderr(&o));
}

#[test]
fn gen_writes_staggered_sequence_and_commands() {
    let dir = TempDir::new().unwrap();
    let o = uwpr(dir.path(), &["gen", "--out", "g"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seq = read_wav(dir.path().join("g/sequence.wav")).unwrap();
    assert_eq!(seq.n_channels(), 4);
    assert_eq!(seq.sample_rate(), 48_000.0);
    let onsets: Vec<usize> = (0..4)
        .map(|c| seq.channel(c).iter().position(|x| *x != 0.0).unwrap())
        .collect();
    // The chirp starts at phase zero, so its first sample is zero.
    assert_eq!(onsets, vec![1, 9_601, 19_201, 28_801]);
    for name in ["forward", "left", "right"] {
        let cmd = read_wav(dir.path().join(format!("g/command_{name}.wav"))).unwrap();
        assert_eq!(cmd.n_channels(), 1);
    }
}

#[test]
fn seeded_simulation_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "sc.toml",
        "[channel]\nnoise_sigma = 0.2\n[[waypoints]]\nposition = [0.4, -0.8, 1.2]\n",
    );
    let run = |out: &str, seed: &str| {
        let o = uwpr(dir.path(), &["simulate", "--scenario", "sc.toml", "--seed", seed, "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.path().join(out).join("rec_001.wav")).unwrap()
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(
        fs::read(dir.path().join("a/truth.json")).unwrap(),
        fs::read(dir.path().join("b/truth.json")).unwrap()
    );
}

#[test]
fn missing_scenario_is_a_clean_config_error() {
    let dir = TempDir::new().unwrap();
    let o = uwpr(dir.path(), &["simulate", "--scenario", "nope.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.toml"));
    assert!(!stderr(&o).contains("panicked"));
}

#[test]
fn locate_reports_a_table_with_an_out_of_bounds_row() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "sc.toml", TABLE_SCENARIO);
    assert!(uwpr(dir.path(), &["simulate", "--scenario", "sc.toml", "--out", "run"]).status.success());
    let o = uwpr(
        dir.path(),
        &["locate", "--config", "run/config.toml", "--manifest", "run/truth.json", "--out", "fixes.csv"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let csv = fs::read_to_string(dir.path().join("fixes.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    let header: Vec<&str> = lines[0].split(',').collect();
    for col in ["pos_no", "truth_x", "est_x", "rmse", "xy_rmse", "gdop", "status"] {
        assert!(header.contains(&col), "{col}");
    }
    let status = header.iter().position(|c| *c == "status").unwrap();
    let rmse = header.iter().position(|c| *c == "rmse").unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], (i + 1).to_string());
        if i == 4 {
            assert_eq!(f[status], "Out of Bounds", "{line}");
            assert_eq!(f[rmse], "NA");
        } else {
            assert_eq!(f[status], "ok", "{line}");
            assert!(f[rmse].parse::<f64>().unwrap() < 0.2, "{line}");
        }
    }
}

#[test]
fn locate_json_is_versioned() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "sc.toml", "[[waypoints]]\nposition = [0.4, -0.8, 1.2]\nclock_bias = 0.1\n");
    assert!(uwpr(dir.path(), &["simulate", "--scenario", "sc.toml", "--out", "run"]).status.success());
    let o = uwpr(dir.path(), &["locate", "--manifest", "run/truth.json", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema"], "uwpr.fixes");
    assert_eq!(v["version"], 1);
    let row = &v["rows"][0];
    assert_eq!(row["status"], "ok");
    assert!((row["clock_bias"].as_f64().unwrap() - 0.1).abs() < 1e-4);
    assert!(v["mean_xy_rmse"].as_f64().unwrap() <= v["mean_rmse"].as_f64().unwrap());
}

#[test]
fn silent_recording_gets_a_miss_diagnostic() {
    let dir = TempDir::new().unwrap();
    let silence = SampledSignal::silence(120_000, 48_000.0).unwrap();
    write_mono(&silence, dir.path().join("quiet.wav")).unwrap();
    let o = uwpr(dir.path(), &["locate", "quiet.wav"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("quiet.wav: no ranging sequence detected"), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().contains(",miss,"));
}

#[test]
fn gdop_single_point_volume_gives_one_row() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "pt.toml",
        "[volume]\nshape = \"box\"\nmin = [0.5, 0.5, 1.0]\nmax = [0.5, 0.5, 1.0]\n",
    );
    let o = uwpr(dir.path(), &["gdop", "--config", "pt.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 2);
    assert!(stderr(&o).contains("cells: 1"));
}

#[test]
fn gdop_of_collinear_speakers_is_all_unsolvable() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "line.toml",
        "[constellation]\nspeakers = [[0.0, 0.0, 0.2], [0.0, 0.0, 1.0], [0.0, 0.0, 1.8], [0.0, 0.0, 2.6]]\n[gdop]\nspacing = 0.5\n",
    );
    let o = uwpr(dir.path(), &["gdop", "--config", "line.toml", "--format", "json", "--out", "g.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("solvable: 0.0%"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(v["summary"]["solvable_fraction"], 0.0);
    assert!(v["summary"]["mean_solvable_gdop"].is_null());
}

#[test]
fn default_tank_is_mostly_solvable() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "coarse.toml", "[gdop]\nspacing = 0.25\n");
    let o = uwpr(dir.path(), &["gdop", "--config", "coarse.toml", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let solvable = v["summary"]["solvable_fraction"].as_f64().unwrap();
    assert!(solvable > 0.5 && solvable < 1.0, "{solvable}");
}

#[test]
fn decode_three_epochs_in_order() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "sc.toml",
        "[[waypoints]]\nposition = [0.4, -0.8, 1.2]\nclock_bias = 0.05\ncommands = [\"forward\", \"left\", \"right\"]\n",
    );
    assert!(uwpr(dir.path(), &["simulate", "--scenario", "sc.toml", "--out", "run"]).status.success());
    let o = uwpr(dir.path(), &["decode", "run/rec_001.wav"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let events: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let commands: Vec<&str> = events.iter().map(|e| e["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["forward", "left", "right"]);
    let epochs: Vec<u64> = events.iter().map(|e| e["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, [1, 2, 3]);
}

#[test]
fn decode_of_silence_is_empty() {
    let dir = TempDir::new().unwrap();
    let silence = SampledSignal::silence(120_000, 48_000.0).unwrap();
    write_mono(&silence, dir.path().join("quiet.wav")).unwrap();
    let o = uwpr(dir.path(), &["decode", "quiet.wav"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
}

#[test]
fn corrupt_wav_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "bad.wav", "RIFF\u{0}\u{0}not a wave file");
    let o = uwpr(dir.path(), &["decode", "bad.wav"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad.wav"));
}
