//! Machine-readable outputs: fixes tables, GDOP grids and command events.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::commander::Command;
use crate::pipeline::{FixStatus, Located};
use crate::simulator::{ScenarioReport, WaypointResult};
use crate::solver::{GdopBand, GdopGrid};

pub const FIXES_SCHEMA: &str = "uwpr.fixes";
pub const FIXES_SCHEMA_VERSION: u32 = 1;

pub const FIXES_CSV_HEADER: &str =
    "pos_no,source,truth_x,truth_y,truth_z,est_x,est_y,est_z,clock_bias,rmse,xy_rmse,gdop,status,message";

/// One row of a fixes table: ground truth, estimate and errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixRow {
    /// 1-based position number.
    pub pos_no: usize,
    /// Recording file or scenario label.
    pub source: String,
    pub truth: Option<[f64; 3]>,
    pub truth_clock_bias: Option<f64>,
    /// Present only when the status carries a usable estimate.
    pub estimate: Option<[f64; 3]>,
    pub clock_bias: Option<f64>,
    pub rmse: Option<f64>,
    pub xy_rmse: Option<f64>,
    pub gdop: Option<f64>,
    pub status: FixStatus,
    pub message: Option<String>,
}

impl FixRow {
    pub fn new(pos_no: usize, source: impl Into<String>, located: &Located, truth: Option<([f64; 3], f64)>) -> Self {
        let usable = located.status.has_estimate();
        let fix = located.fix.as_ref().filter(|_| usable);
        let estimate = fix.map(|f| [f.estimate.position.x, f.estimate.position.y, f.estimate.position.z]);
        let (rmse, xy_rmse) = match (estimate, truth) {
            (Some(e), Some((t, _))) => {
                let d = [e[0] - t[0], e[1] - t[1], e[2] - t[2]];
                let xy = (d[0] * d[0] + d[1] * d[1]).sqrt();
                (Some((xy * xy + d[2] * d[2]).sqrt()), Some(xy))
            }
            _ => (None, None),
        };
        Self {
            pos_no,
            source: source.into(),
            truth: truth.map(|t| t.0),
            truth_clock_bias: truth.map(|t| t.1),
            estimate,
            clock_bias: fix.map(|f| f.estimate.clock_bias),
            rmse,
            xy_rmse,
            gdop: located.fix.as_ref().map(|f| f.gdop),
            status: located.status,
            message: located.message.clone(),
        }
    }

    pub fn from_waypoint(result: &WaypointResult, source: impl Into<String>) -> Self {
        let p = result.truth.position;
        Self::new(
            result.index + 1,
            source,
            &result.located,
            Some(([p.x, p.y, p.z], result.truth.clock_bias)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixesReport {
    pub schema: String,
    pub version: u32,
    pub rows: Vec<FixRow>,
    pub mean_rmse: Option<f64>,
    pub mean_xy_rmse: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Quotes a CSV field when it contains a delimiter, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl FixesReport {
    pub fn new(rows: Vec<FixRow>) -> Self {
        Self {
            schema: FIXES_SCHEMA.into(),
            version: FIXES_SCHEMA_VERSION,
            mean_rmse: mean(rows.iter().filter_map(|r| r.rmse)),
            mean_xy_rmse: mean(rows.iter().filter_map(|r| r.xy_rmse)),
            rows,
        }
    }

    pub fn from_scenario(report: &ScenarioReport) -> Self {
        Self::new(
            report
                .results
                .iter()
                .map(|r| FixRow::from_waypoint(r, format!("waypoint {}", r.index + 1)))
                .collect(),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(FIXES_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let t = r.truth.map(|t| t.map(Some)).unwrap_or([None; 3]);
            let e = r.estimate.map(|t| t.map(Some)).unwrap_or([None; 3]);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.pos_no,
                csv_field(&r.source),
                na(t[0]),
                na(t[1]),
                na(t[2]),
                na(e[0]),
                na(e[1]),
                na(e[2]),
                r.clock_bias.map_or_else(|| "NA".to_string(), |b| format!("{b:.9}")),
                na(r.rmse),
                na(r.xy_rmse),
                na(r.gdop),
                csv_field(r.status.label()),
                csv_field(r.message.as_deref().unwrap_or("")),
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixes report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandFraction {
    pub band: GdopBand,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdopSummary {
    pub spacing: f64,
    pub cells: usize,
    pub solvable_fraction: f64,
    pub mean_solvable_gdop: Option<f64>,
    pub bands: Vec<BandFraction>,
}

impl GdopSummary {
    pub fn new(grid: &GdopGrid) -> Self {
        Self {
            spacing: grid.spacing,
            cells: grid.cells.len(),
            solvable_fraction: grid.solvable_fraction,
            mean_solvable_gdop: grid.mean_solvable_gdop,
            bands: GdopBand::ALL
                .iter()
                .zip(grid.band_fractions)
                .map(|(b, f)| BandFraction { band: *b, fraction: f })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "cells: {}\nsolvable: {:.1}%\nmean solvable GDOP: {}\n",
            self.cells,
            100.0 * self.solvable_fraction,
            self.mean_solvable_gdop.map_or("NA".into(), |g| format!("{g:.3}"))
        );
        for b in &self.bands {
            let _ = writeln!(s, "{}: {:.1}%", b.band.as_str(), 100.0 * b.fraction);
        }
        s
    }
}

pub fn gdop_csv(grid: &GdopGrid) -> String {
    let mut out = String::from("x,y,z,gdop,band\n");
    for c in &grid.cells {
        let _ = writeln!(
            out,
            "{:.4},{:.4},{:.4},{},{}",
            c.position.x,
            c.position.y,
            c.position.z,
            na(c.gdop),
            c.band.as_str()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdopExport {
    pub summary: GdopSummary,
    pub grid: GdopGrid,
}

/// One decoded epoch. `command` is `None` when no replica cleared the
/// threshold; the score is reported either way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub epoch: u64,
    pub command: Option<Command>,
    pub score: f64,
}

/// One JSON object per line.
pub fn events_json_lines(events: &[CommandEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{FixEstimate, Point3, PositionFix};
    use nalgebra::Matrix4;

    fn located(status: FixStatus, pos: [f64; 3]) -> Located {
        Located {
            status,
            pseudoranges: None,
            fix: Some(PositionFix {
                estimate: FixEstimate::new(Point3::from(pos), 0.01),
                iterations: 3,
                final_update_norm: 0.0,
                residuals: vec![0.0; 4],
                covariance: Matrix4::identity(),
                converged: true,
                gdop: 3.0,
                degenerate_geometry: false,
            }),
            message: None,
        }
    }

    #[test]
    fn row_errors() {
        let r = FixRow::new(1, "a.wav", &located(FixStatus::Ok, [1.0, 2.0, 3.0]), Some(([1.0, 2.0, 1.0], 0.0)));
        assert_eq!(r.rmse, Some(2.0));
        assert_eq!(r.xy_rmse, Some(0.0));
    }

    #[test]
    fn out_of_bounds_row_has_no_coordinates() {
        let r = FixRow::new(5, "p5", &located(FixStatus::OutOfBounds, [9.0, 9.0, 9.0]), Some(([0.0; 3], 0.0)));
        assert_eq!(r.estimate, None);
        assert_eq!(r.rmse, None);
        let csv = FixesReport::new(vec![r]).to_csv();
        let line = csv.lines().nth(1).unwrap();
        assert!(line.contains("Out of Bounds"));
        assert!(line.starts_with("5,p5,0.000000,0.000000,0.000000,NA,NA,NA,NA,NA,NA,3.000000"));
    }

    #[test]
    fn csv_shape_and_json_schema() {
        let rows = vec![
            FixRow::new(1, "x,y.wav", &located(FixStatus::Ok, [0.0; 3]), None),
            FixRow::new(2, "b", &located(FixStatus::Ok, [0.0; 3]), None),
        ];
        let rep = FixesReport::new(rows);
        let csv = rep.to_csv();
        let cols = FIXES_CSV_HEADER.split(',').count();
        for line in csv.lines().skip(1) {
            assert!(line.starts_with(|c: char| c.is_ascii_digit()));
        }
        assert!(csv.contains("\"x,y.wav\""));
        assert_eq!(csv.lines().next().unwrap().split(',').count(), cols);
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(v["schema"], FIXES_SCHEMA);
        assert_eq!(v["version"], 1);
    }

    #[test]
    fn event_lines() {
        let ev = vec![
            CommandEvent {
                epoch: 0,
                command: Some(Command::Left),
                score: 0.9,
            },
            CommandEvent {
                epoch: 1,
                command: None,
                score: 0.1,
            },
        ];
        let text = events_json_lines(&ev);
        let parsed: Vec<CommandEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, ev);
        assert!(text.contains("\"left\""));
    }
}
