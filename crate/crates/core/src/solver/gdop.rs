//! Geometric dilution of precision and solvable-volume maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{linearize, Constellation, FixEstimate, Point3};
use crate::error::{Error, Result};

/// GDOP at or above which a point is considered unsolvable.
pub const GDOP_CUTOFF: f64 = 20.0;

/// Reciprocal condition below which `A^T A` is treated as singular.
const GDOP_RCOND_MIN: f64 = 1e-12;

/// `sqrt(trace((A^T A)^-1))` with the unwhitened design matrix at `point`
/// (clock column equal to `c`).
pub fn gdop(constellation: &Constellation, point: &Point3, c: f64) -> Result<f64> {
    let ranges = vec![0.0; constellation.len()];
    let (mut a, _) = linearize(constellation, &FixEstimate::new(*point, 0.0), &ranges, c)
        .map_err(|e| Error::Unsolvable { reason: e.to_string() })?;

    // Work in the unit-column parametrization and rescale the clock entry:
    // with A = A1 * diag(1, 1, 1, c), (A^T A)^-1 = D^-1 (A1^T A1)^-1 D^-1.
    // The SVD of A1 avoids squaring its condition number.
    a.column_mut(3).fill(1.0);
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = &svd.singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    let rcond = if hi > 0.0 { (lo / hi).powi(2) } else { 0.0 };
    if !(rcond >= GDOP_RCOND_MIN) {
        return Err(Error::Unsolvable {
            reason: format!("A^T A reciprocal condition {rcond:.3e}"),
        });
    }
    let weights = [1.0, 1.0, 1.0, 1.0 / (c * c)];
    let trace: f64 = (0..sv.len())
        .map(|k| (0..4).map(|j| weights[j] * v_t[(k, j)].powi(2)).sum::<f64>() / sv[k].powi(2))
        .sum();
    Ok(trace.sqrt())
}

/// Quality band of a GDOP value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdopBand {
    /// [0, 5)
    Excellent,
    /// [5, 10)
    Moderate,
    /// [10, 20)
    Fair,
    /// 20 and above, or singular.
    Unsolvable,
}

impl GdopBand {
    pub const ALL: [GdopBand; 4] = [Self::Excellent, Self::Moderate, Self::Fair, Self::Unsolvable];

    pub fn classify(gdop: Option<f64>) -> Self {
        match gdop {
            Some(g) if g.is_finite() && g >= 0.0 => {
                if g < 5.0 {
                    Self::Excellent
                } else if g < 10.0 {
                    Self::Moderate
                } else if g < GDOP_CUTOFF {
                    Self::Fair
                } else {
                    Self::Unsolvable
                }
            }
            _ => Self::Unsolvable,
        }
    }

    pub fn is_solvable(self) -> bool {
        self != Self::Unsolvable
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Excellent => "excellent",
            Self::Moderate => "moderate",
            Self::Fair => "fair",
            Self::Unsolvable => "unsolvable",
        }
    }
}

/// Region of the tank frame to analyze.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Volume {
    /// Vertical cylinder around `center` (x, y).
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Default for Volume {
    /// A 7.3 m diameter, 2.7 m deep tank with `z` measured up from the floor.
    fn default() -> Self {
        Self::Cylinder {
            center: [0.0, 0.0],
            radius: 3.65,
            z_min: 0.0,
            z_max: 2.7,
        }
    }
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => center.iter().all(|v| v.is_finite()) && *radius >= 0.0 && z_min <= z_max,
            Self::Box { min, max } => min.iter().zip(max).all(|(a, b)| a.is_finite() && a <= b),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("volume", format!("empty or malformed volume {self:?}")))
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        self.contains_within(p, 0.0)
    }

    /// Containment in the volume grown outward by `margin` meters.
    pub fn contains_within(&self, p: &Point3, margin: f64) -> bool {
        let eps = 1e-9 + margin;
        match self {
            Self::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let dx = p.x - center[0];
                let dy = p.y - center[1];
                let r = radius + eps;
                dx * dx + dy * dy <= r * r && p.z >= z_min - eps && p.z <= z_max + eps
            }
            Self::Box { min, max } => (0..3).all(|k| p[k] >= min[k] - eps && p[k] <= max[k] + eps),
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Self::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => (
                [center[0] - radius, center[1] - radius, *z_min],
                [center[0] + radius, center[1] + radius, *z_max],
            ),
            Self::Box { min, max } => (*min, *max),
        }
    }

    /// Grid points `min + i * spacing` along each axis that fall inside the
    /// volume, in x-major then y then z order.
    pub fn grid(&self, spacing: f64) -> Vec<Point3> {
        let (lo, hi) = self.bounds();
        let steps: Vec<usize> = (0..3)
            .map(|k| ((hi[k] - lo[k]) / spacing + 1e-9).floor() as usize + 1)
            .collect();
        let mut out = Vec::new();
        for i in 0..steps[0] {
            for j in 0..steps[1] {
                for l in 0..steps[2] {
                    let p = Point3::new(
                        lo[0] + i as f64 * spacing,
                        lo[1] + j as f64 * spacing,
                        lo[2] + l as f64 * spacing,
                    );
                    if self.contains(&p) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdopCell {
    pub position: Point3,
    /// `None` where the geometry is singular.
    pub gdop: Option<f64>,
    pub band: GdopBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdopGrid {
    pub spacing: f64,
    pub cells: Vec<GdopCell>,
    /// Fraction of cells with GDOP below the cutoff.
    pub solvable_fraction: f64,
    /// Mean GDOP over solvable cells.
    pub mean_solvable_gdop: Option<f64>,
    /// Fraction of cells per band, in [`GdopBand::ALL`] order.
    pub band_fractions: [f64; 4],
}

impl GdopGrid {
    fn from_cells(spacing: f64, cells: Vec<GdopCell>) -> Self {
        let total = cells.len().max(1) as f64;
        let mut counts = [0usize; 4];
        let mut sum = 0.0;
        for cell in &cells {
            let k = GdopBand::ALL.iter().position(|b| *b == cell.band).unwrap();
            counts[k] += 1;
            if cell.band.is_solvable() {
                sum += cell.gdop.unwrap_or_default();
            }
        }
        let solvable = counts[..3].iter().sum::<usize>();
        Self {
            spacing,
            solvable_fraction: solvable as f64 / total,
            mean_solvable_gdop: (solvable > 0).then(|| sum / solvable as f64),
            band_fractions: counts.map(|n| n as f64 / total),
            cells,
        }
    }
}

/// Evaluates GDOP on a regular grid over `volume`. Cells are computed in
/// parallel and returned in grid order.
pub fn gdop_map(constellation: &Constellation, volume: &Volume, spacing: f64, c: f64) -> Result<GdopGrid> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::config("gdop.spacing", format!("must be positive, got {spacing}")));
    }
    volume.validate()?;
    let cells = volume
        .grid(spacing)
        .into_par_iter()
        .map(|p| {
            let g = gdop(constellation, &p, c).ok();
            GdopCell {
                position: p,
                gdop: g,
                band: GdopBand::classify(g),
            }
        })
        .collect();
    Ok(GdopGrid::from_cells(spacing, cells))
}
