//! Position and clock-bias estimation from pseudoranges.
//!
//! Each observation is modeled as `P_i = |s_i - r| + c * dt`. The solver
//! linearizes about the current estimate, whitens rows by the per-speaker
//! standard deviation and solves the normal equations, repeating until the
//! update is below tolerance (Gauss-Newton).
//!
//! The fourth state is carried in seconds while solving, but covariances
//! are reported in `(x, y, z, c*dt)` so every entry is in square meters.

mod bancroft;
mod gdop;

pub use bancroft::bancroft;
pub use gdop::{gdop, gdop_map, GdopBand, GdopCell, GdopGrid, Volume, GDOP_CUTOFF};

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::detector::PseudorangeSet;
use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Default per-speaker pseudorange standard deviation, meters.
pub const DEFAULT_SIGMA: f64 = 0.05;

/// Relative flatness below which a constellation counts as coplanar.
const COPLANAR_TOL: f64 = 1e-6;

/// Step halvings tried before an uphill step is accepted anyway.
const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    speakers: Vec<Point3>,
    sigmas: Vec<f64>,
}

impl Constellation {
    pub fn new(speakers: Vec<Point3>, sigmas: Vec<f64>) -> Result<Self> {
        if speakers.len() < 4 {
            return Err(Error::InvalidConstellation(format!(
                "need at least 4 speakers, got {}",
                speakers.len()
            )));
        }
        if sigmas.len() != speakers.len() {
            return Err(Error::InvalidConstellation(format!(
                "{} sigmas for {} speakers",
                sigmas.len(),
                speakers.len()
            )));
        }
        if let Some(i) = speakers.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidConstellation(format!("speaker {i} position is not finite")));
        }
        if let Some(i) = sigmas.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConstellation(format!(
                "sigma {i} must be positive, got {}",
                sigmas[i]
            )));
        }
        Ok(Self { speakers, sigmas })
    }

    pub fn with_uniform_sigma(speakers: Vec<Point3>, sigma: f64) -> Result<Self> {
        let n = speakers.len();
        Self::new(speakers, vec![sigma; n])
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn speakers(&self) -> &[Point3] {
        &self.speakers
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Ratio of the smallest to the largest singular value of the centered
    /// speaker coordinates; zero for exactly coplanar speakers.
    pub fn flatness(&self) -> f64 {
        let n = self.speakers.len();
        let mean = self.speakers.iter().sum::<Point3>() / n as f64;
        let centered = DMatrix::from_fn(n, 3, |i, j| self.speakers[i][j] - mean[j]);
        let sv = centered.singular_values();
        let max = sv.max();
        if max == 0.0 {
            0.0
        } else {
            sv.min() / max
        }
    }

    /// Coplanar speakers cannot tell a receiver from its mirror image across
    /// their plane.
    pub fn is_coplanar(&self) -> bool {
        self.flatness() < COPLANAR_TOL
    }
}

/// Receiver position (meters) and clock bias (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixEstimate {
    pub position: Point3,
    pub clock_bias: f64,
}

impl FixEstimate {
    pub fn new(position: Point3, clock_bias: f64) -> Self {
        Self {
            position,
            clock_bias,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.clock_bias.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Initial position estimate, meters.
    pub init: [f64; 3],
    /// Initial clock bias, seconds.
    pub init_bias: f64,
    /// Convergence threshold on the update norm, meters.
    pub tol: f64,
    pub max_iter: usize,
    /// Reciprocal condition of the normal matrix below which the geometry is
    /// declared unsolvable.
    pub rcond_min: f64,
    /// Fixes whose GDOP exceeds this are rejected as out of bounds.
    pub gdop_cutoff: Option<f64>,
    /// Estimates within this distance outside the volume are still accepted,
    /// meters.
    pub volume_margin: f64,
    /// Reject a fix when a second exact solution of the pseudorange
    /// equations also lies in the volume.
    pub reject_ambiguous: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            init: [0.0, 0.0, 1.0],
            init_bias: 0.0,
            tol: 1e-6,
            max_iter: 25,
            rcond_min: 1e-12,
            gdop_cutoff: Some(GDOP_CUTOFF),
            volume_margin: 0.25,
            reject_ambiguous: false,
        }
    }
}

impl SolverSettings {
    pub fn initial_estimate(&self) -> FixEstimate {
        FixEstimate::new(Point3::from(self.init), self.init_bias)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::config("solver.tol", format!("must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be at least 1"));
        }
        if !self.init.iter().all(|v| v.is_finite()) || !self.init_bias.is_finite() {
            return Err(Error::config("solver.init", "must be finite"));
        }
        if !(self.volume_margin >= 0.0 && self.volume_margin.is_finite()) {
            return Err(Error::config(
                "solver.volume_margin",
                format!("must be non-negative, got {}", self.volume_margin),
            ));
        }
        if let Some(g) = self.gdop_cutoff {
            if !(g > 0.0) {
                return Err(Error::config("solver.gdop_cutoff", format!("must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionFix {
    pub estimate: FixEstimate,
    pub iterations: usize,
    /// Norm of the last update in meters, the clock part as `c * d(dt)`.
    pub final_update_norm: f64,
    /// Observed minus modeled pseudorange per speaker, meters.
    pub residuals: Vec<f64>,
    /// Model covariance `(A_w^T A_w)^-1` of `(x, y, z, c*dt)`, square meters.
    pub covariance: Matrix4<f64>,
    pub converged: bool,
    /// GDOP of the constellation at the estimate.
    pub gdop: f64,
    /// The speakers are coplanar, so a mirror solution exists.
    pub degenerate_geometry: bool,
}

/// Euclidean distance.
pub fn predict_range(speaker: &Point3, receiver: &Point3) -> f64 {
    (speaker - receiver).norm()
}

/// `range + c * dt`.
pub fn model_pseudorange(range: f64, dt: f64, c: f64) -> f64 {
    range + c * dt
}

/// Pseudoranges a receiver at `truth` would observe.
pub fn forward_pseudoranges(constellation: &Constellation, truth: &FixEstimate, c: f64) -> Vec<f64> {
    constellation
        .speakers()
        .iter()
        .map(|s| model_pseudorange(predict_range(s, &truth.position), truth.clock_bias, c))
        .collect()
}

/// Design matrix and prediction error about `estimate`.
///
/// Row `i` is `(-(x_i - x0)/R0, -(y_i - y0)/R0, -(z_i - z0)/R0, c)` and
/// `b_i = P_i - (R0_i + c * dt0)`, which reduces to `P_i - R0_i` for a zero
/// initial bias.
pub fn linearize(
    constellation: &Constellation,
    estimate: &FixEstimate,
    pseudoranges: &[f64],
    c: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if pseudoranges.len() != constellation.len() {
        return Err(Error::InvalidConstellation(format!(
            "{} pseudoranges for {} speakers",
            pseudoranges.len(),
            constellation.len()
        )));
    }
    let n = constellation.len();
    let mut a = DMatrix::zeros(n, 4);
    let mut b = DVector::zeros(n);
    for (i, s) in constellation.speakers().iter().enumerate() {
        let d = s - estimate.position;
        let r0 = d.norm();
        if r0 == 0.0 {
            return Err(Error::SingularLinearization { speaker: i });
        }
        for k in 0..3 {
            a[(i, k)] = -d[k] / r0;
        }
        a[(i, 3)] = c;
        b[i] = pseudoranges[i] - model_pseudorange(r0, estimate.clock_bias, c);
    }
    Ok((a, b))
}

/// Scales row `i` of `a` and `b` by `1 / sigma_i`.
pub fn whiten(a: &DMatrix<f64>, b: &DVector<f64>, sigmas: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if sigmas.len() != a.nrows() || b.len() != a.nrows() {
        return Err(Error::InvalidConstellation(format!(
            "{} sigmas for {} rows",
            sigmas.len(),
            a.nrows()
        )));
    }
    if let Some(i) = sigmas.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidConstellation(format!(
            "sigma {i} must be positive, got {}",
            sigmas[i]
        )));
    }
    let mut aw = a.clone();
    let mut bw = b.clone();
    for (i, s) in sigmas.iter().enumerate() {
        aw.row_mut(i).scale_mut(1.0 / s);
        bw[i] /= s;
    }
    Ok((aw, bw))
}

/// Normal matrix with the clock column in meters (`c*dt` parametrization)
/// and its reciprocal condition number.
fn scaled_normal(a: &DMatrix<f64>, c: f64) -> (Matrix4<f64>, f64) {
    let mut scaled = a.clone();
    scaled.column_mut(3).scale_mut(1.0 / c);
    let n: Matrix4<f64> = (scaled.transpose() * &scaled).fixed_view::<4, 4>(0, 0).into_owned();
    let eig = SymmetricEigen::new(n).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let rcond = if hi > 0.0 { lo.max(0.0) / hi } else { 0.0 };
    (n, rcond)
}

/// One least-squares step, `(dx, dy, dz, d(dt))`.
fn lsq_step(aw: &DMatrix<f64>, bw: &DVector<f64>, c: f64, rcond_min: f64) -> Result<Vector4<f64>> {
    let (n, rcond) = scaled_normal(aw, c);
    if !(rcond >= rcond_min) {
        return Err(Error::Unsolvable {
            reason: format!("normal matrix reciprocal condition {rcond:.3e} below {rcond_min:.0e}"),
        });
    }
    let cov = n.try_inverse().ok_or_else(|| Error::Unsolvable {
        reason: "normal matrix is singular".into(),
    })?;
    let mut atb: Vector4<f64> = (aw.transpose() * bw).fixed_rows::<4>(0).into_owned();
    atb[3] /= c;
    let mut dx = cov * atb;
    dx[3] /= c;
    Ok(dx)
}

fn weighted_cost(constellation: &Constellation, est: &FixEstimate, ranges: &[f64], c: f64) -> f64 {
    forward_pseudoranges(constellation, est, c)
        .iter()
        .zip(ranges)
        .zip(constellation.sigmas())
        .map(|((m, p), s)| ((p - m) / s).powi(2))
        .sum()
}

/// Iterative weighted least squares on one epoch of pseudoranges. Each
/// Gauss-Newton step is halved until the weighted cost does not increase.
///
/// Fails with [`Error::Unsolvable`] when the normal matrix is (near)
/// singular and with [`Error::OutOfBounds`] when the GDOP at the solution
/// exceeds `settings.gdop_cutoff`. A run that exhausts `max_iter` returns
/// the lowest-cost iterate with `converged == false`.
pub fn solve_fix(
    pseudoranges: &PseudorangeSet,
    constellation: &Constellation,
    init: &FixEstimate,
    settings: &SolverSettings,
) -> Result<PositionFix> {
    solve_ranges(&pseudoranges.ranges, pseudoranges.c, constellation, init, settings)
}

pub fn solve_ranges(
    ranges: &[f64],
    c: f64,
    constellation: &Constellation,
    init: &FixEstimate,
    settings: &SolverSettings,
) -> Result<PositionFix> {
    if ranges.len() < 4 {
        return Err(Error::InvalidConstellation(format!(
            "need at least 4 pseudoranges, got {}",
            ranges.len()
        )));
    }
    if !init.is_finite() {
        return Err(Error::Unsolvable {
            reason: "initial estimate is not finite".into(),
        });
    }

    let mut est = *init;
    let mut best = (weighted_cost(constellation, &est, ranges, c), est);
    let mut iterations = 0;
    let mut update_norm = f64::INFINITY;
    let mut converged = false;

    while iterations < settings.max_iter {
        iterations += 1;
        let (a, b) = linearize(constellation, &est, ranges, c)?;
        let (aw, bw) = whiten(&a, &b, constellation.sigmas())?;
        let full = lsq_step(&aw, &bw, c, settings.rcond_min)?;

        // Halve the step until the weighted cost does not increase.
        let current = weighted_cost(constellation, &est, ranges, c);
        let mut dx = full;
        let mut next = est;
        let mut cost = f64::INFINITY;
        for _ in 0..=MAX_HALVINGS {
            next = FixEstimate::new(est.position + dx.fixed_rows::<3>(0), est.clock_bias + dx[3]);
            cost = weighted_cost(constellation, &next, ranges, c);
            if cost <= current {
                break;
            }
            dx *= 0.5;
        }
        if !next.is_finite() {
            return Err(Error::Unsolvable {
                reason: "iteration diverged".into(),
            });
        }
        est = next;
        update_norm = (dx.fixed_rows::<3>(0).norm_squared() + (c * dx[3]).powi(2)).sqrt();

        if cost <= best.0 {
            best = (cost, est);
        }
        if update_norm < settings.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        est = best.1;
    }

    let (a, b) = linearize(constellation, &est, ranges, c)?;
    let (aw, _) = whiten(&a, &b, constellation.sigmas())?;
    let (normal, rcond) = scaled_normal(&aw, c);
    let covariance = normal
        .try_inverse()
        .filter(|_| rcond >= settings.rcond_min)
        .ok_or_else(|| Error::Unsolvable {
            reason: format!("normal matrix reciprocal condition {rcond:.3e} at the solution"),
        })?;

    let g = gdop(constellation, &est.position, c).unwrap_or(f64::INFINITY);
    if let Some(cutoff) = settings.gdop_cutoff {
        if !(g <= cutoff) {
            return Err(Error::OutOfBounds { gdop: g, cutoff });
        }
    }

    Ok(PositionFix {
        estimate: est,
        iterations,
        final_update_norm: update_norm,
        residuals: b.iter().copied().collect(),
        covariance,
        converged,
        gdop: g,
        degenerate_geometry: constellation.is_coplanar(),
    })
}
