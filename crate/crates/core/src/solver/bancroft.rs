//! Closed-form pseudorange solutions.
//!
//! With `b = c * dt`, every observation satisfies
//! `<s_i, s_i> / 2 - <s_i, y> + <y, y> / 2 = 0` under the Lorentz product
//! `<u, v> = u1 v1 + u2 v2 + u3 v3 - u4 v4`, where `s_i = (speaker, P_i)`
//! and `y = (position, b)`. Eliminating the quadratic term leaves a scalar
//! quadratic, so an exactly determined system has up to two solutions.

use nalgebra::{DMatrix, DVector, Vector4};

use super::{Constellation, FixEstimate, Point3};

fn lorentz(u: &Vector4<f64>, v: &Vector4<f64>) -> f64 {
    u[0] * v[0] + u[1] * v[1] + u[2] * v[2] - u[3] * v[3]
}

/// Every `(position, clock_bias)` consistent with the pseudoranges, at most
/// two. With more than four speakers the linear step is a weighted least
/// squares fit. Roots implying a negative range to any speaker are dropped.
pub fn bancroft(constellation: &Constellation, ranges: &[f64], c: f64) -> Vec<FixEstimate> {
    let n = constellation.len();
    if ranges.len() != n || n < 4 {
        return Vec::new();
    }
    // Centering the positions helps conditioning. Centering the
    // pseudoranges as well would make the rows of a 4-speaker system sum to
    // zero.
    let center: Point3 = constellation.speakers().iter().sum::<Point3>() / n as f64;

    let mut b = DMatrix::zeros(n, 4);
    let mut a = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for (i, (s, p)) in constellation.speakers().iter().zip(ranges).enumerate() {
        let row = Vector4::new(s.x - center.x, s.y - center.y, s.z - center.z, *p);
        for k in 0..4 {
            b[(i, k)] = row[k];
        }
        a[i] = 0.5 * lorentz(&row, &row);
        w[i] = 1.0 / constellation.sigmas()[i];
    }
    // Row weighting, then B^+ via Householder QR.
    let bw = DMatrix::from_fn(n, 4, |i, k| b[(i, k)] * w[i]);
    let qr = bw.qr();
    let (q, r) = (qr.q(), qr.r());
    let solve = |rhs: &DVector<f64>| -> Option<Vector4<f64>> {
        let x = r.solve_upper_triangular(&(q.transpose() * rhs.component_mul(&w)))?;
        Some(Vector4::new(x[0], x[1], x[2], x[3]))
    };
    let (Some(u), Some(v)) = (solve(&DVector::from_element(n, 1.0)), solve(&a)) else {
        return Vec::new();
    };
    // Undo the Lorentz metric: B M y = a + lambda 1 gives M y = u lambda + v.
    let qa = lorentz(&u, &u);
    let qb = 2.0 * (lorentz(&u, &v) - 1.0);
    let qc = lorentz(&v, &v);
    let lambdas: Vec<f64> = if qa.abs() < 1e-12 * (qb.abs() + qc.abs()).max(f64::MIN_POSITIVE) {
        if qb == 0.0 {
            return Vec::new();
        }
        vec![-qc / qb]
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Vec::new();
        }
        let sq = disc.sqrt();
        // Numerically stable pair.
        let q = -0.5 * (qb + qb.signum() * sq);
        if q == 0.0 {
            vec![0.0]
        } else {
            vec![q / qa, qc / q]
        }
    };

    lambdas
        .into_iter()
        .filter_map(|l| {
            let m = u * l + v;
            let y = Vector4::new(m[0], m[1], m[2], -m[3]);
            let position = Point3::new(y[0] + center.x, y[1] + center.y, y[2] + center.z);
            let bias_m = y[3];
            let valid = constellation
                .speakers()
                .iter()
                .zip(ranges)
                .all(|(s, p)| p - bias_m >= -1e-6 * (1.0 + (s - position).norm()));
            (valid && position.iter().all(|v| v.is_finite()) && bias_m.is_finite())
                .then(|| FixEstimate::new(position, bias_m / c))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::forward_pseudoranges;
    use super::*;

    const C: f64 = 1_480.0;

    fn tank() -> Constellation {
        Constellation::with_uniform_sigma(
            vec![
                Point3::new(3.4, 0.0, 0.5),
                Point3::new(-1.7, 2.9, 2.5),
                Point3::new(-1.7, -2.9, 1.0),
                Point3::new(0.0, 0.2, 2.6),
            ],
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn truth_is_among_the_roots() {
        let k = tank();
        for (p, dt) in [
            (Point3::new(0.3, -0.2, 1.1), 0.0),
            (Point3::new(-2.0, 1.0, 0.4), 0.37),
            (Point3::new(1.5, 2.5, 2.2), -0.2),
        ] {
            let truth = FixEstimate::new(p, dt);
            let roots = bancroft(&k, &forward_pseudoranges(&k, &truth, C), C);
            assert!(!roots.is_empty() && roots.len() <= 2);
            assert!(
                roots
                    .iter()
                    .any(|r| (r.position - p).norm() < 1e-6 && (r.clock_bias - dt).abs() < 1e-9),
                "{roots:?}"
            );
        }
    }

    #[test]
    fn every_root_reproduces_the_data() {
        let k = tank();
        let truth = FixEstimate::new(Point3::new(0.0, -1.5, 2.0), 0.1);
        let pr = forward_pseudoranges(&k, &truth, C);
        for r in bancroft(&k, &pr, C) {
            let model = forward_pseudoranges(&k, &r, C);
            for (a, b) in model.iter().zip(&pr) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn overdetermined_recovers_truth() {
        let mut speakers = tank().speakers().to_vec();
        speakers.push(Point3::new(2.0, 2.0, 1.5));
        let k = Constellation::with_uniform_sigma(speakers, 0.05).unwrap();
        let truth = FixEstimate::new(Point3::new(0.5, 0.5, 1.0), 0.05);
        let roots = bancroft(&k, &forward_pseudoranges(&k, &truth, C), C);
        assert!(roots.iter().any(|r| (r.position - truth.position).norm() < 1e-6));
    }
}
