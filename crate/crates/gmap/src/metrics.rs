//! Evaluation of generated against ground-truth shapes: rigid
//! alignment (closed form or ICP), then per-vertex distance in mm and
//! per-normal angle in degrees.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rigid::fit_rigid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMethod {
    ProcrustesKnownCorrespondence,
    IcpNearestNeighbor,
}

impl AlignmentMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlignmentMethod::ProcrustesKnownCorrespondence => "procrustes_known_correspondence",
            AlignmentMethod::IcpNearestNeighbor => "icp_nearest_neighbor",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rms_before: f64,
    pub rms_after: f64,
    pub method: AlignmentMethod,
    /// Covariance was rank-deficient somewhere along the way.
    pub degenerate: bool,
    /// Per-iteration rms; a single entry for the closed-form path.
    pub rms_history: Vec<f64>,
}

impl AlignmentResult {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [q[0], q[1], q[2]]
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|&p| self.apply(p)).collect()
    }
}

fn rms(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
        })
        .sum();
    (sum / a.len() as f64).sqrt()
}

/// Least-squares rigid alignment of `x` onto `y` with known
/// correspondences (row i of x matches row i of y).
pub fn procrustes_align(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<AlignmentResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} points against {}",
            x.len(),
            y.len()
        )));
    }
    let fit = fit_rigid(x, y)?;
    let moved: Vec<[f64; 3]> = x.iter().map(|&p| fit.apply(p)).collect();
    let after = rms(&moved, y);
    Ok(AlignmentResult {
        rotation: fit.rotation,
        translation: fit.translation,
        rms_before: rms(x, y),
        rms_after: after,
        method: AlignmentMethod::ProcrustesKnownCorrespondence,
        degenerate: fit.degenerate,
        rms_history: vec![after],
    })
}

fn nearest(p: [f64; 3], cloud: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, q) in cloud.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

pub const ICP_RELATIVE_IMPROVEMENT: f64 = 1e-8;

/// Alternates brute-force nearest-neighbor matching with closed-form
/// rigid fits. The rms sequence never increases; iteration stops when
/// the relative improvement drops below 1e-8 or `max_iter` is reached.
pub fn icp_align(x: &[[f64; 3]], y: &[[f64; 3]], max_iter: usize) -> Result<AlignmentResult> {
    if x.len() < 3 || y.len() < 3 {
        return Err(Error::Shape(format!(
            "icp needs at least 3 points per cloud, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut rotation = Matrix3::identity();
    let mut translation = Vector3::zeros();
    let mut degenerate = false;
    let matched_at_identity: Vec<[f64; 3]> = x.iter().map(|&p| y[nearest(p, y)]).collect();
    let rms_before = rms(x, &matched_at_identity);
    let mut history = Vec::new();
    let mut prev = rms_before;
    for _ in 0..max_iter {
        let moved: Vec<[f64; 3]> = x
            .iter()
            .map(|&p| {
                let q = rotation * Vector3::new(p[0], p[1], p[2]) + translation;
                [q[0], q[1], q[2]]
            })
            .collect();
        let matched: Vec<[f64; 3]> = moved.iter().map(|&p| y[nearest(p, y)]).collect();
        let fit = fit_rigid(x, &matched)?;
        degenerate |= fit.degenerate;
        rotation = fit.rotation;
        translation = fit.translation;
        let refit: Vec<[f64; 3]> = x.iter().map(|&p| fit.apply(p)).collect();
        let cur = rms(&refit, &matched);
        history.push(cur);
        if prev - cur < ICP_RELATIVE_IMPROVEMENT * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = cur;
    }
    let rms_after = history.last().copied().unwrap_or(rms_before);
    Ok(AlignmentResult {
        rotation,
        translation,
        rms_before,
        rms_after,
        method: AlignmentMethod::IcpNearestNeighbor,
        degenerate,
        rms_history: history,
    })
}

/// Mean per-vertex Euclidean distance in mm, or the mean squared
/// distance when `squared` is set.
pub fn mse_v(x_aligned: &[[f64; 3]], y: &[[f64; 3]], squared: bool) -> Result<f64> {
    if x_aligned.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} vertices against {}",
            x_aligned.len(),
            y.len()
        )));
    }
    if x_aligned.is_empty() {
        return Err(Error::Shape("empty vertex sets".into()));
    }
    let sum: f64 = x_aligned
        .iter()
        .zip(y)
        .map(|(p, q)| {
            let d2 =
                (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .sum();
    Ok(sum / x_aligned.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalAngleStats {
    /// Mean angle in degrees (or mean squared angle when requested).
    pub value: f64,
    /// Pairs used after skipping zero-length normals.
    pub used: usize,
    pub skipped: usize,
}

const ZERO_NORMAL_EPS: f64 = 1e-12;

/// Mean angle between corresponding normals in degrees. Inputs are
/// re-normalized; pairs with a zero-length normal are skipped and
/// counted.
pub fn mse_n(nx: &[[f64; 3]], ny: &[[f64; 3]], squared: bool) -> Result<NormalAngleStats> {
    if nx.len() != ny.len() {
        return Err(Error::Shape(format!(
            "{} normals against {}",
            nx.len(),
            ny.len()
        )));
    }
    if nx.is_empty() {
        return Err(Error::Shape("empty normal sets".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (a, b) in nx.iter().zip(ny) {
        let la = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let lb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        if la < ZERO_NORMAL_EPS || lb < ZERO_NORMAL_EPS {
            skipped += 1;
            continue;
        }
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (la * lb);
        let deg = dot.clamp(-1.0, 1.0).acos().to_degrees();
        sum += if squared { deg * deg } else { deg };
        used += 1;
    }
    if used == 0 {
        return Err(Error::Shape("all normal pairs had zero length".into()));
    }
    Ok(NormalAngleStats {
        value: sum / used as f64,
        used,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid::rotation_from_euler;
    use crate::synth;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn transform(pts: &[[f64; 3]], r: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<[f64; 3]> {
        pts.iter()
            .map(|&p| {
                let q = r * Vector3::new(p[0], p[1], p[2]) + t;
                [q[0], q[1], q[2]]
            })
            .collect()
    }

    #[test]
    fn procrustes_of_identical_clouds_is_identity() {
        let x = random_cloud(30, 1);
        let a = procrustes_align(&x, &x).unwrap();
        assert!((a.rotation - Matrix3::identity()).abs().max() < 1e-10);
        assert!(a.translation.abs().max() < 1e-10);
        assert!(a.rms_after < 1e-12);
        assert!(!a.degenerate);
    }

    #[test]
    fn procrustes_recovers_random_rigid_motions() {
        let x = random_cloud(40, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = rotation_from_euler(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let t = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let y = transform(&x, &r, &t);
            let a = procrustes_align(&x, &y).unwrap();
            assert!((a.rotation - r).abs().max() < 1e-8);
            assert!((a.translation - t).abs().max() < 1e-8);
            assert!(a.rms_after < 1e-8);
            assert!(a.rms_after <= a.rms_before + 1e-12);
        }
    }

    #[test]
    fn procrustes_rotation_stays_orthonormal() {
        let x = random_cloud(25, 7);
        let mut y = random_cloud(25, 8);
        for p in &mut y {
            p[2] += 3.0;
        }
        let a = procrustes_align(&x, &y).unwrap();
        let should_be_i = a.rotation.transpose() * a.rotation;
        assert!((should_be_i - Matrix3::identity()).abs().max() < 1e-9);
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_beats_random_restarts_on_noisy_data() {
        let x = random_cloud(40, 11);
        let r0 = rotation_from_euler(0.4, -0.2, 0.9);
        let t0 = Vector3::new(1.0, -2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y: Vec<[f64; 3]> = transform(&x, &r0, &t0)
            .into_iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-0.05..0.05),
                    p[1] + rng.gen_range(-0.05..0.05),
                    p[2] + rng.gen_range(-0.05..0.05),
                ]
            })
            .collect();
        let a = procrustes_align(&x, &y).unwrap();
        let objective = |r: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
            transform(&x, r, t)
                .iter()
                .zip(&y)
                .map(|(p, q)| {
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                })
                .sum()
        };
        let best = objective(&a.rotation, &a.translation);
        for _ in 0..10_000 {
            let scale = if rng.gen_bool(0.5) { 1e-3 } else { 0.3 };
            let dr = rotation_from_euler(
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
            );
            let dt = Vector3::new(
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
            );
            let r = dr * a.rotation;
            let t = a.translation + dt;
            assert!(objective(&r, &t) >= best - 1e-12);
        }
    }

    #[test]
    fn icp_on_identical_clouds_stops_immediately() {
        let x = random_cloud(50, 20);
        let a = icp_align(&x, &x, 50).unwrap();
        assert_eq!(a.rms_history.len(), 1);
        assert!(a.rms_after < 1e-12);
        assert!((a.rotation - Matrix3::identity()).abs().max() < 1e-10);
    }

    #[test]
    fn icp_recovers_small_rigid_perturbations() {
        let sphere = synth::icosphere(2);
        let x: Vec<[f64; 3]> = sphere.vertices().to_vec();
        let r0 = rotation_from_euler(0.05, -0.07, 0.04);
        let t0 = Vector3::new(0.02, -0.01, 0.03);
        let y = transform(&x, &r0, &t0);
        let a = icp_align(&x, &y, 50).unwrap();
        assert!(a.rms_after < 1e-6, "rms {}", a.rms_after);
        assert!((a.rotation - r0).abs().max() < 1e-4);
        assert!((a.translation - t0).abs().max() < 1e-4);
    }

    #[test]
    fn icp_rms_never_increases() {
        let x = random_cloud(60, 31);
        let y = random_cloud(80, 32);
        let a = icp_align(&x, &y, 40).unwrap();
        for w in a.rms_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(a.rms_after <= a.rms_before + 1e-12);
    }

    #[test]
    fn icp_agrees_with_procrustes_when_matching_is_trivial() {
        let sphere = synth::icosphere(1);
        let x: Vec<[f64; 3]> = sphere.vertices().to_vec();
        let r0 = rotation_from_euler(0.03, 0.02, -0.04);
        let t0 = Vector3::new(0.01, 0.02, -0.01);
        let y = transform(&x, &r0, &t0);
        let icp = icp_align(&x, &y, 50).unwrap();
        let pro = procrustes_align(&x, &y).unwrap();
        assert!((icp.rotation - pro.rotation).abs().max() < 1e-9);
        assert!((icp.translation - pro.translation).abs().max() < 1e-9);
    }

    #[test]
    fn too_small_clouds_rejected() {
        let x = random_cloud(2, 40);
        assert!(procrustes_align(&x, &x).is_err());
        assert!(icp_align(&x, &x, 10).is_err());
    }

    #[test]
    fn vertex_error_definitions() {
        let x = random_cloud(10, 50);
        assert_eq!(mse_v(&x, &x, false).unwrap(), 0.0);
        let y: Vec<[f64; 3]> = x.iter().map(|p| [p[0] + 0.84, p[1], p[2]]).collect();
        assert!((mse_v(&x, &y, false).unwrap() - 0.84).abs() < 1e-12);
        assert!((mse_v(&x, &y, true).unwrap() - 0.84 * 0.84).abs() < 1e-12);
        assert!(mse_v(&x, &y[..5], false).is_err());
    }

    #[test]
    fn vertex_error_matches_loop_oracle() {
        let x = random_cloud(33, 60);
        let y = random_cloud(33, 61);
        let mut acc = 0.0;
        for i in 0..33 {
            let mut d2 = 0.0;
            for c in 0..3 {
                d2 += (x[i][c] - y[i][c]) * (x[i][c] - y[i][c]);
            }
            acc += d2.sqrt();
        }
        assert!((mse_v(&x, &y, false).unwrap() - acc / 33.0).abs() < 1e-12);
    }

    #[test]
    fn normal_angle_definitions() {
        let n = vec![[0.0, 0.0, 1.0]; 10];
        assert_eq!(mse_n(&n, &n, false).unwrap().value, 0.0);
        let ortho = vec![[1.0, 0.0, 0.0]; 10];
        assert!((mse_n(&n, &ortho, false).unwrap().value - 90.0).abs() < 1e-9);
        let mut one_flipped = n.clone();
        one_flipped[4] = [0.0, 0.0, -1.0];
        let stats = mse_n(&n, &one_flipped, false).unwrap();
        assert!((stats.value - 18.0).abs() < 1e-9);
        let sq = mse_n(&n, &one_flipped, true).unwrap();
        assert!((sq.value - 3240.0).abs() < 1e-6);
    }

    #[test]
    fn zero_normals_skipped_and_counted() {
        let a = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let stats = mse_n(&a, &b, false).unwrap();
        assert_eq!(stats.skipped, 1);
        assert_eq!(stats.used, 2);
        assert_eq!(stats.value, 0.0);
        let zeros = vec![[0.0; 3]; 3];
        assert!(mse_n(&zeros, &b, false).is_err());
    }

    #[test]
    fn non_unit_normals_renormalized() {
        let a = vec![[0.0, 0.0, 2.0], [3.0, 0.0, 0.0], [0.0, 5.0, 0.0]];
        let b = vec![[0.0, 0.0, 0.5], [0.0, 7.0, 0.0], [0.0, 0.1, 0.0]];
        let stats = mse_n(&a, &b, false).unwrap();
        assert!((stats.value - 30.0).abs() < 1e-9);
    }

    #[test]
    fn aligned_error_is_rigid_invariant() {
        let x = random_cloud(45, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let y: Vec<[f64; 3]> = x
            .iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-0.1..0.1),
                    p[1] + rng.gen_range(-0.1..0.1),
                    p[2] + rng.gen_range(-0.1..0.1),
                ]
            })
            .collect();
        let a = procrustes_align(&x, &y).unwrap();
        let base = mse_v(&a.apply_all(&x), &y, false).unwrap();
        let r = rotation_from_euler(1.1, -0.6, 0.3);
        let t = Vector3::new(4.0, -1.0, 2.0);
        let xm = transform(&x, &r, &t);
        let ym = transform(&y, &r, &t);
        let am = procrustes_align(&xm, &ym).unwrap();
        let moved = mse_v(&am.apply_all(&xm), &ym, false).unwrap();
        assert!((base - moved).abs() < 1e-8, "{base} vs {moved}");
    }
}
