//! Closed-form least squares rigid alignment of paired point sets
//! (rotation plus translation, no scaling).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RigidFit {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// True when the centered covariance has rank below 2, leaving the
    /// rotation underdetermined (collinear or coincident points).
    pub degenerate: bool,
}

impl RigidFit {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [q.x, q.y, q.z]
    }
}

fn centroid(pts: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::new(p[0], p[1], p[2]);
    }
    c / pts.len() as f64
}

/// Fits R, T minimizing sum over pairs of |R s + T - t|^2. The rotation
/// is proper (det = +1): when the raw solution reflects, the axis of the
/// smallest singular value is negated.
pub fn fit_rigid(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<RigidFit> {
    if source.len() != target.len() {
        return Err(Error::Shape(format!(
            "rigid fit needs paired points, got {} source and {} target",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Shape(format!(
            "rigid fit needs at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let ds = Vector3::new(s[0], s[1], s[2]) - cs;
        let dt = Vector3::new(t[0], t[1], t[2]) - ct;
        h += ds * dt.transpose();
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rigid fit covariance is not finite".into()));
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Solve("SVD failed to produce U".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Solve("SVD failed to produce V^T".into()))?;
    let sig = svd.singular_values;
    let mut v = vt.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        // Singular values from nalgebra are sorted descending, so the
        // least constrained axis is column 2.
        let mut col = v.column_mut(2);
        col *= -1.0;
        rotation = v * u.transpose();
    }
    let degenerate = sig[1] <= 1e-12 * sig[0].max(f64::MIN_POSITIVE);
    let translation = ct - rotation * cs;
    Ok(RigidFit {
        rotation,
        translation,
        degenerate,
    })
}

/// Sum of squared residuals of a fit over the given pairs.
pub fn rigid_objective(fit: &RigidFit, source: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, t)| {
            let q = fit.apply(*s);
            (q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2) + (q[2] - t[2]).powi(2)
        })
        .sum()
}

/// Rotation from intrinsic x, y, z Euler angles in radians.
pub fn rotation_from_euler(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}
