//! Depth-only refinement of marginalized corners from their matches in live
//! keyframes, with all poses held fixed.

use nalgebra::Vector2;

use crate::geometry::{bearing, projection_point_jacobian, CameraIntrinsics, Pose};
use crate::residuals::{huber_norm, huber_weight};

fn reprojection(
    c: &CameraIntrinsics,
    p: &Vector2<f64>,
    idepth: f64,
    host_to_target: &Pose,
    obs: &Vector2<f64>,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let b = bearing(c, p);
    let x = host_to_target.rotation * b / idepth + host_to_target.translation;
    if !(x.z > 1e-4) {
        return None;
    }
    let pix = Vector2::new(c.fu * x.x / x.z + c.cu, c.fv * x.y / x.z + c.cv);
    let dx = -(host_to_target.rotation * b) / (idepth * idepth);
    Some((pix - obs, projection_point_jacobian(c, &x) * dx))
}

fn energy(
    c: &CameraIntrinsics,
    p: &Vector2<f64>,
    idepth: f64,
    observations: &[(Pose, Vector2<f64>)],
    gamma: f64,
) -> Option<f64> {
    if !(idepth > 0.0) {
        return None;
    }
    let mut e = 0.0;
    for (t, obs) in observations {
        let (r, _) = reprojection(c, p, idepth, t, obs)?;
        e += huber_norm(r.norm_squared(), gamma);
    }
    Some(e)
}

/// Observations whose residual exceeds this multiple of the Huber threshold
/// after the first solve are dropped and the depth is solved again.
const REJECTION_FACTOR: f64 = 3.0;

fn gauss_newton(
    c: &CameraIntrinsics,
    p: &Vector2<f64>,
    idepth: f64,
    observations: &[(Pose, Vector2<f64>)],
    gamma: f64,
    iterations: usize,
) -> Option<f64> {
    let mut d = idepth;
    for _ in 0..iterations {
        let (mut h, mut b) = (0.0, 0.0);
        for (t, obs) in observations {
            let (r, j) = reprojection(c, p, d, t, obs)?;
            let w = huber_weight(r.norm_squared(), gamma);
            h += w * j.norm_squared();
            b += w * j.dot(&r);
        }
        if !(h > 0.0) {
            break;
        }
        let mut step = -b / h;
        // halve steps that would cross to negative depth
        while d + step <= 0.0 {
            step *= 0.5;
            if step.abs() < 1e-15 {
                break;
            }
        }
        d += step;
        if step.abs() < 1e-12 * d.abs().max(1.0) {
            break;
        }
    }
    (d > 0.0).then_some(d)
}

/// Gauss-Newton on the inverse depth of a host pixel `p` observed at `obs`
/// through each `host_to_target` transform, Huber-weighted, followed by one
/// re-solve without gross outliers. Returns the refined depth, or `None`
/// when there are fewer than two observations or the final energy over all
/// observations is not lower than the initial one.
pub fn refine_idepth(
    c: &CameraIntrinsics,
    p: &Vector2<f64>,
    idepth: f64,
    observations: &[(Pose, Vector2<f64>)],
    gamma: f64,
    iterations: usize,
) -> Option<f64> {
    if observations.len() < 2 {
        return None;
    }
    let initial = energy(c, p, idepth, observations, gamma)?;
    let mut d = gauss_newton(c, p, idepth, observations, gamma, iterations)?;
    let limit = (REJECTION_FACTOR * gamma).powi(2);
    let inliers: Vec<(Pose, Vector2<f64>)> = observations
        .iter()
        .filter(|(t, o)| reprojection(c, p, d, t, o).is_some_and(|(r, _)| r.norm_squared() <= limit))
        .copied()
        .collect();
    if inliers.len() >= 2 && inliers.len() < observations.len() {
        d = gauss_newton(c, p, d, &inliers, gamma, iterations)?;
    }
    let last = energy(c, p, d, observations, gamma)?;
    (last <= initial).then_some(d)
}
