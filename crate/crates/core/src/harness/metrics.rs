//! Trajectory error after similarity alignment to ground truth.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("only {0} matched timestamps, need at least 3")]
    InsufficientOverlap(usize),
    #[error("degenerate trajectory")]
    Degenerate,
}

/// `y ≈ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares similarity taking `x` onto `y` (Umeyama).
pub fn umeyama(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<Sim3, MetricsError> {
    let n = x.len().min(y.len());
    if n < 3 {
        return Err(MetricsError::InsufficientOverlap(n));
    }
    let nf = n as f64;
    let mx: Vector3<f64> = x[..n].iter().sum::<Vector3<f64>>() / nf;
    let my: Vector3<f64> = y[..n].iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        cov += db * da.transpose();
        var_x += da.norm_squared();
    }
    cov /= nf;
    var_x /= nf;
    if !(var_x > 0.0) {
        return Err(MetricsError::Degenerate);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(MetricsError::Degenerate)?, svd.v_t.ok_or(MetricsError::Degenerate)?);
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x;
    let translation = my - scale * rotation * mx;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMetrics {
    pub matched: usize,
    pub alignment: Sim3,
    /// RMSE of aligned positions.
    pub ate_rmse: f64,
    /// RMS disagreement between aligning on the first and on the last
    /// segment, evaluated over the whole trajectory.
    pub alignment_error: f64,
    /// `ate_rmse` per unit of ground-truth path length.
    pub drift_per_meter: f64,
    pub path_length: f64,
    /// Largest distance between two ground-truth positions.
    pub extent: f64,
}

/// Pairs estimated and ground-truth positions with equal timestamps.
pub fn associate(
    est: &[(f64, Vector3<f64>)],
    gt: &[(f64, Vector3<f64>)],
    tolerance: f64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut j = 0;
    for (t, p) in est {
        while j < gt.len() && gt[j].0 < t - tolerance {
            j += 1;
        }
        if j < gt.len() && (gt[j].0 - t).abs() <= tolerance {
            a.push(*p);
            b.push(gt[j].1);
        }
    }
    (a, b)
}

fn rmse(x: &[Vector3<f64>], y: &[Vector3<f64>], sim: &Sim3) -> f64 {
    let se: f64 = x.iter().zip(y).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    (se / x.len() as f64).sqrt()
}

/// Sim(3)-aligned error of `est` against `gt`, both `(timestamp, position)`
/// sorted by time.
pub fn compute_alignment_error(
    est: &[(f64, Vector3<f64>)],
    gt: &[(f64, Vector3<f64>)],
) -> Result<AlignmentMetrics, MetricsError> {
    let (x, y) = associate(est, gt, 1e-4);
    let n = x.len();
    if n < 3 {
        return Err(MetricsError::InsufficientOverlap(n));
    }
    let alignment = umeyama(&x, &y)?;
    let ate_rmse = rmse(&x, &y, &alignment);
    let seg = (n / 5).max(3).min(n);
    let start = umeyama(&x[..seg], &y[..seg]);
    let end = umeyama(&x[n - seg..], &y[n - seg..]);
    let alignment_error = match (start, end) {
        (Ok(s), Ok(e)) => {
            let se: f64 = x.iter().map(|p| (s.apply(p) - e.apply(p)).norm_squared()).sum();
            (se / n as f64).sqrt()
        }
        // collinear or static segments cannot be aligned on their own
        _ => ate_rmse,
    };
    let path_length: f64 = y.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let mut extent: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            extent = extent.max((y[i] - y[j]).norm());
        }
    }
    Ok(AlignmentMetrics {
        matched: n,
        alignment,
        ate_rmse,
        alignment_error,
        drift_per_meter: if path_length > 0.0 { ate_rmse / path_length } else { f64::INFINITY },
        path_length,
        extent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn helix(n: usize) -> Vec<(f64, Vector3<f64>)> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.05;
                (t, Vector3::new(t.cos() * 2.0, t.sin() * 2.0, 0.3 * t))
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = helix(50);
        let m = compute_alignment_error(&gt, &gt).unwrap();
        assert!(m.ate_rmse < 1e-12);
        assert!(m.alignment_error < 1e-9, "{}", m.alignment_error);
        assert!((m.alignment.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_absorbed() {
        let gt = helix(60);
        let r = Rotation3::from_euler_angles(0.3, -0.5, 1.2);
        let est: Vec<_> = gt
            .iter()
            .map(|(t, p)| (*t, 2.0 * (r * p) + Vector3::new(1.0, -4.0, 0.5)))
            .collect();
        let m = compute_alignment_error(&est, &gt).unwrap();
        assert!(m.ate_rmse < 1e-9, "{}", m.ate_rmse);
        assert!((m.alignment.scale - 0.5).abs() < 1e-9);
    }

    #[test]
    fn isotropic_noise_gives_sigma_sqrt3() {
        let gt = helix(1000);
        let sigma = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, sigma).unwrap();
        let est: Vec<_> = gt
            .iter()
            .map(|(t, p)| {
                let n = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                (*t, p + n)
            })
            .collect();
        let m = compute_alignment_error(&est, &gt).unwrap();
        let expected = sigma * 3f64.sqrt();
        assert!((m.ate_rmse - expected).abs() < 0.1 * expected, "{}", m.ate_rmse);
    }

    #[test]
    fn too_few_matches() {
        let gt = helix(10);
        let est: Vec<_> = gt.iter().map(|(t, p)| (t + 100.0, *p)).collect();
        assert_eq!(
            compute_alignment_error(&est, &gt).unwrap_err(),
            MetricsError::InsufficientOverlap(0)
        );
    }
}
