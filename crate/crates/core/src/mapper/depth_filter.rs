//! Inverse-depth filtering of candidate points by epipolar search.

use nalgebra::Vector2;

use crate::features::{pattern_offset, Patch, PATTERN_LEN};
use crate::geometry::{warp_unchecked, AffineBrightness, CameraIntrinsics, Pose};
use crate::image_pyramid::ImagePlane;

/// Gaussian belief over a point's inverse depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthHypothesis {
    pub idepth: f64,
    pub idepth_variance: f64,
    pub num_observations: u32,
}

impl DepthHypothesis {
    /// Product of Gaussians with an observation `(idepth, variance)`.
    pub fn fuse(&mut self, idepth: f64, variance: f64) {
        let info = 1.0 / self.idepth_variance + 1.0 / variance;
        let mean = (self.idepth / self.idepth_variance + idepth / variance) / info;
        self.idepth = mean;
        self.idepth_variance = 1.0 / info;
        self.num_observations += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub b_min: f64,
    pub max_steps: usize,
    /// Per-pixel intensity noise variance assumed by the observation model.
    pub noise_variance: f64,
    pub observation_variance_floor: f64,
    pub outlier_energy_factor: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            b_min: 1e-4,
            max_steps: 100,
            noise_variance: 16.0,
            observation_variance_floor: 1e-6,
            outlier_energy_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchOutcome {
    /// An observation to fuse.
    Observed { idepth: f64, variance: f64 },
    /// Not enough parallax or no interior minimum; belief unchanged.
    Skipped,
    /// The point no longer matches or left the image.
    Outlier,
}

/// Host-side description of a candidate.
#[derive(Debug, Clone, Copy)]
pub struct SearchPoint<'a> {
    pub p: Vector2<f64>,
    pub patch: &'a Patch,
    pub affine: AffineBrightness,
    pub belief: DepthHypothesis,
}

fn pattern_ssd(
    point: &SearchPoint,
    target: &ImagePlane,
    host_to_target: &Pose,
    affine: &AffineBrightness,
    c: &CameraIntrinsics,
    idepth: f64,
) -> f64 {
    let s = point.affine.transfer_gain(affine);
    let mut e = 0.0;
    for k in 0..PATTERN_LEN {
        let q = point.p + pattern_offset(k);
        match warp_unchecked(c, host_to_target, &q, idepth) {
            Ok(w) if target.in_bounds(&w.pixel) => {
                let r = (target.intensity_unchecked(&w.pixel) - affine.b) - s * (point.patch[k] - point.affine.b);
                e += r * r;
            }
            _ => return f64::INFINITY,
        }
    }
    e
}

/// Searches the `±2σ` inverse-depth interval along the epipolar line in the
/// target image for the best pattern match, refines it with a parabola and
/// turns the curvature into an observation variance. `sigma2_p` is the
/// current photometric residual variance used by the outlier test.
pub fn epipolar_search(
    point: &SearchPoint,
    target: &ImagePlane,
    host_to_target: &Pose,
    affine: &AffineBrightness,
    c: &CameraIntrinsics,
    sigma2_p: f64,
    cfg: &SearchConfig,
) -> SearchOutcome {
    if host_to_target.translation.norm() < cfg.b_min {
        return SearchOutcome::Skipped;
    }
    let d = point.belief.idepth;
    let sigma = point.belief.idepth_variance.sqrt();
    match warp_unchecked(c, host_to_target, &point.p, d) {
        Ok(w) if target.in_bounds(&w.pixel) => {}
        _ => return SearchOutcome::Outlier,
    }
    let lo = (d - 2.0 * sigma).max(1e-3 * d);
    let hi = d + 2.0 * sigma;
    let end = |x: f64| warp_unchecked(c, host_to_target, &point.p, x).ok().map(|w| w.pixel);
    let length = match (end(lo), end(hi)) {
        (Some(a), Some(b)) => (a - b).norm(),
        _ => cfg.max_steps as f64,
    };
    let n = (length.ceil() as usize + 1).clamp(3, cfg.max_steps.max(3));
    let step = (hi - lo) / (n - 1) as f64;
    let energies: Vec<f64> = (0..n)
        .map(|i| pattern_ssd(point, target, host_to_target, affine, c, lo + step * i as f64))
        .collect();
    let (best, e0) = energies
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("n >= 3");
    if !e0.is_finite() {
        return SearchOutcome::Outlier;
    }
    let f = cfg.outlier_energy_factor;
    if e0 / PATTERN_LEN as f64 > f * f * sigma2_p.max(cfg.noise_variance) {
        return SearchOutcome::Outlier;
    }
    if best == 0 || best == n - 1 {
        return SearchOutcome::Skipped;
    }
    let (em, ep) = (energies[best - 1], energies[best + 1]);
    let denom = em - 2.0 * e0 + ep;
    if !(denom > 0.0) || !denom.is_finite() {
        return SearchOutcome::Skipped;
    }
    let offset = (0.5 * (em - ep) / denom).clamp(-0.5, 0.5);
    let idepth = lo + step * (best as f64 + offset);
    // E ≈ E* + ½E''(x − x*)², likelihood exp(−E / 2σ_n²)
    let curvature = denom / (step * step);
    let variance = (2.0 * cfg.noise_variance / curvature).max(cfg.observation_variance_floor);
    SearchOutcome::Observed { idepth, variance }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_shrinks_variance() {
        let mut h = DepthHypothesis {
            idepth: 1.0,
            idepth_variance: 0.25,
            num_observations: 0,
        };
        h.fuse(0.8, 0.25);
        assert!((h.idepth - 0.9).abs() < 1e-12);
        assert!((h.idepth_variance - 0.125).abs() < 1e-12);
        let before = h.idepth_variance;
        h.fuse(0.9, 10.0);
        assert!(h.idepth_variance < before);
        assert_eq!(h.num_observations, 2);
    }
}
