//! Corner and pixel features: detection, description, matching and the
//! occupancy-grid activation policy.

mod corners;
mod descriptor;
mod matching;
mod occupancy;

pub use corners::{detect_corners, fast_segment_test, shi_tomasi_score, Corner, CornerConfig};
pub use descriptor::{compute_descriptor, hamming, Descriptor, DESCRIPTOR_RADIUS};
pub use matching::{match_corners, Match, MatchConfig, MatchOutcome, MatchQuery};
pub use occupancy::{
    activate_features, sample_pixel_candidates, update_occupancy, ActivationCandidate, OccupancyGrid,
    PixelCandidate, SamplingConfig,
};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_pyramid::ImagePlane;

/// Residual pattern: center plus seven offsets within a 2-px radius.
pub const PATTERN: [(f64, f64); 8] = [
    (0.0, -2.0),
    (-1.0, -1.0),
    (1.0, -1.0),
    (-2.0, 0.0),
    (0.0, 0.0),
    (2.0, 0.0),
    (-1.0, 1.0),
    (0.0, 2.0),
];
pub const PATTERN_LEN: usize = PATTERN.len();

#[inline]
pub fn pattern_offset(k: usize) -> Vector2<f64> {
    Vector2::new(PATTERN[k].0, PATTERN[k].1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyframeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Corner,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureStatus {
    Candidate,
    Active,
    Marginalized,
    Outlier,
}

impl FeatureStatus {
    pub fn can_become(self, next: FeatureStatus) -> bool {
        use FeatureStatus::*;
        self == next
            || matches!(
                (self, next),
                (Candidate, Active) | (Candidate, Outlier) | (Active, Marginalized) | (Active, Outlier)
            )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureStatus::Candidate => "candidate",
            FeatureStatus::Active => "active",
            FeatureStatus::Marginalized => "marginalized",
            FeatureStatus::Outlier => "outlier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("illegal status transition {from:?} -> {to:?} for feature {id:?}")]
    IllegalTransition {
        id: FeatureId,
        from: FeatureStatus,
        to: FeatureStatus,
    },
    #[error("position ({u:.2}, {v:.2}) too close to the image border")]
    OutOfImage { u: f64, v: f64 },
}

/// One host intensity per pattern point, sampled at a given pyramid level.
pub type Patch = [f64; PATTERN_LEN];

/// Samples the residual pattern around `p` (pixel coordinates of `plane`).
pub fn sample_patch(plane: &ImagePlane, p: &Vector2<f64>) -> Option<Patch> {
    let mut patch = [0.0; PATTERN_LEN];
    for (k, v) in patch.iter_mut().enumerate() {
        let q = p + pattern_offset(k);
        if !plane.in_bounds(&q) {
            return None;
        }
        *v = plane.intensity_unchecked(&q);
    }
    Some(patch)
}

/// A corner or pixel feature hosted in a keyframe, parametrized by inverse
/// depth in the host.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: FeatureId,
    pub kind: FeatureKind,
    status: FeatureStatus,
    pub host_keyframe: KeyframeId,
    /// Level-0 pixel position in the host image.
    pub p: Vector2<f64>,
    pub idepth: f64,
    pub idepth_variance: f64,
    pub num_observations: u32,
    /// Level-0 host intensities over the pattern.
    pub patch: Patch,
    pub score: Option<f64>,
    pub descriptor: Option<Descriptor>,
    pub match_failures: u32,
}

impl Feature {
    #[allow(clippy::too_many_arguments)]
    pub fn corner(
        id: FeatureId,
        host: KeyframeId,
        corner: &Corner,
        patch: Patch,
        idepth: f64,
        idepth_variance: f64,
    ) -> Self {
        Self {
            id,
            kind: FeatureKind::Corner,
            status: FeatureStatus::Candidate,
            host_keyframe: host,
            p: corner.p,
            idepth,
            idepth_variance,
            num_observations: 0,
            patch,
            score: Some(corner.score),
            descriptor: Some(corner.descriptor),
            match_failures: 0,
        }
    }

    pub fn pixel(
        id: FeatureId,
        host: KeyframeId,
        p: Vector2<f64>,
        patch: Patch,
        idepth: f64,
        idepth_variance: f64,
    ) -> Self {
        Self {
            id,
            kind: FeatureKind::Pixel,
            status: FeatureStatus::Candidate,
            host_keyframe: host,
            p,
            idepth,
            idepth_variance,
            num_observations: 0,
            patch,
            score: None,
            descriptor: None,
            match_failures: 0,
        }
    }

    pub fn status(&self) -> FeatureStatus {
        self.status
    }

    pub fn set_status(&mut self, next: FeatureStatus) -> Result<(), FeatureError> {
        if !self.status.can_become(next) {
            return Err(FeatureError::IllegalTransition {
                id: self.id,
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    pub fn is_corner(&self) -> bool {
        self.kind == FeatureKind::Corner
    }

    /// Checks the per-feature invariants.
    pub fn check(&self) -> Result<(), String> {
        if self.kind == FeatureKind::Pixel && (self.descriptor.is_some() || self.score.is_some()) {
            return Err(format!("pixel feature {:?} carries corner data", self.id));
        }
        if self.kind == FeatureKind::Corner && self.descriptor.is_none() {
            return Err(format!("corner feature {:?} lacks a descriptor", self.id));
        }
        if self.patch.iter().any(|v| !v.is_finite()) {
            return Err(format!("feature {:?} has no valid patch", self.id));
        }
        if self.status == FeatureStatus::Active && !(self.idepth > 0.0 && self.idepth_variance > 0.0)
        {
            return Err(format!("active feature {:?} has invalid depth", self.id));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_machine() {
        use FeatureStatus::*;
        let mut f = Feature::pixel(FeatureId(1), KeyframeId(0), Vector2::new(5.0, 5.0), [0.0; 8], 1.0, 1.0);
        assert_eq!(f.status(), Candidate);
        f.set_status(Active).unwrap();
        f.set_status(Marginalized).unwrap();
        assert!(f.set_status(Active).is_err());
        assert!(f.set_status(Outlier).is_err());
        assert!(f.set_status(Candidate).is_err());
        let mut g = f.clone();
        g.status = Candidate;
        g.set_status(Outlier).unwrap();
        assert!(g.set_status(Active).is_err());
        assert!(!Candidate.can_become(Marginalized));
    }

    #[test]
    fn kind_invariants() {
        let mut f = Feature::pixel(FeatureId(1), KeyframeId(0), Vector2::new(5.0, 5.0), [0.0; 8], 1.0, 1.0);
        assert!(f.check().is_ok());
        f.score = Some(3.0);
        assert!(f.check().is_err());
    }
}
