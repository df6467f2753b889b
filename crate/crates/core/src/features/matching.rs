use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::corners::Corner;
use super::descriptor::{hamming, Descriptor};
use super::FeatureId;
use crate::geometry::{warp_unchecked, CameraIntrinsics, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Search radius around the predicted location (level-0 pixels).
    pub search_window: f64,
    /// Maximum accepted Hamming distance (bits).
    pub match_threshold: u32,
    /// Best must not exceed `ratio_test` × second best.
    pub ratio_test: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            search_window: 15.0,
            match_threshold: 64,
            ratio_test: 0.8,
        }
    }
}

/// A map corner to be searched for in a new frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchQuery {
    pub feature: FeatureId,
    /// Level-0 pixel in the host keyframe.
    pub p: Vector2<f64>,
    pub idepth: f64,
    pub descriptor: Descriptor,
    /// Prior transform from the host camera into the new frame.
    pub host_to_frame: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub feature: FeatureId,
    /// Matched level-0 location in the new frame.
    pub obs: Vector2<f64>,
    pub hamming: u32,
    /// Index of the matched frame corner.
    pub corner: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchOutcome {
    pub matches: Vec<Match>,
    /// Queries that were visible under the prior but found no match.
    pub failed: Vec<FeatureId>,
}

/// Matches map corners against frame corners inside a window around their
/// prior-warped location. Ratio test and one-to-one assignment (lowest
/// distance wins) are applied.
pub fn match_corners(
    queries: &[MatchQuery],
    corners: &[Corner],
    camera: &CameraIntrinsics,
    cfg: &MatchConfig,
) -> MatchOutcome {
    let mut out = MatchOutcome::default();
    if !(cfg.search_window > 0.0) {
        return out;
    }
    let w2 = cfg.search_window * cfg.search_window;
    // best match per frame corner: (query index, distance)
    let mut owner: Vec<Option<(usize, u32)>> = vec![None; corners.len()];
    let mut proposals: Vec<Option<(usize, u32)>> = vec![None; queries.len()];
    for (qi, q) in queries.iter().enumerate() {
        let predicted = match warp_unchecked(camera, &q.host_to_frame, &q.p, q.idepth) {
            Ok(w) if camera.contains(&w.pixel, 0.0) => w.pixel,
            _ => continue,
        };
        let mut best: Option<(usize, u32)> = None;
        let mut second = u32::MAX;
        for (ci, c) in corners.iter().enumerate() {
            if (c.p - predicted).norm_squared() >= w2 {
                continue;
            }
            let d = hamming(&q.descriptor, &c.descriptor);
            match best {
                Some((_, bd)) if d >= bd => second = second.min(d),
                Some((_, bd)) => {
                    second = bd;
                    best = Some((ci, d));
                }
                None => best = Some((ci, d)),
            }
        }
        let accepted = best.filter(|&(_, d)| {
            d <= cfg.match_threshold && (second == u32::MAX || d as f64 <= cfg.ratio_test * second as f64)
        });
        match accepted {
            Some((ci, d)) => {
                proposals[qi] = Some((ci, d));
                match owner[ci] {
                    Some((_, od)) if od <= d => {}
                    _ => owner[ci] = Some((qi, d)),
                }
            }
            None => out.failed.push(q.feature),
        }
    }
    for (qi, prop) in proposals.iter().enumerate() {
        if let Some((ci, d)) = *prop {
            if owner[ci].map(|(o, _)| o) == Some(qi) {
                out.matches.push(Match {
                    feature: queries[qi].feature,
                    obs: corners[ci].p,
                    hamming: d,
                    corner: ci,
                });
            } else {
                out.failed.push(queries[qi].feature);
            }
        }
    }
    out.failed.sort();
    out
}
