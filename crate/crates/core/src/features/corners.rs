use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::descriptor::{compute_descriptor, Descriptor, DESCRIPTOR_RADIUS};
use super::FeatureError;
use crate::image_pyramid::{ImagePlane, ImagePyramid};

/// Bresenham circle of radius 3 used by the segment test.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC_LENGTH: usize = 9;
const SHI_TOMASI_HALF: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CornerConfig {
    pub fast_threshold: f64,
    pub min_shi_tomasi: f64,
    pub max_corners: usize,
    pub nms_radius: f64,
}

impl Default for CornerConfig {
    fn default() -> Self {
        Self {
            fast_threshold: 20.0,
            min_shi_tomasi: 50.0,
            max_corners: 600,
            nms_radius: 3.0,
        }
    }
}

/// A detected level-0 corner with its saliency and binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub p: Vector2<f64>,
    pub score: f64,
    pub descriptor: Descriptor,
}

/// FAST-9 segment test at integer pixel `(u, v)`; the circle must fit.
pub fn fast_segment_test(plane: &ImagePlane, u: usize, v: usize, threshold: f64) -> bool {
    let c = plane.at(u, v);
    // any arc of 9 covers at least two of the four compass points
    let (mut up, mut down) = (0, 0);
    for k in [0, 4, 8, 12] {
        let (du, dv) = CIRCLE[k];
        let x = plane.at((u as i32 + du) as usize, (v as i32 + dv) as usize);
        up += (x > c + threshold) as u32;
        down += (x < c - threshold) as u32;
    }
    if up < 2 && down < 2 {
        return false;
    }
    let mut brighter = 0u32;
    let mut darker = 0u32;
    for (k, (du, dv)) in CIRCLE.iter().enumerate() {
        let x = plane.at((u as i32 + du) as usize, (v as i32 + dv) as usize);
        if x > c + threshold {
            brighter |= 1 << k;
        } else if x < c - threshold {
            darker |= 1 << k;
        }
    }
    has_arc(brighter) || has_arc(darker)
}

fn has_arc(mask: u32) -> bool {
    if mask.count_ones() < ARC_LENGTH as u32 {
        return false;
    }
    // unroll the circle twice so wrap-around arcs are contiguous
    let doubled = mask | (mask << 16);
    let mut run = 0;
    for k in 0..32 {
        if doubled & (1 << k) != 0 {
            run += 1;
            if run >= ARC_LENGTH {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

/// Minimum eigenvalue of the gradient structure tensor over a 7×7 window.
pub fn shi_tomasi_score(plane: &ImagePlane, p: &Vector2<f64>) -> Result<f64, FeatureError> {
    let (u, v) = (p.x.round() as i64, p.y.round() as i64);
    let h = SHI_TOMASI_HALF;
    if u - h < 0 || v - h < 0 || u + h >= plane.width as i64 || v + h >= plane.height as i64 {
        return Err(FeatureError::OutOfImage { u: p.x, v: p.y });
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for y in (v - h)..=(v + h) {
        for x in (u - h)..=(u + h) {
            let (gu, gv) = plane.grad_at(x as usize, y as usize);
            sxx += gu * gu;
            sxy += gu * gv;
            syy += gv * gv;
        }
    }
    let half_trace = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    Ok(half_trace - disc)
}

/// FAST-9 corners on the finest level, scored by Shi-Tomasi, thinned by
/// non-maximum suppression and described. Only positions where the
/// descriptor patch fits are considered.
pub fn detect_corners(pyr: &ImagePyramid, cfg: &CornerConfig) -> Vec<Corner> {
    detect_corners_on_plane(pyr.finest(), cfg)
}

pub(crate) fn detect_corners_on_plane(plane: &ImagePlane, cfg: &CornerConfig) -> Vec<Corner> {
    let border = DESCRIPTOR_RADIUS;
    if plane.width <= 2 * border || plane.height <= 2 * border || cfg.max_corners == 0 {
        return Vec::new();
    }
    let mut scored = Vec::new();
    for v in border..plane.height - border {
        for u in border..plane.width - border {
            if fast_segment_test(plane, u, v, cfg.fast_threshold) {
                let p = Vector2::new(u as f64, v as f64);
                let s = shi_tomasi_score(plane, &p).expect("window inside border");
                if s >= cfg.min_shi_tomasi {
                    scored.push((p, s));
                }
            }
        }
    }
    // strongest first; ties broken by position for determinism
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.0.x.total_cmp(&b.0.x))
    });
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut kept: Vec<(Vector2<f64>, f64)> = Vec::new();
    for (p, s) in scored {
        if kept.iter().all(|(q, _)| (q - p).norm_squared() > r2) {
            kept.push((p, s));
            if kept.len() == cfg.max_corners {
                break;
            }
        }
    }
    kept.into_iter()
        .filter_map(|(p, score)| {
            compute_descriptor(plane, &p)
                .ok()
                .map(|descriptor| Corner { p, score, descriptor })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_pyramid::IntensityImage;

    fn plane(w: usize, h: usize, f: impl FnMut(usize, usize) -> f64) -> ImagePlane {
        ImagePlane::from_image(IntensityImage::from_fn(w, h, f))
    }

    #[test]
    fn arc_detection() {
        assert!(has_arc(0b1_1111_1111));
        assert!(!has_arc(0b1_1110_1111));
        // wraps around the end of the circle
        assert!(has_arc(0xF01F));
        assert!(!has_arc(0xAAAA));
    }

    #[test]
    fn constant_image_has_no_corners() {
        let p = plane(96, 96, |_, _| 100.0);
        assert!(detect_corners_on_plane(&p, &CornerConfig::default()).is_empty());
        assert_eq!(shi_tomasi_score(&p, &Vector2::new(40.0, 40.0)).unwrap(), 0.0);
    }

    #[test]
    fn square_has_four_corners() {
        let (x0, y0, side) = (40usize, 40usize, 15usize);
        let p = plane(96, 96, |u, v| {
            if u >= x0 && u < x0 + side && v >= y0 && v < y0 + side {
                255.0
            } else {
                0.0
            }
        });
        let corners = detect_corners_on_plane(&p, &CornerConfig::default());
        assert_eq!(corners.len(), 4, "{corners:?}");
        let truth = [
            (x0 as f64 - 0.5, y0 as f64 - 0.5),
            ((x0 + side) as f64 - 0.5, y0 as f64 - 0.5),
            (x0 as f64 - 0.5, (y0 + side) as f64 - 0.5),
            ((x0 + side) as f64 - 0.5, (y0 + side) as f64 - 0.5),
        ];
        for (tx, ty) in truth {
            assert!(
                corners
                    .iter()
                    .any(|c| (c.p.x - tx).abs() <= 2.0 && (c.p.y - ty).abs() <= 2.0),
                "no corner near ({tx}, {ty})"
            );
        }
    }

    #[test]
    fn shi_tomasi_prefers_corners_over_edges() {
        let p = plane(96, 96, |u, v| if u >= 48 && v >= 48 { 200.0 } else { 50.0 });
        let corner = shi_tomasi_score(&p, &Vector2::new(48.0, 48.0)).unwrap();
        let edge = shi_tomasi_score(&p, &Vector2::new(48.0, 70.0)).unwrap();
        assert!(corner > edge);
        assert!(edge.abs() < 1e-9);
        assert!(shi_tomasi_score(&p, &Vector2::new(2.0, 50.0)).is_err());
    }

    #[test]
    fn shi_tomasi_matches_eigen_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = plane(64, 64, |_, _| rng.random_range(0.0..255.0));
        for (u, v) in [(10, 10), (30, 41), (50, 20)] {
            let mut m = nalgebra::Matrix2::<f64>::zeros();
            for y in v - 3..=v + 3 {
                for x in u - 3..=u + 3 {
                    let (gu, gv) = p.grad_at(x, y);
                    m += nalgebra::Matrix2::new(gu * gu, gu * gv, gu * gv, gv * gv);
                }
            }
            let eig = m.symmetric_eigen().eigenvalues.min();
            let s = shi_tomasi_score(&p, &Vector2::new(u as f64, v as f64)).unwrap();
            assert!((s - eig).abs() < 1e-9 * eig.abs().max(1.0));
        }
    }

    #[test]
    fn max_corners_and_ordering() {
        // a field of separated squares
        let p = plane(160, 160, |u, v| if (u / 12) % 2 == 0 && (v / 12) % 2 == 0 { 220.0 } else { 30.0 });
        let cfg = CornerConfig {
            max_corners: 7,
            ..CornerConfig::default()
        };
        let c = detect_corners_on_plane(&p, &cfg);
        assert_eq!(c.len(), 7);
        assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                assert!((a.p - b.p).norm() > 3.0);
            }
        }
    }
}
