//! Oriented 256-bit binary descriptor.
//!
//! Each bit compares two box-smoothed (5×5) intensities at a pair of offsets
//! drawn once from a fixed-seed generator. Offsets are rotated by the
//! intensity-centroid orientation of the 31×31 patch before sampling.

use std::sync::OnceLock;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::FeatureError;
use crate::image_pyramid::{ImagePlane, IntensityImage};

pub type Descriptor = [u64; 4];

const TABLE_SEED: u64 = 0x5EED_0F_B17E;
const OFFSET_RADIUS: f64 = 13.0;
const CENTROID_RADIUS: i64 = 15;
const BOX_HALF: i64 = 2;

/// Minimum distance between a described position and the image border.
pub const DESCRIPTOR_RADIUS: usize = 16;

type OffsetPair = ([f64; 2], [f64; 2]);

fn offset_table() -> &'static [OffsetPair; 256] {
    static TABLE: OnceLock<[OffsetPair; 256]> = OnceLock::new();
    TABLE.get_or_init(build_offset_table)
}

/// Draws candidate pairs from an isotropic Gaussian and keeps, greedily, the
/// ones whose outcomes on random patches are weakly correlated with every
/// pair already kept. Box-smoothed tests at nearby offsets are strongly
/// correlated, which would otherwise inflate the spread of distances between
/// unrelated patches.
fn build_offset_table() -> [OffsetPair; 256] {
    const CANDIDATES: usize = 4096;
    const TRAINING: usize = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
    let normal = Normal::new(0.0, 31.0 / 5.0).unwrap();
    let draw = |rng: &mut ChaCha8Rng| loop {
        let x: f64 = normal.sample(rng);
        let y: f64 = normal.sample(rng);
        let (x, y) = (x.round(), y.round());
        if x * x + y * y <= OFFSET_RADIUS * OFFSET_RADIUS {
            return [x, y];
        }
    };
    let mut pairs = Vec::with_capacity(CANDIDATES);
    while pairs.len() < CANDIDATES {
        let s = draw(&mut rng);
        let t = draw(&mut rng);
        if s != t {
            pairs.push((s, t));
        }
    }

    let side = 2 * DESCRIPTOR_RADIUS + 1;
    let c = DESCRIPTOR_RADIUS as i64;
    let mut outcomes = vec![[0u64; TRAINING / 64]; CANDIDATES];
    for n in 0..TRAINING {
        let plane = ImagePlane::from_image(IntensityImage::from_fn(side, side, |_, _| {
            rng.random_range(0.0..255.0)
        }));
        for (pair, bits) in pairs.iter().zip(outcomes.iter_mut()) {
            let a = box_mean(&plane, c + pair.0[0] as i64, c + pair.0[1] as i64);
            let b = box_mean(&plane, c + pair.1[0] as i64, c + pair.1[1] as i64);
            if a < b {
                bits[n / 64] |= 1 << (n % 64);
            }
        }
    }

    // correlation of two ±1 outcome vectors is 1 − 2·disagreements/N
    let corr = |a: &[u64; TRAINING / 64], b: &[u64; TRAINING / 64]| -> f64 {
        let d: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
        1.0 - 2.0 * d as f64 / TRAINING as f64
    };
    let mut chosen: Vec<usize> = Vec::with_capacity(256);
    let mut limit = 0.1;
    while chosen.len() < 256 {
        for i in 0..CANDIDATES {
            if chosen.len() == 256 {
                break;
            }
            if chosen.contains(&i) {
                continue;
            }
            if chosen.iter().all(|&j| corr(&outcomes[i], &outcomes[j]).abs() < limit) {
                chosen.push(i);
            }
        }
        limit += 0.05;
    }
    std::array::from_fn(|k| pairs[chosen[k]])
}

pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn box_mean(plane: &ImagePlane, u: i64, v: i64) -> f64 {
    let mut s = 0.0;
    let (x0, x1) = ((u - BOX_HALF) as usize, (u + BOX_HALF) as usize);
    for y in v - BOX_HALF..=v + BOX_HALF {
        let row = y as usize * plane.width;
        for x in &plane.intensities[row + x0..=row + x1] {
            s += x;
        }
    }
    s / 25.0
}

/// Intensity-centroid angle over a disc of radius 15.
fn orientation(plane: &ImagePlane, u: i64, v: i64) -> f64 {
    let (mut m10, mut m01) = (0.0, 0.0);
    let r2 = CENTROID_RADIUS * CENTROID_RADIUS;
    for dy in -CENTROID_RADIUS..=CENTROID_RADIUS {
        for dx in -CENTROID_RADIUS..=CENTROID_RADIUS {
            if dx * dx + dy * dy <= r2 {
                let i = plane.at((u + dx) as usize, (v + dy) as usize);
                m10 += dx as f64 * i;
                m01 += dy as f64 * i;
            }
        }
    }
    m01.atan2(m10)
}

pub fn compute_descriptor(plane: &ImagePlane, p: &Vector2<f64>) -> Result<Descriptor, FeatureError> {
    let (u, v) = (p.x.round() as i64, p.y.round() as i64);
    let r = DESCRIPTOR_RADIUS as i64 - 1;
    if u - r < 0 || v - r < 0 || u + r >= plane.width as i64 || v + r >= plane.height as i64 {
        return Err(FeatureError::OutOfImage { u: p.x, v: p.y });
    }
    let angle = orientation(plane, u, v);
    let (s, c) = angle.sin_cos();
    let rotate = |o: &[f64; 2]| -> (i64, i64) {
        let x = c * o[0] - s * o[1];
        let y = s * o[0] + c * o[1];
        // rotated offsets stay within radius 13, so the 5×5 box fits
        (u + x.round() as i64, v + y.round() as i64)
    };
    let mut d = [0u64; 4];
    for (bit, (a, b)) in offset_table().iter().enumerate() {
        let (au, av) = rotate(a);
        let (bu, bv) = rotate(b);
        if box_mean(plane, au, av) < box_mean(plane, bu, bv) {
            d[bit / 64] |= 1 << (bit % 64);
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth random field: a sum of Gaussian blobs.
    fn blob_field(rng: &mut ChaCha8Rng) -> impl Fn(f64, f64) -> f64 {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..40)
            .map(|_| {
                (
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(2.5..6.0),
                    rng.random_range(-80.0..80.0),
                )
            })
            .collect();
        move |x, y| {
            128.0
                + blobs
                    .iter()
                    .map(|(bx, by, s, a)| {
                        a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum::<f64>()
        }
    }

    fn render(f: &impl Fn(f64, f64) -> f64, angle: f64) -> ImagePlane {
        let (s, c) = angle.sin_cos();
        ImagePlane::from_image(IntensityImage::from_fn(64, 64, |u, v| {
            let (x, y) = (u as f64 - 32.0, v as f64 - 32.0);
            // inverse-rotate the sample position
            f(c * x + s * y, -s * x + c * y)
        }))
    }

    #[test]
    fn table_is_reproducible_and_bounded() {
        let t = offset_table();
        assert!(t
            .iter()
            .all(|(a, b)| a[0].hypot(a[1]) <= OFFSET_RADIUS && b[0].hypot(b[1]) <= OFFSET_RADIUS));
        assert!(t.iter().all(|(a, b)| a != b));
    }

    #[test]
    fn identical_patches_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = blob_field(&mut rng);
        let a = render(&f, 0.0);
        let b = render(&f, 0.0);
        let p = Vector2::new(32.0, 32.0);
        let da = compute_descriptor(&a, &p).unwrap();
        assert_eq!(hamming(&da, &compute_descriptor(&b, &p).unwrap()), 0);
        assert_eq!(da, compute_descriptor(&a, &p).unwrap());
        assert!(compute_descriptor(&a, &Vector2::new(10.0, 32.0)).is_err());
    }

    #[test]
    fn rotation_invariance() {
        let mut worst = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let f = blob_field(&mut rng);
            let a = render(&f, 0.0);
            let b = render(&f, 30f64.to_radians());
            let p = Vector2::new(32.0, 32.0);
            let h = hamming(&compute_descriptor(&a, &p).unwrap(), &compute_descriptor(&b, &p).unwrap());
            worst = worst.max(h);
        }
        assert!(worst <= 60, "worst hamming {worst}");
    }

    #[test]
    fn independent_patches_look_like_fair_coins() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut inside = 0;
        let p = Vector2::new(32.0, 32.0);
        for _ in 0..1000 {
            let a = ImagePlane::from_image(IntensityImage::from_fn(64, 64, |_, _| rng.random_range(0.0..255.0)));
            let b = ImagePlane::from_image(IntensityImage::from_fn(64, 64, |_, _| rng.random_range(0.0..255.0)));
            let h = hamming(&compute_descriptor(&a, &p).unwrap(), &compute_descriptor(&b, &p).unwrap());
            if (96..=160).contains(&h) {
                inside += 1;
            }
        }
        assert!(inside >= 990, "{inside}/1000 in range");
    }
}
