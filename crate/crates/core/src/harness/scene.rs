//! Synthetic scenes built from textured planes, with an exact ray-casting
//! renderer that also returns ground-truth inverse depth.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bearing, AffineBrightness, CameraIntrinsics, Pose};
use crate::image_pyramid::{build_pyramid, ImagePyramid, IntensityImage, PyramidError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("frame {0} sees no surface")]
    NoSurfaceInView(usize),
    #[error("frame index {index} outside trajectory of {len} frames")]
    FrameOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// Procedural surface texture in plane coordinates (scene units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Multi-octave value noise on a square raster, bilinearly filtered.
    Noise {
        texel: f64,
        octaves: u32,
        mean: f64,
        contrast: f64,
        seed: u64,
    },
    /// A few sinusoidal gratings: plenty of gradient, no corners.
    Smooth {
        wavelength: f64,
        amplitude: f64,
        mean: f64,
        seed: u64,
    },
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = mix64(seed ^ mix64((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    pub fn radiance(&self, s: f64, t: f64) -> f64 {
        match *self {
            Texture::Noise {
                texel,
                octaves,
                mean,
                contrast,
                seed,
            } => {
                let mut value = 0.0;
                let mut norm = 0.0;
                for o in 0..octaves.max(1) {
                    // coarser octaves carry more weight
                    let size = texel * (1u64 << o) as f64;
                    let weight = (1u64 << o) as f64;
                    let (x, y) = (s / size, t / size);
                    let (i, j) = (x.floor(), y.floor());
                    let (fx, fy) = (x - i, y - j);
                    let (i, j) = (i as i64, j as i64);
                    let sd = seed.wrapping_add(o as u64 * 7919);
                    let v = (1.0 - fx) * (1.0 - fy) * lattice(sd, i, j)
                        + fx * (1.0 - fy) * lattice(sd, i + 1, j)
                        + (1.0 - fx) * fy * lattice(sd, i, j + 1)
                        + fx * fy * lattice(sd, i + 1, j + 1);
                    value += weight * (v - 0.5);
                    norm += weight;
                }
                mean + 2.0 * contrast * value / norm
            }
            Texture::Smooth {
                wavelength,
                amplitude,
                mean,
                seed,
            } => {
                let mut v = 0.0;
                for k in 0..3u64 {
                    let angle = std::f64::consts::PI * (k as f64 / 3.0 + 0.2 * lattice(seed, k as i64, 0));
                    let phase = std::f64::consts::TAU * lattice(seed, k as i64, 1);
                    let lambda = wavelength * (0.8 + 0.4 * lattice(seed, k as i64, 2));
                    let d = s * angle.cos() + t * angle.sin();
                    v += (std::f64::consts::TAU * d / lambda + phase).sin();
                }
                mean + amplitude * v / 3.0
            }
        }
    }
}

/// A bounded textured plane: `origin + s·u_axis + t·v_axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surface {
    pub origin: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    /// Half sizes along the two axes.
    pub half_extent: [f64; 2],
    pub texture: Texture,
}

impl Surface {
    /// Ray parameter and texture coordinates of the hit, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let o = Vector3::from(self.origin);
        let u = Vector3::from(self.u_axis).normalize();
        let v = Vector3::from(self.v_axis).normalize();
        let n = u.cross(&v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(o - origin)) / denom;
        if !(t > 1e-6) {
            return None;
        }
        let rel = origin + dir * t - o;
        let (s, r) = (rel.dot(&u), rel.dot(&v));
        (s.abs() <= self.half_extent[0] && r.abs() <= self.half_extent[1]).then_some((t, s, r))
    }
}

/// Camera path. Poses are generated on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Arc around `target` at constant radius, looking at the target, with an
    /// optional vertical oscillation. `frames` poses are generated on the base
    /// arc and every `stride`-th one is kept.
    Orbit {
        target: [f64; 3],
        radius: f64,
        start_deg: f64,
        end_deg: f64,
        frames: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        bob_amplitude: f64,
        #[serde(default = "default_bob_period")]
        bob_period: f64,
        #[serde(default = "default_frame_rate")]
        frame_rate: f64,
    },
    /// Explicit camera-to-world poses.
    Poses { poses: Vec<TimedPose> },
}

fn one() -> usize {
    1
}

fn default_bob_period() -> f64 {
    40.0
}

fn default_frame_rate() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedPose {
    pub timestamp: f64,
    pub translation: [f64; 3],
    /// Camera-to-world rotation as `[x, y, z, w]`.
    pub quaternion: [f64; 4],
}

/// Camera-to-world pose at `center` looking at `target`; world y points down.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let f = (target - center).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let r = down.cross(&f).normalize();
    let d = f.cross(&r);
    Pose::new(Matrix3::from_columns(&[r, d, f]), *center)
}

impl Trajectory {
    /// `(timestamp, camera-to-world)` for every kept frame.
    pub fn poses(&self) -> Vec<(f64, Pose)> {
        match self {
            Trajectory::Orbit {
                target,
                radius,
                start_deg,
                end_deg,
                frames,
                stride,
                bob_amplitude,
                bob_period,
                frame_rate,
            } => {
                let target = Vector3::from(*target);
                let n = (*frames).max(1);
                (0..n)
                    .step_by((*stride).max(1))
                    .map(|i| {
                        let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                        let th = (start_deg + (end_deg - start_deg) * f).to_radians();
                        let bob = bob_amplitude * (std::f64::consts::TAU * i as f64 / bob_period).sin();
                        let c = target + Vector3::new(radius * th.sin(), bob, -radius * th.cos());
                        (i as f64 / frame_rate, look_at(&c, &target))
                    })
                    .collect()
            }
            Trajectory::Poses { poses } => poses
                .iter()
                .map(|p| (p.timestamp, Pose::from_quaternion(Vector3::from(p.translation), p.quaternion)))
                .collect(),
        }
    }
}

/// Per-frame brightness: `a_k = a_amplitude · sin(2πk / a_period)`,
/// `b_k = b_amplitude · cos(2πk / a_period)`, exposure `t_k` constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSchedule {
    pub a_amplitude: f64,
    pub b_amplitude: f64,
    pub a_period: f64,
    pub exposure: f64,
}

impl Default for AffineSchedule {
    fn default() -> Self {
        Self {
            a_amplitude: 0.0,
            b_amplitude: 0.0,
            a_period: 60.0,
            exposure: 1.0,
        }
    }
}

impl AffineSchedule {
    pub fn at(&self, k: usize) -> AffineBrightness {
        let ph = std::f64::consts::TAU * k as f64 / self.a_period;
        AffineBrightness::new(self.a_amplitude * ph.sin(), self.b_amplitude * ph.cos(), self.exposure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub surfaces: Vec<Surface>,
    pub trajectory: Trajectory,
    /// Standard deviation of additive Gaussian intensity noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub affine: AffineSchedule,
    #[serde(default)]
    pub seed: u64,
}

/// A rendered frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub index: usize,
    pub timestamp: f64,
    pub image: IntensityImage,
    /// Per-pixel inverse depth, 0 where no surface was hit.
    pub idepth: Vec<f64>,
    /// Camera-to-world.
    pub camera_to_world: Pose,
    pub affine: AffineBrightness,
}

impl RenderedFrame {
    pub fn world_to_camera(&self) -> Pose {
        self.camera_to_world.inverse()
    }

    pub fn idepth_at(&self, p: &Vector2<f64>) -> Option<f64> {
        let (u, v) = (p.x.round(), p.y.round());
        if u < 0.0 || v < 0.0 || u >= self.image.width as f64 || v >= self.image.height as f64 {
            return None;
        }
        let d = self.idepth[v as usize * self.image.width + u as usize];
        (d > 0.0).then_some(d)
    }

    pub fn pyramid(&self, c: &CameraIntrinsics, num_levels: usize) -> Result<ImagePyramid, SceneError> {
        Ok(build_pyramid(self.image.clone(), self.affine.t, num_levels, c)?)
    }
}

impl SyntheticScene {
    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let scene: SyntheticScene = toml::from_str(text).map_err(|e| SceneError::Invalid(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.intrinsics
            .validate()
            .map_err(|e| SceneError::Invalid(e.to_string()))?;
        if self.surfaces.is_empty() {
            return Err(SceneError::Invalid("no surfaces".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(SceneError::Invalid("negative noise".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectory.poses().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nearest surface hit along the ray from `origin`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for s in &self.surfaces {
            if let Some((t, u, v)) = s.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, s.texture.radiance(u, v)));
                }
            }
        }
        best
    }

    /// Renders with an explicit camera-to-world pose and brightness.
    pub fn render_pose(
        &self,
        camera_to_world: &Pose,
        affine: &AffineBrightness,
        noise_seed: u64,
    ) -> (IntensityImage, Vec<f64>, bool) {
        let c = &self.intrinsics;
        let (w, h) = (c.width, c.height);
        let mut data = vec![0.0; w * h];
        let mut idepth = vec![0.0; w * h];
        let mut any = false;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise");
        let gain = affine.t * affine.a.exp();
        let origin = camera_to_world.translation;
        for v in 0..h {
            for u in 0..w {
                let ray = bearing(c, &Vector2::new(u as f64, v as f64));
                let dir = camera_to_world.rotation * ray;
                let mut value = 0.0;
                if let Some((t, radiance)) = self.cast(&origin, &dir) {
                    // the ray has unit camera depth, so t is the depth
                    idepth[v * w + u] = 1.0 / t;
                    value = gain * radiance + affine.b;
                    any = true;
                }
                if self.noise > 0.0 {
                    value += normal.sample(&mut rng);
                }
                data[v * w + u] = value.round().clamp(0.0, 255.0);
            }
        }
        (
            IntensityImage::new(w, h, data).expect("sizes match"),
            idepth,
            any,
        )
    }

    pub fn render_frame(&self, index: usize) -> Result<RenderedFrame, SceneError> {
        let poses = self.trajectory.poses();
        let (timestamp, pose) = *poses.get(index).ok_or(SceneError::FrameOutOfRange {
            index,
            len: poses.len(),
        })?;
        let affine = self.affine.at(index);
        let seed = mix64(self.seed ^ (index as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        let (image, idepth, any) = self.render_pose(&pose, &affine, seed);
        if !any {
            return Err(SceneError::NoSurfaceInView(index));
        }
        Ok(RenderedFrame {
            index,
            timestamp,
            image,
            idepth,
            camera_to_world: pose,
            affine,
        })
    }

    /// A box-shaped room with a few free-standing panels, seen by a camera
    /// orbiting the room centre. The smooth style keeps only the back wall.
    pub fn room(texture: TextureStyle, frames: usize, seed: u64) -> Self {
        let tex = |k: u64| match texture {
            TextureStyle::Rich => Texture::Noise {
                texel: 0.025,
                octaves: 4,
                mean: 120.0,
                contrast: 110.0,
                seed: seed.wrapping_mul(31).wrapping_add(k),
            },
            TextureStyle::Smooth => Texture::Smooth {
                wavelength: 0.6,
                amplitude: 108.0,
                mean: 128.0,
                seed: seed.wrapping_mul(31).wrapping_add(k),
            },
        };
        let plane = |origin: [f64; 3], u: [f64; 3], v: [f64; 3], half: [f64; 2], k: u64| Surface {
            origin,
            u_axis: u,
            v_axis: v,
            half_extent: half,
            texture: tex(k),
        };
        let mut surfaces = vec![
            // back wall, floor, ceiling, side walls
            plane([0.0, 0.0, 7.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [12.0, 6.0], 1),
            plane([0.0, 1.6, 2.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [12.0, 12.0], 2),
            plane([0.0, -2.6, 2.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [12.0, 12.0], 3),
            plane([-5.0, 0.0, 2.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [12.0, 6.0], 4),
            plane([5.0, 0.0, 2.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [12.0, 6.0], 5),
            // panels at intermediate depth
            plane([-1.2, 0.2, 4.2], [1.0, 0.0, 0.3], [0.0, 1.0, 0.0], [0.7, 0.9], 6),
            plane([1.3, -0.3, 3.6], [1.0, 0.0, -0.4], [0.0, 1.0, 0.0], [0.6, 0.6], 7),
        ];
        if texture == TextureStyle::Smooth {
            // plane junctions would create corners
            surfaces.truncate(1);
        }
        SyntheticScene {
            intrinsics: CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).expect("valid"),
            surfaces,
            trajectory: Trajectory::Orbit {
                target: [0.0, 0.0, 4.0],
                radius: 3.0,
                start_deg: -20.0,
                end_deg: 20.0,
                frames,
                stride: 1,
                bob_amplitude: 0.0,
                bob_period: default_bob_period(),
                frame_rate: default_frame_rate(),
            },
            noise: 1.0,
            affine: AffineSchedule {
                a_amplitude: 0.1,
                b_amplitude: 3.0,
                a_period: 90.0,
                exposure: 1.0,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureStyle {
    Rich,
    Smooth,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{warp_unchecked, DEFAULT_BORDER};

    fn frontal(z: f64) -> SyntheticScene {
        let mut s = SyntheticScene::room(TextureStyle::Rich, 2, 3);
        s.surfaces = vec![Surface {
            origin: [0.0, 0.0, z],
            u_axis: [1.0, 0.0, 0.0],
            v_axis: [0.0, 1.0, 0.0],
            half_extent: [50.0, 50.0],
            texture: Texture::Noise {
                texel: 0.05,
                octaves: 2,
                mean: 120.0,
                contrast: 80.0,
                seed: 1,
            },
        }];
        s.trajectory = Trajectory::Poses {
            poses: vec![
                TimedPose {
                    timestamp: 0.0,
                    translation: [0.0; 3],
                    quaternion: [0.0, 0.0, 0.0, 1.0],
                };
                2
            ],
        };
        s.noise = 0.0;
        s.affine = AffineSchedule::default();
        s
    }

    #[test]
    fn deterministic_and_exact_depth() {
        let s = frontal(2.0);
        let a = s.render_frame(0).unwrap();
        let b = s.render_frame(1).unwrap();
        assert!(a.image == b.image);
        let c = s.intrinsics;
        assert_eq!(a.idepth_at(&Vector2::new(c.cu, c.cv)), Some(0.5));
        assert!(s.render_frame(2).is_err());
    }

    #[test]
    fn empty_view_is_an_error() {
        let mut s = frontal(2.0);
        s.surfaces[0].origin = [0.0, 0.0, -2.0];
        assert!(matches!(s.render_frame(0), Err(SceneError::NoSurfaceInView(0))));
    }

    #[test]
    fn rendered_geometry_agrees_with_warp() {
        let s = SyntheticScene::room(TextureStyle::Rich, 30, 1);
        let a = s.render_frame(0).unwrap();
        let b = s.render_frame(29).unwrap();
        let c = s.intrinsics;
        let a_to_b = b.world_to_camera() * a.camera_to_world;
        let mut checked = 0;
        for v in (5..c.height - 5).step_by(7) {
            for u in (5..c.width - 5).step_by(7) {
                let p = Vector2::new(u as f64, v as f64);
                let d = a.idepth_at(&p).unwrap();
                let Ok(w) = warp_unchecked(&c, &a_to_b, &p, d) else { continue };
                if !c.contains(&w.pixel, DEFAULT_BORDER) {
                    continue;
                }
                // cast the ray of the predicted pixel in frame b
                let dir = b.camera_to_world.rotation * bearing(&c, &w.pixel);
                let Some((t, _)) = s.cast(&b.camera_to_world.translation, &dir) else { continue };
                if (t - 1.0 / w.idepth).abs() > 1e-6 * t {
                    continue; // occluded in b
                }
                let x_b = bearing(&c, &w.pixel) * t;
                let back = warp_unchecked(&c, &a_to_b.inverse(), &w.pixel, 1.0 / x_b.z).unwrap();
                assert!((back.pixel - p).norm() < 1e-6, "{:?} vs {:?}", back.pixel, p);
                checked += 1;
            }
        }
        assert!(checked > 500, "{checked}");
    }

    #[test]
    fn scene_round_trips_through_toml() {
        let s = SyntheticScene::room(TextureStyle::Smooth, 10, 4);
        let text = toml::to_string(&s).unwrap();
        let back: SyntheticScene = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
