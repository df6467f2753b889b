//! SE(3) algebra, pinhole projection and the affine brightness model.
//!
//! Tangent vectors are ordered `(translation, rotation)`. Increments are
//! applied on the left: `v ⊞ T = exp(v) · T`. Depth is always carried as
//! inverse depth.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, SVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vector8 = SVector<f64, 8>;

/// Rotations closer than this to π are rejected by [`log`].
pub const ANGLE_NEAR_PI_GUARD: f64 = 1e-6;

/// Default minimum camera-frame depth accepted by [`project`].
pub const DEFAULT_Z_MIN: f64 = 1e-4;

/// Default image border (pixels) used by [`warp`].
pub const DEFAULT_BORDER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("inverse depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u:.3}, {v:.3}) is outside the valid image area")]
    OutOfImage { u: f64, v: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fu: f64,
        fv: f64,
        cu: f64,
        cv: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let c = Self {
            fu,
            fv,
            cu,
            cv,
            width,
            height,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fu > 0.0 && self.fv > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cu > 0.0 && self.cu < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics("cu must lie inside the image"));
        }
        if !(self.cv > 0.0 && self.cv < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics("cv must lie inside the image"));
        }
        Ok(())
    }

    /// Intrinsics of pyramid level `level` using the pixel-center convention
    /// `c_l = (c + 0.5) / 2^l - 0.5`.
    pub fn at_level(&self, level: usize) -> Self {
        let s = (1u64 << level) as f64;
        Self {
            fu: self.fu / s,
            fv: self.fv / s,
            cu: (self.cu + 0.5) / s - 0.5,
            cv: (self.cv + 0.5) / s - 0.5,
            width: self.width >> level,
            height: self.height >> level,
        }
    }

    /// True when `p` lies at least `border` pixels inside the image.
    pub fn contains(&self, p: &Vector2<f64>, border: f64) -> bool {
        p.x >= border
            && p.y >= border
            && p.x <= self.width as f64 - 1.0 - border
            && p.y <= self.height as f64 - 1.0 - border
    }
}

/// Maps a level-0 pixel coordinate to level `level`.
pub fn pixel_to_level(p: &Vector2<f64>, level: usize) -> Vector2<f64> {
    let s = (1u64 << level) as f64;
    Vector2::new((p.x + 0.5) / s - 0.5, (p.y + 0.5) / s - 0.5)
}

/// Maps a level-`level` pixel coordinate back to level 0.
pub fn pixel_from_level(p: &Vector2<f64>, level: usize) -> Vector2<f64> {
    let s = (1u64 << level) as f64;
    Vector2::new((p.x + 0.5) * s - 0.5, (p.y + 0.5) * s - 0.5)
}

/// A rigid transform. Keyframe and frame poses are world-to-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Largest absolute entry of `R·Rᵀ − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max()
    }

    /// Adjoint for tangents ordered `(translation, rotation)`:
    /// `exp(Ad·v) = T · exp(v) · T⁻¹`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let r = self.rotation;
        let tr = hat(&self.translation) * r;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    /// Camera center in the frame this pose maps from (world center for
    /// world-to-camera poses).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Re-orthonormalizes the rotation (SVD projection).
    pub fn normalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose::new(r, self.translation)
    }

    /// Unit quaternion `(x, y, z, w)` of the rotation.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_quaternion(t: Vector3<f64>, q: [f64; 4]) -> Pose {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[3], q[0], q[1], q[2],
        ));
        Pose::new(*q.to_rotation_matrix().matrix(), t)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// se(3) element ordered `(translation, rotation)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent(pub Vector6<f64>);

impl Tangent {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn from_parts(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&translation);
        v.fixed_rows_mut::<3>(3).copy_from(&rotation);
        Self(v)
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn exp(&self) -> Pose {
        exp(self)
    }
}

impl From<Vector6<f64>> for Tangent {
    fn from(v: Vector6<f64>) -> Self {
        Self(v)
    }
}

/// Affine brightness transfer `L(a, b): I ↦ e^{-a}(I − b)` with exposure time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineBrightness {
    pub a: f64,
    pub b: f64,
    pub t: f64,
}

impl Default for AffineBrightness {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            t: 1.0,
        }
    }
}

impl AffineBrightness {
    pub fn new(a: f64, b: f64, t: f64) -> Self {
        Self { a, b, t }
    }

    /// `e^{-a}(I − b)`.
    pub fn apply(&self, intensity: f64) -> f64 {
        (-self.a).exp() * (intensity - self.b)
    }

    /// Gain `t_j e^{a_j} / (t_i e^{a_i})` mapping host-frame (`self`)
    /// radiance into the `target` frame.
    pub fn transfer_gain(&self, target: &AffineBrightness) -> f64 {
        (target.t * target.a.exp()) / (self.t * self.a.exp())
    }
}

/// The tracked 8-DoF variable: pose relative to the reference keyframe plus
/// the affine brightness parameters of the frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameState {
    pub pose_tangent: Tangent,
    pub affine: AffineBrightness,
}

impl FrameState {
    pub const DIM: usize = 8;

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(pose_tangent: Tangent, affine: AffineBrightness) -> Self {
        Self {
            pose_tangent,
            affine,
        }
    }

    pub fn from_pose(pose: &Pose, affine: AffineBrightness) -> Result<Self, GeometryError> {
        Ok(Self::new(log(pose)?, affine))
    }

    pub fn pose(&self) -> Pose {
        exp(&self.pose_tangent)
    }

    pub fn oplus(&self, delta: &Vector8) -> Result<FrameState, GeometryError> {
        oplus(delta, self)
    }
}

/// `[w]×`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Exponential map se(3) → SE(3).
pub fn exp(v: &Tangent) -> Pose {
    let rho = v.translation();
    let w = v.rotation();
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let wx = hat(&w);
    let wx2 = wx * wx;
    // a = sinθ/θ, b = (1−cosθ)/θ², c = (θ−sinθ)/θ³
    let (a, b, c) = if theta < 1e-5 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        (s / theta, (1.0 - co) / theta2, (theta - s) / (theta2 * theta))
    };
    let rotation = Matrix3::identity() + wx * a + wx2 * b;
    let jac = Matrix3::identity() + wx * b + wx2 * c;
    Pose::new(rotation, jac * rho)
}

/// Logarithm SE(3) → se(3).
pub fn log(p: &Pose) -> Result<Tangent, GeometryError> {
    let r = &p.rotation;
    let theta = rotation_angle(r);
    if theta > PI - ANGLE_NEAR_PI_GUARD {
        return Err(GeometryError::AngleNearPi { angle: theta });
    }
    let w = if theta < 1e-5 {
        // θ/(2 sinθ) ≈ 1/2 + θ²/12
        vee(&(r - r.transpose())) * (0.5 + theta * theta / 12.0)
    } else if theta < PI - 1e-3 {
        vee(&(r - r.transpose())) * (theta / (2.0 * theta.sin()))
    } else {
        // Near π the skew part is tiny; recover the axis from R + Rᵀ.
        let bmat = (r + r.transpose()) * 0.5 - Matrix3::identity() * theta.cos();
        let mut k = 0;
        for i in 1..3 {
            if bmat[(i, i)] > bmat[(k, k)] {
                k = i;
            }
        }
        let mut axis: Vector3<f64> = bmat.column(k).into_owned();
        axis /= axis.norm();
        let skew = vee(&(r - r.transpose()));
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        axis * theta
    };
    let wx = hat(&w);
    let theta2 = theta * theta;
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / theta2
    };
    let jac_inv = Matrix3::identity() - wx * 0.5 + wx * wx * coeff;
    Ok(Tangent::from_parts(jac_inv * p.translation, w))
}

/// `v ⊞ P = exp(v) · P`.
pub fn boxplus(v: &Tangent, p: &Pose) -> Pose {
    exp(v).compose(p)
}

/// `δξ ⊕ ξ = (log(δξ̂ ⊞ e^ξ̂), a + δa, b + δb)`; exposure is untouched.
pub fn oplus(delta: &Vector8, state: &FrameState) -> Result<FrameState, GeometryError> {
    let dv = Tangent(delta.fixed_rows::<6>(0).into_owned());
    let pose = boxplus(&dv, &exp(&state.pose_tangent));
    Ok(FrameState {
        pose_tangent: log(&pose)?,
        affine: AffineBrightness {
            a: state.affine.a + delta[6],
            b: state.affine.b + delta[7],
            t: state.affine.t,
        },
    })
}

pub fn project_with_min(
    c: &CameraIntrinsics,
    x: &Vector3<f64>,
    z_min: f64,
) -> Result<Vector2<f64>, GeometryError> {
    if !(x.z > z_min) {
        return Err(GeometryError::BehindCamera { z: x.z });
    }
    Ok(Vector2::new(
        c.fu * x.x / x.z + c.cu,
        c.fv * x.y / x.z + c.cv,
    ))
}

/// Pinhole projection `Π(c, x)`.
pub fn project(c: &CameraIntrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    project_with_min(c, x, DEFAULT_Z_MIN)
}

/// `Π⁻¹(c, p, d)` with `d` the inverse depth.
pub fn backproject(
    c: &CameraIntrinsics,
    p: &Vector2<f64>,
    idepth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(idepth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(idepth));
    }
    Ok(bearing(c, p) / idepth)
}

/// Ray through `p` scaled to unit depth.
pub fn bearing(c: &CameraIntrinsics, p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((p.x - c.cu) / c.fu, (p.y - c.cv) / c.fv, 1.0)
}

/// Result of warping a host pixel into a target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warped {
    pub pixel: Vector2<f64>,
    pub idepth: f64,
    /// Point in target camera coordinates.
    pub point: Vector3<f64>,
}

/// Warps `p` with inverse depth `idepth` through the host-to-target transform.
/// The returned pixel may lie outside the image; use [`warp`] for the checked
/// variant.
pub fn warp_unchecked(
    c: &CameraIntrinsics,
    host_to_target: &Pose,
    p: &Vector2<f64>,
    idepth: f64,
) -> Result<Warped, GeometryError> {
    let x = host_to_target.transform(&backproject(c, p, idepth)?);
    let pixel = project(c, &x)?;
    Ok(Warped {
        pixel,
        idepth: 1.0 / x.z,
        point: x,
    })
}

pub fn warp_pose(
    c: &CameraIntrinsics,
    host_to_target: &Pose,
    p: &Vector2<f64>,
    idepth: f64,
    border: f64,
) -> Result<Warped, GeometryError> {
    let w = warp_unchecked(c, host_to_target, p, idepth)?;
    if !c.contains(&w.pixel, border) {
        return Err(GeometryError::OutOfImage {
            u: w.pixel.x,
            v: w.pixel.y,
        });
    }
    Ok(w)
}

/// `p′ = Π(c, e^ξ̂ Π⁻¹(c, p, d))`: maps reference-keyframe pixels into the
/// current frame. Returns the warped pixel and its inverse depth there.
pub fn warp(
    c: &CameraIntrinsics,
    state: &FrameState,
    p: &Vector2<f64>,
    idepth: f64,
    border: f64,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let w = warp_pose(c, &state.pose(), p, idepth, border)?;
    Ok((w.pixel, w.idepth))
}

/// 2×6 derivative of the projected pixel w.r.t. a left increment of the
/// transform, evaluated at camera point `x`.
pub fn projection_pose_jacobian(
    c: &CameraIntrinsics,
    x: &Vector3<f64>,
) -> nalgebra::Matrix2x6<f64> {
    let iz = 1.0 / x.z;
    let u = x.x * iz;
    let v = x.y * iz;
    nalgebra::Matrix2x6::new(
        c.fu * iz,
        0.0,
        -c.fu * u * iz,
        -c.fu * u * v,
        c.fu * (1.0 + u * u),
        -c.fu * v,
        0.0,
        c.fv * iz,
        -c.fv * v * iz,
        -c.fv * (1.0 + v * v),
        c.fv * u * v,
        c.fv * u,
    )
}

/// 2×3 derivative of the projected pixel w.r.t. the camera point.
pub fn projection_point_jacobian(
    c: &CameraIntrinsics,
    x: &Vector3<f64>,
) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    nalgebra::Matrix2x3::new(
        c.fu * iz,
        0.0,
        -c.fu * x.x * iz * iz,
        0.0,
        c.fv * iz,
        -c.fv * x.y * iz * iz,
    )
}
