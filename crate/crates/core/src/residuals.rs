//! Photometric and geometric residual blocks, their analytic Jacobians and
//! the robust weights that feed the joint step.

use nalgebra::{SMatrix, Vector2};
use thiserror::Error;

use crate::features::{pattern_offset, Patch, PATTERN_LEN};
use crate::geometry::{
    projection_pose_jacobian, warp_unchecked, AffineBrightness, CameraIntrinsics, FrameState, Pose,
    Vector8,
};
use crate::image_pyramid::ImagePlane;

pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Matrix2x8 = SMatrix<f64, 2, 8>;

/// Scale factor turning a median absolute deviation into a standard deviation
/// under Gaussian noise.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResidualError {
    #[error("no valid residual blocks")]
    EmptySystem,
    #[error("normal equations are singular")]
    SingularHessian,
}

/// Per-feature photometric residuals over the pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricBlock {
    pub r: [f64; PATTERN_LEN],
    /// One 1×8 row per pattern point, stored as columns.
    pub j: [Vector8; PATTERN_LEN],
    pub w: f64,
    pub valid: bool,
}

impl PhotometricBlock {
    pub fn invalid() -> Self {
        Self {
            r: [0.0; PATTERN_LEN],
            j: [Vector8::zeros(); PATTERN_LEN],
            w: 0.0,
            valid: false,
        }
    }

    /// Unweighted sum of squared pattern residuals.
    pub fn energy(&self) -> f64 {
        self.r.iter().map(|r| r * r).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricBlock {
    pub r: Vector2<f64>,
    pub j: Matrix2x8,
    /// `w_d · h_w(γ_g)`.
    pub w: f64,
    /// Depth-variance part of the weight.
    pub w_d: f64,
    pub valid: bool,
}

impl GeometricBlock {
    pub fn invalid() -> Self {
        Self {
            r: Vector2::zeros(),
            j: Matrix2x8::zeros(),
            w: 0.0,
            w_d: 0.0,
            valid: false,
        }
    }

    pub fn energy(&self) -> f64 {
        self.r.norm_squared()
    }
}

/// A host feature as seen by the residual evaluators. Pixel and patch are
/// given at the evaluation level.
#[derive(Debug, Clone, Copy)]
pub struct HostPoint<'a> {
    pub p: Vector2<f64>,
    pub idepth: f64,
    pub patch: &'a Patch,
    pub affine: AffineBrightness,
    /// Host camera to the reference keyframe.
    pub host_to_ref: Pose,
}

/// Photometric residuals of one feature in the current image.
///
/// Each pattern point is warped individually with the feature's inverse
/// depth. The block is invalid if any point leaves the image or falls behind
/// the camera.
pub fn photometric_residual(
    host: &HostPoint,
    cur: &ImagePlane,
    state: &FrameState,
    c: &CameraIntrinsics,
    gamma_p: f64,
) -> PhotometricBlock {
    let host_to_frame = state.pose() * host.host_to_ref;
    photometric_residual_pose(host, cur, &host_to_frame, &state.affine, c, gamma_p)
}

/// As [`photometric_residual`] with an explicit host-to-frame transform.
/// Pose columns are derivatives w.r.t. a left increment of that transform.
pub fn photometric_residual_pose(
    host: &HostPoint,
    cur: &ImagePlane,
    host_to_frame: &Pose,
    affine: &AffineBrightness,
    c: &CameraIntrinsics,
    gamma_p: f64,
) -> PhotometricBlock {
    let mut block = PhotometricBlock::invalid();
    if !(host.idepth > 0.0) {
        return block;
    }
    let s = host.affine.transfer_gain(affine);
    for k in 0..PATTERN_LEN {
        let q = host.p + pattern_offset(k);
        let Ok(w) = warp_unchecked(c, host_to_frame, &q, host.idepth) else {
            return PhotometricBlock::invalid();
        };
        if !cur.in_bounds(&w.pixel) {
            return PhotometricBlock::invalid();
        }
        let sample = cur.sample_unchecked(&w.pixel);
        let host_term = host.patch[k] - host.affine.b;
        block.r[k] = (sample.intensity - affine.b) - s * host_term;
        let jp = projection_pose_jacobian(c, &w.point);
        let g = nalgebra::RowVector2::new(sample.grad_u, sample.grad_v);
        let jpose = g * jp;
        let mut row = Vector8::zeros();
        row.fixed_rows_mut::<6>(0).copy_from(&jpose.transpose());
        row[6] = -s * host_term;
        row[7] = -1.0;
        block.j[k] = row;
    }
    block.w = huber_weight(block.energy(), gamma_p);
    block.valid = block.r.iter().all(|r| r.is_finite());
    block
}

/// Reprojection residual `p′ − obs`, in the pixel units of `c`.
/// `w_d` is the depth-variance weight of the feature.
pub fn geometric_residual(
    p: &Vector2<f64>,
    idepth: f64,
    host_to_ref: &Pose,
    obs: &Vector2<f64>,
    state: &FrameState,
    c: &CameraIntrinsics,
    w_d: f64,
    gamma_g: f64,
) -> GeometricBlock {
    let host_to_frame = state.pose() * *host_to_ref;
    geometric_residual_pose(p, idepth, &host_to_frame, obs, c, w_d, gamma_g)
}

pub fn geometric_residual_pose(
    p: &Vector2<f64>,
    idepth: f64,
    host_to_frame: &Pose,
    obs: &Vector2<f64>,
    c: &CameraIntrinsics,
    w_d: f64,
    gamma_g: f64,
) -> GeometricBlock {
    let Ok(w) = warp_unchecked(c, host_to_frame, p, idepth) else {
        return GeometricBlock::invalid();
    };
    let r = w.pixel - obs;
    if !r.iter().all(|x| x.is_finite()) {
        return GeometricBlock::invalid();
    }
    let mut j = Matrix2x8::zeros();
    j.fixed_columns_mut::<6>(0).copy_from(&projection_pose_jacobian(c, &w.point));
    GeometricBlock {
        r,
        j,
        w: w_d * huber_weight(r.norm_squared(), gamma_g),
        w_d,
        valid: true,
    }
}

/// Huber weight for squared error `e`: 1 below `γ²`, `γ/√e` above.
pub fn huber_weight(e: f64, gamma: f64) -> f64 {
    if e < gamma * gamma {
        1.0
    } else {
        gamma / e.sqrt()
    }
}

/// Huber norm of squared error `e`, the energy whose reweighting is
/// [`huber_weight`].
pub fn huber_norm(e: f64, gamma: f64) -> f64 {
    if e < gamma * gamma {
        e
    } else {
        2.0 * gamma * e.sqrt() - gamma * gamma
    }
}

/// `(1/σ_d²) / max(1/σ_d²)`.
pub fn depth_variance_weight(sigma_d2: f64, max_inv_var: f64) -> f64 {
    ((1.0 / sigma_d2) / max_inv_var).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Stacked residual blocks of one frame with their robust variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSystem {
    pub photometric: Vec<PhotometricBlock>,
    pub geometric: Vec<GeometricBlock>,
    pub sigma2_p: f64,
    pub sigma2_g: f64,
}

impl ResidualSystem {
    pub fn new(photometric: Vec<PhotometricBlock>, geometric: Vec<GeometricBlock>) -> Self {
        Self {
            photometric,
            geometric,
            sigma2_p: 1.0,
            sigma2_g: 1.0,
        }
    }

    pub fn n_p(&self) -> usize {
        self.photometric.iter().filter(|b| b.valid).count()
    }

    pub fn n_g(&self) -> usize {
        self.geometric.iter().filter(|b| b.valid).count()
    }

    /// Re-estimates both variances in place.
    pub fn update_variances(&mut self, floor: f64) -> Result<(), ResidualError> {
        let (p, g) = estimate_variances(self, floor)?;
        self.sigma2_p = p;
        self.sigma2_g = g;
        Ok(())
    }

    /// Joint energy `ρ(e_p)/(n_p σ_p²) + K ρ(e_g)/(n_g σ_g²)` with Huber norms.
    pub fn energy(&self, k: f64, gamma_p: f64, gamma_g: f64) -> f64 {
        let (ep, eg) = self.type_energies(gamma_p, gamma_g);
        self.normalized(ep, eg, k)
    }

    /// Robust energy sums per type (not normalized).
    pub fn type_energies(&self, gamma_p: f64, gamma_g: f64) -> (f64, f64) {
        let ep = self
            .photometric
            .iter()
            .filter(|b| b.valid)
            .map(|b| huber_norm(b.energy(), gamma_p))
            .sum();
        let eg = self
            .geometric
            .iter()
            .filter(|b| b.valid)
            .map(|b| b.w_d * huber_norm(b.energy(), gamma_g))
            .sum();
        (ep, eg)
    }

    pub fn normalized(&self, ep: f64, eg: f64, k: f64) -> f64 {
        let mut e = 0.0;
        let (np, ng) = (self.n_p(), self.n_g());
        if np > 0 {
            e += ep / (np as f64 * self.sigma2_p);
        }
        if ng > 0 && k > 0.0 {
            e += k * eg / (ng as f64 * self.sigma2_g);
        }
        e
    }

    /// Per-type normal equations `(JᵀWJ, JᵀWr)`, summed in block order.
    pub fn normal_equations(&self) -> ([Matrix8; 2], [Vector8; 2]) {
        let mut h = [Matrix8::zeros(); 2];
        let mut b = [Vector8::zeros(); 2];
        for blk in self.photometric.iter().filter(|b| b.valid) {
            for k in 0..PATTERN_LEN {
                let jk = &blk.j[k];
                h[0] += blk.w * jk * jk.transpose();
                b[0] += blk.w * blk.r[k] * jk;
            }
        }
        for blk in self.geometric.iter().filter(|b| b.valid) {
            h[1] += blk.w * blk.j.transpose() * blk.j;
            b[1] += blk.w * blk.j.transpose() * blk.r;
        }
        (h, b)
    }
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// `(1.4826 · MAD)²` of `values`, floored.
pub fn robust_variance(values: &[f64], floor: f64) -> f64 {
    if values.is_empty() {
        return floor;
    }
    let mut v = values.to_vec();
    let m = median(&mut v);
    v.iter_mut().for_each(|x| *x = (*x - m).abs());
    let mad = median(&mut v);
    (MAD_TO_SIGMA * mad).powi(2).max(floor)
}

/// Robust per-type variances; a type without valid blocks gets the floor.
pub fn estimate_variances(sys: &ResidualSystem, floor: f64) -> Result<(f64, f64), ResidualError> {
    let rp: Vec<f64> = sys
        .photometric
        .iter()
        .filter(|b| b.valid)
        .flat_map(|b| b.r)
        .collect();
    let rg: Vec<f64> = sys
        .geometric
        .iter()
        .filter(|b| b.valid)
        .flat_map(|b| [b.r.x, b.r.y])
        .collect();
    if rp.is_empty() && rg.is_empty() {
        return Err(ResidualError::EmptySystem);
    }
    Ok((robust_variance(&rp, floor), robust_variance(&rg, floor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::sample_patch;
    use crate::geometry::{Tangent, DEFAULT_BORDER};
    use crate::image_pyramid::IntensityImage;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(120.0, 110.0, 63.5, 47.5, 128, 96).unwrap()
    }

    fn textured() -> ImagePlane {
        ImagePlane::from_image(IntensityImage::from_fn(128, 96, |u, v| {
            let (x, y) = (u as f64, v as f64);
            120.0 + 50.0 * (0.21 * x).sin() * (0.17 * y).cos() + 30.0 * (0.05 * x + 0.11 * y).sin()
        }))
    }

    fn host<'a>(patch: &'a Patch, p: Vector2<f64>) -> HostPoint<'a> {
        HostPoint {
            p,
            idepth: 0.5,
            patch,
            affine: AffineBrightness::default(),
            host_to_ref: Pose::identity(),
        }
    }

    #[test]
    fn self_residual_is_zero() {
        let img = textured();
        let p = Vector2::new(40.0, 30.0);
        let patch = sample_patch(&img, &p).unwrap();
        let b = photometric_residual(&host(&patch, p), &img, &FrameState::identity(), &cam(), 9.0);
        assert!(b.valid);
        assert!(b.r.iter().all(|r| r.abs() < 1e-12));
        assert_eq!(b.w, 1.0);
    }

    #[test]
    fn affine_image_pair_is_explained_by_a_and_b() {
        let img = textured();
        let gain = 0.2f64.exp();
        let cur = ImagePlane::from_image(IntensityImage::from_fn(128, 96, |u, v| gain * img.at(u, v) + 5.0));
        let p = Vector2::new(70.0, 50.0);
        let patch = sample_patch(&img, &p).unwrap();
        let mut st = FrameState::identity();
        st.affine.a = 0.2;
        st.affine.b = 5.0;
        let b = photometric_residual(&host(&patch, p), &cur, &st, &cam(), 9.0);
        assert!(b.r.iter().all(|r| r.abs() < 1e-6), "{:?}", b.r);
    }

    #[test]
    fn gain_rescales_residuals_exactly() {
        let img = textured();
        let p = Vector2::new(50.0, 40.0);
        let patch = sample_patch(&img, &p).unwrap();
        let mut st = FrameState::new(Tangent::from_parts(Vector3::new(0.01, 0.0, 0.02), Vector3::zeros()), AffineBrightness::new(0.1, 3.0, 1.0));
        let b0 = photometric_residual(&host(&patch, p), &img, &st, &cam(), 9.0);
        let delta = 0.3f64;
        let scaled = ImagePlane::from_image(IntensityImage::from_fn(128, 96, |u, v| delta.exp() * img.at(u, v)));
        st.affine.a += delta;
        st.affine.b *= delta.exp();
        let b1 = photometric_residual(&host(&patch, p), &scaled, &st, &cam(), 9.0);
        for k in 0..PATTERN_LEN {
            assert!((b1.r[k] - delta.exp() * b0.r[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_image_is_invalid() {
        let img = textured();
        let p = Vector2::new(40.0, 30.0);
        let patch = sample_patch(&img, &p).unwrap();
        let st = FrameState::new(Tangent::from_parts(Vector3::new(3.0, 0.0, 0.0), Vector3::zeros()), AffineBrightness::default());
        let b = photometric_residual(&host(&patch, p), &img, &st, &cam(), 9.0);
        assert!(!b.valid);
        let sys = ResidualSystem::new(vec![b], vec![]);
        assert_eq!(sys.n_p(), 0);
        assert_eq!(sys.normal_equations().0[0], Matrix8::zeros());
    }

    /// Affine intensity fields make bilinear sampling exact, so the
    /// interpolated gradient is the true derivative.
    fn affine_image(rng: &mut ChaCha8Rng) -> ImagePlane {
        let (gu, gv) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        ImagePlane::from_image(IntensityImage::from_fn(128, 96, move |u, v| 200.0 + gu * u as f64 + gv * v as f64))
    }

    fn random_state(rng: &mut ChaCha8Rng) -> FrameState {
        let t = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        let w = Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03));
        FrameState::new(Tangent::from_parts(t, w), AffineBrightness::new(rng.random_range(-0.3..0.3), rng.random_range(-10.0..10.0), rng.random_range(0.5..2.0)))
    }

    #[test]
    fn photometric_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cam();
        for _ in 0..30 {
            let cur = affine_image(&mut rng);
            let patch: Patch = std::array::from_fn(|_| rng.random_range(20.0..230.0));
            let p = Vector2::new(rng.random_range(30.0..98.0), rng.random_range(25.0..70.0));
            let mut h = host(&patch, p);
            h.idepth = rng.random_range(0.3..1.5);
            h.affine = AffineBrightness::new(rng.random_range(-0.2..0.2), rng.random_range(-5.0..5.0), rng.random_range(0.5..2.0));
            let st = random_state(&mut rng);
            let b = photometric_residual(&h, &cur, &st, &c, 9.0);
            assert!(b.valid);
            for k in 0..PATTERN_LEN {
                let mut fd = Vector8::zeros();
                for i in 0..8 {
                    let step = if i < 6 { 1e-6 } else { 1e-5 };
                    let mut d = Vector8::zeros();
                    d[i] = step;
                    let plus = photometric_residual(&h, &cur, &st.oplus(&d).unwrap(), &c, 9.0);
                    let minus = photometric_residual(&h, &cur, &st.oplus(&-d).unwrap(), &c, 9.0);
                    fd[i] = (plus.r[k] - minus.r[k]) / (2.0 * step);
                }
                let err = (fd - b.j[k]).norm() / b.j[k].norm();
                assert!(err < 1e-4, "row {k}: {err}");
            }
        }
    }

    #[test]
    fn geometric_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cam();
        for _ in 0..30 {
            let p = Vector2::new(rng.random_range(10.0..118.0), rng.random_range(10.0..86.0));
            let d = rng.random_range(0.3..1.5);
            let st = random_state(&mut rng);
            let obs = Vector2::new(60.0, 40.0);
            let b = geometric_residual(&p, d, &Pose::identity(), &obs, &st, &c, 1.0, 1.5);
            assert!(b.j.fixed_columns::<2>(6).iter().all(|&x| x == 0.0));
            for row in 0..2 {
                let mut fd = Vector8::zeros();
                for i in 0..6 {
                    let mut dv = Vector8::zeros();
                    dv[i] = 1e-6;
                    let plus = geometric_residual(&p, d, &Pose::identity(), &obs, &st.oplus(&dv).unwrap(), &c, 1.0, 1.5);
                    let minus = geometric_residual(&p, d, &Pose::identity(), &obs, &st.oplus(&-dv).unwrap(), &c, 1.0, 1.5);
                    fd[i] = (plus.r[row] - minus.r[row]) / 2e-6;
                }
                let an = b.j.row(row).transpose();
                assert!((fd - an).norm() / an.norm() < 1e-5);
            }
            // invariant to the brightness parameters
            let mut st2 = st;
            st2.affine = AffineBrightness::new(1.0, 40.0, 3.0);
            let b2 = geometric_residual(&p, d, &Pose::identity(), &obs, &st2, &c, 1.0, 1.5);
            assert_eq!(b.r, b2.r);
            assert_eq!(b.j, b2.j);
        }
    }

    #[test]
    fn geometric_zero_at_exact_warp() {
        let c = cam();
        let st = FrameState::new(Tangent::from_parts(Vector3::new(0.02, 0.01, -0.03), Vector3::new(0.01, 0.0, 0.0)), AffineBrightness::default());
        let p = Vector2::new(30.0, 20.0);
        let (obs, _) = crate::geometry::warp(&c, &st, &p, 0.7, DEFAULT_BORDER).unwrap();
        let b = geometric_residual(&p, 0.7, &Pose::identity(), &obs, &st, &c, 0.5, 1.5);
        assert!(b.r.norm() < 1e-12);
        assert_eq!(b.w, 0.5);
    }

    #[test]
    fn huber_and_depth_weights() {
        assert_eq!(huber_weight(0.0, 2.0), 1.0);
        assert_eq!(huber_weight(4.0, 2.0), 1.0);
        assert_eq!(2.0 / 4f64.sqrt(), 1.0);
        assert_eq!(huber_weight(16.0, 2.0), 0.5);
        assert!((huber_norm(4.0, 2.0) - 4.0).abs() < 1e-15);
        assert_eq!(depth_variance_weight(0.5, 2.0), 1.0);
        assert_eq!(depth_variance_weight(2.0, 2.0), 0.25);
    }

    #[test]
    fn variance_estimates() {
        let blk = |r: f64| {
            let mut b = PhotometricBlock::invalid();
            b.r = [r; PATTERN_LEN];
            b.valid = true;
            b
        };
        let sys = ResidualSystem::new(vec![blk(3.0); 5], vec![]);
        assert_eq!(estimate_variances(&sys, 1e-4).unwrap(), (1e-4, 1e-4));
        assert_eq!(estimate_variances(&ResidualSystem::new(vec![], vec![]), 1e-4), Err(ResidualError::EmptySystem));

        let mut v = vec![0.0; 99];
        v.push(1e3);
        assert_eq!(robust_variance(&v, 1e-4), 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 2.0).unwrap();
        let samples: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        let s2 = robust_variance(&samples, 1e-4);
        assert!((s2 - 4.0).abs() < 0.4, "{s2}");
    }
}
