//! Windowed photometric bundle adjustment over keyframe states and point
//! inverse depths. Depths are eliminated with the Schur complement.

use nalgebra::{DMatrix, DVector, Matrix2x3, RowVector2, SMatrix, Vector2};

use crate::features::{pattern_offset, Patch, PATTERN_LEN};
use crate::geometry::{
    bearing, exp, projection_point_jacobian, projection_pose_jacobian, AffineBrightness, CameraIntrinsics, Pose,
    Tangent, Vector8,
};
use crate::image_pyramid::ImagePlane;
use crate::residuals::{huber_norm, huber_weight};

use super::MapError;

type Matrix16 = SMatrix<f64, 16, 16>;
type Vector16 = SMatrix<f64, 16, 1>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    pub iterations: usize,
    pub convergence_eps: f64,
    pub lambda_init: f64,
    pub gamma_p: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            convergence_eps: 1e-6,
            lambda_init: 1e-4,
            gamma_p: 9.0,
        }
    }
}

/// A keyframe taking part in the adjustment.
#[derive(Debug, Clone)]
pub struct BaFrame<'a> {
    pub plane: &'a ImagePlane,
    /// World-to-camera.
    pub pose: Pose,
    pub affine: AffineBrightness,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaPoint {
    /// Index of the host frame.
    pub host: usize,
    pub p: Vector2<f64>,
    pub patch: Patch,
    pub idepth: f64,
    pub fixed: bool,
}

/// Normal equations `[Hcc Hcd; Hcdᵀ diag(hdd)] [δc; δd] = −[bc; bd]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub hcc: DMatrix<f64>,
    pub hcd: DMatrix<f64>,
    pub hdd: DVector<f64>,
    pub bc: DVector<f64>,
    pub bd: DVector<f64>,
}

impl NormalEquations {
    fn zeros(nc: usize, nd: usize) -> Self {
        Self {
            hcc: DMatrix::zeros(nc, nc),
            hcd: DMatrix::zeros(nc, nd),
            hdd: DVector::zeros(nd),
            bc: DVector::zeros(nc),
            bd: DVector::zeros(nd),
        }
    }

    /// Damped copies of the diagonal blocks. Camera variables and depths
    /// without information are pinned to a zero step.
    fn damped(&self, lambda: f64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, Vec<bool>) {
        let mut hcc = self.hcc.clone();
        let mut bc = self.bc.clone();
        let scale = hcc.diagonal().max().max(f64::MIN_POSITIVE);
        for i in 0..hcc.nrows() {
            if hcc[(i, i)] <= 1e-12 * scale {
                hcc.row_mut(i).fill(0.0);
                hcc.column_mut(i).fill(0.0);
                hcc[(i, i)] = 1.0;
                bc[i] = 0.0;
            } else {
                hcc[(i, i)] *= 1.0 + lambda;
            }
        }
        let mut live = vec![true; self.hdd.len()];
        let mut hdd = self.hdd.clone();
        for (j, h) in hdd.iter_mut().enumerate() {
            if *h > 0.0 {
                *h *= 1.0 + lambda;
            } else {
                live[j] = false;
            }
        }
        (hcc, bc, hdd, live)
    }

    /// Camera step from the reduced system, then per-depth back-substitution.
    pub fn solve_schur(&self, lambda: f64) -> Result<(DVector<f64>, DVector<f64>), MapError> {
        let (hcc, bc, hdd, live) = self.damped(lambda);
        let nd = hdd.len();
        let mut w = self.hcd.clone();
        for j in 0..nd {
            let inv = if live[j] { 1.0 / hdd[j] } else { 0.0 };
            w.column_mut(j).scale_mut(inv);
        }
        let reduced = &hcc - &w * self.hcd.transpose();
        let rhs = &bc - &w * &self.bd;
        let dc = solve_spd(reduced, &rhs)?;
        let mut dd = DVector::zeros(nd);
        let coupling = self.hcd.transpose() * &dc;
        for j in 0..nd {
            if live[j] {
                dd[j] = -(self.bd[j] + coupling[j]) / hdd[j];
            }
        }
        finite(&dc)?;
        finite(&dd)?;
        Ok((dc, dd))
    }

    /// Reference solve of the full system, used to check the elimination.
    pub fn solve_dense(&self, lambda: f64) -> Result<(DVector<f64>, DVector<f64>), MapError> {
        let (hcc, bc, hdd, live) = self.damped(lambda);
        let (nc, nd) = (hcc.nrows(), hdd.len());
        let mut h = DMatrix::zeros(nc + nd, nc + nd);
        let mut b = DVector::zeros(nc + nd);
        h.view_mut((0, 0), (nc, nc)).copy_from(&hcc);
        b.rows_mut(0, nc).copy_from(&bc);
        for j in 0..nd {
            if live[j] {
                h.view_mut((0, nc + j), (nc, 1)).copy_from(&self.hcd.column(j));
                h.view_mut((nc + j, 0), (1, nc)).copy_from(&self.hcd.column(j).transpose());
                h[(nc + j, nc + j)] = hdd[j];
                b[nc + j] = self.bd[j];
            } else {
                h[(nc + j, nc + j)] = 1.0;
            }
        }
        let x = solve_spd(h, &b)?;
        Ok((x.rows(0, nc).into_owned(), x.rows(nc, nd).into_owned()))
    }
}

fn solve_spd(h: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, MapError> {
    if h.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol = h.cholesky().ok_or(MapError::SingularHessian)?;
    Ok(-chol.solve(b))
}

fn finite(v: &DVector<f64>) -> Result<(), MapError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MapError::SingularHessian)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaReport {
    pub iterations: usize,
    pub accepted: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Energy after every accepted step, starting with the initial one.
    pub energy_trace: Vec<f64>,
    pub residual_pairs: usize,
}

/// One (point, target frame) residual pair.
struct PairEval {
    energy: f64,
    valid: bool,
}

#[derive(Debug, Clone)]
pub struct BaProblem<'a> {
    pub camera: CameraIntrinsics,
    pub frames: Vec<BaFrame<'a>>,
    pub points: Vec<BaPoint>,
    pub cfg: BaConfig,
}

impl<'a> BaProblem<'a> {
    fn camera_index(&self) -> (Vec<Option<usize>>, usize) {
        let mut n = 0;
        let idx = self
            .frames
            .iter()
            .map(|f| {
                (!f.fixed).then(|| {
                    n += 1;
                    n - 1
                })
            })
            .collect();
        (idx, n)
    }

    fn depth_index(&self) -> (Vec<Option<usize>>, usize) {
        let mut n = 0;
        let idx = self
            .points
            .iter()
            .map(|p| {
                (!p.fixed).then(|| {
                    n += 1;
                    n - 1
                })
            })
            .collect();
        (idx, n)
    }

    /// Evaluates every pair; when `ne` is given also accumulates the normal
    /// equations.
    fn evaluate(&self, mut ne: Option<&mut NormalEquations>) -> Vec<PairEval> {
        let (cam_idx, _) = self.camera_index();
        let (depth_idx, _) = self.depth_index();
        let c = &self.camera;
        let mut out = Vec::new();
        for (pi, pt) in self.points.iter().enumerate() {
            let host = &self.frames[pt.host];
            for (ti, target) in self.frames.iter().enumerate() {
                if ti == pt.host {
                    continue;
                }
                let host_to_target = target.pose * host.pose.inverse();
                let s = host.affine.transfer_gain(&target.affine);
                let mut r = [0.0; PATTERN_LEN];
                let mut jc = [Vector16::zeros(); PATTERN_LEN];
                let mut jd = [0.0; PATTERN_LEN];
                let mut valid = pt.idepth > 0.0;
                let adj = host_to_target.adjoint();
                for k in 0..PATTERN_LEN {
                    if !valid {
                        break;
                    }
                    let q = pt.p + pattern_offset(k);
                    let b = bearing(c, &q);
                    let x = host_to_target.rotation * b / pt.idepth + host_to_target.translation;
                    if !(x.z > 1e-4) {
                        valid = false;
                        break;
                    }
                    let pix = Vector2::new(c.fu * x.x / x.z + c.cu, c.fv * x.y / x.z + c.cv);
                    if !target.plane.in_bounds(&pix) {
                        valid = false;
                        break;
                    }
                    let sample = target.plane.sample_unchecked(&pix);
                    let host_term = pt.patch[k] - host.affine.b;
                    r[k] = (sample.intensity - target.affine.b) - s * host_term;
                    if ne.is_some() {
                        let g = RowVector2::new(sample.grad_u, sample.grad_v);
                        let jt = g * projection_pose_jacobian(c, &x);
                        let jh = -jt * adj;
                        let mut row = Vector16::zeros();
                        row.fixed_rows_mut::<6>(0).copy_from(&jh.transpose());
                        row[6] = s * host_term;
                        row[7] = s;
                        row.fixed_rows_mut::<6>(8).copy_from(&jt.transpose());
                        row[14] = -s * host_term;
                        row[15] = -1.0;
                        jc[k] = row;
                        let jp: Matrix2x3<f64> = projection_point_jacobian(c, &x);
                        let dx = -(host_to_target.rotation * b) / (pt.idepth * pt.idepth);
                        jd[k] = (g * jp * dx)[0];
                    }
                }
                valid = valid && r.iter().all(|v| v.is_finite());
                if !valid {
                    out.push(PairEval {
                        energy: 0.0,
                        valid: false,
                    });
                    continue;
                }
                let e: f64 = r.iter().map(|v| v * v).sum();
                out.push(PairEval { energy: e, valid: true });
                let Some(ne) = ne.as_deref_mut() else { continue };
                let w = huber_weight(e, self.cfg.gamma_p);
                let mut h = Matrix16::zeros();
                let mut bvec = Vector16::zeros();
                let mut hd = Vector16::zeros();
                let (mut dd, mut bd) = (0.0, 0.0);
                for k in 0..PATTERN_LEN {
                    h += w * jc[k] * jc[k].transpose();
                    bvec += w * jc[k] * r[k];
                    hd += w * jc[k] * jd[k];
                    dd += w * jd[k] * jd[k];
                    bd += w * jd[k] * r[k];
                }
                let blocks = [(cam_idx[pt.host], 0usize), (cam_idx[ti], 8usize)];
                for &(ca, oa) in &blocks {
                    let Some(ca) = ca else { continue };
                    for &(cb, ob) in &blocks {
                        let Some(cb) = cb else { continue };
                        let mut view = ne.hcc.view_mut((8 * ca, 8 * cb), (8, 8));
                        view += h.fixed_view::<8, 8>(oa, ob);
                    }
                    let mut bv = ne.bc.rows_mut(8 * ca, 8);
                    bv += bvec.fixed_rows::<8>(oa);
                    if let Some(di) = depth_idx[pi] {
                        let mut col = ne.hcd.view_mut((8 * ca, di), (8, 1));
                        col += hd.fixed_rows::<8>(oa);
                    }
                }
                if let Some(di) = depth_idx[pi] {
                    ne.hdd[di] += dd;
                    ne.bd[di] += bd;
                }
            }
        }
        out
    }

    /// Normal equations at the current state.
    pub fn linearize(&self) -> NormalEquations {
        let (_, nc) = self.camera_index();
        let (_, nd) = self.depth_index();
        let mut ne = NormalEquations::zeros(8 * nc, nd);
        self.evaluate(Some(&mut ne));
        ne
    }

    /// Huber-norm photometric energy over all valid pairs.
    pub fn energy(&self) -> f64 {
        self.evaluate(None)
            .iter()
            .filter(|p| p.valid)
            .map(|p| huber_norm(p.energy, self.cfg.gamma_p))
            .sum()
    }

    fn apply(&self, dc: &DVector<f64>, dd: &DVector<f64>) -> Option<BaProblem<'a>> {
        let (cam_idx, _) = self.camera_index();
        let (depth_idx, _) = self.depth_index();
        let mut next = self.clone();
        for (f, ci) in next.frames.iter_mut().zip(&cam_idx) {
            if let Some(ci) = ci {
                let d: Vector8 = dc.fixed_rows::<8>(8 * ci).into_owned();
                let t = Tangent::from(d.fixed_rows::<6>(0).into_owned());
                f.pose = (exp(&t) * f.pose).normalized();
                f.affine.a += d[6];
                f.affine.b += d[7];
            }
        }
        for (p, di) in next.points.iter_mut().zip(&depth_idx) {
            if let Some(di) = di {
                p.idepth += dd[*di];
                if !(p.idepth > 0.0) {
                    return None;
                }
            }
        }
        Some(next)
    }

    /// Levenberg–Marquardt on the windowed energy. Pairs that become invalid
    /// in a trial keep their energy from the linearization point.
    pub fn solve(&mut self) -> Result<BaReport, MapError> {
        let mut report = BaReport::default();
        let mut lambda = self.cfg.lambda_init;
        let mut base = self.evaluate(None);
        report.residual_pairs = base.iter().filter(|p| p.valid).count();
        if report.residual_pairs == 0 {
            return Ok(report);
        }
        let gamma = self.cfg.gamma_p;
        let sum = |ev: &[PairEval]| -> f64 { ev.iter().filter(|p| p.valid).map(|p| huber_norm(p.energy, gamma)).sum() };
        let mut energy = sum(&base);
        report.initial_energy = energy;
        report.energy_trace.push(energy);
        let mut ne = self.linearize();
        for _ in 0..self.cfg.iterations {
            report.iterations += 1;
            let (dc, dd) = ne.solve_schur(lambda)?;
            let norm = (dc.norm_squared() + dd.norm_squared()).sqrt();
            if let Some(trial) = self.apply(&dc, &dd) {
                let ev = trial.evaluate(None);
                let e: f64 = base
                    .iter()
                    .zip(&ev)
                    .filter(|(b, _)| b.valid)
                    .map(|(b, t)| huber_norm(if t.valid { t.energy } else { b.energy }, gamma))
                    .sum();
                if e < energy {
                    *self = trial;
                    base = ev;
                    energy = sum(&base).min(e);
                    report.accepted += 1;
                    report.energy_trace.push(energy);
                    lambda *= 0.5;
                    ne = self.linearize();
                } else {
                    lambda *= 5.0;
                }
            } else {
                lambda *= 5.0;
            }
            if norm < self.cfg.convergence_eps {
                break;
            }
        }
        report.final_energy = energy;
        Ok(report)
    }
}
