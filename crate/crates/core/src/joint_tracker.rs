//! Coarse-to-fine Levenberg–Marquardt tracking of a new frame against the
//! reference keyframe, minimizing photometric and geometric residuals jointly.

use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    match_corners, Corner, Descriptor, FeatureId, FeatureKind, Match, MatchConfig, MatchQuery, Patch,
};
use crate::geometry::{
    log, pixel_to_level, warp_unchecked, AffineBrightness, CameraIntrinsics, FrameState, Pose, Vector8,
};
use crate::image_pyramid::ImagePyramid;
use crate::residuals::{
    depth_variance_weight, geometric_residual, huber_norm, photometric_residual, GeometricBlock, HostPoint,
    Matrix8, PhotometricBlock, ResidualError, ResidualSystem,
};

/// Inlier matches below which tracking is considered lost when photometric
/// support is also too thin.
const MIN_TRACK_MATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub num_levels: usize,
    pub max_iterations_per_level: usize,
    pub lm_lambda_init: f64,
    pub lm_lambda_up: f64,
    pub lm_lambda_down: f64,
    pub convergence_eps: f64,
    /// Blocks whose mean per-row energy exceeds `factor² · σ²` are outliers.
    pub outlier_energy_factor: f64,
    pub min_track_points: usize,
    pub gamma_p: f64,
    pub gamma_g: f64,
    pub variance_floor: f64,
    /// Overrides the utility schedule with a constant weight.
    pub force_k: Option<f64>,
    /// When false no corners are matched and `K` is irrelevant.
    pub use_geometric: bool,
    pub matching: MatchConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            num_levels: 4,
            max_iterations_per_level: 10,
            lm_lambda_init: 1e-4,
            lm_lambda_up: 5.0,
            lm_lambda_down: 0.5,
            convergence_eps: 1e-6,
            outlier_energy_factor: 3.0,
            min_track_points: 50,
            gamma_p: 9.0,
            gamma_g: 1.5,
            variance_floor: 1e-4,
            force_k: None,
            use_geometric: true,
            matching: MatchConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            self.lm_lambda_init,
            self.lm_lambda_up,
            self.lm_lambda_down,
            self.convergence_eps,
            self.outlier_energy_factor,
            self.gamma_p,
            self.gamma_g,
            self.variance_floor,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.num_levels == 0 || self.max_iterations_per_level == 0 {
            return Err("tracker parameters must be positive".into());
        }
        if !(self.lm_lambda_down < 1.0 && self.lm_lambda_up > 1.0) {
            return Err("need lm_lambda_down < 1 < lm_lambda_up".into());
        }
        if self.force_k.is_some_and(|k| !(k >= 0.0)) {
            return Err("force_k must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("tracking lost: {photometric} photometric blocks, {geometric} matches")]
    TrackingLost { photometric: usize, geometric: usize },
    #[error("reference frame has no points")]
    EmptyReference,
}

/// `K = 5e^{−2l} / (1 + e^{(30 − N_g)/4})`.
pub fn utility_k(level: usize, n_g: usize) -> f64 {
    5.0 * (-2.0 * level as f64).exp() / (1.0 + ((30.0 - n_g as f64) / 4.0).exp())
}

/// Damped joint Gauss-Newton step over the 8 frame parameters. Each type is
/// normalized by its block count and variance before weighting by `K`.
/// Variables without any information are held fixed.
pub fn joint_step(sys: &ResidualSystem, k: f64, lambda: f64) -> Result<Vector8, ResidualError> {
    let ([hp, hg], [bp, bg]) = sys.normal_equations();
    let (np, ng) = (sys.n_p(), sys.n_g());
    if np == 0 && ng == 0 {
        return Err(ResidualError::EmptySystem);
    }
    let mut h = Matrix8::zeros();
    let mut b = Vector8::zeros();
    if np > 0 {
        let s = 1.0 / (np as f64 * sys.sigma2_p);
        h += hp * s;
        b += bp * s;
    }
    if ng > 0 && k > 0.0 {
        let s = k / (ng as f64 * sys.sigma2_g);
        h += hg * s;
        b += bg * s;
    }
    let scale = h.diagonal().max().max(f64::MIN_POSITIVE);
    for i in 0..8 {
        if h[(i, i)] <= 1e-12 * scale {
            h.row_mut(i).fill(0.0);
            h.column_mut(i).fill(0.0);
            h[(i, i)] = 1.0;
            b[i] = 0.0;
        } else {
            h[(i, i)] *= 1.0 + lambda;
        }
    }
    let chol = h.cholesky().ok_or(ResidualError::SingularHessian)?;
    let step = -chol.solve(&b);
    if step.iter().all(|x| x.is_finite()) {
        Ok(step)
    } else {
        Err(ResidualError::SingularHessian)
    }
}

/// A map point prepared for tracking, expressed relative to the reference
/// keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub id: FeatureId,
    pub kind: FeatureKind,
    pub host_to_ref: Pose,
    pub host_affine: AffineBrightness,
    /// Level-0 pixel in the host.
    pub p: Vector2<f64>,
    pub idepth: f64,
    pub idepth_variance: f64,
    /// Host intensities over the pattern, one entry per pyramid level.
    pub patches: Vec<Option<Patch>>,
    pub descriptor: Option<Descriptor>,
}

/// Read-only snapshot of the active map used to track one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub keyframe: crate::features::KeyframeId,
    /// World-to-camera pose of the reference keyframe.
    pub pose: Pose,
    pub camera: CameraIntrinsics,
    pub points: Vec<TrackPoint>,
}

#[derive(Debug, Clone)]
pub struct TrackingFrame<'a> {
    pub pyramid: &'a ImagePyramid,
    pub corners: &'a [Corner],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackResult {
    pub state: FrameState,
    /// `(n_p, n_g)` at the end of every processed level, coarse to fine.
    pub inlier_counts: Vec<(usize, usize)>,
    pub final_energy: f64,
    /// `K` used at every processed level, coarse to fine.
    pub k_trace: Vec<f64>,
    /// Accepted joint energies per level, starting with the level's initial
    /// energy.
    pub energy_trace: Vec<Vec<f64>>,
    pub converged: bool,
    /// Inlier matches at the finest level.
    pub matches: Vec<Match>,
    /// Corners that were searched for but not matched.
    pub match_failures: Vec<FeatureId>,
    /// Points whose blocks were outliers at the finest level.
    pub outliers: Vec<FeatureId>,
    /// Valid photometric blocks at the finest level.
    pub valid_photometric: usize,
    /// Residual variances `(σ_p², σ_g²)` at the finest level.
    pub sigma2: (f64, f64),
    /// RMS displacement (level-0 px) of the valid points between the
    /// reference keyframe and the tracked frame.
    pub rms_flow: f64,
    pub matching_ms: f64,
    pub optimization_ms: f64,
}

/// Predicts the next frame's state from the last two world-to-camera poses,
/// relative to the reference keyframe pose.
pub fn constant_velocity_prior(history: &[(Pose, AffineBrightness)], reference: &Pose) -> FrameState {
    let n = history.len();
    if n < 2 {
        let mut s = FrameState::identity();
        if let Some((_, affine)) = history.last() {
            s.affine = *affine;
        }
        return s;
    }
    let (prev, _) = &history[n - 2];
    let (last, affine) = &history[n - 1];
    let motion = *last * prev.inverse();
    let predicted = motion * *last;
    let relative = (predicted * reference.inverse()).normalized();
    match log(&relative) {
        Ok(t) => FrameState::new(t, *affine),
        Err(_) => FrameState::new(
            log(&(*last * reference.inverse()).normalized()).unwrap_or_default(),
            *affine,
        ),
    }
}

struct Level<'a> {
    index: usize,
    pyramid: &'a ImagePyramid,
}

/// Joint energy of a trial system measured with the normalization of the
/// linearization point; blocks that turned invalid keep their previous cost.
fn trial_energy(
    base: &ResidualSystem,
    trial: &ResidualSystem,
    k: f64,
    cfg: &TrackerConfig,
) -> f64 {
    let ep: f64 = base
        .photometric
        .iter()
        .zip(&trial.photometric)
        .filter(|(b, _)| b.valid)
        .map(|(b, t)| huber_norm(if t.valid { t.energy() } else { b.energy() }, cfg.gamma_p))
        .sum();
    let eg: f64 = base
        .geometric
        .iter()
        .zip(&trial.geometric)
        .filter(|(b, _)| b.valid)
        .map(|(b, t)| b.w_d * huber_norm(if t.valid { t.energy() } else { b.energy() }, cfg.gamma_g))
        .sum();
    base.normalized(ep, eg, k)
}

struct Evaluator<'a> {
    reference: &'a ReferenceFrame,
    cfg: &'a TrackerConfig,
    /// Photometric participants (indices into reference points).
    photometric: Vec<usize>,
    /// Geometric participants: (point index, level-0 observation, w_d).
    geometric: Vec<(usize, Vector2<f64>, f64)>,
    exposure: f64,
}

impl Evaluator<'_> {
    fn evaluate(&self, level: &Level, state: &FrameState) -> ResidualSystem {
        let l = level.index;
        let plane = level.pyramid.level(l);
        let c = level.pyramid.camera(l);
        let mut st = *state;
        st.affine.t = self.exposure;
        let photometric: Vec<PhotometricBlock> = self
            .photometric
            .iter()
            .map(|&i| {
                let pt = &self.reference.points[i];
                match pt.patches.get(l).and_then(|p| p.as_ref()) {
                    Some(patch) => {
                        let host = HostPoint {
                            p: pixel_to_level(&pt.p, l),
                            idepth: pt.idepth,
                            patch,
                            affine: pt.host_affine,
                            host_to_ref: pt.host_to_ref,
                        };
                        photometric_residual(&host, plane, &st, c, self.cfg.gamma_p)
                    }
                    None => PhotometricBlock::invalid(),
                }
            })
            .collect();
        let geometric: Vec<GeometricBlock> = self
            .geometric
            .iter()
            .map(|(i, obs, w_d)| {
                let pt = &self.reference.points[*i];
                geometric_residual(
                    &pixel_to_level(&pt.p, l),
                    pt.idepth,
                    &pt.host_to_ref,
                    &pixel_to_level(obs, l),
                    &st,
                    c,
                    *w_d,
                    self.cfg.gamma_g,
                )
            })
            .collect();
        ResidualSystem::new(photometric, geometric)
    }
}

fn is_outlier_p(b: &PhotometricBlock, sigma2: f64, factor: f64) -> bool {
    b.valid && b.energy() / b.r.len() as f64 > factor * factor * sigma2
}

fn is_outlier_g(b: &GeometricBlock, sigma2: f64, factor: f64) -> bool {
    b.valid && b.energy() / 2.0 > factor * factor * sigma2
}

/// Tracks `frame` against `reference` starting from `prior`.
pub fn track_frame(
    reference: &ReferenceFrame,
    frame: &TrackingFrame,
    prior: &FrameState,
    cfg: &TrackerConfig,
) -> Result<TrackResult, TrackError> {
    if reference.points.is_empty() {
        return Err(TrackError::EmptyReference);
    }
    let mut result = TrackResult::default();
    let exposure = frame.pyramid.exposure;
    let mut state = *prior;
    state.affine.t = exposure;

    let t0 = Instant::now();
    let mut geometric = Vec::new();
    if cfg.use_geometric {
        let prior_pose = prior.pose();
        let queries: Vec<MatchQuery> = reference
            .points
            .iter()
            .filter(|p| p.kind == FeatureKind::Corner)
            .filter_map(|p| {
                Some(MatchQuery {
                    feature: p.id,
                    p: p.p,
                    idepth: p.idepth,
                    descriptor: p.descriptor?,
                    host_to_frame: prior_pose * p.host_to_ref,
                })
            })
            .collect();
        let outcome = match_corners(&queries, frame.corners, &reference.camera, &cfg.matching);
        let index: std::collections::HashMap<FeatureId, usize> =
            reference.points.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let max_inv_var = outcome
            .matches
            .iter()
            .map(|m| 1.0 / reference.points[index[&m.feature]].idepth_variance)
            .fold(0.0, f64::max);
        for m in &outcome.matches {
            let i = index[&m.feature];
            let w_d = depth_variance_weight(reference.points[i].idepth_variance, max_inv_var);
            geometric.push((i, m.obs, w_d));
        }
        result.matches = outcome.matches;
        result.match_failures = outcome.failed;
    }
    result.matching_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let mut eval = Evaluator {
        reference,
        cfg,
        photometric: (0..reference.points.len()).collect(),
        geometric,
        exposure,
    };
    let levels = cfg.num_levels.min(frame.pyramid.num_levels()).max(1);
    let all_photometric = eval.photometric.clone();
    let mut final_sys = None;
    let mut dropped_matches = Vec::new();
    for (stage, l) in (0..levels).rev().enumerate() {
        let level = Level {
            index: l,
            pyramid: frame.pyramid,
        };
        // photometric outliers are re-judged at every level
        eval.photometric = all_photometric.clone();
        let mut sys = eval.evaluate(&level, &state);
        if sys.update_variances(cfg.variance_floor).is_err() {
            continue;
        }
        let n_g = sys.n_g();
        let k = if cfg.use_geometric {
            cfg.force_k.unwrap_or_else(|| utility_k(stage, n_g))
        } else {
            0.0
        };
        result.k_trace.push(k);
        let mut energy = sys.energy(k, cfg.gamma_p, cfg.gamma_g);
        let mut trace = vec![energy];
        let mut lambda = cfg.lm_lambda_init;
        let mut converged = false;
        for _ in 0..cfg.max_iterations_per_level {
            let Ok(step) = joint_step(&sys, k, lambda) else {
                break;
            };
            let Ok(trial_state) = state.oplus(&step) else {
                lambda *= cfg.lm_lambda_up;
                continue;
            };
            let mut trial = eval.evaluate(&level, &trial_state);
            let e = trial_energy(&sys, &trial, k, cfg);
            if e < energy {
                state = trial_state;
                trial.sigma2_p = sys.sigma2_p;
                trial.sigma2_g = sys.sigma2_g;
                sys = trial;
                // trial energy may differ from the fresh one when blocks flip validity
                energy = sys.energy(k, cfg.gamma_p, cfg.gamma_g).min(e);
                trace.push(energy);
                lambda *= cfg.lm_lambda_down;
            } else {
                lambda *= cfg.lm_lambda_up;
            }
            if step.norm() < cfg.convergence_eps {
                converged = true;
                break;
            }
        }
        result.converged = converged;
        result.energy_trace.push(trace);

        // re-estimate variances at the solution and drop outliers
        let _ = sys.update_variances(cfg.variance_floor);
        let f = cfg.outlier_energy_factor;
        let mut kept = Vec::new();
        for (g, b) in eval.geometric.iter().zip(&sys.geometric) {
            if b.valid && !is_outlier_g(b, sys.sigma2_g, f) {
                kept.push(*g);
            } else {
                dropped_matches.push(reference.points[g.0].id);
            }
        }
        eval.geometric = kept;
        result.inlier_counts.push((
            sys.photometric
                .iter()
                .filter(|b| b.valid && !is_outlier_p(b, sys.sigma2_p, f))
                .count(),
            eval.geometric.len(),
        ));
        result.final_energy = energy;
        final_sys = Some(sys);
    }
    result.optimization_ms = t1.elapsed().as_secs_f64() * 1e3;

    let sys = final_sys.ok_or(TrackError::TrackingLost {
        photometric: 0,
        geometric: 0,
    })?;
    let f = cfg.outlier_energy_factor;
    for (&i, b) in eval.photometric.iter().zip(&sys.photometric) {
        if is_outlier_p(b, sys.sigma2_p, f) {
            result.outliers.push(reference.points[i].id);
        }
    }
    // matches rejected by the optimizer count as failed matches
    result.match_failures.extend(dropped_matches);
    result.match_failures.sort();
    result.match_failures.dedup();
    let inliers: std::collections::HashSet<FeatureId> =
        eval.geometric.iter().map(|g| reference.points[g.0].id).collect();
    result.matches.retain(|m| inliers.contains(&m.feature));
    result.valid_photometric = sys.n_p();
    result.sigma2 = (sys.sigma2_p, sys.sigma2_g);
    result.state = state;

    let pose = state.pose();
    let mut flow2 = 0.0;
    let mut n_flow = 0usize;
    for (&i, b) in eval.photometric.iter().zip(&sys.photometric) {
        if !b.valid {
            continue;
        }
        let pt = &reference.points[i];
        let in_ref = warp_unchecked(&reference.camera, &pt.host_to_ref, &pt.p, pt.idepth);
        let in_cur = warp_unchecked(&reference.camera, &(pose * pt.host_to_ref), &pt.p, pt.idepth);
        if let (Ok(a), Ok(b)) = (in_ref, in_cur) {
            flow2 += (a.pixel - b.pixel).norm_squared();
            n_flow += 1;
        }
    }
    result.rms_flow = if n_flow > 0 { (flow2 / n_flow as f64).sqrt() } else { 0.0 };

    if result.valid_photometric < cfg.min_track_points && result.matches.len() < MIN_TRACK_MATCHES {
        return Err(TrackError::TrackingLost {
            photometric: result.valid_photometric,
            geometric: result.matches.len(),
        });
    }
    Ok(result)
}
