//! Keyframe lifecycle: candidate depth filtering, keyframe selection,
//! activation on the occupancy grid, windowed photometric bundle adjustment,
//! structure-only refinement of marginalized corners and marginalization.

pub mod ba;
pub mod depth_filter;
pub mod structure;

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    activate_features, sample_patch, sample_pixel_candidates, update_occupancy, ActivationCandidate, Corner,
    CornerConfig, Feature, FeatureError, FeatureId, FeatureKind, FeatureStatus, KeyframeId, OccupancyGrid,
    SamplingConfig,
};
use crate::geometry::{
    backproject, pixel_to_level, warp_unchecked, AffineBrightness, CameraIntrinsics, FrameState, Pose,
};
use crate::image_pyramid::{ImagePyramid, SharedPyramid};
use crate::joint_tracker::{ReferenceFrame, TrackPoint, TrackResult};

pub use ba::{BaConfig, BaFrame, BaPoint, BaProblem, BaReport, NormalEquations};
pub use depth_filter::{epipolar_search, DepthHypothesis, SearchConfig, SearchOutcome, SearchPoint};
pub use structure::refine_idepth;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("singular bundle-adjustment system")]
    SingularHessian,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("map audit failed: {0}")]
    Audit(String),
    #[error("unknown keyframe {0:?}")]
    UnknownKeyframe(KeyframeId),
    #[error("the map has no keyframes")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    /// Maximum number of hybrid keyframes.
    pub window_size: usize,
    pub ba_iterations: usize,
    pub ba_convergence_eps: f64,
    pub ba_lambda_init: f64,
    pub marginalization_epsilon: f64,
    /// Minimum baseline for an epipolar search.
    pub b_min: f64,
    /// Keyframe weights per pixel of RMS flow and per unit of log gain.
    pub w_f: f64,
    pub w_a: f64,
    /// A keyframe is taken when valid photometric blocks fall below this
    /// fraction of the count at the first frame tracked against the reference.
    pub min_valid_ratio: f64,
    /// Candidates activate once `σ_d² < ratio · d²`.
    pub activation_variance_ratio: f64,
    /// Initial `σ_d / d` of new candidates.
    pub initial_depth_ratio: f64,
    pub corner_quota: usize,
    pub pixel_quota: usize,
    pub cell_size: usize,
    pub max_match_failures: u32,
    pub gamma_p: f64,
    pub gamma_g: f64,
    pub outlier_energy_factor: f64,
    pub search_noise_variance: f64,
    pub observation_variance_floor: f64,
    pub max_search_steps: usize,
    pub structure_iterations: usize,
    /// Frames of candidate filtering before random initial depths activate.
    pub bootstrap_frames: usize,
    /// Detect, match and host corners.
    pub use_corners: bool,
    /// Let corners contribute photometric residuals.
    pub direct_corners: bool,
    pub corners: CornerConfig,
    pub sampling: SamplingConfig,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            window_size: 7,
            ba_iterations: 15,
            ba_convergence_eps: 1e-6,
            ba_lambda_init: 1e-4,
            marginalization_epsilon: 1e-3,
            b_min: 1e-4,
            w_f: 0.06,
            w_a: 0.2,
            min_valid_ratio: 0.6,
            activation_variance_ratio: 0.01,
            initial_depth_ratio: 0.5,
            corner_quota: 60,
            pixel_quota: 150,
            cell_size: 10,
            max_match_failures: 5,
            gamma_p: 9.0,
            gamma_g: 1.5,
            outlier_energy_factor: 3.0,
            search_noise_variance: 16.0,
            observation_variance_floor: 1e-6,
            max_search_steps: 100,
            structure_iterations: 5,
            bootstrap_frames: 10,
            use_corners: true,
            direct_corners: true,
            corners: CornerConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_size < 2 {
            return Err("window_size must be at least 2".into());
        }
        let positive = [
            self.marginalization_epsilon,
            self.b_min,
            self.activation_variance_ratio,
            self.initial_depth_ratio,
            self.gamma_p,
            self.gamma_g,
            self.outlier_energy_factor,
            self.search_noise_variance,
            self.observation_variance_floor,
            self.min_valid_ratio,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.cell_size == 0 {
            return Err("mapper parameters must be positive".into());
        }
        Ok(())
    }

    fn search(&self) -> SearchConfig {
        SearchConfig {
            b_min: self.b_min,
            max_steps: self.max_search_steps,
            noise_variance: self.search_noise_variance,
            observation_variance_floor: self.observation_variance_floor,
            outlier_energy_factor: self.outlier_energy_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyframeKind {
    Hybrid,
    Indirect,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub frame_index: usize,
    pub timestamp: f64,
    pub pyramid: SharedPyramid,
    /// World-to-camera.
    pub pose: Pose,
    pub affine: AffineBrightness,
    pub features: Vec<Feature>,
    kind: KeyframeKind,
    /// Valid photometric blocks of the first frame tracked against it.
    pub reference_count: Option<usize>,
}

impl Keyframe {
    pub fn new(
        id: KeyframeId,
        frame_index: usize,
        timestamp: f64,
        pyramid: SharedPyramid,
        pose: Pose,
        affine: AffineBrightness,
    ) -> Self {
        Self {
            id,
            frame_index,
            timestamp,
            pyramid,
            pose,
            affine,
            features: Vec::new(),
            kind: KeyframeKind::Hybrid,
            reference_count: None,
        }
    }

    pub fn kind(&self) -> KeyframeKind {
        self.kind
    }

    fn demote(&mut self) {
        self.kind = KeyframeKind::Indirect;
    }
}

/// A frame handed from the tracker to the mapper.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub index: usize,
    pub timestamp: f64,
    pub pyramid: SharedPyramid,
    pub corners: Vec<Corner>,
}

#[derive(Debug, Clone)]
pub struct TrackedFrame {
    pub input: FrameInput,
    /// Keyframe the state is expressed against.
    pub reference: KeyframeId,
    pub state: FrameState,
    pub track: TrackResult,
}

/// How the first keyframe's depths are seeded.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthInit {
    /// Per-pixel level-0 inverse depth (0 where unknown), row-major.
    GroundTruth { idepth: Vec<f64>, width: usize },
    /// `idepth ~ U[0.5, 2]` with unit variance, refined for a few frames.
    Random { seed: u64 },
}

/// A map point in world coordinates, for dumps and plots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub id: FeatureId,
    pub kind: FeatureKind,
    pub status: FeatureStatus,
    pub world: Vector3<f64>,
    pub idepth_variance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CandidateStats {
    pub updated: usize,
    pub skipped: usize,
    pub outliers: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapperReport {
    pub keyframe: Option<KeyframeId>,
    pub marginalized: Option<KeyframeId>,
    pub candidates: CandidateStats,
    pub activated: usize,
    pub new_candidates: usize,
    /// Active pairs with overlapping occupancy blocks right after activation.
    pub overlaps: usize,
    pub ba: Option<BaReport>,
    pub structure_refined: usize,
    pub occupancy_ms: f64,
    pub candidate_ms: f64,
    pub init_ms: f64,
    pub ba_ms: f64,
    pub local_map_ms: f64,
    pub structure_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// True when the frame should become a keyframe: large flow or brightness
/// change relative to `ref_kf`, or too few valid photometric blocks left.
pub fn keyframe_decision(track: &TrackResult, frame: &ImagePyramid, ref_kf: &Keyframe, cfg: &MapperConfig) -> bool {
    let mut affine = track.state.affine;
    affine.t = frame.exposure;
    let log_gain = ref_kf.affine.transfer_gain(&affine).ln().abs();
    if cfg.w_f * track.rms_flow + cfg.w_a * log_gain > 1.0 {
        return true;
    }
    ref_kf
        .reference_count
        .is_some_and(|n| (track.valid_photometric as f64) < cfg.min_valid_ratio * n as f64)
}

/// Inverse depth with a tiny variance, so ground-truth seeds activate at once.
const GT_VARIANCE_RATIO: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LocalMap {
    camera: CameraIntrinsics,
    cfg: MapperConfig,
    hybrid: Vec<Keyframe>,
    indirect: Vec<Keyframe>,
    grid: OccupancyGrid,
    observations: HashMap<FeatureId, Vec<(KeyframeId, Vector2<f64>)>>,
    retired_poses: HashMap<KeyframeId, Pose>,
    archive: Vec<MapPoint>,
    next_feature: u64,
    next_keyframe: u64,
    bootstrap_left: usize,
    sigma2_p: f64,
}

/// Where a feature lives.
#[derive(Debug, Clone, Copy)]
struct Slot {
    indirect: bool,
    kf: usize,
    feature: usize,
}

impl LocalMap {
    pub fn new(camera: CameraIntrinsics, cfg: MapperConfig) -> Self {
        Self {
            grid: OccupancyGrid::new(camera.width, camera.height, cfg.cell_size),
            camera,
            cfg,
            hybrid: Vec::new(),
            indirect: Vec::new(),
            observations: HashMap::new(),
            retired_poses: HashMap::new(),
            archive: Vec::new(),
            next_feature: 0,
            next_keyframe: 0,
            bootstrap_left: 0,
            sigma2_p: cfg.search_noise_variance,
        }
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.camera
    }

    pub fn hybrid_window(&self) -> &[Keyframe] {
        &self.hybrid
    }

    pub fn indirect_set(&self) -> &[Keyframe] {
        &self.indirect
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn newest(&self) -> Option<&Keyframe> {
        self.hybrid.last()
    }

    pub fn is_bootstrapping(&self) -> bool {
        self.bootstrap_left > 0
    }

    pub fn observations(&self, id: FeatureId) -> &[(KeyframeId, Vector2<f64>)] {
        self.observations.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn live(&self) -> impl Iterator<Item = &Keyframe> {
        self.hybrid.iter().chain(&self.indirect)
    }

    /// Current world-to-camera pose of a keyframe, including ones that have
    /// left the map.
    pub fn keyframe_pose(&self, id: KeyframeId) -> Option<Pose> {
        self.live()
            .find(|k| k.id == id)
            .map(|k| k.pose)
            .or_else(|| self.retired_poses.get(&id).copied())
    }

    fn alloc_feature(&mut self) -> FeatureId {
        self.next_feature += 1;
        FeatureId(self.next_feature - 1)
    }

    /// Appends a hand-built keyframe to the window. Ids must be unique.
    pub fn push_keyframe(&mut self, kf: Keyframe) {
        self.next_keyframe = self.next_keyframe.max(kf.id.0 + 1);
        for f in &kf.features {
            self.next_feature = self.next_feature.max(f.id.0 + 1);
        }
        self.hybrid.push(kf);
    }

    fn slots(&self) -> HashMap<FeatureId, Slot> {
        let mut out = HashMap::new();
        for (indirect, set) in [(false, &self.hybrid), (true, &self.indirect)] {
            for (k, kf) in set.iter().enumerate() {
                for (i, f) in kf.features.iter().enumerate() {
                    out.insert(
                        f.id,
                        Slot {
                            indirect,
                            kf: k,
                            feature: i,
                        },
                    );
                }
            }
        }
        out
    }

    fn feature_mut(&mut self, slot: Slot) -> &mut Feature {
        let set = if slot.indirect { &mut self.indirect } else { &mut self.hybrid };
        &mut set[slot.kf].features[slot.feature]
    }

    /// Every feature of the live map together with its host pose.
    pub fn features(&self) -> impl Iterator<Item = (&Keyframe, &Feature)> {
        self.live().flat_map(|k| k.features.iter().map(move |f| (k, f)))
    }

    fn world_point(kf_pose: &Pose, c: &CameraIntrinsics, f: &Feature) -> Vector3<f64> {
        let x = backproject(c, &f.p, f.idepth.max(1e-9)).unwrap_or_else(|_| Vector3::zeros());
        kf_pose.inverse().transform(&x)
    }

    /// Live and retired points with world positions.
    pub fn map_points(&self) -> Vec<MapPoint> {
        let mut out = self.archive.clone();
        for (k, f) in self.features() {
            out.push(MapPoint {
                id: f.id,
                kind: f.kind,
                status: f.status(),
                world: Self::world_point(&k.pose, &self.camera, f),
                idepth_variance: f.idepth_variance,
            });
        }
        out
    }

    fn archive_keyframe(&mut self, kf: &Keyframe) {
        for f in &kf.features {
            if f.status() == FeatureStatus::Candidate {
                continue;
            }
            self.archive.push(MapPoint {
                id: f.id,
                kind: f.kind,
                status: f.status(),
                world: Self::world_point(&kf.pose, &self.camera, f),
                idepth_variance: f.idepth_variance,
            });
            self.observations.remove(&f.id);
        }
        self.retired_poses.insert(kf.id, kf.pose);
    }

    /// Read-only tracking snapshot against the newest keyframe.
    pub fn snapshot(&self) -> Result<ReferenceFrame, MapError> {
        let reference = self.hybrid.last().ok_or(MapError::Empty)?;
        let cfg = &self.cfg;
        let mut points = Vec::new();
        for kf in self.live() {
            let host_to_ref = reference.pose * kf.pose.inverse();
            let levels = kf.pyramid.num_levels();
            for f in &kf.features {
                let bootstrap = self.bootstrap_left > 0 && f.status() == FeatureStatus::Candidate;
                let photometric = kf.kind == KeyframeKind::Hybrid
                    && (f.status() == FeatureStatus::Active || bootstrap)
                    && (f.kind == FeatureKind::Pixel || cfg.direct_corners);
                let geometric = f.is_corner()
                    && cfg.use_corners
                    && match f.status() {
                        FeatureStatus::Active => true,
                        FeatureStatus::Marginalized => f.match_failures < cfg.max_match_failures,
                        _ => false,
                    };
                if !photometric && !geometric {
                    continue;
                }
                let patches = (0..levels)
                    .map(|l| {
                        if photometric {
                            sample_patch(kf.pyramid.level(l), &pixel_to_level(&f.p, l))
                        } else {
                            None
                        }
                    })
                    .collect();
                points.push(TrackPoint {
                    id: f.id,
                    kind: f.kind,
                    host_to_ref,
                    host_affine: kf.affine,
                    p: f.p,
                    idepth: f.idepth,
                    idepth_variance: f.idepth_variance,
                    patches,
                    descriptor: if geometric { f.descriptor } else { None },
                });
            }
        }
        Ok(ReferenceFrame {
            keyframe: reference.id,
            pose: reference.pose,
            camera: self.camera,
            points,
        })
    }

    /// Creates the first keyframe and seeds its points.
    pub fn initialize(
        &mut self,
        frame: &FrameInput,
        pose: Pose,
        affine: AffineBrightness,
        init: &DepthInit,
    ) -> Result<MapperReport, MapError> {
        let t0 = Instant::now();
        let id = KeyframeId(self.next_keyframe);
        self.next_keyframe += 1;
        let kf = Keyframe::new(id, frame.index, frame.timestamp, frame.pyramid.clone(), pose, affine);
        self.hybrid.push(kf);
        let mut grid = OccupancyGrid::new(self.camera.width, self.camera.height, self.cfg.cell_size);
        let mut rng = match init {
            DepthInit::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            DepthInit::GroundTruth { .. } => None,
        };
        let depth_of = |p: &Vector2<f64>, rng: &mut Option<ChaCha8Rng>| -> Option<(f64, f64)> {
            match init {
                DepthInit::GroundTruth { idepth, width } => {
                    let (u, v) = (p.x.round() as usize, p.y.round() as usize);
                    let d = *idepth.get(v * width + u)?;
                    (d > 0.0).then_some((d, GT_VARIANCE_RATIO * d * d))
                }
                DepthInit::Random { .. } => Some((rng.as_mut()?.random_range(0.5..2.0), 1.0)),
            }
        };
        let seeds = self.sample_new_candidates(frame, &mut grid, &[], |p| depth_of(p, &mut rng));
        let n_new = seeds.len();
        let last = self.hybrid.len() - 1;
        self.hybrid[last].features = seeds;
        let mut report = MapperReport {
            new_candidates: n_new,
            ..Default::default()
        };
        match init {
            DepthInit::GroundTruth { .. } => {
                let mut grid = OccupancyGrid::new(self.camera.width, self.camera.height, self.cfg.cell_size);
                report.activated = self.activate_converged(&mut grid, &[])?;
                report.overlaps = self.active_overlaps();
            }
            DepthInit::Random { .. } => self.bootstrap_left = self.cfg.bootstrap_frames.max(1),
        }
        self.update_grid();
        report.init_ms = ms(t0);
        Ok(report)
    }

    /// Detects new candidate corners and pixels in free cells of `grid`.
    /// `depth` gives each new point's inverse depth and variance.
    fn sample_new_candidates(
        &mut self,
        frame: &FrameInput,
        grid: &mut OccupancyGrid,
        matched: &[usize],
        mut depth: impl FnMut(&Vector2<f64>) -> Option<(f64, f64)>,
    ) -> Vec<Feature> {
        let id = self.hybrid.last().expect("keyframe exists").id;
        let plane = frame.pyramid.finest();
        let mut out = Vec::new();
        if self.cfg.use_corners {
            let mut order: Vec<usize> = (0..frame.corners.len()).filter(|i| !matched.contains(i)).collect();
            order.sort_by(|&a, &b| frame.corners[b].score.total_cmp(&frame.corners[a].score));
            let mut placed = 0;
            for i in order {
                if placed == 2 * self.cfg.corner_quota {
                    break;
                }
                let c = &frame.corners[i];
                if !grid.block_free(&c.p) {
                    continue;
                }
                let (Some(patch), Some((d, var))) = (sample_patch(plane, &c.p), depth(&c.p)) else {
                    continue;
                };
                grid.mark(&c.p);
                let fid = self.alloc_feature();
                out.push(Feature::corner(fid, id, c, patch, d, var));
                placed += 1;
            }
        }
        let corner_positions: Vec<Vector2<f64>> = frame.corners.iter().map(|c| c.p).collect();
        let pixels = sample_pixel_candidates(
            plane,
            grid,
            &corner_positions,
            2 * self.cfg.pixel_quota,
            &self.cfg.sampling,
        );
        for px in pixels {
            let (Some(patch), Some((d, var))) = (sample_patch(plane, &px.p), depth(&px.p)) else {
                continue;
            };
            let fid = self.alloc_feature();
            out.push(Feature::pixel(fid, id, px.p, patch, d, var));
        }
        out
    }

    /// Projection of a feature into the newest keyframe with its inverse
    /// depth there.
    fn project_to_newest(&self, host: &Keyframe, f: &Feature) -> Option<(Vector2<f64>, f64)> {
        let newest = self.hybrid.last()?;
        let t = newest.pose * host.pose.inverse();
        let w = warp_unchecked(&self.camera, &t, &f.p, f.idepth).ok()?;
        self.camera.contains(&w.pixel, 0.0).then_some((w.pixel, w.idepth))
    }

    /// Rebuilds the occupancy grid of the newest keyframe from the active and
    /// candidate points of the window.
    pub fn update_grid(&mut self) {
        let mut pts = Vec::new();
        for kf in &self.hybrid {
            for f in &kf.features {
                if matches!(f.status(), FeatureStatus::Active | FeatureStatus::Candidate) {
                    if let Some((p, _)) = self.project_to_newest(kf, f) {
                        pts.push(p);
                    }
                }
            }
        }
        update_occupancy(&mut self.grid, pts);
    }

    /// Number of active pairs whose 3×3 blocks overlap in the newest
    /// keyframe's grid.
    pub fn active_overlaps(&self) -> usize {
        let mut cells = Vec::new();
        for kf in &self.hybrid {
            for f in kf.features.iter().filter(|f| f.status() == FeatureStatus::Active) {
                if let Some((p, _)) = self.project_to_newest(kf, f) {
                    if let Some(c) = self.grid.cell_of(&p) {
                        cells.push(c);
                    }
                }
            }
        }
        let mut n = 0;
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let dx = cells[i].0.abs_diff(cells[j].0);
                let dy = cells[i].1.abs_diff(cells[j].1);
                if dx.max(dy) <= 2 {
                    n += 1;
                }
            }
        }
        n
    }

    /// Activates converged candidates of the window into free cells of
    /// `grid`, corners first. Returns the number activated.
    fn activate_converged(&mut self, grid: &mut OccupancyGrid, exclude: &[KeyframeId]) -> Result<usize, MapError> {
        let mut slots = Vec::new();
        let mut cands = Vec::new();
        for (k, kf) in self.hybrid.iter().enumerate() {
            if exclude.contains(&kf.id) {
                continue;
            }
            for (i, f) in kf.features.iter().enumerate() {
                if f.status() != FeatureStatus::Candidate
                    || f.idepth_variance >= self.cfg.activation_variance_ratio * f.idepth * f.idepth
                {
                    continue;
                }
                if let Some((p, _)) = self.project_to_newest(kf, f) {
                    slots.push((k, i));
                    cands.push(ActivationCandidate {
                        p,
                        kind: f.kind,
                        score: f.score.unwrap_or(0.0),
                    });
                }
            }
        }
        let chosen = activate_features(&cands, grid, self.cfg.corner_quota, self.cfg.pixel_quota);
        for &c in &chosen {
            let (k, i) = slots[c];
            self.hybrid[k].features[i].set_status(FeatureStatus::Active)?;
        }
        Ok(chosen.len())
    }

    /// Applies the tracker's verdicts: photometric outliers and corner match
    /// bookkeeping.
    fn apply_track(&mut self, track: &TrackResult) -> Result<(), MapError> {
        let slots = self.slots();
        let max_failures = self.cfg.max_match_failures;
        for id in &track.outliers {
            if let Some(&s) = slots.get(id) {
                let f = self.feature_mut(s);
                if f.status() == FeatureStatus::Active {
                    f.set_status(FeatureStatus::Outlier)?;
                }
            }
        }
        for m in &track.matches {
            if let Some(&s) = slots.get(&m.feature) {
                self.feature_mut(s).match_failures = 0;
            }
        }
        for id in &track.match_failures {
            if let Some(&s) = slots.get(id) {
                let f = self.feature_mut(s);
                f.match_failures += 1;
                if f.match_failures >= max_failures && f.status() == FeatureStatus::Active {
                    f.set_status(FeatureStatus::Outlier)?;
                }
            }
        }
        if track.sigma2.0 > 0.0 {
            self.sigma2_p = track.sigma2.0;
        }
        Ok(())
    }

    /// Epipolar search and fusion for every candidate of the window against
    /// a tracked frame with world-to-camera `pose`.
    pub fn update_candidate_depths(
        &mut self,
        frame: &ImagePyramid,
        pose: &Pose,
        affine: &AffineBrightness,
    ) -> Result<CandidateStats, MapError> {
        let mut stats = CandidateStats::default();
        let search = self.cfg.search();
        let sigma2_p = self.sigma2_p;
        let c = self.camera;
        let target = frame.finest();
        for kf in &mut self.hybrid {
            let host_to_target = *pose * kf.pose.inverse();
            let host_affine = kf.affine;
            for f in kf.features.iter_mut().filter(|f| f.status() == FeatureStatus::Candidate) {
                let belief = DepthHypothesis {
                    idepth: f.idepth,
                    idepth_variance: f.idepth_variance,
                    num_observations: f.num_observations,
                };
                let point = SearchPoint {
                    p: f.p,
                    patch: &f.patch,
                    affine: host_affine,
                    belief,
                };
                match epipolar_search(&point, target, &host_to_target, affine, &c, sigma2_p, &search) {
                    SearchOutcome::Observed { idepth, variance } => {
                        let mut h = belief;
                        h.fuse(idepth, variance);
                        f.idepth = h.idepth;
                        f.idepth_variance = h.idepth_variance;
                        f.num_observations = h.num_observations;
                        stats.updated += 1;
                    }
                    SearchOutcome::Skipped => stats.skipped += 1,
                    SearchOutcome::Outlier => {
                        f.set_status(FeatureStatus::Outlier)?;
                        stats.outliers += 1;
                    }
                }
            }
        }
        Ok(stats)
    }

    /// Windowed photometric bundle adjustment over hybrid keyframes and
    /// active depths. The oldest keyframe and one anchor depth are fixed.
    pub fn photometric_ba(&mut self) -> Result<BaReport, MapError> {
        if self.hybrid.len() < 2 {
            return Ok(BaReport::default());
        }
        let mut slots = Vec::new();
        let mut points = Vec::new();
        for (k, kf) in self.hybrid.iter().enumerate() {
            for (i, f) in kf.features.iter().enumerate() {
                if f.status() == FeatureStatus::Active && (f.kind == FeatureKind::Pixel || self.cfg.direct_corners) {
                    slots.push((k, i));
                    points.push(BaPoint {
                        host: k,
                        p: f.p,
                        patch: f.patch,
                        idepth: f.idepth,
                        fixed: false,
                    });
                }
            }
        }
        if points.is_empty() {
            return Ok(BaReport::default());
        }
        // scale gauge: the best-known depth, preferably in the oldest keyframe
        let anchor = (0..points.len())
            .min_by(|&a, &b| {
                let key = |j: usize| {
                    let (k, i) = slots[j];
                    (k != 0, self.hybrid[k].features[i].idepth_variance)
                };
                let (ka, kb) = (key(a), key(b));
                ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
            })
            .expect("non-empty");
        points[anchor].fixed = true;
        let frames = self
            .hybrid
            .iter()
            .enumerate()
            .map(|(k, kf)| BaFrame {
                plane: kf.pyramid.finest(),
                pose: kf.pose,
                affine: kf.affine,
                fixed: k == 0,
            })
            .collect();
        let mut problem = BaProblem {
            camera: self.camera,
            frames,
            points,
            cfg: BaConfig {
                iterations: self.cfg.ba_iterations,
                convergence_eps: self.cfg.ba_convergence_eps,
                lambda_init: self.cfg.ba_lambda_init,
                gamma_p: self.cfg.gamma_p,
            },
        };
        let report = problem.solve()?;
        let poses: Vec<(Pose, AffineBrightness)> = problem.frames.iter().map(|f| (f.pose, f.affine)).collect();
        let depths: Vec<f64> = problem.points.iter().map(|p| p.idepth).collect();
        drop(problem);
        for (kf, (pose, affine)) in self.hybrid.iter_mut().zip(poses) {
            kf.pose = pose;
            kf.affine = affine;
        }
        for (&(k, i), d) in slots.iter().zip(depths) {
            self.hybrid[k].features[i].idepth = d;
        }
        Ok(report)
    }

    /// Refines marginalized corners with at least two matches in live
    /// keyframes. Returns the number of refined depths.
    pub fn structure_only_optimization(&mut self) -> usize {
        let poses: HashMap<KeyframeId, Pose> = self.live().map(|k| (k.id, k.pose)).collect();
        let c = self.camera;
        let (gamma, iters) = (self.cfg.gamma_g, self.cfg.structure_iterations);
        let observations = &self.observations;
        let mut refined = 0;
        for kf in self.hybrid.iter_mut().chain(self.indirect.iter_mut()) {
            let host_inv = kf.pose.inverse();
            for f in kf.features.iter_mut() {
                if !(f.is_corner() && f.status() == FeatureStatus::Marginalized) {
                    continue;
                }
                let Some(obs) = observations.get(&f.id) else { continue };
                let obs: Vec<(Pose, Vector2<f64>)> = obs
                    .iter()
                    .filter(|(k, _)| *k != kf.id)
                    .filter_map(|(k, o)| poses.get(k).map(|t| (*t * host_inv, *o)))
                    .collect();
                if let Some(d) = refine_idepth(&c, &f.p, f.idepth, &obs, gamma, iters) {
                    f.idepth = d;
                    refined += 1;
                }
            }
        }
        refined
    }

    fn shares_with_newest(&self, kf: &Keyframe) -> bool {
        let Some(newest) = self.hybrid.last() else {
            return false;
        };
        kf.features.iter().any(|f| {
            f.is_corner()
                && matches!(f.status(), FeatureStatus::Active | FeatureStatus::Marginalized)
                && self.observations(f.id).iter().any(|(k, _)| *k == newest.id)
        })
    }

    /// Drops one keyframe from the window when it exceeds its size and
    /// prunes indirect keyframes that no longer share matches with the
    /// newest one.
    pub fn marginalize(&mut self) -> Result<Option<KeyframeId>, MapError> {
        let mut removed = None;
        if self.hybrid.len() > self.cfg.window_size {
            let n = self.hybrid.len();
            let centers: Vec<Vector3<f64>> = self.hybrid.iter().map(|k| k.pose.center()).collect();
            let eps = self.cfg.marginalization_epsilon;
            let score = |i: usize| -> f64 {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| 1.0 / ((centers[i] - centers[j]).norm() + eps))
                    .sum()
            };
            let victim = (0..n - 2)
                .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
                .expect("window holds more than two keyframes");
            let mut kf = self.hybrid.remove(victim);
            let mut kept = Vec::with_capacity(kf.features.len());
            for mut f in std::mem::take(&mut kf.features) {
                match f.status() {
                    FeatureStatus::Candidate => {}
                    FeatureStatus::Active => {
                        f.set_status(FeatureStatus::Marginalized)?;
                        kept.push(f);
                    }
                    _ => kept.push(f),
                }
            }
            kf.features = kept;
            kf.demote();
            removed = Some(kf.id);
            if self.shares_with_newest(&kf) {
                // only corners matter once photometric data is gone
                let (corners, rest): (Vec<_>, Vec<_>) = kf.features.drain(..).partition(|f| f.is_corner());
                kf.features = rest;
                self.archive_keyframe(&kf);
                kf.features = corners;
                self.retired_poses.remove(&kf.id);
                self.indirect.push(kf);
            } else {
                self.archive_keyframe(&kf);
            }
        }
        let (keep, drop): (Vec<_>, Vec<_>) = std::mem::take(&mut self.indirect)
            .into_iter()
            .partition(|k| self.shares_with_newest(k));
        self.indirect = keep;
        for k in &drop {
            self.archive_keyframe(k);
        }
        Ok(removed)
    }

    /// Checks the structural invariants of the map.
    pub fn audit(&self) -> Result<(), MapError> {
        let fail = |m: String| Err(MapError::Audit(m));
        if self.hybrid.len() > self.cfg.window_size {
            return fail(format!("{} hybrid keyframes", self.hybrid.len()));
        }
        let mut ids = std::collections::HashSet::new();
        for kf in &self.hybrid {
            if kf.kind != KeyframeKind::Hybrid {
                return fail(format!("{:?} in the window is not hybrid", kf.id));
            }
        }
        for kf in &self.indirect {
            if kf.kind != KeyframeKind::Indirect {
                return fail(format!("{:?} in the indirect set is hybrid", kf.id));
            }
            if !self.shares_with_newest(kf) {
                return fail(format!("{:?} shares no matches with the newest keyframe", kf.id));
            }
            if let Some(f) = kf.features.iter().find(|f| {
                matches!(f.status(), FeatureStatus::Active | FeatureStatus::Candidate)
            }) {
                return fail(format!("{:?} in indirect keyframe is {}", f.id, f.status().as_str()));
            }
        }
        for (kf, f) in self.features() {
            if f.host_keyframe != kf.id {
                return fail(format!("{:?} stored outside its host", f.id));
            }
            if !ids.insert(f.id) {
                return fail(format!("duplicate feature {:?}", f.id));
            }
            f.check().map_err(MapError::Audit)?;
        }
        Ok(())
    }

    /// Ends the bootstrap: every filtered seed of the first keyframe that fits
    /// the grid becomes active.
    fn finish_bootstrap(&mut self) -> Result<usize, MapError> {
        let mut slots = Vec::new();
        let mut cands = Vec::new();
        for (k, kf) in self.hybrid.iter().enumerate() {
            for (i, f) in kf.features.iter().enumerate() {
                if f.status() == FeatureStatus::Candidate && f.num_observations > 0 {
                    if let Some((p, _)) = self.project_to_newest(kf, f) {
                        slots.push((k, i));
                        cands.push(ActivationCandidate {
                            p,
                            kind: f.kind,
                            score: f.score.unwrap_or(0.0),
                        });
                    }
                }
            }
        }
        let mut grid = OccupancyGrid::new(self.camera.width, self.camera.height, self.cfg.cell_size);
        let chosen = activate_features(&cands, &mut grid, self.cfg.corner_quota, self.cfg.pixel_quota);
        for &c in &chosen {
            let (k, i) = slots[c];
            self.hybrid[k].features[i].set_status(FeatureStatus::Active)?;
        }
        Ok(chosen.len())
    }

    /// Projects every active point into the newest keyframe and lets them
    /// claim grid blocks in priority order (corners by score, then pixels by
    /// variance). Points whose block is taken are marginalized. Returns the
    /// grid and the projected position and inverse depth of each survivor.
    fn claim_cells(&mut self) -> Result<(OccupancyGrid, Vec<(Vector2<f64>, f64)>), MapError> {
        let mut actives = Vec::new();
        for (k, kf) in self.hybrid.iter().enumerate() {
            for (i, f) in kf.features.iter().enumerate() {
                if f.status() != FeatureStatus::Active {
                    continue;
                }
                if let Some((p, d)) = self.project_to_newest(kf, f) {
                    actives.push((k, i, p, d, f.is_corner(), f.score.unwrap_or(0.0), f.idepth_variance));
                }
            }
        }
        actives.sort_by(|a, b| {
            b.4.cmp(&a.4)
                .then(if a.4 { b.5.total_cmp(&a.5) } else { a.6.total_cmp(&b.6) })
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        let mut grid = OccupancyGrid::new(self.camera.width, self.camera.height, self.cfg.cell_size);
        let mut seeds = Vec::new();
        for &(k, i, p, d, ..) in &actives {
            if grid.block_free(&p) {
                grid.mark(&p);
                seeds.push((p, d));
            } else {
                self.hybrid[k].features[i].set_status(FeatureStatus::Marginalized)?;
            }
        }
        Ok((grid, seeds))
    }

    /// Consumes one tracked frame: bookkeeping, candidate filtering and, when
    /// the frame becomes a keyframe, activation, sampling, bundle adjustment,
    /// marginalization and structure-only refinement.
    pub fn process(&mut self, frame: TrackedFrame) -> Result<MapperReport, MapError> {
        let mut report = MapperReport::default();
        let ref_pose = self
            .keyframe_pose(frame.reference)
            .ok_or(MapError::UnknownKeyframe(frame.reference))?;
        let pose = frame.state.pose() * ref_pose;
        let mut affine = frame.state.affine;
        affine.t = frame.input.pyramid.exposure;

        let t = Instant::now();
        self.apply_track(&frame.track)?;
        report.local_map_ms += ms(t);

        let t = Instant::now();
        self.update_grid();
        report.occupancy_ms = ms(t);

        // a stale reference (threaded mode) only skips the keyframe test
        let newest = self.hybrid.len() - 1;
        let is_keyframe = match self.hybrid.iter().position(|k| k.id == frame.reference) {
            Some(r) => {
                let ref_kf = &mut self.hybrid[r];
                if ref_kf.reference_count.is_none() {
                    ref_kf.reference_count = Some(frame.track.valid_photometric);
                }
                self.bootstrap_left == 0
                    && r == newest
                    && keyframe_decision(&frame.track, &frame.input.pyramid, &self.hybrid[r], &self.cfg)
            }
            None => false,
        };

        let t = Instant::now();
        report.candidates = self.update_candidate_depths(&frame.input.pyramid, &pose, &affine)?;
        report.candidate_ms = ms(t);

        if self.bootstrap_left > 0 {
            self.bootstrap_left -= 1;
            if self.bootstrap_left == 0 {
                let t = Instant::now();
                report.activated = self.finish_bootstrap()?;
                report.init_ms = ms(t);
            }
            return Ok(report);
        }
        if !is_keyframe {
            return Ok(report);
        }

        let t = Instant::now();
        let id = KeyframeId(self.next_keyframe);
        self.next_keyframe += 1;
        for m in &frame.track.matches {
            self.observations.entry(m.feature).or_default().push((id, m.obs));
        }
        let input = &frame.input;
        self.hybrid.push(Keyframe::new(id, input.index, input.timestamp, input.pyramid.clone(), pose, affine));
        report.keyframe = Some(id);

        let (mut grid, seeds) = self.claim_cells()?;
        report.activated = self.activate_converged(&mut grid, &[id])?;
        report.overlaps = self.active_overlaps();

        // unconverged candidates keep their cells
        for kf in &self.hybrid {
            for f in kf.features.iter().filter(|f| f.status() == FeatureStatus::Candidate) {
                if let Some((p, _)) = self.project_to_newest(kf, f) {
                    grid.mark(&p);
                }
            }
        }
        let fallback = {
            let mut ds: Vec<f64> = seeds.iter().map(|s| s.1).collect();
            ds.sort_by(f64::total_cmp);
            ds.get(ds.len() / 2).copied().unwrap_or(1.0)
        };
        let ratio = self.cfg.initial_depth_ratio;
        let matched: Vec<usize> = frame.track.matches.iter().map(|m| m.corner).collect();
        let new = self.sample_new_candidates(input, &mut grid, &matched, |p| {
            let d = seeds
                .iter()
                .min_by(|a, b| (a.0 - p).norm_squared().total_cmp(&(b.0 - p).norm_squared()))
                .map(|s| s.1)
                .unwrap_or(fallback);
            (d > 0.0).then_some((d, (ratio * d).powi(2)))
        });
        report.new_candidates = new.len();
        self.hybrid.last_mut().expect("just pushed").features = new;
        self.grid = grid;
        report.init_ms = ms(t);

        let t = Instant::now();
        match self.photometric_ba() {
            Ok(r) => report.ba = Some(r),
            Err(e) => log::warn!("bundle adjustment skipped: {e}"),
        }
        report.ba_ms = ms(t);

        let t = Instant::now();
        report.marginalized = self.marginalize()?;
        // BA moves points, so projections into the newest keyframe may now collide
        self.claim_cells()?;
        self.update_grid();
        report.local_map_ms += ms(t);

        let t = Instant::now();
        report.structure_refined = self.structure_only_optimization();
        report.structure_ms = ms(t);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureId;
    use crate::image_pyramid::{build_pyramid, IntensityImage};
    use std::sync::Arc;

    fn pyramid() -> SharedPyramid {
        let c = CameraIntrinsics::new(100.0, 100.0, 63.5, 47.5, 128, 96).unwrap();
        let img = IntensityImage::from_fn(128, 96, |u, v| ((u * 7 + v * 13) % 50) as f64 + 100.0);
        Arc::new(build_pyramid(img, 1.0, 2, &c).unwrap())
    }

    fn map_with(n: usize) -> LocalMap {
        let c = CameraIntrinsics::new(100.0, 100.0, 63.5, 47.5, 128, 96).unwrap();
        let cfg = MapperConfig {
            window_size: 3,
            ..Default::default()
        };
        let mut map = LocalMap::new(c, cfg);
        let pyr = pyramid();
        for k in 0..n {
            let pose = Pose::from_translation(Vector3::new(-0.1 * k as f64, 0.0, 0.0));
            map.push_keyframe(Keyframe::new(KeyframeId(k as u64), k, k as f64, pyr.clone(), pose, Default::default()));
        }
        map
    }

    fn pixel(id: u64, host: u64, status: FeatureStatus) -> Feature {
        let mut f = Feature::pixel(FeatureId(id), KeyframeId(host), Vector2::new(60.0, 40.0), [100.0; 8], 0.5, 0.01);
        if status != FeatureStatus::Candidate {
            f.set_status(FeatureStatus::Active).unwrap();
        }
        if status != FeatureStatus::Active && status != FeatureStatus::Candidate {
            f.set_status(status).unwrap();
        }
        f
    }

    fn track(flow: f64, valid: usize) -> TrackResult {
        TrackResult {
            rms_flow: flow,
            valid_photometric: valid,
            ..Default::default()
        }
    }

    #[test]
    fn keyframe_criteria() {
        let map = map_with(1);
        let mut kf = map.hybrid_window()[0].clone();
        let pyr = pyramid();
        let cfg = MapperConfig::default();
        assert!(!keyframe_decision(&track(0.0, 100), &pyr, &kf, &cfg));
        assert!(keyframe_decision(&track(30.0, 100), &pyr, &kf, &cfg));
        kf.reference_count = Some(100);
        assert!(!keyframe_decision(&track(0.0, 80), &pyr, &kf, &cfg));
        assert!(keyframe_decision(&track(0.0, 50), &pyr, &kf, &cfg));
        let mut bright = track(0.0, 100);
        bright.state.affine.a = 6.0;
        assert!(keyframe_decision(&bright, &pyr, &kf, &cfg));
    }

    #[test]
    fn marginalization_keeps_window_size() {
        let mut map = map_with(4);
        for (k, kf) in map.hybrid.iter_mut().enumerate() {
            kf.features.push(pixel(10 + k as u64, k as u64, FeatureStatus::Active));
            kf.features.push(pixel(20 + k as u64, k as u64, FeatureStatus::Candidate));
        }
        let removed = map.marginalize().unwrap().unwrap();
        assert_eq!(map.hybrid_window().len(), 3);
        assert!(map.hybrid_window().iter().all(|k| k.id != removed));
        // no shared corner matches, so the keyframe leaves the map
        assert!(map.indirect_set().is_empty());
        let statuses: Vec<_> = map
            .map_points()
            .into_iter()
            .filter(|p| p.id == FeatureId(10 + removed.0))
            .map(|p| p.status)
            .collect();
        assert_eq!(statuses, vec![FeatureStatus::Marginalized]);
        map.audit().unwrap();
        assert!(map.marginalize().unwrap().is_none());
    }

    #[test]
    fn demoted_keyframe_with_shared_match_stays_indirect() {
        let mut map = map_with(4);
        let corner = Corner {
            p: Vector2::new(50.0, 50.0),
            score: 100.0,
            descriptor: [0; 4],
        };
        // equal spacing, so the oldest (or second) removable keyframe goes
        for k in 0..2u64 {
            let mut f = Feature::corner(FeatureId(100 + k), KeyframeId(k), &corner, [100.0; 8], 0.5, 0.01);
            f.set_status(FeatureStatus::Active).unwrap();
            map.hybrid[k as usize].features.push(f);
            map.observations
                .insert(FeatureId(100 + k), vec![(KeyframeId(3), Vector2::new(40.0, 50.0))]);
        }
        let removed = map.marginalize().unwrap().unwrap();
        assert_eq!(map.indirect_set().len(), 1);
        assert_eq!(map.indirect_set()[0].id, removed);
        assert_eq!(map.indirect_set()[0].kind(), KeyframeKind::Indirect);
        assert!(map.indirect_set()[0]
            .features
            .iter()
            .all(|f| f.status() == FeatureStatus::Marginalized));
        map.audit().unwrap();
        // once the newest keyframe no longer matches it, it is pruned
        map.observations.clear();
        map.marginalize().unwrap();
        assert!(map.indirect_set().is_empty());
    }

    #[test]
    fn redundant_keyframe_is_removed() {
        let mut map = map_with(3);
        // keyframes 0 and 1 nearly coincide; 1 is the more redundant one
        let pyr = pyramid();
        map.hybrid[1].pose = Pose::from_translation(Vector3::new(-0.001, 0.0, 0.0));
        map.push_keyframe(Keyframe::new(
            KeyframeId(3),
            3,
            3.0,
            pyr,
            Pose::from_translation(Vector3::new(-0.5, 0.0, 0.0)),
            Default::default(),
        ));
        let removed = map.marginalize().unwrap().unwrap();
        assert!(removed == KeyframeId(0) || removed == KeyframeId(1));
        assert!(map.hybrid_window().iter().any(|k| k.id == KeyframeId(3)));
        assert!(map.hybrid_window().iter().any(|k| k.id == KeyframeId(2)));
    }

    #[test]
    fn zero_baseline_leaves_candidates_unchanged() {
        let mut map = map_with(1);
        map.hybrid[0].features.push(pixel(1, 0, FeatureStatus::Candidate));
        let before = map.hybrid[0].features[0].clone();
        let pose = map.hybrid[0].pose;
        let pyr = pyramid();
        let stats = map.update_candidate_depths(&pyr, &pose, &AffineBrightness::default()).unwrap();
        assert_eq!(stats.skipped, 1);
        assert_eq!(map.hybrid[0].features[0], before);
    }
}
