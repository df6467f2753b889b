//! End-to-end odometry: frame preparation, tracking against the newest
//! keyframe and mapping, either in lockstep or on two threads.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use super::config::{InitMode, VoConfig};
use super::dataset::{write_trajectory, Dataset, DatasetError, TimedCameraPose};
use super::metrics::{compute_alignment_error, AlignmentMetrics};
use super::scene::{SceneError, SyntheticScene};
use crate::features::{detect_corners, FeatureKind, KeyframeId};
use crate::geometry::{AffineBrightness, CameraIntrinsics, Pose};
use crate::image_pyramid::{build_pyramid, IntensityImage, PyramidError};
use crate::joint_tracker::{constant_velocity_prior, track_frame, ReferenceFrame, TrackError, TrackingFrame};
use crate::mapper::{DepthInit, FrameInput, LocalMap, MapError, MapPoint, MapperReport, TrackedFrame};

/// Process names of the per-frame timing breakdown, in CSV column order.
pub const PROCESS_NAMES: [&str; 10] = [
    "Direct data preparation and Image Pyramids",
    "Features and Descriptors Extraction",
    "Feature Matching",
    "Joint Optimization",
    "Occupancy map Update",
    "Candidate Points Depth Update",
    "New map point initialization",
    "Photometric BA",
    "Local Map Update",
    "Structure only optimization",
];

/// Indices into [`PROCESS_NAMES`] that belong to the tracking side.
pub const TRACKING_PROCESSES: std::ops::Range<usize> = 0..4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("ground-truth initialization needs first-frame depth")]
    MissingDepth,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One input frame.
#[derive(Debug, Clone)]
pub struct SourceFrame {
    pub timestamp: f64,
    pub image: IntensityImage,
    pub exposure: f64,
}

/// A sequence of frames with optional ground truth.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn camera(&self) -> CameraIntrinsics;
    fn frame(&mut self, index: usize) -> Result<SourceFrame, PipelineError>;
    /// Level-0 inverse depth of the first frame, row-major, 0 where unknown.
    fn first_idepth(&mut self) -> Result<Option<Vec<f64>>, PipelineError>;
    /// Camera-to-world ground truth.
    fn groundtruth(&self) -> Option<Vec<TimedCameraPose>>;
}

/// Renders frames of a synthetic scene on demand.
pub struct SceneSource {
    pub scene: SyntheticScene,
}

impl FrameSource for SceneSource {
    fn len(&self) -> usize {
        self.scene.len()
    }

    fn camera(&self) -> CameraIntrinsics {
        self.scene.intrinsics
    }

    fn frame(&mut self, index: usize) -> Result<SourceFrame, PipelineError> {
        let f = self.scene.render_frame(index)?;
        Ok(SourceFrame {
            timestamp: f.timestamp,
            image: f.image,
            exposure: f.affine.t,
        })
    }

    fn first_idepth(&mut self) -> Result<Option<Vec<f64>>, PipelineError> {
        Ok(Some(self.scene.render_frame(0)?.idepth))
    }

    fn groundtruth(&self) -> Option<Vec<TimedCameraPose>> {
        Some(self.scene.trajectory.poses())
    }
}

impl FrameSource for Dataset {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn camera(&self) -> CameraIntrinsics {
        self.camera
    }

    fn frame(&mut self, index: usize) -> Result<SourceFrame, PipelineError> {
        Ok(SourceFrame {
            timestamp: self.frames[index].timestamp,
            image: self.load_image(index)?,
            exposure: self.frames[index].exposure,
        })
    }

    fn first_idepth(&mut self) -> Result<Option<Vec<f64>>, PipelineError> {
        Ok(Dataset::first_idepth(self)?)
    }

    fn groundtruth(&self) -> Option<Vec<TimedCameraPose>> {
        self.groundtruth.clone()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameDiagnostics {
    pub index: usize,
    pub keyframe: bool,
    /// Corners detected in the frame.
    pub corners: usize,
    pub n_p: usize,
    pub n_g: usize,
    pub k_trace: Vec<f64>,
    pub energy: f64,
    /// Milliseconds per entry of [`PROCESS_NAMES`].
    pub timings: [f64; 10],
}

#[derive(Debug, Clone)]
pub struct TrajectoryEntry {
    pub index: usize,
    pub timestamp: f64,
    pub reference: KeyframeId,
    /// Frame pose relative to its reference keyframe (world-to-camera).
    pub relative: Pose,
}

#[derive(Debug, Clone)]
pub struct TrajectoryReport {
    /// Camera-to-world estimate per tracked frame.
    pub poses: Vec<TimedCameraPose>,
    pub tracking_lost_at: Option<usize>,
    pub metrics: Option<AlignmentMetrics>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub map: Vec<MapPoint>,
    pub keyframes: usize,
    /// Largest number of active pairs with overlapping occupancy blocks seen
    /// right after any keyframe insertion.
    pub max_overlaps: usize,
}

impl TrajectoryReport {
    pub fn drift_per_meter(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.drift_per_meter)
    }
}

struct Prepared {
    input: FrameInput,
    prep_ms: f64,
    feature_ms: f64,
}

fn prepare(src: &mut dyn FrameSource, index: usize, cfg: &VoConfig) -> Result<Prepared, PipelineError> {
    let f = src.frame(index)?;
    let c = src.camera();
    let t = Instant::now();
    let pyramid = Arc::new(build_pyramid(f.image, f.exposure, cfg.tracker.num_levels, &c)?);
    let prep_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let corners = if cfg.mapper.use_corners {
        detect_corners(&pyramid, &cfg.mapper.corners)
    } else {
        Vec::new()
    };
    let feature_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(Prepared {
        input: FrameInput {
            index,
            timestamp: f.timestamp,
            pyramid,
            corners,
        },
        prep_ms,
        feature_ms,
    })
}

fn mapper_timings(d: &mut FrameDiagnostics, r: &MapperReport) {
    d.timings[4] += r.occupancy_ms;
    d.timings[5] += r.candidate_ms;
    d.timings[6] += r.init_ms;
    d.timings[7] += r.ba_ms;
    d.timings[8] += r.local_map_ms;
    d.timings[9] += r.structure_ms;
    d.keyframe = r.keyframe.is_some();
}

/// State owned by the tracking side.
struct Tracker {
    history: Vec<(Pose, AffineBrightness)>,
    entries: Vec<TrajectoryEntry>,
    diagnostics: Vec<FrameDiagnostics>,
}

impl Tracker {
    /// Tracks one prepared frame; `None` on tracking loss.
    fn track(&mut self, p: Prepared, snapshot: &ReferenceFrame, cfg: &VoConfig) -> Option<TrackedFrame> {
        let prior = constant_velocity_prior(&self.history, &snapshot.pose);
        let frame = TrackingFrame {
            pyramid: &p.input.pyramid,
            corners: &p.input.corners,
        };
        let result = match track_frame(snapshot, &frame, &prior, &cfg.tracker) {
            Ok(r) => r,
            Err(TrackError::TrackingLost { photometric, geometric }) => {
                log::warn!(
                    "frame {}: tracking lost ({photometric} photometric, {geometric} geometric)",
                    p.input.index
                );
                return None;
            }
            Err(TrackError::EmptyReference) => {
                log::warn!("frame {}: no points to track", p.input.index);
                return None;
            }
        };
        let relative = result.state.pose();
        let mut affine = result.state.affine;
        affine.t = p.input.pyramid.exposure;
        self.history.push((relative * snapshot.pose, affine));
        let (n_p, n_g) = result.inlier_counts.last().copied().unwrap_or((0, 0));
        let mut d = FrameDiagnostics {
            index: p.input.index,
            corners: p.input.corners.len(),
            n_p,
            n_g,
            k_trace: result.k_trace.clone(),
            energy: result.final_energy,
            ..Default::default()
        };
        d.timings[0] = p.prep_ms;
        d.timings[1] = p.feature_ms;
        d.timings[2] = result.matching_ms;
        d.timings[3] = result.optimization_ms;
        self.diagnostics.push(d);
        self.entries.push(TrajectoryEntry {
            index: p.input.index,
            timestamp: p.input.timestamp,
            reference: snapshot.keyframe,
            relative,
        });
        Some(TrackedFrame {
            input: p.input,
            reference: snapshot.keyframe,
            state: result.state,
            track: result,
        })
    }
}

/// Runs the full pipeline over `src`. Tracking loss ends the run early and
/// is reported, not returned as an error.
pub fn run_odometry(src: &mut dyn FrameSource, cfg: &VoConfig) -> Result<TrajectoryReport, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let camera = src.camera();
    let n = src.len();
    let mut map = LocalMap::new(camera, cfg.mapper);
    let mut tracker = Tracker {
        history: Vec::new(),
        entries: Vec::new(),
        diagnostics: Vec::new(),
    };
    let mut lost = None;
    let mut max_overlaps = 0;
    if n == 0 {
        lost = Some(0);
    } else {
        let first = prepare(src, 0, cfg)?;
        let init = match cfg.init {
            InitMode::Gt => DepthInit::GroundTruth {
                idepth: src.first_idepth()?.ok_or(PipelineError::MissingDepth)?,
                width: camera.width,
            },
            InitMode::Filter => DepthInit::Random { seed: cfg.seed },
        };
        let affine = AffineBrightness::new(0.0, 0.0, first.input.pyramid.exposure);
        let report = map.initialize(&first.input, Pose::identity(), affine, &init)?;
        max_overlaps = report.overlaps;
        tracker.history.push((Pose::identity(), affine));
        let mut d = FrameDiagnostics {
            index: 0,
            keyframe: true,
            corners: first.input.corners.len(),
            ..Default::default()
        };
        d.timings[0] = first.prep_ms;
        d.timings[1] = first.feature_ms;
        mapper_timings(&mut d, &report);
        d.keyframe = true;
        tracker.diagnostics.push(d);
        let kf0 = map.newest().expect("initialized").id;
        tracker.entries.push(TrajectoryEntry {
            index: 0,
            timestamp: first.input.timestamp,
            reference: kf0,
            relative: Pose::identity(),
        });
        if n < 2 {
            lost = Some(n);
        } else if cfg.single_thread {
            for i in 1..n {
                let p = prepare(src, i, cfg)?;
                let t = Instant::now();
                let snapshot = map.snapshot()?;
                let snap_ms = t.elapsed().as_secs_f64() * 1e3;
                let Some(tracked) = tracker.track(p, &snapshot, cfg) else {
                    lost = Some(i);
                    break;
                };
                let report = map.process(tracked)?;
                max_overlaps = max_overlaps.max(report.overlaps);
                let d = tracker.diagnostics.last_mut().expect("pushed by track");
                mapper_timings(d, &report);
                d.timings[8] += snap_ms;
            }
        } else {
            let (lost_at, overlaps) = run_threaded(src, cfg, &mut map, &mut tracker)?;
            lost = lost_at;
            max_overlaps = max_overlaps.max(overlaps);
        }
    }

    // frames follow later corrections of their reference keyframe
    let poses: Vec<TimedCameraPose> = tracker
        .entries
        .iter()
        .filter_map(|e| {
            let kf = map.keyframe_pose(e.reference)?;
            Some((e.timestamp, (e.relative * kf).inverse()))
        })
        .collect();
    let metrics = src.groundtruth().and_then(|gt| {
        let est: Vec<(f64, Vector3<f64>)> = poses.iter().map(|(t, p)| (*t, p.translation)).collect();
        let gt: Vec<(f64, Vector3<f64>)> = gt.iter().map(|(t, p)| (*t, p.translation)).collect();
        compute_alignment_error(&est, &gt).ok()
    });
    let keyframes = tracker.diagnostics.iter().filter(|d| d.keyframe).count();
    Ok(TrajectoryReport {
        poses,
        tracking_lost_at: lost,
        metrics,
        diagnostics: tracker.diagnostics,
        map: map.map_points(),
        keyframes,
        max_overlaps,
    })
}

/// Tracker on the calling thread, mapper on a worker; frames are handed over
/// through a queue of two and the tracker always uses the latest snapshot.
fn run_threaded(
    src: &mut dyn FrameSource,
    cfg: &VoConfig,
    map: &mut LocalMap,
    tracker: &mut Tracker,
) -> Result<(Option<usize>, usize), PipelineError> {
    let n = src.len();
    let shared = Arc::new(Mutex::new(Arc::new(map.snapshot()?)));
    let (tx, rx) = sync_channel::<TrackedFrame>(2);
    let mut lost = None;
    let mut owned = std::mem::replace(map, LocalMap::new(src.camera(), cfg.mapper));
    let publish = Arc::clone(&shared);
    let (result, reports) = std::thread::scope(|s| {
        let worker = s.spawn(move || -> Result<(LocalMap, Vec<(usize, MapperReport)>), MapError> {
            let mut reports = Vec::new();
            for frame in rx {
                let index = frame.input.index;
                let report = owned.process(frame)?;
                let snap = owned.snapshot()?;
                *publish.lock().expect("snapshot lock") = Arc::new(snap);
                reports.push((index, report));
            }
            Ok((owned, reports))
        });
        let mut failure = None;
        for i in 1..n {
            let p = match prepare(src, i, cfg) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let snapshot = Arc::clone(&shared.lock().expect("snapshot lock"));
            let Some(tracked) = tracker.track(p, &snapshot, cfg) else {
                lost = Some(i);
                break;
            };
            if tx.send(tracked).is_err() {
                break;
            }
        }
        drop(tx);
        let joined = worker.join().expect("mapper thread panicked");
        match (failure, joined) {
            (Some(e), _) => (Err(e), Vec::new()),
            (None, Err(e)) => (Err(PipelineError::Map(e)), Vec::new()),
            (None, Ok((m, r))) => (Ok(m), r),
        }
    });
    *map = result?;
    let mut overlaps = 0;
    for (index, report) in reports {
        overlaps = overlaps.max(report.overlaps);
        if let Some(d) = tracker.diagnostics.iter_mut().find(|d| d.index == index) {
            mapper_timings(d, &report);
        }
    }
    Ok((lost, overlaps))
}

pub fn write_map(file: &Path, points: &[MapPoint]) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(file)?);
    writeln!(out, "# kind status x y z idepth_variance")?;
    for p in points {
        let kind = match p.kind {
            FeatureKind::Corner => "corner",
            FeatureKind::Pixel => "pixel",
        };
        writeln!(
            out,
            "{kind} {} {:.6} {:.6} {:.6} {:.6e}",
            p.status.as_str(),
            p.world.x,
            p.world.y,
            p.world.z,
            p.idepth_variance
        )?;
    }
    Ok(())
}

pub fn write_diagnostics(file: &Path, rows: &[FrameDiagnostics]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(file)?;
    let mut header = vec!["frame", "keyframe", "corners", "n_p", "n_g", "K_trace", "energy"];
    header.extend(PROCESS_NAMES);
    w.write_record(&header)?;
    for d in rows {
        let mut rec = vec![
            d.index.to_string(),
            (d.keyframe as u8).to_string(),
            d.corners.to_string(),
            d.n_p.to_string(),
            d.n_g.to_string(),
            d.k_trace.iter().map(|k| format!("{k:.4}")).collect::<Vec<_>>().join(";"),
            format!("{:.6}", d.energy),
        ];
        rec.extend(d.timings.iter().map(|t| format!("{t:.3}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trajectory.txt`, `map.txt` and `diagnostics.csv` into `dir`.
pub fn write_outputs(dir: &Path, report: &TrajectoryReport) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    write_trajectory(&dir.join("trajectory.txt"), &report.poses)?;
    write_map(&dir.join("map.txt"), &report.map)?;
    write_diagnostics(&dir.join("diagnostics.csv"), &report.diagnostics)?;
    Ok(())
}
