//! Synthetic scenes, dataset I/O, trajectory metrics and the end-to-end
//! odometry driver.

mod config;
mod dataset;
mod metrics;
mod pipeline;
mod scene;

pub use config::{ConfigError, InitMode, VoConfig};
pub use dataset::{export_scene, read_trajectory, write_trajectory, Dataset, DatasetError, FrameMeta, TimedCameraPose};
pub use metrics::{associate, compute_alignment_error, umeyama, AlignmentMetrics, MetricsError, Sim3};
pub use pipeline::{
    run_odometry, write_diagnostics, write_map, write_outputs, FrameDiagnostics, FrameSource, PipelineError,
    SceneSource, SourceFrame, TrajectoryEntry, TrajectoryReport, PROCESS_NAMES, TRACKING_PROCESSES,
};
pub use scene::{
    look_at, AffineSchedule, RenderedFrame, SceneError, Surface, SyntheticScene, Texture, TextureStyle,
    TimedPose, Trajectory,
};
