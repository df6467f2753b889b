use jointvo::harness::{
    export_scene, run_odometry, Dataset, InitMode, SceneSource, SyntheticScene, TextureStyle, Trajectory, VoConfig,
};

fn short_room(frames: usize) -> SyntheticScene {
    let mut s = SyntheticScene::room(TextureStyle::Rich, frames, 7);
    if let Trajectory::Orbit { start_deg, end_deg, .. } = &mut s.trajectory {
        *end_deg = *start_deg + 0.2 * frames as f64;
    }
    s
}

fn single_thread() -> VoConfig {
    VoConfig {
        single_thread: true,
        ..VoConfig::default()
    }
}

#[test]
fn threaded_run_tracks_every_frame() {
    let mut src = SceneSource { scene: short_room(30) };
    let report = run_odometry(&mut src, &VoConfig::default()).unwrap();
    assert_eq!(report.tracking_lost_at, None);
    assert_eq!(report.poses.len(), 30);
    assert_eq!(report.diagnostics.len(), 30);
    assert!(report.keyframes >= 2);
    let m = report.metrics.expect("ground truth available");
    assert!(m.ate_rmse < 0.01 * m.extent.max(1e-3), "{m:?}");
}

#[test]
fn dataset_and_scene_sources_agree() {
    let scene = short_room(12);
    let dir = tempfile::tempdir().unwrap();
    export_scene(&scene, dir.path()).unwrap();
    let mut ds = Dataset::open(dir.path()).unwrap();
    let from_disk = run_odometry(&mut ds, &single_thread()).unwrap();
    let from_scene = run_odometry(&mut SceneSource { scene }, &single_thread()).unwrap();
    assert_eq!(from_disk.poses.len(), from_scene.poses.len());
    // PNG quantization perturbs intensities, so only require close agreement
    for (a, b) in from_disk.poses.iter().zip(&from_scene.poses) {
        assert!((a.1.translation - b.1.translation).norm() < 5e-3);
    }
}

#[test]
fn filter_initialization_recovers_up_to_scale() {
    let mut cfg = single_thread();
    cfg.init = InitMode::Filter;
    let report = run_odometry(&mut SceneSource { scene: short_room(40) }, &cfg).unwrap();
    assert_eq!(report.tracking_lost_at, None);
    let m = report.metrics.unwrap();
    assert!(m.alignment.scale.is_finite() && m.alignment.scale > 0.0);
    assert!(!report.map.is_empty());
}

#[test]
fn keyframe_insertion_leaves_no_overlapping_actives() {
    let report = run_odometry(&mut SceneSource { scene: short_room(40) }, &single_thread()).unwrap();
    assert_eq!(report.max_overlaps, 0);
}
