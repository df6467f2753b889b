use std::path::Path;
use std::process::{Command, Output};

use jointvo::geometry::CameraIntrinsics;
use jointvo::harness::{look_at, SyntheticScene, TextureStyle, TimedPose, Trajectory, PROCESS_NAMES};
use nalgebra::Vector3;

fn jointvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointvo")).args(args).output().expect("binary runs")
}

/// A short arc of the room orbit, about 0.2 degrees per frame.
fn small_scene(frames: usize) -> SyntheticScene {
    let mut s = SyntheticScene::room(TextureStyle::Rich, frames, 3);
    if let Trajectory::Orbit { start_deg, end_deg, .. } = &mut s.trajectory {
        *end_deg = *start_deg + 0.2 * frames as f64;
    }
    s
}

fn write_scene(dir: &Path, scene: &SyntheticScene) -> String {
    let path = dir.join("scene.toml");
    std::fs::write(&path, scene.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn render_run_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), &small_scene(15));
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let o = jointvo(&["render", "--scene", &scene, "--output", data.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(data.join("images/00014.png").exists());

    let o = jointvo(&[
        "run",
        "--input",
        data.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--init",
        "gt",
        "--single-thread",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ate_rmse"));
    let traj = std::fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 15);
    assert!(std::fs::read_to_string(out.join("map.txt")).unwrap().lines().count() > 1);
    let diag = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let header = diag.lines().next().unwrap();
    for name in PROCESS_NAMES {
        assert!(header.contains(name), "{name} missing from {header}");
    }
    assert_eq!(diag.lines().count(), 16);

    let o = jointvo(&[
        "eval",
        "--est",
        out.join("trajectory.txt").to_str().unwrap(),
        "--gt",
        data.join("groundtruth.txt").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("matched 15"), "{text}");
    let ate: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("ate_rmse "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ate < 0.01, "{ate}");
}

#[test]
fn threaded_run_on_scene_file() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), &small_scene(20));
    let out = dir.path().join("out");
    let o = jointvo(&["run", "--input", &scene, "--output", out.to_str().unwrap(), "--force-K", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let traj = std::fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 20);
}

#[test]
fn ablation_flags_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), &small_scene(8));
    for flag in ["--disable-indirect", "--disable-direct-corners"] {
        let out = dir.path().join(flag.trim_start_matches('-'));
        let o = jointvo(&["run", "--input", &scene, "--output", out.to_str().unwrap(), "--single-thread", flag]);
        assert_eq!(o.status.code(), Some(0), "{flag}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn malformed_input_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let scene = write_scene(dir.path(), &small_scene(4));
    let o = jointvo(&["run", "--input", &scene, "--output", out, "--set", "mapper.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));

    let data = dir.path().join("data");
    assert!(jointvo(&["render", "--scene", &scene, "--output", data.to_str().unwrap()]).status.success());
    std::fs::write(data.join("camera.txt"), "250 250\n").unwrap();
    let o = jointvo(&["run", "--input", data.to_str().unwrap(), "--output", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("camera.txt"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "surfaces = 3\n").unwrap();
    let o = jointvo(&["render", "--scene", bad.to_str().unwrap(), "--output", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tracking_loss_exits_with_2() {
    // the second view turns to a side wall the first never saw
    let mut scene = small_scene(2);
    scene.intrinsics = CameraIntrinsics::new(250.0, 250.0, 159.5, 119.5, 320, 240).unwrap();
    let eye = Vector3::new(0.0, 0.0, 1.0);
    let poses = [Vector3::new(0.0, 0.0, 4.0), Vector3::new(4.0, 0.0, 1.0), Vector3::new(4.0, 0.0, 1.2)]
        .iter()
        .enumerate()
        .map(|(i, target)| {
            let pose = look_at(&eye, target);
            let t = pose.translation;
            TimedPose {
                timestamp: i as f64 / 30.0,
                translation: [t.x, t.y, t.z],
                quaternion: pose.quaternion(),
            }
        })
        .collect();
    scene.trajectory = Trajectory::Poses { poses };
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(dir.path(), &scene);
    let out = dir.path().join("out");
    let o = jointvo(&["run", "--input", &path, "--output", out.to_str().unwrap(), "--single-thread"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trajectory.txt").exists());
}
