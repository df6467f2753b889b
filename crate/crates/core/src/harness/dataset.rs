//! On-disk sequences: a synthetic exporter and a reader with optional
//! photometric calibration.
//!
//! Layout of a sequence directory:
//!
//! ```text
//! images/00000.png ...   8-bit grayscale frames
//! times.txt              "id timestamp [exposure]" per line
//! camera.txt             "fu fv cu cv" then "width height"
//! pcalib.txt             optional, 256 inverse-response values
//! vignette.png           optional, attenuation map (max value = 1)
//! groundtruth.txt        optional, "timestamp tx ty tz qx qy qz qw" (camera-to-world)
//! idepth_00000.f32       optional, first-frame inverse depth, little-endian f32
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use nalgebra::Vector3;
use thiserror::Error;

use super::scene::{SceneError, SyntheticScene};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image_pyramid::IntensityImage;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed dataset file {file}: {reason}")]
    MalformedDataset { file: PathBuf, reason: String },
    #[error("i/o error on {file}: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn malformed(file: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedDataset {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

fn io(file: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        file: file.to_path_buf(),
        source,
    }
}

fn read_text(file: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(file).map_err(io(file))
}

fn parse_numbers(file: &Path, line: &str) -> Result<Vec<f64>, DatasetError> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| malformed(file, format!("not a number: {t:?}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub id: usize,
    pub timestamp: f64,
    pub exposure: f64,
}

/// Camera-to-world pose with its timestamp.
pub type TimedCameraPose = (f64, Pose);

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub camera: CameraIntrinsics,
    pub frames: Vec<FrameMeta>,
    /// Inverse response: raw 8-bit value to irradiance.
    pub response: Option<Vec<f64>>,
    /// Per-pixel attenuation in (0, 1].
    pub vignette: Option<Vec<f64>>,
    pub groundtruth: Option<Vec<TimedCameraPose>>,
    pub warnings: Vec<String>,
}

fn image_path(root: &Path, id: usize) -> PathBuf {
    root.join("images").join(format!("{id:05}.png"))
}

pub fn write_trajectory(file: &Path, poses: &[TimedCameraPose]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for (t, p) in poses {
        let q = p.quaternion();
        let x = p.translation;
        out.push_str(&format!(
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            x.x, x.y, x.z, q[0], q[1], q[2], q[3]
        ));
    }
    fs::write(file, out).map_err(io(file))
}

pub fn read_trajectory(file: &Path) -> Result<Vec<TimedCameraPose>, DatasetError> {
    let text = read_text(file)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_numbers(file, line)?;
        if v.len() != 8 {
            return Err(malformed(file, format!("expected 8 values, got {}", v.len())));
        }
        out.push((v[0], Pose::from_quaternion(Vector3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]])));
    }
    Ok(out)
}

/// Renders every frame of `scene` into `dir`, with ground-truth poses and
/// the first frame's inverse depth.
pub fn export_scene(scene: &SyntheticScene, dir: &Path) -> Result<usize, DatasetError> {
    scene.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io(&images))?;
    let c = &scene.intrinsics;
    let cam = dir.join("camera.txt");
    fs::write(&cam, format!("{} {} {} {}\n{} {}\n", c.fu, c.fv, c.cu, c.cv, c.width, c.height)).map_err(io(&cam))?;
    let mut times = String::new();
    let mut gt = Vec::new();
    for i in 0..scene.len() {
        let f = scene.render_frame(i)?;
        let img = GrayImage::from_fn(c.width as u32, c.height as u32, |u, v| {
            Luma([f.image.get(u as usize, v as usize).clamp(0.0, 255.0) as u8])
        });
        let path = image_path(dir, i);
        img.save(&path).map_err(|e| malformed(&path, e.to_string()))?;
        times.push_str(&format!("{i} {:.6} {}\n", f.timestamp, f.affine.t));
        gt.push((f.timestamp, f.camera_to_world));
        if i == 0 {
            let path = dir.join("idepth_00000.f32");
            let mut file = fs::File::create(&path).map_err(io(&path))?;
            let bytes: Vec<u8> = f.idepth.iter().flat_map(|d| (*d as f32).to_le_bytes()).collect();
            file.write_all(&bytes).map_err(io(&path))?;
        }
    }
    let tpath = dir.join("times.txt");
    fs::write(&tpath, times).map_err(io(&tpath))?;
    write_trajectory(&dir.join("groundtruth.txt"), &gt)?;
    Ok(scene.len())
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let mut warnings = Vec::new();
        let cam_file = root.join("camera.txt");
        let text = read_text(&cam_file)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 2 {
            return Err(malformed(&cam_file, "expected intrinsics and image size lines"));
        }
        let k = parse_numbers(&cam_file, lines[0])?;
        let wh = parse_numbers(&cam_file, lines[1])?;
        if k.len() != 4 || wh.len() != 2 {
            return Err(malformed(&cam_file, "expected 'fu fv cu cv' and 'width height'"));
        }
        let camera = CameraIntrinsics::new(k[0], k[1], k[2], k[3], wh[0] as usize, wh[1] as usize)
            .map_err(|e| malformed(&cam_file, e.to_string()))?;

        let times_file = root.join("times.txt");
        let mut frames = Vec::new();
        let mut missing_exposure = false;
        for line in read_text(&times_file)?.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v = parse_numbers(&times_file, line)?;
            match v.len() {
                2 => missing_exposure = true,
                3 if v[2] > 0.0 => {}
                3 => return Err(malformed(&times_file, "exposure must be positive")),
                n => return Err(malformed(&times_file, format!("expected 2 or 3 columns, got {n}"))),
            }
            frames.push(FrameMeta {
                id: v[0] as usize,
                timestamp: v[1],
                exposure: v.get(2).copied().unwrap_or(1.0),
            });
        }
        if missing_exposure {
            // without exposures every frame is treated as t = 1
            frames.iter_mut().for_each(|f| f.exposure = 1.0);
            let msg = format!("{}: no exposure column, using t = 1", times_file.display());
            log::warn!("{msg}");
            warnings.push(msg);
        }

        let pcalib = root.join("pcalib.txt");
        let response = if pcalib.exists() {
            let v = parse_numbers(&pcalib, &read_text(&pcalib)?)?;
            if v.len() != 256 {
                return Err(malformed(&pcalib, format!("expected 256 values, got {}", v.len())));
            }
            if v.windows(2).any(|w| w[1] < w[0]) {
                return Err(malformed(&pcalib, "response must be monotone"));
            }
            Some(v)
        } else {
            None
        };

        let vig = root.join("vignette.png");
        let vignette = if vig.exists() {
            let img = ImageReader::open(&vig)
                .map_err(io(&vig))?
                .decode()
                .map_err(|e| malformed(&vig, e.to_string()))?
                .to_luma16();
            if img.width() as usize != camera.width || img.height() as usize != camera.height {
                return Err(malformed(&vig, "size differs from the camera"));
            }
            let max = img.pixels().map(|p| p.0[0]).max().unwrap_or(0) as f64;
            if max <= 0.0 {
                return Err(malformed(&vig, "all-zero vignette"));
            }
            Some(img.pixels().map(|p| (p.0[0] as f64 / max).max(1e-3)).collect())
        } else {
            None
        };

        let gt_file = root.join("groundtruth.txt");
        let groundtruth = if gt_file.exists() { Some(read_trajectory(&gt_file)?) } else { None };

        Ok(Self {
            root: root.to_path_buf(),
            camera,
            frames,
            response,
            vignette,
            groundtruth,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads frame `i` with the response inverted and vignetting removed.
    pub fn load_image(&self, i: usize) -> Result<IntensityImage, DatasetError> {
        let meta = self.frames.get(i).ok_or_else(|| malformed(&self.root, format!("no frame {i}")))?;
        let path = image_path(&self.root, meta.id);
        let img = ImageReader::open(&path)
            .map_err(io(&path))?
            .decode()
            .map_err(|e| malformed(&path, e.to_string()))?
            .to_luma8();
        let (w, h) = (self.camera.width, self.camera.height);
        if img.width() as usize != w || img.height() as usize != h {
            return Err(malformed(&path, "size differs from the camera"));
        }
        let data = img
            .pixels()
            .enumerate()
            .map(|(k, p)| {
                let raw = p.0[0];
                let mut v = match &self.response {
                    Some(g) => g[raw as usize],
                    None => raw as f64,
                };
                if let Some(vig) = &self.vignette {
                    v /= vig[k];
                }
                v
            })
            .collect();
        IntensityImage::new(w, h, data).map_err(|e| malformed(&path, e.to_string()))
    }

    /// First-frame inverse depth, if stored.
    pub fn first_idepth(&self) -> Result<Option<Vec<f64>>, DatasetError> {
        let path = self.root.join("idepth_00000.f32");
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(io(&path))?;
        if bytes.len() != 4 * self.camera.width * self.camera.height {
            return Err(malformed(&path, "size differs from the camera"));
        }
        Ok(Some(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{AffineSchedule, TextureStyle};

    fn small_scene() -> SyntheticScene {
        let mut s = SyntheticScene::room(TextureStyle::Rich, 3, 2);
        s.intrinsics = CameraIntrinsics::new(100.0, 100.0, 63.5, 47.5, 128, 96).unwrap();
        s.affine = AffineSchedule {
            exposure: 2.0,
            ..AffineSchedule::default()
        };
        s
    }

    #[test]
    fn export_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene();
        export_scene(&scene, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.warnings.is_empty());
        for i in 0..3 {
            let f = scene.render_frame(i).unwrap();
            assert!(ds.load_image(i).unwrap() == f.image);
            assert_eq!(ds.frames[i].exposure, 2.0);
        }
        let d = ds.first_idepth().unwrap().unwrap();
        let f = scene.render_frame(0).unwrap();
        assert!(d.iter().zip(&f.idepth).all(|(a, b)| (*a - *b as f32 as f64).abs() == 0.0));
        let gt = ds.groundtruth.unwrap();
        assert!((gt[2].1.translation - f.camera_to_world.translation).norm() > 0.0);
    }

    #[test]
    fn identity_calibration_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        export_scene(&small_scene(), dir.path()).unwrap();
        let plain = Dataset::open(dir.path()).unwrap().load_image(1).unwrap();
        let values: Vec<String> = (0..256).map(|v| v.to_string()).collect();
        fs::write(dir.path().join("pcalib.txt"), values.join(" ")).unwrap();
        GrayImage::from_pixel(128, 96, Luma([255])).save(dir.path().join("vignette.png")).unwrap();
        let calibrated = Dataset::open(dir.path()).unwrap().load_image(1).unwrap();
        assert!(plain == calibrated);
    }

    #[test]
    fn missing_exposure_defaults_to_one() {
        let dir = tempfile::tempdir().unwrap();
        export_scene(&small_scene(), dir.path()).unwrap();
        fs::write(dir.path().join("times.txt"), "0 0.0\n1 0.033\n2 0.066\n").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.frames.iter().all(|f| f.exposure == 1.0));
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn malformed_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        export_scene(&small_scene(), dir.path()).unwrap();
        fs::write(dir.path().join("camera.txt"), "1 2 3\n").unwrap();
        match Dataset::open(dir.path()) {
            Err(DatasetError::MalformedDataset { file, .. }) => assert!(file.ends_with("camera.txt")),
            other => panic!("{other:?}"),
        }
    }
}
