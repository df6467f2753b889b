//! Multi-resolution intensity and gradient planes.

use std::sync::Arc;

use nalgebra::Vector2;
use thiserror::Error;

use crate::geometry::CameraIntrinsics;

pub const MIN_IMAGE_SIDE: usize = 64;
pub const MIN_COARSE_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PyramidError {
    #[error("image {width}x{height} is too small for {levels} pyramid levels")]
    ImageTooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("sample position ({u:.3}, {v:.3}) is outside the interpolation area")]
    OutOfImage { u: f64, v: f64 },
    #[error("buffer of {len} values does not match {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("intrinsics describe a {0}x{1} image")]
    IntrinsicsMismatch(usize, usize),
}

/// Row-major single-channel image with floating-point intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PyramidError> {
        if data.len() != width * height {
            return Err(PyramidError::SizeMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// Interpolated intensity and gradient at a sub-pixel location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub intensity: f64,
    pub grad_u: f64,
    pub grad_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f64>,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

impl ImagePlane {
    pub fn from_image(image: IntensityImage) -> Self {
        let IntensityImage {
            width,
            height,
            data,
        } = image;
        let (grad_u, grad_v) = gradients(width, height, &data);
        Self {
            width,
            height,
            intensities: data,
            grad_u,
            grad_v,
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.intensities[v * self.width + u]
    }

    #[inline]
    pub fn grad_at(&self, u: usize, v: usize) -> (f64, f64) {
        let i = v * self.width + u;
        (self.grad_u[i], self.grad_v[i])
    }

    /// True when `p` can be bilinearly sampled (1-px border excluded).
    #[inline]
    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= 1.0
            && p.y >= 1.0
            && p.x <= (self.width - 2) as f64
            && p.y <= (self.height - 2) as f64
    }

    /// Bilinear interpolation of the intensity and both gradient planes.
    pub fn sample_bilinear(&self, p: &Vector2<f64>) -> Result<PixelSample, PyramidError> {
        if !self.in_bounds(p) {
            return Err(PyramidError::OutOfImage { u: p.x, v: p.y });
        }
        Ok(self.sample_unchecked(p))
    }

    /// Intensity only; caller guarantees bounds.
    #[inline]
    pub fn intensity_unchecked(&self, p: &Vector2<f64>) -> f64 {
        let (i, fx, fy) = self.cell(p);
        bilerp(&self.intensities, i, self.width, fx, fy)
    }

    #[inline]
    pub fn sample_unchecked(&self, p: &Vector2<f64>) -> PixelSample {
        let (i, fx, fy) = self.cell(p);
        PixelSample {
            intensity: bilerp(&self.intensities, i, self.width, fx, fy),
            grad_u: bilerp(&self.grad_u, i, self.width, fx, fy),
            grad_v: bilerp(&self.grad_v, i, self.width, fx, fy),
        }
    }

    #[inline]
    fn cell(&self, p: &Vector2<f64>) -> (usize, f64, f64) {
        let x0 = (p.x.floor() as usize).min(self.width - 2);
        let y0 = (p.y.floor() as usize).min(self.height - 2);
        (y0 * self.width + x0, p.x - x0 as f64, p.y - y0 as f64)
    }

    pub fn mean(&self) -> f64 {
        self.intensities.iter().sum::<f64>() / self.intensities.len() as f64
    }

    pub fn gradient_magnitude(&self, u: usize, v: usize) -> f64 {
        let (gu, gv) = self.grad_at(u, v);
        (gu * gu + gv * gv).sqrt()
    }
}

#[inline]
fn bilerp(data: &[f64], i: usize, w: usize, fx: f64, fy: f64) -> f64 {
    let a = data[i];
    let b = data[i + 1];
    let c = data[i + w];
    let d = data[i + w + 1];
    let top = a + fx * (b - a);
    let bot = c + fx * (d - c);
    top + fy * (bot - top)
}

/// Central differences on the interior, one-sided on the border.
fn gradients(width: usize, height: usize, data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gu = vec![0.0; width * height];
    let mut gv = vec![0.0; width * height];
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            gu[i] = if width < 2 {
                0.0
            } else if u == 0 {
                data[i + 1] - data[i]
            } else if u == width - 1 {
                data[i] - data[i - 1]
            } else {
                0.5 * (data[i + 1] - data[i - 1])
            };
            gv[i] = if height < 2 {
                0.0
            } else if v == 0 {
                data[i + width] - data[i]
            } else if v == height - 1 {
                data[i] - data[i - width]
            } else {
                0.5 * (data[i + width] - data[i - width])
            };
        }
    }
    (gu, gv)
}

fn downsample(plane: &ImagePlane) -> IntensityImage {
    let w = plane.width / 2;
    let h = plane.height / 2;
    IntensityImage::from_fn(w, h, |u, v| {
        let (x, y) = (2 * u, 2 * v);
        0.25 * (plane.at(x, y) + plane.at(x + 1, y) + plane.at(x, y + 1) + plane.at(x + 1, y + 1))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<ImagePlane>,
    pub intrinsics: Vec<CameraIntrinsics>,
    /// Exposure time in seconds (1.0 when unknown).
    pub exposure: f64,
}

pub type SharedPyramid = Arc<ImagePyramid>;

impl ImagePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &ImagePlane {
        &self.levels[l]
    }

    pub fn finest(&self) -> &ImagePlane {
        &self.levels[0]
    }

    pub fn camera(&self, l: usize) -> &CameraIntrinsics {
        &self.intrinsics[l]
    }
}

/// Largest level count whose coarsest level keeps [`MIN_COARSE_SIDE`] pixels
/// on the short side.
pub fn max_levels(width: usize, height: usize) -> usize {
    let mut n = 1;
    let mut s = width.min(height);
    while s / 2 >= MIN_COARSE_SIDE {
        s /= 2;
        n += 1;
    }
    n
}

/// Builds the pyramid by 2×2 block averaging; gradients are stored per level.
pub fn build_pyramid(
    image: IntensityImage,
    exposure: f64,
    num_levels: usize,
    camera: &CameraIntrinsics,
) -> Result<ImagePyramid, PyramidError> {
    let (w, h) = (image.width, image.height);
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE || num_levels < 2 || num_levels > max_levels(w, h)
    {
        return Err(PyramidError::ImageTooSmall {
            width: w,
            height: h,
            levels: num_levels,
        });
    }
    if camera.width != w || camera.height != h {
        return Err(PyramidError::IntrinsicsMismatch(camera.width, camera.height));
    }
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(ImagePlane::from_image(image));
    for _ in 1..num_levels {
        let next = downsample(levels.last().unwrap());
        levels.push(ImagePlane::from_image(next));
    }
    let intrinsics = (0..num_levels).map(|l| camera.at_level(l)).collect();
    Ok(ImagePyramid {
        levels,
        intrinsics,
        exposure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    #[test]
    fn constant_image() {
        let img = IntensityImage::from_fn(128, 96, |_, _| 100.0);
        let pyr = build_pyramid(img, 1.0, 3, &cam(128, 96)).unwrap();
        for plane in &pyr.levels {
            assert!(plane.intensities.iter().all(|&x| x == 100.0));
            assert!(plane.grad_u.iter().chain(&plane.grad_v).all(|&g| g == 0.0));
        }
        assert_eq!((pyr.levels[2].width, pyr.levels[2].height), (32, 24));
    }

    #[test]
    fn ramp_gradient() {
        let img = IntensityImage::from_fn(64, 64, |u, _| u as f64);
        let pyr = build_pyramid(img, 1.0, 2, &cam(64, 64)).unwrap();
        let p = &pyr.levels[0];
        for v in 1..63 {
            for u in 1..63 {
                assert_eq!(p.grad_at(u, v), (1.0, 0.0));
            }
        }
        // one-sided border differences are still exact on a ramp
        assert_eq!(p.grad_at(0, 5), (1.0, 0.0));
        assert_eq!(p.grad_at(63, 5), (1.0, 0.0));
    }

    #[test]
    fn block_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img = IntensityImage::from_fn(64, 64, |_, _| rng.random_range(0.0..255.0));
        let src = img.clone();
        let pyr = build_pyramid(img, 1.0, 3, &cam(64, 64)).unwrap();
        let l2 = &pyr.levels[2];
        assert_eq!((l2.width, l2.height), (16, 16));
        for j in 0..16 {
            for i in 0..16 {
                let mut s = 0.0;
                for dv in 0..4 {
                    for du in 0..4 {
                        s += src.get(4 * i + du, 4 * j + dv);
                    }
                }
                assert!((l2.at(i, j) - s / 16.0).abs() < 1e-12);
            }
        }
        for l in 1..3 {
            assert!((pyr.levels[l].mean() - pyr.levels[0].mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn interior_gradients_are_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = IntensityImage::from_fn(64, 64, |_, _| rng.random_range(0.0..255.0));
        let pyr = build_pyramid(img, 1.0, 2, &cam(64, 64)).unwrap();
        for plane in &pyr.levels {
            for v in 1..plane.height - 1 {
                for u in 1..plane.width - 1 {
                    let (gu, gv) = plane.grad_at(u, v);
                    assert_eq!(gu, 0.5 * (plane.at(u + 1, v) - plane.at(u - 1, v)));
                    assert_eq!(gv, 0.5 * (plane.at(u, v + 1) - plane.at(u, v - 1)));
                }
            }
        }
    }

    #[test]
    fn too_small() {
        let img = IntensityImage::from_fn(32, 64, |_, _| 0.0);
        assert!(matches!(
            build_pyramid(img, 1.0, 2, &cam(32, 64)),
            Err(PyramidError::ImageTooSmall { .. })
        ));
        let img = IntensityImage::from_fn(64, 64, |_, _| 0.0);
        assert!(build_pyramid(img, 1.0, 4, &cam(64, 64)).is_err());
    }

    #[test]
    fn bilinear_sampling() {
        let img = IntensityImage::from_fn(64, 64, |u, v| ((u * 7 + v * 13) % 31) as f64);
        let plane = ImagePlane::from_image(img.clone());
        let s = plane.sample_bilinear(&Vector2::new(5.0, 9.0)).unwrap();
        assert_eq!(s.intensity, img.get(5, 9));
        assert_eq!((s.grad_u, s.grad_v), plane.grad_at(5, 9));

        let row = IntensityImage::from_fn(64, 64, |u, _| if u == 10 { 20.0 } else { 60.0 });
        let plane = ImagePlane::from_image(row);
        let s = plane.sample_bilinear(&Vector2::new(10.5, 7.0)).unwrap();
        assert_eq!(s.intensity, 40.0);

        let affine = IntensityImage::from_fn(64, 64, |u, v| 3.0 * u as f64 + 2.0 * v as f64);
        let plane = ImagePlane::from_image(affine);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let p = Vector2::new(rng.random_range(1.0..62.0), rng.random_range(1.0..62.0));
            let s = plane.sample_bilinear(&p).unwrap();
            assert!((s.intensity - (3.0 * p.x + 2.0 * p.y)).abs() < 1e-10);
            assert!((s.grad_u - 3.0).abs() < 1e-10 && (s.grad_v - 2.0).abs() < 1e-10);
        }
        assert!(plane.sample_bilinear(&Vector2::new(0.5, 10.0)).is_err());
        assert!(plane.sample_bilinear(&Vector2::new(10.0, 62.5)).is_err());
    }
}
