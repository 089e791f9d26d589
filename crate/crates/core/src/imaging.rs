//! Image ingestion, unit-range conversion, cropping, and dataset iteration.
//!
//! Pixels live in `[0, 1]` as `f32`, stored `(height, width, channels)` with
//! three channels. Keeping the unit range means the PSNR peak term is exactly
//! 1.0 and reconstruction outputs can be squashed with a logistic function.
//!
//! Datasets are flat directories of PNG/JPEG files laid out as
//! `<root>/<split>/*.png|*.jpg`. Iteration order is a seeded shuffle, so a
//! fixed seed replays the identical batch sequence.

use crate::seeding::derive_seed;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: expected 8-bit RGB, found {found}")]
    NotRgb8 { path: PathBuf, found: String },
    #[error("crop of {size} exceeds image dimensions {height}x{width}")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("pixel value {value} outside [0, 1]")]
    OutOfRange { value: f32 },
    #[error("no decodable images under {path}")]
    EmptyDataset { path: PathBuf },
    #[error("failed to encode {path}: {source}")]
    Encode {
        path: PathBuf,
        source: image::ImageError,
    },
}

/// An RGB image with unit-range `f32` pixels, shaped `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
}

impl ImageTensor {
    /// Wraps a pixel grid, validating the unit range and channel count.
    pub fn new(pixels: Array3<f32>) -> Result<Self, ImagingError> {
        assert_eq!(pixels.dim().2, 3, "ImageTensor requires 3 channels");
        for &v in pixels.iter() {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(ImagingError::OutOfRange { value: v });
            }
        }
        Ok(ImageTensor { pixels })
    }

    /// Wraps a pixel grid, clamping stray values into `[0, 1]`.
    pub fn from_clamped(pixels: Array3<f32>) -> Self {
        assert_eq!(pixels.dim().2, 3, "ImageTensor requires 3 channels");
        ImageTensor {
            pixels: pixels.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    /// Pixel grid converted to a dynamically shaped array of the requested
    /// element type, for feeding the differentiable pipeline.
    pub fn to_scalar_array<T: crate::autodiff::Scalar>(&self) -> ndarray::ArrayD<T> {
        self.pixels.mapv(|v| T::from_f64(f64::from(v))).into_dyn()
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Which directory of a dataset root to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Describes one pass over a dataset split.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub crop_size: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

/// A batch of equally sized images.
pub type Batch = Vec<ImageTensor>;

/// Loads an 8-bit RGB image and maps pixel values by `v / 255`.
pub fn load_image(path: &Path) -> Result<ImageTensor, ImagingError> {
    let bytes = std::fs::read(path).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoded = image::load_from_memory(&bytes).map_err(|source| ImagingError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(ImagingError::NotRgb8 {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let mut pixels = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[(y as usize, x as usize, c)] = f32::from(p.0[c]) / 255.0;
        }
    }
    Ok(ImageTensor { pixels })
}

/// Writes an image as 8-bit PNG, rounding each unit-range value to the
/// nearest of 256 levels.
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<(), ImagingError> {
    let (h, w, _) = image.pixels.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = image.pixels[(y as usize, x as usize, c)].clamp(0.0, 1.0);
            p.0[c] = (v * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|source| ImagingError::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Extracts a seeded, uniformly placed `size`x`size` sub-image.
pub fn random_crop(
    image: &ImageTensor,
    size: usize,
    seed: u64,
) -> Result<ImageTensor, ImagingError> {
    let (h, w, _) = image.pixels.dim();
    if size > h || size > w {
        return Err(ImagingError::CropTooLarge {
            size,
            height: h,
            width: w,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok(ImageTensor {
        pixels: image
            .pixels
            .slice(ndarray::s![y..y + size, x..x + size, ..])
            .to_owned(),
    })
}

/// Extracts the centered `size`x`size` sub-image (used for evaluation, where
/// crops must not depend on a seed).
pub fn center_crop(image: &ImageTensor, size: usize) -> Result<ImageTensor, ImagingError> {
    let (h, w, _) = image.pixels.dim();
    if size > h || size > w {
        return Err(ImagingError::CropTooLarge {
            size,
            height: h,
            width: w,
        });
    }
    let y = (h - size) / 2;
    let x = (w - size) / 2;
    Ok(ImageTensor {
        pixels: image
            .pixels
            .slice(ndarray::s![y..y + size, x..x + size, ..])
            .to_owned(),
    })
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

/// Lists the image files of a split in deterministic (sorted) order.
pub fn list_images(root: &Path, split: Split) -> Result<Vec<PathBuf>, ImagingError> {
    let dir = root.join(split.dir_name());
    let entries = std::fs::read_dir(&dir).map_err(|source| ImagingError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ImagingError::EmptyDataset { path: dir });
    }
    Ok(files)
}

/// Streams seeded, shuffled, cropped batches for one pass over a split.
///
/// Training passes use seeded random crops and drop a final short batch;
/// evaluation passes use center crops and keep the final short batch.
pub fn iterate_batches(spec: &DatasetSpec) -> Result<BatchIter, ImagingError> {
    let mut files = list_images(&spec.root, spec.split)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.shuffle_seed, "shuffle", &[]));
    files.shuffle(&mut rng);
    Ok(BatchIter {
        spec: spec.clone(),
        files,
        next_index: 0,
    })
}

/// Iterator over the batches of one dataset pass. Yields `Err` once and then
/// terminates if an underlying file fails to load or crop.
pub struct BatchIter {
    spec: DatasetSpec,
    files: Vec<PathBuf>,
    next_index: usize,
}

impl Iterator for BatchIter {
    type Item = Result<Batch, ImagingError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_index >= self.files.len() {
            return None;
        }
        let remaining = self.files.len() - self.next_index;
        if remaining < self.spec.batch_size && self.spec.split == Split::Train {
            // Short batches would change the effective learning-rate scaling,
            // so a training pass drops them.
            self.next_index = self.files.len();
            return None;
        }
        let take = remaining.min(self.spec.batch_size);
        let mut batch = Vec::with_capacity(take);
        for _ in 0..take {
            let idx = self.next_index;
            let path = &self.files[idx];
            self.next_index += 1;
            let image = match load_image(path) {
                Ok(img) => img,
                Err(e) => {
                    self.next_index = self.files.len();
                    return Some(Err(e));
                }
            };
            let cropped = match self.spec.split {
                Split::Train => random_crop(
                    &image,
                    self.spec.crop_size,
                    derive_seed(self.spec.shuffle_seed, "crop", &[idx as u64]),
                ),
                Split::Eval => center_crop(&image, self.spec.crop_size),
            };
            match cropped {
                Ok(img) => batch.push(img),
                Err(e) => {
                    self.next_index = self.files.len();
                    return Some(Err(e));
                }
            }
        }
        Some(Ok(batch))
    }
}

pub mod synth {
    //! Seeded synthetic photographs for tests and self-contained experiments.
    //!
    //! Each image layers a smooth two-tone gradient, a few filled rectangles
    //! and ellipses, and low-amplitude sinusoidal texture, giving the codec
    //! edges, flat regions, and periodic detail to learn from.

    use super::*;

    fn lerp(a: f32, b: f32, t: f32) -> f32 {
        a + (b - a) * t
    }

    /// Renders one synthetic image deterministically from a seed.
    pub fn generate_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pixels = Array3::<f32>::zeros((size, size, 3));

        // Smooth background: corner colors interpolated bilinearly.
        let corners: Vec<[f32; 3]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let ty = y as f32 / (size - 1).max(1) as f32;
                let tx = x as f32 / (size - 1).max(1) as f32;
                for c in 0..3 {
                    let top = lerp(corners[0][c], corners[1][c], tx);
                    let bottom = lerp(corners[2][c], corners[3][c], tx);
                    pixels[(y, x, c)] = lerp(top, bottom, ty);
                }
            }
        }

        // Opaque shapes with random color and placement.
        let shapes = rng.random_range(3..7);
        for _ in 0..shapes {
            let color = [
                rng.random_range(0.0..1.0f32),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            let cy = rng.random_range(0..size) as f32;
            let cx = rng.random_range(0..size) as f32;
            let ry = rng.random_range(size as f32 * 0.05..size as f32 * 0.3);
            let rx = rng.random_range(size as f32 * 0.05..size as f32 * 0.3);
            let ellipse = rng.random_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let dy = (y as f32 - cy) / ry;
                    let dx = (x as f32 - cx) / rx;
                    let inside = if ellipse {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        for c in 0..3 {
                            pixels[(y, x, c)] = color[c];
                        }
                    }
                }
            }
        }

        // Low-amplitude texture so images are not piecewise constant.
        let fy = rng.random_range(0.05..0.35f32);
        let fx = rng.random_range(0.05..0.35f32);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let amp = rng.random_range(0.02..0.08f32);
        for y in 0..size {
            for x in 0..size {
                let t = (fy * y as f32 + fx * x as f32 + phase).sin() * amp;
                for c in 0..3 {
                    pixels[(y, x, c)] = (pixels[(y, x, c)] + t).clamp(0.0, 1.0);
                }
            }
        }

        ImageTensor { pixels }
    }

    /// Writes `count` synthetic PNGs into `<root>/<split>/`.
    pub fn write_dataset(
        root: &Path,
        split: Split,
        count: usize,
        size: usize,
        seed: u64,
    ) -> Result<Vec<PathBuf>, ImagingError> {
        let dir = root.join(split.dir_name());
        std::fs::create_dir_all(&dir).map_err(|source| ImagingError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut paths = Vec::with_capacity(count);
        for i in 0..count {
            let img = generate_image(size, derive_seed(seed, "synth", &[i as u64]));
            let path = dir.join(format!("img_{i:05}.png"));
            save_image(&path, &img)?;
            paths.push(path);
        }
        Ok(paths)
    }
}
