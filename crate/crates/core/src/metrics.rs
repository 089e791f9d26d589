//! Reference image-quality metrics: PSNR, SSIM, and multi-scale SSIM.
//!
//! These are the evaluation-grade implementations, computed in `f64`
//! regardless of how the pipeline was trained. The structural-similarity
//! statistics use Gaussian-weighted windows fully inside the image (no
//! padding), realized as separable row/column convolutions; the differentiable
//! loss variants in [`crate::losses`] share the same window and downsampling
//! rules so the two routes agree to float precision.

use crate::imaging::ImageTensor;
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: reference {reference:?} vs test {test:?}")]
    ShapeMismatch {
        reference: Vec<usize>,
        test: Vec<usize>,
    },
    #[error("max_val must be positive, got {0}")]
    NonPositiveMaxVal(f64),
    #[error("window size {0} must be odd and at least 3")]
    BadWindow(usize),
    #[error("image {height}x{width} is smaller than the {window}-pixel window")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("image {height}x{width} cannot support {scales} dyadic scales")]
    TooManyScales {
        scales: usize,
        height: usize,
        width: usize,
    },
}

/// Parameters of the single-scale structural similarity index.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    /// Odd side length of the Gaussian comparison window.
    pub window_size: usize,
    pub gaussian_sigma: f64,
    /// Luminance stabilizer, `(0.01 * max_val)^2` by convention.
    pub c1: f64,
    /// Contrast stabilizer, `(0.03 * max_val)^2` by convention.
    pub c2: f64,
    pub max_val: f64,
}

impl SsimConfig {
    /// Standard configuration for a given peak value: 11x11 window, sigma 1.5.
    pub fn for_max_val(max_val: f64) -> Self {
        SsimConfig {
            window_size: 11,
            gaussian_sigma: 1.5,
            c1: (0.01 * max_val) * (0.01 * max_val),
            c2: (0.03 * max_val) * (0.03 * max_val),
            max_val,
        }
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig::for_max_val(1.0)
    }
}

/// Parameters of the multi-scale structural similarity index.
#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub base: SsimConfig,
    /// Number of dyadic scales; the product runs over all of them.
    pub num_scales: usize,
}

impl MsSsimConfig {
    pub fn new(base: SsimConfig, num_scales: usize) -> Self {
        MsSsimConfig { base, num_scales }
    }
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            base: SsimConfig::default(),
            num_scales: 3,
        }
    }
}

/// Rejects even or undersized SSIM windows.
pub(crate) fn validate_window(window: usize) -> Result<(), MetricsError> {
    if window % 2 == 0 || window < 3 {
        return Err(MetricsError::BadWindow(window));
    }
    Ok(())
}

/// Rejects images smaller than the finest-scale window.
pub(crate) fn validate_fits(window: usize, height: usize, width: usize) -> Result<(), MetricsError> {
    if height < window || width < window {
        return Err(MetricsError::WindowTooLarge {
            window,
            height,
            width,
        });
    }
    Ok(())
}

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<(), MetricsError> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(MetricsError::ShapeMismatch {
            reference: a.pixels().shape().to_vec(),
            test: b.pixels().shape().to_vec(),
        });
    }
    Ok(())
}

fn to_f64(img: &ImageTensor) -> Array3<f64> {
    img.pixels().mapv(f64::from)
}

/// Mean squared error between two equally shaped images, accumulated in f64.
pub fn mean_squared_error(reference: &ImageTensor, test: &ImageTensor) -> Result<f64, MetricsError> {
    check_shapes(reference, test)?;
    let n = reference.pixels().len() as f64;
    let sum: f64 = reference
        .pixels()
        .iter()
        .zip(test.pixels().iter())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in decibels: `10 * log10(max_val^2 / MSE)`.
///
/// Returns positive infinity when the images are identical (MSE = 0).
pub fn psnr(reference: &ImageTensor, test: &ImageTensor, max_val: f64) -> Result<f64, MetricsError> {
    if max_val <= 0.0 {
        return Err(MetricsError::NonPositiveMaxVal(max_val));
    }
    let mse = mean_squared_error(reference, test)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 1-d Gaussian taps of odd length `size` centred on the middle
/// tap. Truncation is handled by renormalizing, so the taps always sum to 1.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as isize - 1) / 2;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Normalized 2-d Gaussian window as the outer product of [`gaussian_taps`].
pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let taps = gaussian_taps(size, sigma);
    Array2::from_shape_fn((size, size), |(i, j)| taps[i] * taps[j])
}

/// Largest odd window no bigger than requested that fits both dimensions.
/// Degenerates to 1 (pointwise statistics) on very small inputs.
pub(crate) fn effective_window(requested: usize, height: usize, width: usize) -> usize {
    let m = height.min(width).min(requested);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Low-pass (2x2 mean) filter followed by dropping every other row/column.
pub(crate) fn downsample_half(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    assert!(h >= 2 && w >= 2, "cannot downsample below 2x2");
    let (oh, ow) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
    Array3::from_shape_fn((oh, ow, c), |(y, xx, ch)| {
        0.25 * (x[(2 * y, 2 * xx, ch)]
            + x[(2 * y, 2 * xx + 1, ch)]
            + x[(2 * y + 1, 2 * xx, ch)]
            + x[(2 * y + 1, 2 * xx + 1, ch)])
    })
}

/// Valid-mode separable convolution of every channel with `taps` applied
/// along rows and then columns.
fn separable_filter(x: &Array3<f64>, taps: &[f64]) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let k = taps.len();
    let ow = w - k + 1;
    let mut rows = Array3::<f64>::zeros((h, ow, c));
    for y in 0..h {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    acc += t * x[(y, ox + i, ch)];
                }
                rows[(y, ox, ch)] = acc;
            }
        }
    }
    let oh = h - k + 1;
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for oy in 0..oh {
        for x2 in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    acc += t * rows[(oy + i, x2, ch)];
                }
                out[(oy, x2, ch)] = acc;
            }
        }
    }
    out
}

/// Structural similarity between two f64 pixel grids for a given window size,
/// averaged over window positions and channels.
fn ssim_arrays(
    x: &Array3<f64>,
    y: &Array3<f64>,
    window: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    let taps = gaussian_taps(window, sigma);
    let mu_x = separable_filter(x, &taps);
    let mu_y = separable_filter(y, &taps);
    let xx = separable_filter(&(x * x), &taps);
    let yy = separable_filter(&(y * y), &taps);
    let xy = separable_filter(&(x * y), &taps);

    let mut total = 0.0;
    for (((((&mx, &my), &sxx), &syy), &sxy), _) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
        .zip(0..)
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    total / mu_x.len() as f64
}

/// Mean structural similarity index over all fully contained Gaussian
/// windows and channels.
pub fn ssim(
    reference: &ImageTensor,
    test: &ImageTensor,
    cfg: &SsimConfig,
) -> Result<f64, MetricsError> {
    check_shapes(reference, test)?;
    validate_window(cfg.window_size)?;
    let (h, w, _) = reference.pixels().dim();
    validate_fits(cfg.window_size, h, w)?;
    Ok(ssim_arrays(
        &to_f64(reference),
        &to_f64(test),
        cfg.window_size,
        cfg.gaussian_sigma,
        cfg.c1,
        cfg.c2,
    ))
}

/// Multi-scale structural similarity: the unweighted product over dyadic
/// scales of the mean per-scale SSIM.
///
/// At every scale the window shrinks to the largest odd size that still
/// fits, degenerating to pointwise statistics on very small grids; this
/// keeps the measure (and the matching loss) defined on inputs smaller than
/// the configured window. Each downsampling applies a 2x2 mean filter and
/// then drops every other row and column.
pub fn ms_ssim(
    reference: &ImageTensor,
    test: &ImageTensor,
    cfg: &MsSsimConfig,
) -> Result<f64, MetricsError> {
    check_shapes(reference, test)?;
    validate_window(cfg.base.window_size)?;
    assert!(cfg.num_scales >= 1, "ms_ssim requires at least one scale");
    let (h, w, _) = reference.pixels().dim();

    let mut x = to_f64(reference);
    let mut y = to_f64(test);
    let mut product = 1.0;
    for scale in 0..cfg.num_scales {
        let (sh, sw, _) = x.dim();
        let window = effective_window(cfg.base.window_size, sh, sw);
        product *= ssim_arrays(&x, &y, window, cfg.base.gaussian_sigma, cfg.base.c1, cfg.base.c2);
        if scale + 1 < cfg.num_scales {
            if sh < 2 || sw < 2 {
                return Err(MetricsError::TooManyScales {
                    scales: cfg.num_scales,
                    height: h,
                    width: w,
                });
            }
            x = downsample_half(&x);
            y = downsample_half(&y);
        }
    }
    Ok(product)
}
