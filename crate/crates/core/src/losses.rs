//! Differentiable training objectives on tape nodes: mean absolute error,
//! mean squared error, multi-scale structural-similarity loss, and their
//! hybrid combination.
//!
//! Image nodes are `(height, width, channels)` arrays recorded on a
//! [`Tape`]. The structural statistics follow exactly the conventions of
//! [`crate::metrics`] — Gaussian windows fully inside the image, 2x2-mean
//! low-pass downsampling, windows shrinking to fit small grids at every
//! scale — so the loss forward value agrees with the reference metric to
//! float precision.

use crate::autodiff::{Scalar, Tape, Var};
use crate::metrics::{self, MetricsError, MsSsimConfig};
use ndarray::Array2;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: reference {reference:?} vs test {test:?}")]
    ShapeMismatch {
        reference: Vec<usize>,
        test: Vec<usize>,
    },
    #[error("gamma must lie in [0, 1], got {0}")]
    BadGamma(f64),
    #[error("epsilon must be non-negative, got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Window(#[from] MetricsError),
}

/// Weights of the hybrid objective
/// `gamma * (1 - MS-SSIM) + (1 - gamma) * L1 + epsilon * L2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridLossConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub ms_ssim: MsSsimConfig,
}

impl HybridLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LossError::BadGamma(self.gamma));
        }
        if self.epsilon < 0.0 {
            return Err(LossError::BadEpsilon(self.epsilon));
        }
        Ok(())
    }
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        HybridLossConfig {
            gamma: 0.84,
            epsilon: 0.1,
            ms_ssim: MsSsimConfig::default(),
        }
    }
}

fn check_shapes<T: Scalar>(tape: &Tape<T>, reference: Var, test: Var) -> Result<(), LossError> {
    let a = tape.value(reference).shape().to_vec();
    let b = tape.value(test).shape().to_vec();
    if a != b {
        return Err(LossError::ShapeMismatch {
            reference: a,
            test: b,
        });
    }
    Ok(())
}

/// Mean absolute elementwise difference.
pub fn l1_loss<T: Scalar>(tape: &Tape<T>, reference: Var, test: Var) -> Result<Var, LossError> {
    check_shapes(tape, reference, test)?;
    let diff = tape.sub(test, reference);
    let mag = tape.abs(diff);
    Ok(tape.mean(mag))
}

/// Mean squared elementwise difference.
pub fn l2_loss<T: Scalar>(tape: &Tape<T>, reference: Var, test: Var) -> Result<Var, LossError> {
    check_shapes(tape, reference, test)?;
    let diff = tape.sub(test, reference);
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean structural-similarity index over all valid windows and channels, as a
/// differentiable node, for one scale and window size.
fn ssim_mean_node<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    y: Var,
    window: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
) -> Var {
    let kernel: Arc<Array2<T>> =
        Arc::new(metrics::gaussian_window(window, sigma).mapv(T::from_f64));
    let two = T::from_f64(2.0);
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));

    let mu_x = tape.conv2d_depthwise(x, Arc::clone(&kernel), 1);
    let mu_y = tape.conv2d_depthwise(y, Arc::clone(&kernel), 1);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let m_xx = tape.conv2d_depthwise(xx, Arc::clone(&kernel), 1);
    let m_yy = tape.conv2d_depthwise(yy, Arc::clone(&kernel), 1);
    let m_xy = tape.conv2d_depthwise(xy, Arc::clone(&kernel), 1);

    let mu_x2 = tape.mul(mu_x, mu_x);
    let mu_y2 = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let var_x = tape.sub(m_xx, mu_x2);
    let var_y = tape.sub(m_yy, mu_y2);
    let cov = tape.sub(m_xy, mu_xy);

    let lum_num = tape.add_scalar(tape.mul_scalar(mu_xy, two), c1);
    let lum_den = {
        let s = tape.add(mu_x2, mu_y2);
        tape.add_scalar(s, c1)
    };
    let con_num = tape.add_scalar(tape.mul_scalar(cov, two), c2);
    let con_den = {
        let s = tape.add(var_x, var_y);
        tape.add_scalar(s, c2)
    };
    let num = tape.mul(lum_num, con_num);
    let den = tape.mul(lum_den, con_den);
    let index = tape.div(num, den);
    tape.mean(index)
}

/// Low-pass filter (2x2 mean) and factor-two decimation as a tape op.
fn downsample_node<T: Scalar>(tape: &Tape<T>, x: Var) -> Var {
    let quarter = T::from_f64(0.25);
    let kernel = Arc::new(Array2::from_elem((2, 2), quarter));
    tape.conv2d_depthwise(x, kernel, 2)
}

/// Multi-scale structural-similarity index as a differentiable node: the
/// unweighted product over scales of the per-scale mean SSIM.
pub fn ms_ssim_node<T: Scalar>(
    tape: &Tape<T>,
    reference: Var,
    test: Var,
    cfg: &MsSsimConfig,
) -> Result<Var, LossError> {
    check_shapes(tape, reference, test)?;
    metrics::validate_window(cfg.base.window_size)?;
    let shape = tape.value(reference).shape().to_vec();
    assert_eq!(shape.len(), 3, "ms_ssim expects (h, w, c) image nodes");
    let (h, w) = (shape[0], shape[1]);

    let mut x = reference;
    let mut y = test;
    let (mut sh, mut sw) = (h, w);
    let mut product: Option<Var> = None;
    for scale in 0..cfg.num_scales {
        let window = metrics::effective_window(cfg.base.window_size, sh, sw);
        let s = ssim_mean_node(
            tape,
            x,
            y,
            window,
            cfg.base.gaussian_sigma,
            cfg.base.c1,
            cfg.base.c2,
        );
        product = Some(match product {
            None => s,
            Some(p) => tape.mul(p, s),
        });
        if scale + 1 < cfg.num_scales {
            if sh < 2 || sw < 2 {
                return Err(MetricsError::TooManyScales {
                    scales: cfg.num_scales,
                    height: h,
                    width: w,
                }
                .into());
            }
            x = downsample_node(tape, x);
            y = downsample_node(tape, y);
            sh = (sh - 2) / 2 + 1;
            sw = (sw - 2) / 2 + 1;
        }
    }
    Ok(product.expect("at least one scale"))
}

/// Structural-similarity loss `1 - ms_ssim`.
pub fn ms_ssim_loss<T: Scalar>(
    tape: &Tape<T>,
    reference: Var,
    test: Var,
    cfg: &MsSsimConfig,
) -> Result<Var, LossError> {
    let index = ms_ssim_node(tape, reference, test, cfg)?;
    let neg = tape.mul_scalar(index, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// The hybrid objective: structure, absolute error, and squared error blended
/// so no single term dominates.
pub fn hybrid_loss<T: Scalar>(
    tape: &Tape<T>,
    reference: Var,
    test: Var,
    cfg: &HybridLossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    let ms = ms_ssim_loss(tape, reference, test, &cfg.ms_ssim)?;
    let l1 = l1_loss(tape, reference, test)?;
    let l2 = l2_loss(tape, reference, test)?;
    let gamma = T::from_f64(cfg.gamma);
    let one_minus = T::from_f64(1.0 - cfg.gamma);
    let eps = T::from_f64(cfg.epsilon);
    let a = tape.mul_scalar(ms, gamma);
    let b = tape.mul_scalar(l1, one_minus);
    let c = tape.mul_scalar(l2, eps);
    let ab = tape.add(a, b);
    Ok(tape.add(ab, c))
}
