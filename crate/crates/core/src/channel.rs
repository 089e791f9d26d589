//! Simulated physical layer: power normalization, additive white Gaussian
//! noise, and Rayleigh block fading with zero-forcing detection.
//!
//! Real-valued symbol vectors of even length are interpreted as consecutive
//! (real, imaginary) pairs. SNR is defined per real component against unit
//! signal power, so for normalized symbols the noise standard deviation is
//! `sigma = sqrt(10^(-snr_db/10))` per component.
//!
//! Channel noise is sampled from seeds derived off a caller seed; the fading
//! draw and the noise draw use separate derived streams, which makes the
//! identity-fade Rayleigh channel coincide with AWGN for the same seed.

use crate::seeding::derive_seed;
use ndarray::Array1;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("symbol vector must be non-empty")]
    Empty,
    #[error("symbol vector length {0} must be even (real/imaginary pairs)")]
    OddLength(usize),
    #[error("cannot normalize an all-zero vector")]
    AllZero,
}

/// Network congestion feedback used to pick a compression ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Demand {
    Low,
    Normal,
    High,
}

/// Channel conditions attached to one transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub snr_db: f64,
    pub demand: Demand,
}

/// Fading granularity for the Rayleigh channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    /// One coefficient per transmission (the default).
    Block,
    /// An independent coefficient per complex symbol.
    PerSymbol,
}

/// An even-length real vector of channel symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSymbols {
    values: Array1<f64>,
}

impl ChannelSymbols {
    /// Wraps raw values, enforcing the pairing invariant.
    pub fn new(values: Array1<f64>) -> Result<Self, ChannelError> {
        if values.is_empty() {
            return Err(ChannelError::Empty);
        }
        if values.len() % 2 != 0 {
            return Err(ChannelError::OddLength(values.len()));
        }
        Ok(ChannelSymbols { values })
    }

    /// Seeded standard-normal symbols scaled to exact unit mean power.
    pub fn random(len: usize, seed: u64) -> Result<Self, ChannelError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let raw: Array1<f64> = (0..len)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        power_normalize(&raw)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean of the squared real components.
    pub fn mean_power(&self) -> f64 {
        self.values.iter().map(|&v| v * v).sum::<f64>() / self.values.len() as f64
    }
}

/// Scales a raw vector so the mean squared component equals one.
pub fn power_normalize(raw: &Array1<f64>) -> Result<ChannelSymbols, ChannelError> {
    if raw.is_empty() {
        return Err(ChannelError::Empty);
    }
    if raw.len() % 2 != 0 {
        return Err(ChannelError::OddLength(raw.len()));
    }
    let power = raw.iter().map(|&v| v * v).sum::<f64>() / raw.len() as f64;
    if power == 0.0 {
        return Err(ChannelError::AllZero);
    }
    let scale = 1.0 / power.sqrt();
    ChannelSymbols::new(raw.mapv(|v| v * scale))
}

/// Per-real-component noise standard deviation for a unit-power signal.
pub fn snr_to_sigma(snr_db: f64) -> f64 {
    (10f64.powf(-snr_db / 10.0)).sqrt()
}

/// Empirical SNR in dB between a clean input and a noisy output.
pub fn empirical_snr_db(input: &ChannelSymbols, output: &ChannelSymbols) -> f64 {
    let signal: f64 = input.values.iter().map(|&v| v * v).sum();
    let noise: f64 = input
        .values
        .iter()
        .zip(output.values.iter())
        .map(|(&x, &y)| (y - x) * (y - x))
        .sum();
    10.0 * (signal / noise).log10()
}

/// Draws the additive noise vector the AWGN channel would apply.
///
/// Exposed so the differentiable training path can inject the identical draw
/// as a gradient-constant term.
pub fn sample_awgn_noise(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "channel-noise", &[]));
    (0..len)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * sigma
        })
        .collect()
}

/// Additive white Gaussian noise channel: `y = x + n`.
///
/// An infinite `snr_db` is the no-noise sentinel and returns the input
/// unchanged. Deterministic for a fixed seed.
pub fn awgn(symbols: &ChannelSymbols, snr_db: f64, seed: u64) -> ChannelSymbols {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return symbols.clone();
    }
    let sigma = snr_to_sigma(snr_db);
    let noise = sample_awgn_noise(symbols.len(), sigma, seed);
    let values = Array1::from_iter(
        symbols
            .values
            .iter()
            .zip(noise.iter())
            .map(|(&x, &n)| x + n),
    );
    ChannelSymbols { values }
}

/// Complex fading coefficients and the raw noise draw behind one Rayleigh
/// transmission, kept for test oracles and diagnostics.
#[derive(Debug, Clone)]
pub struct ZfRealization {
    /// One coefficient per complex symbol (repeated under block fading).
    pub coefficients: Vec<Complex64>,
    /// The additive complex noise as interleaved real components, before
    /// division by the fading coefficient.
    pub noise: Vec<f64>,
}

impl ZfRealization {
    /// The effective additive term `N/H` as interleaved real components.
    pub fn residual(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.noise.len());
        for (j, h) in self.coefficients.iter().enumerate() {
            let n = Complex64::new(self.noise[2 * j], self.noise[2 * j + 1]);
            let r = n / h;
            out.push(r.re);
            out.push(r.im);
        }
        out
    }
}

fn draw_coefficient(rng: &mut ChaCha12Rng) -> Complex64 {
    // H ~ CN(0,1): real and imaginary parts N(0, 1/2). Degenerate fades are
    // redrawn so zero-forcing never divides by (numerically) zero.
    let std = (0.5f64).sqrt();
    loop {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let h = Complex64::new(re * std, im * std);
        if h.norm() >= 1e-6 {
            return h;
        }
    }
}

/// Rayleigh fading with perfect channel knowledge and zero-forcing detection,
/// returning both the equalized symbols and the fade/noise realization.
///
/// The channel forms `Y = X * H + N` per complex symbol and the receiver
/// returns `Y / H = X + N / H`.
pub fn rayleigh_zf_with(
    symbols: &ChannelSymbols,
    snr_db: f64,
    seed: u64,
    fading: Fading,
) -> (ChannelSymbols, ZfRealization) {
    let pairs = symbols.len() / 2;
    let mut fade_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "channel-fade", &[]));
    let coefficients: Vec<Complex64> = match fading {
        Fading::Block => {
            let h = draw_coefficient(&mut fade_rng);
            vec![h; pairs]
        }
        Fading::PerSymbol => (0..pairs).map(|_| draw_coefficient(&mut fade_rng)).collect(),
    };
    let sigma = if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        snr_to_sigma(snr_db)
    };
    let noise = sample_awgn_noise(symbols.len(), sigma, seed);

    let mut values = Array1::<f64>::zeros(symbols.len());
    for (j, h) in coefficients.iter().enumerate() {
        // Manual complex division (a+bi)/(c+di) keeps this path independent
        // of the oracle used in tests.
        let (c, d) = (h.re, h.im);
        let denom = c * c + d * d;
        let (a, b) = (noise[2 * j], noise[2 * j + 1]);
        let resid_re = (a * c + b * d) / denom;
        let resid_im = (b * c - a * d) / denom;
        values[2 * j] = symbols.values[2 * j] + resid_re;
        values[2 * j + 1] = symbols.values[2 * j + 1] + resid_im;
    }
    (
        ChannelSymbols { values },
        ZfRealization {
            coefficients,
            noise,
        },
    )
}

/// Rayleigh fading with zero-forcing detection under block fading.
pub fn rayleigh_zf(symbols: &ChannelSymbols, snr_db: f64, seed: u64) -> ChannelSymbols {
    rayleigh_zf_with(symbols, snr_db, seed, Fading::Block).0
}

/// Draws the effective additive term of the requested channel model, for the
/// differentiable training path where noise enters as a constant.
pub fn sample_channel_residual(
    model: ChannelModel,
    len: usize,
    snr_db: f64,
    seed: u64,
) -> Vec<f64> {
    let sigma = if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        snr_to_sigma(snr_db)
    };
    match model {
        ChannelModel::Awgn => sample_awgn_noise(len, sigma, seed),
        ChannelModel::Rayleigh => {
            let mut fade_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "channel-fade", &[]));
            let h = draw_coefficient(&mut fade_rng);
            let noise = sample_awgn_noise(len, sigma, seed);
            ZfRealization {
                coefficients: vec![h; len / 2],
                noise,
            }
            .residual()
        }
    }
}

/// Which physical-layer model to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    Awgn,
    Rayleigh,
}
