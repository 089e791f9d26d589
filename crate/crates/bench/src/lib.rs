//! Shared helpers for the benchmark suite: small model configurations and
//! synthetic inputs sized for quick, repeatable measurement.

use semcom_core::config::AppConfig;
use semcom_core::imaging::{synth, ImageTensor};
use semcom_core::seeding::derive_seed;
use semcom_core::training::ModelBundle;

/// A reduced-width model at the given crop size: same structure as the full
/// system, scaled down so a benchmark iteration stays in the millisecond
/// range.
pub fn bench_config(crop: usize, widths: Vec<usize>, enc_depths: Vec<usize>) -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.data.crop_size = crop;
    cfg.data.batch_size = 8;
    cfg.model.widths = widths;
    cfg.model.enc_depths = enc_depths;
    cfg.model.hcd_depths = vec![1, 2, 1, 1];
    cfg.model.lcd_depths = vec![1, 1];
    cfg.codec.num_modules = 3;
    cfg.codec.hidden = 8;
    cfg.train.learning_rate = 1e-3;
    cfg
}

pub fn bench_bundle(cfg: &AppConfig, seed: u64) -> ModelBundle<f32> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    ModelBundle::build(&cfg).expect("benchmark config must be valid")
}

pub fn bench_images(count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| synth::generate_image(size, derive_seed(seed, "bench-img", &[i as u64])))
        .collect()
}
