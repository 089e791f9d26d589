//! Evaluation sweeps over channel quality, rate level, decoder, and
//! transmission scenario, with CSV reports and side-by-side reconstruction
//! grids for visual inspection.

use crate::autodiff::{Scalar, Tape};
use crate::channel::{ChannelModel, Demand};
use crate::channel_codec::{CbrLevel, ChannelCodecError};
use crate::config::ConfigError;
use crate::imaging::{save_image, ImageTensor, ImagingError};
use crate::metrics::{ms_ssim, psnr, MetricsError, MsSsimConfig};
use crate::nn::ParamTape;
use crate::seeding::derive_seed;
use crate::semantic_codec::TargetId;
use crate::training::{image_from_node, ModelBundle, TrainError};
use ndarray::Array3;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    ChannelCodec(#[from] ChannelCodecError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("rate level {0} is not in the model's bank")]
    UnknownLevel(String),
    #[error("unknown scenario {0:?} (expected targeted, non-targeted, or broadcast)")]
    BadScenario(String),
    #[error("evaluation needs at least one image")]
    NoImages,
    #[error("evaluation needs at least one repeat")]
    NoRepeats,
    #[error("i/o failed for {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Scenarios.
// ---------------------------------------------------------------------------

/// How the encoder target relates to the decoding user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Encode toward the decoding user.
    Targeted,
    /// Encode toward the *other* user; measures the cost of a mismatched
    /// target embedding.
    NonTargeted,
    /// Encode with no target injection; one transmission serves both users.
    Broadcast,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        match text.to_ascii_lowercase().replace('_', "-").as_str() {
            "targeted" => Ok(Scenario::Targeted),
            "non-targeted" | "nontargeted" => Ok(Scenario::NonTargeted),
            "broadcast" => Ok(Scenario::Broadcast),
            _ => Err(ExperimentError::BadScenario(text.to_string())),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Targeted => "targeted",
            Scenario::NonTargeted => "non-targeted",
            Scenario::Broadcast => "broadcast",
        }
    }

    /// The embedding injected at the encoder when user `user` will decode.
    fn encode_target(self, user: u8) -> TargetId {
        match self {
            Scenario::Targeted => TargetId::User(user),
            Scenario::NonTargeted => TargetId::User(1 - user),
            Scenario::Broadcast => TargetId::Broadcast,
        }
    }
}

/// Decoder naming for reports: user 0 runs the low-capacity decoder, user 1
/// the high-capacity one.
pub fn decoder_label(user: usize) -> &'static str {
    if user == 0 {
        "lcd"
    } else {
        "hcd"
    }
}

// ---------------------------------------------------------------------------
// Sweep specification and results.
// ---------------------------------------------------------------------------

/// The grid of conditions to evaluate.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub snrs_db: Vec<f64>,
    pub cbrs: Vec<CbrLevel>,
    pub scenarios: Vec<Scenario>,
    /// Independent noise draws per cell; means and sample deviations are
    /// reported across them.
    pub repeats: usize,
    pub channel: ChannelModel,
    pub master_seed: u64,
}

/// One cell of the sweep: metric means and sample standard deviations
/// across repeats.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub snr_db: f64,
    pub cbr: CbrLevel,
    /// 0 = low-capacity user, 1 = high-capacity user.
    pub decoder: usize,
    pub scenario: Scenario,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub msssim_mean: f64,
    pub msssim_std: f64,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the full sweep. Rows are ordered by SNR, then rate level, then
/// decoder (low-capacity first), then scenario. For a fixed
/// (SNR, rate, repeat, image) the channel noise is identical across
/// decoders and scenarios, so those comparisons are paired.
pub fn evaluate<T: Scalar>(
    bundle: &ModelBundle<T>,
    images: &[ImageTensor],
    spec: &SweepSpec,
) -> Result<Vec<ResultRow>, ExperimentError> {
    if images.is_empty() {
        return Err(ExperimentError::NoImages);
    }
    if spec.repeats == 0 {
        return Err(ExperimentError::NoRepeats);
    }
    let bank = bundle.channel_encoder.bank().to_vec();
    let ms_cfg: MsSsimConfig = bundle.config.loss.hybrid().ms_ssim;
    let mut rows = Vec::new();
    for &snr_db in &spec.snrs_db {
        for cbr in &spec.cbrs {
            let level = bank
                .iter()
                .position(|l| l == cbr)
                .ok_or_else(|| ExperimentError::UnknownLevel(cbr.label()))?;
            for user in 0..2usize {
                for &scenario in &spec.scenarios {
                    let row = evaluate_cell(
                        bundle, images, spec, &ms_cfg, snr_db, *cbr, level, user, scenario,
                    )?;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell<T: Scalar>(
    bundle: &ModelBundle<T>,
    images: &[ImageTensor],
    spec: &SweepSpec,
    ms_cfg: &MsSsimConfig,
    snr_db: f64,
    cbr: CbrLevel,
    level: usize,
    user: usize,
    scenario: Scenario,
) -> Result<ResultRow, ExperimentError> {
    let (num, den) = cbr.parts();
    let mut psnr_reps = Vec::with_capacity(spec.repeats);
    let mut ms_reps = Vec::with_capacity(spec.repeats);
    for repeat in 0..spec.repeats {
        let cell_seed = derive_seed(
            spec.master_seed,
            "eval-cell",
            &[snr_db.to_bits(), num as u64, den as u64, repeat as u64],
        );
        let mut psnr_sum = 0.0;
        let mut ms_sum = 0.0;
        for (i, image) in images.iter().enumerate() {
            let channel_seed = derive_seed(cell_seed, "image", &[i as u64]);
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let (_, recon) = bundle.pipeline(
                &pt,
                image,
                scenario.encode_target(user as u8),
                user,
                spec.channel,
                snr_db,
                level,
                channel_seed,
            )?;
            let recon_img = image_from_node(&tape, recon);
            psnr_sum += psnr(image, &recon_img, 1.0)?;
            ms_sum += ms_ssim(image, &recon_img, ms_cfg)?;
        }
        psnr_reps.push(psnr_sum / images.len() as f64);
        ms_reps.push(ms_sum / images.len() as f64);
    }
    let (psnr_mean, psnr_std) = mean_and_std(&psnr_reps);
    let (msssim_mean, msssim_std) = mean_and_std(&ms_reps);
    Ok(ResultRow {
        snr_db,
        cbr,
        decoder: user,
        scenario,
        psnr_mean,
        psnr_std,
        msssim_mean,
        msssim_std,
    })
}

/// Writes the sweep as CSV with a fixed header and six-decimal metrics.
pub fn emit_report(rows: &[ResultRow], path: &Path) -> Result<(), ExperimentError> {
    let mut out = String::from(
        "snr_db,cbr,decoder,scenario,psnr_mean,psnr_std,msssim_mean,msssim_std\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            row.snr_db,
            row.cbr.label(),
            decoder_label(row.decoder),
            row.scenario.label(),
            row.psnr_mean,
            row.psnr_std,
            row.msssim_mean,
            row.msssim_std,
        ));
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

/// Renders the flat rows as human-readable pivot tables: one block per rate
/// level, SNR down the side, decoder/scenario across the top, cells showing
/// `MS-SSIM (PSNR dB)`.
pub fn render_pivot(rows: &[ResultRow]) -> String {
    let mut cbrs: Vec<CbrLevel> = Vec::new();
    let mut columns: Vec<(usize, Scenario)> = Vec::new();
    let mut snrs: Vec<f64> = Vec::new();
    for row in rows {
        if !cbrs.contains(&row.cbr) {
            cbrs.push(row.cbr);
        }
        if !columns.contains(&(row.decoder, row.scenario)) {
            columns.push((row.decoder, row.scenario));
        }
        if !snrs.iter().any(|&s| s == row.snr_db) {
            snrs.push(row.snr_db);
        }
    }
    let mut out = String::new();
    for cbr in &cbrs {
        out.push_str(&format!("rate {}\n", cbr.label()));
        out.push_str(&format!("{:>8}", "snr_db"));
        for &(decoder, scenario) in &columns {
            out.push_str(&format!(
                "{:>24}",
                format!("{}/{}", decoder_label(decoder), scenario.label())
            ));
        }
        out.push('\n');
        for &snr in &snrs {
            out.push_str(&format!("{snr:>8}"));
            for &(decoder, scenario) in &columns {
                let cell = rows.iter().find(|r| {
                    r.cbr == *cbr
                        && r.decoder == decoder
                        && r.scenario == scenario
                        && r.snr_db == snr
                });
                match cell {
                    Some(r) => out.push_str(&format!(
                        "{:>24}",
                        format!("{:.4} ({:.2} dB)", r.msssim_mean, r.psnr_mean)
                    )),
                    None => out.push_str(&format!("{:>24}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Reconstruction grids.
// ---------------------------------------------------------------------------

const GRID_GAP: usize = 2;

/// Saves a side-by-side grid: one row per image with columns
/// original | low-capacity reconstruction | high-capacity reconstruction,
/// both targeted, separated by white gaps. The rate level follows the
/// normal-demand selection rule.
pub fn save_reconstructions<T: Scalar>(
    bundle: &ModelBundle<T>,
    images: &[ImageTensor],
    snr_db: f64,
    channel: ChannelModel,
    path: &Path,
    seed: u64,
) -> Result<(), ExperimentError> {
    save_reconstruction_grid(bundle, images, snr_db, Demand::Normal, channel, path, seed)
}

/// As [`save_reconstructions`] but with an explicit demand level.
pub fn save_reconstruction_grid<T: Scalar>(
    bundle: &ModelBundle<T>,
    images: &[ImageTensor],
    snr_db: f64,
    demand: Demand,
    channel: ChannelModel,
    path: &Path,
    seed: u64,
) -> Result<(), ExperimentError> {
    if images.is_empty() {
        return Err(ExperimentError::NoImages);
    }
    let level = bundle.channel_encoder.level_for_demand(demand);
    let mut panels: Vec<Vec<ImageTensor>> = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let mut row = vec![image.clone()];
        for user in 0..2usize {
            let channel_seed = derive_seed(seed, "recon", &[i as u64, user as u64]);
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let (_, recon) = bundle.pipeline(
                &pt,
                image,
                TargetId::User(user as u8),
                user,
                channel,
                snr_db,
                level,
                channel_seed,
            )?;
            row.push(image_from_node(&tape, recon));
        }
        panels.push(row);
    }
    let grid = assemble_grid(&panels);
    save_image(path, &grid)?;
    Ok(())
}

/// Lays panels out row-major with white separators.
fn assemble_grid(panels: &[Vec<ImageTensor>]) -> ImageTensor {
    let (ph, pw, _) = panels[0][0].pixels().dim();
    let rows = panels.len();
    let cols = panels[0].len();
    let height = rows * ph + (rows - 1) * GRID_GAP;
    let width = cols * pw + (cols - 1) * GRID_GAP;
    let mut canvas = Array3::<f32>::ones((height, width, 3));
    for (r, row) in panels.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let y0 = r * (ph + GRID_GAP);
            let x0 = c * (pw + GRID_GAP);
            let src = panel.pixels();
            for y in 0..ph {
                for x in 0..pw {
                    for ch in 0..3 {
                        canvas[[y0 + y, x0 + x, ch]] = src[[y, x, ch]];
                    }
                }
            }
        }
    }
    ImageTensor::from_clamped(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AppConfig;
    use crate::imaging::synth;

    fn tiny_bundle(seed: u64) -> ModelBundle<f32> {
        let mut cfg = AppConfig::default();
        cfg.data.crop_size = 16;
        cfg.model.window = 2;
        cfg.model.enc_depths = vec![1, 1, 1, 1];
        cfg.model.hcd_depths = vec![1, 1, 1, 1];
        cfg.model.lcd_depths = vec![1, 1];
        cfg.model.widths = vec![8, 16, 32, 32];
        cfg.codec.num_modules = 3;
        cfg.codec.hidden = 4;
        cfg.train.seed = seed;
        ModelBundle::build(&cfg).unwrap()
    }

    fn eval_images(count: usize, seed: u64) -> Vec<ImageTensor> {
        (0..count)
            .map(|i| synth::generate_image(16, derive_seed(seed, "eval-img", &[i as u64])))
            .collect()
    }

    fn small_spec(bundle: &ModelBundle<f32>) -> SweepSpec {
        SweepSpec {
            snrs_db: vec![0.0, 10.0],
            cbrs: bundle.channel_encoder.bank().to_vec(),
            scenarios: vec![Scenario::Targeted, Scenario::NonTargeted, Scenario::Broadcast],
            repeats: 2,
            channel: ChannelModel::Awgn,
            master_seed: 99,
        }
    }

    #[test]
    fn scenario_parsing_accepts_common_spellings() {
        assert_eq!(Scenario::parse("Targeted").unwrap(), Scenario::Targeted);
        assert_eq!(Scenario::parse("non_targeted").unwrap(), Scenario::NonTargeted);
        assert_eq!(Scenario::parse("non-targeted").unwrap(), Scenario::NonTargeted);
        assert_eq!(Scenario::parse("BROADCAST").unwrap(), Scenario::Broadcast);
        assert!(Scenario::parse("sideways").is_err());
    }

    #[test]
    fn sweep_produces_one_row_per_cell_in_order() {
        let bundle = tiny_bundle(3);
        let images = eval_images(2, 1);
        let spec = small_spec(&bundle);
        let rows = evaluate(&bundle, &images, &spec).unwrap();
        assert_eq!(
            rows.len(),
            spec.snrs_db.len() * spec.cbrs.len() * 2 * spec.scenarios.len()
        );
        // Ordering: snr, then cbr, then decoder, then scenario.
        assert_eq!(rows[0].snr_db, 0.0);
        assert_eq!(rows[0].decoder, 0);
        assert_eq!(rows[0].scenario, Scenario::Targeted);
        assert_eq!(rows[1].scenario, Scenario::NonTargeted);
        assert_eq!(rows[3].decoder, 1);
        let half = rows.len() / 2;
        assert_eq!(rows[half].snr_db, 10.0);
        for row in &rows {
            assert!(row.psnr_mean.is_finite() && row.psnr_mean > 0.0);
            assert!(row.msssim_mean > 0.0 && row.msssim_mean <= 1.0);
            assert!(row.psnr_std >= 0.0 && row.msssim_std >= 0.0);
        }
    }

    #[test]
    fn targeted_and_mismatched_rows_differ() {
        let bundle = tiny_bundle(5);
        let images = eval_images(1, 2);
        let spec = SweepSpec {
            snrs_db: vec![5.0],
            cbrs: vec![bundle.channel_encoder.bank()[0]],
            scenarios: vec![Scenario::Targeted, Scenario::NonTargeted],
            repeats: 1,
            channel: ChannelModel::Awgn,
            master_seed: 4,
        };
        let rows = evaluate(&bundle, &images, &spec).unwrap();
        // Same noise, different target embeddings: the reconstructions and
        // hence the metrics must differ.
        assert_ne!(rows[0].psnr_mean, rows[1].psnr_mean);
    }

    #[test]
    fn report_is_deterministic_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle(7);
        let images = eval_images(2, 3);
        let spec = small_spec(&bundle);

        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_report(&evaluate(&bundle, &images, &spec).unwrap(), &a).unwrap();
        emit_report(&evaluate(&bundle, &images, &spec).unwrap(), &b).unwrap();
        let text_a = std::fs::read_to_string(&a).unwrap();
        let text_b = std::fs::read_to_string(&b).unwrap();
        assert_eq!(text_a, text_b, "same spec and seed must emit identical bytes");

        let lines: Vec<&str> = text_a.lines().collect();
        assert_eq!(
            lines[0],
            "snr_db,cbr,decoder,scenario,psnr_mean,psnr_std,msssim_mean,msssim_std"
        );
        assert_eq!(lines.len(), 1 + 2 * 3 * 2 * 3);
        assert!(lines[1].starts_with("0,3/64,lcd,targeted,"));
        assert!(lines.iter().any(|l| l.contains(",hcd,broadcast,")));
    }

    #[test]
    fn noiseless_channel_beats_zero_db_after_brief_training() {
        // A random untrained pipeline ignores its input, so noise can land
        // anywhere; once the model has learned even a little, removing all
        // channel noise must help on average.
        use crate::nn::Adam;
        use crate::training::train_epoch_targeted;
        let mut bundle = tiny_bundle(21);
        let train: Vec<ImageTensor> = eval_images(8, 20);
        let batches: Vec<Vec<ImageTensor>> = train.chunks(4).map(|c| c.to_vec()).collect();
        let mut optimizer = Adam::new(&bundle.store, 1e-3);
        for epoch in 0..6 {
            for user in 0..2 {
                train_epoch_targeted(&mut bundle, &mut optimizer, &batches, user, epoch).unwrap();
            }
        }
        let images = eval_images(6, 6);
        let spec = SweepSpec {
            snrs_db: vec![0.0, f64::INFINITY],
            cbrs: vec![bundle.channel_encoder.bank()[1]],
            scenarios: vec![Scenario::Targeted],
            repeats: 2,
            channel: ChannelModel::Awgn,
            master_seed: 12,
        };
        let rows = evaluate(&bundle, &images, &spec).unwrap();
        let at_zero = rows.iter().find(|r| r.snr_db == 0.0 && r.decoder == 1).unwrap();
        let clean = rows
            .iter()
            .find(|r| r.snr_db.is_infinite() && r.decoder == 1)
            .unwrap();
        assert!(clean.psnr_mean.is_finite());
        assert_eq!(clean.psnr_std, 0.0, "the noise-free pipeline is deterministic");
        assert!(
            clean.psnr_mean > at_zero.psnr_mean,
            "noise-free {} dB should beat 0 dB {} dB",
            clean.psnr_mean,
            at_zero.psnr_mean
        );
    }

    #[test]
    fn pivot_rendering_covers_every_cell() {
        let bundle = tiny_bundle(23);
        let images = eval_images(1, 7);
        let spec = small_spec(&bundle);
        let rows = evaluate(&bundle, &images, &spec).unwrap();
        let pivot = render_pivot(&rows);
        for cbr in &spec.cbrs {
            assert!(pivot.contains(&format!("rate {}", cbr.label())));
        }
        assert!(pivot.contains("lcd/targeted"));
        assert!(pivot.contains("hcd/broadcast"));
        // Per rate level: title, column header, one line per SNR, blank.
        let expected_lines = spec.cbrs.len() * (3 + spec.snrs_db.len());
        assert_eq!(pivot.lines().count(), expected_lines);
    }

    #[test]
    fn unknown_rate_level_is_rejected() {
        let bundle = tiny_bundle(9);
        let images = eval_images(1, 4);
        let mut spec = small_spec(&bundle);
        spec.cbrs = vec![CbrLevel::new(7, 64).unwrap()];
        assert!(matches!(
            evaluate(&bundle, &images, &spec),
            Err(ExperimentError::UnknownLevel(_))
        ));
    }

    #[test]
    fn reconstruction_grid_has_gap_separated_panels() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle(11);
        let images = eval_images(2, 5);
        let path = dir.path().join("grid.png");
        save_reconstructions(&bundle, &images, 10.0, ChannelModel::Awgn, &path, 8).unwrap();
        let loaded = crate::imaging::load_image(&path).unwrap();
        let (h, w, _) = loaded.pixels().dim();
        assert_eq!(h, 2 * 16 + GRID_GAP);
        assert_eq!(w, 3 * 16 + 2 * GRID_GAP);
        // The separator band is white.
        for x in 0..w {
            assert_eq!(loaded.pixels()[[16, x, 0]], 1.0);
            assert_eq!(loaded.pixels()[[17, x, 1]], 1.0);
        }
    }
}
