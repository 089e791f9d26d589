//! Command-line front end: metric comparison, channel simulation, training,
//! evaluation sweeps, reconstruction grids, and synthetic dataset creation.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use semcom_core::channel::{awgn, empirical_snr_db, rayleigh_zf, ChannelModel, ChannelSymbols, Demand};
use semcom_core::channel_codec::CbrLevel;
use semcom_core::config::{parse_channel_model, AppConfig};
use semcom_core::experiments::{
    emit_report, evaluate, render_pivot, save_reconstruction_grid, Scenario, SweepSpec,
};
use semcom_core::imaging::{center_crop, list_images, load_image, synth, ImageTensor, Split};
use semcom_core::metrics::{ms_ssim, psnr, ssim, MsSsimConfig, SsimConfig};
use semcom_core::seeding::derive_seed;
use semcom_core::training::{load_bundle, run_training, ModelBundle};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "semcom",
    version,
    about = "Multi-user image semantic communication over simulated wireless channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two images: PSNR, SSIM, and multi-scale SSIM on one line.
    Metrics(MetricsArgs),
    /// Push unit-power random symbols through a channel model and report the
    /// empirical SNR.
    ChannelSim(ChannelSimArgs),
    /// Train the transmitter and both receivers from a TOML configuration.
    Train(TrainArgs),
    /// Sweep a trained checkpoint over SNRs, rate levels, and scenarios,
    /// writing a CSV report.
    Eval(EvalArgs),
    /// Save side-by-side reconstruction grids at chosen SNRs.
    Reconstruct(ReconstructArgs),
    /// Generate a synthetic image dataset (train and eval splits).
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference image path.
    reference: PathBuf,
    /// Test image path.
    test: PathBuf,
    /// Peak signal value for PSNR.
    #[arg(long, default_value_t = 1.0)]
    max_val: f64,
    /// Number of dyadic scales for multi-scale SSIM.
    #[arg(long, default_value_t = 3)]
    scales: usize,
}

#[derive(Args)]
struct ChannelSimArgs {
    /// Target signal-to-noise ratio in dB.
    #[arg(long, allow_hyphen_values = true)]
    snr: f64,
    /// Channel model: awgn or rayleigh.
    #[arg(long, default_value = "awgn")]
    model: String,
    /// Number of symbols to transmit.
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the training mode: alternating or broadcast.
    #[arg(long)]
    mode: Option<String>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and the training curve.
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint archive.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated SNRs in dB (negative values and `inf` allowed).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    snrs: Vec<f64>,
    /// Comma-separated rate levels, e.g. 3/64,4/64,5/64.
    #[arg(long, value_delimiter = ',', default_value = "3/64,4/64,5/64")]
    cbrs: Vec<String>,
    /// Comma-separated scenarios: targeted, non_targeted, broadcast.
    #[arg(long, value_delimiter = ',', default_value = "targeted,non_targeted,broadcast")]
    scenarios: Vec<String>,
    /// Independent noise draws per cell.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Channel model override (default: the checkpoint's configuration).
    #[arg(long)]
    channel: Option<String>,
    /// Master evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset root override (default: the checkpoint's configuration).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cap on the number of evaluation images.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Also print human-readable pivot tables to stdout.
    #[arg(long)]
    pivot: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Trained checkpoint archive.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    snrs: Vec<f64>,
    /// Output directory for the PNG grids.
    #[arg(long)]
    out: PathBuf,
    /// Rate-demand state: low, normal, or high.
    #[arg(long, default_value = "normal")]
    demand: String,
    /// Number of images per grid.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Channel model override (default: the checkpoint's configuration).
    #[arg(long)]
    channel: Option<String>,
    /// Dataset root override (default: the checkpoint's configuration).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Channel noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Dataset root; images land in `<root>/train` and `<root>/eval`.
    #[arg(long)]
    root: PathBuf,
    /// Number of training images.
    #[arg(long, default_value_t = 500)]
    train: usize,
    /// Number of evaluation images.
    #[arg(long, default_value_t = 100)]
    eval: usize,
    /// Square image side length in pixels.
    #[arg(long, default_value_t = 80)]
    size: usize,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Metrics(args) => run_metrics(args),
        Command::ChannelSim(args) => run_channel_sim(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Reconstruct(args) => run_reconstruct(args),
        Command::SynthData(args) => run_synth_data(args),
    }
}

fn run_metrics(args: MetricsArgs) -> Result<()> {
    let reference = load_image(&args.reference)
        .with_context(|| format!("loading {}", args.reference.display()))?;
    let test =
        load_image(&args.test).with_context(|| format!("loading {}", args.test.display()))?;
    let p = psnr(&reference, &test, args.max_val)?;
    let s = ssim(&reference, &test, &SsimConfig::default())?;
    let ms = ms_ssim(
        &reference,
        &test,
        &MsSsimConfig {
            num_scales: args.scales,
            ..MsSsimConfig::default()
        },
    )?;
    println!("psnr={p:.6} ssim={s:.6} ms_ssim={ms:.6}");
    Ok(())
}

fn run_channel_sim(args: ChannelSimArgs) -> Result<()> {
    let model = parse_channel_model(&args.model)?;
    let input = ChannelSymbols::random(args.n, derive_seed(args.seed, "channel-sim", &[]))?;
    let output = match model {
        ChannelModel::Awgn => awgn(&input, args.snr, derive_seed(args.seed, "noise", &[])),
        ChannelModel::Rayleigh => {
            rayleigh_zf(&input, args.snr, derive_seed(args.seed, "noise", &[]))
        }
    };
    let empirical = empirical_snr_db(&input, &output);
    println!(
        "model={} target_snr_db={} empirical_snr_db={:.4} n={}",
        args.model, args.snr, empirical, args.n
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = AppConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(mode) = args.mode {
        config.train.mode = mode;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let artifacts = run_training(&config, &args.out)?;
    for stats in &artifacts.stats {
        println!(
            "epoch={} target={} loss={:.6} psnr={:.3} ms_ssim={:.5}",
            stats.epoch, stats.target, stats.mean_loss, stats.mean_psnr, stats.mean_ms_ssim
        );
    }
    println!("checkpoint={}", artifacts.checkpoint.display());
    println!("curve={}", artifacts.curve.display());
    Ok(())
}

/// Loads up to `count` evaluation images as deterministic center crops.
fn eval_images(
    root: &Path,
    crop: usize,
    count: usize,
) -> Result<Vec<ImageTensor>> {
    let files = list_images(root, Split::Eval)
        .with_context(|| format!("listing evaluation images under {}", root.display()))?;
    let mut images = Vec::new();
    for path in files.into_iter().take(count) {
        let image = load_image(&path).with_context(|| format!("loading {}", path.display()))?;
        images.push(center_crop(&image, crop)?);
    }
    Ok(images)
}

fn channel_choice(
    override_name: Option<&str>,
    config: &AppConfig,
) -> Result<ChannelModel> {
    Ok(match override_name {
        Some(name) => parse_channel_model(name)?,
        None => config.channel.channel_model()?,
    })
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (bundle, config) = load_bundle(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data_root = args.data.unwrap_or_else(|| config.data.root.clone());
    let images = eval_images(&data_root, config.data.crop_size, args.count)?;
    let cbrs = args
        .cbrs
        .iter()
        .map(|s| CbrLevel::parse(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let scenarios = args
        .scenarios
        .iter()
        .map(|s| Scenario::parse(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        snrs_db: args.snrs.clone(),
        cbrs,
        scenarios,
        repeats: args.repeats,
        channel: channel_choice(args.channel.as_deref(), &config)?,
        master_seed: args.seed,
    };
    let rows = evaluate(&bundle, &images, &spec)?;
    emit_report(&rows, &args.out)?;
    if args.pivot {
        print!("{}", render_pivot(&rows));
    }
    println!(
        "rows={} images={} out={}",
        rows.len(),
        images.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_demand(name: &str) -> Result<Demand> {
    Ok(match name {
        "low" => Demand::Low,
        "normal" => Demand::Normal,
        "high" => Demand::High,
        other => bail!("unknown demand {other:?}, expected low, normal, or high"),
    })
}

fn run_reconstruct(args: ReconstructArgs) -> Result<()> {
    let (bundle, config): (ModelBundle<f32>, AppConfig) = load_bundle(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data_root = args.data.unwrap_or_else(|| config.data.root.clone());
    let images = eval_images(&data_root, config.data.crop_size, args.count)?;
    let demand = parse_demand(&args.demand)?;
    let channel = channel_choice(args.channel.as_deref(), &config)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for &snr in &args.snrs {
        let path = args.out.join(format!("snr_{snr}dB.png"));
        save_reconstruction_grid(&bundle, &images, snr, demand, channel, &path, args.seed)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_synth_data(args: SynthDataArgs) -> Result<()> {
    let train = synth::write_dataset(
        &args.root,
        Split::Train,
        args.train,
        args.size,
        derive_seed(args.seed, "synth-train", &[]),
    )?;
    let eval = synth::write_dataset(
        &args.root,
        Split::Eval,
        args.eval,
        args.size,
        derive_seed(args.seed, "synth-eval", &[]),
    )?;
    println!(
        "train_images={} eval_images={} root={}",
        train.len(),
        eval.len(),
        args.root.display()
    );
    Ok(())
}
