//! Dry run of the desk-scale trend suite: trains the reduced-width model
//! under both objectives on a synthetic dataset, then prints every trend
//! comparison with its margin. Used to size tolerances before freezing them
//! in the test suite.

use semcom_core::channel::ChannelModel;
use semcom_core::channel_codec::CbrLevel;
use semcom_core::config::AppConfig;
use semcom_core::experiments::{evaluate, Scenario, SweepSpec};
use semcom_core::imaging::{center_crop, list_images, load_image, synth, ImageTensor, Split};
use semcom_core::training::{run_training, load_bundle};
use std::path::Path;
use std::time::Instant;

fn desk_config(root: &Path, loss_kind: &str, lr: f64, widths: &[usize]) -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.data.root = root.to_path_buf();
    cfg.data.crop_size = 64;
    cfg.data.batch_size = 8;
    cfg.data.seed = 11;
    cfg.model.widths = widths.to_vec();
    cfg.loss.kind = loss_kind.to_string();
    cfg.train.epochs = 50;
    cfg.train.learning_rate = lr;
    cfg.train.seed = 17;
    cfg
}

fn main() {
    let lr: f64 = std::env::args()
        .nth(1)
        .map(|a| a.parse().expect("learning rate"))
        .unwrap_or(1e-4);
    let widths: Vec<usize> = match std::env::args().nth(2).as_deref() {
        Some("wide") => vec![16, 32, 64, 64],
        _ => vec![8, 16, 32, 32],
    };
    println!("learning rate {lr:.0e}, widths {widths:?}");
    let base = std::env::temp_dir().join("trend_pilot");
    let data = base.join("data");
    let _ = std::fs::remove_dir_all(&base);
    synth::write_dataset(&data, Split::Train, 500, 80, 5).unwrap();
    synth::write_dataset(&data, Split::Eval, 100, 80, 6).unwrap();
    println!("dataset ready at {}", data.display());

    let mut checkpoints = Vec::new();
    for kind in ["hybrid", "mse"] {
        let cfg = desk_config(&data, kind, lr, &widths);
        let out = base.join(kind);
        let start = Instant::now();
        let artifacts = run_training(&cfg, &out).unwrap();
        println!(
            "[{kind}] trained 50 epochs in {:.1} s",
            start.elapsed().as_secs_f64()
        );
        for stats in artifacts.stats.iter().step_by(10) {
            println!(
                "[{kind}] epoch {} target {} loss {:.5} psnr {:.2} msssim {:.4}",
                stats.epoch, stats.target, stats.mean_loss, stats.mean_psnr, stats.mean_ms_ssim
            );
        }
        let s = &artifacts.stats;
        println!(
            "[{kind}] loss first/last same-parity: {:.5}->{:.5} and {:.5}->{:.5}",
            s[0].mean_loss,
            s[48].mean_loss,
            s[1].mean_loss,
            s[49].mean_loss
        );
        checkpoints.push(artifacts.checkpoint);
    }

    let eval_files = list_images(&data, Split::Eval).unwrap();
    let images: Vec<ImageTensor> = eval_files
        .iter()
        .take(100)
        .map(|p| center_crop(&load_image(p).unwrap(), 64).unwrap())
        .collect();

    let (hybrid_bundle, _) = load_bundle(&checkpoints[0]).unwrap();
    let (mse_bundle, _) = load_bundle(&checkpoints[1]).unwrap();
    let level = CbrLevel::new(4, 64).unwrap();

    // Trends (a)-(c): SNR sweep at the middle rate.
    let sweep = SweepSpec {
        snrs_db: vec![0.0, 2.0, 4.0, 6.0, 8.0],
        cbrs: vec![level],
        scenarios: vec![Scenario::Targeted, Scenario::NonTargeted],
        repeats: 2,
        channel: ChannelModel::Awgn,
        master_seed: 23,
    };
    let t0 = Instant::now();
    let rows = evaluate(&hybrid_bundle, &images, &sweep).unwrap();
    println!("snr sweep in {:.1} s", t0.elapsed().as_secs_f64());
    for r in &rows {
        println!(
            "snr {:>2} dec {} scen {:<13} psnr {:.3}±{:.3} msssim {:.5}±{:.5}",
            r.snr_db,
            r.decoder,
            r.scenario.label(),
            r.psnr_mean,
            r.psnr_std,
            r.msssim_mean,
            r.msssim_std
        );
    }
    for dec in 0..2 {
        let targeted: Vec<&_> = rows
            .iter()
            .filter(|r| r.decoder == dec && r.scenario == Scenario::Targeted)
            .collect();
        for pair in targeted.windows(2) {
            println!(
                "trend-a dec {dec}: psnr {:.3} -> {:.3} (delta {:+.3}) at {} -> {} dB",
                pair[0].psnr_mean,
                pair[1].psnr_mean,
                pair[1].psnr_mean - pair[0].psnr_mean,
                pair[0].snr_db,
                pair[1].snr_db
            );
        }
    }
    for snr in [0.0, 2.0, 4.0, 6.0, 8.0] {
        let get = |dec: usize, scen: Scenario| {
            rows.iter()
                .find(|r| r.snr_db == snr && r.decoder == dec && r.scenario == scen)
                .unwrap()
        };
        let lcd = get(0, Scenario::Targeted);
        let hcd = get(1, Scenario::Targeted);
        println!(
            "trend-b snr {snr}: hcd {:.5} vs lcd {:.5} (delta {:+.5})",
            hcd.msssim_mean,
            lcd.msssim_mean,
            hcd.msssim_mean - lcd.msssim_mean
        );
        for dec in 0..2 {
            let t = get(dec, Scenario::Targeted);
            let n = get(dec, Scenario::NonTargeted);
            println!(
                "trend-c snr {snr} dec {dec}: targeted {:.5} vs non {:.5} (delta {:+.5})",
                t.msssim_mean,
                n.msssim_mean,
                t.msssim_mean - n.msssim_mean
            );
        }
    }

    // Trend (d): rate sweep at fixed mid SNR.
    let rate_sweep = SweepSpec {
        snrs_db: vec![4.0],
        cbrs: vec![
            CbrLevel::new(3, 64).unwrap(),
            CbrLevel::new(4, 64).unwrap(),
            CbrLevel::new(5, 64).unwrap(),
        ],
        scenarios: vec![Scenario::Targeted],
        repeats: 2,
        channel: ChannelModel::Awgn,
        master_seed: 29,
    };
    let rate_rows = evaluate(&hybrid_bundle, &images, &rate_sweep).unwrap();
    for dec in 0..2 {
        let per_rate: Vec<&_> = rate_rows.iter().filter(|r| r.decoder == dec).collect();
        for pair in per_rate.windows(2) {
            println!(
                "trend-d dec {dec}: msssim {:.5} -> {:.5} (delta {:+.5}) at {} -> {}",
                pair[0].msssim_mean,
                pair[1].msssim_mean,
                pair[1].msssim_mean - pair[0].msssim_mean,
                pair[0].cbr.label(),
                pair[1].cbr.label()
            );
        }
    }

    // Trend (e): objective comparison at 0 dB.
    let harsh = SweepSpec {
        snrs_db: vec![0.0],
        cbrs: vec![level],
        scenarios: vec![Scenario::Targeted],
        repeats: 2,
        channel: ChannelModel::Awgn,
        master_seed: 31,
    };
    let hybrid_rows = evaluate(&hybrid_bundle, &images, &harsh).unwrap();
    let mse_rows = evaluate(&mse_bundle, &images, &harsh).unwrap();
    for dec in 0..2 {
        let h = hybrid_rows.iter().find(|r| r.decoder == dec).unwrap();
        let m = mse_rows.iter().find(|r| r.decoder == dec).unwrap();
        println!(
            "trend-e dec {dec}: hybrid {:.5} vs mse {:.5} (delta {:+.5})",
            h.msssim_mean,
            m.msssim_mean,
            h.msssim_mean - m.msssim_mean
        );
    }
    println!("pilot complete");
}
