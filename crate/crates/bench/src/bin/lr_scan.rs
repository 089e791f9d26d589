//! Short full-pipeline training runs at several learning rates and widths,
//! using the real alternating loop on a real on-disk dataset. Prints the
//! per-epoch loss trajectory so the flattest-descending configuration can be
//! picked for the long trend demonstration.

use semcom_bench::bench_config;
use semcom_core::imaging::{synth, Split};
use semcom_core::training::run_training;

fn scan(widths: Vec<usize>, lr: f64, epochs: usize, root: &std::path::Path) {
    let mut cfg = bench_config(64, widths.clone(), vec![2, 2, 6, 2]);
    cfg.data.root = root.to_path_buf();
    cfg.data.seed = 11;
    cfg.model.hcd_depths = vec![2, 6, 1, 1];
    cfg.model.lcd_depths = vec![1, 1];
    cfg.train.epochs = epochs;
    cfg.train.learning_rate = lr;
    cfg.train.seed = 17;
    let out = std::env::temp_dir().join(format!(
        "lr_scan_{}_{lr:.0e}",
        widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
    ));
    let started = std::time::Instant::now();
    let run = run_training(&cfg, &out).unwrap();
    println!(
        "== widths {widths:?} lr {lr:.0e} ({:.0} s) ==",
        started.elapsed().as_secs_f64()
    );
    for s in &run.stats {
        println!(
            "  epoch {:2} target {} loss {:.5} psnr {:5.2} msssim {:.4}",
            s.epoch, s.target, s.mean_loss, s.mean_psnr, s.mean_ms_ssim
        );
    }
}

fn main() {
    let root = std::env::temp_dir().join("lr_scan_data");
    synth::write_dataset(&root, Split::Train, 500, 80, 5).unwrap();
    println!("dataset ready");

    let args: Vec<String> = std::env::args().collect();
    let phase = args.get(1).map(String::as_str).unwrap_or("narrow");
    match phase {
        "narrow" => {
            for lr in [1e-3, 3e-4, 1e-4] {
                scan(vec![8, 16, 32, 32], lr, 12, &root);
            }
        }
        "wide" => {
            for lr in [3e-4, 1e-4] {
                scan(vec![16, 32, 64, 64], lr, 12, &root);
            }
        }
        "long" => {
            for lr in [3e-4, 1e-4] {
                scan(vec![8, 16, 32, 32], lr, 30, &root);
            }
        }
        other => eprintln!("unknown phase {other}"),
    }
}
