//! Wall-clock timing of one training step and one evaluation pass at a few
//! model widths. Run with `cargo run --release -p semcom-bench --bin
//! step_timing` to size longer experiments before launching them.

use semcom_bench::{bench_bundle, bench_config, bench_images};
use semcom_core::metrics::{ms_ssim, psnr};
use semcom_core::nn::Adam;
use semcom_core::training::{image_from_node, train_epoch_targeted};
use semcom_core::autodiff::Tape;
use semcom_core::nn::ParamTape;
use semcom_core::channel::ChannelModel;
use semcom_core::semantic_codec::TargetId;
use std::time::Instant;

fn main() {
    let crop = 64;
    let candidates: Vec<(&str, Vec<usize>, Vec<usize>)> = vec![
        ("narrow d1121", vec![8, 16, 32, 32], vec![1, 1, 2, 1]),
        ("narrow d2262", vec![8, 16, 32, 32], vec![2, 2, 6, 2]),
        ("mid d1121", vec![16, 32, 64, 64], vec![1, 1, 2, 1]),
    ];
    for (label, widths, depths) in candidates {
        let cfg = bench_config(crop, widths, depths);
        let build_start = Instant::now();
        let mut bundle = bench_bundle(&cfg, 1);
        let build_ms = build_start.elapsed().as_secs_f64() * 1e3;
        let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);

        let images = bench_images(8, crop, 2);
        let batches = vec![images.clone()];
        // One warm-up batch, then a timed one.
        train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 0, 0).unwrap();
        let step_start = Instant::now();
        train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 1, 1).unwrap();
        let per_sample_ms = step_start.elapsed().as_secs_f64() * 1e3 / images.len() as f64;

        let eval_start = Instant::now();
        for (i, image) in images.iter().enumerate() {
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let (_, recon) = bundle
                .pipeline(
                    &pt,
                    image,
                    TargetId::User(1),
                    1,
                    ChannelModel::Awgn,
                    5.0,
                    1,
                    i as u64,
                )
                .unwrap();
            let recon_img = image_from_node(&tape, recon);
            let _ = psnr(image, &recon_img, 1.0).unwrap();
            let _ = ms_ssim(image, &recon_img, &cfg.loss.hybrid().ms_ssim).unwrap();
        }
        let eval_ms = eval_start.elapsed().as_secs_f64() * 1e3 / images.len() as f64;

        let params: usize = {
            use semcom_core::nn::ParamGroup;
            [
                ParamGroup::Alpha,
                ParamGroup::Beta,
                ParamGroup::Phi(0),
                ParamGroup::Phi(1),
                ParamGroup::Theta(0),
                ParamGroup::Theta(1),
            ]
            .iter()
            .map(|&g| bundle.store.group_element_count(g))
            .sum()
        };
        println!(
            "{label:>14}: {params:>8} params  build {build_ms:7.1} ms  \
             train step {per_sample_ms:7.1} ms/sample  eval {eval_ms:7.1} ms/sample"
        );
    }
}
