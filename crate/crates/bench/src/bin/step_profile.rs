//! Breaks one training step into phases (forward, loss, backward, gradient
//! collection) to expose where the time goes.

use semcom_bench::{bench_bundle, bench_config, bench_images};
use semcom_core::autodiff::Tape;
use semcom_core::channel::ChannelModel;
use semcom_core::losses::hybrid_loss;
use semcom_core::nn::{GradAccumulator, ParamTape};
use semcom_core::semantic_codec::TargetId;
use std::time::Instant;

fn main() {
    let cfg = bench_config(64, vec![8, 16, 32, 32], vec![1, 1, 2, 1]);
    let bundle = bench_bundle(&cfg, 1);
    let images = bench_images(4, 64, 2);
    let hybrid = cfg.loss.hybrid();

    // Warm-up.
    for _ in 0..2 {
        let tape = Tape::new();
        let pt = ParamTape::new(&bundle.store, &tape);
        let (original, recon) = bundle
            .pipeline(&pt, &images[0], TargetId::User(1), 1, ChannelModel::Awgn, 5.0, 1, 7)
            .unwrap();
        let loss = hybrid_loss(&tape, original, recon, &hybrid).unwrap();
        let mut grads = tape.backward(loss);
        let mut acc = GradAccumulator::new(&bundle.store);
        acc.add_all(pt.collect_gradients(&mut grads));
    }

    let reps = images.len();
    let mut t_forward = 0.0;
    let mut t_loss = 0.0;
    let mut t_backward = 0.0;
    let mut t_collect = 0.0;
    let mut nodes = 0usize;
    for image in &images {
        let tape = Tape::new();
        let pt = ParamTape::new(&bundle.store, &tape);
        let t0 = Instant::now();
        let (original, recon) = bundle
            .pipeline(&pt, image, TargetId::User(1), 1, ChannelModel::Awgn, 5.0, 1, 7)
            .unwrap();
        let t1 = Instant::now();
        let loss = hybrid_loss(&tape, original, recon, &hybrid).unwrap();
        let t2 = Instant::now();
        let mut grads = tape.backward(loss);
        let t3 = Instant::now();
        let mut acc = GradAccumulator::new(&bundle.store);
        acc.add_all(pt.collect_gradients(&mut grads));
        let t4 = Instant::now();
        t_forward += (t1 - t0).as_secs_f64();
        t_loss += (t2 - t1).as_secs_f64();
        t_backward += (t3 - t2).as_secs_f64();
        t_collect += (t4 - t3).as_secs_f64();
        nodes = tape.len();
    }
    let scale = 1e3 / reps as f64;
    println!(
        "nodes {nodes}  forward {:.1} ms  loss {:.1} ms  backward {:.1} ms  collect {:.1} ms",
        t_forward * scale,
        t_loss * scale,
        t_backward * scale,
        t_collect * scale
    );
}
