//! End-to-end and hot-path benchmarks: quality metrics, the multi-scale
//! loss with its backward pass, windowed attention, channel encoding, and a
//! full optimizer step on one image.

use criterion::{criterion_group, criterion_main, Criterion};
use semcom_bench::{bench_bundle, bench_config, bench_images};
use semcom_core::autodiff::Tape;
use semcom_core::channel::ChannelModel;
use semcom_core::losses::hybrid_loss;
use semcom_core::metrics::{ms_ssim, ssim, MsSsimConfig, SsimConfig};
use semcom_core::nn::{Adam, GradAccumulator, ParamTape};
use semcom_core::semantic_codec::TargetId;
use semcom_core::training::{reconstruction_loss, ModelBundle};

fn metric_benches(c: &mut Criterion) {
    let images = bench_images(2, 64, 3);
    let (a, b) = (&images[0], &images[1]);
    let ssim_cfg = SsimConfig::default();
    let ms_cfg = MsSsimConfig::default();
    let mut group = c.benchmark_group("metrics 64x64");
    group.bench_function("ssim", |bench| bench.iter(|| ssim(a, b, &ssim_cfg).unwrap()));
    group.bench_function("ms_ssim", |bench| bench.iter(|| ms_ssim(a, b, &ms_cfg).unwrap()));
    group.finish();
}

fn loss_benches(c: &mut Criterion) {
    let cfg = bench_config(64, vec![8, 16, 32, 32], vec![2, 2, 6, 2]);
    let hybrid = cfg.loss.hybrid();
    let images = bench_images(2, 64, 5);
    let ra = images[0].to_scalar_array::<f32>();
    let ta = images[1].to_scalar_array::<f32>();

    let mut group = c.benchmark_group("hybrid loss 64x64");
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let tape = Tape::<f32>::new();
            let r = tape.leaf(ra.clone());
            let t = tape.leaf(ta.clone());
            let loss = hybrid_loss(&tape, r, t, &hybrid).unwrap();
            tape.scalar_value(loss)
        })
    });
    group.bench_function("forward+backward", |bench| {
        bench.iter(|| {
            let tape = Tape::<f32>::new();
            let r = tape.leaf(ra.clone());
            let t = tape.leaf(ta.clone());
            let loss = hybrid_loss(&tape, r, t, &hybrid).unwrap();
            let mut grads = tape.backward(loss);
            grads.take(t)
        })
    });
    group.finish();
}

fn model_benches(c: &mut Criterion) {
    let cfg = bench_config(64, vec![8, 16, 32, 32], vec![2, 2, 6, 2]);
    let hybrid = cfg.loss.hybrid();
    let kind = cfg.loss.loss_kind().unwrap();
    let bundle: ModelBundle<f32> = bench_bundle(&cfg, 3);
    let image = &bench_images(1, 64, 7)[0];

    let mut group = c.benchmark_group("model 64x64");
    group.sample_size(20);
    group.bench_function("encode to symbols", |bench| {
        bench.iter(|| {
            let tape = Tape::<f32>::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let leaf = tape.leaf(image.to_scalar_array::<f32>());
            let symbols = bundle
                .transmit(&pt, leaf, TargetId::User(0), 5.0, 1)
                .unwrap();
            tape.value_owned(symbols).len()
        })
    });
    group.bench_function("train step (one image)", |bench| {
        let mut bundle = bench_bundle(&cfg, 3);
        let mut optimizer = Adam::new(&bundle.store, 1e-3);
        let mut step = 0u64;
        bench.iter(|| {
            let mut grads = GradAccumulator::new(&bundle.store);
            let tape = Tape::<f32>::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let (original, recon) = bundle
                .pipeline(
                    &pt,
                    image,
                    TargetId::User(0),
                    0,
                    ChannelModel::Awgn,
                    5.0,
                    1,
                    step,
                )
                .unwrap();
            let loss = reconstruction_loss(&tape, original, recon, kind, &hybrid).unwrap();
            let mut node_grads = tape.backward(loss);
            grads.add_all(pt.collect_gradients(&mut node_grads));
            optimizer.step(&mut bundle.store, &grads, &[]);
            step += 1;
        })
    });
    group.finish();
}

criterion_group!(benches, metric_benches, loss_benches, model_benches);
criterion_main!(benches);
