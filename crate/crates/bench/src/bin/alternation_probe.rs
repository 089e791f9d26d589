//! Probes how per-epoch target alternation and randomized conditioning
//! interact with the learning rate. Each configuration trains on four fixed
//! batches (32 images) with mini-epochs of ten steps, mirroring the real
//! loop's structure at small scale.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use semcom_bench::bench_config;
use semcom_core::autodiff::Tape;
use semcom_core::channel::ChannelModel;
use semcom_core::imaging::{synth, ImageTensor};
use semcom_core::nn::{Adam, GradAccumulator, ParamGroup, ParamTape};
use semcom_core::seeding::derive_seed;
use semcom_core::semantic_codec::TargetId;
use semcom_core::training::{image_from_node, reconstruction_loss, ModelBundle};

struct ProbeSpec {
    label: &'static str,
    alternate: bool,
    random_conditioning: bool,
    lr: f64,
    steps: usize,
}

fn run(spec: &ProbeSpec) {
    let mut cfg = bench_config(64, vec![8, 16, 32, 32], vec![2, 2, 6, 2]);
    cfg.train.learning_rate = spec.lr;
    let hybrid = cfg.loss.hybrid();
    let kind = cfg.loss.loss_kind().unwrap();
    let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
    let mut optimizer = Adam::new(&bundle.store, spec.lr);
    let batches: Vec<Vec<ImageTensor>> = (0..4)
        .map(|b| {
            (0..8)
                .map(|i| synth::generate_image(64, derive_seed(91, "img", &[b * 8 + i])))
                .collect()
        })
        .collect();
    let snrs = cfg.channel.train_snrs.clone();
    let mut draw = ChaCha12Rng::seed_from_u64(7);

    println!("== {} (lr {:.0e}) ==", spec.label, spec.lr);
    for step in 0..spec.steps {
        let target: u8 = if spec.alternate { ((step / 10) % 2) as u8 } else { 0 };
        let other = 1 - target;
        let frozen = [ParamGroup::Phi(other), ParamGroup::Theta(other)];
        let (snr_db, level) = if spec.random_conditioning {
            (
                snrs[draw.random_range(0..snrs.len())],
                draw.random_range(0..3usize),
            )
        } else {
            (5.0, 1)
        };
        let batch = &batches[step % batches.len()];
        let mut grads = GradAccumulator::new(&bundle.store);
        let mut total = 0.0;
        for (si, image) in batch.iter().enumerate() {
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let (original, recon) = bundle
                .pipeline(
                    &pt,
                    image,
                    TargetId::User(target),
                    target as usize,
                    ChannelModel::Awgn,
                    snr_db,
                    level,
                    derive_seed(92, "chan", &[step as u64, si as u64]),
                )
                .unwrap();
            let loss = reconstruction_loss(&tape, original, recon, kind, &hybrid).unwrap();
            total += tape.scalar_value(loss) as f64;
            let _ = image_from_node(&tape, recon);
            let mut node_grads = tape.backward(loss);
            grads.add_all(pt.collect_gradients(&mut node_grads));
        }
        grads.scale(1.0 / batch.len() as f32);
        optimizer.step(&mut bundle.store, &grads, &frozen);
        if step % 40 == 0 || step + 1 == spec.steps {
            println!("  step {step:3}: loss {:.5}", total / batch.len() as f64);
        }
    }
}

fn main() {
    for spec in [
        ProbeSpec { label: "single target, fixed cond", alternate: false, random_conditioning: false, lr: 1e-3, steps: 240 },
        ProbeSpec { label: "single target, random cond", alternate: false, random_conditioning: true, lr: 1e-3, steps: 240 },
        ProbeSpec { label: "alternating, random cond", alternate: true, random_conditioning: true, lr: 1e-3, steps: 240 },
        ProbeSpec { label: "alternating, random cond", alternate: true, random_conditioning: true, lr: 3e-4, steps: 240 },
        ProbeSpec { label: "alternating, random cond", alternate: true, random_conditioning: true, lr: 1e-4, steps: 240 },
    ] {
        run(&spec);
    }
}
