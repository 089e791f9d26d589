//! Single-batch overfit probe: can the desk-size model drive its training
//! loss down on eight fixed images with fixed conditioning? Prints per-group
//! gradient norms at the first step and the loss trajectory, for both loss
//! kinds.

use semcom_bench::bench_config;
use semcom_core::autodiff::Tape;
use semcom_core::channel::ChannelModel;
use semcom_core::config::LossKind;
use semcom_core::imaging::{synth, ImageTensor};
use semcom_core::nn::{Adam, GradAccumulator, ParamGroup, ParamTape};
use semcom_core::seeding::derive_seed;
use semcom_core::semantic_codec::TargetId;
use semcom_core::training::{image_from_node, reconstruction_loss, ModelBundle};

fn group_grad_norms(bundle: &ModelBundle<f32>, grads: &GradAccumulator<f32>) {
    for group in [
        ParamGroup::Alpha,
        ParamGroup::Beta,
        ParamGroup::Phi(0),
        ParamGroup::Theta(0),
    ] {
        let mut sq = 0.0f64;
        let mut maxa = 0.0f64;
        let mut n = 0usize;
        for id in bundle.store.ids_in_group(group) {
            if let Some(g) = grads.get(id) {
                for &v in g.iter() {
                    let v = v as f64;
                    sq += v * v;
                    maxa = maxa.max(v.abs());
                    n += 1;
                }
            }
        }
        println!(
            "  grad {group:?}: l2 {:.3e} max {maxa:.3e} over {n} values",
            sq.sqrt()
        );
    }
}

fn run(kind: LossKind, steps: usize) {
    let mut cfg = bench_config(64, vec![8, 16, 32, 32], vec![2, 2, 6, 2]);
    cfg.loss.kind = match kind {
        LossKind::Hybrid => "hybrid".into(),
        LossKind::Mse => "mse".into(),
    };
    cfg.train.learning_rate = 1e-3;
    let hybrid = cfg.loss.hybrid();
    let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
    let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);
    let batch: Vec<ImageTensor> = (0..8)
        .map(|i| synth::generate_image(64, derive_seed(91, "img", &[i])))
        .collect();

    println!("== loss kind {kind:?} ==");
    for step in 0..steps {
        let mut grads = GradAccumulator::new(&bundle.store);
        let mut total = 0.0;
        let mut out_mean = 0.0;
        let mut out_std = 0.0;
        for (si, image) in batch.iter().enumerate() {
            let tape = Tape::new();
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
                    derive_seed(92, "chan", &[step as u64, si as u64]),
                )
                .unwrap();
            let loss = reconstruction_loss(&tape, original, recon, kind, &hybrid).unwrap();
            total += tape.scalar_value(loss) as f64;
            let img = image_from_node(&tape, recon);
            let px = img.pixels();
            let m = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
            let var =
                px.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / px.len() as f64;
            out_mean += m;
            out_std += var.sqrt();
            let mut node_grads = tape.backward(loss);
            grads.add_all(pt.collect_gradients(&mut node_grads));
        }
        if step == 0 {
            group_grad_norms(&bundle, &grads);
        }
        grads.scale(1.0 / batch.len() as f32);
        optimizer.step(&mut bundle.store, &grads, &[]);
        if step % 20 == 0 || step + 1 == steps {
            println!(
                "  step {step:3}: loss {:.5} out mean {:.3} std {:.3}",
                total / batch.len() as f64,
                out_mean / batch.len() as f64,
                out_std / batch.len() as f64
            );
        }
    }
}

fn main() {
    run(LossKind::Mse, 120);
    run(LossKind::Hybrid, 120);
}
