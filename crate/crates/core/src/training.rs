//! Training loop for the shared transmitter and the two receiver chains:
//! epochs alternate between the low- and high-capacity paths (freezing the
//! counterpart receiver), or train both at once from a single untargeted
//! encoder pass. Also home to the assembled model bundle used by evaluation.

use crate::channel::{sample_channel_residual, ChannelModel};
use crate::channel_codec::{ChannelCodecError, ChannelDecoder, ChannelEncoder};
use crate::checkpoint::{load_checkpoint, restore_into, save_checkpoint, CheckpointError};
use crate::config::{AppConfig, ConfigError, LossKind, TrainMode};
use crate::imaging::{iterate_batches, Batch, DatasetSpec, ImageTensor, ImagingError, Split};
use crate::losses::{hybrid_loss, HybridLossConfig, LossError};
use crate::metrics::{ms_ssim, psnr, MetricsError};
use crate::nn::{Adam, GradAccumulator, Init, ParamGroup, ParamStore, ParamTape};
use crate::seeding::derive_seed;
use crate::semantic_codec::{
    CodecError, DecoderCapacity, ModelGeometry, SemanticDecoder, SemanticEncoder, TargetId,
};
use crate::autodiff::{Scalar, Tape, Var};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    ChannelCodec(#[from] ChannelCodecError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failed for {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("loss became non-finite ({value}) in epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("the dataset produced no usable batch")]
    EmptyEpoch,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Model bundle.
// ---------------------------------------------------------------------------

/// Every parameter group of the system assembled for one image size: the
/// shared semantic and channel encoders plus both users' channel and
/// semantic decoders, all over a single parameter store.
pub struct ModelBundle<T: Scalar> {
    pub store: ParamStore<T>,
    pub config: AppConfig,
    pub geometry: ModelGeometry,
    pub semantic_encoder: SemanticEncoder<T>,
    pub channel_encoder: ChannelEncoder,
    pub channel_decoders: [ChannelDecoder; 2],
    pub semantic_decoders: [SemanticDecoder<T>; 2],
}

impl<T: Scalar> ModelBundle<T> {
    /// Builds and initializes all groups from a validated config, in the
    /// fixed order alpha, beta, phi_0, theta_0, phi_1, theta_1.
    pub fn build(config: &AppConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let geometry = config.model.geometry();
        let crop = config.data.crop_size;
        let factor = geometry.downsample_factor()?;
        let pixels_per_token = factor * factor;
        let fusion = config.codec.fusion();
        let bank = config.codec.bank().map_err(ConfigError::from)?;

        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, config.train.seed);
        let semantic_encoder = SemanticEncoder::build(&mut init, &geometry, crop, crop)?;
        let channels = semantic_encoder.feature_channels();
        let channel_encoder =
            ChannelEncoder::build(&mut init, &fusion, channels, pixels_per_token, bank.clone())?;
        let mut channel_decoders = Vec::with_capacity(2);
        let mut semantic_decoders = Vec::with_capacity(2);
        for user in 0..2u8 {
            channel_decoders.push(ChannelDecoder::build(
                &mut init,
                &fusion,
                channels,
                pixels_per_token,
                bank.clone(),
                ParamGroup::Phi(user),
            )?);
            semantic_decoders.push(SemanticDecoder::build(
                &mut init,
                &geometry,
                crop,
                crop,
                DecoderCapacity::for_user(user),
                ParamGroup::Theta(user),
            )?);
        }
        let [cd0, cd1]: [ChannelDecoder; 2] = channel_decoders
            .try_into()
            .unwrap_or_else(|_| unreachable!("two decoders built"));
        let [sd0, sd1]: [SemanticDecoder<T>; 2] = semantic_decoders
            .try_into()
            .unwrap_or_else(|_| unreachable!("two decoders built"));
        Ok(ModelBundle {
            store,
            config: config.clone(),
            geometry,
            semantic_encoder,
            channel_encoder,
            channel_decoders: [cd0, cd1],
            semantic_decoders: [sd0, sd1],
        })
    }

    pub fn tokens(&self) -> usize {
        self.semantic_encoder.token_count()
    }

    /// Encoder side: image node to power-normalized channel symbols.
    pub fn transmit(
        &self,
        pt: &ParamTape<'_, T>,
        image: Var,
        target: TargetId,
        snr_db: f64,
        level: usize,
    ) -> Result<Var, TrainError> {
        let features = self.semantic_encoder.forward(pt, image, target);
        Ok(self
            .channel_encoder
            .forward(pt, features, snr_db, level)?)
    }

    /// Receiver side of one user: received symbols to a reconstructed image
    /// node in unit range.
    pub fn receive(
        &self,
        pt: &ParamTape<'_, T>,
        received: Var,
        user: usize,
        snr_db: f64,
        level: usize,
    ) -> Result<Var, TrainError> {
        let features =
            self.channel_decoders[user].forward(pt, received, snr_db, level, self.tokens())?;
        Ok(self.semantic_decoders[user].forward(pt, features))
    }

    /// Full pipeline for one image on an existing tape: encode toward
    /// `target`, cross the channel (additive residual drawn from
    /// `channel_seed`), decode as `user`. Returns (original, reconstruction).
    #[allow(clippy::too_many_arguments)]
    pub fn pipeline(
        &self,
        pt: &ParamTape<'_, T>,
        image: &ImageTensor,
        target: TargetId,
        user: usize,
        channel: ChannelModel,
        snr_db: f64,
        level: usize,
        channel_seed: u64,
    ) -> Result<(Var, Var), TrainError> {
        let tape = pt.tape;
        let original = tape.leaf(image.to_scalar_array::<T>());
        let symbols = self.transmit(pt, original, target, snr_db, level)?;
        let k = tape.value(symbols).len();
        let residual = residual_array::<T>(channel, k, snr_db, channel_seed);
        let received = tape.add_const(symbols, &residual);
        let recon = self.receive(pt, received, user, snr_db, level)?;
        Ok((original, recon))
    }
}

/// Channel crossing as an additive term: for the fading model this is the
/// equalized noise, for the plain model the noise itself.
fn residual_array<T: Scalar>(
    channel: ChannelModel,
    len: usize,
    snr_db: f64,
    seed: u64,
) -> ArrayD<T> {
    let residual = sample_channel_residual(channel, len, snr_db, seed);
    ArrayD::from_shape_vec(IxDyn(&[len]), residual.into_iter().map(T::from_f64).collect())
        .expect("length matches")
}

/// Loads a bundle (single precision) back from a checkpoint archive.
pub fn load_bundle(path: &Path) -> Result<(ModelBundle<f32>, AppConfig), TrainError> {
    let (config_text, tensors) = load_checkpoint(path)?;
    let config = AppConfig::from_toml(&config_text)?;
    let mut bundle = ModelBundle::<f32>::build(&config)?;
    restore_into(&mut bundle.store, tensors)?;
    Ok((bundle, config))
}

// ---------------------------------------------------------------------------
// Epoch statistics.
// ---------------------------------------------------------------------------

/// Aggregates of one training epoch.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// `"0"`, `"1"`, or `"broadcast"`.
    pub target: String,
    pub mean_loss: f64,
    pub mean_psnr: f64,
    pub mean_ms_ssim: f64,
    pub batches: usize,
    pub samples: usize,
    /// How often each rate level was drawn, by bank index.
    pub cbr_counts: Vec<usize>,
}

#[derive(Default)]
struct Accumulated {
    loss: f64,
    psnr: f64,
    ms_ssim: f64,
    samples: usize,
}

impl Accumulated {
    fn record(&mut self, loss: f64, psnr_db: f64, msssim: f64) {
        self.loss += loss;
        self.psnr += psnr_db;
        self.ms_ssim += msssim;
        self.samples += 1;
    }

    fn stats(&self, epoch: usize, target: String, batches: usize, cbr_counts: Vec<usize>) -> EpochStats {
        let n = self.samples.max(1) as f64;
        EpochStats {
            epoch,
            target,
            mean_loss: self.loss / n,
            mean_psnr: self.psnr / n,
            mean_ms_ssim: self.ms_ssim / n,
            batches,
            samples: self.samples,
            cbr_counts,
        }
    }
}

/// Reads a `(h, w, 3)` tape node back into a unit-range image.
pub fn image_from_node<T: Scalar>(tape: &Tape<T>, node: Var) -> ImageTensor {
    let value = tape.value(node);
    let shape = value.shape();
    let pixels = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(y, x, c)| {
        value[[y, x, c]].to_f64() as f32
    });
    ImageTensor::from_clamped(pixels)
}

/// Applies the configured reconstruction objective to a pair of tape nodes.
pub fn reconstruction_loss<T: Scalar>(
    tape: &Tape<T>,
    original: Var,
    recon: Var,
    kind: LossKind,
    hybrid: &HybridLossConfig,
) -> Result<Var, LossError> {
    match kind {
        LossKind::Hybrid => hybrid_loss(tape, original, recon, hybrid),
        LossKind::Mse => {
            let diff = tape.sub(recon, original);
            let sq = tape.square(diff);
            Ok(tape.mean(sq))
        }
    }
}

/// Per-batch draw of channel quality and rate level.
fn draw_snr_level(rng: &mut ChaCha12Rng, snrs: &[f64], bank_len: usize) -> (f64, usize) {
    let snr = snrs[rng.random_range(0..snrs.len())];
    let level = rng.random_range(0..bank_len);
    (snr, level)
}

// ---------------------------------------------------------------------------
// Epochs.
// ---------------------------------------------------------------------------

/// One epoch of targeted training: every image is encoded toward
/// `target_user` and decoded only by that user's receivers; the other user's
/// receiver groups are frozen (no update, no optimizer-state advance).
/// Returns mean loss / PSNR / MS-SSIM over the epoch.
pub fn train_epoch_targeted<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    optimizer: &mut Adam<T>,
    batches: &[Batch],
    target_user: u8,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyEpoch);
    }
    let config = bundle.config.clone();
    let hybrid = config.loss.hybrid();
    let kind = config.loss.loss_kind()?;
    let ms_cfg = hybrid.ms_ssim.clone();
    let snrs = &config.channel.train_snrs;
    let bank_len = bundle.channel_encoder.bank().len();
    let other = 1 - target_user;
    let frozen = [ParamGroup::Phi(other), ParamGroup::Theta(other)];
    let mut draw_rng =
        ChaCha12Rng::seed_from_u64(derive_seed(config.train.seed, "epoch-draw", &[epoch as u64]));
    let mut totals = Accumulated::default();
    let mut cbr_counts = vec![0usize; bank_len];

    for (batch_idx, batch) in batches.iter().enumerate() {
        let (snr_db, level) = draw_snr_level(&mut draw_rng, snrs, bank_len);
        cbr_counts[level] += 1;
        let mut grads = GradAccumulator::new(&bundle.store);
        for (sample_idx, image) in batch.iter().enumerate() {
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let channel_seed = derive_seed(
                config.train.seed,
                "train-channel",
                &[epoch as u64, batch_idx as u64, sample_idx as u64],
            );
            let (original, recon) = bundle.pipeline(
                &pt,
                image,
                TargetId::User(target_user),
                target_user as usize,
                ChannelModel::Awgn,
                snr_db,
                level,
                channel_seed,
            )?;
            let loss = reconstruction_loss(&tape, original, recon, kind, &hybrid)?;
            let loss_value = tape.scalar_value(loss).to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: loss_value,
                });
            }
            let recon_img = image_from_node(&tape, recon);
            totals.record(
                loss_value,
                psnr(image, &recon_img, 1.0)?,
                ms_ssim(image, &recon_img, &ms_cfg)?,
            );
            let mut node_grads = tape.backward(loss);
            grads.add_all(pt.collect_gradients(&mut node_grads));
        }
        grads.scale(T::from_f64(1.0 / batch.len() as f64));
        optimizer.step(&mut bundle.store, &grads, &frozen);
    }
    Ok(totals.stats(epoch, target_user.to_string(), batches.len(), cbr_counts))
}

/// One epoch of broadcast training: a single untargeted encoder pass feeds
/// both receiver chains; the loss is the mean of the two per-user losses and
/// every group updates.
pub fn train_epoch_broadcast<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    optimizer: &mut Adam<T>,
    batches: &[Batch],
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyEpoch);
    }
    let config = bundle.config.clone();
    let hybrid = config.loss.hybrid();
    let kind = config.loss.loss_kind()?;
    let ms_cfg = hybrid.ms_ssim.clone();
    let snrs = &config.channel.train_snrs;
    let bank_len = bundle.channel_encoder.bank().len();
    let mut draw_rng =
        ChaCha12Rng::seed_from_u64(derive_seed(config.train.seed, "epoch-draw", &[epoch as u64]));
    let mut totals = Accumulated::default();
    let mut cbr_counts = vec![0usize; bank_len];

    for (batch_idx, batch) in batches.iter().enumerate() {
        let (snr_db, level) = draw_snr_level(&mut draw_rng, snrs, bank_len);
        cbr_counts[level] += 1;
        let mut grads = GradAccumulator::new(&bundle.store);
        for (sample_idx, image) in batch.iter().enumerate() {
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let original = tape.leaf(image.to_scalar_array::<T>());
            // One shared transmission; each user sees independent noise.
            let symbols = bundle.transmit(&pt, original, TargetId::Broadcast, snr_db, level)?;
            let k = tape.value(symbols).len();
            let mut user_losses = Vec::with_capacity(2);
            for user in 0..2usize {
                let seed = derive_seed(
                    config.train.seed,
                    "train-channel",
                    &[epoch as u64, batch_idx as u64, sample_idx as u64, user as u64],
                );
                let residual = residual_array::<T>(ChannelModel::Awgn, k, snr_db, seed);
                let received = tape.add_const(symbols, &residual);
                let recon = bundle.receive(&pt, received, user, snr_db, level)?;
                let loss = reconstruction_loss(&tape, original, recon, kind, &hybrid)?;
                user_losses.push((loss, recon));
            }
            let sum = tape.add(user_losses[0].0, user_losses[1].0);
            let combined = tape.mul_scalar(sum, T::from_f64(0.5));
            let loss_value = tape.scalar_value(combined).to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: loss_value,
                });
            }
            let mut psnr_sum = 0.0;
            let mut ms_sum = 0.0;
            for &(_, recon) in &user_losses {
                let recon_img = image_from_node(&tape, recon);
                psnr_sum += psnr(image, &recon_img, 1.0)?;
                ms_sum += ms_ssim(image, &recon_img, &ms_cfg)?;
            }
            totals.record(loss_value, psnr_sum / 2.0, ms_sum / 2.0);
            let mut node_grads = tape.backward(combined);
            grads.add_all(pt.collect_gradients(&mut node_grads));
        }
        grads.scale(T::from_f64(1.0 / batch.len() as f64));
        optimizer.step(&mut bundle.store, &grads, &[]);
    }
    Ok(totals.stats(epoch, "broadcast".into(), batches.len(), cbr_counts))
}

// ---------------------------------------------------------------------------
// Full run.
// ---------------------------------------------------------------------------

/// Output locations and per-epoch statistics of a completed run.
pub struct RunArtifacts {
    /// Final model archive.
    pub checkpoint: PathBuf,
    /// Archive refreshed after every epoch.
    pub latest: PathBuf,
    /// Training-curve CSV (`epoch,target,loss,psnr,ms_ssim`).
    pub curve: PathBuf,
    pub stats: Vec<EpochStats>,
}

/// Materializes one epoch's worth of batches (fresh shuffle and crops).
pub fn epoch_batches(config: &AppConfig, epoch: usize) -> Result<Vec<Batch>, TrainError> {
    let spec = DatasetSpec {
        root: config.data.root.clone(),
        split: Split::Train,
        crop_size: config.data.crop_size,
        batch_size: config.data.batch_size,
        shuffle_seed: derive_seed(config.data.seed, "epoch-shuffle", &[epoch as u64]),
    };
    let batches: Result<Vec<Batch>, ImagingError> = iterate_batches(&spec)?.collect();
    let batches = batches?;
    if batches.is_empty() {
        return Err(TrainError::EmptyEpoch);
    }
    Ok(batches)
}

/// Runs the configured number of epochs, alternating the encoder target on
/// even/odd epochs (or broadcasting throughout), checkpointing after every
/// epoch and appending the training curve as it goes.
pub fn run_training(config: &AppConfig, out_dir: &Path) -> Result<RunArtifacts, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mode = config.train.train_mode()?;
    let config_text = config.to_toml()?;
    let mut bundle = ModelBundle::<f32>::build(config)?;
    let mut optimizer = Adam::new(&bundle.store, config.train.learning_rate);

    let curve_path = out_dir.join("training_curve.csv");
    let mut curve = std::fs::File::create(&curve_path).map_err(io_err(&curve_path))?;
    curve
        .write_all(b"epoch,target,loss,psnr,ms_ssim\n")
        .map_err(io_err(&curve_path))?;

    let latest_path = out_dir.join("latest.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut stats = Vec::with_capacity(config.train.epochs);
    for epoch in 0..config.train.epochs {
        let batches = epoch_batches(config, epoch)?;
        let epoch_stats = match mode {
            TrainMode::Alternating => {
                let target = (epoch % 2) as u8;
                train_epoch_targeted(&mut bundle, &mut optimizer, &batches, target, epoch)?
            }
            TrainMode::Broadcast => {
                train_epoch_broadcast(&mut bundle, &mut optimizer, &batches, epoch)?
            }
        };
        let row = format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            epoch_stats.epoch,
            epoch_stats.target,
            epoch_stats.mean_loss,
            epoch_stats.mean_psnr,
            epoch_stats.mean_ms_ssim,
        );
        curve.write_all(row.as_bytes()).map_err(io_err(&curve_path))?;
        curve.flush().map_err(io_err(&curve_path))?;
        save_checkpoint(&latest_path, &config_text, &bundle.store)?;
        stats.push(epoch_stats);
    }
    save_checkpoint(&final_path, &config_text, &bundle.store)?;
    Ok(RunArtifacts {
        checkpoint: final_path,
        latest: latest_path,
        curve: curve_path,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth;

    /// A configuration small enough for sub-second epochs.
    fn tiny_config(seed: u64) -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.data.crop_size = 16;
        cfg.data.batch_size = 2;
        cfg.data.seed = seed;
        cfg.model.window = 2;
        cfg.model.enc_depths = vec![1, 1, 1, 1];
        cfg.model.hcd_depths = vec![1, 1, 1, 1];
        cfg.model.lcd_depths = vec![1, 1];
        cfg.model.widths = vec![8, 16, 32, 32];
        cfg.codec.num_modules = 3;
        cfg.codec.hidden = 4;
        cfg.train.seed = seed;
        cfg.train.learning_rate = 1e-3;
        cfg.train.epochs = 2;
        cfg
    }

    fn synth_batches(cfg: &AppConfig, count: usize, seed: u64) -> Vec<Batch> {
        let images: Vec<ImageTensor> = (0..count)
            .map(|i| synth::generate_image(cfg.data.crop_size, derive_seed(seed, "img", &[i as u64])))
            .collect();
        images
            .chunks(cfg.data.batch_size)
            .filter(|c| c.len() == cfg.data.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    fn store_bytes(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
        store
            .ids()
            .map(|id| store.value(id).iter().copied().collect())
            .collect()
    }

    #[test]
    fn bundle_build_is_deterministic_and_seeded() {
        let cfg = tiny_config(42);
        let a = ModelBundle::<f32>::build(&cfg).unwrap();
        let b = ModelBundle::<f32>::build(&cfg).unwrap();
        assert_eq!(store_bytes(&a.store), store_bytes(&b.store));

        let mut other = tiny_config(42);
        other.train.seed = 43;
        let c = ModelBundle::<f32>::build(&other).unwrap();
        assert_ne!(store_bytes(&a.store), store_bytes(&c.store));

        // All six groups are populated.
        for group in [
            ParamGroup::Alpha,
            ParamGroup::Beta,
            ParamGroup::Phi(0),
            ParamGroup::Phi(1),
            ParamGroup::Theta(0),
            ParamGroup::Theta(1),
        ] {
            assert!(a.store.group_element_count(group) > 0, "{group:?}");
        }
    }

    #[test]
    fn targeted_epoch_freezes_the_counterpart_receiver() {
        let cfg = tiny_config(7);
        let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
        let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);
        let batches = synth_batches(&cfg, 4, 1);

        let frozen_phi = bundle.store.group_snapshot(ParamGroup::Phi(1));
        let frozen_theta = bundle.store.group_snapshot(ParamGroup::Theta(1));
        let alpha_before = bundle.store.group_snapshot(ParamGroup::Alpha);
        let beta_before = bundle.store.group_snapshot(ParamGroup::Beta);
        let active_theta = bundle.store.group_snapshot(ParamGroup::Theta(0));

        let stats = train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 0, 0).unwrap();
        assert!(stats.mean_loss.is_finite() && stats.mean_loss > 0.0);
        assert_eq!(stats.samples, 4);
        assert_eq!(stats.cbr_counts.iter().sum::<usize>(), stats.batches);

        assert_eq!(
            bundle.store.group_snapshot(ParamGroup::Phi(1)),
            frozen_phi,
            "frozen channel decoder must be bitwise unchanged"
        );
        assert_eq!(
            bundle.store.group_snapshot(ParamGroup::Theta(1)),
            frozen_theta,
            "frozen semantic decoder must be bitwise unchanged"
        );
        assert_ne!(bundle.store.group_snapshot(ParamGroup::Alpha), alpha_before);
        assert_ne!(bundle.store.group_snapshot(ParamGroup::Beta), beta_before);
        assert_ne!(bundle.store.group_snapshot(ParamGroup::Theta(0)), active_theta);

        // Frozen groups must not have advanced optimizer state either.
        for id in bundle.store.ids_in_group(ParamGroup::Theta(1)) {
            assert_eq!(optimizer.step_count(id), 0);
        }
        // Shared parameters advance every batch, with one exception: the
        // other user's target embeddings never enter the forward pass, so
        // they receive no gradient and no optimizer step.
        for id in bundle.store.ids_in_group(ParamGroup::Alpha) {
            let expected = if bundle.store.name(id).contains(".target1") {
                0
            } else {
                stats.batches as u64
            };
            assert_eq!(optimizer.step_count(id), expected, "{}", bundle.store.name(id));
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_epoch_exactly() {
        let cfg = tiny_config(11);
        let run = || {
            let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
            let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);
            let batches = synth_batches(&cfg, 4, 2);
            let s0 = train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 0, 0).unwrap();
            let s1 = train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 1, 1).unwrap();
            (s0.mean_loss, s1.mean_loss, store_bytes(&bundle.store))
        };
        let (a0, a1, pa) = run();
        let (b0, b1, pb) = run();
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
        assert_eq!(pa, pb);
    }

    #[test]
    fn repeated_epochs_reduce_the_training_loss() {
        let cfg = tiny_config(37);
        let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
        let mut optimizer = Adam::new(&bundle.store, 1e-3);
        let batches = synth_batches(&cfg, 8, 6);
        let mut first = None;
        let mut last = 0.0;
        for epoch in 0..6 {
            let stats =
                train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 0, epoch).unwrap();
            first.get_or_insert(stats.mean_loss);
            last = stats.mean_loss;
        }
        assert!(
            last < first.unwrap(),
            "epoch-mean loss should fall: first {} last {}",
            first.unwrap(),
            last
        );
    }

    #[test]
    fn broadcast_loss_is_the_mean_of_both_user_losses() {
        // Double precision so the comparison tolerance is meaningful.
        let cfg = tiny_config(13);
        let mut bundle = ModelBundle::<f64>::build(&cfg).unwrap();
        let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);
        let image = synth::generate_image(16, 5);
        let batches = vec![vec![image.clone()]];

        // Reproduce the epoch's draws and residuals independently.
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.train.seed, "epoch-draw", &[0]));
        let (snr_db, level) =
            draw_snr_level(&mut rng, &cfg.channel.train_snrs, bundle.channel_encoder.bank().len());
        let hybrid = cfg.loss.hybrid();
        let mut independent = Vec::new();
        for user in 0..2usize {
            let tape = Tape::new();
            let pt = ParamTape::new(&bundle.store, &tape);
            let seed = derive_seed(cfg.train.seed, "train-channel", &[0, 0, 0, user as u64]);
            let (original, recon) = bundle
                .pipeline(&pt, &image, TargetId::Broadcast, user, ChannelModel::Awgn, snr_db, level, seed)
                .unwrap();
            let loss = reconstruction_loss(&tape, original, recon, LossKind::Hybrid, &hybrid).unwrap();
            independent.push(tape.scalar_value(loss));
        }
        let expected = (independent[0] + independent[1]) / 2.0;

        let stats = train_epoch_broadcast(&mut bundle, &mut optimizer, &batches, 0).unwrap();
        assert!(
            (stats.mean_loss - expected).abs() < 1e-7,
            "combined {} vs mean of independent losses {}",
            stats.mean_loss,
            expected
        );
    }

    #[test]
    fn broadcast_epoch_updates_every_group() {
        let cfg = tiny_config(17);
        let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
        let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);
        let batches = synth_batches(&cfg, 2, 3);
        let before: Vec<_> = [
            ParamGroup::Alpha,
            ParamGroup::Beta,
            ParamGroup::Phi(0),
            ParamGroup::Phi(1),
            ParamGroup::Theta(0),
            ParamGroup::Theta(1),
        ]
        .iter()
        .map(|&g| (g, bundle.store.group_snapshot(g)))
        .collect();
        train_epoch_broadcast(&mut bundle, &mut optimizer, &batches, 0).unwrap();
        for (group, snapshot) in before {
            assert_ne!(
                bundle.store.group_snapshot(group),
                snapshot,
                "{group:?} should have been updated"
            );
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let cfg = tiny_config(19);
        let mut bundle = ModelBundle::<f32>::build(&cfg).unwrap();
        let mut optimizer = Adam::new(&bundle.store, cfg.train.learning_rate);
        let id = bundle.store.lookup("enc.embed.proj.w").unwrap();
        bundle.store.value_mut(id).fill(f32::NAN);
        let batches = synth_batches(&cfg, 2, 4);
        let err = train_epoch_targeted(&mut bundle, &mut optimizer, &batches, 0, 3).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 3, batch: 0, .. }), "{err}");
    }

    #[test]
    fn full_run_alternates_targets_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        synth::write_dataset(&data_root, Split::Train, 4, 20, 9).unwrap();

        let mut cfg = tiny_config(23);
        cfg.data.root = data_root;
        cfg.train.epochs = 4;
        let out = dir.path().join("run");
        let artifacts = run_training(&cfg, &out).unwrap();

        let targets: Vec<&str> = artifacts.stats.iter().map(|s| s.target.as_str()).collect();
        assert_eq!(targets, vec!["0", "1", "0", "1"]);
        assert!(artifacts.checkpoint.exists());
        assert!(artifacts.latest.exists());

        let curve = std::fs::read_to_string(&artifacts.curve).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines[0], "epoch,target,loss,psnr,ms_ssim");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[2].starts_with("1,1,"));

        // The final archive restores to exactly the trained parameters.
        let (restored, config) = load_bundle(&artifacts.checkpoint).unwrap();
        assert_eq!(config.train.epochs, 4);
        let trained = run_training(&cfg, &dir.path().join("run2")).unwrap();
        let again = load_bundle(&trained.checkpoint).unwrap().0;
        assert_eq!(store_bytes(&restored.store), store_bytes(&again.store));
    }

    #[test]
    fn broadcast_mode_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        synth::write_dataset(&data_root, Split::Train, 2, 16, 31).unwrap();
        let mut cfg = tiny_config(29);
        cfg.data.root = data_root;
        cfg.train.mode = "broadcast".into();
        cfg.train.epochs = 2;
        let artifacts = run_training(&cfg, &dir.path().join("run")).unwrap();
        assert_eq!(artifacts.stats.len(), 2);
        assert!(artifacts.stats.iter().all(|s| s.target == "broadcast"));
    }
}
