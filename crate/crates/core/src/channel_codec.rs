//! Channel codec conditioned on channel quality and network demand: a stack
//! of noise-fusion gating modules with pairwise skip connections, a bank of
//! rate heads realizing discrete compression ratios, and mirrored per-user
//! decoders that invert the rate projection.

use crate::autodiff::{Scalar, Var};
use crate::channel::{snr_to_sigma, Demand};
use crate::nn::{Init, Linear, ParamGroup, ParamTape};
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelCodecError {
    #[error("compression ratio must be a positive fraction no greater than one, got {num}/{den}")]
    BadRatio { num: u32, den: u32 },
    #[error("cannot parse {0:?} as a ratio of the form \"3/64\"")]
    UnparsableRatio(String),
    #[error("ratio {num}/{den} does not divide source length {n} into a whole symbol count")]
    NonIntegerRate { num: u32, den: u32, n: usize },
    #[error("the rate bank must hold at least one level, in ascending ratio order")]
    BadBank,
    #[error("rate level index {index} out of range for a bank of {len}")]
    BadLevel { index: usize, len: usize },
    #[error("expected {expected} channel symbols for this rate and geometry, got {got}")]
    SymbolCountMismatch { expected: usize, got: usize },
    #[error("noise fusion needs at least one module and a positive hidden width")]
    BadFusionConfig,
}

/// One discrete compression level: emitted symbols per source value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CbrLevel {
    num: u32,
    den: u32,
}

impl CbrLevel {
    pub fn new(num: u32, den: u32) -> Result<Self, ChannelCodecError> {
        if num == 0 || den == 0 || num > den {
            return Err(ChannelCodecError::BadRatio { num, den });
        }
        Ok(CbrLevel { num, den })
    }

    /// Parses the `"3/64"` form.
    pub fn parse(text: &str) -> Result<Self, ChannelCodecError> {
        let bad = || ChannelCodecError::UnparsableRatio(text.to_string());
        let (n, d) = text.trim().split_once('/').ok_or_else(bad)?;
        let num: u32 = n.trim().parse().map_err(|_| bad())?;
        let den: u32 = d.trim().parse().map_err(|_| bad())?;
        CbrLevel::new(num, den)
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.num, self.den)
    }

    pub fn ratio(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn parts(&self) -> (u32, u32) {
        (self.num, self.den)
    }

    /// Exact symbol count for a source of `n` values; the division must have
    /// no remainder so the advertised rate is met with zero slack.
    pub fn symbol_count(&self, n: usize) -> Result<usize, ChannelCodecError> {
        let scaled = n
            .checked_mul(self.num as usize)
            .ok_or(ChannelCodecError::NonIntegerRate {
                num: self.num,
                den: self.den,
                n,
            })?;
        if scaled % self.den as usize != 0 {
            return Err(ChannelCodecError::NonIntegerRate {
                num: self.num,
                den: self.den,
                n,
            });
        }
        Ok(scaled / self.den as usize)
    }
}

/// The standard three-level bank, ascending.
pub fn default_cbr_bank() -> Vec<CbrLevel> {
    vec![
        CbrLevel::new(3, 64).unwrap(),
        CbrLevel::new(4, 64).unwrap(),
        CbrLevel::new(5, 64).unwrap(),
    ]
}

/// Maps network demand to an index into an ascending rate bank: high demand
/// picks the shortest signal (lowest ratio), low demand the longest, normal
/// the middle.
pub fn cbr_select(demand: Demand, bank_len: usize) -> usize {
    debug_assert!(bank_len > 0);
    match demand {
        Demand::High => 0,
        Demand::Normal => bank_len / 2,
        Demand::Low => bank_len - 1,
    }
}

/// Size and skip layout of the noise-fusion stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseFusionConfig {
    pub num_modules: usize,
    pub hidden: usize,
    /// Modules spanned by each identity skip (2 = skips around pairs).
    pub skip_span: usize,
}

impl Default for NoiseFusionConfig {
    fn default() -> Self {
        NoiseFusionConfig {
            num_modules: 7,
            hidden: 16,
            skip_span: 2,
        }
    }
}

impl NoiseFusionConfig {
    pub fn validate(&self) -> Result<(), ChannelCodecError> {
        if self.num_modules == 0 || self.hidden == 0 || self.skip_span == 0 {
            return Err(ChannelCodecError::BadFusionConfig);
        }
        Ok(())
    }
}

/// One noise-fusion module: a three-layer network turns the noise descriptor
/// `[sigma, sigma^2, snr_db]` into a per-channel gate in (0,1) that scales
/// every token.
pub struct NoiseGate {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl NoiseGate {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        hidden: usize,
        channels: usize,
    ) -> Self {
        NoiseGate {
            fc1: Linear::new(init, &format!("{name}.fc1"), group, 3, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), group, hidden, hidden, true),
            fc3: Linear::new(init, &format!("{name}.fc3"), group, hidden, channels, true),
        }
    }

    /// The `(channels,)` gate row for a given channel quality.
    pub fn gate<T: Scalar>(&self, pt: &ParamTape<'_, T>, snr_db: f64) -> Var {
        let tape = pt.tape;
        // Clamp so the noiseless sentinel (infinite SNR) keeps the
        // descriptor finite; 100 dB is already indistinguishable from clean.
        let snr_db = snr_db.clamp(-100.0, 100.0);
        let sigma = snr_to_sigma(snr_db);
        let descriptor = ArrayD::from_shape_vec(
            IxDyn(&[1, 3]),
            vec![
                T::from_f64(sigma),
                T::from_f64(sigma * sigma),
                T::from_f64(snr_db),
            ],
        )
        .expect("static shape");
        let mut h = tape.leaf(descriptor);
        h = self.fc1.forward(pt, h);
        h = tape.relu(h);
        h = self.fc2.forward(pt, h);
        h = tape.relu(h);
        h = self.fc3.forward(pt, h);
        let squashed = tape.sigmoid(h);
        let channels = tape.value(squashed).shape()[1];
        tape.reshape(squashed, &[channels])
    }

    /// Applies the gate multiplicatively to `(tokens, channels)` features.
    pub fn apply<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var, snr_db: f64) -> Var {
        let gate = self.gate(pt, snr_db);
        pt.tape.mul_row(x, gate)
    }
}

/// Runs a module stack with identity skips added around consecutive groups
/// of `span` modules. Leftover modules that do not fill a group run plainly:
/// at the tail for the encoder layout, at the head for the mirrored decoder
/// layout (`mirrored = true`).
fn run_gated_stack<T: Scalar>(
    pt: &ParamTape<'_, T>,
    modules: &[NoiseGate],
    mut x: Var,
    snr_db: f64,
    span: usize,
    mirrored: bool,
) -> Var {
    let len = modules.len();
    let rem = len % span;
    let (group_start, group_end) = if mirrored { (rem, len) } else { (0, len - rem) };
    for module in &modules[..group_start] {
        x = module.apply(pt, x, snr_db);
    }
    let mut i = group_start;
    while i < group_end {
        let mut h = x;
        for module in &modules[i..i + span] {
            h = module.apply(pt, h, snr_db);
        }
        x = pt.tape.add(x, h);
        i += span;
    }
    for module in &modules[group_end..] {
        x = module.apply(pt, x, snr_db);
    }
    x
}

/// Shared channel encoder: noise-fusion stack, rate-head bank, power
/// normalization.
pub struct ChannelEncoder {
    modules: Vec<NoiseGate>,
    heads: Vec<Linear>,
    bank: Vec<CbrLevel>,
    channels: usize,
    pixels_per_token: usize,
    skip_span: usize,
}

impl ChannelEncoder {
    /// Builds encoder parameters (group `Beta`). `pixels_per_token` is the
    /// squared downsampling factor of the semantic encoder; each head
    /// projects a token to `ratio * 3 * pixels_per_token` symbols so the
    /// total output meets the rate exactly for any image size.
    pub fn build<T: Scalar>(
        init: &mut Init<'_, T>,
        config: &NoiseFusionConfig,
        channels: usize,
        pixels_per_token: usize,
        bank: Vec<CbrLevel>,
    ) -> Result<Self, ChannelCodecError> {
        config.validate()?;
        if bank.is_empty() || bank.windows(2).any(|p| p[1].ratio() <= p[0].ratio()) {
            return Err(ChannelCodecError::BadBank);
        }
        let group = ParamGroup::Beta;
        let modules = (0..config.num_modules)
            .map(|m| NoiseGate::new(init, &format!("chenc.mod{m}"), group, config.hidden, channels))
            .collect();
        let mut heads = Vec::with_capacity(bank.len());
        for (i, level) in bank.iter().enumerate() {
            let per_token = level.symbol_count(3 * pixels_per_token)?;
            heads.push(Linear::new(
                init,
                &format!("chenc.head{i}"),
                group,
                channels,
                per_token,
                true,
            ));
        }
        Ok(ChannelEncoder {
            modules,
            heads,
            bank,
            channels,
            pixels_per_token,
            skip_span: config.skip_span,
        })
    }

    pub fn bank(&self) -> &[CbrLevel] {
        &self.bank
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn level_for_demand(&self, demand: Demand) -> usize {
        cbr_select(demand, self.bank.len())
    }

    /// Symbols one token contributes at a rate level.
    pub fn per_token_symbols(&self, level: usize) -> Result<usize, ChannelCodecError> {
        let lv = self
            .bank
            .get(level)
            .ok_or(ChannelCodecError::BadLevel {
                index: level,
                len: self.bank.len(),
            })?;
        lv.symbol_count(3 * self.pixels_per_token)
    }

    /// Total symbol count for a token grid at a rate level.
    pub fn symbol_count(&self, tokens: usize, level: usize) -> Result<usize, ChannelCodecError> {
        Ok(tokens * self.per_token_symbols(level)?)
    }

    /// Tape forward: `(tokens, channels)` features to a power-normalized
    /// `(k,)` symbol vector at the selected rate level.
    pub fn forward<T: Scalar>(
        &self,
        pt: &ParamTape<'_, T>,
        features: Var,
        snr_db: f64,
        level: usize,
    ) -> Result<Var, ChannelCodecError> {
        let per_token = self.per_token_symbols(level)?;
        let tape = pt.tape;
        let fused = run_gated_stack(pt, &self.modules, features, snr_db, self.skip_span, false);
        let projected = self.heads[level].forward(pt, fused);
        let tokens = tape.value(projected).shape()[0];
        let flat = tape.reshape(projected, &[tokens * per_token]);
        // Normalize to unit mean power on the tape so training sees the
        // constraint the channel assumes.
        let sq = tape.square(flat);
        let mean = tape.mean(sq);
        let rms = tape.sqrt(mean);
        let one = tape.scalar(T::one());
        let inv = tape.div(one, rms);
        Ok(tape.mul_scalar_var(flat, inv))
    }
}

/// Per-user channel decoder: inverse rate head, then the mirrored
/// noise-fusion stack with its gating applied on the output side (first
/// module unpaired, pairs after).
pub struct ChannelDecoder {
    inverse_heads: Vec<Linear>,
    modules: Vec<NoiseGate>,
    bank: Vec<CbrLevel>,
    channels: usize,
    pixels_per_token: usize,
    skip_span: usize,
}

impl ChannelDecoder {
    /// Builds decoder parameters in `group` (one of the `Phi` groups).
    pub fn build<T: Scalar>(
        init: &mut Init<'_, T>,
        config: &NoiseFusionConfig,
        channels: usize,
        pixels_per_token: usize,
        bank: Vec<CbrLevel>,
        group: ParamGroup,
    ) -> Result<Self, ChannelCodecError> {
        config.validate()?;
        if bank.is_empty() || bank.windows(2).any(|p| p[1].ratio() <= p[0].ratio()) {
            return Err(ChannelCodecError::BadBank);
        }
        let prefix = format!("{}.chdec", group.label());
        let mut inverse_heads = Vec::with_capacity(bank.len());
        for (i, level) in bank.iter().enumerate() {
            let per_token = level.symbol_count(3 * pixels_per_token)?;
            inverse_heads.push(Linear::new(
                init,
                &format!("{prefix}.head{i}"),
                group,
                per_token,
                channels,
                true,
            ));
        }
        let modules = (0..config.num_modules)
            .map(|m| NoiseGate::new(init, &format!("{prefix}.mod{m}"), group, config.hidden, channels))
            .collect();
        Ok(ChannelDecoder {
            inverse_heads,
            modules,
            bank,
            channels,
            pixels_per_token,
            skip_span: config.skip_span,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn per_token_symbols(&self, level: usize) -> Result<usize, ChannelCodecError> {
        let lv = self
            .bank
            .get(level)
            .ok_or(ChannelCodecError::BadLevel {
                index: level,
                len: self.bank.len(),
            })?;
        lv.symbol_count(3 * self.pixels_per_token)
    }

    /// Tape forward: `(k,)` received symbols back to a `(tokens, channels)`
    /// feature estimate.
    pub fn forward<T: Scalar>(
        &self,
        pt: &ParamTape<'_, T>,
        symbols: Var,
        snr_db: f64,
        level: usize,
        tokens: usize,
    ) -> Result<Var, ChannelCodecError> {
        let per_token = self.per_token_symbols(level)?;
        let tape = pt.tape;
        let got = tape.value(symbols).len();
        let expected = tokens * per_token;
        if got != expected {
            return Err(ChannelCodecError::SymbolCountMismatch { expected, got });
        }
        let grid = tape.reshape(symbols, &[tokens, per_token]);
        let features = self.inverse_heads[level].forward(pt, grid);
        Ok(run_gated_stack(pt, &self.modules, features, snr_db, self.skip_span, true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::rand_array;
    use crate::autodiff::Tape;
    use crate::nn::{ParamStore, ParamTape};

    fn small_config() -> NoiseFusionConfig {
        NoiseFusionConfig {
            num_modules: 7,
            hidden: 8,
            skip_span: 2,
        }
    }

    fn build_pair(
        channels: usize,
        seed: u64,
    ) -> (ParamStore<f64>, ChannelEncoder, ChannelDecoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let enc = ChannelEncoder::build(
            &mut init,
            &small_config(),
            channels,
            64,
            default_cbr_bank(),
        )
        .unwrap();
        let dec = ChannelDecoder::build(
            &mut init,
            &small_config(),
            channels,
            64,
            default_cbr_bank(),
            ParamGroup::Phi(0),
        )
        .unwrap();
        (store, enc, dec)
    }

    #[test]
    fn ratios_parse_and_count_symbols_exactly() {
        let lv = CbrLevel::parse("3/64").unwrap();
        assert_eq!(lv.label(), "3/64");
        assert_eq!(lv.symbol_count(12288).unwrap(), 576);
        assert_eq!(CbrLevel::parse("4/64").unwrap().symbol_count(12288).unwrap(), 768);
        assert_eq!(CbrLevel::parse(" 5/64 ").unwrap().symbol_count(12288).unwrap(), 960);
        assert!(CbrLevel::parse("five/64").is_err());
        assert!(CbrLevel::parse("5").is_err());
        assert!(CbrLevel::new(0, 64).is_err());
        assert!(CbrLevel::new(65, 64).is_err());
        // 100*3/64 is not an integer: the exact-rate contract must reject it.
        assert!(matches!(
            CbrLevel::new(3, 64).unwrap().symbol_count(100),
            Err(ChannelCodecError::NonIntegerRate { .. })
        ));
    }

    #[test]
    fn demand_maps_to_expected_rates() {
        let bank = default_cbr_bank();
        assert_eq!(bank[cbr_select(Demand::High, bank.len())].label(), "3/64");
        assert_eq!(bank[cbr_select(Demand::Normal, bank.len())].label(), "4/64");
        assert_eq!(bank[cbr_select(Demand::Low, bank.len())].label(), "5/64");
    }

    #[test]
    fn all_ones_gate_is_the_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 3);
        let gate = NoiseGate::new(&mut init, "g", ParamGroup::Beta, 8, 6);
        // Zero final weights and a large positive bias saturate the squash
        // at exactly 1.0 in double precision.
        store.value_mut(gate.fc3.w).fill(0.0);
        store.value_mut(gate.fc3.b.unwrap()).fill(40.0);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let x = tape.leaf(rand_array(&[5, 6], 1, -2.0, 2.0));
        let y = gate.apply(&pt, x, 4.0);
        assert_eq!(tape.value_owned(y), tape.value_owned(x));
    }

    #[test]
    fn gate_depends_on_snr() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 5);
        let gate = NoiseGate::new(&mut init, "g", ParamGroup::Beta, 8, 4);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let x = tape.leaf(rand_array(&[3, 4], 2, -1.0, 1.0));
        let lo = tape.value_owned(gate.apply(&pt, x, 0.0));
        let hi = tape.value_owned(gate.apply(&pt, x, 10.0));
        assert_ne!(lo, hi, "the gate must respond to channel quality");
        assert_eq!(lo.shape(), &[3, 4], "gating preserves shape");
    }

    #[test]
    fn encoder_emits_exact_symbol_counts() {
        let (store, enc, _) = build_pair(8, 11);
        // 64 tokens of 64 pixels each: n = 64*64*3 = 12288.
        assert_eq!(enc.symbol_count(64, 0).unwrap(), 576);
        assert_eq!(enc.symbol_count(64, 1).unwrap(), 768);
        assert_eq!(enc.symbol_count(64, 2).unwrap(), 960);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let features = tape.leaf(rand_array(&[64, 8], 4, -1.0, 1.0));
        for (level, expect) in [(0usize, 576), (1, 768), (2, 960)] {
            let symbols = enc.forward(&pt, features, 5.0, level).unwrap();
            assert_eq!(tape.value(symbols).shape(), &[expect]);
        }
        assert!(matches!(
            enc.symbol_count(64, 3),
            Err(ChannelCodecError::BadLevel { .. })
        ));
    }

    #[test]
    fn encoder_output_has_unit_mean_power() {
        let (store, enc, _) = build_pair(8, 13);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let features = tape.leaf(rand_array(&[16, 8], 9, -1.0, 1.0));
        let symbols = enc.forward(&pt, features, 3.0, 1).unwrap();
        let v = tape.value_owned(symbols);
        let power = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((power - 1.0).abs() < 1e-9, "mean power {power}");
    }

    #[test]
    fn encoder_is_deterministic() {
        let (store, enc, _) = build_pair(8, 17);
        let arr = rand_array(&[16, 8], 3, -1.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let pt = ParamTape::new(&store, &tape);
            let features = tape.leaf(arr.clone());
            let symbols = enc.forward(&pt, features, 2.0, 0).unwrap();
            tape.value_owned(symbols)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decode_restores_feature_grid_shape() {
        let (store, enc, dec) = build_pair(8, 19);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let features = tape.leaf(rand_array(&[64, 8], 6, -1.0, 1.0));
        let symbols = enc.forward(&pt, features, 6.0, 1).unwrap();
        let restored = dec.forward(&pt, symbols, 6.0, 1, 64).unwrap();
        let v = tape.value_owned(restored);
        assert_eq!(v.shape(), &[64, 8]);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn decode_rejects_mismatched_lengths() {
        let (store, _, dec) = build_pair(8, 23);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let symbols = tape.leaf(rand_array(&[100], 1, -1.0, 1.0));
        assert!(matches!(
            dec.forward(&pt, symbols, 4.0, 1, 64),
            Err(ChannelCodecError::SymbolCountMismatch {
                expected: 768,
                got: 100
            })
        ));
    }

    #[test]
    fn gradients_flow_through_channel_to_both_codecs() {
        let (store, enc, dec) = build_pair(4, 29);
        let tape = Tape::new();
        let pt = ParamTape::new(&store, &tape);
        let features = tape.leaf(rand_array(&[16, 4], 8, -1.0, 1.0));
        let sent = enc.forward(&pt, features, 4.0, 2).unwrap();
        // Additive channel perturbation, untracked: gradients pass straight
        // through to the transmitted symbols.
        let noise = rand_array(&[tape.value(sent).len()], 99, -0.1, 0.1);
        let received = tape.add_const(sent, &noise);
        let restored = dec.forward(&pt, received, 4.0, 2, 16).unwrap();
        let sq = tape.square(restored);
        let loss = tape.mean(sq);
        let mut grads = tape.backward(loss);
        let input_grad = grads.take(features).expect("input gradient");
        assert!(input_grad.iter().any(|&g| g != 0.0));
        let collected = pt.collect_gradients(&mut grads);
        let mut beta = 0.0;
        let mut phi = 0.0;
        let mut head_params = 0usize;
        for (id, g) in &collected {
            let norm: f64 = g.iter().map(|&v| v * v).sum();
            match store.group(*id) {
                ParamGroup::Beta => beta += norm,
                ParamGroup::Phi(0) => phi += norm,
                _ => {}
            }
            if store.name(*id).contains("head") {
                head_params += 1;
            }
        }
        assert!(beta > 0.0, "encoder parameters must receive gradient");
        assert!(phi > 0.0, "decoder parameters must receive gradient");
        // Only the selected rate head (and its inverse) are engaged: 2 weights
        // + 2 biases.
        assert_eq!(head_params, 4, "exactly one head pair should be bound");
    }
}
