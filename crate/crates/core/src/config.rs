//! TOML-backed run configuration: dataset location, model shape, channel
//! codec layout, channel simulation, loss weights, and the training loop.
//! Every field has a default so a config file only needs to override what it
//! changes.

use crate::channel::ChannelModel;
use crate::channel_codec::{CbrLevel, ChannelCodecError, NoiseFusionConfig};
use crate::losses::{HybridLossConfig, LossError};
use crate::metrics::MsSsimConfig;
use crate::semantic_codec::{CodecError, ModelGeometry};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Model(#[from] CodecError),
    #[error(transparent)]
    ChannelCodec(#[from] ChannelCodecError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{0}")]
    Invalid(String),
}

/// Dataset section (`[data]`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub crop_size: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            crop_size: 64,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Model shape section (`[model]`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pixels per square patch (4 means 2x2).
    pub patch: usize,
    pub window: usize,
    pub enc_depths: Vec<usize>,
    pub hcd_depths: Vec<usize>,
    pub lcd_depths: Vec<usize>,
    pub widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = ModelGeometry::default();
        ModelConfig {
            patch: g.patch,
            window: g.window,
            enc_depths: g.enc_depths,
            hcd_depths: g.hcd_depths,
            lcd_depths: g.lcd_depths,
            widths: g.widths,
        }
    }
}

impl ModelConfig {
    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry {
            patch: self.patch,
            window: self.window,
            enc_depths: self.enc_depths.clone(),
            hcd_depths: self.hcd_depths.clone(),
            lcd_depths: self.lcd_depths.clone(),
            widths: self.widths.clone(),
            head_dim: 16,
        }
    }
}

/// Channel codec section (`[codec]`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Number of noise-fusion modules.
    #[serde(rename = "K")]
    pub num_modules: usize,
    /// Ascending compression levels, e.g. `["3/64", "4/64", "5/64"]`.
    pub cbr_levels: Vec<String>,
    /// Modules per skip connection.
    pub skip_span: usize,
    /// Hidden width of each gate's three-layer network.
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        let f = NoiseFusionConfig::default();
        CodecConfig {
            num_modules: f.num_modules,
            cbr_levels: vec!["3/64".into(), "4/64".into(), "5/64".into()],
            skip_span: f.skip_span,
            hidden: f.hidden,
        }
    }
}

impl CodecConfig {
    pub fn fusion(&self) -> NoiseFusionConfig {
        NoiseFusionConfig {
            num_modules: self.num_modules,
            hidden: self.hidden,
            skip_span: self.skip_span,
        }
    }

    pub fn bank(&self) -> Result<Vec<CbrLevel>, ChannelCodecError> {
        self.cbr_levels.iter().map(|s| CbrLevel::parse(s)).collect()
    }
}

/// Channel simulation section (`[channel]`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// `"awgn"` or `"rayleigh"`.
    pub model: String,
    /// SNR values (dB) sampled during training.
    pub train_snrs: Vec<f64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            model: "awgn".into(),
            train_snrs: vec![1.0, 3.0, 5.0, 7.0],
        }
    }
}

pub fn parse_channel_model(name: &str) -> Result<ChannelModel, ConfigError> {
    match name {
        "awgn" => Ok(ChannelModel::Awgn),
        "rayleigh" => Ok(ChannelModel::Rayleigh),
        other => Err(ConfigError::Invalid(format!(
            "unknown channel model {other:?}, expected \"awgn\" or \"rayleigh\""
        ))),
    }
}

impl ChannelConfig {
    pub fn channel_model(&self) -> Result<ChannelModel, ConfigError> {
        parse_channel_model(&self.model)
    }
}

/// Objective used to train the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Hybrid,
    Mse,
}

/// Loss section (`[loss]`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub ms_scales: usize,
    /// `"hybrid"` (default) or `"mse"` for the plain squared-error baseline.
    pub kind: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        let h = HybridLossConfig::default();
        LossConfig {
            gamma: h.gamma,
            epsilon: h.epsilon,
            ms_scales: h.ms_ssim.num_scales,
            kind: "hybrid".into(),
        }
    }
}

impl LossConfig {
    pub fn hybrid(&self) -> HybridLossConfig {
        HybridLossConfig {
            gamma: self.gamma,
            epsilon: self.epsilon,
            ms_ssim: MsSsimConfig {
                num_scales: self.ms_scales,
                ..MsSsimConfig::default()
            },
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind, ConfigError> {
        match self.kind.as_str() {
            "hybrid" => Ok(LossKind::Hybrid),
            "mse" => Ok(LossKind::Mse),
            other => Err(ConfigError::Invalid(format!(
                "unknown loss kind {other:?}, expected \"hybrid\" or \"mse\""
            ))),
        }
    }
}

/// Training section (`[train]`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `"alternating"` or `"broadcast"`.
    pub mode: String,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 50,
            learning_rate: 0.00005,
            mode: "alternating".into(),
            seed: 0,
        }
    }
}

/// Scheduling of encoder targets across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Even epochs train the user-0 path, odd epochs the user-1 path.
    Alternating,
    /// Every epoch trains both paths from one shared untargeted forward.
    Broadcast,
}

impl TrainSection {
    pub fn train_mode(&self) -> Result<TrainMode, ConfigError> {
        match self.mode.as_str() {
            "alternating" => Ok(TrainMode::Alternating),
            "broadcast" => Ok(TrainMode::Broadcast),
            other => Err(ConfigError::Invalid(format!(
                "unknown train mode {other:?}, expected \"alternating\" or \"broadcast\""
            ))),
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub channel: ChannelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Cross-section consistency checks, run after parsing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let geometry = self.model.geometry();
        geometry.validate()?;
        let factor = geometry.downsample_factor()?;
        if self.data.crop_size == 0 || self.data.crop_size % factor != 0 {
            return Err(ConfigError::Invalid(format!(
                "data.crop_size {} must be a positive multiple of the downsampling factor {factor}",
                self.data.crop_size
            )));
        }
        if self.data.batch_size == 0 {
            return Err(ConfigError::Invalid("data.batch_size must be positive".into()));
        }
        self.codec.fusion().validate()?;
        let bank = self.codec.bank()?;
        if bank.is_empty() || bank.windows(2).any(|p| p[1].ratio() <= p[0].ratio()) {
            return Err(ConfigError::Invalid(
                "codec.cbr_levels must be non-empty and ascending".into(),
            ));
        }
        // Every level must divide a token's pixel budget into whole symbols.
        let pixels_per_token = factor * factor;
        for level in &bank {
            level.symbol_count(3 * pixels_per_token)?;
        }
        self.channel.channel_model()?;
        if self.channel.train_snrs.is_empty() {
            return Err(ConfigError::Invalid("channel.train_snrs must be non-empty".into()));
        }
        if self.channel.train_snrs.iter().any(|s| !s.is_finite()) {
            return Err(ConfigError::Invalid("channel.train_snrs must be finite".into()));
        }
        self.loss.hybrid().validate()?;
        self.loss.loss_kind()?;
        if self.train.epochs == 0 {
            return Err(ConfigError::Invalid("train.epochs must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("train.learning_rate must be positive".into()));
        }
        self.train.train_mode()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = AppConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.learning_rate, 0.00005);
        assert_eq!(cfg.channel.train_snrs, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(cfg.codec.num_modules, 7);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = AppConfig::from_toml(
            r#"
            [data]
            root = "images"
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.root, PathBuf::from("images"));
        assert_eq!(cfg.data.crop_size, 64);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.widths, vec![48, 96, 192, 192]);
    }

    #[test]
    fn codec_section_uses_uppercase_module_count_key() {
        let cfg = AppConfig::from_toml("[codec]\nK = 3\n").unwrap();
        assert_eq!(cfg.codec.num_modules, 3);
        assert!(cfg.to_toml().unwrap().contains("K = 3"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(AppConfig::from_toml("[data]\nroots = \"typo\"\n").is_err());
        assert!(AppConfig::from_toml("[extra]\nx = 1\n").is_err());
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        let err = AppConfig::from_toml("[data]\ncrop_size = 30\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");

        assert!(AppConfig::from_toml("[channel]\nmodel = \"fso\"\n").is_err());
        assert!(AppConfig::from_toml("[channel]\ntrain_snrs = []\n").is_err());
        assert!(AppConfig::from_toml("[train]\nmode = \"joint\"\n").is_err());
        assert!(AppConfig::from_toml("[loss]\nkind = \"l1\"\n").is_err());
        assert!(AppConfig::from_toml("[codec]\ncbr_levels = [\"5/64\", \"3/64\"]\n").is_err());
        assert!(AppConfig::from_toml("[train]\nepochs = 0\n").is_err());
    }

    #[test]
    fn derived_domain_configs_match_sections() {
        let cfg = AppConfig::default();
        let g = cfg.model.geometry();
        assert_eq!(g, ModelGeometry::default());
        assert_eq!(cfg.codec.fusion(), NoiseFusionConfig::default());
        let bank = cfg.codec.bank().unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank[0].label(), "3/64");
        assert_eq!(cfg.channel.channel_model().unwrap(), ChannelModel::Awgn);
        assert_eq!(cfg.loss.loss_kind().unwrap(), LossKind::Hybrid);
        assert_eq!(cfg.train.train_mode().unwrap(), TrainMode::Alternating);
        let h = cfg.loss.hybrid();
        assert_eq!(h.gamma, 0.84);
        assert_eq!(h.epsilon, 0.1);
        assert_eq!(h.ms_ssim.num_scales, 3);
    }
}
