//! Desk-scale multi-user image semantic communication toolkit.
//!
//! One shared transmitter encodes an image into channel symbols whose count
//! adapts to a per-link compression ratio and signal-to-noise conditions; two
//! receiver classes — a deep high-capability decoder and a lightweight
//! low-capability decoder — reconstruct the image after a simulated noisy
//! channel. Training alternates between the receivers so the shared encoder
//! serves both, and reconstruction quality is judged by PSNR and multi-scale
//! structural similarity.

pub mod autodiff;
pub mod channel;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod channel_codec;
pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod nn;
pub mod semantic_codec;
pub mod seeding;
pub mod training;

pub use autodiff::{Scalar, Tape, Var};
pub use channel::{ChannelModel, ChannelState, ChannelSymbols, Demand};
pub use imaging::{DatasetSpec, ImageTensor, Split};
pub use metrics::{MsSsimConfig, SsimConfig};
