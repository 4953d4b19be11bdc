//! Signed Supermask training: networks whose frozen random weights are
//! masked by learned ternary values in `{-1, 0, +1}`.
//!
//! Mask scores `M` are real-valued and quantized with two fixed thresholds;
//! gradients pass straight through the quantizer. The crate covers tensors
//! and kernels, initialization (including the ELUS rule), masking, layers,
//! SGD, dataset loading, ternary CSR export, and mask analytics.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod masking;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use analysis::{EpochMetrics, FilterMap, RunArchive, Summary};
pub use config::{DatasetKind, RawConfig, TrainConfig};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use init::{Distribution, ElusRule, FanMode, InitSpec, Scheme};
pub use layers::{
    build_architecture, build_network, Architecture, Layer, MaskInit, Network, NetworkInit,
    ThresholdSpec, TrainMode,
};
pub use masking::{MaskCounts, MaskMode, MaskState};
pub use optim::{SgdConfig, SgdState};
pub use rng::{SeededRng, Stream};
pub use sparse::{Magnitude, TernaryCSR};
pub use tensor::Tensor;
