//! Optic disc/cup segmentation under boundary label noise.
//!
//! The pipeline has two stages. An ensemble of differently seeded networks is
//! trained on the noisy annotations until their mean disc/cup Dice reaches a
//! threshold; their predictions become pseudo-labels, and every pixel on which
//! all pseudo-labels agree is treated as clean ([`mpggd`]). A student network
//! is then trained with cross-entropy on the clean pixels and an
//! uncertainty-gated consistency term against an EMA teacher on the noisy
//! pixels ([`noise_aware`], [`trainer`]).

pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod mpggd;
pub mod noise_aware;
pub mod tensor;
pub mod trainer;

pub use datasets::{Dataset, ImageSample, LabelMask, NUM_CLASSES};
pub use error::{Error, Result};
pub use evaluate::MetricsReport;
pub use model::{ArchDescriptor, ParamSet, ProbMap};
pub use mpggd::{PixelPartition, PseudoLabelSet};
pub use noise_aware::{NoiseAwareConfig, UncertaintyMap};
pub use tensor::{Real, Tensor3};
pub use trainer::{Recipe, TrainState};
