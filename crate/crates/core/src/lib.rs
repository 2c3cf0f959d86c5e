//! Binary classification of multimodal volumetric scans whose slice counts
//! vary per modality.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod network;
pub mod objective;
pub mod selftest;
pub mod synth;
pub mod training;

pub use augment::{AugmentConfig, TtaPlan};
pub use config::PipelineConfig;
pub use data::{Label, Manifest, Modality, Scan, Slice, Volume};
pub use error::{Error, Result};
pub use evaluation::{macro_f1, FoldReport};
pub use network::{BackboneKind, BtdNet, ModelConfig, Topology};
pub use objective::LossConfig;
pub use synth::SynthConfig;
pub use training::{FoldSplit, TrainConfig, TrainSetup};
