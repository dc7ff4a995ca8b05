//! Synthetic mmWave V2I scenes, labels, the multimodal beam/blockage/pose
//! network, its training loop, evaluation metrics and LiDAR mapping.

pub mod config;
pub mod dataset;
pub mod error;
pub mod labeling;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod training;

pub use config::RunConfig;
pub use dataset::{Dataset, Manifest};
pub use error::{CoreError, Result};
pub use labeling::{LabelConfig, LabelSet};
pub use metrics::{MetricReport, Predictions};
pub use model::{FusionNet, Modality, ModelConfig, NormStats, Variant};
pub use simulator::{Simulator, Snapshot};
pub use training::{Split, SplitSpec};
