//! Multi-scan state-space segmentation: scan permutations, a selective SSM
//! kernel, the MS2D/VSS blocks, a U-shaped segmenter with hand-written
//! gradients, training, a synthetic phantom dataset and rank statistics.

pub mod data;
pub mod error;
pub mod flops;
pub mod init;
pub mod layers;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod ms2d;
pub mod optim;
pub mod params;
pub mod scan_catalog;
pub mod segnet;
pub mod ssm;
pub mod stats;
pub mod tensor;
pub mod tensor_io;
pub mod training;

pub use data::{Dataset, PhantomSpec, Sample, SplitAssignment};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use metrics::Aggregation;
pub use ms2d::{Ms2dParams, VssBlockParams};
pub use params::Parameterized;
pub use scan_catalog::{ExperimentConfig, GridShape, ScanId, ScanPermutation};
pub use segnet::{ModelConfig, ModelParams};
pub use ssm::SsmStreamParams;
pub use stats::{FriedmanOptions, FriedmanResult, ScoreMatrix, TieMethod};
pub use tensor::{FeatureMap, Tensor, TokenSequence};
pub use training::{MetricsRecord, TrainConfig};
