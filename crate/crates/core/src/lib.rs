//! CT segmentation lab.
//!
//! End-to-end pieces of a desk-scale CT lesion-segmentation study:
//! Hounsfield-window normalization into overlapping channels, a small
//! from-scratch U-Net with explicit backpropagation, per-slide confusion
//! metrics, a sequential train/retrain/test harness that measures how
//! retraining on new data erodes performance on earlier data, synthetic
//! phantom volumes to drive it all, and a point-cloud export for external
//! 3D viewers.

pub mod metrics;
pub mod phantom;
pub mod pointcloud;
pub mod preprocess;
pub mod segnet;
pub mod transfer;
pub mod volume;

pub use metrics::{ConfusionCounts, SliceMetrics};
pub use preprocess::{ChannelBank, Sample, SlideId, WindowSpec};
pub use segnet::{ParamSet, TrainConfig, TrainLog, UNetConfig};
pub use transfer::{ExperimentPlan, ModelLineage, ResultsMatrix};
pub use volume::{HounsfieldVolume, MaskRole, MaskVolume, ValueKind, Volume, VolumeHeader};
