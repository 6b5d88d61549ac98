//! Transfer-learning ensemble toolkit for four-class pox-lesion screening.
//!
//! The crate covers the full pipeline: a class-foldered image corpus is
//! indexed and split into repeated random 70/30 train/test folds
//! ([`dataset`]), pre-trained convolutional backbones from a fixed
//! 13-entry registry are fine-tuned with one universal classification
//! head ([`backbone`], [`train`]), per-sample probability matrices are
//! archived and scored ([`archive`], [`metrics`]), model outputs are
//! fused into a single decision by max-confidence voting ([`fusion`]),
//! and individual predictions are explained with Grad-CAM heatmaps and
//! LIME superpixel attributions ([`explain`]).
//!
//! Everything is deterministic under a fixed seed: fold plans, weight
//! initialization, augmentation streams, and LIME sampling all derive
//! from explicit seeds and reproduce bit-for-bit.

pub mod archive;
pub mod backbone;
pub mod dataset;
pub mod explain;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod train;

pub use archive::{ExperimentArchive, ProbabilityMatrix};
pub use backbone::{BackboneSpec, HeadConfig, ModelHandle, WeightInit};
pub use dataset::{AugmentationConfig, ClassLabel, DatasetIndex, FoldPlan, ImageRecord};
pub use explain::{HeatMap, LimeConfig, SuperpixelExplanation};
pub use fusion::{FusionInput, FusionMode, PredictionVector};
pub use metrics::{ClassCounts, ConfusionMatrix, MetricsReport};
pub use report::ConsolidatedReport;
pub use train::{FineTuneConfig, ModelArtifact, TrainingHistory};
