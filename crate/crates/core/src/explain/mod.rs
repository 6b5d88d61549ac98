//! Visual explanations for trained classifiers: Grad-CAM heatmaps, LIME
//! superpixel attributions, and overlay rendering.
//!
//! Grad-CAM backpropagates a one-hot class score to a named spatial layer,
//! averages the gradient per channel into weights, and takes the ReLU of
//! the weighted channel sum as a coarse localization map, upsampled to the
//! input size and max-normalized. LIME segments the image into
//! superpixels, perturbs random subsets of them, and fits a locally
//! weighted ridge surrogate whose largest coefficients name the most
//! influential segments per class.
//!
//! Explanations are independent per image; all entry points take the model
//! read-only, so callers may fan out across images freely.

mod gradcam;
mod lime;
mod render;

use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::BackboneError;
use crate::nn::NnError;

pub use gradcam::{grad_cam, grad_cam_on_graph, HeatMap};
pub use lime::{
    lime_explain, slic_segments, Classifier, LimeConfig, MaskFill, ModelClassifier,
    SegmentWeight, SuperpixelExplanation,
};
pub use render::{
    explanation_panel, heatmap_overlay, save_png, superpixel_overlay, to_rgb_image, OverlayStyle,
};

/// Errors raised while producing or rendering explanations.
#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown layer {layer:?} in {graph:?}; spatial layers include: {candidates}")]
    UnknownLayer {
        layer: String,
        graph: String,
        candidates: String,
    },
    #[error("layer {layer:?} has per-sample shape {shape:?}; Grad-CAM needs a [C, H, W] feature map")]
    NotSpatial { layer: String, shape: Vec<usize> },
    #[error("target class {class} is out of range for {n_classes} classes")]
    BadTarget { class: usize, n_classes: usize },
    #[error("image shape {got:?} does not match the expected {expected:?}")]
    ImageShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values in the heatmap for layer {0:?}; the model weights may be corrupt")]
    NonFinite(String),
    #[error("invalid explanation config: {0}")]
    BadConfig(String),
    #[error("inference failed after {done}/{total} masked samples: {detail}")]
    Inference {
        done: usize,
        total: usize,
        detail: String,
    },
    #[error("cannot write image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Nn(#[from] NnError),
}
