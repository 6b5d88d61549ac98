//! Backbone registry and universal classification head.
//!
//! Thirteen pre-trained convolutional feature extractors are available
//! under fixed string ids. Every model gets the same head: global
//! average pooling, one hidden dense layer with relu, optional dropout,
//! and a softmax output, so ensemble members differ only in their
//! backbone.

mod builders;

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use crate::nn::{
    load_weight_file, Activation, Graph, GraphBuilder, NnError, NodeId, WeightEntry,
};

/// Environment variable naming the directory of converted weight files.
pub const WEIGHTS_DIR_ENV: &str = "POXSCREEN_WEIGHTS_DIR";

/// Errors raised while resolving or assembling models.
#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("unknown backbone id '{id}'; known ids: {known}")]
    UnknownBackbone { id: String, known: String },
    #[error(
        "no weight file for '{id}' at {path}; set {WEIGHTS_DIR_ENV} to a directory of \
         converted .pxwt weight files or build with random initialization"
    )]
    WeightsUnavailable { id: String, path: PathBuf },
    #[error("weight file for '{id}' does not cover backbone parameters: {missing:?}")]
    IncompleteWeights { id: String, missing: Vec<String> },
    #[error("invalid head config: {0}")]
    BadHead(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Static description of one registry entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BackboneSpec {
    /// Registry key, e.g. "xception".
    pub id: &'static str,
    /// Human-readable name used in report tables.
    pub display_name: &'static str,
    /// Expected spatial input size (height, width).
    pub input_size: (usize, usize),
    /// Node name of the last convolutional feature map, the default
    /// Grad-CAM source.
    pub feature_source: &'static str,
    /// Pretrained weight tag.
    pub pretrained_weights: &'static str,
}

const REGISTRY: [BackboneSpec; 13] = [
    spec("vgg16", "VGG-16", "block5_pool"),
    spec("vgg19", "VGG-19", "block5_pool"),
    spec("resnet50", "ResNet-50", "conv5_block3_out"),
    spec("resnet101", "ResNet-101", "conv5_block3_out"),
    spec("inceptionresnetv2", "Inception-ResNet-v2", "conv_7b_ac"),
    spec("mobilenetv2", "MobileNetV2", "out_relu"),
    spec("inceptionv3", "InceptionV3", "mixed10"),
    spec("xception", "Xception", "block14_sepconv2_act"),
    spec("efficientnetb0", "EfficientNet-B0", "top_activation"),
    spec("efficientnetb1", "EfficientNet-B1", "top_activation"),
    spec("efficientnetb2", "EfficientNet-B2", "top_activation"),
    spec("densenet121", "DenseNet-121", "relu"),
    spec("densenet169", "DenseNet-169", "relu"),
];

const fn spec(
    id: &'static str,
    display_name: &'static str,
    feature_source: &'static str,
) -> BackboneSpec {
    BackboneSpec {
        id,
        display_name,
        input_size: (150, 150),
        feature_source,
        pretrained_weights: "imagenet",
    }
}

/// The 13 registry entries in fixed report order.
pub fn list_backbones() -> &'static [BackboneSpec] {
    &REGISTRY
}

/// Look up one registry entry by id.
pub fn find_backbone(id: &str) -> Result<&'static BackboneSpec, BackboneError> {
    REGISTRY
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| BackboneError::UnknownBackbone {
            id: id.to_string(),
            known: REGISTRY
                .iter()
                .map(|s| s.id)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

/// Configuration of the universal classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Pooling applied to the backbone feature map.
    pub pooling: String,
    /// Width of the hidden dense layer.
    pub hidden_units: usize,
    /// Activation of the hidden dense layer.
    pub hidden_activation: String,
    /// Dropout rate between the hidden layer and the output, in [0, 1).
    pub dropout_rate: f32,
    /// Number of output classes.
    pub n_classes: usize,
    /// Activation of the output layer.
    pub output_activation: String,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pooling: "global_average".to_string(),
            hidden_units: 128,
            hidden_activation: "relu".to_string(),
            dropout_rate: 0.0,
            n_classes: 4,
            output_activation: "softmax".to_string(),
        }
    }
}

impl HeadConfig {
    /// Check invariants and the supported layer vocabulary.
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.pooling != "global_average" {
            return Err(BackboneError::BadHead(format!(
                "unsupported pooling '{}'; only 'global_average' is implemented",
                self.pooling
            )));
        }
        if self.hidden_units < 1 {
            return Err(BackboneError::BadHead("hidden_units must be >= 1".into()));
        }
        if self.hidden_activation != "relu" {
            return Err(BackboneError::BadHead(format!(
                "unsupported hidden activation '{}'; only 'relu' is implemented",
                self.hidden_activation
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(BackboneError::BadHead(
                "dropout_rate must lie in [0, 1)".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(BackboneError::BadHead("n_classes must be >= 2".into()));
        }
        if self.output_activation != "softmax" && self.output_activation != "normalized-exponential"
        {
            return Err(BackboneError::BadHead(format!(
                "unsupported output activation '{}'",
                self.output_activation
            )));
        }
        Ok(())
    }
}

/// How network parameters are filled at build time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightInit {
    /// Pretrained backbone weights from a converted weight file; the
    /// head is initialized from `seed`. With `dir` unset the directory
    /// comes from `POXSCREEN_WEIGHTS_DIR`.
    Imagenet { seed: u64, dir: Option<PathBuf> },
    /// Fully random network, reproducible from `seed`. Useful for
    /// tests and ablations without weight files.
    Random { seed: u64 },
}

impl WeightInit {
    fn seed(&self) -> u64 {
        match self {
            WeightInit::Imagenet { seed, .. } | WeightInit::Random { seed } => *seed,
        }
    }
}

/// Which parameter tensors train and which stay frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainableMask {
    pub frozen_backbone: bool,
    pub trainable_tensors: usize,
    pub frozen_tensors: usize,
    pub trainable_scalars: usize,
    pub total_scalars: usize,
}

/// A ready-to-train or ready-to-score network: backbone plus head.
#[derive(Debug)]
pub struct ModelHandle {
    spec: &'static BackboneSpec,
    head: HeadConfig,
    graph: Graph,
    feature: NodeId,
    logits: NodeId,
    output: NodeId,
    backbone_scalars: usize,
    frozen_backbone: bool,
}

/// Node names used by the universal head.
pub const HEAD_POOL: &str = "avg_pool";
pub const HEAD_DENSE: &str = "head_dense";
pub const HEAD_ACT: &str = "head_dense_relu";
pub const HEAD_DROPOUT: &str = "head_dropout";
pub const HEAD_LOGITS: &str = "predictions";
pub const HEAD_OUTPUT: &str = "predictions_softmax";

/// Assemble a model: backbone feature extractor, then global average
/// pooling, a hidden dense layer with relu, optional dropout, and a
/// softmax output of `head.n_classes` units.
pub fn build_model(
    backbone_id: &str,
    head: &HeadConfig,
    freeze_backbone: bool,
    init: &WeightInit,
) -> Result<ModelHandle, BackboneError> {
    let spec = find_backbone(backbone_id)?;
    head.validate()?;

    let mut b = GraphBuilder::new(spec.id, Some(init.seed()));
    let input = b.input("input", &[3, spec.input_size.0, spec.input_size.1])?;
    let feature = builders::build_feature(&mut b, spec.id, input)?;
    debug_assert_eq!(b.node_name(feature), spec.feature_source);
    let backbone_scalars = b.n_scalars();
    if freeze_backbone {
        b.freeze_existing();
    }

    let pooled = b.global_avg_pool(HEAD_POOL, feature)?;
    let hidden = b.dense(HEAD_DENSE, pooled, head.hidden_units)?;
    let mut x = b.activation(HEAD_ACT, hidden, Activation::Relu)?;
    if head.dropout_rate > 0.0 {
        x = b.dropout(HEAD_DROPOUT, x, head.dropout_rate, false)?;
    }
    let logits = b.dense(HEAD_LOGITS, x, head.n_classes)?;
    let output = b.activation(HEAD_OUTPUT, logits, Activation::Softmax)?;
    let mut graph = b.finish(output)?;

    if let WeightInit::Imagenet { dir, .. } = init {
        let dir = match dir {
            Some(d) => d.clone(),
            None => std::env::var_os(WEIGHTS_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_default(),
        };
        let path = dir.join(format!("{}.pxwt", spec.id));
        if !path.is_file() {
            return Err(BackboneError::WeightsUnavailable {
                id: spec.id.to_string(),
                path,
            });
        }
        let entries = load_weight_file(&path)?;
        let missing = graph.import_entries(entries)?;
        let head_prefixes = [HEAD_DENSE, HEAD_LOGITS];
        let unexpected: Vec<String> = missing
            .into_iter()
            .filter(|m| !head_prefixes.iter().any(|p| m.starts_with(p)))
            .collect();
        if !unexpected.is_empty() {
            return Err(BackboneError::IncompleteWeights {
                id: spec.id.to_string(),
                missing: unexpected,
            });
        }
    }

    Ok(ModelHandle {
        spec,
        head: head.clone(),
        graph,
        feature,
        logits,
        output,
        backbone_scalars,
        frozen_backbone: freeze_backbone,
    })
}

impl ModelHandle {
    pub fn spec(&self) -> &'static BackboneSpec {
        self.spec
    }

    pub fn head(&self) -> &HeadConfig {
        self.head_config()
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    /// Node producing the backbone's final feature map.
    pub fn feature_node(&self) -> NodeId {
        self.feature
    }

    /// Node producing pre-softmax class scores.
    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    /// Node producing class probabilities.
    pub fn output_node(&self) -> NodeId {
        self.output
    }

    /// Total scalar parameter count, head included.
    pub fn parameter_count(&self) -> usize {
        self.graph.n_scalars()
    }

    /// Scalar parameter count of the backbone alone.
    pub fn backbone_parameter_count(&self) -> usize {
        self.backbone_scalars
    }

    pub fn trainable_mask(&self) -> TrainableMask {
        let mut trainable_tensors = 0;
        let mut frozen_tensors = 0;
        for pid in 0..self.graph.n_param_tensors() {
            if self.graph.param(pid).trainable {
                trainable_tensors += 1;
            } else {
                frozen_tensors += 1;
            }
        }
        TrainableMask {
            frozen_backbone: self.frozen_backbone,
            trainable_tensors,
            frozen_tensors,
            trainable_scalars: self.graph.n_trainable_scalars(),
            total_scalars: self.graph.n_scalars(),
        }
    }

    pub fn frozen_backbone(&self) -> bool {
        self.frozen_backbone
    }

    /// Run inference on a batch in channel-first layout
    /// `[n, 3, height, width]` and return `[n, n_classes]` probability
    /// rows.
    pub fn predict_probs(&self, batch: ArrayD<f32>) -> Result<Array2<f32>, BackboneError> {
        let acts = self.graph.forward_eval(batch)?;
        let probs = acts.values[self.output]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("probability rows")
            .to_owned();
        Ok(probs)
    }

    /// Export every parameter tensor by name.
    pub fn export_entries(&self) -> Vec<WeightEntry> {
        self.graph.export_entries()
    }

    /// Load parameter tensors by name; every graph parameter must be
    /// covered (this restores full checkpoints, not backbone files).
    pub fn import_all(&mut self, entries: Vec<WeightEntry>) -> Result<(), BackboneError> {
        let missing = self.graph.import_entries(entries)?;
        if !missing.is_empty() {
            return Err(BackboneError::IncompleteWeights {
                id: self.spec.id.to_string(),
                missing,
            });
        }
        Ok(())
    }

    /// Save all parameters to a weight file.
    pub fn save_weights(&self, path: &Path) -> Result<(), BackboneError> {
        Ok(crate::nn::save_weight_file(path, &self.export_entries())?)
    }

    /// Load all parameters from a weight file.
    pub fn load_weights(&mut self, path: &Path) -> Result<(), BackboneError> {
        let entries = load_weight_file(path)?;
        self.import_all(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn registry_matches_report_order() {
        let specs = list_backbones();
        assert_eq!(specs.len(), 13);
        assert_eq!(specs[0].id, "vgg16");
        assert_eq!(specs[7].id, "xception");
        assert_eq!(specs[7].feature_source, "block14_sepconv2_act");
        assert!(specs.iter().all(|s| s.input_size == (150, 150)));
        assert!(specs.iter().all(|s| s.pretrained_weights == "imagenet"));
        let ids: Vec<_> = specs.iter().map(|s| s.id).collect();
        assert_eq!(
            ids,
            vec![
                "vgg16",
                "vgg19",
                "resnet50",
                "resnet101",
                "inceptionresnetv2",
                "mobilenetv2",
                "inceptionv3",
                "xception",
                "efficientnetb0",
                "efficientnetb1",
                "efficientnetb2",
                "densenet121",
                "densenet169"
            ]
        );
    }

    #[test]
    fn unknown_backbone_is_a_registry_error() {
        let err = find_backbone("resnet152").unwrap_err();
        assert!(matches!(err, BackboneError::UnknownBackbone { .. }));
        assert!(err.to_string().contains("resnet50"));
        let err = build_model(
            "resnet152",
            &HeadConfig::default(),
            false,
            &WeightInit::Random { seed: 0 },
        )
        .unwrap_err();
        assert!(matches!(err, BackboneError::UnknownBackbone { .. }));
    }

    #[test]
    fn head_config_validation() {
        let ok = HeadConfig::default();
        assert!(ok.validate().is_ok());
        assert!(HeadConfig {
            hidden_units: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(HeadConfig {
            n_classes: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(HeadConfig {
            dropout_rate: 1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(HeadConfig {
            pooling: "max".into(),
            ..ok.clone()
        }
        .validate()
        .is_err());
        // The long-form output activation name is accepted.
        assert!(HeadConfig {
            output_activation: "normalized-exponential".into(),
            ..ok
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn missing_weight_file_is_a_resolvable_error() {
        let err = build_model(
            "vgg16",
            &HeadConfig::default(),
            false,
            &WeightInit::Imagenet {
                seed: 0,
                dir: Some(std::path::PathBuf::from("/nonexistent/weights")),
            },
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vgg16.pxwt"), "{msg}");
        assert!(msg.contains(WEIGHTS_DIR_ENV), "{msg}");
    }

    #[test]
    fn head_is_universal_and_output_is_a_simplex() {
        // A cheap backbone keeps this test fast; deeper ones are
        // covered by the manifest suite.
        let head = HeadConfig::default();
        let handle = build_model("vgg16", &head, false, &WeightInit::Random { seed: 9 })
            .expect("build");
        assert_eq!(handle.spec().id, "vgg16");
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 150, 150]), |ix| {
            ((ix[1] * 31 + ix[2] * 7 + ix[3]) % 255) as f32
        });
        let probs = handle.predict_probs(x.clone()).expect("forward");
        assert_eq!(probs.dim(), (2, 4));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        // Same seed, same head weights; the head node names and widths
        // are fixed regardless of backbone.
        let again = build_model("vgg16", &head, false, &WeightInit::Random { seed: 9 }).unwrap();
        assert_eq!(
            handle.export_entries(),
            again.export_entries(),
            "same seed must reproduce identical parameters"
        );
        let two_class = HeadConfig {
            n_classes: 2,
            ..HeadConfig::default()
        };
        let mut frozen = build_model("vgg16", &two_class, true, &WeightInit::Random { seed: 1 })
            .expect("build");
        let probs = frozen.predict_probs(x).expect("forward");
        assert_eq!(probs.dim(), (2, 2));
        let mask = frozen.trainable_mask();
        assert!(mask.frozen_backbone);
        // Exactly the four head tensors stay trainable.
        assert_eq!(mask.trainable_tensors, 4);
        assert_eq!(
            mask.trainable_scalars,
            512 * 128 + 128 + 128 * 2 + 2,
            "frozen vgg16 leaves only head parameters trainable"
        );
        let _ = frozen.graph_mut();
    }

    #[test]
    fn checkpoint_round_trip_restores_probabilities() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pxwt");
        let handle = build_model(
            "vgg16",
            &HeadConfig::default(),
            false,
            &WeightInit::Random { seed: 3 },
        )
        .unwrap();
        handle.save_weights(&path).unwrap();
        let mut other = build_model(
            "vgg16",
            &HeadConfig::default(),
            false,
            &WeightInit::Random { seed: 4 },
        )
        .unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 150, 150]), |ix| (ix[3] % 17) as f32 / 16.0);
        let before = other.predict_probs(x.clone()).unwrap();
        other.load_weights(&path).unwrap();
        let after = other.predict_probs(x.clone()).unwrap();
        let original = handle.predict_probs(x).unwrap();
        assert_ne!(before, after);
        assert_eq!(after, original);
    }
}
