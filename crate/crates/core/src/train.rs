//! Fine-tuning harness: per-fold training under the fixed regimen
//! (Adam at 1e-4, batch 16, per-epoch learning-rate decay, early
//! stopping on test loss), probability export, and a resumable driver
//! over every (backbone, fold) cell of an experiment.
//!
//! Training streams augmented batches from the fold's train split and
//! evaluates the untouched test split after every epoch; the reported
//! "test" series doubles as the early-stopping validation signal, which
//! is optimistic but matches the protocol being reproduced. The weights
//! saved to the model artifact are those of the best-monitored epoch,
//! not the last one.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::{ArchiveError, CellStatus, ExperimentArchive, ProbabilityMatrix};
use crate::backbone::{
    build_model, find_backbone, BackboneError, HeadConfig, ModelHandle, WeightInit,
};
use crate::dataset::{
    load_eval_batch, AugmentationConfig, AugmentationStream, Batch, ClassLabel, DatasetError,
    DatasetIndex, Fold, FoldPlan, ImageRecord,
};
use crate::nn::{
    accuracy_from_probs, cross_entropy, softmax_ce_grad_logits, Adam, AdamConfig, BackwardSpec,
    Graph, NnError, WeightEntry,
};

/// Weight file inside a model artifact directory.
pub const ARTIFACT_WEIGHTS_FILE: &str = "weights.pxwt";
/// JSON sidecar inside a model artifact directory.
pub const ARTIFACT_SIDECAR_FILE: &str = "artifact.json";

/// Inference batch size used when exporting probabilities.
const PREDICT_BATCH: usize = 16;

/// Failures raised by training, prediction, or the experiment driver.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("fold {fold} out of range; the plan has {len} folds")]
    FoldOutOfRange { fold: usize, len: usize },
    #[error(
        "training diverged at epoch {epoch} (lr {lr:.3e}): loss is not finite; \
         lower the learning rate or inspect the input images"
    )]
    Diverged { epoch: usize, lr: f64 },
    #[error(
        "estimated {estimated_mib} MiB of activations for batch_size {batch_size} exceeds \
         the {budget_mib} MiB budget; try batch_size {suggested} or raise memory_budget_mib"
    )]
    OutOfMemory {
        batch_size: usize,
        estimated_mib: u64,
        budget_mib: u64,
        suggested: usize,
    },
    #[error("only {loaded} of {expected} evaluation records could be decoded")]
    UndecodableRecords { expected: usize, loaded: usize },
    #[error("artifact integrity: {0}")]
    Integrity(String),
    #[error("malformed json at {path}: {detail}")]
    Json { path: PathBuf, detail: String },
    #[error("i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Where initial network parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Converted pretrained backbone weights plus a seeded head.
    Imagenet,
    /// Fully random network; for tests and from-scratch ablations.
    Random,
}

/// Hyperparameters of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    /// Optimizer name; only "adam" is supported.
    pub optimizer: String,
    /// Learning rate at epoch 0.
    pub initial_lr: f64,
    /// Images per gradient step.
    pub batch_size: usize,
    /// Hard cap on epochs when early stopping never triggers.
    pub max_epochs: usize,
    /// Per-epoch multiplicative learning-rate factor in (0, 1].
    pub lr_decay: f64,
    /// Epochs without improvement tolerated before stopping.
    pub early_stop_patience: usize,
    /// Monitored series; the held-out loss ("val_loss").
    pub early_stop_monitor: String,
    /// Master seed for initialization, augmentation, and dropout.
    pub seed: u64,
    /// Initial parameter source.
    pub weights: WeightSource,
    /// Directory of converted weight files; defaults to the
    /// `POXSCREEN_WEIGHTS_DIR` environment variable.
    pub weights_dir: Option<PathBuf>,
    /// Train only the head, leaving backbone parameters fixed.
    pub freeze_backbone: bool,
    /// Stochastic transform ranges for the training stream; the rescale
    /// factor also applies to evaluation batches.
    pub augmentation: AugmentationConfig,
    /// Refuse configs whose estimated activation memory exceeds this.
    pub memory_budget_mib: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            optimizer: "adam".to_string(),
            initial_lr: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            lr_decay: 0.95,
            early_stop_patience: 10,
            early_stop_monitor: "val_loss".to_string(),
            seed: 0,
            weights: WeightSource::Imagenet,
            weights_dir: None,
            freeze_backbone: false,
            augmentation: AugmentationConfig::default(),
            memory_budget_mib: 8192,
        }
    }
}

impl FineTuneConfig {
    /// Check the hyperparameter invariants.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.optimizer != "adam" {
            return Err(TrainError::BadConfig(format!(
                "unsupported optimizer '{}'; only 'adam' is implemented",
                self.optimizer
            )));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "initial_lr must be positive and finite, got {}",
                self.initial_lr
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::BadConfig("max_epochs must be >= 1".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.early_stop_patience < 1 {
            return Err(TrainError::BadConfig(
                "early_stop_patience must be >= 1".into(),
            ));
        }
        let monitor = self.early_stop_monitor.as_str();
        if !matches!(monitor, "val_loss" | "validation_loss" | "validation loss") {
            return Err(TrainError::BadConfig(format!(
                "unsupported early_stop_monitor '{monitor}'; the held-out loss \
                 ('val_loss') is the only monitored series"
            )));
        }
        if self.memory_budget_mib < 1 {
            return Err(TrainError::BadConfig(
                "memory_budget_mib must be >= 1".into(),
            ));
        }
        self.augmentation.validate()?;
        Ok(())
    }

    /// Realized learning rate at `epoch`: `initial_lr * lr_decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(epoch as i32)
    }

    /// Parameter initialization implied by this config.
    pub fn weight_init(&self) -> WeightInit {
        match self.weights {
            WeightSource::Imagenet => WeightInit::Imagenet {
                seed: self.seed,
                dir: self.weights_dir.clone(),
            },
            WeightSource::Random => WeightInit::Random { seed: self.seed },
        }
    }
}

/// Per-epoch training curves of one fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Realized learning rate per epoch.
    pub lr_schedule: Vec<f64>,
    /// Number of epochs actually run; every series has this length.
    pub stopped_epoch: usize,
    /// Epoch whose weights the artifact was restored to.
    pub best_epoch: usize,
}

impl TrainingHistory {
    fn record_epoch(
        &mut self,
        train_loss: f64,
        train_accuracy: f64,
        test_loss: f64,
        test_accuracy: f64,
        lr: f64,
    ) {
        self.train_loss.push(train_loss);
        self.train_accuracy.push(train_accuracy);
        self.test_loss.push(test_loss);
        self.test_accuracy.push(test_accuracy);
        self.lr_schedule.push(lr);
        self.stopped_epoch = self.lr_schedule.len();
    }

    /// Check the series-length and learning-rate invariants.
    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.stopped_epoch;
        if n == 0 {
            return Err(TrainError::BadConfig("history records no epochs".into()));
        }
        let lens = [
            self.train_loss.len(),
            self.train_accuracy.len(),
            self.test_loss.len(),
            self.test_accuracy.len(),
            self.lr_schedule.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(TrainError::BadConfig(format!(
                "per-epoch series lengths {lens:?} do not all equal stopped_epoch {n}"
            )));
        }
        if self.best_epoch >= n {
            return Err(TrainError::BadConfig(format!(
                "best_epoch {} outside the {} recorded epochs",
                self.best_epoch, n
            )));
        }
        if self.lr_schedule.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(TrainError::BadConfig(
                "lr_schedule holds a non-positive or non-finite rate".into(),
            ));
        }
        Ok(())
    }

    /// Whether `lr_schedule[e]` equals `initial_lr * decay^e` to 1e-12
    /// relative accuracy for every epoch.
    pub fn lr_schedule_is_exact(&self, initial_lr: f64, decay: f64) -> bool {
        self.lr_schedule.iter().enumerate().all(|(e, &lr)| {
            let expected = initial_lr * decay.powi(e as i32);
            (lr - expected).abs() <= 1e-12 * expected.abs()
        })
    }

    /// Serialize to pretty JSON at `path`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TrainError::Json {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load and validate a history written by [`TrainingHistory::save`].
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let history: TrainingHistory =
            serde_json::from_str(&text).map_err(|e| TrainError::Json {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        history.validate()?;
        Ok(history)
    }
}

/// Early-stopping bookkeeping for a loss-like metric (lower is better).
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Record one epoch's monitored value; true when it improved
    /// strictly on the best seen so far.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    /// Whether the patience budget is exhausted.
    pub fn should_stop(&self) -> bool {
        self.wait >= self.patience
    }

    /// Epoch of the best monitored value.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Best monitored value observed.
    pub fn best_value(&self) -> f64 {
        self.best
    }
}

/// Provenance sidecar stored next to an artifact's weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSidecar {
    pub backbone_id: String,
    pub head_config: HeadConfig,
    /// Digest of the full training configuration; resuming keys on it.
    pub train_config_digest: String,
    pub fold_id: usize,
    pub seed: u64,
    /// Intensity rescale applied at inference, copied from the training
    /// augmentation so preprocessing matches.
    #[serde(default = "default_rescale")]
    pub rescale: f32,
}

fn default_rescale() -> f32 {
    1.0 / 255.0
}

/// A fine-tuned model on disk: a weight file plus its JSON sidecar.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub dir: PathBuf,
    pub sidecar: ArtifactSidecar,
}

impl ModelArtifact {
    /// Path of the artifact's weight file.
    pub fn weights_path(&self) -> PathBuf {
        self.dir.join(ARTIFACT_WEIGHTS_FILE)
    }

    /// Write `model` and `sidecar` into `dir`, creating it.
    pub fn save(
        dir: &Path,
        model: &ModelHandle,
        sidecar: ArtifactSidecar,
    ) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        model.save_weights(&dir.join(ARTIFACT_WEIGHTS_FILE))?;
        let sidecar_path = dir.join(ARTIFACT_SIDECAR_FILE);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| TrainError::Json {
            path: sidecar_path.clone(),
            detail: e.to_string(),
        })?;
        fs::write(&sidecar_path, text).map_err(|source| TrainError::Io {
            path: sidecar_path,
            source,
        })?;
        Ok(ModelArtifact {
            dir: dir.to_path_buf(),
            sidecar,
        })
    }

    /// Open an artifact directory by reading its sidecar.
    pub fn open(dir: &Path) -> Result<Self, TrainError> {
        let sidecar_path = dir.join(ARTIFACT_SIDECAR_FILE);
        let text = fs::read_to_string(&sidecar_path).map_err(|source| TrainError::Io {
            path: sidecar_path.clone(),
            source,
        })?;
        let sidecar: ArtifactSidecar =
            serde_json::from_str(&text).map_err(|e| TrainError::Json {
                path: sidecar_path,
                detail: e.to_string(),
            })?;
        Ok(ModelArtifact {
            dir: dir.to_path_buf(),
            sidecar,
        })
    }

    /// Rebuild the network and load the fine-tuned weights.
    pub fn load_model(&self) -> Result<ModelHandle, TrainError> {
        let mut model = build_model(
            &self.sidecar.backbone_id,
            &self.sidecar.head_config,
            true,
            &WeightInit::Random {
                seed: self.sidecar.seed,
            },
        )?;
        model.load_weights(&self.weights_path())?;
        Ok(model)
    }
}

/// Digest identifying one (backbone, fold) training cell: the exact
/// split membership plus every semantically relevant hyperparameter.
/// The weight directory path is deliberately excluded; it names an
/// environment, not an experiment.
pub fn train_digest(
    backbone_id: &str,
    fold_id: usize,
    fold: &Fold,
    cfg: &FineTuneConfig,
    head: &HeadConfig,
) -> String {
    let payload = serde_json::json!({
        "backbone_id": backbone_id,
        "fold_id": fold_id,
        "train_ids": fold.train,
        "test_ids": fold.test,
        "optimizer": cfg.optimizer,
        "initial_lr": cfg.initial_lr,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "lr_decay": cfg.lr_decay,
        "early_stop_patience": cfg.early_stop_patience,
        "early_stop_monitor": cfg.early_stop_monitor,
        "seed": cfg.seed,
        "weights": cfg.weights,
        "freeze_backbone": cfg.freeze_backbone,
        "augmentation": cfg.augmentation,
        "head": head,
    });
    let mut hasher = Sha256::new();
    hasher.update(payload.to_string().as_bytes());
    format!("{:x}", hasher.finalize())
}

/// The dominant transient allocation is one batch of forward values
/// plus their gradients; refuse configs that plainly cannot fit.
fn check_memory(graph: &Graph, cfg: &FineTuneConfig) -> Result<(), TrainError> {
    let per_sample: u64 = (0..graph.n_nodes())
        .map(|id| graph.node_shape(id).iter().product::<usize>() as u64)
        .sum();
    let estimated_mib = per_sample * cfg.batch_size as u64 * 8 / (1 << 20);
    if estimated_mib > cfg.memory_budget_mib {
        let suggested =
            ((cfg.batch_size as u64 * cfg.memory_budget_mib / estimated_mib).max(1)) as usize;
        return Err(TrainError::OutOfMemory {
            batch_size: cfg.batch_size,
            estimated_mib,
            budget_mib: cfg.memory_budget_mib,
            suggested,
        });
    }
    Ok(())
}

/// Load un-augmented batches covering `records` in order, failing if
/// any image cannot be decoded.
fn load_eval_batches(
    records: &[&ImageRecord],
    n_classes: usize,
    target: (usize, usize),
    rescale: f32,
    batch: usize,
) -> Result<Vec<Batch>, TrainError> {
    let mut batches = Vec::new();
    let mut loaded = 0;
    for chunk in records.chunks(batch.max(1)) {
        let b = load_eval_batch(chunk, n_classes, target, rescale);
        loaded += b.record_ids.len();
        batches.push(b);
    }
    if loaded != records.len() {
        return Err(TrainError::UndecodableRecords {
            expected: records.len(),
            loaded,
        });
    }
    Ok(batches)
}

/// Mean loss and accuracy of `model` over pre-loaded batches.
fn evaluate(
    model: &ModelHandle,
    batches: &[Batch],
) -> Result<(f64, f64), TrainError> {
    let output = model.output_node();
    let (mut loss_sum, mut acc_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
    for batch in batches {
        let n = batch.record_ids.len();
        if n == 0 {
            continue;
        }
        let acts = model.graph().forward_eval(batch.images.clone().into_dyn())?;
        let probs = acts
            .value(output)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("probability rows");
        let labels = batch.labels.view();
        loss_sum += f64::from(cross_entropy(&probs, &labels)) * n as f64;
        acc_sum += f64::from(accuracy_from_probs(&probs, &labels)) * n as f64;
        seen += n;
    }
    if seen == 0 {
        return Err(TrainError::BadConfig(
            "evaluation split holds no decodable images".into(),
        ));
    }
    Ok((loss_sum / seen as f64, acc_sum / seen as f64))
}

/// Fine-tune `backbone_id` on one fold and save the best-epoch weights
/// as a model artifact under `artifact_dir`.
///
/// Every epoch streams freshly augmented training batches, then scores
/// the un-augmented test split; the test loss drives early stopping.
pub fn train_fold(
    backbone_id: &str,
    fold_id: usize,
    plan: &FoldPlan,
    index: &DatasetIndex,
    cfg: &FineTuneConfig,
    head: &HeadConfig,
    artifact_dir: &Path,
) -> Result<(ModelArtifact, TrainingHistory), TrainError> {
    cfg.validate()?;
    let fold = plan.fold(fold_id).ok_or(TrainError::FoldOutOfRange {
        fold: fold_id,
        len: plan.len(),
    })?;
    if fold.train.is_empty() || fold.test.is_empty() {
        return Err(TrainError::BadConfig(format!(
            "fold {fold_id} has an empty train or test split"
        )));
    }
    if head.n_classes != index.n_classes() {
        return Err(TrainError::BadConfig(format!(
            "head has {} classes but the dataset vocabulary has {}",
            head.n_classes,
            index.n_classes()
        )));
    }
    let train_records: Vec<ImageRecord> = index
        .resolve(&fold.train)?
        .into_iter()
        .cloned()
        .collect();
    let test_records = index.resolve(&fold.test)?;

    let mut model = build_model(backbone_id, head, cfg.freeze_backbone, &cfg.weight_init())?;
    check_memory(model.graph(), cfg)?;

    let input_size = model.spec().input_size;
    let n_classes = head.n_classes;
    let stream = AugmentationStream::new(
        train_records,
        n_classes,
        cfg.augmentation.clone(),
        input_size,
        cfg.batch_size,
        cfg.seed,
    )?;
    // The test split is deterministic, so its batches are loaded once
    // and reused every epoch.
    let eval_batches = load_eval_batches(
        &test_records,
        n_classes,
        input_size,
        cfg.augmentation.rescale,
        cfg.batch_size,
    )?;

    let logits = model.logits_node();
    let output = model.output_node();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.initial_lr as f32,
            ..AdamConfig::default()
        },
        model.graph().param_manifest().len(),
    );
    // Dropout draws come from a stream index no augmentation epoch can
    // reach, keeping the two sequences independent under one seed.
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(u64::MAX);

    let mut history = TrainingHistory::default();
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_weights: Option<Vec<WeightEntry>> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        for batch in stream.epoch(epoch) {
            let n = batch.record_ids.len();
            if n == 0 {
                continue;
            }
            let acts = model
                .graph_mut()
                .forward_train(batch.images.into_dyn(), &mut dropout_rng)?;
            let probs = acts
                .value(output)
                .view()
                .into_dimensionality::<Ix2>()
                .expect("probability rows");
            let labels = batch.labels.view();
            let batch_loss = f64::from(cross_entropy(&probs, &labels));
            if !batch_loss.is_finite() || probs.iter().any(|p| !p.is_finite()) {
                return Err(TrainError::Diverged { epoch, lr });
            }
            let batch_acc = f64::from(accuracy_from_probs(&probs, &labels));
            let seed_grad = softmax_ce_grad_logits(&probs, &labels).into_dyn();
            let grads = model.graph().backward(
                &acts,
                BackwardSpec {
                    seed: logits,
                    seed_grad,
                    param_grads: true,
                    node_grads: &[],
                },
            )?;
            adam.step(model.graph_mut(), &grads, lr as f32);
            loss_sum += batch_loss * n as f64;
            acc_sum += batch_acc * n as f64;
            seen += n;
        }
        if seen == 0 {
            return Err(TrainError::BadConfig(
                "training split holds no decodable images".into(),
            ));
        }
        let (test_loss, test_accuracy) = evaluate(&model, &eval_batches)?;
        if !test_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, lr });
        }
        let train_loss = loss_sum / seen as f64;
        let train_accuracy = acc_sum / seen as f64;
        history.record_epoch(train_loss, train_accuracy, test_loss, test_accuracy, lr);
        log::info!(
            "{backbone_id} fold{fold_id} epoch {epoch}: lr {lr:.3e} \
             train loss {train_loss:.4} acc {train_accuracy:.4} \
             test loss {test_loss:.4} acc {test_accuracy:.4}"
        );
        if stopper.observe(epoch, test_loss) {
            best_weights = Some(model.export_entries());
        }
        if stopper.should_stop() {
            log::info!(
                "{backbone_id} fold{fold_id}: stopping at epoch {epoch}, \
                 best test loss {:.4} at epoch {}",
                stopper.best_value(),
                stopper.best_epoch()
            );
            break;
        }
    }

    let snapshot = best_weights.expect("at least one epoch snapshots weights");
    model.import_all(snapshot)?;
    history.best_epoch = stopper.best_epoch();
    history.validate()?;

    let sidecar = ArtifactSidecar {
        backbone_id: backbone_id.to_string(),
        head_config: head.clone(),
        train_config_digest: train_digest(backbone_id, fold_id, fold, cfg, head),
        fold_id,
        seed: cfg.seed,
        rescale: cfg.augmentation.rescale,
    };
    let artifact = ModelArtifact::save(artifact_dir, &model, sidecar)?;
    Ok((artifact, history))
}

/// Run inference with a saved artifact over `records` (in the given
/// order, which callers take from the fold plan's test ids) and return
/// the per-sample probability matrix.
pub fn predict_probs(
    artifact: &ModelArtifact,
    records: &[&ImageRecord],
    vocab: &[ClassLabel],
    fold_id: usize,
) -> Result<ProbabilityMatrix, TrainError> {
    let sidecar = &artifact.sidecar;
    if fold_id != sidecar.fold_id {
        return Err(TrainError::Integrity(format!(
            "artifact was trained on fold {} but fold {fold_id} was requested",
            sidecar.fold_id
        )));
    }
    if vocab.len() != sidecar.head_config.n_classes {
        return Err(TrainError::Integrity(format!(
            "artifact predicts {} classes but the vocabulary has {}",
            sidecar.head_config.n_classes,
            vocab.len()
        )));
    }
    if let Some(record) = records.iter().find(|r| r.label.id >= vocab.len()) {
        return Err(TrainError::Integrity(format!(
            "record '{}' is labeled with class id {} outside the {}-class vocabulary",
            record.record_id,
            record.label.id,
            vocab.len()
        )));
    }
    if records.is_empty() {
        return Err(TrainError::BadConfig(
            "no records were given to predict".into(),
        ));
    }

    let model = artifact.load_model()?;
    let input_size = model.spec().input_size;
    let n_classes = vocab.len();
    let batches = load_eval_batches(
        records,
        n_classes,
        input_size,
        sidecar.rescale,
        PREDICT_BATCH,
    )?;

    let mut probs = Array2::<f64>::zeros((records.len(), n_classes));
    let mut sample_ids = Vec::with_capacity(records.len());
    let mut row = 0;
    for batch in batches {
        let out = model.predict_probs(batch.images.into_dyn())?;
        for (i, id) in batch.record_ids.iter().enumerate() {
            for j in 0..n_classes {
                probs[[row, j]] = f64::from(out[[i, j]]);
            }
            sample_ids.push(id.clone());
            row += 1;
        }
    }
    let true_labels = records.iter().map(|r| r.label.id).collect();
    let matrix = ProbabilityMatrix {
        model_id: sidecar.backbone_id.clone(),
        fold_id,
        sample_ids,
        probs,
        true_labels,
    };
    matrix.validate()?;
    Ok(matrix)
}

/// What one [`run_experiment`] invocation did per cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutcome {
    /// Cells trained in this invocation.
    pub trained: Vec<String>,
    /// Cells already complete under the current digest.
    pub skipped: Vec<String>,
    /// Cells that failed, with their error text.
    pub failed: Vec<(String, String)>,
}

/// Train every (backbone, fold) cell into the archive at `out`.
///
/// The run is resumable: cells whose manifest entry is complete under
/// the current configuration digest are skipped, and one cell's failure
/// is recorded in the manifest without stopping the others.
pub fn run_experiment(
    backbone_ids: &[String],
    plan: &FoldPlan,
    index: &DatasetIndex,
    cfg: &FineTuneConfig,
    head: &HeadConfig,
    out: &Path,
) -> Result<ExperimentOutcome, TrainError> {
    cfg.validate()?;
    for id in backbone_ids {
        find_backbone(id)?;
    }
    if plan.is_empty() {
        return Err(TrainError::BadConfig("the fold plan has no folds".into()));
    }
    let archive = ExperimentArchive::open(out)?;
    let mut outcome = ExperimentOutcome::default();
    for id in backbone_ids {
        for fold_id in 0..plan.len() {
            let fold = plan.fold(fold_id).expect("fold index in range");
            let digest = train_digest(id, fold_id, fold, cfg, head);
            let key = ExperimentArchive::cell_key(id, fold_id);
            if archive.cell_is_complete(id, fold_id, &digest) {
                log::info!("{key}: already complete, skipping");
                outcome.skipped.push(key);
                continue;
            }
            match run_cell(id, fold_id, plan, index, cfg, head, &archive) {
                Ok(()) => {
                    archive.update_cell(&key, CellStatus::Complete { digest })?;
                    outcome.trained.push(key);
                }
                Err(err) => {
                    log::error!("{key}: {err}");
                    archive.update_cell(
                        &key,
                        CellStatus::Failed {
                            digest,
                            error: err.to_string(),
                        },
                    )?;
                    outcome.failed.push((key, err.to_string()));
                }
            }
        }
    }
    Ok(outcome)
}

/// Train one cell and write its artifact, history, and probabilities.
fn run_cell(
    backbone_id: &str,
    fold_id: usize,
    plan: &FoldPlan,
    index: &DatasetIndex,
    cfg: &FineTuneConfig,
    head: &HeadConfig,
    archive: &ExperimentArchive,
) -> Result<(), TrainError> {
    let model_dir = archive.model_dir(backbone_id, fold_id);
    let (artifact, history) =
        train_fold(backbone_id, fold_id, plan, index, cfg, head, &model_dir)?;
    history.save(&archive.history_path(backbone_id, fold_id))?;
    let fold = plan.fold(fold_id).expect("fold index in range");
    let test_records = index.resolve(&fold.test)?;
    let matrix = predict_probs(&artifact, &test_records, &index.class_vocab, fold_id)?;
    archive.write_probs(&matrix)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use tempfile::TempDir;

    use super::*;
    use crate::dataset::{load_dataset, make_fold_plan, testutil, DEFAULT_VOCAB};

    /// Smallest registry entry, to keep training tests quick.
    const TEST_BACKBONE: &str = "mobilenetv2";

    fn tiny_corpus(per_class: usize) -> (TempDir, DatasetIndex) {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[per_class; 4], 32, 11);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        (dir, index)
    }

    fn quick_cfg() -> FineTuneConfig {
        FineTuneConfig {
            weights: WeightSource::Random,
            batch_size: 4,
            max_epochs: 2,
            seed: 5,
            ..FineTuneConfig::default()
        }
    }

    fn small_head() -> HeadConfig {
        HeadConfig {
            hidden_units: 8,
            ..HeadConfig::default()
        }
    }

    #[test]
    fn default_config_matches_the_training_regimen() {
        let cfg = FineTuneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.optimizer, "adam");
        assert_eq!(cfg.initial_lr, 1e-4);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.lr_decay, 0.95);
        assert_eq!(cfg.early_stop_patience, 10);
    }

    #[test]
    fn config_rejects_out_of_range_values() {
        let cases: Vec<(&str, FineTuneConfig)> = vec![
            (
                "zero lr",
                FineTuneConfig {
                    initial_lr: 0.0,
                    ..FineTuneConfig::default()
                },
            ),
            (
                "zero batch",
                FineTuneConfig {
                    batch_size: 0,
                    ..FineTuneConfig::default()
                },
            ),
            (
                "zero decay",
                FineTuneConfig {
                    lr_decay: 0.0,
                    ..FineTuneConfig::default()
                },
            ),
            (
                "decay above one",
                FineTuneConfig {
                    lr_decay: 1.5,
                    ..FineTuneConfig::default()
                },
            ),
            (
                "zero patience",
                FineTuneConfig {
                    early_stop_patience: 0,
                    ..FineTuneConfig::default()
                },
            ),
            (
                "zero epochs",
                FineTuneConfig {
                    max_epochs: 0,
                    ..FineTuneConfig::default()
                },
            ),
            (
                "unknown optimizer",
                FineTuneConfig {
                    optimizer: "sgd".into(),
                    ..FineTuneConfig::default()
                },
            ),
            (
                "unknown monitor",
                FineTuneConfig {
                    early_stop_monitor: "accuracy".into(),
                    ..FineTuneConfig::default()
                },
            ),
        ];
        for (what, cfg) in cases {
            assert!(
                matches!(cfg.validate(), Err(TrainError::BadConfig(_))),
                "{what} should be rejected"
            );
        }
    }

    #[test]
    fn lr_at_decays_multiplicatively_and_identity_decay_is_constant() {
        let cfg = FineTuneConfig::default();
        for e in 0..30 {
            let expected = 1e-4 * 0.95f64.powi(e as i32);
            assert!((cfg.lr_at(e) - expected).abs() <= 1e-12 * expected);
        }
        let flat = FineTuneConfig {
            lr_decay: 1.0,
            ..FineTuneConfig::default()
        };
        for e in 0..30 {
            assert_eq!(flat.lr_at(e), 1e-4);
        }
    }

    proptest! {
        #[test]
        fn early_stopper_restores_the_minimum_of_everything_seen(
            values in proptest::collection::vec(0.05f64..10.0, 1..40),
            patience in 1usize..5,
        ) {
            let mut stopper = EarlyStopper::new(patience);
            let mut seen = Vec::new();
            for (epoch, &v) in values.iter().enumerate() {
                stopper.observe(epoch, v);
                seen.push(v);
                if stopper.should_stop() {
                    break;
                }
            }
            let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(stopper.best_value(), min);
            prop_assert_eq!(seen[stopper.best_epoch()], min);
            // No value after the best one within the patience window
            // beats it, which is the restored-epoch guarantee.
            for v in seen.iter().skip(stopper.best_epoch() + 1) {
                prop_assert!(*v >= stopper.best_value());
            }
        }
    }

    #[test]
    fn history_roundtrips_and_validates_lengths() {
        let mut history = TrainingHistory::default();
        history.record_epoch(1.2, 0.4, 1.1, 0.5, 1e-4);
        history.record_epoch(0.9, 0.6, 1.0, 0.55, 9.5e-5);
        history.best_epoch = 1;
        history.validate().unwrap();
        assert!(history.lr_schedule_is_exact(1e-4, 0.95));

        let dir = TempDir::new().unwrap();
        let path = dir.path().join("history.json");
        history.save(&path).unwrap();
        let loaded = TrainingHistory::load(&path).unwrap();
        assert_eq!(loaded, history);

        let mut broken = history.clone();
        broken.test_loss.pop();
        assert!(broken.validate().is_err());
        broken = history.clone();
        broken.best_epoch = 2;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn train_digest_keys_on_config_and_split() {
        let fold = Fold {
            train: vec!["a".into(), "b".into()],
            test: vec!["c".into()],
        };
        let cfg = FineTuneConfig::default();
        let head = HeadConfig::default();
        let d1 = train_digest("xception", 0, &fold, &cfg, &head);
        let d2 = train_digest("xception", 0, &fold, &cfg, &head);
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 64);
        let reseeded = FineTuneConfig {
            seed: 1,
            ..FineTuneConfig::default()
        };
        assert_ne!(d1, train_digest("xception", 0, &fold, &reseeded, &head));
        assert_ne!(d1, train_digest("vgg16", 0, &fold, &cfg, &head));
        // The weight directory is an environment detail, not identity.
        let moved = FineTuneConfig {
            weights_dir: Some(PathBuf::from("/elsewhere")),
            ..FineTuneConfig::default()
        };
        assert_eq!(d1, train_digest("xception", 0, &fold, &moved, &head));
    }

    #[test]
    fn memory_guard_suggests_a_smaller_batch() {
        let (_dir, index) = tiny_corpus(2);
        let plan = make_fold_plan(&index, 1, 0.5, 3).unwrap();
        let cfg = FineTuneConfig {
            memory_budget_mib: 16,
            ..quick_cfg()
        };
        let err = train_fold(
            TEST_BACKBONE,
            0,
            &plan,
            &index,
            &cfg,
            &small_head(),
            &TempDir::new().unwrap().path().join("model"),
        )
        .unwrap_err();
        match err {
            TrainError::OutOfMemory {
                batch_size,
                suggested,
                ..
            } => {
                assert_eq!(batch_size, 4);
                assert!(suggested >= 1);
                assert!(err.to_string().contains("batch_size"));
            }
            other => panic!("expected an out-of-memory hint, got {other}"),
        }
    }

    #[test]
    fn train_fold_writes_artifact_history_and_ordered_probs() {
        let (_dir, index) = tiny_corpus(2);
        let plan = make_fold_plan(&index, 1, 0.5, 3).unwrap();
        let fold = plan.fold(0).unwrap().clone();
        let out = TempDir::new().unwrap();
        let model_dir = out.path().join("model");
        let cfg = quick_cfg();
        let head = small_head();

        let (artifact, history) =
            train_fold(TEST_BACKBONE, 0, &plan, &index, &cfg, &head, &model_dir).unwrap();

        assert!(model_dir.join(ARTIFACT_WEIGHTS_FILE).is_file());
        assert!(model_dir.join(ARTIFACT_SIDECAR_FILE).is_file());
        assert_eq!(history.stopped_epoch, 2);
        assert_eq!(history.train_loss.len(), 2);
        assert_eq!(history.test_accuracy.len(), 2);
        assert!(history.lr_schedule_is_exact(cfg.initial_lr, cfg.lr_decay));
        assert!(history.best_epoch < history.stopped_epoch);
        assert!(history
            .train_accuracy
            .iter()
            .chain(&history.test_accuracy)
            .all(|a| (0.0..=1.0).contains(a)));

        let test_records = index.resolve(&fold.test).unwrap();
        let matrix = predict_probs(&artifact, &test_records, &index.class_vocab, 0).unwrap();
        assert_eq!(matrix.len(), fold.test.len());
        assert_eq!(matrix.sample_ids, fold.test);
        assert_eq!(matrix.model_id, TEST_BACKBONE);

        // Inference is deterministic and the artifact reloads from disk.
        let again = predict_probs(&artifact, &test_records, &index.class_vocab, 0).unwrap();
        assert_eq!(matrix, again);
        let reopened = ModelArtifact::open(&model_dir).unwrap();
        assert_eq!(reopened.sidecar, artifact.sidecar);
        let third = predict_probs(&reopened, &test_records, &index.class_vocab, 0).unwrap();
        assert_eq!(matrix, third);

        // No test leakage: predicted ids are disjoint from the train split.
        let train_ids: BTreeSet<&str> = fold.train.iter().map(String::as_str).collect();
        assert!(matrix.sample_ids.iter().all(|id| !train_ids.contains(id.as_str())));
    }

    #[test]
    fn single_epoch_run_yields_unit_history() {
        let (_dir, index) = tiny_corpus(2);
        let plan = make_fold_plan(&index, 1, 0.5, 9).unwrap();
        let out = TempDir::new().unwrap();
        let cfg = FineTuneConfig {
            max_epochs: 1,
            ..quick_cfg()
        };
        let (artifact, history) = train_fold(
            TEST_BACKBONE,
            0,
            &plan,
            &index,
            &cfg,
            &small_head(),
            &out.path().join("model"),
        )
        .unwrap();
        assert_eq!(history.stopped_epoch, 1);
        assert_eq!(history.lr_schedule, vec![cfg.initial_lr]);
        assert!(artifact.weights_path().is_file());
    }

    #[test]
    fn non_finite_forward_reports_divergence() {
        let (_dir, index) = tiny_corpus(2);
        let plan = make_fold_plan(&index, 1, 0.5, 7).unwrap();
        let out = TempDir::new().unwrap();

        // A checkpoint poisoned with NaN, as a numerically exploded run
        // would leave behind; the first forward pass goes non-finite.
        let weights_dir = TempDir::new().unwrap();
        let donor = build_model(
            TEST_BACKBONE,
            &small_head(),
            false,
            &WeightInit::Random { seed: 2 },
        )
        .unwrap();
        let mut entries = donor.export_entries();
        // Poison after the hidden relu, which maps NaN to zero.
        let kernel = format!("{}/kernel", crate::backbone::HEAD_LOGITS);
        entries
            .iter_mut()
            .find(|e| e.name == kernel)
            .expect("head kernel present")
            .value
            .fill(f32::NAN);
        crate::nn::save_weight_file(
            &weights_dir.path().join(format!("{TEST_BACKBONE}.pxwt")),
            &entries,
        )
        .unwrap();

        let cfg = FineTuneConfig {
            weights: WeightSource::Imagenet,
            weights_dir: Some(weights_dir.path().to_path_buf()),
            ..quick_cfg()
        };
        let err = train_fold(
            TEST_BACKBONE,
            0,
            &plan,
            &index,
            &cfg,
            &small_head(),
            &out.path().join("model"),
        )
        .unwrap_err();
        match &err {
            TrainError::Diverged { epoch, lr } => {
                assert_eq!(*epoch, 0);
                assert!(*lr > 0.0);
                let text = err.to_string();
                assert!(text.contains("epoch") && text.contains("lr"));
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn predict_rejects_fold_and_vocab_mismatches() {
        let (_dir, index) = tiny_corpus(2);
        let plan = make_fold_plan(&index, 1, 0.5, 13).unwrap();
        let fold = plan.fold(0).unwrap().clone();
        let out = TempDir::new().unwrap();
        let cfg = FineTuneConfig {
            max_epochs: 1,
            batch_size: 2,
            ..quick_cfg()
        };
        let (artifact, _) = train_fold(
            TEST_BACKBONE,
            0,
            &plan,
            &index,
            &cfg,
            &small_head(),
            &out.path().join("model"),
        )
        .unwrap();
        let test_records = index.resolve(&fold.test).unwrap();

        let err = predict_probs(&artifact, &test_records, &index.class_vocab, 1).unwrap_err();
        assert!(matches!(err, TrainError::Integrity(_)));

        let short_vocab: Vec<ClassLabel> = index.class_vocab[..3].to_vec();
        let err = predict_probs(&artifact, &test_records, &short_vocab, 0).unwrap_err();
        assert!(matches!(err, TrainError::Integrity(_)));
    }

    #[test]
    fn experiment_resumes_by_digest_and_records_failures() {
        let (_dir, index) = tiny_corpus(2);
        let good = make_fold_plan(&index, 1, 0.5, 21).unwrap();
        let plan = FoldPlan {
            seed: good.seed,
            n_folds: 2,
            train_fraction: good.train_fraction,
            folds: vec![
                good.folds[0].clone(),
                Fold {
                    train: good.folds[0].train.clone(),
                    test: vec!["ghost".into()],
                },
            ],
        };
        let out = TempDir::new().unwrap();
        let cfg = FineTuneConfig {
            max_epochs: 1,
            ..quick_cfg()
        };
        let head = small_head();
        let ids = vec![TEST_BACKBONE.to_string()];

        let first = run_experiment(&ids, &plan, &index, &cfg, &head, out.path()).unwrap();
        let key0 = ExperimentArchive::cell_key(TEST_BACKBONE, 0);
        let key1 = ExperimentArchive::cell_key(TEST_BACKBONE, 1);
        assert_eq!(first.trained, vec![key0.clone()]);
        assert_eq!(first.skipped, Vec::<String>::new());
        assert_eq!(first.failed.len(), 1);
        assert_eq!(first.failed[0].0, key1);

        let archive = ExperimentArchive::open(out.path()).unwrap();
        let manifest = archive.manifest().unwrap();
        assert!(matches!(
            manifest.cells.get(&key0),
            Some(CellStatus::Complete { .. })
        ));
        assert!(matches!(
            manifest.cells.get(&key1),
            Some(CellStatus::Failed { .. })
        ));
        assert!(archive.probs_path(TEST_BACKBONE, 0).is_file());
        assert!(archive.history_path(TEST_BACKBONE, 0).is_file());
        let matrix = archive.read_probs(TEST_BACKBONE, 0).unwrap();
        assert_eq!(matrix.sample_ids, plan.folds[0].test);

        // A rerun retrains nothing that is complete; the failed cell is
        // attempted again and fails the same way.
        let second = run_experiment(&ids, &plan, &index, &cfg, &head, out.path()).unwrap();
        assert_eq!(second.trained, Vec::<String>::new());
        assert_eq!(second.skipped, vec![key0.clone()]);
        assert_eq!(second.failed.len(), 1);

        // Changing the config changes the digest, which invalidates the
        // completed cell and retrains it.
        let reseeded = FineTuneConfig { seed: 99, ..cfg };
        let third = run_experiment(&ids, &plan, &index, &reseeded, &head, out.path()).unwrap();
        assert_eq!(third.trained, vec![key0]);
    }
}
