//! Decision fusion across member models.
//!
//! Two modes are supported. `ArgmaxConcat` concatenates every member's
//! probability vector and takes a single argmax over the result; the winning
//! index decodes to (member, class), so the most confident member decides.
//! `Plurality` lets each member vote with its own argmax and picks the class
//! with the most votes.
//!
//! Tie-breaks are deterministic. Concatenated argmax keeps the earliest
//! occurrence, which means the earliest member and then the lowest class
//! index. Plurality breaks vote ties by the larger summed probability mass
//! across members, then the lowest class index.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::ProbabilityMatrix;
use crate::dataset::ClassLabel;
use crate::metrics::{
    argmax_lowest, average_over_folds, confusion_from_probs, macro_report, FoldRef, MetricsError,
    MetricsReport,
};

/// Errors raised while fusing member predictions.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion needs at least one member model")]
    NoMembers,
    #[error("fusion needs at least one fold")]
    NoFolds,
    #[error("member {model_id} appears more than once")]
    DuplicateMember { model_id: String },
    #[error("members disagree on fold id ({expected} vs {got})")]
    FoldMismatch { expected: usize, got: usize },
    #[error("members disagree on sample order at row {row}")]
    SampleMismatch { row: usize },
    #[error("members disagree on true labels at row {row}")]
    LabelMismatch { row: usize },
    #[error("members disagree on class count ({expected} vs {got})")]
    WidthMismatch { expected: usize, got: usize },
    #[error("probability row for sample {sample_id:?} contains a non-finite entry")]
    NonFinite { sample_id: String },
    #[error("combination search needs at least two candidate models")]
    TooFewModels,
    #[error("models disagree on fold count ({expected} vs {got})")]
    FoldCountMismatch { expected: usize, got: usize },
    #[error("unknown ranking metric {0:?}; expected accuracy, precision, recall, or f1")]
    UnknownMetric(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How member predictions are combined into one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Single argmax over the concatenated probability vectors.
    ArgmaxConcat,
    /// One vote per member from its own argmax.
    Plurality,
}

impl FromStr for FusionMode {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "argmax" | "argmax_concat" | "max" => Ok(FusionMode::ArgmaxConcat),
            "plurality" | "vote" | "majority" => Ok(FusionMode::Plurality),
            other => Err(FusionError::UnknownMetric(other.to_string())),
        }
    }
}

/// One member's probability vector for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    pub model_id: String,
    pub probs: Vec<f64>,
}

/// The fused decision for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionDecision {
    /// Winning class index.
    pub class: usize,
    /// Index of the deciding member; `None` under plurality voting.
    pub winning_member: Option<usize>,
    /// Winning probability (argmax mode) or vote share (plurality).
    pub confidence: f64,
}

/// Fuse one sample's member vectors.
pub fn fuse_sample(
    members: &[PredictionVector],
    mode: FusionMode,
) -> Result<FusionDecision, FusionError> {
    let first = members.first().ok_or(FusionError::NoMembers)?;
    let width = first.probs.len();
    for member in members {
        if member.probs.len() != width {
            return Err(FusionError::WidthMismatch {
                expected: width,
                got: member.probs.len(),
            });
        }
        if member.probs.iter().any(|p| !p.is_finite()) {
            return Err(FusionError::NonFinite {
                sample_id: member.model_id.clone(),
            });
        }
    }
    Ok(match mode {
        FusionMode::ArgmaxConcat => {
            // Scan the concatenation in member order; the first occurrence
            // of the maximum wins, so earlier members and lower class
            // indices take precedence on exact ties.
            let mut best_index = 0;
            let mut best_value = f64::NEG_INFINITY;
            for (flat, value) in members
                .iter()
                .flat_map(|m| m.probs.iter().copied())
                .enumerate()
            {
                if value > best_value {
                    best_value = value;
                    best_index = flat;
                }
            }
            FusionDecision {
                class: best_index % width,
                winning_member: Some(best_index / width),
                confidence: best_value,
            }
        }
        FusionMode::Plurality => {
            let mut votes = vec![0usize; width];
            let mut mass = vec![0.0f64; width];
            for member in members {
                votes[argmax_lowest(&member.probs)] += 1;
                for (c, p) in member.probs.iter().enumerate() {
                    mass[c] += p;
                }
            }
            let mut winner = 0;
            for c in 1..width {
                let better_votes = votes[c] > votes[winner];
                let tied_votes = votes[c] == votes[winner];
                if better_votes || (tied_votes && mass[c] > mass[winner]) {
                    winner = c;
                }
            }
            FusionDecision {
                class: winner,
                winning_member: None,
                confidence: votes[winner] as f64 / members.len() as f64,
            }
        }
    })
}

/// The fused result for one sample of a fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSample {
    pub sample_id: String,
    pub true_label: usize,
    pub decision: FusionDecision,
}

/// Member matrices for one fold, validated for alignment.
#[derive(Debug, Clone)]
pub struct FusionInput {
    pub fold_id: usize,
    pub members: Vec<ProbabilityMatrix>,
}

impl FusionInput {
    /// Bundle member matrices after checking they describe the same fold,
    /// the same samples in the same order, and the same class count.
    pub fn new(members: Vec<ProbabilityMatrix>) -> Result<Self, FusionError> {
        let first = members.first().ok_or(FusionError::NoMembers)?;
        let fold_id = first.fold_id;
        let width = first.n_classes();
        let mut seen = std::collections::BTreeSet::new();
        for member in &members {
            if !seen.insert(member.model_id.clone()) {
                return Err(FusionError::DuplicateMember {
                    model_id: member.model_id.clone(),
                });
            }
            if member.fold_id != fold_id {
                return Err(FusionError::FoldMismatch {
                    expected: fold_id,
                    got: member.fold_id,
                });
            }
            if member.n_classes() != width {
                return Err(FusionError::WidthMismatch {
                    expected: width,
                    got: member.n_classes(),
                });
            }
            for row in 0..first.sample_ids.len().max(member.sample_ids.len()) {
                match (first.sample_ids.get(row), member.sample_ids.get(row)) {
                    (Some(a), Some(b)) if a == b => {}
                    _ => return Err(FusionError::SampleMismatch { row }),
                }
                if first.true_labels.get(row) != member.true_labels.get(row) {
                    return Err(FusionError::LabelMismatch { row });
                }
            }
        }
        Ok(Self { fold_id, members })
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.model_id.clone()).collect()
    }

    /// Fuse every sample of the fold.
    pub fn fuse(&self, mode: FusionMode) -> Result<FusedFold, FusionError> {
        let lead = &self.members[0];
        let mut samples = Vec::with_capacity(lead.sample_ids.len());
        for row in 0..lead.sample_ids.len() {
            let vectors: Vec<PredictionVector> = self
                .members
                .iter()
                .map(|m| PredictionVector {
                    model_id: m.model_id.clone(),
                    probs: m.probs.row(row).to_vec(),
                })
                .collect();
            let decision = fuse_sample(&vectors, mode).map_err(|err| match err {
                FusionError::NonFinite { .. } => FusionError::NonFinite {
                    sample_id: lead.sample_ids[row].clone(),
                },
                other => other,
            })?;
            samples.push(FusedSample {
                sample_id: lead.sample_ids[row].clone(),
                true_label: lead.true_labels[row],
                decision,
            });
        }
        Ok(FusedFold {
            fold_id: self.fold_id,
            mode,
            member_ids: self.member_ids(),
            n_classes: lead.n_classes(),
            samples,
        })
    }
}

/// Fused decisions for one fold.
#[derive(Debug, Clone)]
pub struct FusedFold {
    pub fold_id: usize,
    pub mode: FusionMode,
    pub member_ids: Vec<String>,
    pub n_classes: usize,
    pub samples: Vec<FusedSample>,
}

impl FusedFold {
    /// Render the fused decisions as a probability matrix whose row argmax
    /// reproduces each decision exactly. Argmax fusion keeps the winning
    /// member's row; plurality produces a one-hot row at the voted class.
    pub fn to_probability_matrix(
        &self,
        input: &FusionInput,
        model_id: &str,
    ) -> ProbabilityMatrix {
        let n = self.samples.len();
        let mut probs = ndarray::Array2::zeros((n, self.n_classes));
        for (row, sample) in self.samples.iter().enumerate() {
            match sample.decision.winning_member {
                Some(member) => {
                    probs
                        .row_mut(row)
                        .assign(&input.members[member].probs.row(row));
                }
                None => probs[(row, sample.decision.class)] = 1.0,
            }
        }
        ProbabilityMatrix {
            model_id: model_id.to_string(),
            fold_id: self.fold_id,
            sample_ids: self.samples.iter().map(|s| s.sample_id.clone()).collect(),
            probs,
            true_labels: self.samples.iter().map(|s| s.true_label).collect(),
        }
    }

    /// Score the fused decisions for this fold.
    pub fn report(&self, vocab: &[ClassLabel]) -> Result<MetricsReport, FusionError> {
        let pairs = self
            .samples
            .iter()
            .map(|s| (s.true_label, s.decision.class));
        let cm = crate::metrics::ConfusionMatrix::from_pairs(vocab.to_vec(), pairs)?;
        Ok(macro_report(&cm, FoldRef::Fold(self.fold_id))?
            .with_model(ensemble_label(&self.member_ids)))
    }
}

/// Canonical label for an ensemble of members.
pub fn ensemble_label(member_ids: &[String]) -> String {
    format!("ensemble({})", member_ids.join("+"))
}

/// Per-fold and averaged metrics for one ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleEvaluation {
    pub member_ids: Vec<String>,
    pub mode: FusionMode,
    pub per_fold: Vec<MetricsReport>,
    pub averaged: MetricsReport,
}

/// Fuse and score an ensemble across folds. `folds[k]` holds every member's
/// matrix for fold `k`.
pub fn evaluate_ensemble(
    folds: &[Vec<ProbabilityMatrix>],
    vocab: &[ClassLabel],
    mode: FusionMode,
) -> Result<EnsembleEvaluation, FusionError> {
    if folds.is_empty() {
        return Err(FusionError::NoFolds);
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut member_ids = Vec::new();
    for members in folds {
        let input = FusionInput::new(members.clone())?;
        if member_ids.is_empty() {
            member_ids = input.member_ids();
        }
        per_fold.push(input.fuse(mode)?.report(vocab)?);
    }
    let averaged = average_over_folds(&per_fold)?;
    Ok(EnsembleEvaluation {
        member_ids,
        mode,
        per_fold,
        averaged,
    })
}

/// Score an individual model's matrices across folds.
pub fn evaluate_single(
    folds: &[ProbabilityMatrix],
    vocab: &[ClassLabel],
) -> Result<EnsembleEvaluation, FusionError> {
    if folds.is_empty() {
        return Err(FusionError::NoFolds);
    }
    let model_id = folds[0].model_id.clone();
    let mut per_fold = Vec::with_capacity(folds.len());
    for pm in folds {
        let cm = confusion_from_probs(pm, vocab)?;
        per_fold.push(macro_report(&cm, FoldRef::Fold(pm.fold_id))?.with_model(&model_id));
    }
    let averaged = average_over_folds(&per_fold)?;
    Ok(EnsembleEvaluation {
        member_ids: vec![model_id],
        mode: FusionMode::ArgmaxConcat,
        per_fold,
        averaged,
    })
}

/// Metric used to rank models and combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    Accuracy,
    MacroPrecision,
    MacroRecall,
    MacroF1,
}

impl RankMetric {
    /// Pull the ranked value out of a report.
    pub fn extract(&self, report: &MetricsReport) -> f64 {
        match self {
            RankMetric::Accuracy => report.accuracy,
            RankMetric::MacroPrecision => report.macro_avg.precision,
            RankMetric::MacroRecall => report.macro_avg.recall,
            RankMetric::MacroF1 => report.macro_avg.f1,
        }
    }
}

impl FromStr for RankMetric {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(RankMetric::Accuracy),
            "precision" | "macro_precision" => Ok(RankMetric::MacroPrecision),
            "recall" | "macro_recall" => Ok(RankMetric::MacroRecall),
            "f1" | "macro_f1" | "f" => Ok(RankMetric::MacroF1),
            other => Err(FusionError::UnknownMetric(other.to_string())),
        }
    }
}

/// Which member subsets a combination search explores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComboSpec {
    /// Nested prefixes of the ranked model list: the top 2, top 3, and so
    /// on up to `max_size` members.
    Prefixes { max_size: usize },
    /// Every subset of between 2 and `max_size` members.
    Exhaustive { max_size: usize },
}

/// One evaluated member combination.
#[derive(Debug, Clone)]
pub struct ComboResult {
    pub member_ids: Vec<String>,
    pub score: f64,
    pub evaluation: EnsembleEvaluation,
}

/// Search member combinations. `models` maps each model id to its per-fold
/// matrices; every model must cover the same folds in the same order.
/// Models are first ranked individually by `metric`, combinations are
/// generated per `spec`, and results come back sorted best first (ties
/// prefer fewer members, then earlier member lists).
pub fn combo_search(
    models: &BTreeMap<String, Vec<ProbabilityMatrix>>,
    vocab: &[ClassLabel],
    mode: FusionMode,
    metric: RankMetric,
    spec: ComboSpec,
) -> Result<Vec<ComboResult>, FusionError> {
    if models.len() < 2 {
        return Err(FusionError::TooFewModels);
    }
    let n_folds = models.values().next().expect("non-empty").len();
    if n_folds == 0 {
        return Err(FusionError::NoFolds);
    }
    for folds in models.values() {
        if folds.len() != n_folds {
            return Err(FusionError::FoldCountMismatch {
                expected: n_folds,
                got: folds.len(),
            });
        }
    }

    // Rank candidates by their individual averaged score.
    let mut ranked: Vec<(String, f64)> = models
        .iter()
        .map(|(id, folds)| {
            let eval = evaluate_single(folds, vocab)?;
            Ok((id.clone(), metric.extract(&eval.averaged)))
        })
        .collect::<Result<_, FusionError>>()?;
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let order: Vec<String> = ranked.into_iter().map(|(id, _)| id).collect();

    let subsets: Vec<Vec<String>> = match spec {
        ComboSpec::Prefixes { max_size } => {
            let cap = max_size.min(order.len());
            (2..=cap).map(|k| order[..k].to_vec()).collect()
        }
        ComboSpec::Exhaustive { max_size } => {
            let cap = max_size.min(order.len());
            let mut out = Vec::new();
            for bits in 1u64..(1u64 << order.len().min(20)) {
                let size = bits.count_ones() as usize;
                if size < 2 || size > cap {
                    continue;
                }
                let subset: Vec<String> = order
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| bits >> i & 1 == 1)
                    .map(|(_, id)| id.clone())
                    .collect();
                out.push(subset);
            }
            out
        }
    };

    let mut results = Vec::with_capacity(subsets.len());
    for member_ids in subsets {
        let folds: Vec<Vec<ProbabilityMatrix>> = (0..n_folds)
            .map(|k| {
                member_ids
                    .iter()
                    .map(|id| models[id][k].clone())
                    .collect()
            })
            .collect();
        let evaluation = evaluate_ensemble(&folds, vocab, mode)?;
        results.push(ComboResult {
            score: metric.extract(&evaluation.averaged),
            member_ids,
            evaluation,
        });
    }
    results.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.member_ids.len().cmp(&b.member_ids.len()))
            .then_with(|| a.member_ids.cmp(&b.member_ids))
    });
    Ok(results)
}
