//! Evaluation measures: confusion matrices, one-vs-rest class counts,
//! precision/recall/F1 (macro-averaged), and multiclass accuracy.
//!
//! Conventions: predicted class is the row argmax with ties broken toward
//! the lowest class index; a zero denominator yields 0 and flags the
//! report; accuracy is trace over total; macro values are unweighted
//! per-class means; fold averaging is the unweighted arithmetic mean of
//! every field.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::ProbabilityMatrix;
use crate::dataset::ClassLabel;

/// Errors raised while scoring predictions.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("confusion matrix has no samples")]
    EmptyMatrix,
    #[error("probability row for sample {sample_id:?} contains a non-finite entry")]
    NonFinite { sample_id: String },
    #[error("vocabulary size {vocab} does not match probability columns {cols}")]
    VocabMismatch { vocab: usize, cols: usize },
    #[error("reports mix different class vocabularies")]
    MixedVocabulary,
    #[error("cannot average an empty list of reports")]
    NoReports,
    #[error("class index {0} out of range")]
    ClassOutOfRange(usize),
}

/// C x C integer counts; rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub class_vocab: Vec<ClassLabel>,
}

impl ConfusionMatrix {
    /// An all-zero matrix over `vocab`.
    pub fn zeros(vocab: Vec<ClassLabel>) -> Self {
        let c = vocab.len();
        Self {
            counts: Array2::zeros((c, c)),
            class_vocab: vocab,
        }
    }

    /// Accumulate (true, predicted) index pairs.
    pub fn from_pairs<I>(vocab: Vec<ClassLabel>, pairs: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut cm = Self::zeros(vocab);
        let c = cm.n_classes();
        for (t, p) in pairs {
            if t >= c {
                return Err(MetricsError::ClassOutOfRange(t));
            }
            if p >= c {
                return Err(MetricsError::ClassOutOfRange(p));
            }
            cm.counts[(t, p)] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.class_vocab.len()
    }

    /// Total number of scored samples.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Sum of the diagonal (correct predictions).
    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[(i, i)]).sum()
    }

    /// Elementwise sum of two matrices over the same vocabulary.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix, MetricsError> {
        if self.class_vocab != other.class_vocab {
            return Err(MetricsError::MixedVocabulary);
        }
        Ok(ConfusionMatrix {
            counts: &self.counts + &other.counts,
            class_vocab: self.class_vocab.clone(),
        })
    }
}

/// One-vs-rest reduction of a confusion matrix for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    /// Total samples covered by the reduction.
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Row argmax with ties broken toward the lowest class index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_value {
            best_value = v;
            best = i;
        }
    }
    best
}

/// Build a confusion matrix from a probability matrix.
pub fn confusion_from_probs(
    pm: &ProbabilityMatrix,
    vocab: &[ClassLabel],
) -> Result<ConfusionMatrix, MetricsError> {
    if vocab.len() != pm.n_classes() {
        return Err(MetricsError::VocabMismatch {
            vocab: vocab.len(),
            cols: pm.n_classes(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(vocab.to_vec());
    for (i, row) in pm.probs.rows().into_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite()) {
            return Err(MetricsError::NonFinite {
                sample_id: pm.sample_ids[i].clone(),
            });
        }
        let row_slice = row.as_slice().expect("contiguous probability row");
        let predicted = argmax_lowest(row_slice);
        let truth = pm.true_labels[i];
        if truth >= vocab.len() {
            return Err(MetricsError::ClassOutOfRange(truth));
        }
        cm.counts[(truth, predicted)] += 1;
    }
    Ok(cm)
}

/// One-vs-rest counts for class `c`.
pub fn class_counts(cm: &ConfusionMatrix, c: usize) -> Result<ClassCounts, MetricsError> {
    if c >= cm.n_classes() {
        return Err(MetricsError::ClassOutOfRange(c));
    }
    let tp = cm.counts[(c, c)];
    let fp = cm.counts.column(c).sum() - tp;
    let fn_ = cm.counts.row(c).sum() - tp;
    let tn = cm.total() - tp - fp - fn_;
    Ok(ClassCounts { tp, fp, fn_, tn })
}

/// TP / (TP + FP); 0 when the denominator is 0.
pub fn precision(counts: &ClassCounts) -> f64 {
    ratio(counts.tp, counts.tp + counts.fp)
}

/// TP / (TP + FN); 0 when the denominator is 0.
pub fn recall(counts: &ClassCounts) -> f64 {
    ratio(counts.tp, counts.tp + counts.fn_)
}

/// 2PR / (P + R); 0 when P + R is 0.
pub fn f1(counts: &ClassCounts) -> f64 {
    let p = precision(counts);
    let r = recall(counts);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Trace over total (multiclass accuracy).
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Which fold a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FoldRef {
    Fold(usize),
    #[serde(rename = "averaged", with = "averaged_tag")]
    Averaged,
}

mod averaged_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str("averaged")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<(), D::Error> {
        let tag = String::deserialize(deserializer)?;
        if tag == "averaged" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"averaged\""))
        }
    }
}

/// Precision/recall/F1 triple, internal values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F")]
    pub f1: f64,
}

/// Per-class and macro metrics for one fold or a fold average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub fold: FoldRef,
    /// Class names in vocabulary order, aligned with `per_class`.
    pub class_names: Vec<String>,
    pub per_class: Vec<Prf>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub accuracy: f64,
    /// Sample count; fractional after fold averaging.
    pub n: f64,
    /// Classes where a zero denominator forced a 0 metric.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_classes: Vec<String>,
}

impl MetricsReport {
    /// Attach the producing model's id.
    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    /// Serialize to the published JSON schema.
    pub fn to_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .class_names
            .iter()
            .zip(&self.per_class)
            .map(|(name, prf)| (name.clone(), serde_json::to_value(prf).expect("prf")))
            .collect();
        let mut map = serde_json::Map::new();
        if let Some(model) = &self.model {
            map.insert("model".to_string(), serde_json::json!(model));
        }
        map.insert(
            "fold".to_string(),
            serde_json::to_value(self.fold).expect("fold"),
        );
        map.insert("per_class".to_string(), serde_json::Value::Object(per_class));
        map.insert(
            "macro".to_string(),
            serde_json::to_value(self.macro_avg).expect("macro"),
        );
        map.insert("accuracy".to_string(), serde_json::json!(self.accuracy));
        map.insert("n".to_string(), serde_json::json!(self.n));
        if !self.degenerate_classes.is_empty() {
            map.insert(
                "degenerate_classes".to_string(),
                serde_json::json!(self.degenerate_classes),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Per-class metrics, macro average, and accuracy for one matrix.
pub fn macro_report(cm: &ConfusionMatrix, fold: FoldRef) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let c = cm.n_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut degenerate = Vec::new();
    for class in 0..c {
        let counts = class_counts(cm, class)?;
        let p = precision(&counts);
        let r = recall(&counts);
        let f = f1(&counts);
        if counts.tp + counts.fp == 0 || counts.tp + counts.fn_ == 0 || p + r == 0.0 {
            degenerate.push(cm.class_vocab[class].name.clone());
        }
        per_class.push(Prf {
            precision: p,
            recall: r,
            f1: f,
        });
    }
    let macro_avg = mean_prf(&per_class);
    Ok(MetricsReport {
        model: None,
        fold,
        class_names: cm.class_vocab.iter().map(|l| l.name.clone()).collect(),
        per_class,
        macro_avg,
        accuracy: accuracy(cm)?,
        n: total as f64,
        degenerate_classes: degenerate,
    })
}

/// Unweighted arithmetic mean of reports across folds.
pub fn average_over_folds(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    if reports
        .iter()
        .any(|r| r.class_names != first.class_names)
    {
        return Err(MetricsError::MixedVocabulary);
    }
    let k = reports.len() as f64;
    let c = first.class_names.len();
    let per_class: Vec<Prf> = (0..c)
        .map(|i| Prf {
            precision: reports.iter().map(|r| r.per_class[i].precision).sum::<f64>() / k,
            recall: reports.iter().map(|r| r.per_class[i].recall).sum::<f64>() / k,
            f1: reports.iter().map(|r| r.per_class[i].f1).sum::<f64>() / k,
        })
        .collect();
    // Recomputing the macro from averaged per-class values keeps
    // "macro equals the unweighted mean of per-class" exact.
    let macro_avg = mean_prf(&per_class);
    let mut degenerate: Vec<String> = reports
        .iter()
        .flat_map(|r| r.degenerate_classes.iter().cloned())
        .collect();
    degenerate.sort();
    degenerate.dedup();
    let model = if reports.iter().all(|r| r.model == first.model) {
        first.model.clone()
    } else {
        None
    };
    Ok(MetricsReport {
        model,
        fold: FoldRef::Averaged,
        class_names: first.class_names.clone(),
        per_class,
        macro_avg,
        accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / k,
        n: reports.iter().map(|r| r.n).sum::<f64>() / k,
        degenerate_classes: degenerate,
    })
}

fn mean_prf(values: &[Prf]) -> Prf {
    let k = values.len() as f64;
    Prf {
        precision: values.iter().map(|v| v.precision).sum::<f64>() / k,
        recall: values.iter().map(|v| v.recall).sum::<f64>() / k,
        f1: values.iter().map(|v| v.f1).sum::<f64>() / k,
    }
}
