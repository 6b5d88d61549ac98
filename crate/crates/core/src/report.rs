//! Report rendering: comparison tables, confusion-matrix and
//! training-curve figures, and the consolidated report bundle.
//!
//! Percentages are rounded half-up to two decimals. Model tables never
//! reorder rows relative to the registry; ids outside the registry
//! (ensembles) keep their input order after the registry rows. Figures
//! are deterministic SVG strings with no timestamps or other
//! run-dependent metadata, so re-rendering the same inputs is
//! byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::archive::{ArchiveError, ExperimentArchive, ProbabilityMatrix};
use crate::backbone::list_backbones;
use crate::dataset::ClassLabel;
use crate::fusion::{evaluate_single, ComboResult, EnsembleEvaluation, FusionError, FusionMode};
use crate::metrics::{ConfusionMatrix, MetricsError, MetricsReport};
use crate::train::TrainingHistory;

/// Errors raised while assembling reports.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("archive is missing cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),
    #[error("no models requested")]
    NoModels,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

/// Render a 0..1 value as a percentage with two half-up decimals.
///
/// The scaling happens in integer hundredths, so the printed digits are
/// exactly the rounded value rather than a re-rounded float.
pub fn percent(value: f64) -> String {
    let hundredths = (value * 10_000.0 + 0.5).floor() as i64;
    format!("{}.{:02}", hundredths / 100, (hundredths % 100).abs())
}

/// Position of a model id in the registry; ids outside the registry
/// (ensembles) sort after every registry entry.
pub fn registry_rank(model_id: &str) -> usize {
    list_backbones()
        .iter()
        .position(|spec| spec.id == model_id)
        .unwrap_or(usize::MAX)
}

/// Human-readable name for a model id: the registry display name, or the
/// id itself for ensembles.
pub fn display_name(model_id: &str) -> String {
    list_backbones()
        .iter()
        .find(|spec| spec.id == model_id)
        .map(|spec| spec.display_name.to_string())
        .unwrap_or_else(|| model_id.to_string())
}

/// One table row: a model and its fold-averaged metrics.
#[derive(Debug, Clone, Serialize)]
pub struct ModelRow {
    pub model_id: String,
    pub display_name: String,
    pub averaged: MetricsReport,
}

impl ModelRow {
    pub fn new(model_id: impl Into<String>, averaged: MetricsReport) -> Self {
        let model_id = model_id.into();
        Self {
            display_name: display_name(&model_id),
            model_id,
            averaged,
        }
    }
}

/// Stable-sort rows into registry order, unknown ids last in input order.
pub fn sort_rows_by_registry(rows: &mut [ModelRow]) {
    rows.sort_by_key(|row| registry_rank(&row.model_id));
}

/// The per-model comparison table as markdown.
pub fn render_model_table(rows: &[ModelRow], n_folds: usize) -> String {
    let mut out = String::new();
    out.push_str("| Model | Precision (%) | Recall (%) | F1-score (%) | Accuracy (%) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for row in rows {
        let m = &row.averaged;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            row.display_name,
            percent(m.macro_avg.precision),
            percent(m.macro_avg.recall),
            percent(m.macro_avg.f1),
            percent(m.accuracy),
        );
    }
    let note = if n_folds == 1 {
        "Metrics from a single fold (no averaging).".to_string()
    } else {
        format!("Metrics averaged over {n_folds} folds.")
    };
    let _ = write!(out, "\n{note}\n");
    out
}

/// The combination-search table as markdown, rows in the given (ranked)
/// order.
pub fn render_combo_table(results: &[ComboResult], n_folds: usize) -> String {
    let mut out = String::new();
    out.push_str("| Combination | Precision (%) | Recall (%) | F1-score (%) | Accuracy (%) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for result in results {
        let names: Vec<String> = result
            .member_ids
            .iter()
            .map(|id| display_name(id))
            .collect();
        let m = &result.evaluation.averaged;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            names.join(" + "),
            percent(m.macro_avg.precision),
            percent(m.macro_avg.recall),
            percent(m.macro_avg.f1),
            percent(m.accuracy),
        );
    }
    let note = if n_folds == 1 {
        "Metrics from a single fold (no averaging).".to_string()
    } else {
        format!("Metrics averaged over {n_folds} folds.")
    };
    let _ = write!(out, "\n{note}\n");
    out
}

/// Read one model's probability matrices for folds `0..n_folds`.
///
/// Missing matrices are reported all at once as archive cell keys.
pub fn load_model_folds(
    archive: &ExperimentArchive,
    model_id: &str,
    n_folds: usize,
) -> Result<Vec<ProbabilityMatrix>, ReportError> {
    let missing: Vec<String> = (0..n_folds)
        .filter(|&fold| !archive.probs_path(model_id, fold).is_file())
        .map(|fold| ExperimentArchive::cell_key(model_id, fold))
        .collect();
    if !missing.is_empty() {
        return Err(ReportError::MissingCells(missing));
    }
    (0..n_folds)
        .map(|fold| archive.read_probs(model_id, fold).map_err(Into::into))
        .collect()
}

/// Evaluate each model across its folds and return rows in registry
/// order. Missing cells across all requested models are collected into
/// one error.
pub fn eval_models(
    archive: &ExperimentArchive,
    model_ids: &[String],
    n_folds: usize,
    vocab: &[ClassLabel],
) -> Result<Vec<ModelRow>, ReportError> {
    Ok(eval_models_with_folds(archive, model_ids, n_folds, vocab)?.0)
}

/// Like [`eval_models`], but also returning per-fold reports by model
/// id for consolidated reports.
#[allow(clippy::type_complexity)]
pub fn eval_models_with_folds(
    archive: &ExperimentArchive,
    model_ids: &[String],
    n_folds: usize,
    vocab: &[ClassLabel],
) -> Result<(Vec<ModelRow>, BTreeMap<String, Vec<MetricsReport>>), ReportError> {
    if model_ids.is_empty() {
        return Err(ReportError::NoModels);
    }
    let mut missing = Vec::new();
    for id in model_ids {
        for fold in 0..n_folds {
            if !archive.probs_path(id, fold).is_file() {
                missing.push(ExperimentArchive::cell_key(id, fold));
            }
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::MissingCells(missing));
    }

    let mut rows = Vec::with_capacity(model_ids.len());
    let mut per_fold = BTreeMap::new();
    for id in model_ids {
        let folds = load_model_folds(archive, id, n_folds)?;
        let evaluation = evaluate_single(&folds, vocab)?;
        rows.push(ModelRow::new(id.clone(), evaluation.averaged));
        per_fold.insert(id.clone(), evaluation.per_fold);
    }
    sort_rows_by_registry(&mut rows);
    Ok((rows, per_fold))
}

/// An ensemble's results in serializable form.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSection {
    pub members: Vec<String>,
    pub mode: FusionMode,
    pub averaged: MetricsReport,
    pub per_fold: Vec<MetricsReport>,
}

impl From<&EnsembleEvaluation> for EnsembleSection {
    fn from(evaluation: &EnsembleEvaluation) -> Self {
        Self {
            members: evaluation.member_ids.clone(),
            mode: evaluation.mode,
            averaged: evaluation.averaged.clone(),
            per_fold: evaluation.per_fold.clone(),
        }
    }
}

/// Everything the consolidated report carries; serializes to the bundle
/// JSON and renders to markdown.
#[derive(Debug, Clone, Serialize)]
pub struct ConsolidatedReport {
    pub n_folds: usize,
    pub class_names: Vec<String>,
    /// Fold-averaged per-model reports, registry order.
    pub models: Vec<ModelRow>,
    /// Per-fold reports keyed by model id.
    pub model_per_fold: BTreeMap<String, Vec<MetricsReport>>,
    pub ensembles: Vec<EnsembleSection>,
}

impl ConsolidatedReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Results\n\n");
        let _ = writeln!(
            out,
            "Classes: {}. Protocol: {} independent random splits.\n",
            self.class_names.join(", "),
            self.n_folds
        );
        out.push_str("## Individual models\n\n");
        out.push_str(&render_model_table(&self.models, self.n_folds));
        if !self.ensembles.is_empty() {
            out.push_str("\n## Ensembles\n\n");
            out.push_str(
                "| Members | Mode | Precision (%) | Recall (%) | F1-score (%) | Accuracy (%) |\n",
            );
            out.push_str("|---|---|---|---|---|---|\n");
            for section in &self.ensembles {
                let names: Vec<String> =
                    section.members.iter().map(|id| display_name(id)).collect();
                let mode = match section.mode {
                    FusionMode::ArgmaxConcat => "argmax",
                    FusionMode::Plurality => "plurality",
                };
                let m = &section.averaged;
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    names.join(" + "),
                    mode,
                    percent(m.macro_avg.precision),
                    percent(m.macro_avg.recall),
                    percent(m.macro_avg.f1),
                    percent(m.accuracy),
                );
            }
        }
        let degenerate: Vec<&str> = self
            .models
            .iter()
            .flat_map(|row| row.averaged.degenerate_classes.iter())
            .map(String::as_str)
            .collect();
        if !degenerate.is_empty() {
            let mut names = degenerate;
            names.sort_unstable();
            names.dedup();
            let _ = write!(
                out,
                "\nNote: zero denominators forced 0 metrics for: {}.\n",
                names.join(", ")
            );
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Linear white-to-dark-blue ramp for confusion cells.
fn blues(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// Render a confusion matrix as an SVG figure: true classes down the
/// rows, predicted classes across the columns, cells shaded by count.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let c = cm.n_classes();
    let cell = 64.0;
    let left = 120.0;
    let top = 80.0;
    let width = left + c as f64 * cell + 20.0;
    let height = top + c as f64 * cell + 20.0;
    let max = cm.counts.iter().copied().max().unwrap_or(0).max(1) as f64;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"Helvetica, Arial, sans-serif\" font-size=\"12\">"
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\" font-weight=\"bold\">{}</text>",
        left + c as f64 * cell / 2.0,
        xml_escape(title)
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"40\" text-anchor=\"middle\" fill=\"#555\">Predicted class</text>",
        left + c as f64 * cell / 2.0
    );
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" fill=\"#555\" \
         transform=\"rotate(-90 16 {})\">True class</text>",
        top + c as f64 * cell / 2.0,
        top + c as f64 * cell / 2.0
    );
    for (i, label) in cm.class_vocab.iter().enumerate() {
        let x = left + (i as f64 + 0.5) * cell;
        let _ = write!(
            svg,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            top - 8.0,
            xml_escape(&label.name)
        );
        let y = top + (i as f64 + 0.5) * cell;
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 8.0,
            y + 4.0,
            xml_escape(&label.name)
        );
    }
    for row in 0..c {
        for col in 0..c {
            let count = cm.counts[(row, col)];
            let (r, g, b) = blues(count as f64 / max);
            let x = left + col as f64 * cell;
            let y = top + row as f64 * cell;
            let _ = write!(
                svg,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({r},{g},{b})\" stroke=\"#999\"/>"
            );
            let text_fill = if count as f64 / max > 0.55 { "#fff" } else { "#000" };
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{text_fill}\">{count}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    svg.push_str("</svg>");
    svg
}

/// One series inside a curve plot.
struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: &'a [f64],
}

/// Render train/test accuracy and loss curves side by side.
pub fn history_curves_svg(history: &TrainingHistory, title: &str) -> String {
    let plot_w = 300.0;
    let plot_h = 220.0;
    let gap = 60.0;
    let left = 60.0;
    let top = 60.0;
    let width = left + plot_w * 2.0 + gap + 30.0;
    let height = top + plot_h + 60.0;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"Helvetica, Arial, sans-serif\" font-size=\"12\">"
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\" font-weight=\"bold\">{}</text>",
        width / 2.0,
        xml_escape(title)
    );
    draw_plot(
        &mut svg,
        (left, top, plot_w, plot_h),
        "Accuracy",
        &[
            Series {
                label: "train",
                color: "#1f77b4",
                values: &history.train_accuracy,
            },
            Series {
                label: "test",
                color: "#ff7f0e",
                values: &history.test_accuracy,
            },
        ],
    );
    draw_plot(
        &mut svg,
        (left + plot_w + gap, top, plot_w, plot_h),
        "Loss",
        &[
            Series {
                label: "train",
                color: "#1f77b4",
                values: &history.train_loss,
            },
            Series {
                label: "test",
                color: "#ff7f0e",
                values: &history.test_loss,
            },
        ],
    );
    svg.push_str("</svg>");
    svg
}

fn draw_plot(svg: &mut String, frame: (f64, f64, f64, f64), name: &str, series: &[Series<'_>]) {
    let (x0, y0, w, h) = frame;
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        // A flat or single-point series still needs a visible range.
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let _ = write!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#333\"/>"
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-weight=\"bold\">{}</text>",
        x0 + w / 2.0,
        y0 - 10.0,
        xml_escape(name)
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#555\">epoch</text>",
        x0 + w / 2.0,
        y0 + h + 32.0
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#555\">{hi:.3}</text>",
        x0 - 6.0,
        y0 + 10.0
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#555\">{lo:.3}</text>",
        x0 - 6.0,
        y0 + h
    );
    let _ = write!(
        svg,
        "<text x=\"{x0}\" y=\"{}\" fill=\"#555\">1</text>",
        y0 + h + 16.0
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#555\">{n}</text>",
        x0 + w,
        y0 + h + 16.0
    );

    let position = |epoch: usize, value: f64, len: usize| -> (f64, f64) {
        let fx = if len <= 1 {
            0.5
        } else {
            epoch as f64 / (len - 1) as f64
        };
        let fy = (value - lo) / (hi - lo);
        (x0 + fx * w, y0 + (1.0 - fy) * h)
    };

    for (si, s) in series.iter().enumerate() {
        if s.values.is_empty() {
            continue;
        }
        if s.values.len() > 1 {
            let points: Vec<String> = s
                .values
                .iter()
                .enumerate()
                .map(|(e, &v)| {
                    let (px, py) = position(e, v, s.values.len());
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = write!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
                points.join(" "),
                s.color
            );
        }
        for (e, &v) in s.values.iter().enumerate() {
            let (px, py) = position(e, v, s.values.len());
            let _ = write!(
                svg,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\" fill=\"{}\"/>",
                s.color
            );
        }
        // Legend entry.
        let ly = y0 + 14.0 + si as f64 * 16.0;
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{}\"/>",
            x0 + 8.0,
            ly - 4.0,
            s.color
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{ly}\">{}</text>",
            x0 + 24.0,
            xml_escape(s.label)
        );
    }
}
