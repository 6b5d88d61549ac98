//! The seven subcommands and their shared plumbing.

pub mod eval;
pub mod explain;
pub mod folds;
pub mod fuse;
pub mod ingest;
pub mod report;
pub mod train;

use std::path::PathBuf;

use poxscreen_core::archive::ExperimentArchive;
use poxscreen_core::dataset::{make_vocab, ClassLabel};
use poxscreen_core::report::{load_model_folds, ReportError};
use poxscreen_core::ProbabilityMatrix;

use crate::config::{parse_id_list, registry_ids, RunConfig};
use crate::error::{internal, usage, CliError};

/// Subdirectory of the output root holding reports and figures.
pub const REPORTS_DIR: &str = "reports";
/// Subdirectory of the output root holding explanation overlays.
pub const EXPLANATIONS_DIR: &str = "explanations";

/// Open the experiment archive under the resolved output directory.
pub fn open_archive(cfg: &RunConfig) -> Result<ExperimentArchive, CliError> {
    ExperimentArchive::open(cfg.out()).map_err(internal)
}

/// The reports directory under the output root.
pub fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out().join(REPORTS_DIR)
}

/// The class vocabulary of a finalized config.
pub fn vocab_of(cfg: &RunConfig) -> Vec<ClassLabel> {
    make_vocab(&cfg.class_names).expect("finalize validated the vocabulary")
}

/// Parse a `--models`-style list, expanding "all" to the registry.
pub fn expand_model_list(text: &str) -> Vec<String> {
    let ids = parse_id_list(text);
    if ids.iter().any(|id| id == "all") {
        registry_ids()
    } else {
        ids
    }
}

/// Read every member's matrices for folds `0..n_folds`, collecting all
/// missing cells across members into one usage error.
pub fn load_members(
    archive: &ExperimentArchive,
    member_ids: &[String],
    n_folds: usize,
) -> Result<Vec<Vec<ProbabilityMatrix>>, CliError> {
    let mut missing = Vec::new();
    for id in member_ids {
        for fold in 0..n_folds {
            if !archive.probs_path(id, fold).is_file() {
                missing.push(ExperimentArchive::cell_key(id, fold));
            }
        }
    }
    if !missing.is_empty() {
        return Err(usage(format!(
            "archive is missing cells: {}",
            missing.join(", ")
        )));
    }
    member_ids
        .iter()
        .map(|id| load_model_folds(archive, id, n_folds).map_err(classify_report_error))
        .collect()
}

/// Regroup per-member fold lists into per-fold member lists, the shape
/// ensemble evaluation expects.
pub fn group_by_fold(members: Vec<Vec<ProbabilityMatrix>>) -> Vec<Vec<ProbabilityMatrix>> {
    let n_folds = members.first().map_or(0, Vec::len);
    let mut folds: Vec<Vec<ProbabilityMatrix>> = (0..n_folds).map(|_| Vec::new()).collect();
    for member in members {
        for (fold_id, pm) in member.into_iter().enumerate() {
            folds[fold_id].push(pm);
        }
    }
    folds
}

/// Classify a report-layer failure: absent or inconsistent inputs are
/// the user's to fix, unreadable ones are execution failures.
pub fn classify_report_error(err: ReportError) -> CliError {
    match err {
        ReportError::MissingCells(_) | ReportError::NoModels | ReportError::Metrics(_) => {
            usage(err)
        }
        ReportError::Fusion(_) | ReportError::Archive(_) => internal(err),
    }
}

/// Format an integer with comma thousands separators.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_groups_digits_in_threes() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(529), "529");
        assert_eq!(thousands(1754), "1,754");
        assert_eq!(thousands(1_234_567), "1,234,567");
    }

    #[test]
    fn model_lists_expand_all() {
        assert_eq!(expand_model_list("xception,vgg16"), ["xception", "vgg16"]);
        assert_eq!(expand_model_list("all").len(), 13);
        assert_eq!(expand_model_list("xception,all").len(), 13);
    }

    #[test]
    fn fold_grouping_transposes_member_lists() {
        use std::path::Path;
        let pm = |model: &str, fold: usize| {
            ProbabilityMatrix::from_csv(
                "sample_id,true_label,p_0,p_1\ns0,0,1,0\n",
                model,
                fold,
                Path::new("synthetic.csv"),
            )
            .unwrap()
        };
        let grouped = group_by_fold(vec![
            vec![pm("a", 0), pm("a", 1)],
            vec![pm("b", 0), pm("b", 1)],
        ]);
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped[0][0].model_id, "a");
        assert_eq!(grouped[0][1].model_id, "b");
        assert!(grouped[1].iter().all(|pm| pm.fold_id == 1));
    }
}
