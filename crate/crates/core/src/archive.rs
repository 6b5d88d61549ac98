//! The experiment archive: per-(model, fold) probability matrices,
//! training histories, model artifacts, and a resumable manifest.
//!
//! Layout under the archive root:
//!
//! ```text
//! <out>/<backbone_id>/fold<k>/model/       saved model artifact
//! <out>/<backbone_id>/fold<k>/history.json per-epoch training history
//! <out>/<backbone_id>/fold<k>/probs.csv    test-set probability matrix
//! <out>/manifest.json                      cell completion status
//! ```
//!
//! `probs.csv` is a bit-exact contract: header
//! `sample_id,true_label,p_0,...,p_{C-1}`, probabilities with 8
//! significant digits in scientific notation, UTF-8, LF line endings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by archive IO and probability-matrix validation.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("probs.csv parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("probability row for sample {sample_id:?} sums to {sum}, expected 1 within 1e-5")]
    BadRowSum { sample_id: String, sum: f64 },
    #[error("probability row for sample {sample_id:?} contains a non-finite entry")]
    NonFiniteRow { sample_id: String },
    #[error("sample id count {ids} does not match probability rows {rows}")]
    ShapeMismatch { ids: usize, rows: usize },
    #[error("true label {label} out of range for {classes} classes (sample {sample_id:?})")]
    LabelOutOfRange {
        sample_id: String,
        label: usize,
        classes: usize,
    },
    #[error("archive cell missing: {0}")]
    MissingCell(String),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Per-sample class probabilities for one (model, fold) cell.
///
/// Rows follow the fold plan's test-id order; every row is a probability
/// simplex point within 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub model_id: String,
    pub fold_id: usize,
    pub sample_ids: Vec<String>,
    /// N x C matrix of class probabilities.
    pub probs: Array2<f64>,
    /// Ground-truth class index per row.
    pub true_labels: Vec<usize>,
}

impl ProbabilityMatrix {
    /// Number of samples (rows).
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Number of classes (columns).
    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Check the simplex, alignment, and label-range invariants.
    pub fn validate(&self) -> Result<(), ArchiveError> {
        if self.sample_ids.len() != self.probs.nrows() || self.true_labels.len() != self.probs.nrows()
        {
            return Err(ArchiveError::ShapeMismatch {
                ids: self.sample_ids.len(),
                rows: self.probs.nrows(),
            });
        }
        for (i, row) in self.probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite()) {
                return Err(ArchiveError::NonFiniteRow {
                    sample_id: self.sample_ids[i].clone(),
                });
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(ArchiveError::BadRowSum {
                    sample_id: self.sample_ids[i].clone(),
                    sum,
                });
            }
            if self.true_labels[i] >= self.probs.ncols() {
                return Err(ArchiveError::LabelOutOfRange {
                    sample_id: self.sample_ids[i].clone(),
                    label: self.true_labels[i],
                    classes: self.probs.ncols(),
                });
            }
        }
        Ok(())
    }

    /// Serialize to the probs.csv wire format.
    pub fn to_csv(&self) -> String {
        let c = self.n_classes();
        let mut out = String::new();
        out.push_str("sample_id,true_label");
        for k in 0..c {
            out.push_str(&format!(",p_{k}"));
        }
        out.push('\n');
        for (i, row) in self.probs.rows().into_iter().enumerate() {
            out.push_str(&self.sample_ids[i]);
            out.push(',');
            out.push_str(&self.true_labels[i].to_string());
            for p in row.iter() {
                out.push(',');
                out.push_str(&format_prob(*p));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the probs.csv wire format.
    pub fn from_csv(
        text: &str,
        model_id: &str,
        fold_id: usize,
        path: &Path,
    ) -> Result<Self, ArchiveError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| ArchiveError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "empty file".to_string(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "true_label" {
            return Err(ArchiveError::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("bad header {header:?}"),
            });
        }
        for (k, col) in cols[2..].iter().enumerate() {
            if *col != format!("p_{k}") {
                return Err(ArchiveError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: format!("expected column p_{k}, found {col:?}"),
                });
            }
        }
        let c = cols.len() - 2;

        let mut sample_ids = Vec::new();
        let mut true_labels = Vec::new();
        let mut flat: Vec<f64> = Vec::new();
        for (line_index, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != c + 2 {
                return Err(ArchiveError::Parse {
                    path: path.to_path_buf(),
                    line: line_index + 1,
                    reason: format!("expected {} fields, found {}", c + 2, fields.len()),
                });
            }
            sample_ids.push(fields[0].to_string());
            let label: usize = fields[1].parse().map_err(|e| ArchiveError::Parse {
                path: path.to_path_buf(),
                line: line_index + 1,
                reason: format!("bad true_label: {e}"),
            })?;
            true_labels.push(label);
            for field in &fields[2..] {
                let p: f64 = field.parse().map_err(|e| ArchiveError::Parse {
                    path: path.to_path_buf(),
                    line: line_index + 1,
                    reason: format!("bad probability {field:?}: {e}"),
                })?;
                flat.push(p);
            }
        }
        let n = sample_ids.len();
        let probs = Array2::from_shape_vec((n, c), flat).expect("row-major probs");
        let pm = ProbabilityMatrix {
            model_id: model_id.to_string(),
            fold_id,
            sample_ids,
            probs,
            true_labels,
        };
        pm.validate()?;
        Ok(pm)
    }
}

/// Render a probability with 8 significant digits (scientific notation).
pub fn format_prob(p: f64) -> String {
    format!("{p:.7e}")
}

/// Completion state of one (backbone, fold) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Complete { digest: String },
    Failed { digest: String, error: String },
}

/// The archive manifest: cell key (`<backbone>/fold<k>`) to status.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: BTreeMap<String, CellStatus>,
}

/// Filesystem handle over one experiment archive root.
#[derive(Debug, Clone)]
pub struct ExperimentArchive {
    root: PathBuf,
}

impl ExperimentArchive {
    /// Open (creating if needed) an archive rooted at `root`.
    pub fn open(root: &Path) -> Result<Self, ArchiveError> {
        fs::create_dir_all(root).map_err(|source| ArchiveError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Canonical manifest key for a cell.
    pub fn cell_key(model_id: &str, fold_id: usize) -> String {
        format!("{model_id}/fold{fold_id}")
    }

    /// Directory of one (model, fold) cell.
    pub fn cell_dir(&self, model_id: &str, fold_id: usize) -> PathBuf {
        self.root.join(model_id).join(format!("fold{fold_id}"))
    }

    /// Path of the cell's probability matrix.
    pub fn probs_path(&self, model_id: &str, fold_id: usize) -> PathBuf {
        self.cell_dir(model_id, fold_id).join("probs.csv")
    }

    /// Path of the cell's training history.
    pub fn history_path(&self, model_id: &str, fold_id: usize) -> PathBuf {
        self.cell_dir(model_id, fold_id).join("history.json")
    }

    /// Directory of the cell's saved model artifact.
    pub fn model_dir(&self, model_id: &str, fold_id: usize) -> PathBuf {
        self.cell_dir(model_id, fold_id).join("model")
    }

    /// Write a probability matrix to its cell (validates first).
    pub fn write_probs(&self, pm: &ProbabilityMatrix) -> Result<(), ArchiveError> {
        pm.validate()?;
        let dir = self.cell_dir(&pm.model_id, pm.fold_id);
        fs::create_dir_all(&dir).map_err(|source| ArchiveError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = self.probs_path(&pm.model_id, pm.fold_id);
        let mut file = fs::File::create(&path).map_err(|source| ArchiveError::Io {
            path: path.clone(),
            source,
        })?;
        file.write_all(pm.to_csv().as_bytes())
            .map_err(|source| ArchiveError::Io { path, source })
    }

    /// Read one cell's probability matrix.
    pub fn read_probs(
        &self,
        model_id: &str,
        fold_id: usize,
    ) -> Result<ProbabilityMatrix, ArchiveError> {
        let path = self.probs_path(model_id, fold_id);
        if !path.is_file() {
            return Err(ArchiveError::MissingCell(Self::cell_key(model_id, fold_id)));
        }
        let text = fs::read_to_string(&path).map_err(|source| ArchiveError::Io {
            path: path.clone(),
            source,
        })?;
        ProbabilityMatrix::from_csv(&text, model_id, fold_id, &path)
    }

    /// Load the manifest (empty if the file does not exist yet).
    pub fn manifest(&self) -> Result<Manifest, ArchiveError> {
        let path = self.root.join("manifest.json");
        if !path.is_file() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|source| ArchiveError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Update one cell's status, rewriting the manifest atomically.
    pub fn update_cell(&self, key: &str, status: CellStatus) -> Result<(), ArchiveError> {
        let mut manifest = self.manifest()?;
        manifest.cells.insert(key.to_string(), status);
        self.write_manifest(&manifest)
    }

    fn write_manifest(&self, manifest: &Manifest) -> Result<(), ArchiveError> {
        let path = self.root.join("manifest.json");
        let tmp = self.root.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(manifest)?;
        fs::write(&tmp, text).map_err(|source| ArchiveError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, &path).map_err(|source| ArchiveError::Io { path, source })
    }

    /// True when the cell is marked complete with a matching digest and
    /// its probability file exists.
    pub fn cell_is_complete(&self, model_id: &str, fold_id: usize, digest: &str) -> bool {
        let key = Self::cell_key(model_id, fold_id);
        match self.manifest() {
            Ok(manifest) => matches!(
                manifest.cells.get(&key),
                Some(CellStatus::Complete { digest: d }) if d == digest
            ) && self.probs_path(model_id, fold_id).is_file(),
            Err(_) => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::TempDir;

    fn sample_matrix() -> ProbabilityMatrix {
        ProbabilityMatrix {
            model_id: "xception".to_string(),
            fold_id: 0,
            sample_ids: vec!["a/1.png".to_string(), "b/2.png".to_string()],
            probs: array![[0.1, 0.2, 0.6, 0.1], [0.25, 0.25, 0.25, 0.25]],
            true_labels: vec![2, 0],
        }
    }

    #[test]
    fn csv_header_and_digits() {
        let pm = sample_matrix();
        let csv = pm.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,true_label,p_0,p_1,p_2,p_3");
        let row = lines.next().unwrap();
        assert!(row.starts_with("a/1.png,2,"));
        assert!(row.contains("6.0000000e-1"), "row: {row}");
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn csv_round_trips_bit_exactly() {
        let pm = sample_matrix();
        let csv = pm.to_csv();
        let parsed =
            ProbabilityMatrix::from_csv(&csv, "xception", 0, Path::new("probs.csv")).unwrap();
        assert_eq!(parsed.to_csv(), csv);
        assert_eq!(parsed.sample_ids, pm.sample_ids);
        assert_eq!(parsed.true_labels, pm.true_labels);
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let mut pm = sample_matrix();
        pm.probs[(0, 0)] = 0.4;
        assert!(matches!(
            pm.validate(),
            Err(ArchiveError::BadRowSum { .. })
        ));
        let mut pm = sample_matrix();
        pm.probs[(1, 1)] = f64::NAN;
        // NaN makes the row non-finite before the sum check fires.
        assert!(matches!(
            pm.validate(),
            Err(ArchiveError::NonFiniteRow { .. })
        ));
        let mut pm = sample_matrix();
        pm.true_labels[0] = 9;
        assert!(matches!(
            pm.validate(),
            Err(ArchiveError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn archive_write_read_cycle() {
        let dir = TempDir::new().unwrap();
        let archive = ExperimentArchive::open(dir.path()).unwrap();
        let pm = sample_matrix();
        archive.write_probs(&pm).unwrap();
        let loaded = archive.read_probs("xception", 0).unwrap();
        assert_eq!(loaded.to_csv(), pm.to_csv());
        assert!(matches!(
            archive.read_probs("xception", 1),
            Err(ArchiveError::MissingCell(_))
        ));
    }

    #[test]
    fn manifest_updates_are_persistent() {
        let dir = TempDir::new().unwrap();
        let archive = ExperimentArchive::open(dir.path()).unwrap();
        assert!(archive.manifest().unwrap().cells.is_empty());
        archive
            .update_cell(
                "xception/fold0",
                CellStatus::Complete {
                    digest: "abc".to_string(),
                },
            )
            .unwrap();
        archive
            .update_cell(
                "vgg16/fold1",
                CellStatus::Failed {
                    digest: "def".to_string(),
                    error: "diverged".to_string(),
                },
            )
            .unwrap();
        let manifest = archive.manifest().unwrap();
        assert_eq!(manifest.cells.len(), 2);
        // cell_is_complete also requires the probability file on disk.
        assert!(!archive.cell_is_complete("xception", 0, "abc"));
        archive.write_probs(&sample_matrix()).unwrap();
        assert!(archive.cell_is_complete("xception", 0, "abc"));
        assert!(!archive.cell_is_complete("xception", 0, "other"));
    }

    #[test]
    fn format_prob_has_eight_significant_digits() {
        assert_eq!(format_prob(0.25), "2.5000000e-1");
        assert_eq!(format_prob(1.0), "1.0000000e0");
        assert_eq!(format_prob(0.0), "0.0000000e0");
        assert_eq!(format_prob(1.0 / 3.0), "3.3333333e-1");
    }
}
