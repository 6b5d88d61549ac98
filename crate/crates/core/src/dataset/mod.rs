//! Corpus indexing: class vocabulary, image records, and on-disk layout
//! validation.
//!
//! A corpus lives under one root directory with one subdirectory per class
//! (`<root>/<ClassName>/*.{jpg,jpeg,png}`). [`load_dataset`] walks that
//! layout, decodes every file once to prove it is a readable RGB raster,
//! and produces an immutable [`DatasetIndex`] with deterministic
//! (lexicographic-by-path) record order.

mod augment;
mod folds;

pub use augment::{AugmentationConfig, AugmentationStream, Batch, load_eval_batch, load_image};
pub use folds::{Fold, FoldPlan, make_fold_plan};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The four-class vocabulary of the screening corpus, in fixed
/// alphabetical order.
pub const DEFAULT_VOCAB: [&str; 4] = ["Chickenpox", "Measles", "Monkeypox", "Normal"];

/// File extensions accepted when scanning a class directory.
const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Errors raised while indexing or splitting a corpus.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("missing class directory for {class:?} under {root}")]
    MissingClassDir { class: String, root: PathBuf },
    #[error("class {class:?} has no decodable images")]
    EmptyClass { class: String },
    #[error("class {class:?} needs at least 2 records to split, has {count}")]
    ClassTooSmall { class: String, count: usize },
    #[error("train_fraction {fraction} must lie strictly between 0 and 1")]
    BadTrainFraction { fraction: f64 },
    #[error("invalid augmentation config: {0}")]
    BadAugmentation(String),
    #[error("train_fraction {fraction} leaves class {class:?} with an empty test stratum")]
    EmptyTestStratum { class: String, fraction: f64 },
    #[error("n_folds must be at least 1")]
    NoFolds,
    #[error("duplicate record id {0:?}")]
    DuplicateRecordId(String),
    #[error("fold plan references unknown record id {0:?}")]
    UnknownRecordId(String),
    #[error("class vocabulary must not be empty")]
    EmptyVocabulary,
    #[error("duplicate class name {0:?} in vocabulary")]
    DuplicateClassName(String),
    #[error("cannot decode image {path}: {detail}")]
    Undecodable { path: PathBuf, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One class in the vocabulary: a contiguous id paired with its name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    /// Contiguous index, 0-based, bijective with `name` within a vocabulary.
    pub id: usize,
    /// Directory name of the class under the corpus root.
    pub name: String,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}

/// Build a class vocabulary from an ordered list of names.
pub fn make_vocab<S: AsRef<str>>(names: &[S]) -> Result<Vec<ClassLabel>, DatasetError> {
    if names.is_empty() {
        return Err(DatasetError::EmptyVocabulary);
    }
    let mut seen = BTreeSet::new();
    let mut vocab = Vec::with_capacity(names.len());
    for (id, name) in names.iter().enumerate() {
        let name = name.as_ref().to_string();
        if !seen.insert(name.clone()) {
            return Err(DatasetError::DuplicateClassName(name));
        }
        vocab.push(ClassLabel { id, name });
    }
    Ok(vocab)
}

/// The default four-class vocabulary.
pub fn default_vocab() -> Vec<ClassLabel> {
    make_vocab(&DEFAULT_VOCAB).expect("default vocabulary is valid")
}

/// One labeled image on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Stable key, unique within an index: the class-relative path with
    /// forward slashes (e.g. `Monkeypox/m_0042.jpg`).
    pub record_id: String,
    /// Absolute path of the source file.
    pub source_path: PathBuf,
    /// Class of the record.
    pub label: ClassLabel,
}

/// A file that failed to decode during indexing, with the decoder's reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// The indexed corpus: ordered records, vocabulary, and per-class counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Records sorted lexicographically by `record_id`.
    pub records: Vec<ImageRecord>,
    /// Class vocabulary in id order.
    pub class_vocab: Vec<ClassLabel>,
    /// `counts[c]` is the number of records labeled with class id `c`.
    pub counts: Vec<usize>,
    /// Files that were present on disk but did not decode.
    pub rejected: Vec<RejectedFile>,
}

impl DatasetIndex {
    /// Total number of accepted records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of classes in the vocabulary.
    pub fn n_classes(&self) -> usize {
        self.class_vocab.len()
    }

    /// Look up a record by id.
    pub fn record(&self, record_id: &str) -> Option<&ImageRecord> {
        self.records
            .binary_search_by(|r| r.record_id.as_str().cmp(record_id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Resolve a list of record ids into records, in the given order.
    pub fn resolve<'a, S: AsRef<str>>(
        &'a self,
        ids: &[S],
    ) -> Result<Vec<&'a ImageRecord>, DatasetError> {
        ids.iter()
            .map(|id| {
                self.record(id.as_ref())
                    .ok_or_else(|| DatasetError::UnknownRecordId(id.as_ref().to_string()))
            })
            .collect()
    }

    /// Record ids of one class, in index order.
    pub fn ids_of_class(&self, class_id: usize) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.label.id == class_id)
            .map(|r| r.record_id.as_str())
            .collect()
    }
}

/// Index a class-foldered corpus.
///
/// Every class named in `vocab` must exist as a subdirectory of `root` and
/// contain at least one decodable image. Files that fail to decode are
/// collected into [`DatasetIndex::rejected`] rather than aborting the scan.
pub fn load_dataset<S: AsRef<str>>(
    root: &Path,
    vocab_names: &[S],
) -> Result<DatasetIndex, DatasetError> {
    let vocab = make_vocab(vocab_names)?;
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }

    let mut candidates: Vec<(String, PathBuf, ClassLabel)> = Vec::new();
    for label in &vocab {
        let class_dir = root.join(&label.name);
        if !class_dir.is_dir() {
            return Err(DatasetError::MissingClassDir {
                class: label.name.clone(),
                root: root.to_path_buf(),
            });
        }
        let entries = fs::read_dir(&class_dir).map_err(|source| DatasetError::Io {
            path: class_dir.clone(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| DatasetError::Io {
                path: class_dir.clone(),
                source,
            })?;
            let path = entry.path();
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            let file_name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let record_id = format!("{}/{}", label.name, file_name);
            candidates.push((record_id, path, label.clone()));
        }
    }

    // Decode every candidate once; rejects are reported, not fatal.
    let decoded: Vec<Result<(String, PathBuf, ClassLabel), RejectedFile>> = candidates
        .into_par_iter()
        .map(|(record_id, path, label)| match decodes_to_rgb(&path) {
            Ok(()) => Ok((record_id, path, label)),
            Err(reason) => Err(RejectedFile { path, reason }),
        })
        .collect();

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for item in decoded {
        match item {
            Ok((record_id, source_path, label)) => records.push(ImageRecord {
                record_id,
                source_path,
                label,
            }),
            Err(reject) => rejected.push(reject),
        }
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    rejected.sort_by(|a, b| a.path.cmp(&b.path));
    for pair in records.windows(2) {
        if pair[0].record_id == pair[1].record_id {
            return Err(DatasetError::DuplicateRecordId(pair[0].record_id.clone()));
        }
    }

    let mut counts = vec![0usize; vocab.len()];
    for record in &records {
        counts[record.label.id] += 1;
    }
    for (label, &count) in vocab.iter().zip(&counts) {
        if count == 0 {
            return Err(DatasetError::EmptyClass {
                class: label.name.clone(),
            });
        }
    }

    Ok(DatasetIndex {
        records,
        class_vocab: vocab,
        counts,
        rejected,
    })
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|ext| {
            let ext = ext.to_ascii_lowercase();
            IMAGE_EXTENSIONS.contains(&ext.as_str())
        })
        .unwrap_or(false)
}

fn decodes_to_rgb(path: &Path) -> Result<(), String> {
    let reader = image::ImageReader::open(path).map_err(|e| e.to_string())?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    // Any decoded raster converts to RGB8; zero-sized images are rejected.
    if img.width() == 0 || img.height() == 0 {
        return Err("image has zero width or height".to_string());
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::{Path, PathBuf};

    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Write a small synthetic corpus: `counts[i]` noise images for class
    /// `names[i]`, each `side`×`side`, seeded so corpora are reproducible.
    pub fn write_corpus(
        root: &Path,
        names: &[&str],
        counts: &[usize],
        side: u32,
        seed: u64,
    ) -> PathBuf {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for (name, &count) in names.iter().zip(counts) {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..count {
                let mut img = RgbImage::new(side, side);
                for pixel in img.pixels_mut() {
                    *pixel = Rgb([rng.gen(), rng.gen(), rng.gen()]);
                }
                img.save(dir.join(format!("{name}_{i:04}.png"))).unwrap();
            }
        }
        root.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn default_vocab_is_four_alphabetical_classes() {
        let vocab = default_vocab();
        let names: Vec<&str> = vocab.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["Chickenpox", "Measles", "Monkeypox", "Normal"]);
        for (i, label) in vocab.iter().enumerate() {
            assert_eq!(label.id, i);
        }
    }

    #[test]
    fn loads_minimal_corpus_with_one_image_per_class() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[1, 1, 1, 1], 8, 7);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        assert_eq!(index.counts, vec![1, 1, 1, 1]);
        assert_eq!(index.len(), 4);
        assert!(index.rejected.is_empty());
    }

    #[test]
    fn counts_match_on_disk_files() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[3, 2, 5, 4], 8, 7);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        assert_eq!(index.counts, vec![3, 2, 5, 4]);
        assert_eq!(index.len(), 14);
        assert_eq!(index.counts.iter().sum::<usize>(), index.len());
    }

    #[test]
    fn missing_class_directory_names_the_class() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(
            dir.path(),
            &["Chickenpox", "Measles", "Monkeypox"],
            &[1, 1, 1],
            8,
            7,
        );
        let err = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap_err();
        match err {
            DatasetError::MissingClassDir { class, .. } => assert_eq!(class, "Normal"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn undecodable_file_is_rejected_not_fatal() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[2, 1, 1, 1], 8, 7);
        std::fs::write(dir.path().join("Chickenpox/broken.jpg"), b"not an image").unwrap();
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        assert_eq!(index.counts, vec![2, 1, 1, 1]);
        assert_eq!(index.rejected.len(), 1);
        assert!(index.rejected[0].path.ends_with("broken.jpg"));
    }

    #[test]
    fn record_order_is_lexicographic_by_path() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[2, 2, 2, 2], 8, 7);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        let ids: Vec<&str> = index.records.iter().map(|r| r.record_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn unknown_extensions_are_ignored() {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, &[1, 1, 1, 1], 8, 7);
        std::fs::write(dir.path().join("Measles/notes.txt"), b"ignore me").unwrap();
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        assert_eq!(index.counts, vec![1, 1, 1, 1]);
        assert!(index.rejected.is_empty());
    }
}
