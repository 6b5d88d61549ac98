//! Repeated random-split fold plans.
//!
//! The evaluation protocol is five *independent* stratified 70/30
//! train/test splits, not a disjoint-partition cross-validation. Each
//! fold draws its own shuffle from a ChaCha stream keyed by
//! `(seed, fold_index)`, so the same inputs reproduce the same plan
//! bit-for-bit on any platform.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetIndex};

/// One train/test split over record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// A seeded collection of independent stratified splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub n_folds: usize,
    pub train_fraction: f64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Number of folds in the plan.
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Access one fold by index.
    pub fn fold(&self, index: usize) -> Option<&Fold> {
        self.folds.get(index)
    }

    /// Serialize to the canonical JSON file format.
    pub fn to_json(&self) -> Result<String, DatasetError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse from the canonical JSON file format.
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Write the plan to a JSON file.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json()?).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Read a plan from a JSON file.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Check that every id in every fold resolves against `index` and that
    /// train/test are disjoint and jointly exhaustive per fold.
    pub fn validate(&self, index: &DatasetIndex) -> Result<(), DatasetError> {
        let all: std::collections::BTreeSet<&str> = index
            .records
            .iter()
            .map(|r| r.record_id.as_str())
            .collect();
        for fold in &self.folds {
            let mut seen = std::collections::BTreeSet::new();
            for id in fold.train.iter().chain(fold.test.iter()) {
                if !all.contains(id.as_str()) {
                    return Err(DatasetError::UnknownRecordId(id.clone()));
                }
                if !seen.insert(id.as_str()) {
                    return Err(DatasetError::DuplicateRecordId(id.clone()));
                }
            }
            if seen.len() != all.len() {
                let missing = all
                    .difference(&seen)
                    .next()
                    .expect("non-exhaustive fold has a missing id");
                return Err(DatasetError::UnknownRecordId(format!(
                    "fold does not cover record {missing}"
                )));
            }
        }
        Ok(())
    }
}

/// Build a seeded plan of `n_folds` independent stratified splits.
///
/// Per class, `floor(train_fraction * count)` records go to train and the
/// remainder to test, so every class is present in every test set.
pub fn make_fold_plan(
    index: &DatasetIndex,
    n_folds: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<FoldPlan, DatasetError> {
    if n_folds == 0 {
        return Err(DatasetError::NoFolds);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadTrainFraction {
            fraction: train_fraction,
        });
    }
    for (label, &count) in index.class_vocab.iter().zip(&index.counts) {
        if count == 0 {
            return Err(DatasetError::EmptyClass {
                class: label.name.clone(),
            });
        }
        if count < 2 {
            return Err(DatasetError::ClassTooSmall {
                class: label.name.clone(),
                count,
            });
        }
        let n_train = train_count(count, train_fraction);
        if n_train == count {
            return Err(DatasetError::EmptyTestStratum {
                class: label.name.clone(),
                fraction: train_fraction,
            });
        }
    }

    let per_class: Vec<Vec<&str>> = (0..index.n_classes())
        .map(|c| index.ids_of_class(c))
        .collect();

    let mut folds = Vec::with_capacity(n_folds);
    for fold_index in 0..n_folds {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(fold_index as u64);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class_id, ids) in per_class.iter().enumerate() {
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut rng);
            let n_train = train_count(index.counts[class_id], train_fraction);
            for (i, id) in shuffled.into_iter().enumerate() {
                if i < n_train {
                    train.push(id.to_string());
                } else {
                    test.push(id.to_string());
                }
            }
        }
        train.sort();
        test.sort();
        folds.push(Fold { train, test });
    }

    Ok(FoldPlan {
        seed,
        n_folds,
        train_fraction,
        folds,
    })
}

fn train_count(class_count: usize, train_fraction: f64) -> usize {
    (train_fraction * class_count as f64).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, testutil, DEFAULT_VOCAB};
    use tempfile::TempDir;

    fn small_index(counts: &[usize]) -> (TempDir, DatasetIndex) {
        let dir = TempDir::new().unwrap();
        testutil::write_corpus(dir.path(), &DEFAULT_VOCAB, counts, 8, 3);
        let index = load_dataset(dir.path(), &DEFAULT_VOCAB).unwrap();
        (dir, index)
    }

    #[test]
    fn symmetric_split_of_ten_per_class() {
        let (_dir, index) = small_index(&[10, 10, 10, 10]);
        let plan = make_fold_plan(&index, 3, 0.5, 11).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.train.len(), 20);
            assert_eq!(fold.test.len(), 20);
            for label in &index.class_vocab {
                let in_train = fold
                    .train
                    .iter()
                    .filter(|id| id.starts_with(&label.name))
                    .count();
                assert_eq!(in_train, 5, "class {} train stratum", label.name);
            }
        }
    }

    #[test]
    fn per_class_floor_sizes() {
        // floor(0.7 * [7, 5, 9, 6]) = [4, 3, 6, 4] -> train 17, test 10.
        let (_dir, index) = small_index(&[7, 5, 9, 6]);
        let plan = make_fold_plan(&index, 2, 0.7, 5).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.train.len(), 17);
            assert_eq!(fold.test.len(), 10);
        }
    }

    #[test]
    fn folds_are_disjoint_and_exhaustive() {
        let (_dir, index) = small_index(&[6, 4, 9, 7]);
        let plan = make_fold_plan(&index, 5, 0.7, 42).unwrap();
        plan.validate(&index).unwrap();
        for fold in &plan.folds {
            let train: std::collections::BTreeSet<_> = fold.train.iter().collect();
            let test: std::collections::BTreeSet<_> = fold.test.iter().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), index.len());
        }
    }

    #[test]
    fn same_seed_reproduces_byte_identical_plan() {
        let (_dir, index) = small_index(&[6, 4, 9, 7]);
        let a = make_fold_plan(&index, 5, 0.7, 42).unwrap();
        let b = make_fold_plan(&index, 5, 0.7, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn different_folds_differ_and_different_seeds_differ() {
        let (_dir, index) = small_index(&[10, 10, 10, 10]);
        let plan = make_fold_plan(&index, 5, 0.7, 42).unwrap();
        for i in 1..plan.folds.len() {
            assert_ne!(plan.folds[0], plan.folds[i], "fold 0 vs fold {i}");
        }
        let other = make_fold_plan(&index, 5, 0.7, 43).unwrap();
        assert_ne!(plan.folds[0], other.folds[0]);
    }

    #[test]
    fn round_trips_through_json_file() {
        let (_dir, index) = small_index(&[5, 5, 5, 5]);
        let plan = make_fold_plan(&index, 2, 0.6, 9).unwrap();
        let out = TempDir::new().unwrap();
        let path = out.path().join("folds.json");
        plan.save(&path).unwrap();
        let loaded = FoldPlan::load(&path).unwrap();
        assert_eq!(plan, loaded);
        loaded.validate(&index).unwrap();
    }

    #[test]
    fn rejects_degenerate_fractions_and_tiny_classes() {
        let (_dir, index) = small_index(&[5, 5, 5, 5]);
        assert!(matches!(
            make_fold_plan(&index, 5, 0.0, 1),
            Err(DatasetError::BadTrainFraction { .. })
        ));
        assert!(matches!(
            make_fold_plan(&index, 5, 1.0, 1),
            Err(DatasetError::BadTrainFraction { .. })
        ));
        // 0.99 of 5 floors to 4, leaving one test record: fine.
        assert!(make_fold_plan(&index, 1, 0.99, 1).is_ok());

        let (_dir2, small) = small_index(&[1, 5, 5, 5]);
        assert!(matches!(
            make_fold_plan(&small, 5, 0.7, 1),
            Err(DatasetError::ClassTooSmall { .. })
        ));
    }

    #[test]
    fn stratified_proportions_track_class_shares() {
        let (_dir, index) = small_index(&[12, 8, 20, 16]);
        let plan = make_fold_plan(&index, 5, 0.7, 17).unwrap();
        let n = index.len() as f64;
        for fold in &plan.folds {
            let train_total = fold.train.len() as f64;
            for label in &index.class_vocab {
                let in_train = fold
                    .train
                    .iter()
                    .filter(|id| id.starts_with(&label.name))
                    .count() as f64;
                let share = in_train / train_total;
                let corpus_share = index.counts[label.id] as f64 / n;
                assert!(
                    (share - corpus_share).abs() <= 1.0 / train_total,
                    "class {} share {share} vs corpus {corpus_share}",
                    label.name
                );
            }
        }
    }
}
