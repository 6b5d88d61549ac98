//! `poxscreen ingest`: index the corpus and report class statistics.

use std::fmt::Write as _;
use std::fs;

use clap::Args;

use poxscreen_core::dataset::{load_dataset, DatasetIndex};

use super::thousands;
use crate::config::RunConfig;
use crate::error::{internal, usage, CliError};

/// File name of the serialized corpus index.
pub const INDEX_FILE: &str = "dataset_index.json";

#[derive(Debug, Args)]
pub struct IngestArgs {}

pub fn run(mut cfg: RunConfig, _args: IngestArgs) -> Result<(), CliError> {
    cfg.finalize()?;
    let root = cfg.root()?;
    warn_unknown_subdirs(&cfg);
    let index = load_dataset(root, &cfg.class_names).map_err(usage)?;

    let out = cfg.out().to_path_buf();
    cfg.save_into(&out)?;
    let index_path = out.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| internal(format!("cannot serialize index: {e}")))?;
    fs::write(&index_path, text)
        .map_err(|e| internal(format!("cannot write {}: {e}", index_path.display())))?;

    for reject in &index.rejected {
        log::warn!("rejected {}: {}", reject.path.display(), reject.reason);
    }
    print!("{}", counts_table(&index));
    println!("\nwrote {}", index_path.display());
    Ok(())
}

/// Per-class counts in the Table-1 layout.
fn counts_table(index: &DatasetIndex) -> String {
    let mut out = String::new();
    out.push_str("| Class | Images |\n|---|---|\n");
    for (label, &count) in index.class_vocab.iter().zip(&index.counts) {
        let _ = writeln!(out, "| {} | {} |", label.name, thousands(count));
    }
    let total: usize = index.counts.iter().sum();
    let _ = writeln!(out, "| Total | {} |", thousands(total));
    if !index.rejected.is_empty() {
        let _ = writeln!(
            out,
            "\n{} file(s) failed to decode and were skipped.",
            index.rejected.len()
        );
    }
    out
}

/// Warn about root subdirectories that are not class folders; they are
/// ignored by indexing.
fn warn_unknown_subdirs(cfg: &RunConfig) {
    let Ok(root) = cfg.root() else { return };
    let Ok(entries) = fs::read_dir(root) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if !cfg.class_names.iter().any(|c| c == &name) {
            log::warn!("ignoring unknown class folder {name:?} under {}", root.display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use poxscreen_core::dataset::make_vocab;

    #[test]
    fn the_counts_table_mirrors_the_statistics_layout() {
        let index = DatasetIndex {
            records: Vec::new(),
            class_vocab: make_vocab(&["Chickenpox", "Measles", "Monkeypox", "Normal"]).unwrap(),
            counts: vec![329, 286, 587, 552],
            rejected: Vec::new(),
        };
        // The table prints stored counts; the records list is elided here.
        let table = counts_table(&index);
        assert!(table.contains("| Chickenpox | 329 |"));
        assert!(table.contains("| Monkeypox | 587 |"));
        assert!(table.contains("| Total | 1,754 |"));
    }
}
