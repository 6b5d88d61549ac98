//! Run configuration: one merged, fully resolved settings record.
//!
//! Settings come from four layers with precedence flags > config file
//! > environment > built-in defaults. Commands load the file (TOML or
//! JSON, decided by extension), overlay their flags, then call
//! [`RunConfig::finalize`], which fills the remaining gaps from
//! `POXSCREEN_OUT_DIR` / `POXSCREEN_WEIGHTS_DIR` and validates. The
//! resolved config is serialized verbatim into every output directory
//! so results carry their provenance.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use poxscreen_core::backbone::list_backbones;
use poxscreen_core::dataset::{make_vocab, DEFAULT_VOCAB};
use poxscreen_core::fusion::FusionMode;
use poxscreen_core::{FineTuneConfig, HeadConfig};

use crate::error::{internal, usage, CliError};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "POXSCREEN_OUT_DIR";
/// Environment variable naming the converted-weights directory.
pub const WEIGHTS_DIR_ENV: &str = "POXSCREEN_WEIGHTS_DIR";
/// File name of the provenance copy written into output directories.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// The merged configuration every command runs from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Corpus root with one subdirectory per class.
    pub dataset_root: Option<PathBuf>,
    /// Class vocabulary in id order.
    pub class_names: Vec<String>,
    /// Number of independent random splits.
    pub n_folds: usize,
    /// Fraction of each class assigned to training.
    pub train_fraction: f64,
    /// Seed of the fold plan.
    pub fold_seed: u64,
    /// Backbone ids to train; the single entry "all" expands to the
    /// full registry.
    pub backbones: Vec<String>,
    /// Decision-fusion rule for ensembles.
    pub fusion_mode: FusionMode,
    /// Archive and report root; `POXSCREEN_OUT_DIR`, then "runs", when
    /// unset.
    pub out_dir: Option<PathBuf>,
    /// Fine-tuning hyperparameters.
    pub train: FineTuneConfig,
    /// Universal classification head.
    pub head: HeadConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: None,
            class_names: DEFAULT_VOCAB.iter().map(|s| s.to_string()).collect(),
            n_folds: 5,
            train_fraction: 0.70,
            fold_seed: 42,
            backbones: vec!["all".to_string()],
            fusion_mode: FusionMode::ArgmaxConcat,
            out_dir: None,
            train: FineTuneConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl RunConfig {
    /// Built-in defaults, or the given TOML/JSON file over them.
    pub fn load(file: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = file else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("toml") => parse_toml(&text, path),
            Some("json") => parse_json(&text, path),
            _ => parse_toml(&text, path).or_else(|toml_err| {
                parse_json(&text, path).map_err(|json_err| {
                    usage(format!(
                        "config {} parses as neither TOML nor JSON\n  as TOML: {toml_err}\n  as JSON: {json_err}",
                        path.display()
                    ))
                })
            }),
        }
    }

    /// Fill environment-backed gaps and validate. Call after every flag
    /// overlay and before any pipeline stage runs.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.resolve_with(
            env::var_os(OUT_DIR_ENV).map(PathBuf::from),
            env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from),
        );
        self.validate()
    }

    /// Resolution step with the environment passed explicitly.
    fn resolve_with(&mut self, out_env: Option<PathBuf>, weights_env: Option<PathBuf>) {
        if self.out_dir.is_none() {
            self.out_dir = out_env.or_else(|| Some(PathBuf::from("runs")));
        }
        if self.train.weights_dir.is_none() {
            self.train.weights_dir = weights_env;
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        make_vocab(&self.class_names).map_err(usage)?;
        if self.head.n_classes != self.class_names.len() {
            return Err(usage(format!(
                "head.n_classes is {} but the vocabulary has {} classes",
                self.head.n_classes,
                self.class_names.len()
            )));
        }
        if self.n_folds == 0 {
            return Err(usage("n_folds must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(usage(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        if self.backbones.is_empty() {
            return Err(usage("backbones must name at least one registry id or \"all\""));
        }
        for id in &self.backbones {
            if id != "all" && !list_backbones().iter().any(|spec| spec.id == id) {
                return Err(usage(format!(
                    "unknown backbone id {id:?}; valid ids: all, {}",
                    registry_ids().join(", ")
                )));
            }
        }
        self.train.validate().map_err(usage)?;
        self.head.validate().map_err(usage)?;
        Ok(())
    }

    /// The backbone list with "all" expanded to the registry order.
    pub fn resolved_backbones(&self) -> Vec<String> {
        if self.backbones.iter().any(|id| id == "all") {
            registry_ids()
        } else {
            self.backbones.clone()
        }
    }

    /// The resolved output directory; only valid after [`finalize`].
    ///
    /// [`finalize`]: RunConfig::finalize
    pub fn out(&self) -> &Path {
        self.out_dir
            .as_deref()
            .expect("out_dir is resolved by finalize")
    }

    /// The dataset root, required by corpus-reading commands.
    pub fn root(&self) -> Result<&Path, CliError> {
        self.dataset_root.as_deref().ok_or_else(|| {
            usage("no dataset root; pass --root or set dataset_root in the config file")
        })
    }

    /// Write the provenance copy into `dir`, creating it.
    pub fn save_into(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| internal(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| internal(format!("cannot serialize run config: {e}")))?;
        fs::write(&path, text)
            .map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
    }
}

/// All registry backbone ids in registry order.
pub fn registry_ids() -> Vec<String> {
    list_backbones()
        .iter()
        .map(|spec| spec.id.to_string())
        .collect()
}

/// Split a comma-separated id list, dropping empty pieces.
pub fn parse_id_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_toml(text: &str, path: &Path) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn parse_json(text: &str, path: &Path) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn defaults_match_the_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.n_folds, 5);
        assert_eq!(cfg.train_fraction, 0.70);
        assert_eq!(cfg.fold_seed, 42);
        assert_eq!(cfg.backbones, ["all"]);
        assert_eq!(cfg.class_names.len(), 4);
        assert_eq!(cfg.fusion_mode, FusionMode::ArgmaxConcat);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.initial_lr, 1e-4);
    }

    #[test]
    fn toml_and_json_files_parse_to_the_same_config() {
        let dir = TempDir::new().unwrap();
        let toml_path = dir.path().join("run.toml");
        fs::write(
            &toml_path,
            "n_folds = 3\nbackbones = [\"xception\"]\n[train]\nmax_epochs = 2\n",
        )
        .unwrap();
        let json_path = dir.path().join("run.json");
        fs::write(
            &json_path,
            "{\"n_folds\": 3, \"backbones\": [\"xception\"], \"train\": {\"max_epochs\": 2}}",
        )
        .unwrap();

        let from_toml = RunConfig::load(Some(&toml_path)).unwrap();
        let from_json = RunConfig::load(Some(&json_path)).unwrap();
        assert_eq!(from_toml, from_json);
        assert_eq!(from_toml.n_folds, 3);
        assert_eq!(from_toml.train.max_epochs, 2);
        // Unset fields keep their defaults.
        assert_eq!(from_toml.train_fraction, 0.70);
        assert_eq!(from_toml.train.batch_size, 16);
    }

    #[test]
    fn extensionless_files_try_both_formats() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg");
        fs::write(&path, "{\"fold_seed\": 7}").unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap().fold_seed, 7);

        fs::write(&path, "fold_seed = 9").unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap().fold_seed, 9);

        fs::write(&path, "not: a config: at all [").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("as TOML"));
        assert!(err.to_string().contains("as JSON"));
    }

    #[test]
    fn malformed_and_missing_files_are_usage_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "n_folds = \"many\"").unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap_err().exit_code(), 2);
        let gone = dir.path().join("gone.toml");
        assert_eq!(RunConfig::load(Some(&gone)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn environment_fills_only_unset_fields() {
        let mut cfg = RunConfig::default();
        cfg.resolve_with(Some("/env/out".into()), Some("/env/weights".into()));
        assert_eq!(cfg.out_dir.as_deref(), Some(Path::new("/env/out")));
        assert_eq!(
            cfg.train.weights_dir.as_deref(),
            Some(Path::new("/env/weights"))
        );

        let mut cfg = RunConfig {
            out_dir: Some("/file/out".into()),
            ..RunConfig::default()
        };
        cfg.train.weights_dir = Some("/file/weights".into());
        cfg.resolve_with(Some("/env/out".into()), Some("/env/weights".into()));
        assert_eq!(cfg.out_dir.as_deref(), Some(Path::new("/file/out")));
        assert_eq!(
            cfg.train.weights_dir.as_deref(),
            Some(Path::new("/file/weights"))
        );

        let mut cfg = RunConfig::default();
        cfg.resolve_with(None, None);
        assert_eq!(cfg.out_dir.as_deref(), Some(Path::new("runs")));
        assert_eq!(cfg.train.weights_dir, None);
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let cases: Vec<(&str, RunConfig)> = vec![
            (
                "zero folds",
                RunConfig {
                    n_folds: 0,
                    ..RunConfig::default()
                },
            ),
            (
                "fraction one",
                RunConfig {
                    train_fraction: 1.0,
                    ..RunConfig::default()
                },
            ),
            (
                "no backbones",
                RunConfig {
                    backbones: vec![],
                    ..RunConfig::default()
                },
            ),
            (
                "unknown backbone",
                RunConfig {
                    backbones: vec!["resnet34".into()],
                    ..RunConfig::default()
                },
            ),
            (
                "vocabulary/head mismatch",
                RunConfig {
                    class_names: vec!["A".into(), "B".into()],
                    ..RunConfig::default()
                },
            ),
            (
                "duplicate class",
                RunConfig {
                    class_names: vec!["A".into(), "A".into(), "B".into(), "C".into()],
                    ..RunConfig::default()
                },
            ),
        ];
        for (what, mut cfg) in cases {
            let err = cfg.finalize().expect_err(what);
            assert_eq!(err.exit_code(), 2, "{what}");
        }
        let err = RunConfig {
            backbones: vec!["resnet34".into()],
            ..RunConfig::default()
        }
        .finalize()
        .unwrap_err();
        assert!(err.to_string().contains("resnet34"));
        assert!(err.to_string().contains("xception"), "lists valid ids");
    }

    #[test]
    fn all_expands_to_the_thirteen_registry_ids() {
        let cfg = RunConfig::default();
        let ids = cfg.resolved_backbones();
        assert_eq!(ids.len(), 13);
        assert_eq!(ids[0], "vgg16");
        assert_eq!(ids[12], "densenet169");

        let cfg = RunConfig {
            backbones: vec!["xception".into(), "densenet169".into()],
            ..RunConfig::default()
        };
        assert_eq!(cfg.resolved_backbones(), ["xception", "densenet169"]);
    }

    #[test]
    fn id_lists_split_on_commas() {
        assert_eq!(parse_id_list("a,b , c"), ["a", "b", "c"]);
        assert_eq!(parse_id_list("a,,b,"), ["a", "b"]);
        assert!(parse_id_list(" ,").is_empty());
    }

    #[test]
    fn the_provenance_copy_round_trips() {
        let dir = TempDir::new().unwrap();
        let mut cfg = RunConfig::default();
        cfg.finalize().unwrap();
        cfg.save_into(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(RUN_CONFIG_FILE)).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
