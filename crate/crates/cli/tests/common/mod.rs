//! Synthetic experiment workspaces shared by the integration targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use composer_forge_cli::ExperimentConfig;
use composer_forge_core::testkit::SyntheticCorpus;
use serde_json::{json, Value};
use tempfile::TempDir;

pub struct Workspace {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl Workspace {
    /// Writes `corpus` and a config pointing at it; `overrides` is merged
    /// into the generated config.
    pub fn new(corpus: &SyntheticCorpus, overrides: Value) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let files = corpus.write(dir.path()).expect("corpus written");
        let mut cfg = json!({
            "data": {
                "metadata_csv": files.csv,
                "midi_root": files.midi_root,
                "composers": files.composers,
                "cache_dir": "cache",
                "manifest": "runs/split.json",
                "run_dir": "runs/main",
            },
            "split": { "seed": 1, "ratio": 0.7, "min_pieces_exclusive": 0 },
            "model": { "depth": 18, "width_multiplier": 0.0625 },
            "train": { "batch_size": 4, "epochs": 2, "val_segments": 2 },
            "n_eval_segments": 4,
        });
        merge(&mut cfg, overrides);
        let config_path = dir.path().join("config.json");
        std::fs::write(&config_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Self { dir, config_path }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> ExperimentConfig {
        ExperimentConfig::load(&self.config_path).expect("config loads")
    }
}

pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}
