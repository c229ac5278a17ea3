//! Experiment configuration: JSON with every field defaulted, resolved to
//! absolute paths and echoed back next to the artifacts it produced.

use std::path::{Path, PathBuf};

use composer_forge_core::dataset::{EraBlock, FilterRules, DEFAULT_EVAL_SEGMENTS, DEFAULT_MIN_PIECES_EXCLUSIVE};
use composer_forge_core::eval::SEGMENT_GRID;
use composer_forge_core::nn::ModelConfig;
use composer_forge_core::pianoroll::Variant;
use composer_forge_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Overrides the configured roll cache directory.
pub const CACHE_ENV: &str = "COMPOSER_FORGE_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub metadata_csv: PathBuf,
    /// Directory the CSV's `midi_filename` column is relative to.
    pub midi_root: PathBuf,
    /// Birth years and eras; the built-in table when absent.
    pub composers: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub manifest: PathBuf,
    pub run_dir: PathBuf,
    /// Checkpoint scored by `eval`; the run's `best.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            metadata_csv: "maestro-v2.0.0/maestro-v2.0.0.csv".into(),
            midi_root: "maestro-v2.0.0".into(),
            composers: None,
            cache_dir: "cache/rolls".into(),
            manifest: "runs/split.json".into(),
            run_dir: "runs/default".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub ratio: f64,
    pub min_pieces_exclusive: usize,
    pub multi_composer_separator: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ratio: 0.7,
            min_pieces_exclusive: DEFAULT_MIN_PIECES_EXCLUSIVE,
            multi_composer_separator: "/".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub segment_grid: Vec<usize>,
    /// Variant axis; each entry needs a checkpoint trained on that variant.
    pub variants: Vec<Variant>,
    /// `(variant, checkpoint)`; the configured variant falls back to the run's best checkpoint.
    pub checkpoints: Vec<(Variant, PathBuf)>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            segment_grid: SEGMENT_GRID.to_vec(),
            variants: Vec::new(),
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    pub split: SplitConfig,
    pub variant: Variant,
    /// `in_channels` follows `variant`; `n_classes` follows the manifest.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds model initialisation, batch order and window sampling.
    pub seed: u64,
    pub n_eval_segments: usize,
    /// Era partition for the confusion analysis; derived from composer eras when absent.
    pub era_blocks: Option<Vec<EraBlock>>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            split: SplitConfig::default(),
            variant: Variant::Full,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            n_eval_segments: DEFAULT_EVAL_SEGMENTS,
            era_blocks: None,
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg.resolved(&base))
    }

    /// Joins relative paths onto `base` and applies the cache override.
    pub fn resolved(mut self, base: &Path) -> Self {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = absolute(&base.join(&*p));
            }
        };
        let d = &mut self.data;
        for p in [&mut d.metadata_csv, &mut d.midi_root, &mut d.cache_dir, &mut d.manifest, &mut d.run_dir] {
            abs(p);
        }
        for p in [&mut d.composers, &mut d.checkpoint].into_iter().flatten() {
            abs(p);
        }
        for (_, p) in &mut self.ablation.checkpoints {
            abs(p);
        }
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            d.cache_dir = absolute(Path::new(&dir));
        }
        self.model.in_channels = self.variant.channels();
        self
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return usage(format!("split.ratio {} outside (0, 1)", self.split.ratio));
        }
        if self.n_eval_segments == 0 {
            return usage("n_eval_segments must be positive".into());
        }
        if self.ablation.segment_grid.contains(&0) {
            return usage("ablation.segment_grid contains 0".into());
        }
        if self.model.in_channels != self.variant.channels() {
            return usage(format!(
                "model.in_channels {} does not match variant {}",
                self.model.in_channels, self.variant
            ));
        }
        let mut probe = self.model;
        // class count comes from the manifest; any valid value works here
        probe.n_classes = probe.n_classes.max(2);
        probe.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Usage(format!("train: {e}")))?;
        Ok(())
    }

    pub fn filter_rules(&self) -> FilterRules {
        FilterRules {
            multi_composer_separator: self.split.multi_composer_separator.clone(),
            min_pieces_exclusive: self.split.min_pieces_exclusive,
            n_eval_segments: self.n_eval_segments,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
