//! The pipeline stages as library calls. Each stage writes its outputs with a
//! stamp (`artifacts.json`) holding the config hash and file digest, and skips
//! work whose stamped outputs are still intact unless forced.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use composer_forge_core::dataset::{
    filter_and_label, load_metadata, stratified_split, ComposerConfig, DatasetError, EraBlock, SplitManifest,
};
use composer_forge_core::eval::{
    ablation_csv, build_report, confusion_csv, per_class_f1_csv, predict_pieces, segment_sweep, variant_sweep,
    AblationRow, EvalReport, ReportContext,
};
use composer_forge_core::nn::{load_checkpoint, load_meta, save_checkpoint, CheckpointMeta, ResNet};
use composer_forge_core::parallel;
use composer_forge_core::pianoroll::{encode_with_diagnostics, read_cache, write_cache, CacheDir, Variant};
use composer_forge_core::smf::read_notes;
use composer_forge_core::train::{fit, log_csv};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, ExperimentConfig};
use crate::CliError;

pub const STAMP_FILE: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    config_hash: String,
    sha256: String,
}

/// Stamps of the artifacts in one directory, keyed by file name.
struct Stamps {
    dir: PathBuf,
    entries: BTreeMap<String, Stamp>,
}

impl Stamps {
    fn open(dir: &Path) -> Self {
        let entries = std::fs::read_to_string(dir.join(STAMP_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Self {
            dir: dir.to_path_buf(),
            entries,
        }
    }

    /// True when `name` exists, matches its recorded digest and was made under `hash`.
    fn fresh(&self, name: &str, hash: &str) -> bool {
        let Some(stamp) = self.entries.get(name) else { return false };
        stamp.config_hash == hash
            && std::fs::read(self.dir.join(name)).is_ok_and(|bytes| sha256_hex(&bytes) == stamp.sha256)
    }

    fn all_fresh(&self, names: &[&str], hash: &str) -> bool {
        names.iter().all(|n| self.fresh(n, hash))
    }

    fn write(&mut self, name: &str, bytes: &[u8], hash: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(name, hash)
    }

    /// Stamps a file some other writer produced.
    fn record(&mut self, name: &str, hash: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.entries.insert(
            name.to_string(),
            Stamp {
                config_hash: hash.to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        let path = self.dir.join(STAMP_FILE);
        let text = serde_json::to_string_pretty(&self.entries).expect("stamps serialize");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn file_name(path: &Path) -> Result<String, CliError> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn composers(cfg: &ExperimentConfig) -> Result<ComposerConfig, CliError> {
    match &cfg.data.composers {
        Some(path) => ComposerConfig::load(path).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(ComposerConfig::builtin()),
    }
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("split manifest {}: {e} (run `ingest` first)", path.display())))?;
    SplitManifest::from_json(&text).map_err(|e| CliError::Usage(format!("split manifest {}: {e}", path.display())))
}

/// Fills in the fields that follow from the data.
fn with_manifest(cfg: &ExperimentConfig, manifest: &SplitManifest) -> ExperimentConfig {
    let mut eff = cfg.clone();
    eff.model.n_classes = manifest.n_classes();
    eff
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: SplitManifest,
    /// Per-class piece counts in label order, for printing.
    pub table: String,
    pub skipped: bool,
}

/// Metadata CSV to split manifest.
pub fn cmd_ingest(cfg: &ExperimentConfig, force: bool) -> Result<Ingested, CliError> {
    cfg.validate()?;
    let out = &cfg.data.manifest;
    let dir = parent(out);
    let name = file_name(out)?;
    let hash = cfg.hash();
    let mut stamps = Stamps::open(&dir);
    let composers = composers(cfg)?;
    if !force && stamps.fresh(&name, &hash) {
        let manifest = load_manifest(out)?;
        let table = class_table(&manifest, &composers);
        return Ok(Ingested {
            manifest,
            table,
            skipped: true,
        });
    }
    let records = load_metadata(&cfg.data.metadata_csv).map_err(|e| match e {
        DatasetError::Io { .. } => CliError::Usage(e.to_string()),
        other => CliError::Core(other.into()),
    })?;
    let labeled = filter_and_label(&records, &composers, &cfg.filter_rules());
    if labeled.label_vocab.len() < 2 {
        return Err(CliError::Core(
            DatasetError::ComposerConfig(format!("{} composers pass the filter; need 2", labeled.label_vocab.len()))
                .into(),
        ));
    }
    let manifest = stratified_split(&labeled, cfg.split.ratio, cfg.split.seed)?;
    create_dir(&dir)?;
    stamps.write(&name, manifest.to_json().as_bytes(), &hash)?;
    log::info!("wrote {} ({} train, {} test)", out.display(), manifest.train.len(), manifest.test.len());
    let table = class_table(&manifest, &composers);
    Ok(Ingested {
        manifest,
        table,
        skipped: false,
    })
}

pub fn class_table(manifest: &SplitManifest, composers: &ComposerConfig) -> String {
    let mut out = format!("{:>5}  {:<36} {:>6} {:>6} {:>6}\n", "label", "composer (abb.)", "pieces", "train", "test");
    let counts = manifest.class_counts();
    for (label, (name, &(train, test))) in manifest.label_vocab.iter().zip(&counts).enumerate() {
        let short = composers.get(name).and_then(|c| c.short.clone());
        let shown = match short {
            Some(s) => format!("{name} ({s})"),
            None => name.clone(),
        };
        let _ = writeln!(out, "{label:>5}  {shown:<36} {:>6} {train:>6} {test:>6}", train + test);
    }
    let (train, test) = (manifest.train.len(), manifest.test.len());
    let _ = writeln!(out, "{:>5}  {:<36} {:>6} {train:>6} {test:>6}", "", "total", train + test);
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodeSummary {
    pub encoded: usize,
    pub skipped: usize,
    /// `(piece id, reason)` for files that could not be read or parsed.
    pub failures: Vec<(String, String)>,
}

enum EncodeOutcome {
    Encoded,
    Skipped,
    Failed(String),
}

/// Parses every manifest piece and caches its roll. Valid cache entries are
/// kept unless forced; a bad file is reported and the rest carry on.
pub fn cmd_encode(cfg: &ExperimentConfig, force: bool) -> Result<EncodeSummary, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let cache = CacheDir::new(&cfg.data.cache_dir);
    create_dir(&cache.root)?;
    let pieces: Vec<_> = manifest.pieces().collect();
    let outcomes = parallel::map(&pieces, |p| {
        let target = cache.path_for(p.id());
        if !force && read_cache(&target).is_ok() {
            return EncodeOutcome::Skipped;
        }
        let source = cfg.data.midi_root.join(&p.midi_filename);
        let bytes = match std::fs::read(&source) {
            Ok(b) => b,
            Err(e) => return EncodeOutcome::Failed(format!("{}: {e}", source.display())),
        };
        let notes = match read_notes(&bytes) {
            Ok(n) => n,
            Err(e) => return EncodeOutcome::Failed(format!("{}: {e}", source.display())),
        };
        let (roll, diag) = encode_with_diagnostics(&notes.notes);
        if diag.rejected_notes > 0 {
            log::warn!("{}: {} notes out of range", p.id(), diag.rejected_notes);
        }
        match write_cache(&roll, &target) {
            Ok(()) => EncodeOutcome::Encoded,
            Err(e) => EncodeOutcome::Failed(e.to_string()),
        }
    });
    let mut summary = EncodeSummary::default();
    for (p, outcome) in pieces.iter().zip(outcomes) {
        match outcome {
            EncodeOutcome::Encoded => summary.encoded += 1,
            EncodeOutcome::Skipped => summary.skipped += 1,
            EncodeOutcome::Failed(reason) => {
                log::error!("{}: {reason}", p.id());
                summary.failures.push((p.id().to_string(), reason));
            }
        }
    }
    Ok(summary)
}

pub const RUN_ARTIFACTS: [&str; 4] = ["config.json", "log.csv", "best.ckpt", "last.ckpt"];

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub best_epoch: Option<usize>,
    pub skipped: bool,
}

/// Trains one model and fills the run directory.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let eff = with_manifest(cfg, &manifest);
    eff.validate()?;
    let hash = eff.hash();
    let dir = &eff.data.run_dir;
    let mut stamps = Stamps::open(dir);
    if !force && stamps.all_fresh(&RUN_ARTIFACTS, &hash) {
        log::info!("{} is up to date", dir.display());
        return Ok(TrainSummary {
            run_dir: dir.clone(),
            config_hash: hash,
            best_epoch: None,
            skipped: true,
        });
    }
    create_dir(dir)?;
    stamps.write("config.json", eff.to_json().as_bytes(), &hash)?;
    let rolls = CacheDir::new(&eff.data.cache_dir);
    let out = fit(&manifest, &rolls, eff.variant, eff.model, &eff.train, eff.seed, |e| {
        log::info!("epoch {} loss {:.4} acc {:.3}", e.epoch, e.train_loss, e.train_acc);
    })
    .map_err(|e| match e {
        composer_forge_core::Error::Roll(r) => CliError::Usage(format!("{r} (run `encode` first)")),
        other => CliError::Core(other),
    })?;
    stamps.write("log.csv", log_csv(&out.log).as_bytes(), &hash)?;
    let last_epoch = out.log.len().checked_sub(1);
    for (name, mut model, epoch) in [("best.ckpt", out.best, Some(out.best_epoch)), ("last.ckpt", out.last, last_epoch)] {
        let meta = CheckpointMeta {
            epoch,
            config_hash: Some(hash.clone()),
            ..CheckpointMeta::new(eff.model, eff.variant)
        };
        let path = dir.join(name);
        save_checkpoint(&path, &mut model, &meta)?;
        stamps.record(name, &hash)?;
    }
    Ok(TrainSummary {
        run_dir: dir.clone(),
        config_hash: hash,
        best_epoch: Some(out.best_epoch),
        skipped: false,
    })
}

pub const EVAL_ARTIFACTS: [&str; 4] = ["config.json", "report.json", "confusion.csv", "per_class_f1.csv"];

/// Directory an evaluation at this variant and segment count writes to.
pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.run_dir.join("eval").join(format!("{}-{}", cfg.variant, cfg.n_eval_segments))
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.checkpoint.clone().unwrap_or_else(|| cfg.data.run_dir.join("best.ckpt"))
}

fn load_model(path: &Path, variant: Variant, n_classes: usize) -> Result<ResNet<f32>, CliError> {
    let meta = load_meta(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))?;
    if meta.variant != variant {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained on variant {}, not {variant}",
            path.display(),
            meta.variant
        )));
    }
    if meta.model.n_classes != n_classes {
        return Err(CliError::Usage(format!(
            "checkpoint {} has {} classes; the manifest has {n_classes}",
            path.display(),
            meta.model.n_classes
        )));
    }
    Ok(load_checkpoint::<f32>(path)?.0)
}

fn era_blocks(cfg: &ExperimentConfig, composers: &ComposerConfig, vocab: &[String]) -> Vec<EraBlock> {
    cfg.era_blocks.clone().unwrap_or_else(|| composers.era_blocks(vocab))
}

/// Scores the configured checkpoint on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, force: bool) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let eff = with_manifest(cfg, &manifest);
    let hash = eff.hash();
    let dir = eval_dir(&eff);
    let mut stamps = Stamps::open(&dir);
    if !force && stamps.all_fresh(&EVAL_ARTIFACTS, &hash) {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        return serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())));
    }
    let model = load_model(&checkpoint_path(&eff), eff.variant, manifest.n_classes())?;
    let composers = composers(&eff)?;
    let rolls = CacheDir::new(&eff.data.cache_dir);
    let preds = predict_pieces(&model, &manifest.test, &rolls, eff.n_eval_segments, eff.variant)?;
    let birth_years: Vec<i32> = manifest
        .label_vocab
        .iter()
        .map(|name| match composers.get(name) {
            Some(c) => c.birth_year,
            None => {
                log::warn!("no birth year for {name}; using 0");
                0
            }
        })
        .collect();
    let class_sizes: Vec<usize> = manifest.class_counts().iter().map(|&(train, _)| train).collect();
    let blocks = era_blocks(&eff, &composers, &manifest.label_vocab);
    let ctx = ReportContext {
        label_vocab: &manifest.label_vocab,
        birth_years: &birth_years,
        class_sizes: &class_sizes,
        era_blocks: &blocks,
        variant: eff.variant,
        n_segments: eff.n_eval_segments,
    };
    let mut report = build_report(&preds, &ctx)?;
    report.config_hash = Some(hash.clone());
    create_dir(&dir)?;
    stamps.write("config.json", eff.to_json().as_bytes(), &hash)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    stamps.write("report.json", json.as_bytes(), &hash)?;
    stamps.write("confusion.csv", confusion_csv(&report).as_bytes(), &hash)?;
    stamps.write("per_class_f1.csv", per_class_f1_csv(&report).as_bytes(), &hash)?;
    Ok(report)
}

pub fn ablation_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.run_dir.join("ablation")
}

/// Segment-count axis from one checkpoint, then the variant axis from one
/// checkpoint per listed variant. Nothing is retrained.
pub fn cmd_ablate(cfg: &ExperimentConfig, force: bool) -> Result<Vec<AblationRow>, CliError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let eff = with_manifest(cfg, &manifest);
    let hash = eff.hash();
    let dir = ablation_dir(&eff);
    let mut stamps = Stamps::open(&dir);
    if !force && stamps.all_fresh(&["config.json", "ablation.csv"], &hash) {
        let path = dir.join("ablation.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        return parse_ablation_csv(&text).ok_or_else(|| CliError::Usage(format!("{} is malformed", path.display())));
    }
    let k = manifest.n_classes();
    let rolls = CacheDir::new(&eff.data.cache_dir);
    let mut rows = Vec::new();
    if !eff.ablation.segment_grid.is_empty() {
        let model = load_model(&checkpoint_path(&eff), eff.variant, k)?;
        rows.extend(segment_sweep(&model, &manifest.test, &rolls, eff.variant, &eff.ablation.segment_grid)?);
    }
    let mut models = HashMap::new();
    for &v in &eff.ablation.variants {
        let path = eff
            .ablation
            .checkpoints
            .iter()
            .find(|(cv, _)| *cv == v)
            .map(|(_, p)| p.clone())
            .or_else(|| (v == eff.variant).then(|| checkpoint_path(&eff)));
        match path {
            Some(p) => {
                models.insert(v, load_model(&p, v, k)?);
            }
            None => log::error!("no checkpoint configured for variant {v}"),
        }
    }
    rows.extend(variant_sweep(&models, &eff.ablation.variants, &manifest.test, &rolls, eff.n_eval_segments)?);
    create_dir(&dir)?;
    stamps.write("config.json", eff.to_json().as_bytes(), &hash)?;
    stamps.write("ablation.csv", ablation_csv(&rows).as_bytes(), &hash)?;
    Ok(rows)
}

fn parse_ablation_csv(text: &str) -> Option<Vec<AblationRow>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let mut f = line.splitn(3, ',');
            Some(AblationRow {
                axis: f.next()?.to_string(),
                setting: f.next()?.to_string(),
                weighted_f1: f.next()?.parse().ok()?,
            })
        })
        .collect()
}

/// Note list of one MIDI file as JSON.
pub fn cmd_notes(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => CliError::Usage(format!("{}: {e}", path.display())),
        _ => CliError::io(path, e),
    })?;
    let notes = read_notes(&bytes)?;
    Ok(composer_forge_core::smf::notes_to_json(&notes.notes))
}
