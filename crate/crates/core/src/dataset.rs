//! Metadata ingestion, composer filtering, stratified splitting and
//! training-segment sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pianoroll::{cut, PianoRoll, Segment, Variant, SEGMENT_BINS};

pub const DEFAULT_EVAL_SEGMENTS: usize = 90;
pub const DEFAULT_MIN_PIECES_EXCLUSIVE: usize = 16;

const REQUIRED_COLUMNS: [&str; 4] = ["canonical_composer", "canonical_title", "midi_filename", "duration"];
const BUILTIN_COMPOSERS: &str = include_str!("../data/composers.json");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("metadata file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata CSV is missing required column '{0}'")]
    MissingColumn(String),
    #[error("composer config: {0}")]
    ComposerConfig(String),
    #[error("split ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("class '{0}' has fewer than 2 pieces; cannot split")]
    ClassTooSmall(String),
    #[error("split leaks piece '{0}' into both train and test")]
    Leakage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub canonical_composer: String,
    pub canonical_title: String,
    pub midi_filename: String,
    pub duration_seconds: f64,
    pub source_split: String,
}

/// A CSV row that could not become a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowRejection {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub reason: String,
}

/// Reads metadata rows; rows with missing or invalid required fields are
/// returned as rejections instead of failing the load.
pub fn parse_metadata<R: Read>(reader: R) -> Result<(Vec<MetadataRecord>, Vec<RowRejection>), DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = col(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
    }
    let split_col = col("split");

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RowRejection { row: row_no, reason: e.to_string() });
                continue;
            }
        };
        let field = |j: usize| row.get(j).unwrap_or("").trim();
        let missing: Vec<&str> = REQUIRED_COLUMNS
            .iter()
            .zip(idx)
            .filter(|(_, j)| field(*j).is_empty())
            .map(|(n, _)| *n)
            .collect();
        if !missing.is_empty() {
            rejected.push(RowRejection { row: row_no, reason: format!("missing {}", missing.join(", ")) });
            continue;
        }
        let duration = match field(idx[3]).parse::<f64>() {
            Ok(d) if d > 0.0 && d.is_finite() => d,
            _ => {
                rejected.push(RowRejection { row: row_no, reason: format!("invalid duration '{}'", field(idx[3])) });
                continue;
            }
        };
        records.push(MetadataRecord {
            canonical_composer: field(idx[0]).to_string(),
            canonical_title: field(idx[1]).to_string(),
            midi_filename: field(idx[2]).to_string(),
            duration_seconds: duration,
            source_split: split_col.map(|j| field(j).to_string()).unwrap_or_default(),
        });
    }
    Ok((records, rejected))
}

/// Loads a metadata CSV, logging rejected rows.
pub fn load_metadata(path: &Path) -> Result<Vec<MetadataRecord>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (records, rejected) = parse_metadata(std::io::BufReader::new(file))?;
    for r in &rejected {
        log::warn!("{}: row {} rejected: {}", path.display(), r.row, r.reason);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerInfo {
    pub name: String,
    #[serde(default)]
    pub short: Option<String>,
    pub birth_year: i32,
    pub era: String,
}

/// Composer reference data: birth years order the label vocabulary and eras
/// define confusion-matrix blocks. Entries with equal birth years keep file
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerConfig {
    pub composers: Vec<ComposerInfo>,
}

impl ComposerConfig {
    /// The bundled table covering the MAESTRO piano composers.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_COMPOSERS).expect("bundled composer table parses")
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::ComposerConfig(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, name: &str) -> Option<&ComposerInfo> {
        self.composers.iter().find(|c| c.name == name)
    }

    fn rank(&self, name: &str) -> Option<(i32, usize)> {
        self.composers
            .iter()
            .position(|c| c.name == name)
            .map(|i| (self.composers[i].birth_year, i))
    }

    /// Contiguous era runs over `vocab` (which is in birth order).
    pub fn era_blocks(&self, vocab: &[String]) -> Vec<EraBlock> {
        let mut blocks: Vec<EraBlock> = Vec::new();
        for (i, name) in vocab.iter().enumerate() {
            let era = self.get(name).map_or_else(|| "Unknown".to_string(), |c| c.era.clone());
            match blocks.last_mut() {
                Some(b) if b.era == era && b.end == i => b.end = i + 1,
                _ => blocks.push(EraBlock { era, start: i, end: i + 1 }),
            }
        }
        blocks
    }
}

/// A run of class indices `[start, end)` sharing an era.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EraBlock {
    pub era: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    /// A composer field containing this string names several composers.
    pub multi_composer_separator: String,
    /// Composers need strictly more unique titles than this.
    pub min_pieces_exclusive: usize,
    pub n_eval_segments: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            multi_composer_separator: "/".to_string(),
            min_pieces_exclusive: DEFAULT_MIN_PIECES_EXCLUSIVE,
            n_eval_segments: DEFAULT_EVAL_SEGMENTS,
        }
    }
}

/// One unique (composer, title) work with its representative recording.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Piece {
    pub composer_label: usize,
    pub composer: String,
    pub canonical_title: String,
    pub midi_filename: String,
    pub n_eval_segments: usize,
}

impl Piece {
    /// Stable identifier: the representative recording's path.
    pub fn id(&self) -> &str {
        &self.midi_filename
    }

    fn key(&self) -> (&str, &str) {
        (&self.composer, &self.canonical_title)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPieces {
    /// Composer names, index = class label, ascending birth year.
    pub label_vocab: Vec<String>,
    /// `by_class[label]` sorted by title.
    pub by_class: Vec<Vec<Piece>>,
}

impl LabeledPieces {
    pub fn total(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }
}

/// Drops multi-composer rows, deduplicates titles per composer, keeps
/// composers with more than `min_pieces_exclusive` titles and labels them in
/// birth-year order. Unknown composers sort after known ones, by name.
pub fn filter_and_label(records: &[MetadataRecord], composers: &ComposerConfig, rules: &FilterRules) -> LabeledPieces {
    let mut works: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    for r in records {
        if r.canonical_composer.contains(rules.multi_composer_separator.as_str()) {
            continue;
        }
        let rep = works
            .entry(r.canonical_composer.as_str())
            .or_default()
            .entry(r.canonical_title.as_str())
            .or_insert(r.midi_filename.as_str());
        if r.midi_filename.as_str() < *rep {
            *rep = r.midi_filename.as_str();
        }
    }
    let mut kept: Vec<(&str, BTreeMap<&str, &str>)> = works
        .into_iter()
        .filter(|(_, titles)| titles.len() > rules.min_pieces_exclusive)
        .collect();
    for (name, _) in &kept {
        if composers.rank(name).is_none() {
            log::warn!("composer '{name}' has no birth year; ordered after known composers");
        }
    }
    kept.sort_by(|a, b| match (composers.rank(a.0), composers.rank(b.0)) {
        (Some(x), Some(y)) => x.cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(b.0),
    });

    let label_vocab = kept.iter().map(|(n, _)| n.to_string()).collect();
    let by_class = kept
        .iter()
        .enumerate()
        .map(|(label, (composer, titles))| {
            titles
                .iter()
                .map(|(title, file)| Piece {
                    composer_label: label,
                    composer: composer.to_string(),
                    canonical_title: title.to_string(),
                    midi_filename: file.to_string(),
                    n_eval_segments: rules.n_eval_segments,
                })
                .collect()
        })
        .collect();
    LabeledPieces { label_vocab, by_class }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub label_vocab: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<Piece>,
    pub test: Vec<Piece>,
}

/// Per-class `(train, test)` counts.
pub type ClassCounts = Vec<(usize, usize)>;

impl SplitManifest {
    pub fn n_classes(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut counts = vec![(0, 0); self.n_classes()];
        for p in &self.train {
            counts[p.composer_label].0 += 1;
        }
        for p in &self.test {
            counts[p.composer_label].1 += 1;
        }
        counts
    }

    /// Fails when any (composer, title) work appears on both sides.
    pub fn check_disjoint(&self) -> Result<(), DatasetError> {
        let train: HashSet<(&str, &str)> = self.train.iter().map(Piece::key).collect();
        match self.test.iter().find(|p| train.contains(&p.key())) {
            Some(p) => Err(DatasetError::Leakage(p.canonical_title.clone())),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// All pieces, train first.
    pub fn pieces(&self) -> impl Iterator<Item = &Piece> {
        self.train.iter().chain(&self.test)
    }

    pub fn piece_index(&self) -> HashMap<&str, &Piece> {
        self.pieces().map(|p| (p.id(), p)).collect()
    }
}

/// Training share of a class: `floor(ratio × n)`, kept within `[1, n − 1]`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let raw = (ratio * n as f64 + 1e-9).floor() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded per-class shuffle, then [`train_count`] pieces of each class go to
/// training. Classes are visited in label order from one generator.
pub fn stratified_split(labeled: &LabeledPieces, ratio: f64, seed: u64) -> Result<SplitManifest, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, pieces) in labeled.by_class.iter().enumerate() {
        if pieces.len() < 2 {
            return Err(DatasetError::ClassTooSmall(labeled.label_vocab[label].clone()));
        }
        let mut shuffled = pieces.clone();
        shuffled.shuffle(&mut rng);
        let k = train_count(shuffled.len(), ratio);
        test.extend(shuffled.split_off(k));
        train.extend(shuffled);
    }
    let manifest = SplitManifest {
        label_vocab: labeled.label_vocab.clone(),
        seed,
        ratio,
        train,
        test,
    };
    manifest.check_disjoint()?;
    Ok(manifest)
}

/// Uniform random window start over `[0, max(T − 400, 0)]`.
pub fn sample_start<R: Rng + ?Sized>(n_bins: usize, rng: &mut R) -> usize {
    rng.random_range(0..=n_bins.saturating_sub(SEGMENT_BINS))
}

/// Cuts one randomly placed training window from a piece's roll.
pub fn sample_training_segment<R: Rng + ?Sized>(roll: &PianoRoll, piece: &Piece, variant: Variant, rng: &mut R) -> Segment {
    let start = sample_start(roll.n_bins(), rng);
    cut(roll, piece.id(), start, variant)
}
