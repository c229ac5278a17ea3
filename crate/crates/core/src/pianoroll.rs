//! Onset/frame piano rolls, fixed-length segments and input variants.
//!
//! A roll has one row per 0.05 s time bin and one column per MIDI pitch.
//! The onset plane marks the bin holding each note's start; the frame plane
//! holds the note's velocity in every bin its sounding interval touches.

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smf::NoteEvent;

pub const BIN_SECONDS: f64 = 0.05;
pub const BINS_PER_SECOND: f64 = 20.0;
pub const PITCHES: usize = 128;
/// 20 s at 0.05 s per bin.
pub const SEGMENT_BINS: usize = 400;

const CACHE_MAGIC: [u8; 4] = *b"CFPR";
const CACHE_VERSION: u32 = 1;
const CACHE_HEADER_LEN: usize = 16;
// Absorbs float noise from tick→seconds conversion so that, e.g., 0.15 s
// lands in bin 3 rather than 2.
const BIN_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RollError {
    #[error("roll cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("roll planes have inconsistent sizes: {0}")]
    Shape(String),
    #[error("unknown input variant '{0}' (expected full, onset-omitted or frame-binarized)")]
    UnknownVariant(String),
    #[error("no encoded roll for piece '{0}'")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PianoRoll {
    n_bins: usize,
    onset: Vec<u8>,
    frame: Vec<u8>,
}

impl PianoRoll {
    pub fn zeros(n_bins: usize) -> Self {
        Self {
            n_bins,
            onset: vec![0; n_bins * PITCHES],
            frame: vec![0; n_bins * PITCHES],
        }
    }

    /// Builds a roll from row-major `[n_bins × 128]` planes.
    pub fn from_planes(onset: Vec<u8>, frame: Vec<u8>) -> Result<Self, RollError> {
        if onset.len() != frame.len() || onset.len() % PITCHES != 0 {
            return Err(RollError::Shape(format!(
                "onset {} values, frame {} values",
                onset.len(),
                frame.len()
            )));
        }
        Ok(Self {
            n_bins: onset.len() / PITCHES,
            onset,
            frame,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn onset(&self, t: usize, pitch: usize) -> u8 {
        self.onset[t * PITCHES + pitch]
    }

    pub fn frame(&self, t: usize, pitch: usize) -> u8 {
        self.frame[t * PITCHES + pitch]
    }

    pub fn onset_plane(&self) -> &[u8] {
        &self.onset
    }

    pub fn frame_plane(&self) -> &[u8] {
        &self.frame
    }

    /// Copy with every nonzero frame velocity replaced by 1.
    pub fn binarized(&self) -> Self {
        Self {
            n_bins: self.n_bins,
            onset: self.onset.clone(),
            frame: self.frame.iter().map(|&v| u8::from(v > 0)).collect(),
        }
    }

    /// Checks the value ranges and that every onset bin is sounding.
    pub fn is_consistent(&self) -> bool {
        self.onset.len() == self.n_bins * PITCHES
            && self.frame.len() == self.onset.len()
            && self
                .onset
                .iter()
                .zip(&self.frame)
                .all(|(&o, &f)| o <= 1 && f <= 127 && (o == 0 || f > 0))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeDiagnostics {
    pub rejected_notes: usize,
}

fn onset_bin(seconds: f64) -> usize {
    (seconds * BINS_PER_SECOND + BIN_EPS).floor() as usize
}

fn end_bin(seconds: f64) -> usize {
    (seconds * BINS_PER_SECOND - BIN_EPS).ceil().max(0.0) as usize
}

/// Encodes notes into a piano roll. See [`encode_with_diagnostics`].
pub fn encode(notes: &[NoteEvent]) -> PianoRoll {
    encode_with_diagnostics(notes).0
}

/// Encodes notes into a piano roll, reporting notes that were rejected
/// (pitch above 127, negative or non-finite times, empty intervals).
///
/// Frame bins span every bin whose interval intersects `[onset, offset)`;
/// overlapping notes keep the larger velocity.
pub fn encode_with_diagnostics(notes: &[NoteEvent]) -> (PianoRoll, EncodeDiagnostics) {
    let mut diag = EncodeDiagnostics::default();
    let accepted: Vec<(usize, usize, usize, u8)> = notes
        .iter()
        .filter_map(|n| {
            let valid = usize::from(n.pitch) < PITCHES
                && n.onset_seconds.is_finite()
                && n.offset_seconds.is_finite()
                && n.onset_seconds >= 0.0
                && n.offset_seconds > n.onset_seconds
                && n.velocity > 0;
            if !valid {
                diag.rejected_notes += 1;
                return None;
            }
            let start = onset_bin(n.onset_seconds);
            let end = end_bin(n.offset_seconds).max(start + 1);
            Some((start, end, usize::from(n.pitch), n.velocity.min(127)))
        })
        .collect();
    if diag.rejected_notes > 0 {
        log::debug!("encoder rejected {} notes", diag.rejected_notes);
    }
    let n_bins = accepted.iter().map(|a| a.1).max().unwrap_or(0);
    let mut roll = PianoRoll::zeros(n_bins);
    for (start, end, pitch, velocity) in accepted {
        roll.onset[start * PITCHES + pitch] = 1;
        for t in start..end {
            let cell = &mut roll.frame[t * PITCHES + pitch];
            *cell = (*cell).max(velocity);
        }
    }
    (roll, diag)
}

/// Model input representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Onset channel plus velocity frames scaled to [0, 1].
    #[default]
    Full,
    /// Scaled velocity frames only.
    OnsetOmitted,
    /// Onset channel plus frames thresholded at v > 0.
    FrameBinarized,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::OnsetOmitted, Variant::FrameBinarized];

    pub fn channels(self) -> usize {
        match self {
            Variant::OnsetOmitted => 1,
            Variant::Full | Variant::FrameBinarized => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OnsetOmitted => "onset-omitted",
            Variant::FrameBinarized => "frame-binarized",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = RollError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(Variant::Full),
            "onset-omitted" => Ok(Variant::OnsetOmitted),
            "frame-binarized" => Ok(Variant::FrameBinarized),
            _ => Err(RollError::UnknownVariant(s.to_string())),
        }
    }
}

/// A `[channels × 400 × 128]` model input window.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub data: Vec<f32>,
    pub channels: usize,
    pub start_bin: usize,
    pub piece_id: String,
}

impl Segment {
    pub fn time_bins(&self) -> usize {
        self.data.len() / (self.channels * PITCHES)
    }
}

/// Evenly spaced window starts covering the piece, first at 0 and last at
/// `total_bins - 400`. Short pieces repeat start 0.
pub fn segment_positions(total_bins: usize, n_segments: usize) -> Vec<usize> {
    let span = total_bins.saturating_sub(SEGMENT_BINS) as f64;
    let denom = n_segments.saturating_sub(1).max(1) as f64;
    (0..n_segments)
        .map(|i| (i as f64 * span / denom).round() as usize)
        .collect()
}

/// Cuts the window `[start_bin, start_bin + 400)`, zero-padded past the end.
pub fn cut(roll: &PianoRoll, piece_id: &str, start_bin: usize, variant: Variant) -> Segment {
    let channels = variant.channels();
    let plane = SEGMENT_BINS * PITCHES;
    let mut data = vec![0f32; channels * plane];
    let end = (start_bin + SEGMENT_BINS).min(roll.n_bins);
    let frame_value = |v: u8| -> f32 {
        match variant {
            Variant::FrameBinarized => f32::from(u8::from(v > 0)),
            _ => f32::from(v) / 127.0,
        }
    };
    for t in start_bin..end {
        let src = t * PITCHES;
        let dst = (t - start_bin) * PITCHES;
        let onset = &roll.onset[src..src + PITCHES];
        let frame = &roll.frame[src..src + PITCHES];
        match variant {
            Variant::OnsetOmitted => {
                for p in 0..PITCHES {
                    data[dst + p] = frame_value(frame[p]);
                }
            }
            Variant::Full | Variant::FrameBinarized => {
                for p in 0..PITCHES {
                    data[dst + p] = f32::from(onset[p]);
                    data[plane + dst + p] = frame_value(frame[p]);
                }
            }
        }
    }
    Segment {
        data,
        channels,
        start_bin,
        piece_id: piece_id.to_string(),
    }
}

/// Serializes a roll in the cache layout.
///
/// Header (16 bytes, little-endian): magic `CFPR`, version `u32` (1),
/// bin count `u32`, reserved `u32` (0). Body: the onset plane then the frame
/// plane, each `bins × 128` bytes, row-major by time bin.
pub fn to_cache_bytes(roll: &PianoRoll) -> Vec<u8> {
    let mut out = Vec::with_capacity(CACHE_HEADER_LEN + 2 * roll.onset.len());
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(roll.n_bins as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&roll.onset);
    out.extend_from_slice(&roll.frame);
    out
}

pub fn from_cache_bytes(bytes: &[u8], path: &str) -> Result<PianoRoll, RollError> {
    let bad = |reason: &str| RollError::Cache {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < CACHE_HEADER_LEN {
        return Err(bad("shorter than header"));
    }
    if bytes[0..4] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    if word(4) != CACHE_VERSION {
        return Err(bad("unsupported version"));
    }
    let n_bins = word(8) as usize;
    let plane = n_bins * PITCHES;
    if bytes.len() != CACHE_HEADER_LEN + 2 * plane {
        return Err(bad("size does not match bin count"));
    }
    let body = &bytes[CACHE_HEADER_LEN..];
    let roll = PianoRoll {
        n_bins,
        onset: body[..plane].to_vec(),
        frame: body[plane..].to_vec(),
    };
    if !roll.is_consistent() {
        return Err(bad("values out of range"));
    }
    Ok(roll)
}

pub fn write_cache(roll: &PianoRoll, path: &Path) -> Result<(), RollError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_cache_bytes(roll))?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<PianoRoll, RollError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_cache_bytes(&bytes, &path.display().to_string())
}

/// Cache file for a piece id such as `2004/MIDI-Unprocessed_01.midi`;
/// path separators are flattened so every entry sits directly in `root`.
pub fn cache_path(root: &Path, piece_id: &str) -> PathBuf {
    let flat: String = piece_id
        .chars()
        .map(|c| if matches!(c, '/' | '\\' | ':') { '_' } else { c })
        .collect();
    root.join(format!("{flat}.roll"))
}

/// Where training and evaluation get rolls from.
pub trait RollSource: Sync {
    fn roll(&self, piece_id: &str) -> Result<Cow<'_, PianoRoll>, RollError>;
}

impl RollSource for HashMap<String, PianoRoll> {
    fn roll(&self, piece_id: &str) -> Result<Cow<'_, PianoRoll>, RollError> {
        self.get(piece_id)
            .map(Cow::Borrowed)
            .ok_or_else(|| RollError::Missing(piece_id.to_string()))
    }
}

/// Reads rolls lazily from a cache directory.
#[derive(Debug, Clone)]
pub struct CacheDir {
    pub root: PathBuf,
}

impl CacheDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, piece_id: &str) -> PathBuf {
        cache_path(&self.root, piece_id)
    }
}

impl RollSource for CacheDir {
    fn roll(&self, piece_id: &str) -> Result<Cow<'_, PianoRoll>, RollError> {
        let path = self.path_for(piece_id);
        if !path.exists() {
            return Err(RollError::Missing(piece_id.to_string()));
        }
        read_cache(&path).map(Cow::Owned)
    }
}
