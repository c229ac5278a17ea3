//! Segment-level prediction, piece-level majority voting and metrics.
//!
//! A piece is scored by cutting evenly spaced 400-bin windows, classifying
//! each, and taking the most voted class. Vote ties go to the class with the
//! larger summed probability, then to the lower class index.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EraBlock, Piece};
use crate::nn::{ResNet, Tensor};
use crate::parallel;
use crate::pianoroll::{cut, segment_positions, PianoRoll, RollSource, Variant, PITCHES, SEGMENT_BINS};

/// Segments classified per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Segment counts of the ablation grid.
pub const SEGMENT_GRID: [usize; 6] = [5, 10, 20, 30, 60, 90];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("confusion matrix is empty or all zero")]
    EmptyConfusion,
    #[error("confusion matrix is not square")]
    NotSquare,
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("rank variance is zero")]
    ZeroVariance,
    #[error("era blocks do not partition {classes} classes: {reason}")]
    BadEraBlocks { classes: usize, reason: String },
    #[error("n_segments must be at least 1")]
    NoSegments,
    #[error("no segment probabilities to vote on")]
    NoVotes,
    #[error("model takes {model} input channels but variant {variant} has {got}")]
    VariantMismatch { model: usize, variant: Variant, got: usize },
    #[error("missing checkpoint for variant {0}")]
    MissingCheckpoint(Variant),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecePrediction {
    pub piece_id: String,
    pub true_label: usize,
    pub segment_probs: Vec<Vec<f64>>,
    pub vote_counts: Vec<usize>,
    pub final_label: usize,
}

fn argmax(v: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Majority vote over per-segment probability vectors; returns
/// `(vote_counts, final_label)`.
pub fn vote(segment_probs: &[Vec<f64>]) -> Result<(Vec<usize>, usize), EvalError> {
    let k = segment_probs.first().ok_or(EvalError::NoVotes)?.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0f64; k];
    for p in segment_probs {
        if p.len() != k {
            return Err(EvalError::LengthMismatch(p.len(), k));
        }
        counts[argmax(p)] += 1;
        for (s, &v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut best: Option<usize> = None;
    for c in (0..k).filter(|&c| counts[c] == top) {
        match best {
            Some(b) if sums[c] <= sums[b] => {}
            _ => best = Some(c),
        }
    }
    Ok((counts, best.unwrap_or(0)))
}

fn check_variant(model: &ResNet<f32>, variant: Variant) -> Result<(), EvalError> {
    let expected = model.config().in_channels;
    if expected != variant.channels() {
        return Err(EvalError::VariantMismatch {
            model: expected,
            variant,
            got: variant.channels(),
        });
    }
    Ok(())
}

/// Class probabilities for windows starting at each of `starts`.
pub fn segment_probs(
    model: &ResNet<f32>,
    roll: &PianoRoll,
    piece_id: &str,
    starts: &[usize],
    variant: Variant,
) -> crate::Result<Vec<Vec<f64>>> {
    check_variant(model, variant)?;
    let channels = variant.channels();
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * channels * SEGMENT_BINS * PITCHES);
        for &s in chunk {
            data.extend_from_slice(&cut(roll, piece_id, s, variant).data);
        }
        let x = Tensor::from_vec(&[chunk.len(), channels, SEGMENT_BINS, PITCHES], data)?;
        let probs = model.predict_proba(&x)?;
        let k = model.config().n_classes;
        out.extend(probs.data().chunks(k).map(|r| r.iter().map(|&v| f64::from(v)).collect()));
    }
    Ok(out)
}

/// Classifies `n_segments` evenly spaced windows and votes.
pub fn predict_piece(
    model: &ResNet<f32>,
    roll: &PianoRoll,
    piece: &Piece,
    n_segments: usize,
    variant: Variant,
) -> crate::Result<PiecePrediction> {
    if n_segments == 0 {
        return Err(EvalError::NoSegments.into());
    }
    let starts = segment_positions(roll.n_bins(), n_segments);
    let probs = segment_probs(model, roll, piece.id(), &starts, variant)?;
    prediction_from_probs(piece, probs)
}

fn prediction_from_probs(piece: &Piece, segment_probs: Vec<Vec<f64>>) -> crate::Result<PiecePrediction> {
    let (vote_counts, final_label) = vote(&segment_probs)?;
    Ok(PiecePrediction {
        piece_id: piece.id().to_string(),
        true_label: piece.composer_label,
        segment_probs,
        vote_counts,
        final_label,
    })
}

/// [`predict_piece`] for every piece, parallel over pieces.
pub fn predict_pieces(
    model: &ResNet<f32>,
    pieces: &[Piece],
    rolls: &dyn RollSource,
    n_segments: usize,
    variant: Variant,
) -> crate::Result<Vec<PiecePrediction>> {
    check_variant(model, variant)?;
    parallel::map(pieces, |p| {
        let roll = rolls.roll(p.id())?;
        predict_piece(model, &roll, p, n_segments, variant)
    })
    .into_iter()
    .collect()
}

/// `cm[true][pred]` counts.
pub fn confusion_matrix(n_classes: usize, pairs: &[(usize, usize)]) -> Result<Vec<Vec<u64>>, EvalError> {
    let mut cm = vec![vec![0u64; n_classes]; n_classes];
    for &(t, p) in pairs {
        for label in [t, p] {
            if label >= n_classes {
                return Err(EvalError::LabelOutOfRange { label, classes: n_classes });
            }
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

fn check_square(cm: &[Vec<u64>]) -> Result<usize, EvalError> {
    let k = cm.len();
    if k == 0 || cm.iter().any(|r| r.len() != k) {
        return Err(EvalError::NotSquare);
    }
    Ok(k)
}

/// Per-class F1 with precision/recall taken as 0 where undefined.
pub fn per_class_f1(cm: &[Vec<u64>]) -> Result<Vec<f64>, EvalError> {
    let k = check_square(cm)?;
    Ok((0..k)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let row: u64 = cm[c].iter().sum();
            let col: u64 = cm.iter().map(|r| r[c]).sum();
            let p = if col == 0 { 0.0 } else { tp / col as f64 };
            let r = if row == 0 { 0.0 } else { tp / row as f64 };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1 (support = row sum).
pub fn weighted_f1(cm: &[Vec<u64>]) -> Result<f64, EvalError> {
    let f1 = per_class_f1(cm)?;
    let supports: Vec<u64> = cm.iter().map(|r| r.iter().sum()).collect();
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let num: f64 = f1.iter().zip(&supports).map(|(f, &s)| f * s as f64).sum();
    Ok(num / total as f64)
}

/// 1-based ranks with ties given their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::TooFewPoints(x.len()));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Off-diagonal confusion cells split by whether the two classes share an era.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EraAnalysis {
    /// Nonzero off-diagonal cells inside an era block.
    pub within_era: usize,
    /// Nonzero off-diagonal cells across blocks.
    pub cross_era: usize,
    pub misclassified_pairs: usize,
}

pub fn era_analysis(cm: &[Vec<u64>], blocks: &[EraBlock]) -> Result<EraAnalysis, EvalError> {
    let k = check_square(cm)?;
    let bad = |reason: String| EvalError::BadEraBlocks { classes: k, reason };
    let mut block_of = vec![usize::MAX; k];
    for (b, block) in blocks.iter().enumerate() {
        if block.start >= block.end || block.end > k {
            return Err(bad(format!("block {} has range {}..{}", block.era, block.start, block.end)));
        }
        for c in block.start..block.end {
            if block_of[c] != usize::MAX {
                return Err(bad(format!("class {c} is in two blocks")));
            }
            block_of[c] = b;
        }
    }
    if let Some(c) = block_of.iter().position(|&b| b == usize::MAX) {
        return Err(bad(format!("class {c} is in no block")));
    }
    let mut out = EraAnalysis {
        within_era: 0,
        cross_era: 0,
        misclassified_pairs: 0,
    };
    for (t, row) in cm.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            if t == p || n == 0 {
                continue;
            }
            out.misclassified_pairs += 1;
            if block_of[t] == block_of[p] {
                out.within_era += 1;
            } else {
                out.cross_era += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_vocab: Vec<String>,
    pub variant: Variant,
    pub n_segments_used: usize,
    pub n_pieces: usize,
    pub accuracy: f64,
    /// `confusion[true][pred]`, classes in birth-year order.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_f1: Vec<f64>,
    pub weighted_f1: f64,
    /// `None` when either side has zero rank variance.
    pub spearman_birthyear: Option<f64>,
    pub spearman_classsize: Option<f64>,
    pub era_blocks: Vec<EraBlock>,
    pub era: EraAnalysis,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Inputs for turning predictions into a report.
#[derive(Debug, Clone)]
pub struct ReportContext<'a> {
    pub label_vocab: &'a [String],
    pub birth_years: &'a [i32],
    /// Training pieces per class.
    pub class_sizes: &'a [usize],
    pub era_blocks: &'a [EraBlock],
    pub variant: Variant,
    pub n_segments: usize,
}

pub fn build_report(predictions: &[PiecePrediction], ctx: &ReportContext<'_>) -> Result<EvalReport, EvalError> {
    let k = ctx.label_vocab.len();
    for (name, len) in [("birth_years", ctx.birth_years.len()), ("class_sizes", ctx.class_sizes.len())] {
        if len != k {
            log::debug!("{name} has {len} entries for {k} classes");
            return Err(EvalError::LengthMismatch(len, k));
        }
    }
    let pairs: Vec<(usize, usize)> = predictions.iter().map(|p| (p.true_label, p.final_label)).collect();
    let confusion = confusion_matrix(k, &pairs)?;
    let per_class_f1 = per_class_f1(&confusion)?;
    let weighted_f1 = weighted_f1(&confusion)?;
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let years: Vec<f64> = ctx.birth_years.iter().map(|&y| f64::from(y)).collect();
    let sizes: Vec<f64> = ctx.class_sizes.iter().map(|&s| s as f64).collect();
    let era = era_analysis(&confusion, ctx.era_blocks)?;
    Ok(EvalReport {
        label_vocab: ctx.label_vocab.to_vec(),
        variant: ctx.variant,
        n_segments_used: ctx.n_segments,
        n_pieces: predictions.len(),
        accuracy: correct as f64 / predictions.len().max(1) as f64,
        spearman_birthyear: spearman(&years, &per_class_f1).ok(),
        spearman_classsize: spearman(&sizes, &per_class_f1).ok(),
        confusion,
        per_class_f1,
        weighted_f1,
        era_blocks: ctx.era_blocks.to_vec(),
        era,
        config_hash: None,
    })
}

pub fn confusion_csv(report: &EvalReport) -> String {
    let mut out = String::from("true\\pred");
    for name in &report.label_vocab {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push('\n');
    for (name, row) in report.label_vocab.iter().zip(&report.confusion) {
        out.push_str(&csv_field(name));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn per_class_f1_csv(report: &EvalReport) -> String {
    let mut out = String::from("label,composer,support,f1\n");
    for (i, (name, f1)) in report.label_vocab.iter().zip(&report.per_class_f1).enumerate() {
        let support: u64 = report.confusion[i].iter().sum();
        out.push_str(&format!("{i},{},{support},{f1}\n", csv_field(name)));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub weighted_f1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,setting,weighted_f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.axis, r.setting, r.weighted_f1));
    }
    out
}

/// Segment-count axis: one model, every count in `grid`. Each distinct window
/// start of a piece is classified once and shared across counts.
pub fn segment_sweep(
    model: &ResNet<f32>,
    pieces: &[Piece],
    rolls: &dyn RollSource,
    variant: Variant,
    grid: &[usize],
) -> crate::Result<Vec<AblationRow>> {
    if grid.contains(&0) {
        return Err(EvalError::NoSegments.into());
    }
    check_variant(model, variant)?;
    let k = model.config().n_classes;
    let per_piece: Vec<crate::Result<Vec<(usize, usize)>>> = parallel::map(pieces, |p| {
        let roll = rolls.roll(p.id())?;
        let layouts: Vec<Vec<usize>> = grid.iter().map(|&n| segment_positions(roll.n_bins(), n)).collect();
        let unique: Vec<usize> = layouts.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let probs = segment_probs(model, &roll, p.id(), &unique, variant)?;
        let memo: HashMap<usize, &Vec<f64>> = unique.iter().copied().zip(&probs).collect();
        layouts
            .iter()
            .map(|starts| {
                let picked: Vec<Vec<f64>> = starts.iter().map(|s| memo[s].clone()).collect();
                Ok((p.composer_label, vote(&picked)?.1))
            })
            .collect()
    });
    let per_piece: Vec<Vec<(usize, usize)>> = per_piece.into_iter().collect::<crate::Result<_>>()?;
    grid.iter()
        .enumerate()
        .map(|(g, &n)| {
            let pairs: Vec<(usize, usize)> = per_piece.iter().map(|v| v[g]).collect();
            Ok(AblationRow {
                axis: "segments".to_string(),
                setting: n.to_string(),
                weighted_f1: weighted_f1(&confusion_matrix(k, &pairs)?)?,
            })
        })
        .collect()
}

/// Variant axis: one trained model per requested variant, each scored at
/// `n_segments`.
pub fn variant_sweep(
    models: &HashMap<Variant, ResNet<f32>>,
    variants: &[Variant],
    pieces: &[Piece],
    rolls: &dyn RollSource,
    n_segments: usize,
) -> crate::Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let model = models.get(&v).ok_or(EvalError::MissingCheckpoint(v))?;
            let preds = predict_pieces(model, pieces, rolls, n_segments, v)?;
            let pairs: Vec<(usize, usize)> = preds.iter().map(|p| (p.true_label, p.final_label)).collect();
            Ok(AblationRow {
                axis: "variant".to_string(),
                setting: v.to_string(),
                weighted_f1: weighted_f1(&confusion_matrix(model.config().n_classes, &pairs)?)?,
            })
        })
        .collect()
}

/// Piece accuracy of majority voting with a simulated segment classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotingSimulation {
    pub n_classes: usize,
    /// Probability that a single segment is classified correctly; errors are
    /// uniform over the other classes.
    pub segment_accuracy: f64,
    pub pieces_per_trial: usize,
}

impl VotingSimulation {
    /// Piece accuracy per trial for each vote count in `counts`. Each trial
    /// draws one segment stream per piece and reuses its prefix for every count.
    pub fn run(&self, counts: &[usize], trials: usize, seed: u64) -> Vec<Vec<f64>> {
        let max = counts.iter().copied().max().unwrap_or(0);
        parallel::map_range(trials, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut correct = vec![0usize; counts.len()];
            for _ in 0..self.pieces_per_trial {
                let truth = rng.random_range(0..self.n_classes);
                let stream: Vec<usize> = (0..max)
                    .map(|_| {
                        if rng.random_bool(self.segment_accuracy) {
                            truth
                        } else {
                            let other = rng.random_range(0..self.n_classes - 1);
                            if other >= truth {
                                other + 1
                            } else {
                                other
                            }
                        }
                    })
                    .collect();
                for (ci, &n) in counts.iter().enumerate() {
                    let probs: Vec<Vec<f64>> = stream[..n]
                        .iter()
                        .map(|&c| {
                            let mut v = vec![0.0; self.n_classes];
                            v[c] = 1.0;
                            v
                        })
                        .collect();
                    if n > 0 && vote(&probs).map(|(_, l)| l) == Ok(truth) {
                        correct[ci] += 1;
                    }
                }
            }
            correct
                .iter()
                .map(|&c| c as f64 / self.pieces_per_trial.max(1) as f64)
                .collect()
        })
    }
}
