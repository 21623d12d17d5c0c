//! Recognition metrics: word error rate with a substitution/deletion/
//! insertion breakdown, and alignment quality (frame accuracy, per-gloss
//! intersection-over-union) against gold segmentations.

use alloc::vec;
use alloc::vec::Vec;

use crate::decode::AlignmentSegment;
use crate::lattice::{EmissionLattice, BLANK};
use crate::math;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("segments out of range or out of order")]
    RangeMismatch,
}

/// Edit operations transforming the reference into the hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditOps {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// (S + D + I) / N; may exceed 1.
    pub fn wer(&self) -> f64 {
        self.edits() as f64 / self.reference_len as f64
    }
}

/// One step of the optimal edit script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditStep {
    /// reference[i] == hypothesis[j]
    Match(usize, usize),
    Substitute(usize, usize),
    /// reference[i] missing from the hypothesis
    Delete(usize),
    /// hypothesis[j] has no reference counterpart
    Insert(usize),
}

/// Minimal edit script under unit costs. Backtrace ties prefer substitution
/// over deletion over insertion, making the S/D/I split deterministic; the
/// total edit count is tie-independent.
pub fn edit_script(reference: &[u32], hypothesis: &[u32]) -> Vec<EditStep> {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let best = (d[idx(i - 1, j - 1)] + cost)
                .min(d[idx(i - 1, j)] + 1)
                .min(d[idx(i, j - 1)] + 1);
            d[idx(i, j)] = best;
        }
    }

    let mut steps = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[idx(i, j)];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[idx(i - 1, j - 1)] + cost == here {
                steps.push(if cost == 0 {
                    EditStep::Match(i - 1, j - 1)
                } else {
                    EditStep::Substitute(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[idx(i - 1, j)] + 1 == here {
            steps.push(EditStep::Delete(i - 1));
            i -= 1;
            continue;
        }
        steps.push(EditStep::Insert(j - 1));
        j -= 1;
    }
    steps.reverse();
    steps
}

/// WER = (S + D + I) / N over gloss-id sequences.
pub fn wer(reference: &[u32], hypothesis: &[u32]) -> Result<EditOps, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let mut ops = EditOps {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        reference_len: reference.len(),
    };
    for step in edit_script(reference, hypothesis) {
        match step {
            EditStep::Match(..) => {}
            EditStep::Substitute(..) => ops.substitutions += 1,
            EditStep::Delete(_) => ops.deletions += 1,
            EditStep::Insert(_) => ops.insertions += 1,
        }
    }
    Ok(ops)
}

/// Running aggregate over a split: sum(S+D+I) / sum(N).
#[derive(Debug, Clone, Copy, Default)]
pub struct WerAccumulator {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl WerAccumulator {
    pub fn add(&mut self, ops: &EditOps) {
        self.substitutions += ops.substitutions;
        self.deletions += ops.deletions;
        self.insertions += ops.insertions;
        self.reference_len += ops.reference_len;
    }

    pub fn wer(&self) -> f64 {
        if self.reference_len == 0 {
            return 0.0;
        }
        (self.substitutions + self.deletions + self.insertions) as f64 / self.reference_len as f64
    }
}

/// Mean over prediction steps of the maximum per-step posterior; the
/// overconfidence proxy. Always in (0, 1].
pub fn peakiness(lattice: &EmissionLattice) -> f64 {
    let mut total = 0.0;
    for t in 0..lattice.steps() {
        let row = lattice.log_probs().row(t);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += math::exp(hi);
    }
    total / lattice.steps() as f64
}

/// Alignment comparison summary: frame-level gloss accuracy with blank as
/// its own class, and mean IoU over order-matched glosses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentQuality {
    pub frame_accuracy: f64,
    pub mean_iou: f64,
    pub matched_glosses: usize,
}

fn frame_labels(segments: &[AlignmentSegment], frames: usize) -> Result<Vec<u32>, MetricsError> {
    let mut labels = vec![BLANK; frames];
    let mut prev_end: Option<usize> = None;
    for seg in segments {
        if seg.start > seg.end || seg.end >= frames || seg.gloss == BLANK {
            return Err(MetricsError::RangeMismatch);
        }
        if let Some(pe) = prev_end {
            if seg.start <= pe {
                return Err(MetricsError::RangeMismatch);
            }
        }
        for l in labels.iter_mut().take(seg.end + 1).skip(seg.start) {
            *l = seg.gloss;
        }
        prev_end = Some(seg.end);
    }
    Ok(labels)
}

fn interval_iou(a: &AlignmentSegment, b: &AlignmentSegment) -> f64 {
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    let inter = if inter_start <= inter_end { inter_end - inter_start + 1 } else { 0 };
    let union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter;
    inter as f64 / union as f64
}

/// Compare a predicted segmentation against gold over a shared frame range.
/// Glosses are matched in order via the edit alignment of the two gloss
/// sequences; IoU averages over matched (equal-gloss) pairs only.
pub fn alignment_quality(
    predicted: &[AlignmentSegment],
    gold: &[AlignmentSegment],
    frames: usize,
) -> Result<AlignmentQuality, MetricsError> {
    if frames == 0 {
        return Err(MetricsError::RangeMismatch);
    }
    let pred_labels = frame_labels(predicted, frames)?;
    let gold_labels = frame_labels(gold, frames)?;
    let agree = pred_labels.iter().zip(gold_labels.iter()).filter(|(a, b)| a == b).count();
    let frame_accuracy = agree as f64 / frames as f64;

    let gold_glosses: Vec<u32> = gold.iter().map(|s| s.gloss).collect();
    let pred_glosses: Vec<u32> = predicted.iter().map(|s| s.gloss).collect();
    let mut iou_sum = 0.0;
    let mut matched = 0usize;
    for step in edit_script(&gold_glosses, &pred_glosses) {
        if let EditStep::Match(i, j) = step {
            iou_sum += interval_iou(&gold[i], &predicted[j]);
            matched += 1;
        }
    }
    let mean_iou = if matched == 0 { 0.0 } else { iou_sum / matched as f64 };
    Ok(AlignmentQuality { frame_accuracy, mean_iou, matched_glosses: matched })
}
