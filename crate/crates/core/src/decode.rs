//! Decoding over emission lattices: best-path (greedy), prefix beam search
//! over labeling probabilities, and Viterbi forced alignment constrained to
//! a given target, plus the prediction-step to input-frame bookkeeping.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::lattice::{
    collapse, extend_targets, min_admissible_t, EmissionLattice, Path, TargetSequence, BLANK,
};
use crate::math;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    InvalidWidth,
    #[error("sequence too short: {got} prediction steps, {needed} needed")]
    SequenceTooShort { needed: usize, got: usize },
}

/// A decoded labeling and its log score: summed labeling mass for the beam,
/// best-path product for greedy.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub labels: Vec<u32>,
    pub log_score: f64,
}

/// A maximal run of one gloss, inclusive frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentSegment {
    pub start: usize,
    pub end: usize,
    pub gloss: u32,
}

/// Per-step argmax followed by collapse; ties break toward the lower label.
pub fn greedy_decode(lattice: &EmissionLattice) -> DecodeResult {
    let mut path: Path = Vec::with_capacity(lattice.steps());
    let mut log_score = 0.0;
    for t in 0..lattice.steps() {
        let row = lattice.log_probs().row(t);
        let mut best = 0usize;
        for (v, &lp) in row.iter().enumerate() {
            if lp > row[best] {
                best = v;
            }
        }
        log_score += row[best];
        path.push(best as u32);
    }
    DecodeResult { labels: collapse(&path), log_score }
}

/// Hook for log-linear language-model fusion during beam decoding.
pub trait PrefixScorer {
    /// log p(next | prefix) under the scorer's model.
    fn extension_log_prob(&self, prefix: &[u32], next: u32) -> f64;
}

#[derive(Clone, Copy)]
struct BeamMass {
    /// Summed mass of paths for this prefix ending in blank.
    blank: f64,
    /// Summed mass of paths ending in the prefix's last label.
    non_blank: f64,
    /// Best single-path mass, split the same way; used only for pruning.
    blank_best: f64,
    non_blank_best: f64,
    /// Accumulated language-model score of the prefix.
    lm: f64,
}

impl BeamMass {
    fn empty() -> Self {
        BeamMass {
            blank: f64::NEG_INFINITY,
            non_blank: f64::NEG_INFINITY,
            blank_best: f64::NEG_INFINITY,
            non_blank_best: f64::NEG_INFINITY,
            lm: 0.0,
        }
    }

    fn total(&self) -> f64 {
        math::log_add_exp(self.blank, self.non_blank)
    }

    fn best(&self) -> f64 {
        f64::max(self.blank_best, self.non_blank_best)
    }
}

/// Prefix beam search over labeling probabilities.
///
/// Tracks blank-terminated and label-terminated mass per prefix, so the
/// score of a hypothesis is the total probability of every path collapsing
/// to it; with a width covering all reachable prefixes the search is exact.
/// Pruning ranks prefixes by their best single-path mass, which keeps the
/// chain of per-step argmaxes alive at any width: width 1 degenerates to
/// greedy best-path decoding. Ties break by score, then by the
/// lexicographically smaller prefix.
pub fn prefix_beam_decode(
    lattice: &EmissionLattice,
    width: usize,
    lm: Option<(&dyn PrefixScorer, f64)>,
) -> Result<DecodeResult, DecodeError> {
    if width == 0 {
        return Err(DecodeError::InvalidWidth);
    }
    let mut beam: BTreeMap<Vec<u32>, BeamMass> = BTreeMap::new();
    beam.insert(
        Vec::new(),
        BeamMass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
            blank_best: 0.0,
            non_blank_best: f64::NEG_INFINITY,
            lm: 0.0,
        },
    );

    for t in 0..lattice.steps() {
        let row = lattice.log_probs().row(t);
        let mut next: BTreeMap<Vec<u32>, BeamMass> = BTreeMap::new();
        for (prefix, mass) in beam.iter() {
            // Stay on this prefix: emit blank, or repeat its last label.
            let entry = next.entry(prefix.clone()).or_insert_with(BeamMass::empty);
            let g_blank = row[BLANK as usize];
            entry.blank = math::log_add_exp(entry.blank, mass.total() + g_blank);
            entry.blank_best = f64::max(entry.blank_best, mass.best() + g_blank);
            if let Some(&last) = prefix.last() {
                let g_last = row[last as usize];
                entry.non_blank = math::log_add_exp(entry.non_blank, mass.non_blank + g_last);
                entry.non_blank_best =
                    f64::max(entry.non_blank_best, mass.non_blank_best + g_last);
            }
            entry.lm = mass.lm;

            // Extend by each non-blank label.
            for v in 1..lattice.labels() as u32 {
                // A repeated label needs a blank in between, so only the
                // blank-terminated mass extends onto it.
                let (base, base_best) = if Some(&v) == prefix.last() {
                    (mass.blank, mass.blank_best)
                } else {
                    (mass.total(), mass.best())
                };
                if base == f64::NEG_INFINITY {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(v);
                let lm_score = mass.lm
                    + lm.map_or(0.0, |(scorer, weight)| {
                        weight * scorer.extension_log_prob(prefix, v)
                    });
                let g_v = row[v as usize];
                let entry = next.entry(extended).or_insert_with(BeamMass::empty);
                entry.non_blank = math::log_add_exp(entry.non_blank, base + g_v);
                entry.non_blank_best = f64::max(entry.non_blank_best, base_best + g_v);
                entry.lm = lm_score;
            }
        }

        if next.len() > width {
            // Keep the `width` best prefixes; the stable sort over the
            // BTreeMap's ordered entries makes the lexicographic tie-break
            // implicit.
            let mut scored: Vec<(Vec<u32>, BeamMass)> = next.into_iter().collect();
            scored.sort_by(|a, b| {
                let sa = a.1.best() + a.1.lm;
                let sb = b.1.best() + b.1.lm;
                sb.partial_cmp(&sa).expect("beam scores are never NaN")
            });
            scored.truncate(width);
            next = scored.into_iter().collect();
        }
        beam = next;
    }

    let mut best: Option<(&Vec<u32>, f64, f64)> = None;
    for (prefix, mass) in beam.iter() {
        let score = mass.total() + mass.lm;
        match best {
            Some((_, bs, _)) if score <= bs => {}
            _ => best = Some((prefix, score, mass.total())),
        }
    }
    let (labels, _, log_score) = best.expect("beam never empties");
    Ok(DecodeResult { labels: labels.clone(), log_score })
}

/// Most probable path constrained to collapse to `y`, via Viterbi over the
/// extended-target lattice, plus the gloss segments it induces (in
/// prediction-step indices). Backtrace ties prefer staying in the current
/// state, which stretches segments maximally.
pub fn forced_alignment(
    lattice: &EmissionLattice,
    y: &TargetSequence,
) -> Result<(Path, Vec<AlignmentSegment>), DecodeError> {
    let needed = min_admissible_t(y);
    let t_len = lattice.steps();
    if t_len < needed {
        return Err(DecodeError::SequenceTooShort { needed, got: t_len });
    }
    let ext = extend_targets(y);
    let s_len = ext.len();

    let mut score = vec![f64::NEG_INFINITY; s_len];
    let mut back: Vec<Vec<u8>> = vec![vec![0; s_len]; t_len];
    score[0] = lattice.log_prob(0, ext.ids()[0]);
    score[1] = lattice.log_prob(0, ext.ids()[1]);
    let mut next = vec![f64::NEG_INFINITY; s_len];
    for t in 1..t_len {
        for s in 0..s_len {
            // Prefer stay over advance over skip on ties.
            let mut best = score[s];
            let mut step = 0u8;
            if s >= 1 && score[s - 1] > best {
                best = score[s - 1];
                step = 1;
            }
            if ext.skip_ok(s) && score[s - 2] > best {
                best = score[s - 2];
                step = 2;
            }
            next[s] = if best == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                best + lattice.log_prob(t, ext.ids()[s])
            };
            back[t][s] = step;
        }
        core::mem::swap(&mut score, &mut next);
    }

    // Final state: prefer the last gloss over the trailing blank on ties.
    let mut s = if score[s_len - 2] >= score[s_len - 1] { s_len - 2 } else { s_len - 1 };
    let mut states = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        states[t] = s;
        if t > 0 {
            s -= back[t][s] as usize;
        }
    }

    let path: Path = states.iter().map(|&s| ext.ids()[s]).collect();
    let mut segments = Vec::with_capacity(y.len());
    let mut t = 0;
    while t < t_len {
        if path[t] != BLANK {
            let start = t;
            let state = states[t];
            while t + 1 < t_len && states[t + 1] == state {
                t += 1;
            }
            segments.push(AlignmentSegment { start, end: t, gloss: path[start] });
        }
        t += 1;
    }
    Ok((path, segments))
}

/// Prediction-step to input-frame bookkeeping for a fixed-stride encoder.
/// Step t covers frames [t*stride, t*stride + span); its center frame is
/// used for single-frame mappings, clamped to the frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFrameMap {
    pub stride: usize,
    pub span: usize,
    pub frames: usize,
}

impl StepFrameMap {
    pub fn center(&self, step: usize) -> usize {
        let c = step * self.stride + self.span / 2;
        c.min(self.frames.saturating_sub(1))
    }

    /// Frame window of one step, inclusive bounds, clamped.
    pub fn window(&self, step: usize) -> (usize, usize) {
        let start = (step * self.stride).min(self.frames.saturating_sub(1));
        let end = (step * self.stride + self.span - 1).min(self.frames.saturating_sub(1));
        (start, end)
    }

    /// Map a segment over prediction steps to inclusive frame bounds.
    pub fn segment_to_frames(&self, seg: &AlignmentSegment) -> AlignmentSegment {
        let (start, _) = self.window(seg.start);
        let (_, end) = self.window(seg.end);
        AlignmentSegment { start, end, gloss: seg.gloss }
    }

    /// The step whose window covers a frame (frames beyond the last window
    /// clamp to the final step).
    pub fn step_of_frame(&self, frame: usize, steps: usize) -> usize {
        (frame / self.stride).min(steps.saturating_sub(1))
    }
}
