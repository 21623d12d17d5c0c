//! The CTC lattice: extended targets, forward/backward path probabilities,
//! the loss, the any-t identity p(y|X) = sum_s alpha_t(s) beta_t(s) / g, and
//! the closed-form error signal.
//!
//! Everything runs in log domain with -inf as the additive identity. State
//! indices are 0-based here; the classic 1-based presentation maps onto this
//! by shifting every index down by one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::math;
use crate::tape::{Tape, TapeError, Var};

/// The blank label is index 0 everywhere: vocabularies, emissions, paths.
pub const BLANK: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LatticeError {
    #[error("sequence too short: {got} prediction steps, {needed} needed")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("lattice is degenerate: total path probability underflowed")]
    DegenerateLattice,
    #[error("invalid target sequence: {0}")]
    InvalidTarget(&'static str),
    #[error("invalid emission lattice: {0}")]
    InvalidEmissions(&'static str),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Gloss names plus the reserved blank `<b>` at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

pub const BLANK_NAME: &str = "<b>";

impl Vocabulary {
    /// Build from gloss names; the blank is prepended automatically.
    pub fn new<I, S>(glosses: I) -> Result<Self, LatticeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = Vec::new();
        names.push(String::from(BLANK_NAME));
        for g in glosses {
            let g = g.into();
            if g == BLANK_NAME {
                return Err(LatticeError::InvalidVocabulary("blank name is reserved"));
            }
            if g.is_empty() || g.contains(char::is_whitespace) || g.contains(',') {
                return Err(LatticeError::InvalidVocabulary(
                    "gloss names must be non-empty and free of whitespace/commas",
                ));
            }
            if names.iter().any(|n| n == &g) {
                return Err(LatticeError::InvalidVocabulary("duplicate gloss name"));
            }
            names.push(g);
        }
        if names.len() < 2 {
            return Err(LatticeError::InvalidVocabulary("at least one gloss required"));
        }
        Ok(Vocabulary { names })
    }

    /// Total label count including blank.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of glosses (excluding blank).
    pub fn gloss_count(&self) -> usize {
        self.names.len() - 1
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Ground-truth gloss ids; never empty and never containing blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    ids: Vec<u32>,
}

impl TargetSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self, LatticeError> {
        if ids.is_empty() {
            return Err(LatticeError::InvalidTarget("target sequence is empty"));
        }
        if ids.contains(&BLANK) {
            return Err(LatticeError::InvalidTarget("target contains the blank label"));
        }
        Ok(TargetSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Targets interleaved with blanks: length 2K+1, blanks at even positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedTargets {
    ids: Vec<u32>,
}

impl ExtendedTargets {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// K' = 2K + 1.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether the s-2 -> s skip transition is admissible into state `s`.
    #[inline]
    pub fn skip_ok(&self, s: usize) -> bool {
        s >= 2 && self.ids[s] != BLANK && self.ids[s] != self.ids[s - 2]
    }

    /// Largest label id referenced (for emission-width validation).
    fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(BLANK)
    }
}

/// Interleave blanks before and after each gloss.
pub fn extend_targets(y: &TargetSequence) -> ExtendedTargets {
    let mut ids = Vec::with_capacity(2 * y.len() + 1);
    ids.push(BLANK);
    for &g in y.ids() {
        ids.push(g);
        ids.push(BLANK);
    }
    ExtendedTargets { ids }
}

/// A length-T path over the extended vocabulary.
pub type Path = Vec<u32>;

/// The collapse mapping B: merge maximal runs of identical labels, then drop blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &v in path {
        if Some(v) != prev {
            if v != BLANK {
                out.push(v);
            }
            prev = Some(v);
        }
    }
    out
}

/// Smallest T for which valid paths exist: K plus one forced blank per
/// adjacent repeated gloss.
pub fn min_admissible_t(y: &TargetSequence) -> usize {
    let ids = y.ids();
    let repeats = ids.windows(2).filter(|w| w[0] == w[1]).count();
    ids.len() + repeats
}

/// Per-step label log-probabilities, T x L; every row normalizes to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLattice {
    log_probs: Mat,
}

impl EmissionLattice {
    /// Wrap pre-normalized log-probabilities; rows must log-sum-exp to 0
    /// within 1e-9.
    pub fn from_log_probs(log_probs: Mat) -> Result<Self, LatticeError> {
        if log_probs.rows() == 0 || log_probs.cols() < 2 {
            return Err(LatticeError::InvalidEmissions("need T >= 1 and L >= 2"));
        }
        for t in 0..log_probs.rows() {
            let lse = math::log_sum_exp_slice(log_probs.row(t));
            if !(lse.is_finite() && math::abs(lse) <= 1e-9) {
                return Err(LatticeError::InvalidEmissions("row does not normalize to one"));
            }
        }
        Ok(EmissionLattice { log_probs })
    }

    /// Wrap linear-domain probabilities (rows summing to one).
    pub fn from_probs(probs: &Mat) -> Result<Self, LatticeError> {
        let mut m = Mat::zeros(probs.rows(), probs.cols());
        for t in 0..probs.rows() {
            for v in 0..probs.cols() {
                let p = probs.at(t, v);
                if !(p > 0.0) {
                    return Err(LatticeError::InvalidEmissions("probabilities must be positive"));
                }
                m.set(t, v, math::ln(p));
            }
        }
        EmissionLattice::from_log_probs(m)
    }

    /// Number of prediction steps T.
    pub fn steps(&self) -> usize {
        self.log_probs.rows()
    }

    /// Label count L (including blank).
    pub fn labels(&self) -> usize {
        self.log_probs.cols()
    }

    #[inline]
    pub fn log_prob(&self, t: usize, v: u32) -> f64 {
        self.log_probs.at(t, v as usize)
    }

    pub fn log_probs(&self) -> &Mat {
        &self.log_probs
    }

    /// Linear-domain emission probabilities.
    pub fn probs(&self) -> Mat {
        let mut m = Mat::zeros(self.steps(), self.labels());
        for t in 0..self.steps() {
            for v in 0..self.labels() {
                m.set(t, v, math::exp(self.log_probs.at(t, v)));
            }
        }
        m
    }
}

/// log alpha over (t, s): prefix path mass reaching state s at step t.
#[derive(Debug, Clone)]
pub struct ForwardLattice {
    pub log_alpha: Mat,
}

/// log beta over (t, s): suffix path mass completing the labeling from s at t.
#[derive(Debug, Clone)]
pub struct BackwardLattice {
    pub log_beta: Mat,
}

fn check_feasible(lattice: &EmissionLattice, y: &TargetSequence) -> Result<(), LatticeError> {
    let needed = min_admissible_t(y);
    if lattice.steps() < needed {
        return Err(LatticeError::SequenceTooShort { needed, got: lattice.steps() });
    }
    Ok(())
}

fn check_labels(lattice: &EmissionLattice, ext: &ExtendedTargets) -> Result<(), LatticeError> {
    if (ext.max_id() as usize) >= lattice.labels() {
        return Err(LatticeError::InvalidTarget("target id outside emission width"));
    }
    Ok(())
}

/// Forward probabilities per the two/three-predecessor recursion; the skip
/// s-2 -> s applies only for non-blank states with y'_s != y'_{s-2}.
pub fn ctc_forward(
    lattice: &EmissionLattice,
    y: &TargetSequence,
) -> Result<ForwardLattice, LatticeError> {
    check_feasible(lattice, y)?;
    let ext = extend_targets(y);
    check_labels(lattice, &ext)?;
    let (t_len, s_len) = (lattice.steps(), ext.len());
    let mut a = Mat::filled(t_len, s_len, f64::NEG_INFINITY);
    a.set(0, 0, lattice.log_prob(0, ext.ids()[0]));
    a.set(0, 1, lattice.log_prob(0, ext.ids()[1]));
    for t in 1..t_len {
        for s in 0..s_len {
            let mut mass = a.at(t - 1, s);
            if s >= 1 {
                mass = math::log_add_exp(mass, a.at(t - 1, s - 1));
            }
            if ext.skip_ok(s) {
                mass = math::log_add_exp(mass, a.at(t - 1, s - 2));
            }
            if mass != f64::NEG_INFINITY {
                a.set(t, s, mass + lattice.log_prob(t, ext.ids()[s]));
            }
        }
    }
    Ok(ForwardLattice { log_alpha: a })
}

/// Backward probabilities; the time-reversed mirror of [`ctc_forward`].
pub fn ctc_backward(
    lattice: &EmissionLattice,
    y: &TargetSequence,
) -> Result<BackwardLattice, LatticeError> {
    check_feasible(lattice, y)?;
    let ext = extend_targets(y);
    check_labels(lattice, &ext)?;
    let (t_len, s_len) = (lattice.steps(), ext.len());
    let mut b = Mat::filled(t_len, s_len, f64::NEG_INFINITY);
    b.set(t_len - 1, s_len - 1, lattice.log_prob(t_len - 1, ext.ids()[s_len - 1]));
    b.set(t_len - 1, s_len - 2, lattice.log_prob(t_len - 1, ext.ids()[s_len - 2]));
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut mass = b.at(t + 1, s);
            if s + 1 < s_len {
                mass = math::log_add_exp(mass, b.at(t + 1, s + 1));
            }
            if s + 2 < s_len && ext.skip_ok(s + 2) {
                mass = math::log_add_exp(mass, b.at(t + 1, s + 2));
            }
            if mass != f64::NEG_INFINITY {
                b.set(t, s, mass + lattice.log_prob(t, ext.ids()[s]));
            }
        }
    }
    Ok(BackwardLattice { log_beta: b })
}

/// log p(y|X) read off the terminal forward states.
pub fn log_label_prob(forward: &ForwardLattice) -> f64 {
    let t = forward.log_alpha.rows() - 1;
    let s = forward.log_alpha.cols() - 1;
    math::log_add_exp(forward.log_alpha.at(t, s), forward.log_alpha.at(t, s - 1))
}

/// log p(y|X) read off the initial backward states.
pub fn log_label_prob_backward(backward: &BackwardLattice) -> f64 {
    math::log_add_exp(backward.log_beta.at(0, 0), backward.log_beta.at(0, 1))
}

/// -log p(y|X) without recording anything; the value-only twin of the
/// differentiable [`ctc_loss`].
pub fn ctc_loss_value(lattice: &EmissionLattice, y: &TargetSequence) -> Result<f64, LatticeError> {
    let forward = ctc_forward(lattice, y)?;
    let lp = log_label_prob(&forward);
    if !lp.is_finite() {
        return Err(LatticeError::DegenerateLattice);
    }
    Ok(-lp)
}

/// p(y|X) evaluated through the time-t slice identity; the value is the same
/// for every t.
pub fn posterior_at(
    lattice: &EmissionLattice,
    y: &TargetSequence,
    t: usize,
) -> Result<f64, LatticeError> {
    assert!(t < lattice.steps(), "time step out of range");
    let ext = extend_targets(y);
    let forward = ctc_forward(lattice, y)?;
    let backward = ctc_backward(lattice, y)?;
    let mut terms = Vec::with_capacity(ext.len());
    for s in 0..ext.len() {
        let la = forward.log_alpha.at(t, s);
        let lb = backward.log_beta.at(t, s);
        if la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
            terms.push(f64::NEG_INFINITY);
        } else {
            terms.push(la + lb - lattice.log_prob(t, ext.ids()[s]));
        }
    }
    Ok(math::exp(math::log_sum_exp_slice(&terms)))
}

/// Closed-form dL_ctc/dg as a T x L matrix over linear-domain emissions:
/// entry (t,v) = -(1 / (p(y|X) g_v^t)) * sum_{s: y'_s = v} alpha_t(s) beta_t(s) / g_v^t.
pub fn ctc_grad_closed_form(
    lattice: &EmissionLattice,
    y: &TargetSequence,
) -> Result<Mat, LatticeError> {
    let ext = extend_targets(y);
    let forward = ctc_forward(lattice, y)?;
    let backward = ctc_backward(lattice, y)?;
    let log_p = log_label_prob(&forward);
    if !log_p.is_finite() {
        return Err(LatticeError::DegenerateLattice);
    }
    let (t_len, l_len) = (lattice.steps(), lattice.labels());
    let mut grad = Mat::zeros(t_len, l_len);
    let mut terms: Vec<f64> = Vec::new();
    for t in 0..t_len {
        for v in 0..l_len as u32 {
            terms.clear();
            for s in 0..ext.len() {
                if ext.ids()[s] == v {
                    terms.push(forward.log_alpha.at(t, s) + backward.log_beta.at(t, s));
                }
            }
            let num = math::log_sum_exp_slice(&terms);
            if num != f64::NEG_INFINITY {
                let lg = lattice.log_prob(t, v);
                grad.set(t, v as usize, -math::exp(num - log_p - 2.0 * lg));
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Differentiable lattice construction on the tape.
// ---------------------------------------------------------------------------

/// Forward recursion recorded on a tape, kept around so the entropy
/// recursion can reuse the per-step predecessor sums.
pub(crate) struct TapeAlpha<'t> {
    /// Gathered per-step emissions over y' (each length K').
    pub emit: Vec<Var<'t>>,
    /// Predecessor-combined mass before the emission multiply; pre[0] is the
    /// initialization mask.
    pub pre: Vec<Var<'t>>,
    /// log p(y|X).
    pub log_prob: Var<'t>,
}

fn combine_predecessors<'t>(
    tape: &'t Tape,
    prev: Var<'t>,
    skip_mask: Var<'t>,
    s_len: usize,
) -> Result<Var<'t>, TapeError> {
    let ninf = tape.vector(&[f64::NEG_INFINITY]);
    let shift1 = tape.concat(&[ninf, prev.slice(0, s_len - 1)?])?;
    let ninf2 = tape.vector(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
    let shift2 = tape.concat(&[ninf2, prev.slice(0, s_len - 2)?])?.add(skip_mask)?;
    prev.log_add_exp(shift1)?.log_add_exp(shift2)
}

pub(crate) fn tape_alpha<'t>(
    tape: &'t Tape,
    emission_rows: &[Var<'t>],
    ext: &ExtendedTargets,
) -> Result<TapeAlpha<'t>, LatticeError> {
    let t_len = emission_rows.len();
    let s_len = ext.len();
    let needed = (s_len - 1) / 2 + count_repeats(ext);
    if t_len < needed {
        return Err(LatticeError::SequenceTooShort { needed, got: t_len });
    }
    let gather_idx: Vec<usize> = ext.ids().iter().map(|&v| v as usize).collect();

    let mut init = vec![f64::NEG_INFINITY; s_len];
    init[0] = 0.0;
    init[1] = 0.0;
    let mut skip = vec![0.0; s_len];
    for (s, m) in skip.iter_mut().enumerate() {
        if !ext.skip_ok(s) {
            *m = f64::NEG_INFINITY;
        }
    }
    let skip_mask = tape.vector(&skip);

    let mut emit = Vec::with_capacity(t_len);
    let mut pre = Vec::with_capacity(t_len);
    let mut alpha: Option<Var<'t>> = None;
    for row in emission_rows {
        let e = row.gather(&gather_idx)?;
        let p = match alpha {
            None => tape.vector(&init),
            Some(prev) => combine_predecessors(tape, prev, skip_mask, s_len)?,
        };
        alpha = Some(p.add(e)?);
        emit.push(e);
        pre.push(p);
    }
    let log_prob = alpha.expect("T >= 1").slice(s_len - 2, s_len)?.log_sum_exp()?;
    if !log_prob.value().is_finite() {
        return Err(LatticeError::DegenerateLattice);
    }
    Ok(TapeAlpha { emit, pre, log_prob })
}

fn count_repeats(ext: &ExtendedTargets) -> usize {
    // Adjacent equal glosses appear as y'_s == y'_{s+2} on odd s.
    let ids = ext.ids();
    (1..ids.len().saturating_sub(2))
        .step_by(2)
        .filter(|&s| ids[s] == ids[s + 2])
        .count()
}

/// Differentiable L_ctc = -log p(y|X) over tape-recorded emission rows
/// (one length-L log-probability vector per prediction step).
pub fn ctc_loss<'t>(
    tape: &'t Tape,
    emission_rows: &[Var<'t>],
    y: &TargetSequence,
) -> Result<Var<'t>, LatticeError> {
    let ext = extend_targets(y);
    let fwd = tape_alpha(tape, emission_rows, &ext)?;
    Ok(fwd.log_prob.neg())
}

/// Joint forward/entropy recursion: returns (L_ctc, H) where H is the
/// Shannon entropy of the path posterior, both differentiable.
pub fn ctc_loss_with_entropy<'t>(
    tape: &'t Tape,
    emission_rows: &[Var<'t>],
    y: &TargetSequence,
) -> Result<(Var<'t>, Var<'t>), LatticeError> {
    let ext = extend_targets(y);
    let s_len = ext.len();
    let fwd = tape_alpha(tape, emission_rows, &ext)?;

    let mut skip = vec![0.0; s_len];
    for (s, m) in skip.iter_mut().enumerate() {
        if !ext.skip_ok(s) {
            *m = f64::NEG_INFINITY;
        }
    }
    let skip_mask = tape.vector(&skip);
    let neg_inf_row = vec![f64::NEG_INFINITY; s_len];

    // r tracks log(-Q) over prefix paths: q_t(s) = sum over predecessors of
    // (q_{t-1}(s') + alpha_{t-1}(s') log g) * g, all mass non-positive, so
    // its negation stays in plain log domain.
    let mut r = tape.vector(&neg_inf_row);
    for (t, e) in fwd.emit.iter().enumerate() {
        let pre_r = if t == 0 { tape.vector(&neg_inf_row) } else { combine_predecessors(tape, r, skip_mask, s_len)? };
        let weighted_alpha = e.log_neg()?.add(fwd.pre[t])?;
        r = e.add(pre_r.log_add_exp(weighted_alpha)?)?;
    }
    let log_r_total = r.slice(s_len - 2, s_len)?.log_sum_exp()?;
    let log_p = fwd.log_prob;
    // H = -Q/p + log p = exp(log_r_total - log_p) + log_p, clamped at zero
    // against rounding in the fully deterministic single-path case.
    let h = log_r_total.sub(log_p)?.exp().add(log_p)?;
    let zero = tape.scalar(0.0);
    let h = h.max(zero)?;
    Ok((log_p.neg(), h))
}

/// Record a whole T x L log-probability matrix as a leaf and split it into
/// per-step rows, the form the lattice builders consume.
pub fn emission_leaf_rows<'t>(
    tape: &'t Tape,
    lattice: &EmissionLattice,
) -> Result<(Var<'t>, Vec<Var<'t>>), LatticeError> {
    let leaf = tape.matrix(lattice.steps(), lattice.labels(), lattice.log_probs().data());
    let mut rows = Vec::with_capacity(lattice.steps());
    for t in 0..lattice.steps() {
        rows.push(leaf.row(t)?);
    }
    Ok((leaf, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(ids: &[u32]) -> TargetSequence {
        TargetSequence::new(ids.to_vec()).unwrap()
    }

    /// T x 2 uniform lattice over {blank, a}.
    fn uniform_lattice(t: usize) -> EmissionLattice {
        let half = math::ln(0.5);
        EmissionLattice::from_log_probs(Mat::filled(t, 2, half)).unwrap()
    }

    #[test]
    fn extend_interleaves_blanks() {
        let ext = extend_targets(&target(&[1]));
        assert_eq!(ext.ids(), &[0, 1, 0]);
        let ext = extend_targets(&target(&[1, 2]));
        assert_eq!(ext.ids(), &[0, 1, 0, 2, 0]);
        assert_eq!(extend_targets(&target(&[1, 2, 3])).len(), 7);
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2]), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<u32>::new());
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 1]), vec![1]);
    }

    #[test]
    fn min_admissible_counts_repeats() {
        assert_eq!(min_admissible_t(&target(&[1, 2, 3])), 3);
        assert_eq!(min_admissible_t(&target(&[1, 1])), 3);
        assert_eq!(min_admissible_t(&target(&[1, 1, 1])), 5);
    }

    #[test]
    fn forward_uniform_two_step() {
        let lattice = uniform_lattice(2);
        let fwd = ctc_forward(&lattice, &target(&[1])).unwrap();
        let row: Vec<f64> = (0..3).map(|s| math::exp(fwd.log_alpha.at(1, s))).collect();
        assert!((row[0] - 0.25).abs() < 1e-12);
        assert!((row[1] - 0.50).abs() < 1e-12);
        assert!((row[2] - 0.25).abs() < 1e-12);
        assert!((math::exp(log_label_prob(&fwd)) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn backward_base_case_and_duality() {
        let lattice = uniform_lattice(2);
        let y = target(&[1]);
        let bwd = ctc_backward(&lattice, &y).unwrap();
        // beta_T(K') = g_blank^T
        assert!((bwd.log_beta.at(1, 2) - math::ln(0.5)).abs() < 1e-12);
        let fwd = ctc_forward(&lattice, &y).unwrap();
        assert!((log_label_prob(&fwd) - log_label_prob_backward(&bwd)).abs() < 1e-12);
    }

    #[test]
    fn loss_values() {
        let probs = Mat::from_vec(1, 2, vec![0.3, 0.7]);
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let loss = ctc_loss_value(&lattice, &target(&[1])).unwrap();
        assert!((loss - 0.35667494393873245).abs() < 1e-12);

        let loss2 = ctc_loss_value(&uniform_lattice(2), &target(&[1])).unwrap();
        assert!((loss2 - (-math::ln(0.75))).abs() < 1e-12);
        assert!((loss2 - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn posterior_is_t_independent() {
        let lattice = uniform_lattice(2);
        let y = target(&[1]);
        let p0 = posterior_at(&lattice, &y, 0).unwrap();
        let p1 = posterior_at(&lattice, &y, 1).unwrap();
        assert!((p0 - 0.75).abs() < 1e-12);
        assert!((p1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn too_short_sequences_error() {
        let lattice = uniform_lattice(2);
        let err = ctc_forward(&lattice, &target(&[1, 1])).unwrap_err();
        assert_eq!(err, LatticeError::SequenceTooShort { needed: 3, got: 2 });
    }

    #[test]
    fn closed_form_single_path() {
        let probs = Mat::from_vec(1, 2, vec![0.3, 0.7]);
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let grad = ctc_grad_closed_form(&lattice, &target(&[1])).unwrap();
        assert!((grad.at(0, 1) + 1.0 / 0.7).abs() < 1e-12);
        // blank at T=1 carries no valid path for K=1... except via beta base.
        // With T=1 the only valid path is (a), so d/dg_blank = 0.
        assert_eq!(grad.at(0, 0), 0.0);
    }

    #[test]
    fn tape_loss_matches_value_and_closed_form() {
        let probs = Mat::from_vec(
            3,
            3,
            vec![0.5, 0.2, 0.3, 0.1, 0.6, 0.3, 0.25, 0.5, 0.25],
        );
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let y = target(&[1, 2]);

        let tape = Tape::new();
        // Differentiate w.r.t. linear-domain G: leaf G, take log on the tape.
        let g = tape.matrix(3, 3, probs.data());
        let mut rows = Vec::new();
        for t in 0..3 {
            rows.push(g.row(t).unwrap().log().unwrap());
        }
        let loss = ctc_loss(&tape, &rows, &y).unwrap();
        assert!((loss.value() - ctc_loss_value(&lattice, &y).unwrap()).abs() < 1e-12);

        tape.backward(loss).unwrap();
        let auto = g.grad().unwrap();
        let closed = ctc_grad_closed_form(&lattice, &y).unwrap();
        for (i, &a) in auto.iter().enumerate() {
            let c = closed.data()[i];
            let denom = f64::max(1e-300, math::abs(c));
            if c == 0.0 {
                assert_eq!(a, 0.0, "zero-support entry {i} must be exactly zero");
            } else {
                assert!((a - c).abs() / denom < 1e-10, "entry {i}: auto {a} vs closed {c}");
            }
        }
    }

    #[test]
    fn entropy_of_uniform_three_paths() {
        let tape = Tape::new();
        let lattice = uniform_lattice(2);
        let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
        let (loss, h) = ctc_loss_with_entropy(&tape, &rows, &target(&[1])).unwrap();
        assert!((loss.value() - (-math::ln(0.75))).abs() < 1e-12);
        assert!((h.value() - math::ln(3.0)).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_dominant_single_path() {
        let probs = Mat::from_vec(1, 2, vec![1e-9, 1.0 - 1e-9]);
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
        let (_, h) = ctc_loss_with_entropy(&tape, &rows, &target(&[1])).unwrap();
        assert!(h.value() >= 0.0);
        assert!(h.value() < 1e-6);
    }

    #[test]
    fn vocabulary_reserves_blank() {
        let v = Vocabulary::new(["HELLO", "WORLD"]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.name(0), BLANK_NAME);
        assert_eq!(v.id("WORLD"), Some(2));
        assert!(Vocabulary::new(["<b>"]).is_err());
        assert!(Vocabulary::new(["A", "A"]).is_err());
    }
}
