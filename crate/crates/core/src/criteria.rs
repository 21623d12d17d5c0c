//! The criterion family layered on the CTC lattice: the entropy-regularized
//! loss, the stimuli machinery (non-blank lattice slices, per-step gloss
//! responsibilities, the hidden-state pull), the auxiliary language-model
//! cross-entropy, and the composite that combines them under the late-stage
//! activation schedule.

use alloc::vec::Vec;

use crate::lattice::{
    ctc_backward, ctc_forward, ctc_loss, ctc_loss_with_entropy, BackwardLattice, EmissionLattice,
    ForwardLattice, LatticeError, TargetSequence,
};
use crate::mat::Mat;
use crate::math;
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CriterionError {
    #[error("hidden-state dimensions differ between encoder and language model")]
    DimensionMismatch,
    #[error("stimuli weights have a zero normalizer at step {t}")]
    ZeroNormalizer { t: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

impl From<TapeError> for CriterionError {
    fn from(e: TapeError) -> Self {
        CriterionError::Lattice(LatticeError::Tape(e))
    }
}

/// Which loss the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionKind {
    Ctc,
    EnCtc,
    Stim,
    EnStim,
}

impl CriterionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CriterionKind::Ctc => "ctc",
            CriterionKind::EnCtc => "enctc",
            CriterionKind::Stim => "stim",
            CriterionKind::EnStim => "enstim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ctc" => Some(CriterionKind::Ctc),
            "enctc" => Some(CriterionKind::EnCtc),
            "stim" => Some(CriterionKind::Stim),
            "enstim" => Some(CriterionKind::EnStim),
            _ => None,
        }
    }
}

/// Hyperparameter surface of the criterion family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionConfig {
    pub kind: CriterionKind,
    /// Entropy weight.
    pub phi: f64,
    /// Stimuli weight.
    pub theta: f64,
    /// Language-model weight.
    pub lambda: f64,
    /// Keep the entropy term after stimuli activation (the combined criterion
    /// as printed, rather than the phased schedule).
    pub keep_entropy_after_activation: bool,
}

impl CriterionConfig {
    pub fn new(kind: CriterionKind) -> Self {
        CriterionConfig {
            kind,
            phi: 0.1,
            theta: 0.5,
            lambda: 1.0,
            keep_entropy_after_activation: false,
        }
    }

    pub fn validate(&self) -> Result<(), CriterionError> {
        if self.phi < 0.0 || self.theta < 0.0 || self.lambda < 0.0 {
            return Err(CriterionError::ShapeMismatch("phi, theta, lambda must be >= 0"));
        }
        Ok(())
    }

    /// Whether this criterion uses the stimuli/LM terms at all.
    pub fn uses_stimuli(&self) -> bool {
        matches!(self.kind, CriterionKind::Stim | CriterionKind::EnStim)
    }
}

/// Differentiable entropy H of the path posterior, via the joint
/// (alpha, Q) recursion; always >= 0.
pub fn entropy_term<'t>(
    tape: &'t Tape,
    emission_rows: &[Var<'t>],
    y: &TargetSequence,
) -> Result<Var<'t>, LatticeError> {
    let (_, h) = ctc_loss_with_entropy(tape, emission_rows, y)?;
    Ok(h)
}

/// L_enctc = L_ctc - phi * H.
pub fn enctc_loss<'t>(
    tape: &'t Tape,
    emission_rows: &[Var<'t>],
    y: &TargetSequence,
    phi: f64,
) -> Result<Var<'t>, LatticeError> {
    if phi == 0.0 {
        return ctc_loss(tape, emission_rows, y);
    }
    let (loss, h) = ctc_loss_with_entropy(tape, emission_rows, y)?;
    Ok(loss.sub(h.scale(phi))?)
}

/// Non-blank slices of the forward/backward lattices: column k picks the
/// gloss state at extended position 2k+1.
pub fn nonblank_slices(forward: &ForwardLattice, backward: &BackwardLattice) -> (Mat, Mat) {
    let t_len = forward.log_alpha.rows();
    let k_len = (forward.log_alpha.cols() - 1) / 2;
    let mut a = Mat::zeros(t_len, k_len);
    let mut b = Mat::zeros(t_len, k_len);
    for t in 0..t_len {
        for k in 0..k_len {
            a.set(t, k, forward.log_alpha.at(t, 2 * k + 1));
            b.set(t, k, backward.log_beta.at(t, 2 * k + 1));
        }
    }
    (a, b)
}

/// Per-step gloss responsibilities gamma (T x K), each step normalized to
/// one. Computed in log domain and exponentiated; constant w.r.t. training
/// (gradients never flow through gamma).
pub fn stimuli_weights(log_alpha_nb: &Mat, log_beta_nb: &Mat) -> Result<Mat, CriterionError> {
    if log_alpha_nb.rows() != log_beta_nb.rows() || log_alpha_nb.cols() != log_beta_nb.cols() {
        return Err(CriterionError::ShapeMismatch("slice shapes differ"));
    }
    let (t_len, k_len) = (log_alpha_nb.rows(), log_alpha_nb.cols());
    let mut gamma = Mat::zeros(t_len, k_len);
    let mut terms = Vec::with_capacity(k_len);
    for t in 0..t_len {
        terms.clear();
        for k in 0..k_len {
            let la = log_alpha_nb.at(t, k);
            let lb = log_beta_nb.at(t, k);
            terms.push(if la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                la + lb
            });
        }
        let z = math::log_sum_exp_slice(&terms);
        if z == f64::NEG_INFINITY {
            return Err(CriterionError::ZeroNormalizer { t });
        }
        for k in 0..k_len {
            gamma.set(t, k, math::exp(terms[k] - z));
        }
    }
    Ok(gamma)
}

/// Convenience: gamma straight from an emission lattice and target.
pub fn stimuli_weights_for(
    lattice: &EmissionLattice,
    y: &TargetSequence,
) -> Result<Mat, CriterionError> {
    let fwd = ctc_forward(lattice, y)?;
    let bwd = ctc_backward(lattice, y)?;
    let (a, b) = nonblank_slices(&fwd, &bwd);
    stimuli_weights(&a, &b)
}

/// L_stimuli = (1/(K T)) sum_k sum_t gamma_t(k) ||h_t - h_k||^2. Gradients
/// reach both hidden-state families; gamma enters as a plain weighting.
pub fn stimuli_loss<'t>(
    tape: &'t Tape,
    encoder_states: &[Var<'t>],
    lm_states: &[Var<'t>],
    gamma: &Mat,
) -> Result<Var<'t>, CriterionError> {
    let t_len = encoder_states.len();
    let k_len = lm_states.len();
    if gamma.rows() != t_len || gamma.cols() != k_len {
        return Err(CriterionError::ShapeMismatch("gamma shape vs hidden states"));
    }
    let dim = match encoder_states.first().map(Var::shape) {
        Some(crate::tape::Shape::Vector(d)) => d,
        _ => return Err(CriterionError::DimensionMismatch),
    };
    for h in lm_states {
        match h.shape() {
            crate::tape::Shape::Vector(d) if d == dim => {}
            _ => return Err(CriterionError::DimensionMismatch),
        }
    }
    let mut total: Option<Var<'t>> = None;
    for (t, ht) in encoder_states.iter().enumerate() {
        for (k, hk) in lm_states.iter().enumerate() {
            let w = gamma.at(t, k);
            if w == 0.0 {
                continue;
            }
            let term = ht.sub(*hk)?.square().sum().scale(w);
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
    }
    let scale = 1.0 / (t_len as f64 * k_len as f64);
    Ok(match total {
        None => tape.scalar(0.0),
        Some(acc) => acc.scale(scale),
    })
}

/// Teacher-forced language-model cross-entropy: mean negative log-likelihood
/// of the next gloss, with the end-of-sentence token after the last gloss.
/// Row k of `lm_log_probs` predicts the token following gloss k.
pub fn lm_loss<'t>(
    tape: &'t Tape,
    lm_log_probs: &[Var<'t>],
    next_tokens: &[usize],
) -> Result<Var<'t>, CriterionError> {
    if lm_log_probs.len() != next_tokens.len() || lm_log_probs.is_empty() {
        return Err(CriterionError::ShapeMismatch("one prediction row per target token"));
    }
    let mut nlls = Vec::with_capacity(lm_log_probs.len());
    for (row, &target) in lm_log_probs.iter().zip(next_tokens.iter()) {
        nlls.push(row.gather(&[target])?.neg());
    }
    let stacked = tape.concat(&nlls)?;
    Ok(stacked.mean()?)
}

/// Everything a composite loss evaluation needs besides the emissions.
pub struct StimuliInputs<'a, 't> {
    pub encoder_states: &'a [Var<'t>],
    pub lm_states: &'a [Var<'t>],
    pub lm_log_probs: &'a [Var<'t>],
    pub lm_targets: &'a [usize],
    /// Pre-computed stimuli weights; when absent they are derived from the
    /// current emissions. Either way they stay outside the gradient.
    pub gamma: Option<&'a Mat>,
}

/// Per-term breakdown of a composite loss (inactive terms are zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc: f64,
    pub entropy: f64,
    pub lm: f64,
    pub stimuli: f64,
}

/// Assemble the configured criterion.
///
/// The entropy term (for enctc/enstim) is active from the start; the
/// stimuli and LM terms (for stim/enstim) only once `stimuli_active` is
/// set by the caller's schedule, and enstim drops the entropy term at that
/// point unless configured to keep it.
pub fn composite_loss<'t>(
    tape: &'t Tape,
    cfg: &CriterionConfig,
    emission_rows: &[Var<'t>],
    y: &TargetSequence,
    stimuli: Option<&StimuliInputs<'_, 't>>,
    stimuli_active: bool,
) -> Result<(Var<'t>, LossBreakdown), CriterionError> {
    cfg.validate()?;
    let entropy_on = match cfg.kind {
        CriterionKind::Ctc | CriterionKind::Stim => false,
        CriterionKind::EnCtc => cfg.phi != 0.0,
        CriterionKind::EnStim => {
            cfg.phi != 0.0 && (!stimuli_active || cfg.keep_entropy_after_activation)
        }
    };
    let stim_on = cfg.uses_stimuli() && stimuli_active && (cfg.theta != 0.0 || cfg.lambda != 0.0);

    let (mut loss, ctc_value, entropy_value) = if entropy_on {
        let (ctc, h) = ctc_loss_with_entropy(tape, emission_rows, y)?;
        (ctc.sub(h.scale(cfg.phi))?, ctc.value(), h.value())
    } else {
        let ctc = ctc_loss(tape, emission_rows, y)?;
        (ctc, ctc.value(), 0.0)
    };

    let mut lm_value = 0.0;
    let mut stim_value = 0.0;
    if stim_on {
        let inputs = stimuli
            .ok_or(CriterionError::ShapeMismatch("stimuli inputs required for stim criteria"))?;
        if cfg.lambda != 0.0 {
            let lm = lm_loss(tape, inputs.lm_log_probs, inputs.lm_targets)?;
            lm_value = lm.value();
            loss = loss.add(lm.scale(cfg.lambda))?;
        }
        if cfg.theta != 0.0 {
            let computed;
            let gamma = match inputs.gamma {
                Some(g) => g,
                None => {
                    let lattice = emission_values(emission_rows)?;
                    computed = stimuli_weights_for(&lattice, y)?;
                    &computed
                }
            };
            let stim = stimuli_loss(tape, inputs.encoder_states, inputs.lm_states, gamma)?;
            stim_value = stim.value();
            loss = loss.add(stim.scale(cfg.theta))?;
        }
    }

    let breakdown = LossBreakdown {
        total: loss.value(),
        ctc: ctc_value,
        entropy: entropy_value,
        lm: lm_value,
        stimuli: stim_value,
    };
    Ok((loss, breakdown))
}

/// Snapshot tape-recorded emission rows into a plain lattice (for gamma and
/// decoding-side consumers; detached from the gradient by construction).
pub fn emission_values(rows: &[Var<'_>]) -> Result<EmissionLattice, CriterionError> {
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in rows {
        data.push(row.values());
    }
    let m = Mat::from_rows(&data);
    EmissionLattice::from_log_probs(m).map_err(CriterionError::Lattice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::emission_leaf_rows;

    fn target(ids: &[u32]) -> TargetSequence {
        TargetSequence::new(ids.to_vec()).unwrap()
    }

    fn uniform_lattice(t: usize) -> EmissionLattice {
        EmissionLattice::from_probs(&Mat::filled(t, 2, 0.5)).unwrap()
    }

    #[test]
    fn enctc_uniform_case() {
        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &uniform_lattice(2)).unwrap();
        let loss = enctc_loss(&tape, &rows, &target(&[1]), 0.1).unwrap();
        let expected = -math::ln(0.75) - 0.1 * math::ln(3.0);
        assert!((loss.value() - expected).abs() < 1e-12);
        assert!((loss.value() - 0.177821).abs() < 1e-6);
    }

    #[test]
    fn enctc_with_zero_phi_is_bitwise_ctc() {
        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &uniform_lattice(3)).unwrap();
        let a = enctc_loss(&tape, &rows, &target(&[1]), 0.0).unwrap();
        let b = ctc_loss(&tape, &rows, &target(&[1])).unwrap();
        assert_eq!(a.value().to_bits(), b.value().to_bits());
    }

    #[test]
    fn nonblank_slices_pick_odd_states() {
        // K=1: column 0 is extended state 1; K=2: states 1 and 3.
        let lattice = uniform_lattice(3);
        let y1 = target(&[1]);
        let fwd = ctc_forward(&lattice, &y1).unwrap();
        let bwd = ctc_backward(&lattice, &y1).unwrap();
        let (a, b) = nonblank_slices(&fwd, &bwd);
        assert_eq!((a.rows(), a.cols()), (3, 1));
        for t in 0..3 {
            assert_eq!(a.at(t, 0), fwd.log_alpha.at(t, 1));
            assert_eq!(b.at(t, 0), bwd.log_beta.at(t, 1));
        }

        let probs = Mat::filled(4, 3, 1.0 / 3.0);
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let y2 = target(&[1, 2]);
        let fwd = ctc_forward(&lattice, &y2).unwrap();
        let bwd = ctc_backward(&lattice, &y2).unwrap();
        let (a, b) = nonblank_slices(&fwd, &bwd);
        assert_eq!((a.rows(), a.cols()), (4, 2));
        for t in 0..4 {
            assert_eq!(a.at(t, 0), fwd.log_alpha.at(t, 1));
            assert_eq!(a.at(t, 1), fwd.log_alpha.at(t, 3));
            assert_eq!(b.at(t, 1), bwd.log_beta.at(t, 3));
        }
    }

    #[test]
    fn zero_normalizer_is_a_hard_error() {
        // y=(a,a) at minimal T=3 forces the middle step onto the blank, so
        // no gloss state carries mass there.
        let lattice = uniform_lattice(3);
        let err = stimuli_weights_for(&lattice, &target(&[1, 1])).unwrap_err();
        assert_eq!(err, CriterionError::ZeroNormalizer { t: 1 });
    }

    #[test]
    fn enctc_is_non_increasing_in_phi() {
        let lattice = uniform_lattice(4);
        let y = target(&[1]);
        let mut previous = f64::INFINITY;
        for phi in [0.0, 0.05, 0.1, 0.2, 0.5] {
            let tape = Tape::new();
            let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
            let loss = enctc_loss(&tape, &rows, &y, phi).unwrap().value();
            assert!(loss <= previous + 1e-12, "loss rose from {previous} to {loss} at phi={phi}");
            previous = loss;
        }
    }

    #[test]
    fn gamma_single_gloss_is_one() {
        let lattice = uniform_lattice(3);
        let gamma = stimuli_weights_for(&lattice, &target(&[1])).unwrap();
        for t in 0..3 {
            assert!((gamma.at(t, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_uniform_two_step_is_symmetric() {
        let gamma = stimuli_weights_for(&uniform_lattice(2), &target(&[1])).unwrap();
        assert!((gamma.at(0, 0) - gamma.at(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn gamma_columns_normalize() {
        let probs = Mat::from_vec(
            4,
            3,
            vec![0.5, 0.3, 0.2, 0.2, 0.5, 0.3, 0.1, 0.4, 0.5, 0.6, 0.2, 0.2],
        );
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let gamma = stimuli_weights_for(&lattice, &target(&[1, 2])).unwrap();
        for t in 0..4 {
            let sum: f64 = (0..2).map(|k| gamma.at(t, k)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!((0..2).all(|k| gamma.at(t, k) >= 0.0));
        }
    }

    #[test]
    fn stimuli_loss_hand_cases() {
        let tape = Tape::new();
        // h_t == h_k everywhere -> 0.
        let h = tape.vector(&[0.3, -0.7]);
        let gamma = Mat::filled(1, 1, 1.0);
        let zero = stimuli_loss(&tape, &[h], &[h], &gamma).unwrap();
        assert_eq!(zero.value(), 0.0);

        // K=1, T=1, gamma=1, difference (1,1) -> 2.
        let ht = tape.vector(&[1.0, 1.0]);
        let hk = tape.vector(&[0.0, 0.0]);
        let loss = stimuli_loss(&tape, &[ht], &[hk], &gamma).unwrap();
        assert_eq!(loss.value(), 2.0);

        //

        // Doubling all distances quadruples the loss.
        let ht2 = tape.vector(&[2.0, 2.0]);
        let loss2 = stimuli_loss(&tape, &[ht2], &[hk], &gamma).unwrap();
        assert_eq!(loss2.value(), 8.0);
    }

    #[test]
    fn lm_loss_uniform_and_perfect() {
        let tape = Tape::new();
        let l = 4usize;
        let uniform = [math::ln(1.0 / l as f64); 4];
        let rows = [tape.vector(&uniform), tape.vector(&uniform)];
        let loss = lm_loss(&tape, &rows, &[1, 0]).unwrap();
        assert!((loss.value() - math::ln(l as f64)).abs() < 1e-12);

        let mut perfect = [math::ln(1e-12); 4];
        perfect[2] = 0.0;
        let rows = [tape.vector(&perfect)];
        let loss = lm_loss(&tape, &rows, &[2]).unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn lm_loss_matches_hand_computed_nll() {
        // K=2 sentence: rows predict (y_2, eos) with logged probabilities
        // 0.6 and 0.3, so the mean NLL is -(ln 0.6 + ln 0.3)/2.
        let tape = Tape::new();
        let row1 = tape.vector(&[math::ln(0.1), math::ln(0.2), math::ln(0.6), math::ln(0.1)]);
        let row2 = tape.vector(&[math::ln(0.3), math::ln(0.3), math::ln(0.2), math::ln(0.2)]);
        let loss = lm_loss(&tape, &[row1, row2], &[2, 0]).unwrap();
        let expected = -(math::ln(0.6) + math::ln(0.3)) / 2.0;
        assert!((loss.value() - expected).abs() < 1e-12);
    }

    #[test]
    fn composite_reduction_consistency() {
        let lattice = uniform_lattice(3);
        let y = target(&[1]);

        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
        let ctc_ref = ctc_loss(&tape, &rows, &y).unwrap().value();

        for kind in [CriterionKind::EnCtc, CriterionKind::Stim] {
            let mut cfg = CriterionConfig::new(kind);
            cfg.phi = 0.0;
            cfg.theta = 0.0;
            cfg.lambda = 0.0;
            let tape = Tape::new();
            let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
            let (loss, parts) = composite_loss(&tape, &cfg, &rows, &y, None, true).unwrap();
            assert_eq!(loss.value().to_bits(), ctc_ref.to_bits());
            assert_eq!(parts.entropy, 0.0);
        }
    }

    #[test]
    fn enstim_before_activation_is_enctc() {
        let lattice = uniform_lattice(2);
        let y = target(&[1]);
        let cfg = CriterionConfig::new(CriterionKind::EnStim);

        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
        let (loss, _) = composite_loss(&tape, &cfg, &rows, &y, None, false).unwrap();

        let tape2 = Tape::new();
        let (_, rows2) = emission_leaf_rows(&tape2, &lattice).unwrap();
        let reference = enctc_loss(&tape2, &rows2, &y, cfg.phi).unwrap();
        assert_eq!(loss.value().to_bits(), reference.value().to_bits());
    }

    #[test]
    fn enstim_after_activation_drops_entropy_and_adds_stim_terms() {
        let lattice = uniform_lattice(2);
        let y = target(&[1]);
        let cfg = CriterionConfig::new(CriterionKind::EnStim);

        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
        let ht = [tape.vector(&[1.0, 0.0]), tape.vector(&[0.5, 0.5])];
        let hk = [tape.vector(&[0.0, 0.0])];
        let lm_rows = [tape.vector(&[math::ln(0.25); 4])];
        let inputs = StimuliInputs {
            encoder_states: &ht,
            lm_states: &hk,
            lm_log_probs: &lm_rows,
            lm_targets: &[0],
            gamma: None,
        };
        let (loss, parts) =
            composite_loss(&tape, &cfg, &rows, &y, Some(&inputs), true).unwrap();
        assert_eq!(parts.entropy, 0.0);
        assert!(parts.lm > 0.0);
        assert!(parts.stimuli > 0.0);
        let expected = parts.ctc + cfg.lambda * parts.lm + cfg.theta * parts.stimuli;
        assert!((loss.value() - expected).abs() < 1e-9);
    }
}
