//! The `oracle` command: randomized DP-vs-enumeration comparison with a
//! replayable per-trial log and a pass/fail summary against the documented
//! thresholds.

use std::fmt::Write as _;

use ctclab_core::criteria::{stimuli_weights_for, CriterionError};
use ctclab_core::decode::{forced_alignment, greedy_decode, prefix_beam_decode};
use ctclab_core::lattice::{
    collapse, ctc_backward, ctc_forward, ctc_loss_value, ctc_loss_with_entropy,
    emission_leaf_rows, extend_targets, min_admissible_t, posterior_at, EmissionLattice,
    TargetSequence,
};
use ctclab_core::oracle::{
    alpha_beta_by_definition, best_labeling_by_enumeration, constrained_best_path,
    entropy_by_enumeration, gamma_by_definition, prob_by_enumeration, EnumerationBudget,
};
use ctclab_core::{Mat, Tape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL_PROB: f64 = 1e-9;
pub const TOL_ENTROPY: f64 = 1e-8;
pub const TOL_GAMMA: f64 = 1e-9;
pub const TOL_SLICE: f64 = 1e-9;
pub const TOL_ALPHA_BETA: f64 = 1e-9;
pub const TOL_FORCED: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default)]
pub struct Deviations {
    pub prob: f64,
    pub entropy: f64,
    pub gamma: f64,
    pub slice: f64,
    pub alpha_beta: f64,
    pub forced: f64,
    pub beam_mismatches: usize,
    pub skipped: usize,
}

impl Deviations {
    pub fn pass(&self) -> bool {
        self.prob < TOL_PROB
            && self.entropy < TOL_ENTROPY
            && self.gamma < TOL_GAMMA
            && self.slice < TOL_SLICE
            && self.alpha_beta < TOL_ALPHA_BETA
            && self.forced < TOL_FORCED
            && self.beam_mismatches == 0
    }
}

pub struct OracleOutcome {
    pub report: String,
    pub deviations: Deviations,
}

fn random_lattice(rng: &mut ChaCha8Rng, t_len: usize, l_len: usize) -> EmissionLattice {
    let mut m = Mat::zeros(t_len, l_len);
    for t in 0..t_len {
        let mut row: Vec<f64> = (0..l_len).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        for (v, p) in row.iter_mut().enumerate() {
            *p /= z;
            m.set(t, v, *p);
        }
    }
    EmissionLattice::from_probs(&m).unwrap()
}

fn random_target(rng: &mut ChaCha8Rng, l_len: usize, k_max: usize, t_len: usize) -> TargetSequence {
    loop {
        let k = rng.random_range(1..=k_max.min(t_len));
        let ids: Vec<u32> = (0..k).map(|_| rng.random_range(1..l_len as u32)).collect();
        let y = TargetSequence::new(ids).unwrap();
        if min_admissible_t(&y) <= t_len {
            return y;
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Run `trials` randomized comparisons (T <= 8, L <= 4, K <= 3) within the
/// enumeration budget.
pub fn run_oracle(trials: usize, budget_paths: u64, seed: u64) -> OracleOutcome {
    let budget = EnumerationBudget { max_paths: budget_paths };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = Deviations::default();
    let mut report = String::new();
    let _ = writeln!(report, "oracle trials={trials} budget={budget_paths} seed={seed}");

    for n in 0..trials {
        let t_len = rng.random_range(1..=8usize);
        let l_len = rng.random_range(2..=4usize);
        let lattice = random_lattice(&mut rng, t_len, l_len);
        let y = random_target(&mut rng, l_len, 3, t_len);

        let p_enum = match prob_by_enumeration(&lattice, y.ids(), budget) {
            Ok(p) => p,
            Err(_) => {
                dev.skipped += 1;
                let _ = writeln!(
                    report,
                    "trial n={n} t={t_len} l={l_len} k={} skipped reason=budget",
                    y.len()
                );
                continue;
            }
        };
        let p_dp = (-ctc_loss_value(&lattice, &y).unwrap()).exp();
        let d_prob = rel(p_dp, p_enum);
        dev.prob = dev.prob.max(d_prob);

        // Entropy via the joint recursion.
        let tape = Tape::new();
        let (_, rows) = emission_leaf_rows(&tape, &lattice).unwrap();
        let (_, h_var) = ctc_loss_with_entropy(&tape, &rows, &y).unwrap();
        let h_enum = entropy_by_enumeration(&lattice, y.ids(), budget).unwrap();
        let d_h = (h_var.value() - h_enum).abs() / h_enum.abs().max(1.0);
        dev.entropy = dev.entropy.max(d_h);

        // Slice identity across every t.
        let p0 = posterior_at(&lattice, &y, 0).unwrap();
        let mut d_slice = 0.0f64;
        for t in 1..t_len {
            d_slice = d_slice.max(rel(posterior_at(&lattice, &y, t).unwrap(), p0));
        }
        dev.slice = dev.slice.max(d_slice);

        // Definitional alpha/beta and gamma on the smaller instances. The
        // definitional sums enumerate every prefix length, so they need
        // headroom beyond the plain path budget.
        let def_paths: f64 = (1..=t_len as i32).map(|t| (l_len as f64).powi(t)).sum();
        let mut d_ab = 0.0f64;
        let mut d_gamma = 0.0f64;
        if t_len <= 6 && l_len <= 3 && def_paths <= budget_paths as f64 {
            let fwd = ctc_forward(&lattice, &y).unwrap();
            let bwd = ctc_backward(&lattice, &y).unwrap();
            let (a_def, b_def) = alpha_beta_by_definition(&lattice, &y, budget).unwrap();
            let ext = extend_targets(&y);
            for t in 0..t_len {
                for s in 0..ext.len() {
                    let a_dp = fwd.log_alpha.at(t, s).exp();
                    let b_dp = bwd.log_beta.at(t, s).exp();
                    d_ab = d_ab.max((a_dp - a_def.at(t, s)).abs() / a_def.at(t, s).max(1.0));
                    d_ab = d_ab.max((b_dp - b_def.at(t, s)).abs() / b_def.at(t, s).max(1.0));
                }
            }
            dev.alpha_beta = dev.alpha_beta.max(d_ab);

            match stimuli_weights_for(&lattice, &y) {
                Ok(gamma) => {
                    let gamma_def = gamma_by_definition(&lattice, &y, budget).unwrap();
                    for t in 0..t_len {
                        for k in 0..y.len() {
                            d_gamma = d_gamma.max((gamma.at(t, k) - gamma_def.at(t, k)).abs());
                        }
                    }
                }
                Err(CriterionError::ZeroNormalizer { .. }) => {
                    assert!(gamma_by_definition(&lattice, &y, budget).is_err());
                }
                Err(e) => panic!("unexpected stimuli error: {e}"),
            }
            dev.gamma = dev.gamma.max(d_gamma);

            // Forced alignment vs the exhaustive constrained maximum.
            let (path, _) = forced_alignment(&lattice, &y).unwrap();
            assert_eq!(collapse(&path), y.ids());
            let mut log_p = 0.0;
            for (t, &v) in path.iter().enumerate() {
                log_p += lattice.log_prob(t, v);
            }
            let (_, best_p) = constrained_best_path(&lattice, &y, budget).unwrap();
            let d_forced = rel(log_p.exp(), best_p);
            dev.forced = dev.forced.max(d_forced);

            // Beam exactness at unpruned width, plus the beam-1 degeneracy.
            let beam = prefix_beam_decode(&lattice, 1_000_000, None).unwrap();
            let (best_labels, _) = best_labeling_by_enumeration(&lattice, budget).unwrap();
            if beam.labels != best_labels {
                dev.beam_mismatches += 1;
            }
            let beam1 = prefix_beam_decode(&lattice, 1, None).unwrap();
            if beam1.labels != greedy_decode(&lattice).labels {
                dev.beam_mismatches += 1;
            }
        }

        let _ = writeln!(
            report,
            "trial n={n} t={t_len} l={l_len} k={} dev_p={d_prob:.3e} dev_h={d_h:.3e} dev_slice={d_slice:.3e} dev_ab={d_ab:.3e} dev_gamma={d_gamma:.3e}",
            y.len()
        );
    }

    let _ = writeln!(
        report,
        "summary max_dev_p={:.3e} max_dev_h={:.3e} max_dev_gamma={:.3e} max_dev_slice={:.3e} max_dev_ab={:.3e} max_dev_forced={:.3e} beam_mismatches={} skipped={} pass={}",
        dev.prob,
        dev.entropy,
        dev.gamma,
        dev.slice,
        dev.alpha_beta,
        dev.forced,
        dev.beam_mismatches,
        dev.skipped,
        dev.pass()
    );
    OracleOutcome { report, deviations: dev }
}
