//! The `gradcheck` command's finite-difference suites: tape operations,
//! every criterion w.r.t. emission logits, the closed-form CTC error signal,
//! and full end-to-end model-parameter checks on a tiny configuration.

use anyhow::{anyhow, Result};
use ctclab_core::criteria::{
    composite_loss, stimuli_weights_for, CriterionConfig, CriterionKind, StimuliInputs,
};
use ctclab_core::gradcheck::{
    central_difference, check_gradient, max_relative_error, CheckResult, DEFAULT_EPS, DEFAULT_TOL,
};
use ctclab_core::lattice::{ctc_grad_closed_form, ctc_loss, EmissionLattice, TargetSequence};
use ctclab_core::model::{EncoderConfig, Model, RnnLmConfig};
use ctclab_core::{Mat, Tape, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn emission_rows<'t>(
    tape: &'t Tape,
    logits: &[f64],
    t_len: usize,
    l_len: usize,
) -> (Var<'t>, Vec<Var<'t>>) {
    let leaf = tape.matrix(t_len, l_len, logits);
    let rows =
        (0..t_len).map(|t| leaf.row(t).unwrap().log_softmax().unwrap()).collect();
    (leaf, rows)
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.3..1.5)).collect();

    // exp(x) . log(x) composition reduced to a scalar.
    let f = |v: &[f64]| {
        let tape = Tape::new();
        let leaf = tape.vector(v);
        leaf.exp().mul(leaf.log().unwrap()).unwrap().sum().value()
    };
    let tape = Tape::new();
    let leaf = tape.vector(&x);
    let root = leaf.exp().mul(leaf.log().unwrap()).unwrap().sum();
    tape.backward(root).unwrap();
    out.push(check_gradient("op:exp-log", f, &x, &leaf.grad().unwrap(), DEFAULT_EPS, DEFAULT_TOL));

    // matvec + tanh + log_sum_exp chain.
    let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xv = [0.4, -0.9, 1.2, 0.1];
    let f = |wv: &[f64]| {
        let tape = Tape::new();
        let m = tape.matrix(3, 4, wv);
        let v = tape.vector(&xv);
        m.matvec(v).unwrap().tanh().log_sum_exp().unwrap().value()
    };
    let tape = Tape::new();
    let m = tape.matrix(3, 4, &w);
    let v = tape.vector(&xv);
    let root = m.matvec(v).unwrap().tanh().log_sum_exp().unwrap();
    tape.backward(root).unwrap();
    out.push(check_gradient("op:matvec-lse", f, &w, &m.grad().unwrap(), DEFAULT_EPS, DEFAULT_TOL));

    // softmax under a fixed weighting.
    let s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights = [0.3, -0.5, 0.8, 0.2, -0.1, 0.6];
    let f = |v: &[f64]| {
        let tape = Tape::new();
        let leaf = tape.vector(v);
        let w = tape.vector(&weights);
        leaf.softmax().unwrap().mul(w).unwrap().sum().value()
    };
    let tape = Tape::new();
    let leaf = tape.vector(&s);
    let w = tape.vector(&weights);
    let root = leaf.softmax().unwrap().mul(w).unwrap().sum();
    tape.backward(root).unwrap();
    out.push(check_gradient("op:softmax", f, &s, &leaf.grad().unwrap(), DEFAULT_EPS, DEFAULT_TOL));
    out
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let t_len = 5usize;
    let l_len = 4usize;
    let d = 3usize;
    let y = TargetSequence::new(vec![2, 1]).unwrap();
    let k_len = y.len();
    let lm_classes = l_len;

    let n_logits = t_len * l_len;
    let n_ht = t_len * d;
    let n_hk = k_len * d;
    let n_lm = k_len * lm_classes;
    let flat0: Vec<f64> = random_logits(rng, n_logits + n_ht + n_hk + n_lm);

    let gamma_pin = {
        let tape = Tape::new();
        let (_, rows) = emission_rows(&tape, &flat0[..n_logits], t_len, l_len);
        let lattice = ctclab_core::criteria::emission_values(&rows).unwrap();
        stimuli_weights_for(&lattice, &y).unwrap()
    };

    let eval = |flat: &[f64], cfg: &CriterionConfig, leaves_out: Option<&mut Vec<Vec<f64>>>| -> f64 {
        let tape = Tape::new();
        let (leaf, rows) = emission_rows(&tape, &flat[..n_logits], t_len, l_len);
        let ht: Vec<Var> = (0..t_len)
            .map(|t| tape.vector(&flat[n_logits + t * d..n_logits + (t + 1) * d]))
            .collect();
        let hk: Vec<Var> = (0..k_len)
            .map(|k| tape.vector(&flat[n_logits + n_ht + k * d..n_logits + n_ht + (k + 1) * d]))
            .collect();
        let lm_leaves: Vec<Var> = (0..k_len)
            .map(|k| {
                let off = n_logits + n_ht + n_hk + k * lm_classes;
                tape.vector(&flat[off..off + lm_classes])
            })
            .collect();
        let lm_rows: Vec<Var> = lm_leaves.iter().map(|v| v.log_softmax().unwrap()).collect();
        let inputs = StimuliInputs {
            encoder_states: &ht,
            lm_states: &hk,
            lm_log_probs: &lm_rows,
            lm_targets: &[1, 0],
            gamma: Some(&gamma_pin),
        };
        let (loss, _) = composite_loss(&tape, cfg, &rows, &y, Some(&inputs), true).unwrap();
        if let Some(outs) = leaves_out {
            tape.backward(loss).unwrap();
            outs.push(leaf.grad().unwrap());
            for h in ht.iter().chain(hk.iter()).chain(lm_leaves.iter()) {
                outs.push(h.grad().unwrap());
            }
        }
        loss.value()
    };

    let mut out = Vec::new();
    for kind in
        [CriterionKind::Ctc, CriterionKind::EnCtc, CriterionKind::Stim, CriterionKind::EnStim]
    {
        let mut cfg = CriterionConfig::new(kind);
        cfg.phi = 0.15;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let _ = eval(&flat0, &cfg, Some(&mut grads));
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        let fd = central_difference(|x| eval(x, &cfg, None), &flat0, DEFAULT_EPS);
        out.push(CheckResult {
            name: format!("loss:{}", kind.name()),
            max_rel_err: max_relative_error(&analytic, &fd),
            tolerance: DEFAULT_TOL,
        });
    }
    out
}

fn closed_form_check(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let t_len = rng.random_range(2..=7);
        let l_len = rng.random_range(2..=4);
        let mut probs = Mat::zeros(t_len, l_len);
        for t in 0..t_len {
            let mut row: Vec<f64> = (0..l_len).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = row.iter().sum();
            for (v, p) in row.iter_mut().enumerate() {
                *p /= z;
                probs.set(t, v, *p);
            }
        }
        let lattice = EmissionLattice::from_probs(&probs).unwrap();
        let y = loop {
            let k = rng.random_range(1..=3.min(t_len));
            let ids: Vec<u32> = (0..k).map(|_| rng.random_range(1..l_len as u32)).collect();
            let y = TargetSequence::new(ids).unwrap();
            if ctclab_core::lattice::min_admissible_t(&y) <= t_len {
                break y;
            }
        };
        let tape = Tape::new();
        let g = tape.matrix(t_len, l_len, probs.data());
        let rows: Vec<Var> = (0..t_len).map(|t| g.row(t).unwrap().log().unwrap()).collect();
        let loss = ctc_loss(&tape, &rows, &y).unwrap();
        tape.backward(loss).unwrap();
        let auto = g.grad().unwrap();
        let closed = ctc_grad_closed_form(&lattice, &y).unwrap();
        for (i, &a) in auto.iter().enumerate() {
            let c = closed.data()[i];
            if c == 0.0 {
                worst = worst.max(a.abs());
            } else {
                worst = worst.max((a - c).abs() / c.abs());
            }
        }
    }
    CheckResult { name: "closed-form:ctc".to_string(), max_rel_err: worst, tolerance: 1e-10 }
}

fn model_checks(seed: u64, quick: bool) -> Result<Vec<CheckResult>> {
    let enc = EncoderConfig {
        input_dim: 3,
        conv_channels: 4,
        kernel: 3,
        rnn_hidden: 3,
        proj_dim: 4,
        labels: 4,
    };
    let lm = RnnLmConfig { glosses: 3, embed_dim: 3, hidden: 4 };
    let base = Model::new(enc, lm, seed).map_err(|e| anyhow!("{e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let n_frames = 12usize;
    let frames = Mat::from_vec(
        n_frames,
        3,
        (0..n_frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let y = TargetSequence::new(vec![2, 1]).unwrap();

    let flat0: Vec<f64> = (0..base.params.len()).flat_map(|i| base.params.values(i).to_vec()).collect();
    let set_flat = |model: &mut Model, flat: &[f64]| {
        let mut off = 0;
        for i in 0..model.params.len() {
            let n = model.params.values(i).len();
            model.params.values_mut(i).copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    };

    let gamma_pin = {
        let tape = Tape::new();
        let params = base.tape_params(&tape);
        let out = base.encoder_forward(&tape, &params, &frames).map_err(|e| anyhow!("{e}"))?;
        let lattice =
            ctclab_core::criteria::emission_values(&out.emissions).map_err(|e| anyhow!("{e}"))?;
        stimuli_weights_for(&lattice, &y).map_err(|e| anyhow!("{e}"))?
    };

    let kinds: &[CriterionKind] = if quick {
        &[CriterionKind::Ctc, CriterionKind::EnStim]
    } else {
        &[CriterionKind::Ctc, CriterionKind::EnCtc, CriterionKind::Stim, CriterionKind::EnStim]
    };

    let mut out = Vec::new();
    for &kind in kinds {
        let mut cfg = CriterionConfig::new(kind);
        cfg.phi = 0.1;

        let loss_of = |model: &Model| -> f64 {
            let tape = Tape::new();
            let params = model.tape_params(&tape);
            let enc_out = model.encoder_forward(&tape, &params, &frames).unwrap();
            let lm_out = model.rnnlm_forward(&tape, &params, &y).unwrap();
            let inputs = StimuliInputs {
                encoder_states: &enc_out.hidden,
                lm_states: &lm_out.states,
                lm_log_probs: &lm_out.log_probs,
                lm_targets: &lm_out.targets,
                gamma: Some(&gamma_pin),
            };
            let (loss, _) =
                composite_loss(&tape, &cfg, &enc_out.emissions, &y, Some(&inputs), true).unwrap();
            loss.value()
        };

        // Analytic gradients over every parameter.
        let analytic: Vec<f64> = {
            let tape = Tape::new();
            let params = base.tape_params(&tape);
            let enc_out = base.encoder_forward(&tape, &params, &frames).unwrap();
            let lm_out = base.rnnlm_forward(&tape, &params, &y).unwrap();
            let inputs = StimuliInputs {
                encoder_states: &enc_out.hidden,
                lm_states: &lm_out.states,
                lm_log_probs: &lm_out.log_probs,
                lm_targets: &lm_out.targets,
                gamma: Some(&gamma_pin),
            };
            let (loss, _) =
                composite_loss(&tape, &cfg, &enc_out.emissions, &y, Some(&inputs), true).unwrap();
            tape.backward(loss).unwrap();
            params.grads().unwrap().into_iter().flatten().collect()
        };

        // Max pooling is piecewise smooth, so the refined checker is used to
        // distinguish stencil-straddled pool crossings from gradient bugs.
        let mut scratch = Model::new(enc, lm, seed).map_err(|e| anyhow!("{e}"))?;
        out.push(ctclab_core::gradcheck::check_gradient_refined(
            &format!("model:{}", kind.name()),
            |flat| {
                set_flat(&mut scratch, flat);
                loss_of(&scratch)
            },
            &flat0,
            &analytic,
            DEFAULT_EPS,
            DEFAULT_TOL,
        ));
    }
    Ok(out)
}

/// Run every suite; each result carries the max relative error observed.
pub fn run_suite(seed: u64, quick: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = op_checks(&mut rng);
    results.extend(loss_checks(&mut rng));
    results.push(closed_form_check(&mut rng));
    results.extend(model_checks(seed, quick)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_the_real_gradients() {
        let results = run_suite(3, true).unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.passed(), "{} failed with {:.3e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn injected_sign_flip_fails_with_named_op() {
        // The checker must flag a deliberately wrong analytic gradient and
        // carry the op name in the result.
        let f = |x: &[f64]| x[0] * x[0] + x[1];
        let x = [1.0, 2.0];
        let sign_flipped = [-2.0, 1.0];
        let res = check_gradient("op:square-faulty", f, &x, &sign_flipped, DEFAULT_EPS, DEFAULT_TOL);
        assert!(!res.passed());
        assert_eq!(res.name, "op:square-faulty");
    }
}
