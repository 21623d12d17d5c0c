//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test -p ctclab --test acceptance -- --nocapture` to see
//! the per-criterion summary lines.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ctclab::config::{PretrainScheme, RunSettings, StimActivate};
use ctclab::formats::write_dataset;
use ctclab::trainer;
use ctclab_core::criteria::CriterionKind;
use ctclab_core::decode::{greedy_decode, prefix_beam_decode};
use ctclab_core::lattice::EmissionLattice;
use ctclab_core::metrics::{wer, WerAccumulator};
use ctclab_core::oracle::{best_labeling_by_enumeration, EnumerationBudget};
use ctclab_core::synth::{gen_dataset, GenConfig, SplitMode};
use ctclab_core::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SI_SEEDS: [u64; 5] = [3, 4, 5, 6, 7];

#[derive(Debug, Clone)]
struct RunStats {
    epoch1_val_wer: f64,
    final_peakiness: f64,
    test_wer: f64,
}

fn run_experiment(data_dir: &std::path::Path, seed: u64, arm: &str) -> RunStats {
    let mut settings = RunSettings {
        data_dir: data_dir.to_path_buf(),
        out_dir: std::path::PathBuf::new(),
        seed,
        max_epochs: 8,
        lr: 3e-3,
        pretrain: PretrainScheme::Isolated,
        stim_activate: StimActivate::Auto,
        ..RunSettings::default()
    };
    match arm {
        "ctc" => {
            settings.criterion.kind = CriterionKind::Ctc;
        }
        "enctc" => {
            settings.criterion.kind = CriterionKind::EnCtc;
            settings.criterion.phi = 0.2;
        }
        "enstim" => {
            settings.criterion.kind = CriterionKind::EnStim;
            settings.criterion.phi = 0.1;
            settings.criterion.theta = 0.5;
            settings.criterion.lambda = 1.0;
        }
        "none" | "isolated" | "uniform" => {
            settings.criterion.kind = CriterionKind::Ctc;
            settings.pretrain = match arm {
                "none" => PretrainScheme::None,
                "isolated" => PretrainScheme::Isolated,
                _ => PretrainScheme::Uniform,
            };
        }
        other => panic!("unknown arm {other}"),
    }
    let mut sink = std::io::sink();
    let out = trainer::train(&settings, &mut sink).expect("training run failed");
    RunStats {
        epoch1_val_wer: out.epochs.first().expect("at least one epoch").val_wer,
        final_peakiness: out.epochs.last().expect("at least one epoch").peakiness,
        test_wer: out.test_report.wer(),
    }
}

struct CriterionRuns {
    stats: BTreeMap<(String, u64), RunStats>,
    wall_secs: f64,
}

/// Criterion-comparison runs on the stock benchmark (criteria 5 and 6).
fn default_benchmark_runs() -> &'static CriterionRuns {
    static RUNS: OnceLock<CriterionRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let dataset = gen_dataset(&GenConfig::default(), 20_260_810).expect("gen");
        write_dataset(dir.path(), &dataset).expect("write dataset");
        let mut stats = BTreeMap::new();
        for &seed in &SEEDS {
            for arm in ["ctc", "enctc", "enstim"] {
                stats.insert((arm.to_string(), seed), run_experiment(dir.path(), seed, arm));
            }
        }
        CriterionRuns { stats, wall_secs: start.elapsed().as_secs_f64() }
    })
}

/// Pretraining-scheme runs on the signer-independent split (criterion 7).
fn si_pretraining_runs() -> &'static CriterionRuns {
    static RUNS: OnceLock<CriterionRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let config = GenConfig {
            split_mode: SplitMode::SignerIndependent,
            noise_sigma: 1.3,
            style_strength: 0.45,
            gloss_dur_min: 4,
            gloss_dur_max: 16,
            transition_min: 2,
            transition_max: 8,
            train_sentences: 600,
            val_sentences: 100,
            test_sentences: 100,
            ..GenConfig::default()
        };
        let dataset = gen_dataset(&config, 9).expect("gen");
        write_dataset(dir.path(), &dataset).expect("write dataset");
        let mut stats = BTreeMap::new();
        for &seed in &SI_SEEDS {
            for arm in ["none", "isolated", "uniform"] {
                stats.insert((arm.to_string(), seed), run_experiment(dir.path(), seed, arm));
            }
        }
        CriterionRuns { stats, wall_secs: start.elapsed().as_secs_f64() }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn acceptance_1_oracle_equivalence() {
    let start = Instant::now();
    let outcome = ctclab::oraclecmd::run_oracle(200, 10_000_000, 11);
    let wall = start.elapsed().as_secs_f64();
    let d = outcome.deviations;
    assert!(d.prob < 1e-9, "p deviation {:.3e}", d.prob);
    assert!(d.entropy < 1e-8, "H deviation {:.3e}", d.entropy);
    assert!(d.gamma < 1e-9, "gamma deviation {:.3e}", d.gamma);
    assert!(d.slice < 1e-9, "slice-identity deviation {:.3e}", d.slice);
    assert!(d.beam_mismatches == 0 && d.skipped == 0);
    assert!(wall < 60.0, "oracle suite took {wall:.1}s");
    println!(
        "ACCEPTANCE 1 oracle equivalence: PASS (p {:.2e}, H {:.2e}, gamma {:.2e}, slice {:.2e}, {wall:.1}s)",
        d.prob, d.entropy, d.gamma, d.slice
    );
}

#[test]
fn acceptance_2_gradient_gate() {
    let start = Instant::now();
    let results = ctclab::gradsuite::run_suite(7, false).expect("suite");
    let wall = start.elapsed().as_secs_f64();
    let mut worst_fd = 0.0f64;
    let mut closed_form = 0.0f64;
    for r in &results {
        assert!(r.passed(), "{} failed: {:.3e} (tol {:.1e})", r.name, r.max_rel_err, r.tolerance);
        if r.name == "closed-form:ctc" {
            closed_form = r.max_rel_err;
        } else {
            worst_fd = worst_fd.max(r.max_rel_err);
        }
    }
    assert!(wall < 120.0, "gradient suite took {wall:.1}s");
    println!(
        "ACCEPTANCE 2 gradient gate: PASS (worst FD {:.2e} < 1e-4, closed form {:.2e} < 1e-10, {wall:.1}s)",
        worst_fd, closed_form
    );
}

#[test]
fn acceptance_3_decoder_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
    let budget = EnumerationBudget::default();
    let mut checked = 0;
    for _ in 0..100 {
        let t_len = rng.random_range(1..=6usize);
        let l_len = rng.random_range(2..=3usize);
        let mut m = Mat::zeros(t_len, l_len);
        for t in 0..t_len {
            let mut row: Vec<f64> = (0..l_len).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = row.iter().sum();
            for (v, p) in row.iter_mut().enumerate() {
                *p /= z;
                m.set(t, v, *p);
            }
        }
        let lattice = EmissionLattice::from_probs(&m).unwrap();
        let exact = prefix_beam_decode(&lattice, 1_000_000, None).unwrap();
        let (best_labels, best_p) = best_labeling_by_enumeration(&lattice, budget).unwrap();
        assert_eq!(exact.labels, best_labels, "beam missed the optimum");
        assert!((exact.log_score.exp() - best_p).abs() / best_p < 1e-9);

        let beam1 = prefix_beam_decode(&lattice, 1, None).unwrap();
        assert_eq!(beam1.labels, greedy_decode(&lattice).labels, "beam-1 != greedy");
        checked += 1;
    }
    println!("ACCEPTANCE 3 decoder exactness: PASS ({checked} instances)");
}

#[test]
fn acceptance_4_wer_unit_suite() {
    let ops = wer(&[1, 2, 3, 4], &[1, 9, 3]).unwrap();
    assert_eq!(
        (ops.substitutions, ops.deletions, ops.insertions, ops.wer()),
        (1, 1, 0, 0.5)
    );
    let ops = wer(&[1, 2, 3], &[1, 2, 3]).unwrap();
    assert_eq!((ops.edits(), ops.wer()), (0, 0.0));
    let ops = wer(&[1], &[2, 3]).unwrap();
    assert_eq!(
        (ops.substitutions, ops.deletions, ops.insertions, ops.wer()),
        (1, 0, 1, 2.0)
    );

    // Aggregate equals per-sentence recomputation.
    let pairs: [(&[u32], &[u32]); 4] =
        [(&[1, 2, 3, 4], &[1, 9, 3]), (&[1, 2, 3], &[1, 2, 3]), (&[1], &[2, 3]), (&[5, 5], &[5])];
    let mut acc = WerAccumulator::default();
    let mut edits = 0;
    let mut n = 0;
    for (r, h) in pairs {
        let ops = wer(r, h).unwrap();
        acc.add(&ops);
        edits += ops.edits();
        n += r.len();
    }
    assert_eq!(acc.wer(), edits as f64 / n as f64);
    println!("ACCEPTANCE 4 WER unit suite: PASS");
}

#[test]
fn acceptance_5_peakiness_claim() {
    let runs = default_benchmark_runs();
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let ctc = runs.stats[&("ctc".to_string(), seed)].final_peakiness;
        let enctc = runs.stats[&("enctc".to_string(), seed)].final_peakiness;
        assert!(
            enctc < ctc,
            "seed {seed}: EnCTC peakiness {enctc:.4} not below CTC {ctc:.4}"
        );
        lines.push(format!("seed {seed}: ctc {ctc:.4} vs enctc {enctc:.4}"));
    }
    println!("ACCEPTANCE 5 peakiness (EnCTC phi=0.2 < CTC, 5/5 seeds): PASS [{}]", lines.join("; "));
}

#[test]
fn acceptance_6_criterion_ordering() {
    let runs = default_benchmark_runs();
    let ctc_mean = mean(SEEDS.iter().map(|s| runs.stats[&("ctc".to_string(), *s)].test_wer));
    let enstim_mean =
        mean(SEEDS.iter().map(|s| runs.stats[&("enstim".to_string(), *s)].test_wer));
    assert!(
        enstim_mean <= ctc_mean,
        "mean WER: enstim {enstim_mean:.5} vs ctc {ctc_mean:.5}"
    );
    assert!(runs.wall_secs < 7200.0, "criterion runs took {:.0}s", runs.wall_secs);
    println!(
        "ACCEPTANCE 6 criterion ordering: PASS (mean test WER enstim {:.5} <= ctc {:.5}, margin {:.5}, {:.0}s for all runs)",
        enstim_mean,
        ctc_mean,
        ctc_mean - enstim_mean,
        runs.wall_secs
    );
}

#[test]
fn acceptance_7_pretraining_claim() {
    let runs = si_pretraining_runs();
    for &seed in &SI_SEEDS {
        let none = runs.stats[&("none".to_string(), seed)].epoch1_val_wer;
        let isolated = runs.stats[&("isolated".to_string(), seed)].epoch1_val_wer;
        assert!(
            isolated < none,
            "seed {seed}: epoch-1 val WER isolated {isolated:.4} not below none {none:.4}"
        );
    }
    let mean_of = |arm: &str| mean(SI_SEEDS.iter().map(|s| runs.stats[&(arm.to_string(), *s)].test_wer));
    let (none, isolated, uniform) = (mean_of("none"), mean_of("isolated"), mean_of("uniform"));
    assert!(
        isolated < none && isolated < uniform,
        "isolated ({isolated:.4}) must rank best: none {none:.4}, uniform {uniform:.4}"
    );
    println!(
        "ACCEPTANCE 7 pretraining: PASS (epoch-1 isolated<none 5/5; mean test WER isolated {:.4} | uniform {:.4} | none {:.4})",
        isolated, uniform, none
    );
}

#[test]
fn acceptance_8_performance() {
    // GSL-like size: T=62 prediction steps, K=20, L=311; single thread.
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE9C);
    let mut m = Mat::zeros(62, 311);
    for t in 0..62 {
        let mut row: Vec<f64> = (0..311).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        for (v, p) in row.iter_mut().enumerate() {
            *p /= z;
            m.set(t, v, *p);
        }
    }
    let lattice = EmissionLattice::from_probs(&m).unwrap();
    let mut ids = Vec::new();
    for k in 0..20u32 {
        ids.push(1 + (k % 200));
    }
    let y = ctclab_core::lattice::TargetSequence::new(ids).unwrap();

    let ctc = ctclab::bench::time_criterion(&lattice, &y, false, 21);
    let enctc = ctclab::bench::time_criterion(&lattice, &y, true, 21);
    assert!(ctc.median_ms < 100.0, "CTC loss+gradient median {:.2}ms", ctc.median_ms);
    assert!(
        enctc.median_ms <= 3.0 * ctc.median_ms,
        "EnCTC {:.2}ms more than 3x CTC {:.2}ms",
        enctc.median_ms,
        ctc.median_ms
    );
    println!(
        "ACCEPTANCE 8 performance: PASS (ctc median {:.2}ms < 100ms, enctc {:.2}ms = {:.2}x)",
        ctc.median_ms,
        enctc.median_ms,
        enctc.median_ms / ctc.median_ms
    );
}

#[test]
fn acceptance_9_determinism() {
    let bin = env!("CARGO_BIN_EXE_ctclab");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(&cfg, "train_sentences = 40\nval_sentences = 10\ntest_sentences = 10\n")
        .unwrap();
    let status = Command::new(bin)
        .args(["gen", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());

    let run = |out: &std::path::Path| {
        let status = Command::new(bin)
            .args(["train", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(out)
            .args([
                "--seed",
                "12",
                "--criterion",
                "enstim",
                "--epochs",
                "3",
                "--pretrain",
                "isolated",
                "--lr",
                "0.003",
                "--stim-activate",
                "2",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("run-a");
    let out_b = dir.path().join("run-b");
    run(&out_a);
    run(&out_b);

    for file in ["epochs.txt", "test_report.txt", "model.ckpt"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    println!("ACCEPTANCE 9 determinism: PASS (epochs.txt, test_report.txt, model.ckpt byte-identical)");
}
