//! The `bench` command: single-thread loss+gradient wall-clock at realistic
//! corpus sizes (a GSL-like setting and a raw T=250 lattice), with medians
//! and p95 over repeated runs and a T-doubling scaling probe.

use std::fmt::Write as _;
use std::time::Instant;

use ctclab_core::lattice::{
    ctc_loss, ctc_loss_with_entropy, emission_leaf_rows, EmissionLattice, TargetSequence,
};
use ctclab_core::{Mat, Tape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct BenchStat {
    pub median_ms: f64,
    pub p95_ms: f64,
}

fn stats(mut times_ms: Vec<f64>) -> BenchStat {
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ms = times_ms[times_ms.len() / 2];
    let p95_idx = ((times_ms.len() as f64) * 0.95) as usize;
    let p95_ms = times_ms[p95_idx.min(times_ms.len() - 1)];
    BenchStat { median_ms, p95_ms }
}

fn random_case(rng: &mut ChaCha8Rng, t_len: usize, k_len: usize, l_len: usize) -> (EmissionLattice, TargetSequence) {
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
    // Adjacent repeats are avoided so K x T stays feasible at small T.
    let mut ids = Vec::with_capacity(k_len);
    let mut prev = 0u32;
    for _ in 0..k_len {
        let mut g = rng.random_range(1..l_len as u32);
        if g == prev {
            g = if g == (l_len as u32 - 1) { 1 } else { g + 1 };
        }
        ids.push(g);
        prev = g;
    }
    (lattice, TargetSequence::new(ids).unwrap())
}

/// Median/p95 of one criterion's loss+gradient at a given size.
pub fn time_criterion(
    lattice: &EmissionLattice,
    y: &TargetSequence,
    entropy: bool,
    reps: usize,
) -> BenchStat {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let tape = Tape::new();
        let (leaf, rows) = emission_leaf_rows(&tape, lattice).unwrap();
        let loss = if entropy {
            let (ctc, h) = ctc_loss_with_entropy(&tape, &rows, y).unwrap();
            ctc.sub(h.scale(0.1)).unwrap()
        } else {
            ctc_loss(&tape, &rows, y).unwrap()
        };
        tape.backward(loss).unwrap();
        let g = leaf.grad().unwrap();
        std::hint::black_box(g);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    stats(times)
}

pub struct BenchOutcome {
    pub report: String,
    pub main_ctc: BenchStat,
    pub main_enctc: BenchStat,
    pub doubling_ratio: f64,
}

/// Run the full benchmark with `reps` timed repetitions per case.
pub fn run_bench(reps: usize, seed: u64) -> BenchOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = String::new();
    let _ = writeln!(report, "bench reps={reps} seed={seed} threads=1");

    // Realistic corpus setting: 62 prediction steps downsampled from ~250
    // frames, 20 target glosses, 311 labels.
    let (main_case, main_y) = random_case(&mut rng, 62, 20, 311);
    let gsl_ctc = time_criterion(&main_case, &main_y, false, reps);
    let gsl_enctc = time_criterion(&main_case, &main_y, true, reps);
    let _ = writeln!(
        report,
        "case name=t62-l311 t=62 k=20 l=311 criterion=ctc median_ms={:.3} p95_ms={:.3}",
        gsl_ctc.median_ms, gsl_ctc.p95_ms
    );
    let _ = writeln!(
        report,
        "case name=t62-l311 t=62 k=20 l=311 criterion=enctc median_ms={:.3} p95_ms={:.3}",
        gsl_enctc.median_ms, gsl_enctc.p95_ms
    );

    // Raw lattice at the frame cap.
    let (raw, raw_y) = random_case(&mut rng, 250, 20, 311);
    let raw_ctc = time_criterion(&raw, &raw_y, false, reps);
    let raw_enctc = time_criterion(&raw, &raw_y, true, reps);
    let _ = writeln!(
        report,
        "case name=t250-l311 t=250 k=20 l=311 criterion=ctc median_ms={:.3} p95_ms={:.3}",
        raw_ctc.median_ms, raw_ctc.p95_ms
    );
    let _ = writeln!(
        report,
        "case name=t250-l311 t=250 k=20 l=311 criterion=enctc median_ms={:.3} p95_ms={:.3}",
        raw_enctc.median_ms, raw_enctc.p95_ms
    );

    // Doubling T at fixed K' should scale about linearly.
    let (double, double_y) = random_case(&mut rng, 124, 20, 311);
    let double_ctc = time_criterion(&double, &double_y, false, reps);
    let doubling_ratio = double_ctc.median_ms / gsl_ctc.median_ms;
    let _ = writeln!(
        report,
        "scaling t=62->124 ctc_median_ratio={doubling_ratio:.3}"
    );
    let _ = writeln!(
        report,
        "summary enctc_over_ctc={:.3} main_ctc_median_ms={:.3}",
        gsl_enctc.median_ms / gsl_ctc.median_ms,
        gsl_ctc.median_ms
    );

    BenchOutcome { report, main_ctc: gsl_ctc, main_enctc: gsl_enctc, doubling_ratio }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_carries_median_and_p95_per_case() {
        let out = run_bench(3, 1);
        assert!(out.report.contains("median_ms="));
        assert!(out.report.contains("p95_ms="));
        assert!(out.report.contains("name=t62-l311"));
        assert!(out.report.contains("name=t250-l311"));
        assert!(out.gsl_ctc.median_ms > 0.0);
    }
}
