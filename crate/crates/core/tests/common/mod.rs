//! Shared helpers for the integration suites: seeded random lattices and
//! targets in the small regimes where enumeration is exact.

use ctclab_core::lattice::{min_admissible_t, EmissionLattice, TargetSequence};
use ctclab_core::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random emission lattice with strictly positive, normalized rows.
pub fn random_lattice(rng: &mut ChaCha8Rng, t_len: usize, l_len: usize) -> EmissionLattice {
    let mut m = Mat::zeros(t_len, l_len);
    for t in 0..t_len {
        let mut row: Vec<f64> = (0..l_len).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= z;
        }
        for (v, &p) in row.iter().enumerate() {
            m.set(t, v, p);
        }
    }
    EmissionLattice::from_probs(&m).unwrap()
}

/// Random target with ids in 1..l_len, length within [1, k_max]; repeats
/// allowed. Returned targets always fit within `t_len` prediction steps.
pub fn random_target(
    rng: &mut ChaCha8Rng,
    l_len: usize,
    k_max: usize,
    t_len: usize,
) -> TargetSequence {
    loop {
        let k = rng.random_range(1..=k_max);
        let ids: Vec<u32> = (0..k).map(|_| rng.random_range(1..l_len as u32)).collect();
        let y = TargetSequence::new(ids).unwrap();
        if min_admissible_t(&y) <= t_len {
            return y;
        }
    }
}

/// A random (lattice, target) pair in the enumerable regime.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    t_max: usize,
    l_max: usize,
    k_max: usize,
) -> (EmissionLattice, TargetSequence) {
    let t_len = rng.random_range(1..=t_max);
    let l_len = rng.random_range(2..=l_max);
    let k_cap = k_max.min(t_len);
    let lattice = random_lattice(rng, t_len, l_len);
    let y = random_target(rng, l_len, k_cap, t_len);
    (lattice, y)
}
