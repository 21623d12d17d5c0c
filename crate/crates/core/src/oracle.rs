//! Brute-force enumeration ground truth for every lattice quantity.
//!
//! Everything here walks all L^T paths, so it is strictly for tests and the
//! `oracle` CLI command; the budget guard keeps accidental large calls from
//! running forever. Sums are accumulated in linear domain, deliberately a
//! different arithmetic route than the log-domain DP it validates.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::lattice::{collapse, extend_targets, EmissionLattice, Path, TargetSequence};
use crate::mat::Mat;
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("enumeration budget exceeded: ~{paths:.3e} paths > {budget} allowed")]
    BudgetExceeded { paths: f64, budget: u64 },
    #[error("no valid path carries probability mass")]
    ZeroProbability,
}

/// Cap on the number of enumerated paths (L^T).
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    pub max_paths: u64,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_paths: 10_000_000 }
    }
}

fn path_count(l_len: usize, t_len: usize) -> f64 {
    let mut n = 1.0f64;
    for _ in 0..t_len {
        n *= l_len as f64;
        if n > 1e18 {
            return n;
        }
    }
    n
}

fn check_budget(l_len: usize, t_len: usize, budget: EnumerationBudget) -> Result<(), OracleError> {
    let paths = path_count(l_len, t_len);
    if paths > budget.max_paths as f64 {
        return Err(OracleError::BudgetExceeded { paths, budget: budget.max_paths });
    }
    Ok(())
}

/// Visit every path in V^t in lexicographic order.
fn for_each_path<F: FnMut(&[u32])>(l_len: usize, t_len: usize, mut f: F) {
    let mut path = vec![0u32; t_len];
    loop {
        f(&path);
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            path[pos] += 1;
            if (path[pos] as usize) < l_len {
                break;
            }
            path[pos] = 0;
        }
    }
}

fn path_prob(probs: &Mat, path: &[u32]) -> f64 {
    let mut p = 1.0;
    for (t, &v) in path.iter().enumerate() {
        p *= probs.at(t, v as usize);
    }
    p
}

/// p(labels|X) as the exact sum over all paths whose collapse equals
/// `labels`. The empty labeling is admitted (all-blank paths).
pub fn prob_by_enumeration(
    lattice: &EmissionLattice,
    labels: &[u32],
    budget: EnumerationBudget,
) -> Result<f64, OracleError> {
    check_budget(lattice.labels(), lattice.steps(), budget)?;
    let probs = lattice.probs();
    let mut total = 0.0;
    for_each_path(lattice.labels(), lattice.steps(), |path| {
        if collapse(path) == labels {
            total += path_prob(&probs, path);
        }
    });
    Ok(total)
}

/// Shannon entropy of the exact path posterior p(pi | y, X).
pub fn entropy_by_enumeration(
    lattice: &EmissionLattice,
    labels: &[u32],
    budget: EnumerationBudget,
) -> Result<f64, OracleError> {
    check_budget(lattice.labels(), lattice.steps(), budget)?;
    let probs = lattice.probs();
    let mut mass = Vec::new();
    for_each_path(lattice.labels(), lattice.steps(), |path| {
        if collapse(path) == labels {
            mass.push(path_prob(&probs, path));
        }
    });
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(OracleError::ZeroProbability);
    }
    let mut h = 0.0;
    for p in mass {
        if p > 0.0 {
            let q = p / total;
            h -= q * math::ln(q);
        }
    }
    Ok(f64::max(h, 0.0))
}

/// Number of paths collapsing to `labels` (feasibility probe).
pub fn count_valid_paths(
    lattice_labels: usize,
    t_len: usize,
    labels: &[u32],
    budget: EnumerationBudget,
) -> Result<u64, OracleError> {
    check_budget(lattice_labels, t_len, budget)?;
    let mut n = 0u64;
    for_each_path(lattice_labels, t_len, |path| {
        if collapse(path) == labels {
            n += 1;
        }
    });
    Ok(n)
}

/// Definitional forward/backward probabilities: alpha_t(s) sums prefix paths
/// of length t+1 whose collapse matches the collapse of y'_{0..=s} and whose
/// last symbol is y'_s; beta mirrors it over suffixes. This is the reading of
/// the prefix/suffix sums under which the any-t slice identity holds.
pub fn alpha_beta_by_definition(
    lattice: &EmissionLattice,
    y: &TargetSequence,
    budget: EnumerationBudget,
) -> Result<(Mat, Mat), OracleError> {
    let ext = extend_targets(y);
    let (t_len, s_len) = (lattice.steps(), ext.len());
    // One enumeration pass per prefix length.
    let per_t: f64 = (1..=t_len).map(|t| path_count(lattice.labels(), t)).sum();
    if per_t > budget.max_paths as f64 {
        return Err(OracleError::BudgetExceeded { paths: per_t, budget: budget.max_paths });
    }
    let probs = lattice.probs();

    let prefix_collapse: Vec<Vec<u32>> =
        (0..s_len).map(|s| collapse(&ext.ids()[0..=s])).collect();
    let suffix_collapse: Vec<Vec<u32>> =
        (0..s_len).map(|s| collapse(&ext.ids()[s..])).collect();

    let mut alpha = Mat::zeros(t_len, s_len);
    for t in 0..t_len {
        for_each_path(lattice.labels(), t + 1, |path| {
            let c = collapse(path);
            let last = path[t];
            for s in 0..s_len {
                if ext.ids()[s] == last && prefix_collapse[s] == c {
                    let mut p = 1.0;
                    for (step, &v) in path.iter().enumerate() {
                        p *= probs.at(step, v as usize);
                    }
                    alpha.set(t, s, alpha.at(t, s) + p);
                }
            }
        });
    }

    let mut beta = Mat::zeros(t_len, s_len);
    for t in 0..t_len {
        let suffix_len = t_len - t;
        for_each_path(lattice.labels(), suffix_len, |path| {
            let c = collapse(path);
            let first = path[0];
            for s in 0..s_len {
                if ext.ids()[s] == first && suffix_collapse[s] == c {
                    let mut p = 1.0;
                    for (step, &v) in path.iter().enumerate() {
                        p *= probs.at(t + step, v as usize);
                    }
                    beta.set(t, s, beta.at(t, s) + p);
                }
            }
        });
    }
    Ok((alpha, beta))
}

/// Stimuli weights straight from the definition: gamma_t = (alpha' ⊙ beta') /
/// (alpha' · beta') over the definitional non-blank lattice slices.
pub fn gamma_by_definition(
    lattice: &EmissionLattice,
    y: &TargetSequence,
    budget: EnumerationBudget,
) -> Result<Mat, OracleError> {
    let (alpha, beta) = alpha_beta_by_definition(lattice, y, budget)?;
    let (t_len, k_len) = (lattice.steps(), y.len());
    let mut gamma = Mat::zeros(t_len, k_len);
    for t in 0..t_len {
        let mut dot = 0.0;
        for k in 0..k_len {
            dot += alpha.at(t, 2 * k + 1) * beta.at(t, 2 * k + 1);
        }
        if !(dot > 0.0) {
            return Err(OracleError::ZeroProbability);
        }
        for k in 0..k_len {
            gamma.set(t, k, alpha.at(t, 2 * k + 1) * beta.at(t, 2 * k + 1) / dot);
        }
    }
    Ok(gamma)
}

/// Exact probability of every labeling, keyed by label sequence.
pub fn labeling_distribution(
    lattice: &EmissionLattice,
    budget: EnumerationBudget,
) -> Result<BTreeMap<Vec<u32>, f64>, OracleError> {
    check_budget(lattice.labels(), lattice.steps(), budget)?;
    let probs = lattice.probs();
    let mut dist: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for_each_path(lattice.labels(), lattice.steps(), |path| {
        let p = path_prob(&probs, path);
        *dist.entry(collapse(path)).or_insert(0.0) += p;
    });
    Ok(dist)
}

/// The labeling maximizing p(y|X) over all collapses; ties resolve to the
/// lexicographically smallest label sequence.
pub fn best_labeling_by_enumeration(
    lattice: &EmissionLattice,
    budget: EnumerationBudget,
) -> Result<(Vec<u32>, f64), OracleError> {
    let dist = labeling_distribution(lattice, budget)?;
    let mut best: Option<(&Vec<u32>, f64)> = None;
    for (labels, &p) in dist.iter() {
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((labels, p)),
        }
    }
    let (labels, p) = best.ok_or(OracleError::ZeroProbability)?;
    Ok((labels.clone(), p))
}

/// Highest-probability single path constrained to collapse to `y`.
pub fn constrained_best_path(
    lattice: &EmissionLattice,
    y: &TargetSequence,
    budget: EnumerationBudget,
) -> Result<(Path, f64), OracleError> {
    check_budget(lattice.labels(), lattice.steps(), budget)?;
    let probs = lattice.probs();
    let mut best: Option<(Path, f64)> = None;
    for_each_path(lattice.labels(), lattice.steps(), |path| {
        if collapse(path) == y.ids() {
            let p = path_prob(&probs, path);
            if best.as_ref().map_or(true, |(_, bp)| p > *bp) {
                best = Some((path.to_vec(), p));
            }
        }
    });
    best.ok_or(OracleError::ZeroProbability)
}
