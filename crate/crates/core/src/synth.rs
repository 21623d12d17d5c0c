//! Deterministic synthetic continuous-gloss-stream generator: Gaussian
//! prototype vectors per gloss, a bigram sentence grammar with an end state,
//! per-signer-style affine perturbations, linear inter-gloss transitions as
//! a movement-epenthesis stand-in, and gold alignment segments the real
//! corpora never have.
//!
//! All randomness flows from one seeded ChaCha stream, so regeneration from
//! (config, seed) is bit-exact.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decode::AlignmentSegment;
use crate::lattice::{min_admissible_t, TargetSequence, Vocabulary};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(&'static str),
    #[error("sequence too short: {got} frames for {needed} glosses")]
    SequenceTooShort { needed: usize, got: usize },
}

/// Signer-dependent (random 80/10/10) or signer-independent (one style held
/// out for val+test) splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    SignerDependent,
    SignerIndependent,
}

impl SplitMode {
    pub fn name(&self) -> &'static str {
        match self {
            SplitMode::SignerDependent => "sd",
            SplitMode::SignerIndependent => "si",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sd" => Some(SplitMode::SignerDependent),
            "si" => Some(SplitMode::SignerIndependent),
            _ => None,
        }
    }
}

/// Generator configuration; `Default` gives the stock benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub signer_styles: usize,
    pub train_sentences: usize,
    pub val_sentences: usize,
    pub test_sentences: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub gloss_dur_min: usize,
    pub gloss_dur_max: usize,
    pub transition_min: usize,
    pub transition_max: usize,
    pub noise_sigma: f64,
    pub style_strength: f64,
    pub split_mode: SplitMode,
    /// Encoder downsampling factor the durations must respect.
    pub downsample_factor: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab_size: 20,
            feature_dim: 16,
            signer_styles: 7,
            train_sentences: 1000,
            val_sentences: 125,
            test_sentences: 125,
            sentence_len_min: 3,
            sentence_len_max: 8,
            gloss_dur_min: 4,
            gloss_dur_max: 10,
            transition_min: 0,
            transition_max: 3,
            noise_sigma: 0.3,
            style_strength: 0.1,
            split_mode: SplitMode::SignerDependent,
            downsample_factor: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.vocab_size < 2 {
            return Err(SynthError::InvalidConfig("vocab_size must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(SynthError::InvalidConfig("feature_dim must be positive"));
        }
        if self.signer_styles == 0 {
            return Err(SynthError::InvalidConfig("signer_styles must be positive"));
        }
        if self.split_mode == SplitMode::SignerIndependent && self.signer_styles < 2 {
            return Err(SynthError::InvalidConfig("si split needs at least 2 signer styles"));
        }
        if self.sentence_len_min == 0 || self.sentence_len_min > self.sentence_len_max {
            return Err(SynthError::InvalidConfig("bad sentence length range"));
        }
        if self.sentence_len_max >= self.vocab_size {
            return Err(SynthError::InvalidConfig(
                "sentence_len_max must stay below vocab_size (bigram sampling without repeats)",
            ));
        }
        if self.gloss_dur_min < 2 || self.gloss_dur_min > self.gloss_dur_max {
            return Err(SynthError::InvalidConfig("bad gloss duration range"));
        }
        if self.transition_min > self.transition_max {
            return Err(SynthError::InvalidConfig("bad transition range"));
        }
        if self.noise_sigma < 0.0 || self.style_strength < 0.0 {
            return Err(SynthError::InvalidConfig("noise and style strength must be >= 0"));
        }
        if self.downsample_factor == 0 {
            return Err(SynthError::InvalidConfig("downsample_factor must be positive"));
        }
        if self.gloss_dur_min < self.downsample_factor {
            return Err(SynthError::InvalidConfig(
                "gloss_dur_min must cover the encoder downsampling factor",
            ));
        }
        Ok(())
    }
}

/// A gloss's canonical appearance and admissible duration range.
#[derive(Debug, Clone)]
pub struct GlossPrototype {
    pub gloss: u32,
    pub vector: Vec<f64>,
    pub dur_min: usize,
    pub dur_max: usize,
}

/// Start distribution and bigram successor matrix (last column is the end
/// state). Self-transitions are excluded so the segment gloss order always
/// collapses to the target itself.
#[derive(Debug, Clone)]
pub struct GrammarModel {
    pub start: Vec<f64>,
    /// vocab_size x (vocab_size + 1); column `vocab_size` is the end state.
    pub transitions: Mat,
}

impl GrammarModel {
    fn random(vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut start: Vec<f64> = (0..vocab_size).map(|_| 0.5 + rng.random::<f64>()).collect();
        let z: f64 = start.iter().sum();
        for w in start.iter_mut() {
            *w /= z;
        }

        let mut transitions = Mat::zeros(vocab_size, vocab_size + 1);
        for g in 0..vocab_size {
            // A few preferred successors make the bigram structure learnable.
            let mut preferred: Vec<usize> = Vec::new();
            while preferred.len() < 3.min(vocab_size - 1) {
                let cand = rng.random_range(0..vocab_size);
                if cand != g && !preferred.contains(&cand) {
                    preferred.push(cand);
                }
            }
            let others = vocab_size - 1 - preferred.len();
            let pref_w = 0.6 / preferred.len() as f64;
            let other_w = if others > 0 { 0.2 / others as f64 } else { 0.0 };
            let mut row = vec![0.0; vocab_size + 1];
            for succ in 0..vocab_size {
                if succ == g {
                    continue;
                }
                row[succ] = if preferred.contains(&succ) { pref_w } else { other_w };
            }
            row[vocab_size] = 0.2;
            let z: f64 = row.iter().sum();
            for (c, w) in row.iter().enumerate() {
                transitions.set(g, c, w / z);
            }
        }
        GrammarModel { start, transitions }
    }

    fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let mut u = rng.random::<f64>();
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }

    /// Sample a gloss-id sentence (ids are 1-based label ids) within the
    /// configured length bounds, by rejection.
    fn sample_sentence(&self, len_min: usize, len_max: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        loop {
            let mut glosses: Vec<u32> =
                vec![Self::sample_index(&self.start, rng) as u32 + 1];
            loop {
                let current = (glosses[glosses.len() - 1] - 1) as usize;
                let next = Self::sample_index(self.transitions.row(current), rng);
                if next == self.start.len() || glosses.len() == len_max {
                    break;
                }
                glosses.push(next as u32 + 1);
            }
            if glosses.len() >= len_min {
                return glosses;
            }
        }
    }
}

/// One synthetic continuous sentence with its gold alignment.
#[derive(Debug, Clone)]
pub struct SentenceSample {
    pub id: String,
    pub signer_style: usize,
    pub glosses: TargetSequence,
    /// Gold segments over frame indices (0-based, inclusive); they tile the
    /// non-transition frames and their gloss order equals the target.
    pub gold_segments: Vec<AlignmentSegment>,
    /// N x d input frames.
    pub frames: Mat,
}

/// A segment cut out of a sentence for isolated-classification pretraining.
#[derive(Debug, Clone)]
pub struct IsolatedInstance {
    pub source_id: String,
    pub signer_style: usize,
    pub gloss: u32,
    pub frames: Mat,
}

/// In-memory dataset; the on-disk formats live in the companion crate.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub prototypes: Vec<GlossPrototype>,
    pub grammar: GrammarModel,
    pub train: Vec<SentenceSample>,
    pub val: Vec<SentenceSample>,
    pub test: Vec<SentenceSample>,
    pub config: GenConfig,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[SentenceSample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

struct SignerStyle {
    /// d x d mixing matrix (identity plus scaled noise).
    matrix: Mat,
    offset: Vec<f64>,
}

impl SignerStyle {
    fn random(dim: usize, strength: f64, rng: &mut ChaCha8Rng) -> Self {
        let scale = strength / crate::math::sqrt(dim as f64);
        let mut matrix = Mat::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                let noise: f64 = StandardNormal.sample(rng);
                let base = if r == c { 1.0 } else { 0.0 };
                matrix.set(r, c, base + scale * noise);
            }
        }
        let offset = (0..dim)
            .map(|_| {
                let noise: f64 = StandardNormal.sample(rng);
                strength * 0.5 * noise
            })
            .collect();
        SignerStyle { matrix, offset }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let mut out = Vec::with_capacity(d);
        for r in 0..d {
            let mut acc = self.offset[r];
            for c in 0..d {
                acc += self.matrix.at(r, c) * v[c];
            }
            out.push(acc);
        }
        out
    }
}

fn gloss_name(i: usize) -> String {
    format!("G{i:02}")
}

/// Generate train/val/test splits from (config, seed).
pub fn gen_dataset(config: &GenConfig, seed: u64) -> Result<Dataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let vocabulary = Vocabulary::new((0..config.vocab_size).map(gloss_name))
        .expect("generated names are valid");
    let prototypes: Vec<GlossPrototype> = (0..config.vocab_size)
        .map(|i| GlossPrototype {
            gloss: i as u32 + 1,
            vector: (0..config.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
            dur_min: config.gloss_dur_min,
            dur_max: config.gloss_dur_max,
        })
        .collect();
    let grammar = GrammarModel::random(config.vocab_size, &mut rng);
    let styles: Vec<SignerStyle> = (0..config.signer_styles)
        .map(|_| SignerStyle::random(config.feature_dim, config.style_strength, &mut rng))
        .collect();

    let holdout_style = config.signer_styles - 1;
    let style_for = |split: &str, rng: &mut ChaCha8Rng| -> usize {
        match config.split_mode {
            SplitMode::SignerDependent => rng.random_range(0..config.signer_styles),
            SplitMode::SignerIndependent => {
                if split == "train" {
                    rng.random_range(0..config.signer_styles - 1)
                } else {
                    holdout_style
                }
            }
        }
    };

    let make_split = |name: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<SentenceSample> {
        (0..count)
            .map(|i| {
                let style_id = style_for(name, rng);
                let gloss_ids = grammar.sample_sentence(
                    config.sentence_len_min,
                    config.sentence_len_max,
                    rng,
                );
                let sample = synthesize_sentence(
                    config,
                    &prototypes,
                    &styles[style_id],
                    &gloss_ids,
                    rng,
                );
                SentenceSample {
                    id: format!("{name}-{i:05}"),
                    signer_style: style_id,
                    glosses: TargetSequence::new(gloss_ids).expect("grammar emits glosses"),
                    gold_segments: sample.1,
                    frames: sample.0,
                }
            })
            .collect()
    };

    let train = make_split("train", config.train_sentences, &mut rng);
    let val = make_split("val", config.val_sentences, &mut rng);
    let test = make_split("test", config.test_sentences, &mut rng);

    Ok(Dataset {
        vocabulary,
        prototypes,
        grammar,
        train,
        val,
        test,
        config: config.clone(),
        seed,
    })
}

fn synthesize_sentence(
    config: &GenConfig,
    prototypes: &[GlossPrototype],
    style: &SignerStyle,
    gloss_ids: &[u32],
    rng: &mut ChaCha8Rng,
) -> (Mat, Vec<AlignmentSegment>) {
    let k = gloss_ids.len();
    let durations: Vec<usize> = (0..k)
        .map(|_| rng.random_range(config.gloss_dur_min..=config.gloss_dur_max))
        .collect();
    let transitions: Vec<usize> = (0..k.saturating_sub(1))
        .map(|_| rng.random_range(config.transition_min..=config.transition_max))
        .collect();

    let styled: Vec<Vec<f64>> = gloss_ids
        .iter()
        .map(|&g| style.apply(&prototypes[(g - 1) as usize].vector))
        .collect();

    let n: usize = durations.iter().sum::<usize>() + transitions.iter().sum::<usize>();
    let d = config.feature_dim;
    let mut frames = Mat::zeros(n, d);
    let mut segments = Vec::with_capacity(k);
    let mut t = 0usize;
    for (idx, &dur) in durations.iter().enumerate() {
        let start = t;
        for _ in 0..dur {
            for c in 0..d {
                let noise: f64 = StandardNormal.sample(rng);
                frames.set(t, c, styled[idx][c] + config.noise_sigma * noise);
            }
            t += 1;
        }
        segments.push(AlignmentSegment { start, end: t - 1, gloss: gloss_ids[idx] });
        if idx + 1 < k {
            let gap = transitions[idx];
            for j in 0..gap {
                let w = (j + 1) as f64 / (gap + 1) as f64;
                for c in 0..d {
                    let noise: f64 = StandardNormal.sample(rng);
                    let blended = (1.0 - w) * styled[idx][c] + w * styled[idx + 1][c];
                    frames.set(t, c, blended + config.noise_sigma * noise);
                }
                t += 1;
            }
        }
    }
    debug_assert_eq!(t, n);
    (frames, segments)
}

/// Cut every gold segment into an isolated-classification instance;
/// transition frames never appear.
pub fn extract_isolated(samples: &[SentenceSample]) -> Vec<IsolatedInstance> {
    let mut out = Vec::new();
    for sample in samples {
        for seg in &sample.gold_segments {
            let rows: Vec<Vec<f64>> =
                (seg.start..=seg.end).map(|t| sample.frames.row(t).to_vec()).collect();
            out.push(IsolatedInstance {
                source_id: sample.id.clone(),
                signer_style: sample.signer_style,
                gloss: seg.gloss,
                frames: Mat::from_rows(&rows),
            });
        }
    }
    out
}

/// Partition the frames into K contiguous equal blocks (the remainder goes
/// to the first N mod K blocks), block k labeled with gloss k.
pub fn uniform_pseudoalign(
    glosses: &TargetSequence,
    n_frames: usize,
) -> Result<Vec<AlignmentSegment>, SynthError> {
    let k = glosses.len();
    if n_frames < k {
        return Err(SynthError::SequenceTooShort { needed: k, got: n_frames });
    }
    let base = n_frames / k;
    let rem = n_frames % k;
    let mut segments = Vec::with_capacity(k);
    let mut t = 0;
    for (i, &g) in glosses.ids().iter().enumerate() {
        let len = base + usize::from(i < rem);
        segments.push(AlignmentSegment { start: t, end: t + len - 1, gloss: g });
        t += len;
    }
    Ok(segments)
}

/// Frame-count guarantee used by the trainer: every sample must produce
/// enough prediction steps for its target.
pub fn steps_are_admissible(sample: &SentenceSample, downsample_factor: usize) -> bool {
    let steps = sample.frames.rows() / downsample_factor;
    steps >= min_admissible_t(&sample.glosses)
}
