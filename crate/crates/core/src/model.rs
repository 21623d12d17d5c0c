//! Toy trainable networks in the shape the criteria are studied on: a
//! windowed temporal-convolution encoder with a bidirectional gated
//! recurrent layer emitting per-step hidden states and label log-probs, an
//! isolated-classification head sharing the same trunk, and a unidirectional
//! recurrent language model whose hidden states provide the stimuli targets.
//!
//! Two convolution layers (same-padded) with two stride-2 max pools give a
//! fixed temporal downsampling of 4: a sentence of N frames produces
//! T = floor(N/4) prediction steps, step t covering frames [4t, 4t+3].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{PrefixScorer, StepFrameMap};
use crate::lattice::TargetSequence;
use crate::mat::Mat;
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("input too short: {got} frames, {needed} needed")]
    InputTooShort { needed: usize, got: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("model configuration mismatch: {0}")]
    ConfigMismatch(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// End-of-sentence token slot in the language-model output distribution.
pub const EOS_SLOT: usize = 0;
/// Start-of-sentence row in the language-model embedding table.
pub const START_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix(usize, usize),
    Vector(usize),
}

impl ParamKind {
    pub fn len(&self) -> usize {
        match *self {
            ParamKind::Matrix(r, c) => r * c,
            ParamKind::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named, insertion-ordered parameter arrays; the unit the optimizer and
/// checkpoints operate on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, values: Vec<f64>) -> usize {
        assert_eq!(kind.len(), values.len(), "parameter size mismatch for {name}");
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(String::from(name));
        self.kinds.push(kind);
        self.values.push(values);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn kind(&self, idx: usize) -> ParamKind {
        self.kinds[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn values(&self, idx: usize) -> &[f64] {
        &self.values[idx]
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.values[idx]
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.kinds.iter().map(ParamKind::len).collect()
    }

    pub fn total_len(&self) -> usize {
        self.kinds.iter().map(ParamKind::len).sum()
    }
}

/// One tape leaf per parameter; gradients are read back through this after
/// `Tape::backward`.
pub struct TapeParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> TapeParams<'t> {
    pub fn var(&self, idx: usize) -> Var<'t> {
        self.vars[idx]
    }

    /// Per-parameter gradients, indexed like the store.
    pub fn grads(&self) -> Result<Vec<Vec<f64>>, TapeError> {
        self.vars.iter().map(Var::grad).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Input feature dimension d.
    pub input_dim: usize,
    /// Channels of both temporal convolution layers.
    pub conv_channels: usize,
    /// Odd temporal kernel width.
    pub kernel: usize,
    /// Recurrent hidden size per direction.
    pub rnn_hidden: usize,
    /// Projected hidden size d_h, shared with the language model.
    pub proj_dim: usize,
    /// Output classes L including blank.
    pub labels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 16,
            conv_channels: 24,
            kernel: 5,
            rnn_hidden: 16,
            proj_dim: 16,
            labels: 21,
        }
    }
}

impl EncoderConfig {
    /// Fixed temporal downsampling of the conv/pool stack.
    pub fn downsample_factor(&self) -> usize {
        4
    }

    /// Prediction steps for an N-frame input.
    pub fn steps_for(&self, frames: usize) -> usize {
        (frames / 2) / 2
    }

    pub fn min_frames(&self) -> usize {
        4
    }

    pub fn frame_map(&self, frames: usize) -> StepFrameMap {
        StepFrameMap { stride: 4, span: 4, frames }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnLmConfig {
    /// Gloss vocabulary size (no blank).
    pub glosses: usize,
    pub embed_dim: usize,
    /// Hidden size; must equal the encoder's proj_dim.
    pub hidden: usize,
}

impl Default for RnnLmConfig {
    fn default() -> Self {
        RnnLmConfig { glosses: 20, embed_dim: 12, hidden: 16 }
    }
}

impl RnnLmConfig {
    /// Output classes: every gloss plus the end-of-sentence token.
    pub fn output_classes(&self) -> usize {
        self.glosses + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct GruIds {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wh: usize,
    uh: usize,
    bh: usize,
}

#[derive(Clone, Copy)]
struct GruVars<'t> {
    wz: Var<'t>,
    uz: Var<'t>,
    bz: Var<'t>,
    wr: Var<'t>,
    ur: Var<'t>,
    br: Var<'t>,
    wh: Var<'t>,
    uh: Var<'t>,
    bh: Var<'t>,
    ones: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
struct ParamIds {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    gru_fwd: GruIds,
    gru_bwd: GruIds,
    proj_w: usize,
    proj_b: usize,
    cls_w: usize,
    cls_b: usize,
    iso_w: usize,
    iso_b: usize,
    lm_embed: usize,
    lm_gru: GruIds,
    lm_out_w: usize,
    lm_out_b: usize,
}

/// Encoder + isolated head + language model over one shared parameter store.
pub struct Model {
    pub encoder: EncoderConfig,
    pub lm: RnnLmConfig,
    pub params: ParamStore,
    ids: ParamIds,
}

pub struct EncoderOutput<'t> {
    /// Projected per-step hidden states h_t (length T, each proj_dim).
    pub hidden: Vec<Var<'t>>,
    /// Per-step label log-probabilities (length T, each L).
    pub emissions: Vec<Var<'t>>,
}

pub struct LmOutput<'t> {
    /// States after consuming each gloss (length K, each hidden dim).
    pub states: Vec<Var<'t>>,
    /// Next-token log-probability rows (length K, each glosses + 1).
    pub log_probs: Vec<Var<'t>>,
    /// Teacher-forced targets for each row (slot 0 is end-of-sentence).
    pub targets: Vec<usize>,
}

fn uniform_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / crate::math::sqrt(fan_in as f64);
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

fn add_gru(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> GruIds {
    let mat = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, r: usize, c: usize| {
        let vals = uniform_init(rng, r * c, c);
        store.add(&alloc::format!("{prefix}.{name}"), ParamKind::Matrix(r, c), vals)
    };
    let wz = mat(store, rng, "wz", hidden, input);
    let uz = mat(store, rng, "uz", hidden, hidden);
    let bz = store.add(&alloc::format!("{prefix}.bz"), ParamKind::Vector(hidden), vec![0.0; hidden]);
    let wr = mat(store, rng, "wr", hidden, input);
    let ur = mat(store, rng, "ur", hidden, hidden);
    let br = store.add(&alloc::format!("{prefix}.br"), ParamKind::Vector(hidden), vec![0.0; hidden]);
    let wh = mat(store, rng, "wh", hidden, input);
    let uh = mat(store, rng, "uh", hidden, hidden);
    let bh = store.add(&alloc::format!("{prefix}.bh"), ParamKind::Vector(hidden), vec![0.0; hidden]);
    GruIds { wz, uz, bz, wr, ur, br, wh, uh, bh }
}

impl Model {
    /// Fresh model with uniform fan-in initialization from `seed`.
    pub fn new(encoder: EncoderConfig, lm: RnnLmConfig, seed: u64) -> Result<Self, ModelError> {
        if encoder.proj_dim != lm.hidden {
            return Err(ModelError::ConfigMismatch(
                "encoder proj_dim must equal language-model hidden size",
            ));
        }
        if encoder.kernel % 2 == 0 || encoder.kernel == 0 {
            return Err(ModelError::ConfigMismatch("conv kernel must be odd"));
        }
        if encoder.labels != lm.glosses + 1 {
            return Err(ModelError::ConfigMismatch(
                "encoder label count must be gloss count plus blank",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = encoder.conv_channels;
        let k = encoder.kernel;
        let d = encoder.input_dim;
        let h = encoder.rnn_hidden;
        let p = encoder.proj_dim;
        let l = encoder.labels;

        let conv1_w = store.add("enc.conv1.w", ParamKind::Matrix(c, k * d), uniform_init(&mut rng, c * k * d, k * d));
        let conv1_b = store.add("enc.conv1.b", ParamKind::Vector(c), vec![0.0; c]);
        let conv2_w = store.add("enc.conv2.w", ParamKind::Matrix(c, k * c), uniform_init(&mut rng, c * k * c, k * c));
        let conv2_b = store.add("enc.conv2.b", ParamKind::Vector(c), vec![0.0; c]);
        let gru_fwd = add_gru(&mut store, &mut rng, "enc.gru_fwd", c, h);
        let gru_bwd = add_gru(&mut store, &mut rng, "enc.gru_bwd", c, h);
        let proj_w = store.add("enc.proj.w", ParamKind::Matrix(p, 2 * h), uniform_init(&mut rng, p * 2 * h, 2 * h));
        let proj_b = store.add("enc.proj.b", ParamKind::Vector(p), vec![0.0; p]);
        let cls_w = store.add("enc.cls.w", ParamKind::Matrix(l, p), uniform_init(&mut rng, l * p, p));
        let cls_b = store.add("enc.cls.b", ParamKind::Vector(l), vec![0.0; l]);
        let iso_w = store.add("enc.iso.w", ParamKind::Matrix(lm.glosses, c), uniform_init(&mut rng, lm.glosses * c, c));
        let iso_b = store.add("enc.iso.b", ParamKind::Vector(lm.glosses), vec![0.0; lm.glosses]);

        let e = lm.embed_dim;
        let rows = lm.glosses + 1;
        let lm_embed = store.add("lm.embed", ParamKind::Matrix(rows, e), uniform_init(&mut rng, rows * e, e));
        let lm_gru = add_gru(&mut store, &mut rng, "lm.gru", e, lm.hidden);
        let lm_out_w = store.add(
            "lm.out.w",
            ParamKind::Matrix(lm.output_classes(), lm.hidden),
            uniform_init(&mut rng, lm.output_classes() * lm.hidden, lm.hidden),
        );
        let lm_out_b =
            store.add("lm.out.b", ParamKind::Vector(lm.output_classes()), vec![0.0; lm.output_classes()]);

        Ok(Model {
            encoder,
            lm,
            params: store,
            ids: ParamIds {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                gru_fwd,
                gru_bwd,
                proj_w,
                proj_b,
                cls_w,
                cls_b,
                iso_w,
                iso_b,
                lm_embed,
                lm_gru,
                lm_out_w,
                lm_out_b,
            },
        })
    }

    /// Record every parameter as a tape leaf.
    pub fn tape_params<'t>(&self, tape: &'t Tape) -> TapeParams<'t> {
        let vars = (0..self.params.len())
            .map(|i| match self.params.kind(i) {
                ParamKind::Matrix(r, c) => tape.matrix(r, c, self.params.values(i)),
                ParamKind::Vector(_) => tape.vector(self.params.values(i)),
            })
            .collect();
        TapeParams { vars }
    }

    fn gru_vars<'t>(&self, p: &TapeParams<'t>, ids: GruIds, tape: &'t Tape, hidden: usize) -> GruVars<'t> {
        GruVars {
            wz: p.var(ids.wz),
            uz: p.var(ids.uz),
            bz: p.var(ids.bz),
            wr: p.var(ids.wr),
            ur: p.var(ids.ur),
            br: p.var(ids.br),
            wh: p.var(ids.wh),
            uh: p.var(ids.uh),
            bh: p.var(ids.bh),
            ones: tape.vector(&vec![1.0; hidden]),
        }
    }

    /// Intra-gloss feature stage: two same-padded temporal convolutions,
    /// each followed by a stride-2 max pool. One output vector per
    /// prediction step.
    fn conv_trunk<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        frames: &Mat,
    ) -> Result<Vec<Var<'t>>, ModelError> {
        let cfg = &self.encoder;
        if frames.cols() != cfg.input_dim {
            return Err(ModelError::ConfigMismatch("frame dimension != encoder input_dim"));
        }
        let n = frames.rows();
        if cfg.steps_for(n) == 0 {
            return Err(ModelError::InputTooShort { needed: cfg.min_frames(), got: n });
        }

        let inputs: Vec<Var<'t>> = (0..n).map(|t| tape.vector(frames.row(t))).collect();
        let c1 = conv_tanh(tape, &inputs, p.var(self.ids.conv1_w), p.var(self.ids.conv1_b), cfg.kernel, cfg.input_dim)?;
        let p1 = pool_pairs(&c1)?;
        let c2 = conv_tanh(tape, &p1, p.var(self.ids.conv2_w), p.var(self.ids.conv2_b), cfg.kernel, cfg.conv_channels)?;
        pool_pairs(&c2)
    }

    /// Full encoder trunk: intra-gloss convs, bidirectional recurrence over
    /// the pooled steps, and the projection to the shared hidden width.
    fn trunk<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        frames: &Mat,
    ) -> Result<Vec<Var<'t>>, ModelError> {
        let cfg = &self.encoder;
        let p2 = self.conv_trunk(tape, p, frames)?;

        let fwd_vars = self.gru_vars(p, self.ids.gru_fwd, tape, cfg.rnn_hidden);
        let bwd_vars = self.gru_vars(p, self.ids.gru_bwd, tape, cfg.rnn_hidden);
        let zero_h = tape.vector(&vec![0.0; cfg.rnn_hidden]);

        let mut fwd_states = Vec::with_capacity(p2.len());
        let mut h = zero_h;
        for x in &p2 {
            h = gru_step(&fwd_vars, *x, h)?;
            fwd_states.push(h);
        }
        let mut bwd_states = vec![zero_h; p2.len()];
        let mut h = zero_h;
        for (i, x) in p2.iter().enumerate().rev() {
            h = gru_step(&bwd_vars, *x, h)?;
            bwd_states[i] = h;
        }

        let proj_w = p.var(self.ids.proj_w);
        let proj_b = p.var(self.ids.proj_b);
        let mut hidden = Vec::with_capacity(p2.len());
        for t in 0..p2.len() {
            let both = tape.concat(&[fwd_states[t], bwd_states[t]])?;
            hidden.push(proj_w.matvec(both)?.add(proj_b)?.tanh());
        }
        Ok(hidden)
    }

    /// Continuous forward pass: hidden states plus per-step log-probs.
    pub fn encoder_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        frames: &Mat,
    ) -> Result<EncoderOutput<'t>, ModelError> {
        let hidden = self.trunk(tape, p, frames)?;
        let cls_w = p.var(self.ids.cls_w);
        let cls_b = p.var(self.ids.cls_b);
        let mut emissions = Vec::with_capacity(hidden.len());
        for h in &hidden {
            emissions.push(cls_w.matvec(*h)?.add(cls_b)?.log_softmax()?);
        }
        Ok(EncoderOutput { hidden, emissions })
    }

    /// Isolated-classification head: the shared intra-gloss conv trunk,
    /// temporal mean pooling, then a gloss classifier (no blank). The
    /// recurrent inter-gloss stage stays out of the isolated pathway, the
    /// way single-gloss pretraining leaves sequence modeling untouched.
    pub fn isolated_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        frames: &Mat,
    ) -> Result<Var<'t>, ModelError> {
        let pooled_seq = self.conv_trunk(tape, p, frames)?;
        let mut acc = pooled_seq[0];
        for h in &pooled_seq[1..] {
            acc = acc.add(*h)?;
        }
        let pooled = acc.scale(1.0 / pooled_seq.len() as f64);
        let logits = p.var(self.ids.iso_w).matvec(pooled)?.add(p.var(self.ids.iso_b))?;
        Ok(logits.log_softmax()?)
    }

    /// States after consuming an arbitrary token stream (start token plus
    /// gloss ids); exposed for prefix scoring.
    fn lm_run<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        glosses: &[u32],
    ) -> Result<(Var<'t>, Vec<Var<'t>>), ModelError> {
        let embed = p.var(self.ids.lm_embed);
        let gru = self.gru_vars(p, self.ids.lm_gru, tape, self.lm.hidden);
        let mut h = tape.vector(&vec![0.0; self.lm.hidden]);
        // Consume the start token first; its state is not exposed.
        h = gru_step(&gru, embed.row(START_TOKEN as usize)?, h)?;
        let mut states = Vec::with_capacity(glosses.len());
        for &g in glosses {
            if g == 0 || g as usize > self.lm.glosses {
                return Err(ModelError::ConfigMismatch("gloss id outside LM vocabulary"));
            }
            h = gru_step(&gru, embed.row(g as usize)?, h)?;
            states.push(h);
        }
        Ok((h, states))
    }

    /// Teacher-forced language-model pass over a full target sequence:
    /// state h_k after each gloss, and a prediction row for the token that
    /// follows it (the end token after the last gloss).
    pub fn rnnlm_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        y: &TargetSequence,
    ) -> Result<LmOutput<'t>, ModelError> {
        self.rnnlm_forward_tokens(tape, p, y.ids())
    }

    /// As [`Model::rnnlm_forward`] over raw gloss ids.
    pub fn rnnlm_forward_tokens<'t>(
        &self,
        tape: &'t Tape,
        p: &TapeParams<'t>,
        glosses: &[u32],
    ) -> Result<LmOutput<'t>, ModelError> {
        if glosses.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        let (_, states) = self.lm_run(tape, p, glosses)?;
        let out_w = p.var(self.ids.lm_out_w);
        let out_b = p.var(self.ids.lm_out_b);
        let mut log_probs = Vec::with_capacity(states.len());
        for h in &states {
            log_probs.push(out_w.matvec(*h)?.add(out_b)?.log_softmax()?);
        }
        let targets = Self::lm_targets(glosses);
        Ok(LmOutput { states, log_probs, targets })
    }

    /// Teacher-forced targets: the gloss after each position, then the
    /// end-of-sentence slot.
    pub fn lm_targets(glosses: &[u32]) -> Vec<usize> {
        let mut t: Vec<usize> = glosses[1..].iter().map(|&g| g as usize).collect();
        t.push(EOS_SLOT);
        t
    }

    /// Log-linear fusion hook for beam decoding.
    pub fn lm_scorer(&self) -> LmPrefixScorer<'_> {
        LmPrefixScorer { model: self }
    }
}

/// Scores beam-prefix extensions with the trained language model. Each call
/// replays the prefix on a scratch tape; fine for the beam sizes used here.
pub struct LmPrefixScorer<'m> {
    model: &'m Model,
}

impl PrefixScorer for LmPrefixScorer<'_> {
    fn extension_log_prob(&self, prefix: &[u32], next: u32) -> f64 {
        if next == 0 || next as usize > self.model.lm.glosses {
            return f64::NEG_INFINITY;
        }
        let tape = Tape::new();
        let p = self.model.tape_params(&tape);
        let Ok((h, _)) = self.model.lm_run(&tape, &p, prefix) else {
            return f64::NEG_INFINITY;
        };
        let out_w = p.var(self.model.ids.lm_out_w);
        let out_b = p.var(self.model.ids.lm_out_b);
        match out_w.matvec(h).and_then(|v| v.add(out_b)).and_then(|v| v.log_softmax()) {
            Ok(lp) => lp.values()[next as usize],
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

fn conv_tanh<'t>(
    tape: &'t Tape,
    seq: &[Var<'t>],
    w: Var<'t>,
    b: Var<'t>,
    kernel: usize,
    in_dim: usize,
) -> Result<Vec<Var<'t>>, ModelError> {
    let pad = kernel / 2;
    let zero = tape.vector(&vec![0.0; in_dim]);
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mut parts = Vec::with_capacity(kernel);
        for j in 0..kernel {
            let pos = t as isize + j as isize - pad as isize;
            parts.push(if pos < 0 || pos as usize >= seq.len() {
                zero
            } else {
                seq[pos as usize]
            });
        }
        let window = tape.concat(&parts)?;
        out.push(w.matvec(window)?.add(b)?.tanh());
    }
    Ok(out)
}

fn pool_pairs<'t>(seq: &[Var<'t>]) -> Result<Vec<Var<'t>>, ModelError> {
    let mut out = Vec::with_capacity(seq.len() / 2);
    for pair in seq.chunks_exact(2) {
        out.push(pair[0].max(pair[1])?);
    }
    Ok(out)
}

fn gru_step<'t>(g: &GruVars<'t>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>, TapeError> {
    let z = g.wz.matvec(x)?.add(g.uz.matvec(h)?)?.add(g.bz)?.sigmoid();
    let r = g.wr.matvec(x)?.add(g.ur.matvec(h)?)?.add(g.br)?.sigmoid();
    let cand = g.wh.matvec(x)?.add(g.uh.matvec(r.mul(h)?)?)?.add(g.bh)?.tanh();
    g.ones.sub(z)?.mul(h)?.add(z.mul(cand)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    fn tiny_model(seed: u64) -> Model {
        let enc = EncoderConfig {
            input_dim: 4,
            conv_channels: 6,
            kernel: 3,
            rnn_hidden: 5,
            proj_dim: 5,
            labels: 4,
        };
        let lm = RnnLmConfig { glosses: 3, embed_dim: 4, hidden: 5 };
        Model::new(enc, lm, seed).unwrap()
    }

    fn random_frames(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat::from_vec(n, d, data)
    }

    #[test]
    fn encoder_step_count_and_normalization() {
        let model = tiny_model(1);
        let frames = random_frames(40, 4, 2);
        let tape = Tape::new();
        let p = model.tape_params(&tape);
        let out = model.encoder_forward(&tape, &p, &frames).unwrap();
        assert_eq!(out.emissions.len(), 10);
        assert_eq!(out.hidden.len(), 10);
        for row in &out.emissions {
            let lse = math::log_sum_exp_slice(&row.values());
            assert!(lse.abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_is_deterministic() {
        let model = tiny_model(3);
        let frames = random_frames(17, 4, 4);
        let run = || {
            let tape = Tape::new();
            let p = model.tape_params(&tape);
            let out = model.encoder_forward(&tape, &p, &frames).unwrap();
            out.emissions.iter().flat_map(|r| r.values()).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_short_input_is_rejected() {
        let model = tiny_model(5);
        let frames = random_frames(3, 4, 6);
        let tape = Tape::new();
        let p = model.tape_params(&tape);
        let err = model.encoder_forward(&tape, &p, &frames).map(|_| ()).unwrap_err();
        assert_eq!(err, ModelError::InputTooShort { needed: 4, got: 3 });
    }

    #[test]
    fn isolated_head_shares_the_trunk() {
        let mut model = tiny_model(7);
        let frames = random_frames(8, 4, 8);

        let eval = |model: &Model| {
            let tape = Tape::new();
            let p = model.tape_params(&tape);
            let iso = model.isolated_forward(&tape, &p, &frames).unwrap().values();
            let enc = model.encoder_forward(&tape, &p, &frames).unwrap();
            (iso, enc.emissions[0].values())
        };
        let (iso_a, enc_a) = eval(&model);
        let lse = math::log_sum_exp_slice(&iso_a);
        assert!(lse.abs() < 1e-9);

        // Mutating a trunk weight must move both heads.
        let idx = model.params.index_of("enc.conv1.w").unwrap();
        model.params.values_mut(idx)[0] += 0.25;
        let (iso_b, enc_b) = eval(&model);
        assert_ne!(iso_a, iso_b);
        assert_ne!(enc_a, enc_b);
    }

    #[test]
    fn lm_shapes_and_targets() {
        let model = tiny_model(9);
        let tape = Tape::new();
        let p = model.tape_params(&tape);
        let y = TargetSequence::new(vec![2]).unwrap();
        let out = model.rnnlm_forward(&tape, &p, &y).unwrap();
        assert_eq!(out.states.len(), 1);
        assert_eq!(out.log_probs.len(), 1);
        assert_eq!(out.targets, vec![EOS_SLOT]);
        assert!(matches!(out.states[0].shape(), crate::tape::Shape::Vector(5)));

        let y = TargetSequence::new(vec![1, 3, 2]).unwrap();
        let out = model.rnnlm_forward(&tape, &p, &y).unwrap();
        assert_eq!(out.targets, vec![3, 2, EOS_SLOT]);
    }

    #[test]
    fn lm_learns_a_deterministic_sentence() {
        // Teacher forcing on one fixed sentence drives the cross-entropy
        // toward zero: every next gloss (and the end token) is certain.
        let model_cell = std::cell::RefCell::new(tiny_model(21));
        let y = TargetSequence::new(vec![1, 3, 2]).unwrap();
        let mut adam = crate::opt::Adam::new(&model_cell.borrow().params, 0.05);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut model = model_cell.borrow_mut();
            let tape = Tape::new();
            let params = model.tape_params(&tape);
            let out = model.rnnlm_forward(&tape, &params, &y).unwrap();
            let loss =
                crate::criteria::lm_loss(&tape, &out.log_probs, &out.targets).unwrap();
            last = loss.value();
            tape.backward(loss).unwrap();
            let grads = params.grads().unwrap();
            adam.step(&mut model.params, &grads);
        }
        assert!(last < 0.05, "LM cross-entropy stuck at {last}");
    }

    #[test]
    fn empty_lm_input_is_rejected() {
        let model = tiny_model(11);
        let tape = Tape::new();
        let p = model.tape_params(&tape);
        assert!(matches!(
            model.rnnlm_forward_tokens(&tape, &p, &[]),
            Err(ModelError::EmptyTarget)
        ));
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let enc = EncoderConfig { proj_dim: 8, ..EncoderConfig::default() };
        let lm = RnnLmConfig { hidden: 16, glosses: 20, embed_dim: 12 };
        assert!(Model::new(enc, lm, 0).is_err());
    }
}
