//! The experiment driver: pretraining schemes, the continuous training loop
//! with the criterion family and the late-stage stimuli activation schedule,
//! validation scoring, and split evaluation/alignment.
//!
//! Everything is single-threaded and consumes one seeded random stream, so a
//! (settings, dataset) pair reproduces its reports byte for byte.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ctclab_core::criteria::{composite_loss, emission_values, StimuliInputs};
use ctclab_core::decode::{forced_alignment, greedy_decode, prefix_beam_decode, StepFrameMap};
use ctclab_core::lattice::{min_admissible_t, EmissionLattice, TargetSequence, Vocabulary};
use ctclab_core::metrics::{alignment_quality, wer, EditOps, WerAccumulator};
use ctclab_core::model::{Model, TapeParams};
use ctclab_core::opt::{clip_global_norm, Adam, PlateauTracker};
use ctclab_core::synth::uniform_pseudoalign;
use ctclab_core::{Mat, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PretrainScheme, RunSettings, StimActivate};
use crate::formats::{
    load_checkpoint, load_dataset, AlignmentRecord, LoadedDataset, SampleRecord,
};

/// One epoch's deterministic report fields plus wall-clock (logged, never
/// written into the report file).
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ctc: f64,
    pub loss_entropy: f64,
    pub loss_lm: f64,
    pub loss_stimuli: f64,
    pub val_loss: f64,
    pub val_wer: f64,
    pub peakiness: f64,
    pub stim_active: bool,
    pub lr: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// Deterministic report line (no wall-clock).
    pub fn render(&self) -> String {
        format!(
            "epoch={} loss={} ctc={} entropy={} lm={} stimuli={} val_loss={} val_wer={} peakiness={} stim_active={} lr={}",
            self.epoch,
            self.loss_total,
            self.loss_ctc,
            self.loss_entropy,
            self.loss_lm,
            self.loss_stimuli,
            self.val_loss,
            self.val_wer,
            self.peakiness,
            self.stim_active,
            self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct SentenceEval {
    pub id: String,
    pub reference: Vec<u32>,
    pub hypothesis: Vec<u32>,
    pub ops: EditOps,
    pub log_score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub sentences: Vec<SentenceEval>,
    pub totals: WerAccumulator,
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.totals.wer()
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        for e in &self.sentences {
            let names = |ids: &[u32]| {
                if ids.is_empty() {
                    "-".to_string()
                } else {
                    ids.iter().map(|&g| vocab.name(g).to_string()).collect::<Vec<_>>().join(",")
                }
            };
            let _ = writeln!(
                s,
                "sentence id={} ref={} hyp={} s={} d={} i={} n={} score={}",
                e.id,
                names(&e.reference),
                names(&e.hypothesis),
                e.ops.substitutions,
                e.ops.deletions,
                e.ops.insertions,
                e.ops.reference_len,
                e.log_score
            );
        }
        let _ = writeln!(
            s,
            "aggregate wer={} s={} d={} i={} n={} sentences={}",
            self.totals.wer(),
            self.totals.substitutions,
            self.totals.deletions,
            self.totals.insertions,
            self.totals.reference_len,
            self.sentences.len()
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentSummary {
    pub mean_frame_accuracy: f64,
    pub mean_iou: f64,
    pub sentences: usize,
}

impl AlignmentSummary {
    pub fn render(&self) -> String {
        format!(
            "summary frame_accuracy={} mean_iou={} sentences={}",
            self.mean_frame_accuracy, self.mean_iou, self.sentences
        )
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub test_report: EvalReport,
    pub vocabulary: Vocabulary,
}

fn build_model(settings: &RunSettings, data: &LoadedDataset) -> Result<Model> {
    let feature_dim = data.feature_dim();
    if feature_dim == 0 {
        bail!("dataset has no training samples");
    }
    let labels = data.vocabulary.len();
    let enc = settings.encoder_config(feature_dim, labels);
    let lm = settings.lm_config(data.vocabulary.gloss_count());
    Model::new(enc, lm, settings.seed).map_err(|e| anyhow!("{e}"))
}

/// Forward one sentence without gradients and return its emission lattice.
fn emissions_of(model: &Model, frames: &Mat) -> Result<EmissionLattice> {
    let tape = Tape::new();
    let params = model.tape_params(&tape);
    let out = model.encoder_forward(&tape, &params, frames).map_err(|e| anyhow!("{e}"))?;
    emission_values(&out.emissions).map_err(|e| anyhow!("{e}"))
}

/// Random temporal subsampling: drop up to `max_drop` of the frames while
/// keeping the target admissible for the encoder's downsampling.
fn subsample_frames(
    frames: &Mat,
    y: &TargetSequence,
    max_drop: f64,
    downsample: usize,
    rng: &mut ChaCha8Rng,
) -> Mat {
    let n = frames.rows();
    let drop_frac = rng.random_range(0.0..max_drop);
    let min_keep = downsample * min_admissible_t(y);
    let keep = (((n as f64) * (1.0 - drop_frac)) as usize).max(min_keep).min(n);
    if keep == n {
        return frames.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut kept: Vec<usize> = idx.into_iter().take(keep).collect();
    kept.sort_unstable();
    let rows: Vec<Vec<f64>> = kept.iter().map(|&t| frames.row(t).to_vec()).collect();
    Mat::from_rows(&rows)
}

struct StepOutcome {
    total: f64,
    ctc: f64,
    entropy: f64,
    lm: f64,
    stimuli: f64,
}

/// One optimization step over a sentence; returns the loss breakdown.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    settings: &RunSettings,
    sample: &SampleRecord,
    frames: &Mat,
    stim_active: bool,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let params: TapeParams = model.tape_params(&tape);
    let out = model.encoder_forward(&tape, &params, frames).map_err(|e| anyhow!("{e}"))?;

    let needs_stim = settings.criterion.uses_stimuli() && stim_active;
    let (loss, parts) = if needs_stim {
        let lm_out =
            model.rnnlm_forward(&tape, &params, &sample.glosses).map_err(|e| anyhow!("{e}"))?;
        let inputs = StimuliInputs {
            encoder_states: &out.hidden,
            lm_states: &lm_out.states,
            lm_log_probs: &lm_out.log_probs,
            lm_targets: &lm_out.targets,
            gamma: None,
        };
        composite_loss(&tape, &settings.criterion, &out.emissions, &sample.glosses, Some(&inputs), true)
            .map_err(|e| anyhow!("{e} (sentence {})", sample.id))?
    } else {
        composite_loss(&tape, &settings.criterion, &out.emissions, &sample.glosses, None, stim_active)
            .map_err(|e| anyhow!("{e} (sentence {})", sample.id))?
    };

    tape.backward(loss).map_err(|e| anyhow!("{e}"))?;
    let mut grads = params.grads().map_err(|e| anyhow!("{e}"))?;
    clip_global_norm(&mut grads, settings.grad_clip);
    adam.step(&mut model.params, &grads);
    Ok(StepOutcome {
        total: parts.total,
        ctc: parts.ctc,
        entropy: parts.entropy,
        lm: parts.lm,
        stimuli: parts.stimuli,
    })
}

/// Validation pass: composite loss (under the current schedule state),
/// greedy WER and peakiness.
fn validate(
    model: &Model,
    settings: &RunSettings,
    samples: &[SampleRecord],
    stim_active: bool,
) -> Result<(f64, f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc = WerAccumulator::default();
    let mut peak_sum = 0.0;
    let mut steps = 0usize;
    for sample in samples {
        let tape = Tape::new();
        let params = model.tape_params(&tape);
        let out =
            model.encoder_forward(&tape, &params, &sample.frames).map_err(|e| anyhow!("{e}"))?;
        let needs_stim = settings.criterion.uses_stimuli() && stim_active;
        let (loss, _) = if needs_stim {
            let lm_out = model
                .rnnlm_forward(&tape, &params, &sample.glosses)
                .map_err(|e| anyhow!("{e}"))?;
            let inputs = StimuliInputs {
                encoder_states: &out.hidden,
                lm_states: &lm_out.states,
                lm_log_probs: &lm_out.log_probs,
                lm_targets: &lm_out.targets,
                gamma: None,
            };
            composite_loss(&tape, &settings.criterion, &out.emissions, &sample.glosses, Some(&inputs), true)
                .map_err(|e| anyhow!("{e}"))?
        } else {
            composite_loss(&tape, &settings.criterion, &out.emissions, &sample.glosses, None, stim_active)
                .map_err(|e| anyhow!("{e}"))?
        };
        loss_sum += loss.value();

        let lattice = emission_values(&out.emissions).map_err(|e| anyhow!("{e}"))?;
        let hyp = greedy_decode(&lattice).labels;
        acc.add(&wer(sample.glosses.ids(), &hyp).map_err(|e| anyhow!("{e}"))?);
        for t in 0..lattice.steps() {
            let row = lattice.log_probs().row(t);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            peak_sum += hi.exp();
            steps += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((loss_sum / n, acc.wer(), peak_sum / steps.max(1) as f64))
}

/// Cross-entropy pretraining of the trunk against per-step labels.
fn pretrain_framewise(
    model: &mut Model,
    adam: &mut Adam,
    settings: &RunSettings,
    labeled: &[(usize, Vec<u32>)],
    samples: &[SampleRecord],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..settings.pretrain_epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(rng);
        for &i in &order {
            let (sample_idx, step_labels) = &labeled[i];
            let sample = &samples[*sample_idx];
            let tape = Tape::new();
            let params = model.tape_params(&tape);
            let out = model
                .encoder_forward(&tape, &params, &sample.frames)
                .map_err(|e| anyhow!("{e}"))?;
            let mut picks = Vec::with_capacity(out.emissions.len());
            for (t, row) in out.emissions.iter().enumerate() {
                picks.push(row.gather(&[step_labels[t] as usize]).map_err(|e| anyhow!("{e}"))?);
            }
            let stacked = tape.concat(&picks).map_err(|e| anyhow!("{e}"))?;
            let loss = stacked.mean().map_err(|e| anyhow!("{e}"))?.neg();
            tape.backward(loss).map_err(|e| anyhow!("{e}"))?;
            let mut grads = params.grads().map_err(|e| anyhow!("{e}"))?;
            clip_global_norm(&mut grads, settings.grad_clip);
            adam.step(&mut model.params, &grads);
        }
    }
    Ok(())
}

/// Per-step labels from a frame-level segmentation via the step centers.
fn step_labels_from_segments(
    segments: &[ctclab_core::decode::AlignmentSegment],
    map: StepFrameMap,
    steps: usize,
) -> Vec<u32> {
    (0..steps)
        .map(|t| {
            let frame = map.center(t);
            segments
                .iter()
                .find(|s| s.start <= frame && frame <= s.end)
                .map_or(ctclab_core::BLANK, |s| s.gloss)
        })
        .collect()
}

fn run_pretraining(
    model: &mut Model,
    settings: &RunSettings,
    data: &LoadedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    match &settings.pretrain {
        PretrainScheme::None => Ok(()),
        PretrainScheme::Isolated => {
            // Gloss classification over gold segments through the isolated head.
            let mut instances: Vec<(usize, usize)> = Vec::new();
            for (i, sample) in data.train.iter().enumerate() {
                for (j, seg) in sample.gold_segments.iter().enumerate() {
                    if seg.end - seg.start + 1 >= model.encoder.min_frames() {
                        instances.push((i, j));
                    }
                }
            }
            let mut adam = Adam::new(&model.params, settings.lr);
            for _ in 0..settings.pretrain_epochs {
                let mut order: Vec<usize> = (0..instances.len()).collect();
                order.shuffle(rng);
                for &k in &order {
                    let (i, j) = instances[k];
                    let sample = &data.train[i];
                    let seg = sample.gold_segments[j];
                    let rows: Vec<Vec<f64>> =
                        (seg.start..=seg.end).map(|t| sample.frames.row(t).to_vec()).collect();
                    let frames = Mat::from_rows(&rows);
                    let tape = Tape::new();
                    let params = model.tape_params(&tape);
                    let log_probs = model
                        .isolated_forward(&tape, &params, &frames)
                        .map_err(|e| anyhow!("{e}"))?;
                    let class = (seg.gloss - 1) as usize;
                    let loss =
                        log_probs.gather(&[class]).map_err(|e| anyhow!("{e}"))?.sum().neg();
                    tape.backward(loss).map_err(|e| anyhow!("{e}"))?;
                    let mut grads = params.grads().map_err(|e| anyhow!("{e}"))?;
                    clip_global_norm(&mut grads, settings.grad_clip);
                    adam.step(&mut model.params, &grads);
                }
            }
            Ok(())
        }
        PretrainScheme::Uniform => {
            let mut labeled = Vec::new();
            for (i, sample) in data.train.iter().enumerate() {
                let steps = model.encoder.steps_for(sample.frames.rows());
                let segs = uniform_pseudoalign(&sample.glosses, sample.frames.rows())
                    .map_err(|e| anyhow!("{e}"))?;
                let map = model.encoder.frame_map(sample.frames.rows());
                labeled.push((i, step_labels_from_segments(&segs, map, steps)));
            }
            let mut adam = Adam::new(&model.params, settings.lr);
            pretrain_framewise(model, &mut adam, settings, &labeled, &data.train, rng)
        }
        PretrainScheme::ForcedFromModel(path) => {
            let donor = load_checkpoint(path)?;
            if donor.encoder.labels != model.encoder.labels
                || donor.encoder.input_dim != model.encoder.input_dim
            {
                bail!("donor checkpoint shape does not match this dataset");
            }
            let mut labeled = Vec::new();
            for (i, sample) in data.train.iter().enumerate() {
                let lattice = emissions_of(&donor, &sample.frames)?;
                let (path_labels, _) = forced_alignment(&lattice, &sample.glosses)
                    .map_err(|e| anyhow!("{e} (sentence {})", sample.id))?;
                labeled.push((i, path_labels));
            }
            let mut adam = Adam::new(&model.params, settings.lr);
            pretrain_framewise(model, &mut adam, settings, &labeled, &data.train, rng)
        }
    }
}

/// Full training run over an on-disk dataset.
pub fn train(settings: &RunSettings, log: &mut dyn std::io::Write) -> Result<TrainOutput> {
    settings.criterion.validate().map_err(|e| anyhow!("{e}"))?;
    let data = load_dataset(&settings.data_dir)?;
    for sample in data.train.iter().chain(data.val.iter()).chain(data.test.iter()) {
        let steps = settings
            .encoder_config(data.feature_dim(), data.vocabulary.len())
            .steps_for(sample.frames.rows());
        if steps < min_admissible_t(&sample.glosses) {
            bail!("sample {} cannot fit its target through the encoder", sample.id);
        }
    }

    if settings.criterion.uses_stimuli() {
        if let StimActivate::Epoch(e) = settings.stim_activate {
            if e <= 1 {
                eprintln!(
                    "warning: stimuli terms active from the start; training from scratch with \
                     stimulated criteria tends not to converge"
                );
            }
        }
    }

    let mut model = build_model(settings, &data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    run_pretraining(&mut model, settings, &data, &mut rng)?;

    let mut adam = Adam::new(&model.params, settings.lr);
    let mut lr_plateau = PlateauTracker::new(settings.lr_patience.max(1));
    let mut stim_plateau = PlateauTracker::new(settings.stim_plateau_patience.max(1));
    let mut lr_dropped = false;
    let mut stim_plateau_hit = false;
    let mut stim_active = false;
    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(settings.max_epochs);
    let auto_epoch = settings.max_epochs.div_ceil(2);

    for epoch in 1..=settings.max_epochs {
        let start = Instant::now();
        if settings.criterion.uses_stimuli() && !stim_active {
            stim_active = match settings.stim_activate {
                StimActivate::Epoch(e) => epoch >= e.max(1),
                StimActivate::Plateau => stim_plateau_hit,
                StimActivate::Auto => epoch >= auto_epoch || stim_plateau_hit,
            };
        }

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = StepOutcome { total: 0.0, ctc: 0.0, entropy: 0.0, lm: 0.0, stimuli: 0.0 };
        for &i in &order {
            let sample = &data.train[i];
            let frames = if settings.frame_dropout > 0.0 {
                subsample_frames(
                    &sample.frames,
                    &sample.glosses,
                    settings.frame_dropout,
                    settings.encoder_config(1, 2).downsample_factor(),
                    &mut rng,
                )
            } else {
                sample.frames.clone()
            };
            let outcome = train_step(&mut model, &mut adam, settings, sample, &frames, stim_active)?;
            sums.total += outcome.total;
            sums.ctc += outcome.ctc;
            sums.entropy += outcome.entropy;
            sums.lm += outcome.lm;
            sums.stimuli += outcome.stimuli;
        }
        let n = data.train.len().max(1) as f64;

        let (val_loss, val_wer, peak) = validate(&model, settings, &data.val, stim_active)?;
        let record = EpochRecord {
            epoch,
            loss_total: sums.total / n,
            loss_ctc: sums.ctc / n,
            loss_entropy: sums.entropy / n,
            loss_lm: sums.lm / n,
            loss_stimuli: sums.stimuli / n,
            val_loss,
            val_wer,
            peakiness: peak,
            stim_active,
            lr: adam.lr,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{} wall_secs={:.3}", record.render(), record.wall_secs)?;
        epochs.push(record);

        if !lr_dropped && lr_plateau.observe(val_loss) {
            adam.lr = settings.lr_drop;
            lr_dropped = true;
        }
        if stim_plateau.observe(val_loss) {
            stim_plateau_hit = true;
        }
    }

    let test_report = evaluate_model(&model, &data.test, settings.eval_beam, None)?;
    Ok(TrainOutput { model, epochs, test_report, vocabulary: data.vocabulary })
}

/// Decode and score one split. `beam` of None or Some(1) means greedy;
/// `lm_weight` enables log-linear fusion with the model's own language model.
pub fn evaluate_model(
    model: &Model,
    samples: &[SampleRecord],
    beam: Option<usize>,
    lm_weight: Option<f64>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for sample in samples {
        let lattice = emissions_of(model, &sample.frames)?;
        let decoded = match beam {
            None | Some(1) => {
                if lm_weight.is_some() {
                    bail!("language-model fusion requires a beam width above 1");
                }
                greedy_decode(&lattice)
            }
            Some(width) => {
                let scorer = model.lm_scorer();
                let lm = lm_weight.map(|w| (&scorer as &dyn ctclab_core::decode::PrefixScorer, w));
                prefix_beam_decode(&lattice, width, lm).map_err(|e| anyhow!("{e}"))?
            }
        };
        let ops = wer(sample.glosses.ids(), &decoded.labels).map_err(|e| anyhow!("{e}"))?;
        report.totals.add(&ops);
        report.sentences.push(SentenceEval {
            id: sample.id.clone(),
            reference: sample.glosses.ids().to_vec(),
            hypothesis: decoded.labels,
            ops,
            log_score: decoded.log_score,
        });
    }
    Ok(report)
}

/// Forced-align every sentence of a split against its gold segmentation.
pub fn align_split(
    model: &Model,
    samples: &[SampleRecord],
) -> Result<(Vec<AlignmentRecord>, AlignmentSummary)> {
    let mut records = Vec::with_capacity(samples.len());
    let mut acc_accuracy = 0.0;
    let mut acc_iou = 0.0;
    for sample in samples {
        let lattice = emissions_of(model, &sample.frames)?;
        let (_, step_segments) =
            forced_alignment(&lattice, &sample.glosses).map_err(|e| anyhow!("{e}"))?;
        let map = model.encoder.frame_map(sample.frames.rows());
        let predicted: Vec<_> =
            step_segments.iter().map(|s| map.segment_to_frames(s)).collect();

        let steps = lattice.steps();
        let frame_labels: Vec<u32> = (0..sample.frames.rows())
            .map(|f| {
                let t = map.step_of_frame(f, steps);
                let row = lattice.log_probs().row(t);
                let mut best = 0usize;
                for (v, &lp) in row.iter().enumerate() {
                    if lp > row[best] {
                        best = v;
                    }
                }
                best as u32
            })
            .collect();

        let quality = alignment_quality(&predicted, &sample.gold_segments, sample.frames.rows())
            .map_err(|e| anyhow!("{e} (sentence {})", sample.id))?;
        acc_accuracy += quality.frame_accuracy;
        acc_iou += quality.mean_iou;
        records.push(AlignmentRecord {
            id: sample.id.clone(),
            gold: sample.gold_segments.clone(),
            predicted,
            frame_labels,
        });
    }
    let n = samples.len().max(1) as f64;
    let summary = AlignmentSummary {
        mean_frame_accuracy: acc_accuracy / n,
        mean_iou: acc_iou / n,
        sentences: samples.len(),
    };
    Ok((records, summary))
}

/// Load a dataset and evaluate a stored checkpoint on one split.
pub fn evaluate_checkpoint(
    checkpoint: &std::path::Path,
    data_dir: &std::path::Path,
    split: &str,
    beam: Option<usize>,
    lm_weight: Option<f64>,
) -> Result<(EvalReport, Vocabulary)> {
    let data = load_dataset(data_dir)?;
    let model = load_checkpoint(checkpoint)?;
    if model.encoder.labels != data.vocabulary.len() {
        bail!("checkpoint label count does not match the dataset vocabulary");
    }
    let report = evaluate_model(&model, data.split(split)?, beam, lm_weight)
        .context("evaluating split")?;
    Ok((report, data.vocabulary))
}
