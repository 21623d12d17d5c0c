use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctclab::commands;
use ctclab::config::{FlatConfig, PretrainScheme, RunSettings, StimActivate};
use ctclab_core::criteria::CriterionKind;

#[derive(Parser)]
#[command(
    name = "ctclab",
    about = "CTC criterion laboratory: synthetic gloss-stream datasets, training with \
             CTC/EnCTC/StimCTC/EnStimCTC, decoding, WER and alignment reports, gradient \
             and oracle verification, benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (vocab.txt, manifest.txt, split files).
    Gen {
        /// Flat key = value generator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes epochs.txt, model.ckpt, test_report.txt.
    Train {
        /// Flat key = value run config; CLI flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report/checkpoint directory (overrides out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// ctc | enctc | stim | enstim
        #[arg(long)]
        criterion: Option<String>,
        /// Entropy weight.
        #[arg(long)]
        phi: Option<f64>,
        /// Stimuli weight.
        #[arg(long)]
        theta: Option<f64>,
        /// Language-model weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// none | isolated | uniform | forced:<checkpoint>
        #[arg(long)]
        pretrain: Option<String>,
        /// auto | plateau | <epoch>
        #[arg(long = "stim-activate")]
        stim_activate: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint on a split (WER with S/D/I breakdown).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Prefix-beam width; omitted or 1 means greedy decoding.
        #[arg(long)]
        beam: Option<usize>,
        /// Log-linear LM fusion weight (needs --beam > 1).
        #[arg(long = "lm-weight")]
        lm_weight: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forced-align a split and report frame accuracy / IoU against gold.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every gradient path.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Check fewer model/criterion combinations.
        #[arg(long)]
        quick: bool,
    },
    /// Randomized DP-vs-enumeration comparison report.
    Oracle {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Maximum enumerated paths per trial.
        #[arg(long, default_value_t = 10_000_000)]
        budget: u64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss+gradient latency at corpus-like sizes.
    Bench {
        #[arg(long, default_value_t = 25)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[allow(clippy::too_many_arguments)]
fn build_run_settings(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    criterion: Option<String>,
    phi: Option<f64>,
    theta: Option<f64>,
    lambda: Option<f64>,
    pretrain: Option<String>,
    stim_activate: Option<String>,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> anyhow::Result<RunSettings> {
    let flat = match config {
        Some(path) => FlatConfig::load(&path)?,
        None => FlatConfig::default(),
    };
    let mut settings = RunSettings::from_config(&flat)?;
    if let Some(d) = data {
        settings.data_dir = d;
    }
    if let Some(o) = out {
        settings.out_dir = o;
    }
    if let Some(s) = seed {
        settings.seed = s;
    }
    if let Some(c) = criterion {
        settings.criterion.kind = CriterionKind::parse(&c).ok_or_else(|| {
            anyhow::anyhow!("--criterion: expected ctc|enctc|stim|enstim, got `{c}`")
        })?;
    }
    if let Some(v) = phi {
        settings.criterion.phi = v;
    }
    if let Some(v) = theta {
        settings.criterion.theta = v;
    }
    if let Some(v) = lambda {
        settings.criterion.lambda = v;
    }
    if let Some(p) = pretrain {
        settings.pretrain = PretrainScheme::parse(&p)?;
    }
    if let Some(a) = stim_activate {
        settings.stim_activate = StimActivate::parse(&a)?;
    }
    if let Some(e) = epochs {
        settings.max_epochs = e;
    }
    if let Some(l) = lr {
        settings.lr = l;
    }
    Ok(settings)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: anyhow::Result<bool> = match cli.command {
        Command::Gen { config, seed, out } => {
            commands::cmd_gen(config.as_deref(), seed, &out).map(|()| true)
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            criterion,
            phi,
            theta,
            lambda,
            pretrain,
            stim_activate,
            epochs,
            lr,
        } => build_run_settings(
            config, data, out, seed, criterion, phi, theta, lambda, pretrain, stim_activate,
            epochs, lr,
        )
        .and_then(|settings| commands::cmd_train(&settings).map(|_| true)),
        Command::Eval { checkpoint, data, split, beam, lm_weight, out } => {
            commands::cmd_eval(&checkpoint, &data, &split, beam, lm_weight, out.as_deref())
                .map(|()| true)
        }
        Command::Align { checkpoint, data, split, out } => {
            commands::cmd_align(&checkpoint, &data, &split, out.as_deref()).map(|()| true)
        }
        Command::Gradcheck { seed, quick } => commands::cmd_gradcheck(seed, quick),
        Command::Oracle { trials, budget, seed, out } => {
            commands::cmd_oracle(trials, budget, seed, out.as_deref())
        }
        Command::Bench { reps, seed } => commands::cmd_bench(reps, seed).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
