//! Command implementations shared by the binary and the test suites.
//! Exit-code convention: 0 success, 1 a verification/validation failure,
//! 2 bad input (unparseable config, missing files, bad flags).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctclab_core::synth::gen_dataset;

use crate::config::{FlatConfig, RunSettings};
use crate::formats::{render_alignment_record, write_dataset};
use crate::trainer::{self, TrainOutput};

pub fn cmd_gen(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let flat = match config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::default(),
    };
    let gen_cfg = crate::config::gen_config_from(&flat)?;
    let dataset = gen_dataset(&gen_cfg, seed).map_err(|e| anyhow::anyhow!("{e}"))?;
    write_dataset(out, &dataset)?;
    println!(
        "wrote dataset to {} (train={} val={} test={})",
        out.display(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );
    Ok(())
}

/// Everything `train` leaves on disk.
pub struct TrainArtifacts {
    pub epochs_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub test_report_path: PathBuf,
}

pub fn write_train_outputs(
    out_dir: &Path,
    settings: &RunSettings,
    output: &TrainOutput,
) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let mut epochs = String::new();
    for rec in &output.epochs {
        let _ = writeln!(epochs, "{}", rec.render());
    }
    let epochs_path = out_dir.join("epochs.txt");
    std::fs::write(&epochs_path, epochs)?;

    std::fs::write(out_dir.join("run_config.txt"), settings.render())?;

    let checkpoint_path = out_dir.join("model.ckpt");
    crate::formats::save_checkpoint(&checkpoint_path, &output.model)?;

    let test_report_path = out_dir.join("test_report.txt");
    std::fs::write(&test_report_path, output.test_report.render(&output.vocabulary))?;

    Ok(TrainArtifacts { epochs_path, checkpoint_path, test_report_path })
}

pub fn cmd_train(settings: &RunSettings) -> Result<TrainArtifacts> {
    if settings.data_dir.as_os_str().is_empty() {
        bail!("no dataset directory: pass --data or set data_dir in the config");
    }
    if settings.out_dir.as_os_str().is_empty() {
        bail!("no output directory: pass --out or set out_dir in the config");
    }
    let mut log = std::io::stdout();
    let output = trainer::train(settings, &mut log)?;
    let artifacts = write_train_outputs(&settings.out_dir, settings, &output)?;
    println!(
        "final test wer={} ({} sentences); wrote {}",
        output.test_report.wer(),
        output.test_report.sentences.len(),
        settings.out_dir.display()
    );
    Ok(artifacts)
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    beam: Option<usize>,
    lm_weight: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let (report, vocab) = trainer::evaluate_checkpoint(checkpoint, data, split, beam, lm_weight)?;
    let rendered = report.render(&vocab);
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("eval_{split}.txt"));
            std::fs::write(&path, &rendered)?;
            println!("wer={} -> {}", report.wer(), path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

pub fn cmd_align(checkpoint: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let dataset = crate::formats::load_dataset(data)?;
    let model = crate::formats::load_checkpoint(checkpoint)?;
    let samples = dataset.split(split)?;
    let (records, summary) = trainer::align_split(&model, samples)?;
    let mut rendered = String::new();
    for rec in &records {
        let _ = writeln!(rendered, "{}", render_alignment_record(rec, &dataset.vocabulary));
    }
    let _ = writeln!(rendered, "{}", summary.render());
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("alignments_{split}.txt"));
            std::fs::write(&path, &rendered)?;
            println!("{} -> {}", summary.render(), path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

/// Returns false when any gradient check fails.
pub fn cmd_gradcheck(seed: u64, quick: bool) -> Result<bool> {
    let results = crate::gradsuite::run_suite(seed, quick)?;
    let mut all_pass = true;
    for r in &results {
        println!(
            "gradcheck {} max_rel_err={:.3e} tolerance={:.1e} {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
        all_pass &= r.passed();
    }
    Ok(all_pass)
}

/// Returns false when any deviation exceeds its threshold.
pub fn cmd_oracle(trials: usize, budget: u64, seed: u64, out: Option<&Path>) -> Result<bool> {
    let outcome = crate::oraclecmd::run_oracle(trials, budget, seed);
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("oracle_report.txt");
            std::fs::write(&path, &outcome.report)?;
            let summary = outcome.report.lines().last().unwrap_or_default();
            println!("{summary}");
            println!("report -> {}", path.display());
        }
        None => print!("{}", outcome.report),
    }
    Ok(outcome.deviations.pass())
}

pub fn cmd_bench(reps: usize, seed: u64) -> Result<()> {
    let outcome = crate::bench::run_bench(reps, seed);
    print!("{}", outcome.report);
    Ok(())
}
