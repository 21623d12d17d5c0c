//! On-disk formats. Everything is line-delimited structured text:
//!
//! - `vocab.txt`: one `id<TAB>name` per line, ascending ids, blank `<b>` = 0.
//! - `{train,val,test}.txt`: one sentence record per line with fixed-order
//!   space-separated fields
//!   `id=<id> style=<n> glosses=<name,...> segments=<start:end:name,...> frames=<c,..,c;c,..,c;...>`
//!   where frame components render as `{:.8e}` (9 significant digits; the
//!   file is the canonical value source, so regeneration is byte-exact).
//! - `manifest.txt`: `key = value` echo of the generator config plus seed,
//!   split sizes and a format version.
//! - checkpoints: `ctclab-checkpoint v1` header, encoder/lm config lines,
//!   then one `param <name> <matrix r c | vector n>` line followed by one
//!   line of `{:.16e}` values (full f64 round-trip precision).
//!
//! Frame indices in segments are 0-based inclusive.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ctclab_core::decode::AlignmentSegment;
use ctclab_core::lattice::{TargetSequence, Vocabulary, BLANK_NAME};
use ctclab_core::model::{EncoderConfig, Model, ParamKind, RnnLmConfig};
use ctclab_core::synth::{Dataset, GenConfig, SentenceSample};
use ctclab_core::Mat;

use crate::config::{gen_config_from, render_gen_config, FlatConfig};

pub const MANIFEST_VERSION: &str = "1";
pub const CHECKPOINT_HEADER: &str = "ctclab-checkpoint v1";

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub fn render_vocabulary(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for (id, name) in vocab.names().iter().enumerate() {
        let _ = writeln!(s, "{id}\t{name}");
    }
    s
}

pub fn parse_vocabulary(text: &str) -> Result<Vocabulary> {
    let mut names = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) =
            line.split_once('\t').ok_or_else(|| anyhow!("vocab line {}: no tab", lineno + 1))?;
        let id: usize = id.parse().with_context(|| format!("vocab line {}", lineno + 1))?;
        if id != names.len() {
            bail!("vocab line {}: ids must ascend from 0", lineno + 1);
        }
        names.push(name.to_string());
    }
    if names.first().map(String::as_str) != Some(BLANK_NAME) {
        bail!("vocabulary must start with `0\t{BLANK_NAME}`");
    }
    Vocabulary::new(names.into_iter().skip(1)).map_err(|e| anyhow!("{e}"))
}

// ---------------------------------------------------------------------------
// Sentence records
// ---------------------------------------------------------------------------

/// A sentence as stored on disk (gloss ids resolved against the vocabulary).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub signer_style: usize,
    pub glosses: TargetSequence,
    pub gold_segments: Vec<AlignmentSegment>,
    pub frames: Mat,
}

fn render_frame_value(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn render_segments(segments: &[AlignmentSegment], vocab: &Vocabulary) -> String {
    segments
        .iter()
        .map(|s| format!("{}:{}:{}", s.start, s.end, vocab.name(s.gloss)))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_segments(field: &str, vocab: &Vocabulary) -> Result<Vec<AlignmentSegment>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|part| {
            let mut it = part.splitn(3, ':');
            let (a, b, name) = (it.next(), it.next(), it.next());
            let (a, b, name) = match (a, b, name) {
                (Some(a), Some(b), Some(n)) => (a, b, n),
                _ => bail!("segment `{part}`: expected start:end:gloss"),
            };
            let gloss = vocab.id(name).ok_or_else(|| anyhow!("unknown gloss `{name}`"))?;
            Ok(AlignmentSegment { start: a.parse()?, end: b.parse()?, gloss })
        })
        .collect()
}

pub fn render_sample(sample: &SentenceSample, vocab: &Vocabulary) -> String {
    let glosses = sample
        .glosses
        .ids()
        .iter()
        .map(|&g| vocab.name(g).to_string())
        .collect::<Vec<_>>()
        .join(",");
    let segments = render_segments(&sample.gold_segments, vocab);
    let mut frames = String::new();
    for t in 0..sample.frames.rows() {
        if t > 0 {
            frames.push(';');
        }
        let row = sample.frames.row(t);
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                frames.push(',');
            }
            frames.push_str(&render_frame_value(*v));
        }
    }
    format!(
        "id={} style={} glosses={} segments={} frames={}",
        sample.id, sample.signer_style, glosses, segments, frames
    )
}

pub fn parse_sample(line: &str, vocab: &Vocabulary) -> Result<SampleRecord> {
    let mut id = None;
    let mut style = None;
    let mut glosses = None;
    let mut segments = None;
    let mut frames = None;
    for field in line.split(' ') {
        let (key, value) =
            field.split_once('=').ok_or_else(|| anyhow!("field `{field}` is not key=value"))?;
        match key {
            "id" => id = Some(value.to_string()),
            "style" => style = Some(value.parse::<usize>()?),
            "glosses" => {
                let ids: Result<Vec<u32>> = value
                    .split(',')
                    .map(|n| vocab.id(n).ok_or_else(|| anyhow!("unknown gloss `{n}`")))
                    .collect();
                glosses = Some(TargetSequence::new(ids?).map_err(|e| anyhow!("{e}"))?);
            }
            "segments" => segments = Some(value.to_string()),
            "frames" => frames = Some(value.to_string()),
            other => bail!("unknown sample field `{other}`"),
        }
    }
    let id = id.ok_or_else(|| anyhow!("sample record missing id"))?;
    let glosses = glosses.ok_or_else(|| anyhow!("sample record missing glosses"))?;
    let segments = parse_segments(
        segments.as_deref().ok_or_else(|| anyhow!("sample record missing segments"))?,
        vocab,
    )?;
    let frames_field = frames.ok_or_else(|| anyhow!("sample record missing frames"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row in frames_field.split(';') {
        let parsed: Result<Vec<f64>> = row
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| anyhow!("bad frame value `{v}`: {e}")))
            .collect();
        rows.push(parsed?);
    }
    let frames = Mat::from_rows(&rows);
    Ok(SampleRecord {
        id,
        signer_style: style.ok_or_else(|| anyhow!("sample record missing style"))?,
        glosses,
        gold_segments: segments,
        frames,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

pub struct LoadedDataset {
    pub vocabulary: Vocabulary,
    pub config: GenConfig,
    pub seed: u64,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl LoadedDataset {
    pub fn split(&self, name: &str) -> Result<&[SampleRecord]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => bail!("unknown split `{other}` (expected train|val|test)"),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.frames.cols())
    }
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("vocab.txt"), render_vocabulary(&dataset.vocabulary))?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "format_version = {MANIFEST_VERSION}");
    let _ = writeln!(manifest, "seed = {}", dataset.seed);
    manifest.push_str(&render_gen_config(&dataset.config));
    let _ = writeln!(manifest, "split_train = {}", dataset.train.len());
    let _ = writeln!(manifest, "split_val = {}", dataset.val.len());
    let _ = writeln!(manifest, "split_test = {}", dataset.test.len());
    std::fs::write(dir.join("manifest.txt"), manifest)?;

    for (name, samples) in
        [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)]
    {
        let mut text = String::new();
        for sample in samples {
            text.push_str(&render_sample(sample, &dataset.vocabulary));
            text.push('\n');
        }
        std::fs::write(dir.join(format!("{name}.txt")), text)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let vocab_text = std::fs::read_to_string(dir.join("vocab.txt"))
        .with_context(|| format!("reading {}/vocab.txt", dir.display()))?;
    let vocabulary = parse_vocabulary(&vocab_text)?;

    let manifest_text = std::fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("reading {}/manifest.txt", dir.display()))?;
    let manifest = FlatConfig::parse(&manifest_text)?;
    let version = manifest
        .get("format_version")
        .ok_or_else(|| anyhow!("manifest missing format_version"))?;
    if version != MANIFEST_VERSION {
        bail!("unsupported dataset format version `{version}`");
    }
    let seed: u64 = manifest
        .get("seed")
        .ok_or_else(|| anyhow!("manifest missing seed"))?
        .parse()
        .context("manifest seed")?;
    let mut cfg_only = FlatConfig::default();
    for key in manifest.keys() {
        if !matches!(key, "format_version" | "seed" | "split_train" | "split_val" | "split_test") {
            cfg_only.set(key, manifest.get(key).unwrap());
        }
    }
    let config = gen_config_from(&cfg_only)?;

    let load_split = |name: &str| -> Result<Vec<SampleRecord>> {
        let text = std::fs::read_to_string(dir.join(format!("{name}.txt")))
            .with_context(|| format!("reading {}/{name}.txt", dir.display()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_sample(l, &vocabulary))
            .collect()
    };
    Ok(LoadedDataset {
        train: load_split("train")?,
        val: load_split("val")?,
        test: load_split("test")?,
        vocabulary,
        config,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn render_checkpoint(model: &Model) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_HEADER}");
    let e = &model.encoder;
    let _ = writeln!(
        s,
        "encoder input_dim={} conv_channels={} kernel={} rnn_hidden={} proj_dim={} labels={}",
        e.input_dim, e.conv_channels, e.kernel, e.rnn_hidden, e.proj_dim, e.labels
    );
    let _ = writeln!(
        s,
        "lm glosses={} embed_dim={} hidden={}",
        model.lm.glosses, model.lm.embed_dim, model.lm.hidden
    );
    for i in 0..model.params.len() {
        match model.params.kind(i) {
            ParamKind::Matrix(r, c) => {
                let _ = writeln!(s, "param {} matrix {r} {c}", model.params.name(i));
            }
            ParamKind::Vector(n) => {
                let _ = writeln!(s, "param {} vector {n}", model.params.name(i));
            }
        }
        let mut line = String::new();
        for (j, v) in model.params.values(i).iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v:.16e}");
        }
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s, "end");
    s
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, render_checkpoint(model))
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

fn kv_usize(field: &str, key: &str) -> Result<usize> {
    let (k, v) = field.split_once('=').ok_or_else(|| anyhow!("bad config field `{field}`"))?;
    if k != key {
        bail!("expected field `{key}`, got `{k}`");
    }
    Ok(v.parse()?)
}

pub fn parse_checkpoint(text: &str) -> Result<Model> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CHECKPOINT_HEADER => {}
        Some(h) => bail!("unsupported checkpoint header `{h}`"),
        None => bail!("empty checkpoint"),
    }
    let enc_line = lines.next().ok_or_else(|| anyhow!("checkpoint missing encoder line"))?;
    let mut parts = enc_line.split(' ');
    if parts.next() != Some("encoder") {
        bail!("expected encoder line");
    }
    let fields: Vec<&str> = parts.collect();
    if fields.len() != 6 {
        bail!("encoder line must carry 6 fields");
    }
    let encoder = EncoderConfig {
        input_dim: kv_usize(fields[0], "input_dim")?,
        conv_channels: kv_usize(fields[1], "conv_channels")?,
        kernel: kv_usize(fields[2], "kernel")?,
        rnn_hidden: kv_usize(fields[3], "rnn_hidden")?,
        proj_dim: kv_usize(fields[4], "proj_dim")?,
        labels: kv_usize(fields[5], "labels")?,
    };
    let lm_line = lines.next().ok_or_else(|| anyhow!("checkpoint missing lm line"))?;
    let mut parts = lm_line.split(' ');
    if parts.next() != Some("lm") {
        bail!("expected lm line");
    }
    let fields: Vec<&str> = parts.collect();
    if fields.len() != 3 {
        bail!("lm line must carry 3 fields");
    }
    let lm = RnnLmConfig {
        glosses: kv_usize(fields[0], "glosses")?,
        embed_dim: kv_usize(fields[1], "embed_dim")?,
        hidden: kv_usize(fields[2], "hidden")?,
    };

    let mut model = Model::new(encoder, lm, 0).map_err(|e| anyhow!("{e}"))?;
    let mut seen = 0usize;
    loop {
        let header = lines.next().ok_or_else(|| anyhow!("checkpoint truncated"))?;
        if header == "end" {
            break;
        }
        let mut parts = header.split(' ');
        if parts.next() != Some("param") {
            bail!("expected `param` line, got `{header}`");
        }
        let name = parts.next().ok_or_else(|| anyhow!("param line missing name"))?;
        let kind = parts.next().ok_or_else(|| anyhow!("param line missing kind"))?;
        let expected_kind = match kind {
            "matrix" => {
                let r: usize = parts.next().ok_or_else(|| anyhow!("missing rows"))?.parse()?;
                let c: usize = parts.next().ok_or_else(|| anyhow!("missing cols"))?.parse()?;
                ParamKind::Matrix(r, c)
            }
            "vector" => {
                let n: usize = parts.next().ok_or_else(|| anyhow!("missing len"))?.parse()?;
                ParamKind::Vector(n)
            }
            other => bail!("unknown param kind `{other}`"),
        };
        let idx = model
            .params
            .index_of(name)
            .ok_or_else(|| anyhow!("checkpoint param `{name}` does not exist in this model"))?;
        if model.params.kind(idx) != expected_kind {
            bail!("checkpoint param `{name}` has mismatched shape");
        }
        let values_line = lines.next().ok_or_else(|| anyhow!("param `{name}` missing values"))?;
        let values: Result<Vec<f64>> = values_line
            .split(' ')
            .map(|v| v.parse::<f64>().map_err(|e| anyhow!("param `{name}`: {e}")))
            .collect();
        let values = values?;
        if values.len() != expected_kind.len() {
            bail!("param `{name}`: expected {} values, got {}", expected_kind.len(), values.len());
        }
        model.params.values_mut(idx).copy_from_slice(&values);
        seen += 1;
    }
    if seen != model.params.len() {
        bail!("checkpoint carries {seen} params, model has {}", model.params.len());
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    parse_checkpoint(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

// ---------------------------------------------------------------------------
// Alignment records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRecord {
    pub id: String,
    pub gold: Vec<AlignmentSegment>,
    pub predicted: Vec<AlignmentSegment>,
    /// Per-frame argmax labels (gloss ids, blank included).
    pub frame_labels: Vec<u32>,
}

pub fn render_alignment_record(rec: &AlignmentRecord, vocab: &Vocabulary) -> String {
    let labels = rec
        .frame_labels
        .iter()
        .map(|&g| vocab.name(g).to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "id={} gold={} pred={} frame_labels={}",
        rec.id,
        render_segments(&rec.gold, vocab),
        render_segments(&rec.predicted, vocab),
        labels
    )
}

pub fn parse_alignment_record(line: &str, vocab: &Vocabulary) -> Result<AlignmentRecord> {
    let mut id = None;
    let mut gold = None;
    let mut pred = None;
    let mut labels = None;
    for field in line.split(' ') {
        let (key, value) =
            field.split_once('=').ok_or_else(|| anyhow!("field `{field}` is not key=value"))?;
        match key {
            "id" => id = Some(value.to_string()),
            "gold" => gold = Some(parse_segments(value, vocab)?),
            "pred" => pred = Some(parse_segments(value, vocab)?),
            "frame_labels" => {
                let ids: Result<Vec<u32>> = value
                    .split(',')
                    .map(|n| vocab.id(n).ok_or_else(|| anyhow!("unknown gloss `{n}`")))
                    .collect();
                labels = Some(ids?);
            }
            other => bail!("unknown alignment field `{other}`"),
        }
    }
    Ok(AlignmentRecord {
        id: id.ok_or_else(|| anyhow!("alignment record missing id"))?,
        gold: gold.ok_or_else(|| anyhow!("alignment record missing gold"))?,
        predicted: pred.ok_or_else(|| anyhow!("alignment record missing pred"))?,
        frame_labels: labels.ok_or_else(|| anyhow!("alignment record missing frame_labels"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctclab_core::synth::{gen_dataset, GenConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = GenConfig {
            vocab_size: 5,
            feature_dim: 3,
            signer_styles: 2,
            train_sentences: 4,
            val_sentences: 2,
            test_sentences: 2,
            sentence_len_min: 2,
            sentence_len_max: 3,
            ..GenConfig::default()
        };
        gen_dataset(&cfg, 42).unwrap()
    }

    #[test]
    fn dataset_write_load_roundtrip() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.config, ds.config);
        assert_eq!(loaded.train.len(), 4);
        assert_eq!(loaded.vocabulary, ds.vocabulary);
        for (mem, disk) in ds.train.iter().zip(loaded.train.iter()) {
            assert_eq!(mem.id, disk.id);
            assert_eq!(mem.glosses, disk.glosses);
            assert_eq!(mem.gold_segments, disk.gold_segments);
            assert_eq!(mem.frames.rows(), disk.frames.rows());
            for t in 0..mem.frames.rows() {
                for c in 0..mem.frames.cols() {
                    // 9 significant digits survive the write.
                    assert!((mem.frames.at(t, c) - disk.frames.at(t, c)).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn rewriting_a_loaded_dataset_is_byte_stable() {
        let ds = tiny_dataset();
        let line = render_sample(&ds.train[0], &ds.vocabulary);
        let parsed = parse_sample(&line, &ds.vocabulary).unwrap();
        let again = {
            let sample = SentenceSample {
                id: parsed.id.clone(),
                signer_style: parsed.signer_style,
                glosses: parsed.glosses.clone(),
                gold_segments: parsed.gold_segments.clone(),
                frames: parsed.frames.clone(),
            };
            render_sample(&sample, &ds.vocabulary)
        };
        assert_eq!(line, again);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let model = Model::new(
            EncoderConfig {
                input_dim: 3,
                conv_channels: 4,
                kernel: 3,
                rnn_hidden: 3,
                proj_dim: 4,
                labels: 4,
            },
            RnnLmConfig { glosses: 3, embed_dim: 3, hidden: 4 },
            7,
        )
        .unwrap();
        let text = render_checkpoint(&model);
        let loaded = parse_checkpoint(&text).unwrap();
        assert_eq!(loaded.encoder, model.encoder);
        assert_eq!(loaded.lm, model.lm);
        for i in 0..model.params.len() {
            assert_eq!(model.params.values(i), loaded.params.values(i), "param {i} differs");
        }

        assert!(parse_checkpoint("bogus\n").is_err());
    }

    #[test]
    fn alignment_record_roundtrip() {
        let ds = tiny_dataset();
        let rec = AlignmentRecord {
            id: "val-00001".to_string(),
            gold: ds.train[0].gold_segments.clone(),
            predicted: ds.train[0].gold_segments.clone(),
            frame_labels: vec![0, 1, 1, 0, 2],
        };
        let line = render_alignment_record(&rec, &ds.vocabulary);
        let parsed = parse_alignment_record(&line, &ds.vocabulary).unwrap();
        assert_eq!(parsed, rec);
    }
}
