//! Flat key = value configuration files with named-key diagnostics, plus
//! the generator/run schemas and CLI override merging.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ctclab_core::criteria::{CriterionConfig, CriterionKind};
use ctclab_core::model::{EncoderConfig, RnnLmConfig};
use ctclab_core::synth::{GenConfig, SplitMode};

/// Parsed `key = value` lines. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    values: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                bail!("line {}: empty key", lineno + 1);
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                bail!("line {}: duplicate key `{key}`", lineno + 1);
            }
        }
        Ok(FlatConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Tracks which keys a schema consumed so unknown keys fail by name.
pub struct SchemaReader<'a> {
    cfg: &'a FlatConfig,
    used: Vec<String>,
}

impl<'a> SchemaReader<'a> {
    pub fn new(cfg: &'a FlatConfig) -> Self {
        SchemaReader { cfg, used: Vec::new() }
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.used.push(key.to_string());
        self.cfg.get(key)
    }

    pub fn parse_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse::<T>().map_err(|e| anyhow!("config key `{key}`: {e} (got `{s}`)")),
        }
    }

    pub fn string_or(&mut self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn optional_string(&mut self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    /// Error out on any key the schema never consumed.
    pub fn finish(self) -> Result<()> {
        for key in self.cfg.keys() {
            if !self.used.iter().any(|u| u == key) {
                bail!("unknown config key `{key}`");
            }
        }
        Ok(())
    }
}

pub fn gen_config_from(cfg: &FlatConfig) -> Result<GenConfig> {
    let defaults = GenConfig::default();
    let mut r = SchemaReader::new(cfg);
    let split_mode_s = r.string_or("split_mode", defaults.split_mode.name());
    let split_mode = SplitMode::parse(&split_mode_s)
        .ok_or_else(|| anyhow!("config key `split_mode`: expected sd|si, got `{split_mode_s}`"))?;
    let out = GenConfig {
        vocab_size: r.parse_or("vocab_size", defaults.vocab_size)?,
        feature_dim: r.parse_or("feature_dim", defaults.feature_dim)?,
        signer_styles: r.parse_or("signer_styles", defaults.signer_styles)?,
        train_sentences: r.parse_or("train_sentences", defaults.train_sentences)?,
        val_sentences: r.parse_or("val_sentences", defaults.val_sentences)?,
        test_sentences: r.parse_or("test_sentences", defaults.test_sentences)?,
        sentence_len_min: r.parse_or("sentence_len_min", defaults.sentence_len_min)?,
        sentence_len_max: r.parse_or("sentence_len_max", defaults.sentence_len_max)?,
        gloss_dur_min: r.parse_or("gloss_dur_min", defaults.gloss_dur_min)?,
        gloss_dur_max: r.parse_or("gloss_dur_max", defaults.gloss_dur_max)?,
        transition_min: r.parse_or("transition_min", defaults.transition_min)?,
        transition_max: r.parse_or("transition_max", defaults.transition_max)?,
        noise_sigma: r.parse_or("noise_sigma", defaults.noise_sigma)?,
        style_strength: r.parse_or("style_strength", defaults.style_strength)?,
        split_mode,
        downsample_factor: r.parse_or("downsample_factor", defaults.downsample_factor)?,
    };
    r.finish()?;
    Ok(out)
}

pub fn render_gen_config(cfg: &GenConfig) -> String {
    let mut s = String::new();
    use fmt::Write;
    let _ = writeln!(s, "vocab_size = {}", cfg.vocab_size);
    let _ = writeln!(s, "feature_dim = {}", cfg.feature_dim);
    let _ = writeln!(s, "signer_styles = {}", cfg.signer_styles);
    let _ = writeln!(s, "train_sentences = {}", cfg.train_sentences);
    let _ = writeln!(s, "val_sentences = {}", cfg.val_sentences);
    let _ = writeln!(s, "test_sentences = {}", cfg.test_sentences);
    let _ = writeln!(s, "sentence_len_min = {}", cfg.sentence_len_min);
    let _ = writeln!(s, "sentence_len_max = {}", cfg.sentence_len_max);
    let _ = writeln!(s, "gloss_dur_min = {}", cfg.gloss_dur_min);
    let _ = writeln!(s, "gloss_dur_max = {}", cfg.gloss_dur_max);
    let _ = writeln!(s, "transition_min = {}", cfg.transition_min);
    let _ = writeln!(s, "transition_max = {}", cfg.transition_max);
    let _ = writeln!(s, "noise_sigma = {}", cfg.noise_sigma);
    let _ = writeln!(s, "style_strength = {}", cfg.style_strength);
    let _ = writeln!(s, "split_mode = {}", cfg.split_mode.name());
    let _ = writeln!(s, "downsample_factor = {}", cfg.downsample_factor);
    s
}

/// When the stimuli/LM terms switch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StimActivate {
    /// Epoch >= ceil(max_epochs / 2), or a validation-loss plateau,
    /// whichever comes first.
    Auto,
    /// Validation-loss plateau only.
    Plateau,
    /// Fixed 1-based epoch.
    Epoch(usize),
}

impl StimActivate {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(StimActivate::Auto),
            "plateau" => Ok(StimActivate::Plateau),
            other => other
                .parse::<usize>()
                .map(StimActivate::Epoch)
                .map_err(|_| anyhow!("expected auto|plateau|<epoch>, got `{other}`")),
        }
    }

    pub fn render(&self) -> String {
        match self {
            StimActivate::Auto => "auto".to_string(),
            StimActivate::Plateau => "plateau".to_string(),
            StimActivate::Epoch(e) => e.to_string(),
        }
    }
}

/// Trunk pretraining scheme before continuous training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PretrainScheme {
    None,
    Isolated,
    Uniform,
    ForcedFromModel(PathBuf),
}

impl PretrainScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PretrainScheme::None),
            "isolated" => Ok(PretrainScheme::Isolated),
            "uniform" => Ok(PretrainScheme::Uniform),
            other => match other.strip_prefix("forced:") {
                Some(path) if !path.is_empty() => {
                    Ok(PretrainScheme::ForcedFromModel(PathBuf::from(path)))
                }
                _ => Err(anyhow!("expected none|isolated|uniform|forced:<ckpt>, got `{other}`")),
            },
        }
    }

    pub fn render(&self) -> String {
        match self {
            PretrainScheme::None => "none".to_string(),
            PretrainScheme::Isolated => "isolated".to_string(),
            PretrainScheme::Uniform => "uniform".to_string(),
            PretrainScheme::ForcedFromModel(p) => format!("forced:{}", p.display()),
        }
    }
}

/// Full experiment description for `train`/`eval`.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub criterion: CriterionConfig,
    pub stim_activate: StimActivate,
    pub pretrain: PretrainScheme,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub lr_drop: f64,
    pub lr_patience: usize,
    pub stim_plateau_patience: usize,
    pub max_epochs: usize,
    pub grad_clip: f64,
    /// Maximum fraction of frames randomly dropped per training sentence
    /// (0 disables temporal subsampling).
    pub frame_dropout: f64,
    pub conv_channels: usize,
    pub kernel: usize,
    pub rnn_hidden: usize,
    pub proj_dim: usize,
    pub lm_embed_dim: usize,
    pub eval_beam: Option<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            seed: 1,
            criterion: CriterionConfig::new(CriterionKind::Ctc),
            stim_activate: StimActivate::Auto,
            pretrain: PretrainScheme::None,
            pretrain_epochs: 3,
            lr: 1e-4,
            lr_drop: 1e-5,
            lr_patience: 5,
            stim_plateau_patience: 5,
            max_epochs: 40,
            grad_clip: 5.0,
            frame_dropout: 0.0,
            conv_channels: 24,
            kernel: 5,
            rnn_hidden: 16,
            proj_dim: 16,
            lm_embed_dim: 12,
            eval_beam: None,
        }
    }
}

impl RunSettings {
    pub fn from_config(cfg: &FlatConfig) -> Result<Self> {
        let d = RunSettings::default();
        let mut r = SchemaReader::new(cfg);

        let kind_s = r.string_or("criterion", "ctc");
        let kind = CriterionKind::parse(&kind_s)
            .ok_or_else(|| anyhow!("config key `criterion`: expected ctc|enctc|stim|enstim, got `{kind_s}`"))?;
        let mut criterion = CriterionConfig::new(kind);
        criterion.phi = r.parse_or("phi", criterion.phi)?;
        criterion.theta = r.parse_or("theta", criterion.theta)?;
        criterion.lambda = r.parse_or("lambda", criterion.lambda)?;
        criterion.keep_entropy_after_activation =
            r.parse_or("keep_entropy_after_activation", false)?;

        let stim_s = r.string_or("stim_activate", "auto");
        let pretrain_s = r.string_or("pretrain", "none");
        let out = RunSettings {
            data_dir: PathBuf::from(r.string_or("data_dir", "")),
            out_dir: PathBuf::from(r.string_or("out_dir", "")),
            seed: r.parse_or("seed", d.seed)?,
            criterion,
            stim_activate: StimActivate::parse(&stim_s)?,
            pretrain: PretrainScheme::parse(&pretrain_s)?,
            pretrain_epochs: r.parse_or("pretrain_epochs", d.pretrain_epochs)?,
            lr: r.parse_or("lr", d.lr)?,
            lr_drop: r.parse_or("lr_drop", d.lr_drop)?,
            lr_patience: r.parse_or("lr_patience", d.lr_patience)?,
            stim_plateau_patience: r.parse_or("stim_plateau_patience", d.stim_plateau_patience)?,
            max_epochs: r.parse_or("max_epochs", d.max_epochs)?,
            grad_clip: r.parse_or("grad_clip", d.grad_clip)?,
            frame_dropout: r.parse_or("frame_dropout", d.frame_dropout)?,
            conv_channels: r.parse_or("conv_channels", d.conv_channels)?,
            kernel: r.parse_or("kernel", d.kernel)?,
            rnn_hidden: r.parse_or("rnn_hidden", d.rnn_hidden)?,
            proj_dim: r.parse_or("proj_dim", d.proj_dim)?,
            lm_embed_dim: r.parse_or("lm_embed_dim", d.lm_embed_dim)?,
            eval_beam: match r.optional_string("eval_beam") {
                None => None,
                Some(s) => Some(s.parse::<usize>().map_err(|e| anyhow!("config key `eval_beam`: {e}"))?),
            },
        };
        r.finish()?;
        Ok(out)
    }

    /// Echo every setting as a reloadable config file.
    pub fn render(&self) -> String {
        let mut s = String::new();
        use fmt::Write;
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "criterion = {}", self.criterion.kind.name());
        let _ = writeln!(s, "phi = {}", self.criterion.phi);
        let _ = writeln!(s, "theta = {}", self.criterion.theta);
        let _ = writeln!(s, "lambda = {}", self.criterion.lambda);
        let _ = writeln!(
            s,
            "keep_entropy_after_activation = {}",
            self.criterion.keep_entropy_after_activation
        );
        let _ = writeln!(s, "stim_activate = {}", self.stim_activate.render());
        let _ = writeln!(s, "pretrain = {}", self.pretrain.render());
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_drop = {}", self.lr_drop);
        let _ = writeln!(s, "lr_patience = {}", self.lr_patience);
        let _ = writeln!(s, "stim_plateau_patience = {}", self.stim_plateau_patience);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "frame_dropout = {}", self.frame_dropout);
        let _ = writeln!(s, "conv_channels = {}", self.conv_channels);
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "rnn_hidden = {}", self.rnn_hidden);
        let _ = writeln!(s, "proj_dim = {}", self.proj_dim);
        let _ = writeln!(s, "lm_embed_dim = {}", self.lm_embed_dim);
        if let Some(b) = self.eval_beam {
            let _ = writeln!(s, "eval_beam = {b}");
        }
        s
    }

    pub fn encoder_config(&self, input_dim: usize, labels: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            conv_channels: self.conv_channels,
            kernel: self.kernel,
            rnn_hidden: self.rnn_hidden,
            proj_dim: self.proj_dim,
            labels,
        }
    }

    pub fn lm_config(&self, glosses: usize) -> RnnLmConfig {
        RnnLmConfig { glosses, embed_dim: self.lm_embed_dim, hidden: self.proj_dim }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = FlatConfig::parse("vocab_size = 8\n# comment\nnoise_sigma = 0.1\n").unwrap();
        let gen = gen_config_from(&cfg).unwrap();
        assert_eq!(gen.vocab_size, 8);
        assert_eq!(gen.noise_sigma, 0.1);

        let bad = FlatConfig::parse("vocabsize = 8\n").unwrap();
        let err = gen_config_from(&bad).unwrap_err().to_string();
        assert!(err.contains("vocabsize"), "diagnostic must name the key: {err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_error() {
        assert!(FlatConfig::parse("a = 1\na = 2\n").is_err());
        assert!(FlatConfig::parse("nonsense line\n").is_err());
    }

    #[test]
    fn gen_config_roundtrip() {
        let cfg = GenConfig { vocab_size: 9, noise_sigma: 0.25, ..GenConfig::default() };
        let rendered = render_gen_config(&cfg);
        let parsed = gen_config_from(&FlatConfig::parse(&rendered).unwrap()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn run_settings_parse_criterion_and_schedules() {
        let cfg = FlatConfig::parse(
            "criterion = enstim\nphi = 0.2\ntheta = 0.5\nlambda = 1\nstim_activate = 6\npretrain = forced:some/model.ckpt\nmax_epochs = 12\n",
        )
        .unwrap();
        let run = RunSettings::from_config(&cfg).unwrap();
        assert_eq!(run.criterion.kind, CriterionKind::EnStim);
        assert_eq!(run.stim_activate, StimActivate::Epoch(6));
        assert_eq!(run.pretrain, PretrainScheme::ForcedFromModel(PathBuf::from("some/model.ckpt")));
        assert_eq!(run.max_epochs, 12);

        let bad = FlatConfig::parse("criterion = nope\n").unwrap();
        assert!(RunSettings::from_config(&bad).is_err());
    }
}
