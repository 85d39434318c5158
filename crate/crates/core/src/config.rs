//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Values are applied in order: built-in defaults, then the config file,
//! then command-line overrides. Unknown keys are rejected.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | unset, required by training commands |
//! | `encoder.kind` | `pcnn` |
//! | `encoder.word_dim` | 300 |
//! | `encoder.pos_dim` | 5 |
//! | `encoder.filters` | 230 |
//! | `encoder.window` | 3 |
//! | `encoder.max_distance` | 60 |
//! | `encoder.max_len` | 100 |
//! | `encoder.min_count` | 1 |
//! | `encoder.embeddings` | unset |
//! | `train.lr` | 0.001 |
//! | `train.batch_size` | 50 |
//! | `train.full_batch` | false |
//! | `train.source_epochs` | 20 |
//! | `train.aux_epochs` | 3 |
//! | `train.adapt_epochs` | 10 |
//! | `train.finetune_epochs` | 5 |
//! | `train.patience` | 0 (no early stopping) |
//! | `train.lambda` | 1 |
//! | `train.lambda_schedule` | `warmup` |
//! | `train.bce_eps` | 1e-7 |
//! | `train.fixed_alpha` | 0.5 |
//! | `train.hidden` | 100 |
//! | `adapt.mode` | `full` |
//! | `finetune.fractions` | `0,0.25,0.5,0.75,1` |
//! | `eval.k` | 100 |
//! | `ablate.seeds` | `0,1,2,3,4` |
//! | `sweep.counts` | `1,2,3,4,5` |
//! | `sweep.samples` | 3 |
//! | `data.dir` | unset (generate from `synth.*`) |
//! | `output.dir` | `runs` |
//! | `synth.*` | see [`SyntheticSpec`] |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaptation::{AblationMode, LambdaSchedule, TrainConfig};
use crate::data::SyntheticSpec;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};

/// Environment variable that replaces `output.dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "RGATED_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub max_len: usize,
    pub min_count: usize,
    pub embeddings: Option<PathBuf>,
    pub train: TrainConfig,
    pub mode: AblationMode,
    pub fractions: Vec<f64>,
    pub eval_k: usize,
    pub ablate_seeds: Vec<u64>,
    pub sweep_counts: Vec<usize>,
    pub sweep_samples: usize,
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            encoder: EncoderConfig::default(),
            max_len: 100,
            min_count: 1,
            embeddings: None,
            train: TrainConfig::default(),
            mode: AblationMode::Full,
            fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_k: 100,
            ablate_seeds: vec![0, 1, 2, 3, 4],
            sweep_counts: vec![1, 2, 3, 4, 5],
            sweep_samples: 3,
            data_dir: None,
            output_dir: PathBuf::from("runs"),
            synth: SyntheticSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let t = &mut self.train;
        let e = &mut self.encoder;
        match key {
            "seed" => self.seed = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "encoder.kind" => e.kind = v.parse::<EncoderKind>()?,
            "encoder.word_dim" => e.word_dim = parse(key, v)?,
            "encoder.pos_dim" => e.pos_dim = parse(key, v)?,
            "encoder.filters" => e.filters = parse(key, v)?,
            "encoder.window" => e.window = parse(key, v)?,
            "encoder.max_distance" => e.max_distance = parse(key, v)?,
            "encoder.max_len" => self.max_len = parse(key, v)?,
            "encoder.min_count" => self.min_count = parse(key, v)?,
            "encoder.embeddings" => self.embeddings = optional_path(v),
            "train.lr" => t.lr = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.full_batch" => t.full_batch = parse(key, v)?,
            "train.source_epochs" => t.source_epochs = parse(key, v)?,
            "train.aux_epochs" => t.aux_epochs = parse(key, v)?,
            "train.adapt_epochs" => t.adapt_epochs = parse(key, v)?,
            "train.finetune_epochs" => t.finetune_epochs = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.lambda" => t.lambda = parse(key, v)?,
            "train.lambda_schedule" => t.lambda_schedule = v.parse::<LambdaSchedule>()?,
            "train.bce_eps" => t.bce_eps = parse(key, v)?,
            "train.fixed_alpha" => t.fixed_alpha = parse(key, v)?,
            "train.hidden" => t.hidden = parse(key, v)?,
            "adapt.mode" => self.mode = v.parse()?,
            "finetune.fractions" => self.fractions = parse_list(key, v)?,
            "eval.k" => self.eval_k = parse(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(key, v)?,
            "sweep.counts" => self.sweep_counts = parse_list(key, v)?,
            "sweep.samples" => self.sweep_samples = parse(key, v)?,
            "data.dir" => self.data_dir = optional_path(v),
            "output.dir" => self.output_dir = PathBuf::from(v),
            "synth.n_source_classes" => s.n_source_classes = parse(key, v)?,
            "synth.n_target_classes" => s.n_target_classes = parse(key, v)?,
            "synth.per_class" => s.per_class = parse(key, v)?,
            "synth.noise_rate" => s.noise_rate = parse(key, v)?,
            "synth.min_len" => s.min_len = parse(key, v)?,
            "synth.max_len" => s.max_len = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "synth.include_na" => s.include_na = parse(key, v)?,
            "synth.triggers_per_class" => s.triggers_per_class = parse(key, v)?,
            "synth.templates_per_class" => s.templates_per_class = parse(key, v)?,
            "synth.style_vocab" => s.style_vocab = parse(key, v)?,
            "synth.shared_filler" => s.shared_filler = parse(key, v)?,
            "synth.shared_filler_rate" => s.shared_filler_rate = parse(key, v)?,
            "synth.entity_pool" => s.entity_pool = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order; feeding these back
    /// through [`RunConfig::set`] reproduces the configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let t = &self.train;
        let e = &self.encoder;
        vec![
            ("seed", self.seed.map(|x| x.to_string()).unwrap_or_default()),
            ("encoder.kind", e.kind.to_string()),
            ("encoder.word_dim", e.word_dim.to_string()),
            ("encoder.pos_dim", e.pos_dim.to_string()),
            ("encoder.filters", e.filters.to_string()),
            ("encoder.window", e.window.to_string()),
            ("encoder.max_distance", e.max_distance.to_string()),
            ("encoder.max_len", self.max_len.to_string()),
            ("encoder.min_count", self.min_count.to_string()),
            ("encoder.embeddings", show_path(&self.embeddings)),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.full_batch", t.full_batch.to_string()),
            ("train.source_epochs", t.source_epochs.to_string()),
            ("train.aux_epochs", t.aux_epochs.to_string()),
            ("train.adapt_epochs", t.adapt_epochs.to_string()),
            ("train.finetune_epochs", t.finetune_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.lambda_schedule", t.lambda_schedule.to_string()),
            ("train.bce_eps", t.bce_eps.to_string()),
            ("train.fixed_alpha", t.fixed_alpha.to_string()),
            ("train.hidden", t.hidden.to_string()),
            ("adapt.mode", self.mode.to_string()),
            ("finetune.fractions", join(&self.fractions)),
            ("eval.k", self.eval_k.to_string()),
            ("ablate.seeds", join(&self.ablate_seeds)),
            ("sweep.counts", join(&self.sweep_counts)),
            ("sweep.samples", self.sweep_samples.to_string()),
            ("data.dir", show_path(&self.data_dir)),
            ("output.dir", self.output_dir.display().to_string()),
            ("synth.n_source_classes", s.n_source_classes.to_string()),
            ("synth.n_target_classes", s.n_target_classes.to_string()),
            ("synth.per_class", s.per_class.to_string()),
            ("synth.noise_rate", s.noise_rate.to_string()),
            ("synth.min_len", s.min_len.to_string()),
            ("synth.max_len", s.max_len.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("synth.include_na", s.include_na.to_string()),
            ("synth.triggers_per_class", s.triggers_per_class.to_string()),
            ("synth.templates_per_class", s.templates_per_class.to_string()),
            ("synth.style_vocab", s.style_vocab.to_string()),
            ("synth.shared_filler", s.shared_filler.to_string()),
            ("synth.shared_filler_rate", s.shared_filler_rate.to_string()),
            ("synth.entity_pool", s.entity_pool.to_string()),
        ]
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`, then the output-root
    /// environment variable.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_dir = PathBuf::from(root);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let e = &self.encoder;
        if e.word_dim == 0 || e.filters == 0 || e.window == 0 || e.pos_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.max_len == 0 {
            return Err(Error::config("encoder.max_len must be positive"));
        }
        if t.batch_size == 0 || t.hidden == 0 {
            return Err(Error::config("train.batch_size and train.hidden must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return Err(Error::config("train.lambda must be non-negative"));
        }
        if !(t.bce_eps > 0.0 && t.bce_eps < 0.5) {
            return Err(Error::config("train.bce_eps must lie in (0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&t.fixed_alpha) {
            return Err(Error::config("train.fixed_alpha must lie in [0, 1]"));
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("finetune.fractions must lie in [0, 1]"));
        }
        if self.eval_k == 0 {
            return Err(Error::config("eval.k must be positive"));
        }
        self.synth.validate()
    }

    /// The seed, or a config error for commands that train.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::config("seed is required for training commands (set seed=N)"))
    }
}
