//! Flat `key = value` run configuration with environment overrides.
//!
//! Every key can be overridden by an environment variable named
//! `SEQDIFF_<KEY>` in upper case, e.g. `SEQDIFF_TRAIN_STEPS=500`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TaskKind, TaskSpec};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::sampler::{SamplerConfig, SamplerMode, TauTerminal};
use crate::schedule::NoiseSchedule;

pub const ENV_PREFIX: &str = "SEQDIFF_";

/// Model shape; the vocabulary size comes from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub length_offset_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            width: 256,
            layers: 4,
            heads: 4,
            ffn_width: 1024,
            length_offset_k: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_steps: u64,
    pub save_every: u64,
    pub log_every: u64,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_steps: 20_000,
            save_every: 1000,
            log_every: 10,
            sampler: SamplerConfig {
                length_beam: 5,
                mbr_samples: 1,
                ..Default::default()
            },
        }
    }
}

/// `(key, description)` for every recognised key, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "task",
        "copy | reverse | toy_translation | one_to_many | many_to_one",
    ),
    ("vocab_size", "content tokens per language"),
    ("min_len", "minimum sentence length"),
    ("max_len", "maximum sentence length"),
    ("n_train", "training pairs"),
    ("n_valid", "validation pairs"),
    ("n_test", "test pairs"),
    ("languages", "sub-languages for multilingual tasks"),
    ("data_seed", "seed for corpus generation"),
    ("embed_dim", "diffusion embedding dimension D"),
    ("width", "model width H"),
    ("layers", "encoder and decoder blocks"),
    ("heads", "attention heads"),
    ("ffn_width", "feed-forward width"),
    ("length_offset_k", "length offsets predicted over [-K, K]"),
    ("schedule", "linear | sqrt"),
    ("noise_clipping", "true | false"),
    ("clip_refresh_every", "steps between threshold re-estimates"),
    (
        "self_cond_prob",
        "probability of a self-conditioning pass in training",
    ),
    ("length_loss_weight", "weight of the length-prediction loss"),
    ("batch_tokens", "target tokens per batch"),
    ("lr", "peak learning rate"),
    ("warmup_steps", "linear warmup steps"),
    ("weight_decay", "decoupled weight decay"),
    ("grad_clip", "global gradient norm ceiling (0 disables)"),
    ("train_steps", "optimizer steps"),
    ("save_every", "steps between checkpoints"),
    ("log_every", "steps between metrics rows"),
    ("seed", "training seed"),
    ("sample_steps", "sampling steps M"),
    ("mode", "ddim | cedi"),
    (
        "tau_sigma",
        "noise level of the last model-facing timestep in cedi",
    ),
    ("length_beam", "candidate lengths per source"),
    ("mbr", "samples per candidate length"),
    (
        "self_condition",
        "feed previous estimates while sampling (true | false)",
    ),
    ("sample_seed", "sampling seed"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {v:?} for key {key}"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches('"');
        match key {
            "task" => self.task.kind = v.parse::<TaskKind>()?,
            "vocab_size" => self.task.vocab_size = parse(key, v)?,
            "min_len" => self.task.min_len = parse(key, v)?,
            "max_len" => self.task.max_len = parse(key, v)?,
            "n_train" => self.task.n_train = parse(key, v)?,
            "n_valid" => self.task.n_valid = parse(key, v)?,
            "n_test" => self.task.n_test = parse(key, v)?,
            "languages" => self.task.languages = parse(key, v)?,
            "data_seed" => self.task.seed = parse(key, v)?,
            "embed_dim" => self.model.embed_dim = parse(key, v)?,
            "width" => self.model.width = parse(key, v)?,
            "layers" => self.model.layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "ffn_width" => self.model.ffn_width = parse(key, v)?,
            "length_offset_k" => self.model.length_offset_k = parse(key, v)?,
            "schedule" => self.train.schedule = v.parse::<NoiseSchedule>()?,
            "noise_clipping" => self.train.noise_clipping = parse_bool(key, v)?,
            "clip_refresh_every" => self.train.clip_refresh_every = parse(key, v)?,
            "self_cond_prob" => self.train.self_cond_prob = parse(key, v)?,
            "length_loss_weight" => self.train.length_loss_weight = parse(key, v)?,
            "batch_tokens" => self.train.batch_tokens = parse(key, v)?,
            "lr" => self.train.optimizer.lr = parse(key, v)?,
            "warmup_steps" => self.train.optimizer.warmup_steps = parse(key, v)?,
            "weight_decay" => self.train.optimizer.weight_decay = parse(key, v)?,
            "grad_clip" => self.train.optimizer.clip_norm = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "save_every" => self.save_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "sample_steps" => self.sampler.steps = parse(key, v)?,
            "mode" => self.sampler.mode = v.parse::<SamplerMode>()?,
            "tau_sigma" => self.sampler.tau_terminal = TauTerminal::Sigma(parse(key, v)?),
            "length_beam" => self.sampler.length_beam = parse(key, v)?,
            "mbr" => self.sampler.mbr_samples = parse(key, v)?,
            "self_condition" => self.sampler.self_condition = parse_bool(key, v)?,
            "sample_seed" => self.sampler.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical `(key, value)` rendering, in `KEYS` order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let tau = match self.sampler.tau_terminal {
            TauTerminal::Sigma(s) => s,
            TauTerminal::Time(t) => self.train.schedule.sigma(t).unwrap_or(f64::NAN),
        };
        let vals = [
            self.task.kind.to_string(),
            self.task.vocab_size.to_string(),
            self.task.min_len.to_string(),
            self.task.max_len.to_string(),
            self.task.n_train.to_string(),
            self.task.n_valid.to_string(),
            self.task.n_test.to_string(),
            self.task.languages.to_string(),
            self.task.seed.to_string(),
            self.model.embed_dim.to_string(),
            self.model.width.to_string(),
            self.model.layers.to_string(),
            self.model.heads.to_string(),
            self.model.ffn_width.to_string(),
            self.model.length_offset_k.to_string(),
            self.train.schedule.to_string(),
            self.train.noise_clipping.to_string(),
            self.train.clip_refresh_every.to_string(),
            self.train.self_cond_prob.to_string(),
            self.train.length_loss_weight.to_string(),
            self.train.batch_tokens.to_string(),
            self.train.optimizer.lr.to_string(),
            self.train.optimizer.warmup_steps.to_string(),
            self.train.optimizer.weight_decay.to_string(),
            self.train.optimizer.clip_norm.to_string(),
            self.train_steps.to_string(),
            self.save_every.to_string(),
            self.log_every.to_string(),
            self.train.seed.to_string(),
            self.sampler.steps.to_string(),
            self.sampler.mode.to_string(),
            tau.to_string(),
            self.sampler.length_beam.to_string(),
            self.sampler.mbr_samples.to_string(),
            self.sampler.self_condition.to_string(),
            self.sampler.seed.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(vals).collect()
    }

    pub fn render(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => Error::Config(format!("line {}: {other}", i + 1)),
            })?;
        }
        Ok(cfg)
    }

    /// Applies `SEQDIFF_<KEY>` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase();
                if KEYS.iter().any(|(k, _)| *k == key) {
                    self.set(&key, &value).map_err(|e| match e {
                        Error::Config(m) => Error::Config(format!("{name}: {m}")),
                        other => Error::Config(format!("{name}: {other}")),
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Reads a file (or defaults when `path` is `None`) and applies the
    /// process environment on top.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether a checkpoint written under `other` can be resumed under
    /// `self`: task, model and training settings must agree; step counts,
    /// logging cadence and sampler settings may differ.
    pub fn resumable_from(&self, other: &RunConfig) -> bool {
        self.task == other.task && self.model == other.model && self.train == other.train
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.denoiser_config().validate()?;
        self.sampler.validate()?;
        if self.train.clip_refresh_every == 0 {
            return Err(Error::Config(
                "clip_refresh_every must be at least 1".into(),
            ));
        }
        if self.log_every == 0 || self.save_every == 0 {
            return Err(Error::Config(
                "log_every and save_every must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: self.task.total_vocab(),
            embed_dim: self.model.embed_dim,
            width: self.model.width,
            layers: self.model.layers,
            heads: self.model.heads,
            ffn_width: self.model.ffn_width,
            length_offset_k: self.model.length_offset_k,
        }
    }

    /// Keys and descriptions formatted for `--help`.
    pub fn help_text() -> String {
        let d = Self::default();
        let vals = d.to_pairs();
        let mut s = format!("Config keys (file: key = value; env: {ENV_PREFIX}<KEY>):\n");
        for ((k, desc), (_, v)) in KEYS.iter().zip(vals) {
            s.push_str(&format!("  {k:<20} {desc} [default {v}]\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.set("task", "one_to_many").unwrap();
        c.set("noise_clipping", "false").unwrap();
        c.set("lr", "0.002").unwrap();
        c.set("mode", "ddim").unwrap();
        let back = RunConfig::parse_str(&c.render()).unwrap();
        assert_eq!(back.render(), c.render());
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn every_key_is_settable() {
        let d = RunConfig::default();
        for (k, v) in d.to_pairs() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap();
            assert_eq!(c.render(), d.render(), "key {k}");
        }
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse_str("# c\nwidth = 8\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 3"));
        assert!(RunConfig::parse_str("width 8").is_err());
        assert!(RunConfig::parse_str("width = eight").is_err());
        assert!(RunConfig::parse_str("noise_clipping = maybe").is_err());
    }

    #[test]
    fn environment_overrides_file() {
        let mut c = RunConfig::parse_str("train_steps = 10\nschedule = sqrt\n").unwrap();
        c.apply_env(vec![
            ("SEQDIFF_TRAIN_STEPS".to_string(), "25".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ])
        .unwrap();
        assert_eq!(c.train_steps, 25);
        assert_eq!(c.train.schedule, NoiseSchedule::Sqrt);
        assert!(c
            .apply_env(vec![("SEQDIFF_WIDTH".to_string(), "x".to_string())])
            .is_err());
    }
}
