//! Flat `key=value` run configuration with a typed schema.

use std::fmt::Write as _;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueType {
    Int,
    Float,
    Bool,
    Path,
    /// Float or `none`.
    OptFloat,
}

impl ValueType {
    fn name(self) -> &'static str {
        match self {
            ValueType::Int => "integer",
            ValueType::Float => "float",
            ValueType::Bool => "bool",
            ValueType::Path => "path",
            ValueType::OptFloat => "float or none",
        }
    }
}

/// Every accepted key with its type.
pub const SCHEMA: &[(&str, ValueType)] = &[
    ("model.vocab", ValueType::Int),
    ("model.embed_dim", ValueType::Int),
    ("model.width", ValueType::Int),
    ("model.depth", ValueType::Int),
    ("model.heads", ValueType::Int),
    ("model.max_len", ValueType::Int),
    ("model.mlp_ratio", ValueType::Int),
    ("model.time_dim", ValueType::Int),
    ("model.schedule_hidden", ValueType::Int),
    ("model.output_prior", ValueType::Bool),
    ("model.self_condition", ValueType::Bool),
    ("model.init_seed", ValueType::Int),
    ("train.base_lr", ValueType::Float),
    ("train.warmup_steps", ValueType::Int),
    ("train.total_steps", ValueType::Int),
    ("train.batch_size", ValueType::Int),
    ("train.seq_len", ValueType::Int),
    ("train.truncate_frac", ValueType::Float),
    ("train.seed", ValueType::Int),
    ("train.wd_coeff", ValueType::Float),
    ("train.clip_norm", ValueType::OptFloat),
    ("train.adam_beta1", ValueType::Float),
    ("train.adam_beta2", ValueType::Float),
    ("train.adam_eps", ValueType::Float),
    ("sample.steps", ValueType::Int),
    ("sample.tau", ValueType::Float),
    ("sample.seq_len", ValueType::Int),
    ("sample.seed", ValueType::Int),
    ("sample.guidance_weight", ValueType::Float),
    ("sample.num_samples", ValueType::Int),
    ("sample.chunk", ValueType::Int),
    ("eval.mc_draws", ValueType::Int),
    ("eval.seed", ValueType::Int),
    ("eval.chunk", ValueType::Int),
    ("eval.max_sequences", ValueType::Int),
    ("data.corpus", ValueType::Path),
    ("data.vocab_size", ValueType::Int),
    ("data.dir", ValueType::Path),
    ("run.dir", ValueType::Path),
    ("run.log_every", ValueType::Int),
    ("run.checkpoint_every", ValueType::Int),
    ("run.eval_every", ValueType::Int),
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mc_draws: usize,
    pub seed: u64,
    pub chunk: usize,
    /// Evaluate at most this many sequences; 0 means all.
    pub max_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mc_draws: 1, seed: 0, chunk: 16, max_sequences: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub corpus: String,
    pub vocab_size: usize,
    /// Directory holding `vocab.txt`, `train.bin` and `validation.bin`.
    pub dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: "data/shakespeare.txt".into(), vocab_size: 259, dir: "data/packed".into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub dir: String,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// 0 disables periodic validation.
    pub eval_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { dir: "runs/default".into(), log_every: 50, checkpoint_every: 1000, eval_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    /// Desk-scale defaults: the byte-level smoke model.
    fn default() -> Self {
        Self {
            model: DenoiserConfig { depth: 4, max_len: 256, ..Default::default() },
            init_seed: 0,
            train: TrainConfig { seq_len: 256, ..Default::default() },
            sample: SamplerConfig { seq_len: 256, ..Default::default() },
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            run: RunSection::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, ty: ValueType) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: expected {}, got {value:?}", ty.name())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected bool, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let ty = SCHEMA.iter().find(|(k, _)| *k == key).map(|(_, t)| *t).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let value = value.trim();
        macro_rules! num {
            ($field:expr) => {
                $field = parse(key, value, ty)?
            };
        }
        match key {
            "model.vocab" => num!(self.model.vocab),
            "model.embed_dim" => num!(self.model.embed_dim),
            "model.width" => num!(self.model.width),
            "model.depth" => num!(self.model.depth),
            "model.heads" => num!(self.model.heads),
            "model.max_len" => num!(self.model.max_len),
            "model.mlp_ratio" => num!(self.model.mlp_ratio),
            "model.time_dim" => num!(self.model.time_dim),
            "model.schedule_hidden" => num!(self.model.schedule_hidden),
            "model.output_prior" => self.model.output_prior = parse_bool(key, value)?,
            "model.self_condition" => self.model.self_condition = parse_bool(key, value)?,
            "model.init_seed" => num!(self.init_seed),
            "train.base_lr" => num!(self.train.base_lr),
            "train.warmup_steps" => num!(self.train.warmup_steps),
            "train.total_steps" => num!(self.train.total_steps),
            "train.batch_size" => num!(self.train.batch_size),
            "train.seq_len" => num!(self.train.seq_len),
            "train.truncate_frac" => num!(self.train.truncate_frac),
            "train.seed" => num!(self.train.seed),
            "train.wd_coeff" => num!(self.train.wd_coeff),
            "train.clip_norm" => self.train.clip_norm = if value == "none" { None } else { Some(parse(key, value, ty)?) },
            "train.adam_beta1" => num!(self.train.adam_beta1),
            "train.adam_beta2" => num!(self.train.adam_beta2),
            "train.adam_eps" => num!(self.train.adam_eps),
            "sample.steps" => num!(self.sample.steps),
            "sample.tau" => num!(self.sample.tau),
            "sample.seq_len" => num!(self.sample.seq_len),
            "sample.seed" => num!(self.sample.seed),
            "sample.guidance_weight" => num!(self.sample.guidance_weight),
            "sample.num_samples" => num!(self.sample.num_samples),
            "sample.chunk" => num!(self.sample.chunk),
            "eval.mc_draws" => num!(self.eval.mc_draws),
            "eval.seed" => num!(self.eval.seed),
            "eval.chunk" => num!(self.eval.chunk),
            "eval.max_sequences" => num!(self.eval.max_sequences),
            "data.corpus" => self.data.corpus = value.to_string(),
            "data.vocab_size" => num!(self.data.vocab_size),
            "data.dir" => self.data.dir = value.to_string(),
            "run.dir" => self.run.dir = value.to_string(),
            "run.log_every" => num!(self.run.log_every),
            "run.checkpoint_every" => num!(self.run.checkpoint_every),
            "run.eval_every" => num!(self.run.eval_every),
            _ => unreachable!("schema and setter disagree on {key}"),
        }
        Ok(())
    }

    /// Current value of a key, formatted so that `set` reads it back exactly.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "model.vocab" => self.model.vocab.to_string(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.width" => self.model.width.to_string(),
            "model.depth" => self.model.depth.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.max_len" => self.model.max_len.to_string(),
            "model.mlp_ratio" => self.model.mlp_ratio.to_string(),
            "model.time_dim" => self.model.time_dim.to_string(),
            "model.schedule_hidden" => self.model.schedule_hidden.to_string(),
            "model.output_prior" => self.model.output_prior.to_string(),
            "model.self_condition" => self.model.self_condition.to_string(),
            "model.init_seed" => self.init_seed.to_string(),
            "train.base_lr" => self.train.base_lr.to_string(),
            "train.warmup_steps" => self.train.warmup_steps.to_string(),
            "train.total_steps" => self.train.total_steps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.seq_len" => self.train.seq_len.to_string(),
            "train.truncate_frac" => self.train.truncate_frac.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.wd_coeff" => self.train.wd_coeff.to_string(),
            "train.clip_norm" => self.train.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
            "train.adam_beta1" => self.train.adam_beta1.to_string(),
            "train.adam_beta2" => self.train.adam_beta2.to_string(),
            "train.adam_eps" => self.train.adam_eps.to_string(),
            "sample.steps" => self.sample.steps.to_string(),
            "sample.tau" => self.sample.tau.to_string(),
            "sample.seq_len" => self.sample.seq_len.to_string(),
            "sample.seed" => self.sample.seed.to_string(),
            "sample.guidance_weight" => self.sample.guidance_weight.to_string(),
            "sample.num_samples" => self.sample.num_samples.to_string(),
            "sample.chunk" => self.sample.chunk.to_string(),
            "eval.mc_draws" => self.eval.mc_draws.to_string(),
            "eval.seed" => self.eval.seed.to_string(),
            "eval.chunk" => self.eval.chunk.to_string(),
            "eval.max_sequences" => self.eval.max_sequences.to_string(),
            "data.corpus" => self.data.corpus.clone(),
            "data.vocab_size" => self.data.vocab_size.to_string(),
            "data.dir" => self.data.dir.clone(),
            "run.dir" => self.run.dir.clone(),
            "run.log_every" => self.run.log_every.to_string(),
            "run.checkpoint_every" => self.run.checkpoint_every.to_string(),
            "run.eval_every" => self.run.eval_every.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let result = match line.split_once('=') {
                Some((k, v)) => self.set(k.trim(), v),
                None => Err(Error::Config(format!("expected key=value, got {line:?}"))),
            };
            if let Err(e) = result {
                errors.push(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: ")));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    /// Applies `key=value` overrides after any file, so they take precedence.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the file, then the overrides; validated.
    pub fn load(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.sample.validate().map_err(wrap)?;
        if self.train.seq_len > self.model.max_len {
            return Err(Error::Config(format!("train.seq_len {} exceeds model.max_len {}", self.train.seq_len, self.model.max_len)));
        }
        if self.sample.seq_len > self.model.max_len {
            return Err(Error::Config(format!("sample.seq_len {} exceeds model.max_len {}", self.sample.seq_len, self.model.max_len)));
        }
        if self.data.vocab_size != self.model.vocab {
            return Err(Error::Config(format!("data.vocab_size {} differs from model.vocab {}", self.data.vocab_size, self.model.vocab)));
        }
        if self.eval.mc_draws == 0 || self.eval.chunk == 0 {
            return Err(Error::Config("eval.mc_draws and eval.chunk must be positive".into()));
        }
        if self.run.log_every == 0 {
            return Err(Error::Config("run.log_every must be positive".into()));
        }
        Ok(())
    }

    /// Every key in schema order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in SCHEMA {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("schema key"));
        }
        s
    }

    /// Effective config as `#`-prefixed lines for log headers.
    pub fn header(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }

    /// Model-only keys, as stored alongside checkpoints.
    pub fn model_text(model: &DenoiserConfig) -> String {
        let cfg = Self { model: model.clone(), ..Self::default() };
        cfg.to_text().lines().filter(|l| l.starts_with("model.") && !l.starts_with("model.init_seed")).map(|l| format!("{l}\n")).collect()
    }

    /// Parses text produced by [`RunConfig::model_text`].
    pub fn parse_model(text: &str) -> Result<DenoiserConfig> {
        let mut cfg = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad model config line {line:?}")))?;
            if !k.starts_with("model.") {
                return Err(Error::Format(format!("unexpected key {k} in model config")));
            }
            cfg.set(k, v)?;
        }
        cfg.model.validate()?;
        Ok(cfg.model)
    }
}
