//! `key=value` run configuration. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignConfig, Direction};
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::ModelConfig;

/// Per-stage-family overrides of the shared schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    // Full-scale reference values: lr 2e-5, batch 2048, up to 3 epochs. At
    // batch 32 on these toy models 2e-5 barely moves the weights.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub s1: Schedule,
    pub s2: Schedule,
    pub s3: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            s1: Schedule::default(),
            s2: Schedule::default(),
            s3: Schedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Generation budget per answer, EOS excluded.
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            max_new: 4,
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Defaults overlaid with every `key=value` line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let c = &mut self.corpus;
        match key {
            "model.vocab_size" => m.vocab_size = parse(key, value)?,
            "model.d_enc" => m.d_enc = parse(key, value)?,
            "model.d_llm" => m.d_llm = parse(key, value)?,
            "model.n_heads" => m.n_heads = parse(key, value)?,
            "model.n_enc_layers" => m.n_enc_layers = parse(key, value)?,
            "model.n_dec_layers" => m.n_dec_layers = parse(key, value)?,
            "model.n_query" => m.n_query = parse(key, value)?,
            "model.max_seq" => m.max_seq = parse(key, value)?,
            "model.seed" => m.seed = parse(key, value)?,
            "align.tau" => self.align.tau = parse(key, value)?,
            "align.direction" => self.align.direction = Direction::from_str(value)?,
            "align.strict_paper_f" => self.align.strict_paper_f = parse_bool(key, value)?,
            "lora.rank" => self.lora.rank = parse(key, value)?,
            "lora.alpha" => self.lora.alpha = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "eval.threshold" => self.eval.threshold = parse(key, value)?,
            "eval.max_new" => self.eval.max_new = parse(key, value)?,
            "corpus.seed" => c.seed = parse(key, value)?,
            "corpus.n_subvideos" => c.n_subvideos = parse(key, value)?,
            "corpus.n_domains" => c.n_domains = parse(key, value)?,
            "corpus.qa_per_subvideo" => c.qa_per_subvideo = parse(key, value)?,
            "corpus.vocab_size" => c.vocab_size = parse(key, value)?,
            "corpus.n_fillers" => c.n_fillers = parse(key, value)?,
            "corpus.n_keys" => c.n_keys = parse(key, value)?,
            "corpus.n_slide_values" => c.n_slide_values = parse(key, value)?,
            "corpus.n_audio_values" => c.n_audio_values = parse(key, value)?,
            "corpus.keys_per_domain" => c.keys_per_domain = parse(key, value)?,
            "corpus.values_per_domain" => c.values_per_domain = parse(key, value)?,
            "corpus.audio_values_per_domain" => c.audio_values_per_domain = parse(key, value)?,
            _ => return self.set_schedule(key, value),
        }
        Ok(())
    }

    fn set_schedule(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown config key {key:?}"));
        let rest = key.strip_prefix("train.").ok_or_else(unknown)?;
        let (family, field) = rest.split_once('.').ok_or_else(unknown)?;
        let sched = match family {
            "s1" => &mut self.train.s1,
            "s2" => &mut self.train.s2,
            "s3" => &mut self.train.s3,
            _ => return Err(unknown()),
        };
        match field {
            "lr" => sched.lr = Some(parse(key, value)?),
            "epochs" => sched.epochs = Some(parse(key, value)?),
            "batch_size" => sched.batch_size = Some(parse(key, value)?),
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.align.validate()?;
        self.lora.validate()?;
        self.corpus.validate()?;
        let t = &self.train;
        for s in [&t.s1, &t.s2, &t.s3] {
            let lr = s.lr.unwrap_or(t.lr);
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
            }
            if s.epochs.unwrap_or(t.epochs) == 0 || s.batch_size.unwrap_or(t.batch_size) == 0 {
                return Err(Error::Config("epochs and batch_size must be >= 1".into()));
            }
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold must lie in (0, 1), got {}",
                self.eval.threshold
            )));
        }
        if self.eval.max_new == 0 {
            return Err(Error::Config("eval.max_new must be >= 1".into()));
        }
        if self.corpus.vocab_size > self.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus.vocab_size {} exceeds model.vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        Ok(())
    }

    /// Every key with its effective value, in the file format.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let c = &self.corpus;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("model.vocab_size", m.vocab_size.to_string());
        put("model.d_enc", m.d_enc.to_string());
        put("model.d_llm", m.d_llm.to_string());
        put("model.n_heads", m.n_heads.to_string());
        put("model.n_enc_layers", m.n_enc_layers.to_string());
        put("model.n_dec_layers", m.n_dec_layers.to_string());
        put("model.n_query", m.n_query.to_string());
        put("model.max_seq", m.max_seq.to_string());
        put("model.seed", m.seed.to_string());
        put("align.tau", self.align.tau.to_string());
        put(
            "align.direction",
            match self.align.direction {
                Direction::A2v => "a2v".into(),
                Direction::Symmetric => "symmetric".into(),
            },
        );
        put("align.strict_paper_f", self.align.strict_paper_f.to_string());
        put("lora.rank", self.lora.rank.to_string());
        put("lora.alpha", self.lora.alpha.to_string());
        put("train.lr", t.lr.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.seed", t.seed.to_string());
        for (name, s) in [("s1", &t.s1), ("s2", &t.s2), ("s3", &t.s3)] {
            if let Some(v) = s.lr {
                put(&format!("train.{name}.lr"), v.to_string());
            }
            if let Some(v) = s.epochs {
                put(&format!("train.{name}.epochs"), v.to_string());
            }
            if let Some(v) = s.batch_size {
                put(&format!("train.{name}.batch_size"), v.to_string());
            }
        }
        put("eval.threshold", self.eval.threshold.to_string());
        put("eval.max_new", self.eval.max_new.to_string());
        put("corpus.seed", c.seed.to_string());
        put("corpus.n_subvideos", c.n_subvideos.to_string());
        put("corpus.n_domains", c.n_domains.to_string());
        put("corpus.qa_per_subvideo", c.qa_per_subvideo.to_string());
        put("corpus.vocab_size", c.vocab_size.to_string());
        put("corpus.n_fillers", c.n_fillers.to_string());
        put("corpus.n_keys", c.n_keys.to_string());
        put("corpus.n_slide_values", c.n_slide_values.to_string());
        put("corpus.n_audio_values", c.n_audio_values.to_string());
        put("corpus.keys_per_domain", c.keys_per_domain.to_string());
        put("corpus.values_per_domain", c.values_per_domain.to_string());
        put("corpus.audio_values_per_domain", c.audio_values_per_domain.to_string());
        out
    }
}
