//! Run configuration: one flat set of keys, stored as `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CfqaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Best `p_start[i]·p_end[j]` over `i ≤ j < i + max_span_len`.
    Constrained,
    /// Independent argmaxes; a reversed pair collapses to the start token.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Only the answering step is rewarded.
    SingleFinal,
    /// Narrowing and excision steps also earn their containment reward.
    Shaped,
}

/// Everything that determines parameter shapes and the forward computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_word: usize,
    pub d_char: usize,
    pub d_model: usize,
    pub conv_kernel: usize,
    pub conv_filters: usize,
    pub n_heads: usize,
    pub use_positional: bool,
    pub use_residual: bool,
    pub share_question_encoder: bool,
    pub char_width: usize,
    pub selector_kernel: usize,
    pub selector_filters: usize,
    pub gru_hidden: usize,
    pub max_span_len: usize,
    pub decode: DecodeMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_word: 300,
            d_char: 200,
            d_model: 128,
            conv_kernel: 7,
            conv_filters: 128,
            n_heads: 4,
            use_positional: true,
            use_residual: true,
            share_question_encoder: true,
            char_width: 16,
            selector_kernel: 5,
            selector_filters: 100,
            gru_hidden: 512,
            max_span_len: 20,
            decode: DecodeMode::Constrained,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CfqaError::Config(m));
        let dims = [
            ("d_word", self.d_word),
            ("d_char", self.d_char),
            ("d_model", self.d_model),
            ("conv_filters", self.conv_filters),
            ("n_heads", self.n_heads),
            ("char_width", self.char_width),
            ("selector_filters", self.selector_filters),
            ("gru_hidden", self.gru_hidden),
            ("max_span_len", self.max_span_len),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return err(format!("{k} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.conv_kernel.is_multiple_of(2) || self.selector_kernel.is_multiple_of(2) {
            return err("convolution kernel sizes must be odd".into());
        }
        if self.conv_filters != self.d_model {
            return err(format!(
                "conv_filters ({}) must equal d_model ({}): attention reads the conv output",
                self.conv_filters, self.d_model
            ));
        }
        Ok(())
    }

    /// SHA-256 over the model shape settings and vocabulary sizes; embedded
    /// in checkpoints so a checkpoint is never loaded into a different model.
    pub fn hash(&self, n_words: usize, n_chars: usize) -> [u8; 32] {
        let canon = serde_json::json!({ "model": self, "n_words": n_words, "n_chars": n_chars });
        Sha256::digest(canon.to_string().as_bytes()).into()
    }
}

/// Every knob of a run. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub max_doc_tokens: usize,
    pub glove_path: Option<PathBuf>,
    pub freeze_word_embeddings: bool,

    pub d_word: usize,
    pub d_char: usize,
    pub d_model: usize,
    pub conv_kernel: usize,
    pub conv_filters: usize,
    pub n_heads: usize,
    pub use_positional: bool,
    pub use_residual: bool,
    pub share_question_encoder: bool,
    pub char_width: usize,
    pub selector_kernel: usize,
    pub selector_filters: usize,
    pub gru_hidden: usize,
    pub max_span_len: usize,
    pub decode: DecodeMode,

    pub gamma: f64,
    /// AdaDelta step multiplier for the actor and critic recurrent cells.
    pub gru_lr: f64,
    /// AdaDelta step multiplier for every other parameter.
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub updates: usize,
    pub eval_every: usize,
    pub threads: usize,

    pub k_initial: usize,
    pub step_cap: usize,
    pub max_state_tokens: usize,
    pub reward_mode: RewardMode,
    pub span_loss: bool,
    pub selector_supervised: bool,
    pub entropy_coef: f64,
    pub enable_excise: bool,
    pub double_precision: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 0,
            train_path: None,
            eval_path: None,
            out_dir: PathBuf::from("runs/default"),
            max_doc_tokens: 0,
            glove_path: None,
            freeze_word_embeddings: true,
            d_word: m.d_word,
            d_char: m.d_char,
            d_model: m.d_model,
            conv_kernel: m.conv_kernel,
            conv_filters: m.conv_filters,
            n_heads: m.n_heads,
            use_positional: m.use_positional,
            use_residual: m.use_residual,
            share_question_encoder: m.share_question_encoder,
            char_width: m.char_width,
            selector_kernel: m.selector_kernel,
            selector_filters: m.selector_filters,
            gru_hidden: m.gru_hidden,
            max_span_len: m.max_span_len,
            decode: m.decode,
            gamma: 0.9,
            gru_lr: 1e-4,
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
            batch_size: 16,
            updates: 1000,
            eval_every: 0,
            threads: 1,
            k_initial: 5,
            step_cap: 5,
            max_state_tokens: 512,
            reward_mode: RewardMode::SingleFinal,
            span_loss: true,
            selector_supervised: false,
            entropy_coef: 0.0,
            enable_excise: true,
            double_precision: false,
        }
    }
}

impl RunConfig {
    /// Named starting points: `default` (full-size model) and `desk`
    /// (a narrow model that trains on one CPU core in minutes).
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "default" => {}
            "desk" => {
                cfg.d_word = 32;
                cfg.d_char = 16;
                cfg.d_model = 32;
                cfg.conv_filters = 32;
                cfg.n_heads = 2;
                cfg.selector_filters = 32;
                cfg.gru_hidden = 64;
                cfg.max_state_tokens = 128;
            }
            other => return Err(CfqaError::Config(format!("unknown preset `{other}` (expected default or desk)"))),
        }
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_word: self.d_word,
            d_char: self.d_char,
            d_model: self.d_model,
            conv_kernel: self.conv_kernel,
            conv_filters: self.conv_filters,
            n_heads: self.n_heads,
            use_positional: self.use_positional,
            use_residual: self.use_residual,
            share_question_encoder: self.share_question_encoder,
            char_width: self.char_width,
            selector_kernel: self.selector_kernel,
            selector_filters: self.selector_filters,
            gru_hidden: self.gru_hidden,
            max_span_len: self.max_span_len,
            decode: self.decode,
        }
    }

    pub fn set_model(&mut self, m: &ModelConfig) {
        self.d_word = m.d_word;
        self.d_char = m.d_char;
        self.d_model = m.d_model;
        self.conv_kernel = m.conv_kernel;
        self.conv_filters = m.conv_filters;
        self.n_heads = m.n_heads;
        self.use_positional = m.use_positional;
        self.use_residual = m.use_residual;
        self.share_question_encoder = m.share_question_encoder;
        self.char_width = m.char_width;
        self.selector_kernel = m.selector_kernel;
        self.selector_filters = m.selector_filters;
        self.gru_hidden = m.gru_hidden;
        self.max_span_len = m.max_span_len;
        self.decode = m.decode;
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let err = |m: &str| Err(CfqaError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return err("gamma must lie in [0, 1]");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || self.eps <= 0.0 {
            return err("rho must lie in (0, 1) and eps must be positive");
        }
        if self.batch_size == 0 || self.k_initial == 0 || self.threads == 0 {
            return err("batch_size, k_initial and threads must be positive");
        }
        if self.max_state_tokens < 2 {
            return err("max_state_tokens must be at least 2");
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CfqaError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CfqaError::io(path, e))?;
        Self::parse(&text)
    }

    /// Override one key; the value is read according to the key's type.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self).expect("config serializes") else {
            unreachable!("config is a struct");
        };
        let current = map
            .get(key)
            .ok_or_else(|| CfqaError::Config(format!("unknown config key `{key}`")))?;
        let bad = || CfqaError::Config(format!("invalid value `{raw}` for `{key}`"));
        let value = match current {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_f64() => {
                let x: f64 = raw.parse().map_err(|_| bad())?;
                Value::from(x)
            }
            Value::Number(_) => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
            _ if raw.is_empty() || raw == "none" => Value::Null,
            _ => Value::String(raw.to_string()),
        };
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| CfqaError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// The resolved configuration as `key = value` text, keys sorted.
    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct");
        };
        let map: Map<String, Value> = map;
        let mut out = String::new();
        for (k, v) in &map {
            let v = match v {
                Value::Null => "none".to_string(),
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
