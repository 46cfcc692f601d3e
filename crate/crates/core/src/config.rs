//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [model]
//! d_model = 128
//! # full-line comments start with '#'
//! ```
//!
//! Every key has a default; unknown sections or keys are rejected.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

impl Value for usize {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("expected a finite number, got `{s}`"))
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(format!("expected true or false, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! section {
    ($(#[$meta:meta])* $name:ident, $title:literal { $($(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $($field: $default,)* }
            }
        }

        impl $name {
            const TITLE: &'static str = $title;

            fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as Value>::parse_value(value).map_err(|msg| ConfigError::BadValue {
                            key: format!("{}.{}", $title, key),
                            msg,
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(format!("{}.{}", $title, key))),
                }
                Ok(())
            }

            fn write(&self, out: &mut String) {
                writeln!(out, "[{}]", $title).unwrap();
                $(writeln!(out, "{} = {}", stringify!($field), Value::render(&self.$field)).unwrap();)*
            }
        }
    };
}

section!(
    /// Encoder dimensions shared by the SMILES, PV and fusion stacks.
    ModelConfig, "model" {
        d_model: usize = 128,
        layers: usize = 2,
        heads: usize = 4,
        d_ff: usize = 256,
        /// Longest model-ready SMILES sequence, specials included.
        max_len: usize = 128,
        /// Hidden width of fine-tuning heads; 0 means `d_model`.
        head_hidden: usize = 0,
        init_std: f64 = 0.02,
    }
);

section!(TokenizerConfig, "tokenizer" {
    budget: usize = 300,
});

section!(PropertyConfig, "properties" {
    /// `builtin` or a comma-separated list of property names.
    names: String = "builtin".to_string(),
    mask_rate: f64 = 0.5,
});

section!(PretrainConfig, "pretrain" {
    batch: usize = 32,
    steps: u64 = 1000,
    warmup: u64 = 50,
    lr_peak: f64 = 1e-4,
    lr_min: f64 = 1e-5,
    weight_decay: f64 = 0.02,
    queue: usize = 4096,
    ema: f64 = 0.995,
    alpha: f64 = 0.4,
    /// Steps over which alpha ramps from 0; 0 means one epoch.
    alpha_ramp: u64 = 0,
    temperature: f64 = 0.07,
    w_contrastive: f64 = 1.0,
    w_nwp: f64 = 1.0,
    w_npp: f64 = 1.0,
    w_spm: f64 = 1.0,
    checkpoint_every: u64 = 0,
});

section!(FinetuneConfig, "finetune" {
    /// `regression` or `classification`.
    task: String = "regression".to_string(),
    batch: usize = 16,
    epochs: usize = 20,
    warmup: u64 = 10,
    lr_peak: f64 = 1e-4,
    lr_min: f64 = 1e-5,
    weight_decay: f64 = 0.02,
});

section!(ReactionConfig, "reaction" {
    /// `forward` or `retro`.
    direction: String = "forward".to_string(),
    augment: f64 = 0.5,
    batch: usize = 16,
    epochs: usize = 50,
    warmup: u64 = 20,
    lr_peak: f64 = 1e-4,
    lr_min: f64 = 1e-5,
    weight_decay: f64 = 0.02,
    beam: usize = 5,
});

section!(GenerateConfig, "generate" {
    /// `greedy` or `stochastic`.
    mode: String = "greedy".to_string(),
    temperature: f64 = 1.0,
    n: usize = 1,
    max_len: usize = 128,
});

section!(RunSection, "run" {
    seed: u64 = 0,
});

section!(
    /// Input files; empty means unset. Command-line flags take precedence.
    PathsConfig, "paths" {
        corpus: String = String::new(),
        properties: String = String::new(),
        vocab: String = String::new(),
    }
);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub properties: PropertyConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub reaction: ReactionConfig,
    pub generate: GenerateConfig,
    pub run: RunSection,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Overlays the keys present in `text` onto `self`, then validates.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        let cfg = self;
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |msg: &str| ConfigError::Syntax {
                line: n + 1,
                msg: msg.to_string(),
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let sec = section.as_deref().ok_or_else(|| syntax("key outside of any section"))?;
            cfg.set(&format!("{sec}.{}", key.trim()), value.trim())?;
        }
        cfg.validate()
    }

    /// Sets `section.key` to `value`.
    pub fn set(&mut self, path: &str, value: &str) -> Result<(), ConfigError> {
        let (sec, key) = path.split_once('.').ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
        match sec {
            ModelConfig::TITLE => self.model.set(key, value),
            TokenizerConfig::TITLE => self.tokenizer.set(key, value),
            PropertyConfig::TITLE => self.properties.set(key, value),
            PretrainConfig::TITLE => self.pretrain.set(key, value),
            FinetuneConfig::TITLE => self.finetune.set(key, value),
            ReactionConfig::TITLE => self.reaction.set(key, value),
            GenerateConfig::TITLE => self.generate.set(key, value),
            RunSection::TITLE => self.run.set(key, value),
            PathsConfig::TITLE => self.paths.set(key, value),
            _ => Err(ConfigError::UnknownKey(path.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", m.d_model, m.heads));
        }
        if m.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if m.max_len < 3 {
            return bad("max_len must allow [CLS], one token and [SEP]".into());
        }
        if m.init_std <= 0.0 {
            return bad("init_std must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.properties.mask_rate) {
            return bad("mask_rate must lie in [0, 1]".into());
        }
        let p = &self.pretrain;
        if p.batch < 2 {
            return bad("pretrain.batch must be at least 2".into());
        }
        for (name, v) in [("ema", p.ema), ("alpha", p.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("pretrain.{name} must lie in [0, 1]"));
            }
        }
        if !(0.001..=0.5).contains(&p.temperature) {
            return bad("pretrain.temperature must lie in [0.001, 0.5]".into());
        }
        for (sec, peak, min) in [
            ("pretrain", p.lr_peak, p.lr_min),
            ("finetune", self.finetune.lr_peak, self.finetune.lr_min),
            ("reaction", self.reaction.lr_peak, self.reaction.lr_min),
        ] {
            if peak <= 0.0 || min < 0.0 || min > peak {
                return bad(format!("{sec}: need 0 <= lr_min <= lr_peak, lr_peak > 0"));
            }
        }
        if !["regression", "classification"].contains(&self.finetune.task.as_str()) {
            return bad(format!("unknown finetune.task `{}`", self.finetune.task));
        }
        if self.finetune.batch == 0 || self.reaction.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !["forward", "retro"].contains(&self.reaction.direction.as_str()) {
            return bad(format!("unknown reaction.direction `{}`", self.reaction.direction));
        }
        if !(0.0..=1.0).contains(&self.reaction.augment) {
            return bad("reaction.augment must lie in [0, 1]".into());
        }
        if self.reaction.beam == 0 {
            return bad("reaction.beam must be positive".into());
        }
        if !["greedy", "stochastic"].contains(&self.generate.mode.as_str()) {
            return bad(format!("unknown generate.mode `{}`", self.generate.mode));
        }
        if self.generate.temperature <= 0.0 {
            return bad("generate.temperature must be positive".into());
        }
        if self.generate.n == 0 {
            return bad("generate.n must be positive".into());
        }
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        if self.model.head_hidden == 0 {
            self.model.d_model
        } else {
            self.model.head_hidden
        }
    }
}

impl std::fmt::Display for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = String::new();
        self.model.write(&mut out);
        self.tokenizer.write(&mut out);
        self.properties.write(&mut out);
        self.pretrain.write(&mut out);
        self.finetune.write(&mut out);
        self.reaction.write(&mut out);
        self.generate.write(&mut out);
        self.run.write(&mut out);
        self.paths.write(&mut out);
        f.write_str(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.pretrain.lr_peak = 3.3e-4;
        cfg.properties.names = "MW,#atom".into();
        let back = RunConfig::parse(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::parse("[model]\nwidth = 3\n"),
            Err(ConfigError::UnknownKey(k)) if k == "model.width"
        ));
        assert!(matches!(RunConfig::parse("[nope]\nx=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("d_model = 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            RunConfig::parse("[model]\nd_model = 130\nheads = 4"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::parse("[pretrain]\nbatch = x"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::parse("# top\n[run]\nseed = 7\n").unwrap();
        assert_eq!(cfg.run.seed, 7);
        cfg.set("pretrain.steps", "12").unwrap();
        assert_eq!(cfg.pretrain.steps, 12);
        cfg.apply("[generate]\nn = 4\n").unwrap();
        assert_eq!((cfg.generate.n, cfg.run.seed), (4, 7));
    }
}
