//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use beagle::models::ModelConfig;
use beagle::specdec::{Mode, SdConfig};
use beagle::train::target::TargetTrainConfig;
use beagle::train::TrainConfig;

use crate::UsageError;

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("`{s}` is not a valid {}", stringify!($t)))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, String);

impl Value for Option<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl Value for Mode {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Mode::Greedy),
            "sampling" => Ok(Mode::Sampling),
            _ => Err(format!("`{s}` is not a decoding mode (greedy or sampling)")),
        }
    }
    fn show(&self) -> String {
        match self {
            Mode::Greedy => "greedy".into(),
            Mode::Sampling => "sampling".into(),
        }
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident: $t:ty = $default:expr;)*) => {
        /// Every setting of a run. Keys match field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$t as Value>::parse_value(value).map_err(|e| format!("{key}: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key `{key}`; known keys: {}", Self::KEYS.join(", "))),
                }
                Ok(())
            }

            /// One `key = value` line per setting, in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($name), Value::show(&self.$name));)*
                s
            }
        }
    };
}

run_config! {
    /// Training text, raw bytes.
    corpus: String = "corpus.txt".into();
    /// Target checkpoint.
    target: String = "target.ckpt".into();
    /// Draft checkpoint; rewritten after every epoch.
    draft: String = "draft.ckpt".into();
    /// Draft metric log.
    log: String = "draft_train.csv".into();
    /// Target metric log.
    target_log: String = "target_train.csv".into();
    /// Precomputed target outputs; empty to run the target per batch.
    state_cache: String = String::new();
    d: usize = 128;
    heads: usize = 4;
    target_layers: usize = 4;
    t_max: usize = 512;
    /// Bytes per training chunk.
    context: usize = 128;
    /// Fraction of chunks held out for validation.
    holdout: f64 = 0.05;
    /// Keep only this many chunks; 0 keeps all.
    max_chunks: usize = 0;
    target_epochs: usize = 4;
    target_lr: f64 = 3e-3;
    target_batch_size: usize = 16;
    target_warmup: Option<usize> = None;
    target_patience: usize = 1;
    k: usize = 5;
    s: usize = 4;
    epochs_early: usize = 10;
    epochs_late: usize = 10;
    lr: f64 = 3e-5;
    warmup: Option<usize> = None;
    beta1: f64 = 0.9;
    beta2: f64 = 0.95;
    weight_decay: f64 = 0.0;
    grad_clip: f64 = 0.5;
    vloss_coef: f64 = 10.0;
    noise_std: f64 = 0.2;
    batch_size: usize = 8;
    seed: u64 = 0;
    draft_token_queries: bool = false;
    gamma: usize = 5;
    mode: Mode = Mode::Greedy;
    /// Append drafted states to the draft cache while drafting.
    concat: bool = true;
    max_tokens: usize = 64;
    stop_at_eos: bool = true;
    /// Held-out prompts decoded after every draft epoch.
    val_prompts: usize = 8;
    val_tokens: usize = 32;
    prompt_len: usize = 16;
}

impl RunConfig {
    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), UsageError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| UsageError(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`, then `BEAGLE_SEED`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, UsageError> {
        let mut c = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| UsageError(format!("--set expects key=value, got `{o}`")))?;
            c.set(k.trim(), v.trim()).map_err(UsageError)?;
        }
        if let Ok(s) = std::env::var("BEAGLE_SEED") {
            c.seed = s.trim().parse().map_err(|_| UsageError(format!("BEAGLE_SEED `{s}` is not an integer")))?;
        }
        Ok(c)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            target_layers: self.target_layers,
            t_max: self.t_max,
            vocab: beagle::data::VOCAB_SIZE,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            steps: self.s,
            epochs_early: self.epochs_early,
            epochs_late: self.epochs_late,
            lr: self.lr,
            warmup: self.warmup,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            vloss_coef: self.vloss_coef,
            noise_std: self.noise_std,
            batch_size: self.batch_size,
            seed: self.seeds().noise,
            draft_token_queries: self.draft_token_queries,
        }
    }

    pub fn target_train(&self) -> TargetTrainConfig {
        TargetTrainConfig {
            epochs: self.target_epochs,
            batch_size: self.target_batch_size,
            lr: self.target_lr,
            warmup: self.target_warmup,
            grad_clip: 1.0,
            weight_decay: 0.0,
            patience: self.target_patience,
        }
    }

    pub fn sd(&self) -> SdConfig {
        SdConfig { gamma: self.gamma, mode: self.mode, concat_draft_states: self.concat, stop_at_eos: self.stop_at_eos }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds { data: self.seed, init: self.seed.wrapping_add(1), noise: self.seed.wrapping_add(2), sampling: self.seed.wrapping_add(3) }
    }
}

/// One seed per random subsystem, all derived from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub noise: u64,
    pub sampling: u64,
}

impl std::fmt::Display for Seeds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "data={} init={} noise={} sampling={}", self.data, self.init, self.noise, self.sampling)
    }
}
