use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::RnnVariant;
use crate::peft::FreezeMode;

/// Fine-tuning method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Adapter,
    Prompt,
    Rnn(RnnVariant),
}

impl Method {
    /// `(epochs, learning rate)` used when presets are requested.
    pub fn preset(self) -> (usize, f64) {
        match self {
            Method::Full => (5, 2e-5),
            Method::Adapter => (10, 1e-3),
            Method::Prompt => (10, 1e-4),
            Method::Rnn(_) => (24, 1e-3),
        }
    }

    pub fn freeze_mode(self) -> FreezeMode {
        match self {
            Method::Full | Method::Rnn(_) => FreezeMode::Full,
            Method::Adapter => FreezeMode::Adapter,
            Method::Prompt => FreezeMode::Prompt,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Full => f.write_str("full"),
            Method::Adapter => f.write_str("adapter"),
            Method::Prompt => f.write_str("prompt"),
            Method::Rnn(v) => write!(f, "rnn:{v}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `full`, `adapter`, `prompt`, `rnn` (plain Bi-LSTM) or `rnn:<variant>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "adapter" => Ok(Method::Adapter),
            "prompt" => Ok(Method::Prompt),
            "rnn" => Ok(Method::Rnn(RnnVariant::Bilstm)),
            _ => match s.strip_prefix("rnn:") {
                Some(v) => Ok(Method::Rnn(v.parse()?)),
                None => Err(Error::Config(format!("unknown method {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(method: Method, seed: u64) -> Self {
        let (epochs, base_lr) = method.preset();
        Self {
            method,
            epochs,
            base_lr,
            batch_size: 64,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: None,
            seed,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.base_lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`; steps past
/// the end give 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step >= total_steps {
        return if total_steps == 0 { base_lr } else { 0.0 };
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Linear warmup over `warmup` steps followed by [`cosine_lr`] over the rest.
pub fn scheduled_lr(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total_steps.saturating_sub(warmup), base_lr)
}
