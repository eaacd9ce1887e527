use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Transformer encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl EncoderConfig {
    /// 4 layers, width 128, 4 heads, FFN 512, 64 positions.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_len: 64,
            dropout_rate: 0.1,
            activation: Activation::Relu,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    /// BERT-base shaped: 12 layers, width 768, 12 heads, FFN 3072.
    pub fn base_like() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 30_000,
            max_len: 512,
            ..Self::tiny(0)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "base-like" => Ok(Self {
                vocab_size,
                ..Self::base_like()
            }),
            other => Err(Error::Config(format!("unknown encoder preset {other}"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Which recurrent baseline to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnVariant {
    Bilstm,
    CnnBilstm,
    CnnBilstmAtt,
}

impl std::str::FromStr for RnnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Self::Bilstm),
            "cnn_bilstm" | "cnn-bilstm" => Ok(Self::CnnBilstm),
            "cnn_bilstm_att" | "cnn-bilstm-att" => Ok(Self::CnnBilstmAtt),
            other => Err(Error::Config(format!("unknown rnn variant {other}"))),
        }
    }
}

impl std::fmt::Display for RnnVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bilstm => "bilstm",
            Self::CnnBilstm => "cnn_bilstm",
            Self::CnnBilstmAtt => "cnn_bilstm_att",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub variant: RnnVariant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub conv_kernel: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl RnnConfig {
    pub fn new(variant: RnnVariant, vocab_size: usize) -> Self {
        Self {
            variant,
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            conv_kernel: 3,
            n_heads: 4,
            max_len: 64,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("rnn dimensions must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.variant == RnnVariant::CnnBilstmAtt
            && !(2 * self.hidden_dim).is_multiple_of(self.n_heads.max(1))
        {
            return Err(Error::Config(
                "2·hidden_dim must be divisible by n_heads".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let t = EncoderConfig::tiny(8000);
        assert_eq!(
            (t.n_layers, t.d_model, t.n_heads, t.d_ff, t.max_len),
            (4, 128, 4, 512, 64)
        );
        let b = EncoderConfig::base_like();
        assert_eq!(
            (
                b.n_layers,
                b.d_model,
                b.n_heads,
                b.d_ff,
                b.vocab_size,
                b.max_len
            ),
            (12, 768, 12, 3072, 30_000, 512)
        );
        assert_eq!(b.d_head(), 64);
        t.validate().unwrap();
        b.validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut c = EncoderConfig::tiny(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            RnnVariant::Bilstm,
            RnnVariant::CnnBilstm,
            RnnVariant::CnnBilstmAtt,
        ] {
            assert_eq!(v.to_string().parse::<RnnVariant>().unwrap(), v);
        }
        assert!("gru".parse::<RnnVariant>().is_err());
    }
}
