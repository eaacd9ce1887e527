//! Encoder (MLM pretraining and classification) and recurrent baselines.

pub mod checkpoint;
mod config;
mod encoder;
mod mlm;
mod rnn;

pub use checkpoint::{Checkpoint, ModelSpec};
pub use config::{EncoderConfig, RnnConfig, RnnVariant};
pub use encoder::{
    backbone_specs, encoder_layer, head_specs, pack, EncoderModel, EncoderOutput, LayerVars,
    TOKEN_EMBEDDING,
};
pub use mlm::{mask_tokens, mlm_loss, MaskedBatch};
pub use rnn::{project_embeddings, rnn_specs, RnnModel};

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Var;

/// Any binary classifier the training loop can drive.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Encoder(EncoderModel),
    Rnn(RnnModel),
}

impl Model {
    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Encoder(m) => &m.store,
            Model::Rnn(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Encoder(m) => &mut m.store,
            Model::Rnn(m) => &mut m.store,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            Model::Encoder(m) => m.config.dropout_rate,
            Model::Rnn(m) => m.config.dropout_rate,
        }
    }

    /// `[B, 2]` logits for a batch of token-id sequences.
    pub fn classify<'t>(&self, ctx: &Ctx<'t, '_>, batch: &[Vec<usize>]) -> Result<Var<'t>> {
        match self {
            Model::Encoder(m) => m.classify(ctx, batch),
            Model::Rnn(m) => m.classify(ctx, batch),
        }
    }
}
