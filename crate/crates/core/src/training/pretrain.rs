use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::scheduled_lr;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::models::{mask_tokens, mlm_loss, EncoderModel};
use crate::nn::Ctx;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 100,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainRecord>,
    /// Batches without a maskable position; they consume a step but no update.
    pub skipped: usize,
}

/// Masked-token pretraining over `corpus` (token-id sequences starting with
/// `[CLS]`). Batches walk a reshuffled pass over the corpus.
pub fn pretrain_mlm(
    model: &mut EncoderModel,
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    if !(cfg.mask_rate > 0.0 && cfg.mask_rate < 1.0) {
        return Err(Error::Config(format!(
            "mask rate {} outside (0, 1)",
            cfg.mask_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    let (vocab, max_len, rate) = (
        model.config.vocab_size,
        model.config.max_len,
        model.config.dropout_rate,
    );
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let Some(masked) = mask_tokens(&batch, cfg.mask_rate, vocab, max_len, &mut mask_rng) else {
            skipped += 1;
            continue;
        };
        let lr = scheduled_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr);
        let (loss, grads) = {
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, &model.store, rate, &mut dropout_rng);
            let loss = mlm_loss(model, &ctx, &masked)?;
            let mut g = tape.backward(loss)?;
            (loss.value()[0], ctx.collect(&mut g))
        };
        opt.step(&mut model.store, &grads, lr)?;
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4} lr {lr:.3e}");
        }
        history.push(PretrainRecord {
            step,
            loss,
            lr,
            masked: masked.rows.len(),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} pretraining batches had nothing to mask");
    }
    Ok(PretrainOutcome { history, skipped })
}
