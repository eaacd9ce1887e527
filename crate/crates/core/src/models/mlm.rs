use rand::seq::index::sample;
use rand::Rng;

use super::EncoderModel;
use crate::data::{MASK_ID, NUM_SPECIAL};
use crate::error::Result;
use crate::nn::Ctx;
use crate::tensor::Var;

/// Corruption of a batch for masked-token reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Input sequences after corruption (already truncated).
    pub inputs: Vec<Vec<usize>>,
    /// Packed row of every selected position.
    pub rows: Vec<usize>,
    /// Original token at every selected position.
    pub targets: Vec<usize>,
}

/// Selects `round(mask_rate · maskable)` non-special positions; each is
/// replaced by `[MASK]` (80%), a random non-special token (10%) or kept
/// (10%). Returns `None` when nothing can be selected.
pub fn mask_tokens(
    batch: &[Vec<usize>],
    mask_rate: f64,
    vocab_size: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Option<MaskedBatch> {
    let mut inputs: Vec<Vec<usize>> = batch
        .iter()
        .map(|s| s[..s.len().min(max_len)].to_vec())
        .collect();
    let mut candidates = Vec::new();
    let mut offset = 0;
    for (si, seq) in inputs.iter().enumerate() {
        for (pi, &tok) in seq.iter().enumerate() {
            if tok >= NUM_SPECIAL {
                candidates.push((si, pi, offset + pi));
            }
        }
        offset += seq.len();
    }
    let count = (mask_rate * candidates.len() as f64).round() as usize;
    if count == 0 {
        return None;
    }
    let mut chosen = sample(rng, candidates.len(), count).into_vec();
    chosen.sort_unstable();
    let mut rows = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for c in chosen {
        let (si, pi, row) = candidates[c];
        targets.push(inputs[si][pi]);
        rows.push(row);
        let u: f64 = rng.gen();
        if u < 0.8 {
            inputs[si][pi] = MASK_ID;
        } else if u < 0.9 && vocab_size > NUM_SPECIAL {
            inputs[si][pi] = rng.gen_range(NUM_SPECIAL..vocab_size);
        }
    }
    Some(MaskedBatch {
        inputs,
        rows,
        targets,
    })
}

/// Mean cross-entropy of reconstructing the selected tokens.
pub fn mlm_loss<'t>(
    model: &EncoderModel,
    ctx: &Ctx<'t, '_>,
    masked: &MaskedBatch,
) -> Result<Var<'t>> {
    let out = model.forward(ctx, &masked.inputs)?;
    model
        .mlm_logits(ctx, out.states, &masked.rows)?
        .cross_entropy(&masked.targets)
}
