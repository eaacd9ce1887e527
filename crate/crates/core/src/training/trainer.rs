use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{scheduled_lr, TrainConfig};
use super::optim::{clip_grad_norm, AdamW};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::models::Model;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tape;
use crate::util::{checksum_f64, write_atomic};

/// One tokenized, labelled example (label 1 = positive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    pub trainable_checksum: String,
    pub frozen_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |h| h.loss)
    }
}

/// SHA-256 of the values of trainable (or frozen) parameters in store order.
pub fn param_checksum(store: &ParamStore, trainable: bool) -> String {
    checksum_f64(
        store
            .iter()
            .filter(|(_, p)| p.trainable() == trainable)
            .map(|(_, p)| p.tensor.values()),
    )
}

/// Mini-batch training with AdamW and a cosine schedule. Runs exactly
/// `epochs · ⌈N / batch_size⌉` steps; the last partial batch is kept and
/// the order is reshuffled every epoch.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let total = cfg.total_steps(data.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let rate = model.dropout_rate();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = scheduled_lr(step, total, cfg.warmup_steps, cfg.base_lr);
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].ids.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let (loss, mut grads) = {
                let tape = Tape::new();
                let ctx = Ctx::train(&tape, model.store(), rate, &mut dropout_rng);
                let loss = model.classify(&ctx, &batch)?.cross_entropy(&labels)?;
                let mut g = tape.backward(loss)?;
                (loss.value()[0], ctx.collect(&mut g))
            };
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            opt.step(model.store_mut(), &grads, lr)?;
            step += 1;
            epoch_loss += loss;
            step_losses.push(loss);
        }
        let rec = HistoryRecord {
            epoch,
            step,
            loss: epoch_loss / cfg.steps_per_epoch(data.len()) as f64,
            lr,
            trainable_checksum: param_checksum(model.store(), true),
            frozen_checksum: param_checksum(model.store(), false),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.3e} step {step}",
            rec.loss,
            rec.lr
        );
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        step_losses,
    })
}

pub fn write_history<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?;
        let _ = writeln!(buf, "{line}");
    }
    write_atomic(path, buf.as_bytes())
}

/// Seeded split into (train, validation); the validation part holds
/// `round(frac · N)` samples, leaving at least one for training.
pub fn split_validation(
    data: Vec<Sample>,
    frac: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config(format!(
            "validation fraction {frac} outside [0, 1)"
        )));
    }
    let n_valid = ((frac * data.len() as f64).round() as usize).min(data.len().saturating_sub(1));
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid_set: std::collections::HashSet<usize> = idx[..n_valid].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, s) in data.into_iter().enumerate() {
        if valid_set.contains(&i) {
            valid.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, valid))
}

/// What selection needs to know about one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub valid_macro_f1: f64,
    pub final_loss: f64,
}

/// Index of the run with the highest validation macro-F, then the lowest
/// final loss, then the lowest seed.
pub fn select_best(runs: &[RunSummary]) -> Option<usize> {
    (0..runs.len()).min_by(|&a, &b| {
        let (x, y) = (&runs[a], &runs[b]);
        y.valid_macro_f1
            .total_cmp(&x.valid_macro_f1)
            .then(x.final_loss.total_cmp(&y.final_loss))
            .then(x.seed.cmp(&y.seed))
    })
}

pub struct BestOf {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub valid_report: Option<MetricsReport>,
    pub best: usize,
    pub runs: Vec<RunSummary>,
}

/// Trains `n_runs` models with seeds `seed, seed+1, …` (each built by
/// `build(seed)`) and keeps the best on the validation set.
pub fn train_best_of(
    n_runs: usize,
    mut build: impl FnMut(u64) -> Result<Model>,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<BestOf> {
    if n_runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    let inputs: Vec<Vec<usize>> = valid_set.iter().map(|s| s.ids.clone()).collect();
    let labels: Vec<usize> = valid_set.iter().map(|s| s.label).collect();
    let mut best: Option<(Model, TrainOutcome, Option<MetricsReport>)> = None;
    let mut runs = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let seed = cfg.seed + r as u64;
        let mut model = build(seed)?;
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let outcome = train(&mut model, train_set, &run_cfg)?;
        let report = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, &inputs, &labels)?)
        };
        let summary = RunSummary {
            seed,
            valid_macro_f1: report.map_or(0.0, |m| m.macro_avg.f1),
            final_loss: outcome.final_loss(),
        };
        log::info!(
            "run {r} (seed {seed}): valid macro-F {:.4}, final loss {:.5}",
            summary.valid_macro_f1,
            summary.final_loss
        );
        runs.push(summary);
        if select_best(&runs) == Some(r) {
            best = Some((model, outcome, report));
        }
    }
    let (model, outcome, valid_report) = best.expect("at least one run");
    Ok(BestOf {
        model,
        outcome,
        valid_report,
        best: select_best(&runs).expect("non-empty"),
        runs,
    })
}
