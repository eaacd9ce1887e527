//! Pretrain, adapter-tune and evaluate on the synthetic corpus, printing
//! timings and gold-set metrics.

use std::time::Instant;

use clinpeft_core::data::{
    holdout_positives, pretraining_corpus, synth_corpus, SynthOptions, TemplateSet, TermList,
    HOLDOUT_TERMS,
};
use clinpeft_core::eval::evaluate;
use clinpeft_core::models::{Checkpoint, EncoderConfig, EncoderModel, Model};
use clinpeft_core::pipeline::{
    build_vocab, encode_all, finetune, negation_holdout, negation_pool, to_samples, unk_rate,
    FinetuneOptions,
};
use clinpeft_core::training::{pretrain_mlm, Method, PretrainConfig, TrainConfig};
use rand::SeedableRng;

fn main() -> clinpeft_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(2000, |s| s.parse().unwrap());
    let method: Method = args
        .get(2)
        .map_or("adapter".into(), |s| s.clone())
        .parse()?;
    let seed = 0;
    let terms = TermList::standard();
    let templates = TemplateSet::standard();
    let split = synth_corpus(seed, &SynthOptions::default(), &terms);
    let pre = pretraining_corpus(seed, 20_000, &terms);
    let vocab = build_vocab(
        split
            .train
            .iter()
            .map(|r| r.text.as_str())
            .chain(pre.iter().map(String::as_str)),
    );
    println!(
        "vocab {} unk(test) {:.4}",
        vocab.len(),
        unk_rate(&vocab, &split.test)
    );

    let env = |k: &str| std::env::var(k).ok();
    let mut pcfg = PretrainConfig {
        steps,
        ..Default::default()
    };
    if let Some(v) = env("PT_BS") {
        pcfg.batch_size = v.parse().unwrap();
    }
    if let Some(v) = env("PT_LR") {
        pcfg.lr = v.parse().unwrap();
    }
    let t = Instant::now();
    let mut enc = EncoderModel::new(
        EncoderConfig::tiny(vocab.len()),
        &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
    )?;
    let out = pretrain_mlm(
        &mut enc,
        &encode_all(&vocab, pre.iter().map(String::as_str)),
        &pcfg,
    )?;
    let h = &out.history;
    if !h.is_empty() {
        let first: f64 =
            h[..10.min(h.len())].iter().map(|r| r.loss).sum::<f64>() / 10f64.min(h.len() as f64);
        let last: f64 = h[h.len().saturating_sub(50)..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / 50f64.min(h.len() as f64);
        println!(
            "pretrain {steps} steps: {:?}, loss {first:.3} -> {last:.3}",
            t.elapsed()
        );
    }
    let ckpt = Checkpoint {
        model: Model::Encoder(enc),
        vocab: vocab.tokens().to_vec(),
    };

    let t = Instant::now();
    let mut cfg = TrainConfig::preset(method, seed);
    if let Some(e) = args.get(3) {
        cfg.epochs = e.parse().unwrap();
    }
    let neg: usize = args.get(4).map_or(0, |s| s.parse().unwrap());
    let opts = FinetuneOptions {
        runs: 1,
        negation_aug: neg,
        ..Default::default()
    };
    let res = finetune(
        Some(&ckpt),
        &vocab,
        &split.train,
        &cfg,
        &opts,
        &terms,
        &templates,
    )?;
    println!("finetune {method}: {:?}", t.elapsed());
    for r in &res.best.outcome.history {
        println!("  epoch {} loss {:.4}", r.epoch, r.loss);
    }
    let test = to_samples(&vocab, &split.test);
    let inputs: Vec<Vec<usize>> = test.iter().map(|s| s.ids.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let rep = evaluate(&res.best.model, &inputs, &labels)?;
    println!("gold: {:?} macroF {:.4}", rep.counts, rep.macro_avg.f1);
    let preds = clinpeft_core::eval::predict(&res.best.model, &inputs, 64)?;
    for (i, r) in split.test.iter().enumerate() {
        if preds[i] != labels[i] {
            println!("  miss [{:?}] {}", r.label, r.text);
        }
    }
    let hold = to_samples(
        &vocab,
        &holdout_positives(seed, 200, &terms, &HOLDOUT_TERMS),
    );
    let inputs: Vec<Vec<usize>> = hold.iter().map(|s| s.ids.clone()).collect();
    let labels: Vec<usize> = hold.iter().map(|s| s.label).collect();
    let rep = evaluate(&res.best.model, &inputs, &labels)?;
    println!("holdout positives accuracy {:.3}", rep.accuracy);
    let negs = to_samples(
        &vocab,
        &negation_holdout(&negation_pool(&terms), &templates, neg, 100, seed)?,
    );
    let inputs: Vec<Vec<usize>> = negs.iter().map(|s| s.ids.clone()).collect();
    let labels: Vec<usize> = negs.iter().map(|s| s.label).collect();
    let rep = evaluate(&res.best.model, &inputs, &labels)?;
    println!("held-out negations accuracy {:.3}", rep.accuracy);
    Ok(())
}
