//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured value, tolerance and runtime; the test fails if any
//! criterion does.

use std::io::Write;
use std::time::{Duration, Instant};

use clinpeft_core::data::{
    holdout_positives, pretraining_corpus, synth_corpus, NoteRecord, SynthOptions, TemplateSet,
    TermList, Vocab, HOLDOUT_TERMS,
};
use clinpeft_core::eval::{evaluate, metrics, ConfusionCounts, MetricsReport};
use clinpeft_core::models::{Checkpoint, EncoderConfig, EncoderModel, Model, RnnVariant};
use clinpeft_core::nn::Ctx;
use clinpeft_core::peft::{attach_prompts, insert_adapters, layout_counts, FreezeMode, PeftState};
use clinpeft_core::pipeline::{
    build_vocab, encode_all, finetune, negation_holdout, negation_pool, prepare_model, to_samples,
    FinetuneOptions, FinetuneResult,
};
use clinpeft_core::tensor::Tape;
use clinpeft_core::training::{
    pretrain_mlm, train, Method, PretrainConfig, PretrainOutcome, TrainConfig,
};
use clinpeft_core::verify::{run_gradcheck, Component};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

#[derive(Default)]
struct Ledger {
    rows: Vec<Outcome>,
}

impl Ledger {
    fn record(
        &mut self,
        id: usize,
        name: &'static str,
        passed: bool,
        detail: String,
        start: Instant,
        budget_secs: u64,
    ) {
        let elapsed = start.elapsed();
        let budget = Duration::from_secs(budget_secs);
        let row = Outcome {
            id,
            name,
            passed: passed && elapsed <= budget,
            detail,
            elapsed,
            budget,
        };
        // written past the test harness capture so the lines always show
        let _ = writeln!(std::io::stderr(), "{}", line(&row));
        self.rows.push(row);
    }
}

fn line(o: &Outcome) -> String {
    format!(
        "criterion {:>2} [{}] {}: {} ({:.1}s, budget {}s)",
        o.id,
        if o.passed { "PASS" } else { "FAIL" },
        o.name,
        o.detail,
        o.elapsed.as_secs_f64(),
        o.budget.as_secs()
    )
}

fn logits(m: &EncoderModel, batch: &[Vec<usize>]) -> Vec<f64> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.store);
    m.classify(&ctx, batch).unwrap().value()
}

fn split_xy(vocab: &Vocab, records: &[NoteRecord]) -> (Vec<Vec<usize>>, Vec<usize>) {
    to_samples(vocab, records)
        .into_iter()
        .map(|s| (s.ids, s.label))
        .unzip()
}

fn score(model: &Model, vocab: &Vocab, records: &[NoteRecord]) -> MetricsReport {
    let (x, y) = split_xy(vocab, records);
    evaluate(model, &x, &y).unwrap()
}

/// Confusion rows with the macro-F and the "Recall" column of the
/// reference results they must reproduce.
const REFERENCE: [(&str, [u64; 4], f64, f64); 11] = [
    ("RNN / Bi-LSTM", [939, 30, 0, 31], 0.83, 0.75),
    ("RNN / CNN-Bi-LSTM", [925, 44, 1, 30], 0.77, 0.70),
    ("RNN / CNN-Bi-LSTM-Att", [931, 38, 1, 30], 0.79, 0.72),
    ("BERT / Complete Fine-Tuning", [944, 25, 1, 30], 0.84, 0.77),
    ("BERT / Adapter-Tuning", [965, 4, 0, 31], 0.97, 0.94),
    ("BERT / Prompt-Tuning", [947, 22, 1, 30], 0.86, 0.79),
    (
        "BioBERT / Complete Fine-Tuning",
        [954, 15, 0, 31],
        0.90,
        0.84,
    ),
    ("BioBERT / Adapter-Tuning", [956, 13, 1, 30], 0.90, 0.85),
    ("BioBERT / Prompt-Tuning", [959, 10, 1, 30], 0.92, 0.87),
    (
        "BERT + Negation / Adapter-Tuning-500",
        [966, 3, 1, 30],
        0.97,
        0.95,
    ),
    (
        "BERT + Negation / Adapter-Tuning-250",
        [964, 5, 1, 30],
        0.95,
        0.93,
    ),
];

fn metrics_oracle(ledger: &mut Ledger) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for (name, [tn, fp, fn_, tp], f, p) in REFERENCE {
        let r = metrics(&ConfusionCounts::new(tn, fp, fn_, tp)).unwrap();
        let err = (r.macro_avg.f1 - f)
            .abs()
            .max((r.macro_avg.precision - p).abs());
        worst = worst.max(err);
        if err > 0.005 {
            bad.push(name);
        }
    }
    ledger.record(
        1,
        "metrics oracle on 11 reference confusion rows",
        bad.is_empty(),
        format!("worst |macro-F or macro-P - table| = {worst:.4} (tol 0.005), mismatches {bad:?}"),
        start,
        1,
    );
}

fn gradient_checks(ledger: &mut Ledger) {
    let start = Instant::now();
    let checks = run_gradcheck(&Component::ALL, SEED, 1e-4, false).unwrap();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.component.name())
        .collect();
    ledger.record(
        4,
        "finite-difference gradients",
        failed.is_empty() && checks.len() == Component::ALL.len(),
        format!(
            "{} components, worst rel. error {worst:.2e} (tol 1e-4), failed {failed:?}",
            checks.len()
        ),
        start,
        120,
    );
}

fn accounting(ledger: &mut Ledger) {
    let start = Instant::now();
    let config = EncoderConfig::base_like();
    let peft = PeftState {
        reduction_factor: Some(16),
        prompt_length: None,
        freeze: FreezeMode::Adapter,
        train_layer_norm: false,
    };
    let specs = EncoderModel::layout(&config, &peft, true).unwrap();
    let (trainable, total) = layout_counts(&specs, FreezeMode::Adapter, false);
    let oracle = 24 * (768 * 48 + 48 + 48 * 768 + 768) + (768 * 2 + 2);
    let fraction = trainable as f64 / total as f64;
    ledger.record(
        5,
        "base-like adapter parameter accounting",
        trainable == oracle && (0.01..=0.06).contains(&fraction),
        format!("trainable {trainable} (oracle {oracle}) of {total}, fraction {fraction:.4} (range [0.01, 0.06])"),
        start,
        1,
    );
}

fn prefix_contract(ledger: &mut Ledger) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut plain = EncoderModel::new(EncoderConfig::tiny(60), &mut rng).unwrap();
    plain.add_classifier_head(&mut rng).unwrap();
    let batch: Vec<Vec<usize>> = (0..4)
        .map(|i| {
            (0..3 + 2 * i)
                .map(|j| if j == 0 { 2 } else { 4 + (i * 7 + j * 3) % 56 })
                .collect()
        })
        .collect();
    let before = logits(&plain, &batch);

    let mut empty = plain.clone();
    attach_prompts(&mut empty, 0, 0.02, &mut rng).unwrap();
    let bitwise = before
        .iter()
        .zip(logits(&empty, &batch))
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut prompted = plain.clone();
    attach_prompts(&mut prompted, 30, 0.02, &mut rng).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &prompted.store);
    let out = prompted.forward(&ctx, &batch).unwrap();
    let mut probes = 0;
    let mut shapes_ok = true;
    for node in &out.attention {
        for p in tape.attention_probes(*node).unwrap() {
            probes += 1;
            let len = batch[p.segment].len();
            shapes_ok &= p.rows == len && p.cols == len + 30 && p.weights.len() == len * (len + 30);
            for row in p.weights.chunks(p.cols) {
                shapes_ok &= (row.iter().sum::<f64>() - 1.0).abs() < 1e-12;
            }
        }
    }
    let expected = prompted.config.n_layers * prompted.config.n_heads * batch.len();
    ledger.record(
        6,
        "prefix contract",
        bitwise && shapes_ok && probes == expected,
        format!("p=0 bitwise identical: {bitwise}; p=30: {probes}/{expected} probes with L+30 normalized key columns: {shapes_ok}"),
        start,
        10,
    );
}

fn adapter_identity(ledger: &mut Ledger, base: &EncoderModel, vocab: &Vocab, test: &[NoteRecord]) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut m = base.clone();
    m.add_classifier_head(&mut rng).unwrap();
    let (batch, _) = split_xy(vocab, &test[..64]);
    let before = logits(&m, &batch);
    insert_adapters(&mut m, 16, &mut rng).unwrap();
    let after = logits(&m, &batch);
    let diff = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ledger.record(
        2,
        "adapter identity at init on pretrained encoder",
        diff <= 1e-6 && batch.len() == 64,
        format!("max |logit change| over 64 samples = {diff:.2e} (tol 1e-6)"),
        start,
        10,
    );
}

fn freeze_invariance(ledger: &mut Ledger, base: &Model, vocab: &Vocab, train_set: &[NoteRecord]) {
    let start = Instant::now();
    let data = to_samples(vocab, &train_set[..6000]);
    let mut details = Vec::new();
    let mut passed = true;
    for method in [Method::Adapter, Method::Prompt] {
        let mut model = prepare_model(
            method,
            Some(base),
            vocab.len(),
            &FinetuneOptions::default(),
            SEED,
        )
        .unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 60,
            ..TrainConfig::preset(method, SEED)
        };
        let steps = train(&mut model, &data, &cfg).unwrap().step_losses.len();
        let (mut frozen_changed, mut trainable_changed, mut n_frozen) = (0, 0, 0);
        for ((_, a), (_, b)) in before.store().iter().zip(model.store().iter()) {
            let same = a
                .tensor
                .values()
                .iter()
                .zip(b.tensor.values())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if a.trainable() {
                trainable_changed += usize::from(!same);
            } else {
                n_frozen += 1;
                frozen_changed += usize::from(!same);
            }
        }
        passed &= steps == 100 && frozen_changed == 0 && trainable_changed >= 1;
        details.push(format!(
            "{method}: {steps} steps, {frozen_changed}/{n_frozen} frozen tensors changed, {trainable_changed} trainable changed"
        ));
    }
    ledger.record(
        3,
        "freeze invariance after 100 AdamW steps",
        passed,
        details.join("; "),
        start,
        60,
    );
}

struct Corpus {
    terms: TermList,
    templates: TemplateSet,
    train: Vec<NoteRecord>,
    test: Vec<NoteRecord>,
    vocab: Vocab,
    pretrain_ids: Vec<Vec<usize>>,
}

fn corpus() -> Corpus {
    let terms = TermList::standard();
    let split = synth_corpus(SEED, &SynthOptions::default(), &terms);
    let pre = pretraining_corpus(SEED, 20_000, &terms);
    let vocab = build_vocab(
        split
            .train
            .iter()
            .map(|r| r.text.as_str())
            .chain(pre.iter().map(String::as_str)),
    );
    let pretrain_ids = encode_all(&vocab, pre.iter().map(String::as_str));
    Corpus {
        terms,
        templates: TemplateSet::standard(),
        train: split.train,
        test: split.test,
        vocab,
        pretrain_ids,
    }
}

fn pretrain(c: &Corpus) -> (Checkpoint, PretrainOutcome) {
    let mut enc = EncoderModel::new(
        EncoderConfig::tiny(c.vocab.len()),
        &mut ChaCha8Rng::seed_from_u64(SEED),
    )
    .unwrap();
    let cfg = PretrainConfig {
        steps: 2000,
        seed: SEED,
        ..PretrainConfig::default()
    };
    let out = pretrain_mlm(&mut enc, &c.pretrain_ids, &cfg).unwrap();
    let ckpt = Checkpoint {
        model: Model::Encoder(enc),
        vocab: c.vocab.tokens().to_vec(),
    };
    (ckpt, out)
}

fn tune(c: &Corpus, ckpt: &Checkpoint, method: Method, negation_aug: usize) -> FinetuneResult {
    let opts = FinetuneOptions {
        runs: 1,
        negation_aug,
        ..FinetuneOptions::default()
    };
    let cfg = TrainConfig::preset(method, SEED);
    finetune(
        Some(ckpt),
        &c.vocab,
        &c.train,
        &cfg,
        &opts,
        &c.terms,
        &c.templates,
    )
    .unwrap()
}

fn losses_match(a: &[f64], b: &[f64]) -> (bool, f64) {
    let worst = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    (a.len() == b.len() && worst <= 1e-12, worst)
}

#[test]
fn acceptance_criteria() {
    let mut ledger = Ledger::default();
    metrics_oracle(&mut ledger);
    gradient_checks(&mut ledger);
    accounting(&mut ledger);
    prefix_contract(&mut ledger);

    let c7_start = Instant::now();
    let c = corpus();
    let (ckpt, pre_out) = pretrain(&c);
    let pretrain_time = c7_start.elapsed();
    let Model::Encoder(base) = &ckpt.model else {
        unreachable!()
    };
    adapter_identity(&mut ledger, base, &c.vocab, &c.test);
    freeze_invariance(&mut ledger, &ckpt.model, &c.vocab, &c.train);

    let tune_start = Instant::now();
    let adapter = tune(&c, &ckpt, Method::Adapter, 0);
    let adapter_gold = score(&adapter.best.model, &c.vocab, &c.test);
    let lstm = tune(&c, &ckpt, Method::Rnn(RnnVariant::Bilstm), 0);
    let lstm_gold = score(&lstm.best.model, &c.vocab, &c.test);
    let (a_f, l_f) = (adapter_gold.macro_avg.f1, lstm_gold.macro_avg.f1);
    ledger.record(
        7,
        "desk-scale adapter and Bi-LSTM on the synthetic gold set",
        a_f >= 0.95 && l_f >= 0.75,
        format!(
            "adapter macro-F {a_f:.4} (>= 0.95) {:?}; Bi-LSTM macro-F {l_f:.4} (>= 0.75) {:?}",
            adapter_gold.counts, lstm_gold.counts
        ),
        tune_start - pretrain_time,
        900,
    );

    let start = Instant::now();
    let aug = tune(&c, &ckpt, Method::Adapter, 500);
    let aug_gold = score(&aug.best.model, &c.vocab, &c.test);
    let held = negation_holdout(&negation_pool(&c.terms), &c.templates, 500, 100, SEED).unwrap();
    let neg_acc = score(&aug.best.model, &c.vocab, &held).accuracy;
    let drop = a_f - aug_gold.macro_avg.f1;
    ledger.record(
        8,
        "negation augmentation (500 samples)",
        neg_acc >= 0.90 && drop <= 0.03 && held.len() == 100,
        format!(
            "held-out negation accuracy {neg_acc:.3} (>= 0.90) on {} sentences; gold macro-F {:.4}, drop {drop:.4} (<= 0.03)",
            held.len(),
            aug_gold.macro_avg.f1
        ),
        start,
        900,
    );

    let start = Instant::now();
    let unseen = holdout_positives(SEED, 200, &c.terms, &HOLDOUT_TERMS);
    let unseen_acc = score(&adapter.best.model, &c.vocab, &unseen).accuracy;
    ledger.record(
        9,
        "unseen-term generalization",
        unseen_acc >= 0.80,
        format!(
            "accuracy {unseen_acc:.3} (>= 0.80) on {} held-out-term positives",
            unseen.len()
        ),
        start,
        60,
    );

    let start = Instant::now();
    let (ckpt2, pre_out2) = pretrain(&c);
    let adapter2 = tune(&c, &ckpt2, Method::Adapter, 0);
    let gold2 = score(&adapter2.best.model, &c.vocab, &c.test);
    let pre_a: Vec<f64> = pre_out.history.iter().map(|r| r.loss).collect();
    let pre_b: Vec<f64> = pre_out2.history.iter().map(|r| r.loss).collect();
    let (pre_ok, pre_worst) = losses_match(&pre_a, &pre_b);
    let (step_ok, step_worst) = losses_match(
        &adapter.best.outcome.step_losses,
        &adapter2.best.outcome.step_losses,
    );
    let epoch_a: Vec<f64> = adapter
        .best
        .outcome
        .history
        .iter()
        .map(|r| r.loss)
        .collect();
    let epoch_b: Vec<f64> = adapter2
        .best
        .outcome
        .history
        .iter()
        .map(|r| r.loss)
        .collect();
    let (epoch_ok, _) = losses_match(&epoch_a, &epoch_b);
    let metric_diff = (gold2.macro_avg.f1 - a_f).abs();
    ledger.record(
        10,
        "determinism of the criterion 7 adapter run",
        pre_ok && step_ok && epoch_ok && metric_diff <= 1e-12 && gold2.counts == adapter_gold.counts,
        format!(
            "{} pretraining and {} tuning losses, worst diffs {pre_worst:.1e} / {step_worst:.1e}, macro-F diff {metric_diff:.1e} (tol 1e-12)",
            pre_a.len(),
            adapter.best.outcome.step_losses.len()
        ),
        start,
        900,
    );

    ledger.rows.sort_by_key(|r| r.id);
    let mut summary = String::from("acceptance summary\n");
    for r in &ledger.rows {
        summary.push_str(&line(r));
        summary.push('\n');
    }
    let _ = write!(std::io::stderr(), "{summary}");
    assert_eq!(ledger.rows.len(), 10);
    assert!(ledger.rows.iter().all(|r| r.passed), "{summary}");
}
