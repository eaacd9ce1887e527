use clinpeft_core::data::{TemplateSet, TermList, Vocab, SPECIAL_TOKENS};
use clinpeft_core::models::{
    mask_tokens, mlm_loss, Checkpoint, EncoderConfig, EncoderModel, Model, RnnVariant,
};
use clinpeft_core::nn::Ctx;
use clinpeft_core::pipeline::{finetune, prepare_model, FinetuneOptions};
use clinpeft_core::tensor::Tape;
use clinpeft_core::training::{
    param_checksum, pretrain_mlm, split_validation, train, train_best_of, write_history,
    HistoryRecord, Method, PretrainConfig, Sample, TrainConfig,
};
use clinpeft_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 24;

fn backbone(seed: u64) -> EncoderModel {
    let config = EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        ..EncoderConfig::tiny(VOCAB)
    };
    EncoderModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Label is 1 iff token 5 occurs; tokens 5 and 6 never co-occur.
fn separable(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut ids = vec![2];
            for _ in 0..rng.gen_range(2..6) {
                ids.push(rng.gen_range(7..VOCAB));
            }
            let at = rng.gen_range(1..=ids.len());
            ids.insert(at, if label == 1 { 5 } else { 6 });
            Sample { ids, label }
        })
        .collect()
}

fn cfg(method: Method, epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: lr,
        ..TrainConfig::preset(method, seed)
    }
}

#[test]
fn one_epoch_of_64_samples_is_one_step() {
    let mut model = prepare_model(
        Method::Adapter,
        Some(&Model::Encoder(backbone(1))),
        VOCAB,
        &FinetuneOptions {
            reduction_factor: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let out = train(
        &mut model,
        &separable(64, 1),
        &cfg(Method::Adapter, 1, 1e-3, 1),
    )
    .unwrap();
    assert_eq!(out.step_losses.len(), 1);
    assert_eq!(out.history.last().unwrap().step, 1);
}

#[test]
fn step_count_keeps_partial_batches() {
    let mut model = prepare_model(
        Method::Rnn(RnnVariant::Bilstm),
        None,
        VOCAB,
        &FinetuneOptions::default(),
        2,
    )
    .unwrap();
    let c = TrainConfig {
        batch_size: 16,
        ..cfg(Method::Rnn(RnnVariant::Bilstm), 3, 1e-3, 2)
    };
    let out = train(&mut model, &separable(37, 2), &c).unwrap();
    assert_eq!(out.step_losses.len(), 3 * 3);
    let steps: Vec<usize> = out.history.iter().map(|h| h.step).collect();
    assert_eq!(steps, vec![3, 6, 9]);
}

#[test]
fn frozen_checksum_constant_in_adapter_mode() {
    let base = Model::Encoder(backbone(3));
    let mut model = prepare_model(
        Method::Adapter,
        Some(&base),
        VOCAB,
        &FinetuneOptions {
            reduction_factor: 4,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let frozen0 = param_checksum(model.store(), false);
    let trainable0 = param_checksum(model.store(), true);
    let c = TrainConfig {
        batch_size: 16,
        ..cfg(Method::Adapter, 4, 1e-3, 3)
    };
    let out = train(&mut model, &separable(48, 3), &c).unwrap();
    assert!(out.history.iter().all(|h| h.frozen_checksum == frozen0));
    assert_ne!(out.history[0].trainable_checksum, trainable0);
}

#[test]
fn separable_toy_set_is_learned_with_rnn_preset() {
    let mut model = prepare_model(
        Method::Rnn(RnnVariant::Bilstm),
        None,
        VOCAB,
        &FinetuneOptions::default(),
        4,
    )
    .unwrap();
    let out = train(
        &mut model,
        &separable(256, 4),
        &TrainConfig::preset(Method::Rnn(RnnVariant::Bilstm), 4),
    )
    .unwrap();
    assert!(
        out.final_loss() < 0.1,
        "{:?}",
        out.history.iter().map(|h| h.loss).collect::<Vec<_>>()
    );
}

#[test]
fn separable_toy_set_is_learned_with_adapter_preset() {
    // a random backbone barely routes token information to [CLS]; a short
    // masked-token pretraining gives attention something to work with
    let config = EncoderConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        max_len: 16,
        ..EncoderConfig::tiny(VOCAB)
    };
    let mut base = EncoderModel::new(config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let corpus: Vec<Vec<usize>> = separable(512, 40).into_iter().map(|s| s.ids).collect();
    pretrain_mlm(
        &mut base,
        &corpus,
        &PretrainConfig {
            steps: 300,
            batch_size: 32,
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let opts = FinetuneOptions {
        reduction_factor: 4,
        ..Default::default()
    };
    let mut model = prepare_model(
        Method::Adapter,
        Some(&Model::Encoder(base)),
        VOCAB,
        &opts,
        4,
    )
    .unwrap();
    let out = train(
        &mut model,
        &separable(2048, 4),
        &TrainConfig::preset(Method::Adapter, 4),
    )
    .unwrap();
    assert!(
        out.final_loss() < 0.1,
        "{:?}",
        out.history.iter().map(|h| h.loss).collect::<Vec<_>>()
    );
}

#[test]
fn identical_seed_identical_losses() {
    let base = Model::Encoder(backbone(5));
    let run = || {
        let mut m = prepare_model(
            Method::Full,
            Some(&base),
            VOCAB,
            &FinetuneOptions::default(),
            5,
        )
        .unwrap();
        let c = TrainConfig {
            batch_size: 8,
            ..cfg(Method::Full, 2, 1e-3, 5)
        };
        (train(&mut m, &separable(40, 5), &c).unwrap(), m)
    };
    let ((a, ma), (b, mb)) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.step_losses), bits(&b.step_losses));
    assert_eq!(a.history, b.history);
    assert_eq!(ma, mb);
}

#[test]
fn best_of_runs_uses_consecutive_seeds() {
    let data = separable(60, 6);
    let (tr, va) = split_validation(data, 0.2, 6).unwrap();
    assert_eq!((tr.len(), va.len()), (48, 12));
    let c = TrainConfig {
        batch_size: 16,
        ..cfg(Method::Rnn(RnnVariant::Bilstm), 1, 1e-3, 40)
    };
    let best = train_best_of(
        3,
        |s| {
            prepare_model(
                Method::Rnn(RnnVariant::Bilstm),
                None,
                VOCAB,
                &FinetuneOptions::default(),
                s,
            )
        },
        &tr,
        &va,
        &c,
    )
    .unwrap();
    assert_eq!(
        best.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![40, 41, 42]
    );
    assert!(best.valid_report.is_some());
    assert_eq!(best.outcome.final_loss(), best.runs[best.best].final_loss);
}

#[test]
fn empty_dataset_is_a_config_error() {
    let mut m = prepare_model(
        Method::Rnn(RnnVariant::Bilstm),
        None,
        VOCAB,
        &FinetuneOptions::default(),
        0,
    )
    .unwrap();
    assert!(matches!(
        train(&mut m, &[], &cfg(Method::Full, 1, 1e-3, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn method_checkpoint_mismatch_is_a_config_error() {
    let opts = FinetuneOptions::default();
    assert!(matches!(
        prepare_model(Method::Adapter, None, VOCAB, &opts, 0),
        Err(Error::Config(_))
    ));
    let rnn = prepare_model(Method::Rnn(RnnVariant::Bilstm), None, VOCAB, &opts, 0).unwrap();
    assert!(matches!(
        prepare_model(Method::Prompt, Some(&rnn), VOCAB, &opts, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        prepare_model(Method::Rnn(RnnVariant::Bilstm), Some(&rnn), VOCAB, &opts, 0),
        Err(Error::Config(_))
    ));
    let enc = Model::Encoder(backbone(0));
    assert!(matches!(
        prepare_model(Method::Full, Some(&enc), VOCAB + 1, &opts, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn rnn_embeddings_start_from_projected_encoder_table() {
    let enc = backbone(7);
    let opts = FinetuneOptions::default();
    let a = prepare_model(
        Method::Rnn(RnnVariant::CnnBilstmAtt),
        Some(&Model::Encoder(enc.clone())),
        VOCAB,
        &opts,
        7,
    )
    .unwrap();
    let b = prepare_model(Method::Rnn(RnnVariant::CnnBilstmAtt), None, VOCAB, &opts, 7).unwrap();
    let emb = |m: &Model| m.store().tensor(m.store().id("embedding").unwrap()).clone();
    assert_ne!(emb(&a).values(), emb(&b).values());
    assert_eq!(emb(&a).shape(), &[VOCAB, 64]);
}

#[test]
fn negation_augmentation_grows_training_data_exactly() {
    let terms = TermList::standard();
    let templates = TemplateSet::standard();
    let tokens: Vec<String> = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain((4..VOCAB).map(|i| format!("w{i}")))
        .collect();
    let vocab = Vocab::from_tokens(tokens).unwrap();
    let records: Vec<_> = (0..40)
        .map(|i| clinpeft_core::data::NoteRecord {
            id: i.to_string(),
            text: format!("w{} w{}", 4 + i % 10, 5 + i % 7),
            label: clinpeft_core::data::Label::from_index(i % 2),
            origin: clinpeft_core::data::Origin::CorpusSynthetic,
        })
        .collect();
    let ck = Checkpoint {
        model: Model::Encoder(backbone(8)),
        vocab: vocab.tokens().to_vec(),
    };
    let opts = FinetuneOptions {
        runs: 1,
        valid_frac: 0.0,
        negation_aug: 250,
        reduction_factor: 4,
        ..Default::default()
    };
    let c = TrainConfig {
        epochs: 1,
        ..TrainConfig::preset(Method::Adapter, 8)
    };
    let r = finetune(Some(&ck), &vocab, &records, &c, &opts, &terms, &templates).unwrap();
    assert_eq!((r.n_train, r.n_valid, r.n_augmented), (290, 0, 250));
}

#[test]
fn mlm_loss_decreases_on_toy_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // 50 sentences from a tiny deterministic grammar
    let corpus: Vec<Vec<usize>> = (0..50)
        .map(|i| {
            let a = 4 + (i % 5) * 2;
            let len = rng.gen_range(4..9);
            std::iter::once(2)
                .chain((0..len).map(|k| if k % 2 == 0 { a } else { a + 1 }))
                .collect()
        })
        .collect();
    let mut m = backbone(9);
    let eval_loss = |m: &EncoderModel| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let masked = mask_tokens(&corpus, 0.15, VOCAB, 16, &mut r).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.store);
        mlm_loss(m, &ctx, &masked).unwrap().value()[0]
    };
    let before = eval_loss(&m);
    let out = pretrain_mlm(
        &mut m,
        &corpus,
        &PretrainConfig {
            steps: 500,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.history.len() + out.skipped, 500);
    let after = eval_loss(&m);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn zero_pretraining_steps_leave_the_model_unchanged() {
    let mut m = backbone(10);
    let before = m.clone();
    let out = pretrain_mlm(
        &mut m,
        &[vec![2, 5, 6]],
        &PretrainConfig {
            steps: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.history.is_empty());
    assert_eq!(m, before);
    assert!(pretrain_mlm(&mut m, &[], &PretrainConfig::default()).is_err());
}

#[test]
fn history_is_line_delimited() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.jsonl");
    let rec = HistoryRecord {
        epoch: 0,
        step: 3,
        loss: 0.5,
        lr: 1e-3,
        trainable_checksum: "a".into(),
        frozen_checksum: "b".into(),
    };
    write_history(&p, &[rec.clone(), rec.clone()]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let back: Vec<HistoryRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, vec![rec.clone(), rec]);
}
