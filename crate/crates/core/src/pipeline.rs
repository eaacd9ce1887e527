//! End-to-end helpers shared by the CLI, the benches and the tests:
//! vocabulary building, tokenization of records, and model preparation
//! for each fine-tuning method.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    fill_template, generate_negation_samples, negation_pairs, Label, NoteRecord, Origin,
    TemplateSet, TermList, Vocab, HOLDOUT_TERMS, UNK_ID,
};
use crate::error::{Error, Result};
use crate::models::{project_embeddings, Checkpoint, EncoderModel, Model, RnnConfig, RnnModel};
use crate::peft::{apply_freeze_policy, attach_prompts, insert_adapters, PROMPT_INIT_STD};
use crate::training::{split_validation, train_best_of, BestOf, Method, Sample, TrainConfig};

/// Tokens seen at least twice across the given texts, capped at 8000 entries.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
    Vocab::build(texts, 2, 8000)
}

pub fn encode_all<'a>(vocab: &Vocab, texts: impl IntoIterator<Item = &'a str>) -> Vec<Vec<usize>> {
    texts.into_iter().map(|t| vocab.encode(t)).collect()
}

pub fn to_samples(vocab: &Vocab, records: &[NoteRecord]) -> Vec<Sample> {
    records
        .iter()
        .map(|r| Sample {
            ids: vocab.encode(&r.text),
            label: r.label.index(),
        })
        .collect()
}

/// Fraction of non-`[CLS]` tokens mapped to `[UNK]`.
pub fn unk_rate(vocab: &Vocab, records: &[NoteRecord]) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for r in records {
        let ids = vocab.encode(&r.text);
        unk += ids[1..].iter().filter(|&&i| i == UNK_ID).count();
        total += ids.len() - 1;
    }
    if total == 0 {
        0.0
    } else {
        unk as f64 / total as f64
    }
}

/// Terms available to negation augmentation: everything except the
/// generalization holdout.
pub fn negation_pool(terms: &TermList) -> TermList {
    terms.without(&HOLDOUT_TERMS)
}

/// Negated sentences from pairs `skip..skip+n` of the seeded pair order,
/// i.e. disjoint from the first `skip` pairs used for augmentation.
pub fn negation_holdout(
    terms: &TermList,
    templates: &TemplateSet,
    skip: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<NoteRecord>> {
    let pairs = negation_pairs(templates.len(), terms.len(), seed);
    if skip + n > pairs.len() {
        return Err(Error::Exhausted {
            requested: skip + n,
            available: pairs.len(),
        });
    }
    Ok(pairs[skip..skip + n]
        .iter()
        .enumerate()
        .map(|(i, p)| NoteRecord {
            id: format!("neg-holdout-{i}"),
            text: fill_template(
                &templates.templates[p.template],
                &terms.entries[p.term].surface,
            ),
            label: Label::Negative,
            origin: Origin::NegationSynthetic,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub reduction_factor: usize,
    pub prompt_size: usize,
    pub runs: usize,
    pub valid_frac: f64,
    pub negation_aug: usize,
    pub train_layer_norm: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            reduction_factor: 16,
            prompt_size: 30,
            runs: 3,
            valid_frac: 0.1,
            negation_aug: 0,
            train_layer_norm: false,
        }
    }
}

/// Builds the model a method trains, starting from `base` (an encoder
/// checkpoint, required except for recurrent baselines, which use it only
/// to initialize their embeddings).
pub fn prepare_model(
    method: Method,
    base: Option<&Model>,
    vocab_size: usize,
    opts: &FinetuneOptions,
    seed: u64,
) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        Method::Rnn(variant) => {
            let config = RnnConfig::new(variant, vocab_size);
            let init = match base {
                Some(Model::Encoder(e)) => Some(project_embeddings(
                    e.store.tensor(e.token_embedding_id()),
                    config.embed_dim,
                    &mut rng,
                )?),
                Some(Model::Rnn(_)) => {
                    return Err(Error::Config(
                        "recurrent baselines start from an encoder checkpoint or none".into(),
                    ))
                }
                None => None,
            };
            Ok(Model::Rnn(RnnModel::new(config, init.as_ref(), &mut rng)?))
        }
        _ => {
            let Some(Model::Encoder(base)) = base else {
                return Err(Error::Config(format!(
                    "method {method} needs an encoder checkpoint"
                )));
            };
            if base.config.vocab_size != vocab_size {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary has {} entries, data vocabulary {}",
                    base.config.vocab_size, vocab_size
                )));
            }
            if base.has_head()
                || base.peft.reduction_factor.is_some()
                || base.peft.prompt_length.is_some()
            {
                return Err(Error::Config(
                    "expected a pretrained backbone without head or attachments".into(),
                ));
            }
            let mut m: EncoderModel = base.clone();
            m.add_classifier_head(&mut rng)?;
            m.peft.train_layer_norm = opts.train_layer_norm;
            match method {
                Method::Adapter => insert_adapters(&mut m, opts.reduction_factor, &mut rng)?,
                Method::Prompt => {
                    attach_prompts(&mut m, opts.prompt_size, PROMPT_INIT_STD, &mut rng)?
                }
                _ => {}
            }
            apply_freeze_policy(&mut m, method.freeze_mode())?;
            Ok(Model::Encoder(m))
        }
    }
}

pub struct FinetuneResult {
    pub best: BestOf,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_augmented: usize,
}

/// Appends `negation_aug` negated samples, carves the validation split and
/// trains `runs` models, keeping the best.
pub fn finetune(
    checkpoint: Option<&Checkpoint>,
    vocab: &Vocab,
    records: &[NoteRecord],
    cfg: &TrainConfig,
    opts: &FinetuneOptions,
    terms: &TermList,
    templates: &TemplateSet,
) -> Result<FinetuneResult> {
    if let Some(c) = checkpoint {
        if c.vocab != vocab.tokens() {
            return Err(Error::Config(
                "checkpoint vocabulary differs from the data vocabulary".into(),
            ));
        }
    }
    let mut all = records.to_vec();
    let aug = generate_negation_samples(
        &negation_pool(terms),
        templates,
        opts.negation_aug,
        cfg.seed,
    )?;
    let n_augmented = aug.len();
    all.extend(aug);
    let (train_set, valid_set) =
        split_validation(to_samples(vocab, &all), opts.valid_frac, cfg.seed)?;
    let base = checkpoint.map(|c| &c.model);
    let best = train_best_of(
        opts.runs,
        |seed| prepare_model(cfg.method, base, vocab.len(), opts, seed),
        &train_set,
        &valid_set,
        cfg,
    )?;
    Ok(FinetuneResult {
        best,
        n_train: train_set.len(),
        n_valid: valid_set.len(),
        n_augmented,
    })
}
