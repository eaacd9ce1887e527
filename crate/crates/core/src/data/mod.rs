//! Tokenization, note records, the cancer-term screen, negation
//! augmentation and the synthetic clinical-note corpus.

mod negation;
mod records;
mod synth;
mod terms;
mod vocab;

pub use negation::{fill_template, generate_negation_samples, negation_pairs, NegationPair};
pub use records::{load_jsonl, save_jsonl, Label, NoteRecord, Origin};
pub use synth::{
    holdout_positives, pretraining_corpus, synth_corpus, CorpusSplit, SynthOptions, HOLDOUT_TERMS,
};
pub use terms::{keyword_screen, ScreenResult, TemplateSet, Term, TermList, ACRONYMS, SLOT};
pub use vocab::{split_words, tokenize_words, Vocab};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];
