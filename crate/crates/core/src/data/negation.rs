use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::{Label, NoteRecord, Origin};
use super::terms::{is_acronym, TemplateSet, TermList, SLOT};
use super::vocab::split_words;
use crate::error::{Error, Result};

/// Indices of one (template, term) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NegationPair {
    pub template: usize,
    pub term: usize,
}

/// Every (template, term) pair in a seeded uniform random order. A prefix
/// of length n is a uniform sample without replacement.
pub fn negation_pairs(n_templates: usize, n_terms: usize, seed: u64) -> Vec<NegationPair> {
    let mut pairs: Vec<NegationPair> = (0..n_templates)
        .flat_map(|template| (0..n_terms).map(move |term| NegationPair { template, term }))
        .collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pairs
}

/// Substitutes `term` into the slot. Terms holding an acronym keep their
/// casing; others are lowercased and capitalized only at sentence start.
pub fn fill_template(template: &str, term: &str) -> String {
    let (before, after) = template.split_once(SLOT).unwrap_or((template, ""));
    let filled = if split_words(term).into_iter().any(is_acronym) {
        term.to_string()
    } else {
        let lower = term.to_lowercase();
        if before.trim().is_empty() {
            let mut c = lower.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => lower,
            }
        } else {
            lower
        }
    };
    format!("{before}{filled}{after}")
}

/// `n` distinct negated-term sentences, labelled negative.
pub fn generate_negation_samples(
    terms: &TermList,
    templates: &TemplateSet,
    n: usize,
    seed: u64,
) -> Result<Vec<NoteRecord>> {
    let available = terms.len() * templates.len();
    if n > available {
        return Err(Error::Exhausted {
            requested: n,
            available,
        });
    }
    Ok(negation_pairs(templates.len(), terms.len(), seed)
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, p)| NoteRecord {
            id: format!("neg-{seed}-{i}"),
            text: fill_template(
                &templates.templates[p.template],
                &terms.entries[p.term].surface,
            ),
            label: Label::Negative,
            origin: Origin::NegationSynthetic,
        })
        .collect())
}
