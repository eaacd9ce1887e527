use std::collections::HashMap;

use super::terms::is_acronym;
use super::{CLS_ID, NUM_SPECIAL, SPECIAL_TOKENS, UNK_ID};
use crate::error::{Error, Result};

/// Splits on whitespace; every non-alphanumeric character becomes its own
/// token. Case is preserved.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Normalized word tokens: lowercased unless the token is an all-caps
/// acronym from the term list.
pub fn tokenize_words(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .map(|w| {
            if is_acronym(w) && w.chars().all(|c| !c.is_lowercase()) {
                w.to_string()
            } else {
                w.to_lowercase()
            }
        })
        .collect()
}

/// Dense token ↔ id map with the four specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an explicit token list, which must start with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL
            || tokens[..NUM_SPECIAL]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Config(
                "vocabulary must begin with [PAD] [UNK] [CLS] [MASK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Counts normalized tokens over `texts` and keeps those seen at least
    /// `min_count` times, most frequent first (ties lexicographic).
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in tokenize_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size.max(NUM_SPECIAL))
            .collect();
        Self::from_tokens(tokens).expect("specials first and tokens unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by the id of every normalized token.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(CLS_ID)
            .chain(tokenize_words(text).iter().map(|w| self.id(w)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_keeps_punctuation() {
        assert_eq!(split_words("Not lymphoma."), ["Not", "lymphoma", "."]);
        assert_eq!(
            split_words("  non-Hodgkin, k/c  "),
            ["non", "-", "Hodgkin", ",", "k", "/", "c"]
        );
        assert!(split_words("").is_empty());
    }

    #[test]
    fn acronyms_keep_case() {
        assert_eq!(
            tokenize_words("CA breast, all ALL"),
            ["CA", "breast", ",", "all", "ALL"]
        );
        assert_eq!(tokenize_words("Met mets Ca"), ["met", "mets", "ca"]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::build(["Not lymphoma."], 1, 100);
        assert_eq!(v.encode(""), vec![CLS_ID]);
        let ids = v.encode("Not lymphoma.");
        assert_eq!(ids, vec![CLS_ID, v.id("not"), v.id("lymphoma"), v.id(".")]);
        assert!(ids[1..].iter().all(|&i| i >= NUM_SPECIAL));
        assert_eq!(v.encode("Not lymphoma."), ids);
        assert_eq!(v.encode("glioma"), vec![CLS_ID, UNK_ID]);
    }

    #[test]
    fn build_orders_by_frequency_and_caps_size() {
        let v = Vocab::build(["b a a", "c a b"], 1, 6);
        assert_eq!(&v.tokens()[NUM_SPECIAL..], ["a", "b"]);
        let v = Vocab::build(["b a a", "c a b"], 2, 100);
        assert_eq!(v.len(), NUM_SPECIAL + 2);
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        t.push("a".into());
        t.push("a".into());
        assert!(Vocab::from_tokens(t).is_err());
    }
}
