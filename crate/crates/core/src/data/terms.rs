use std::path::Path;

use super::vocab::split_words;
use crate::error::{Error, Result};

/// Entries matched case-sensitively as whole tokens.
pub const ACRONYMS: [&str; 18] = [
    "CA", "ALL", "AML", "BCC", "MDS", "SCC", "TCC", "NHL", "SCLC", "NSCLC", "CLL", "CML", "HCC",
    "GBM", "GIST", "DLBCL", "Met", "Mets",
];

/// Placeholder replaced by a term in negation templates.
pub const SLOT: &str = "CONDITION";

const TERMS_FILE: &str = include_str!("../../data/cancer_terms.txt");
const TEMPLATES_FILE: &str = include_str!("../../data/negation_templates.txt");

pub(crate) fn is_acronym(word: &str) -> bool {
    ACRONYMS.contains(&word)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub surface: String,
    pub acronym: bool,
    pub uncertain: bool,
}

impl Term {
    /// Whether the surface holds a case-sensitive token.
    pub fn has_acronym_token(&self) -> bool {
        split_words(&self.surface).into_iter().any(is_acronym)
    }
}

/// Cancer-related screening terms in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermList {
    pub entries: Vec<Term>,
}

impl TermList {
    /// The bundled list.
    pub fn standard() -> Self {
        Self::parse(TERMS_FILE).expect("bundled term list parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// One term per line; `#` starts a comment, a trailing `*` marks an
    /// uncertain term, `A (B)` yields both `A` and `B`, repeats are dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Term> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (body, uncertain) = match line.strip_suffix('*') {
                Some(b) => (b.trim_end(), true),
                None => (line, false),
            };
            let mut surfaces = vec![body.to_string()];
            if let Some((head, rest)) = body.split_once('(') {
                let inner = rest.strip_suffix(')').ok_or_else(|| Error::Parse {
                    path: "cancer terms".into(),
                    line: lineno + 1,
                    message: format!("unbalanced parenthesis in {line:?}"),
                })?;
                surfaces = vec![head.trim().to_string(), inner.trim().to_string()];
            }
            for surface in surfaces {
                if surface.is_empty() || split_words(&surface).is_empty() {
                    return Err(Error::Parse {
                        path: "cancer terms".into(),
                        line: lineno + 1,
                        message: "empty term".into(),
                    });
                }
                if entries.iter().any(|t| t.surface == surface) {
                    continue;
                }
                entries.push(Term {
                    acronym: is_acronym(&surface),
                    surface,
                    uncertain,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Config("term list is empty".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<&Term> {
        self.entries.iter().find(|t| t.surface == surface)
    }

    /// Copy without the named surfaces.
    pub fn without(&self, surfaces: &[&str]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|t| !surfaces.contains(&t.surface.as_str()))
                .cloned()
                .collect(),
        }
    }
}

/// Negation templates, each with exactly one [`SLOT`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub templates: Vec<String>,
}

impl TemplateSet {
    pub const SIZE: usize = 12;

    pub fn standard() -> Self {
        Self::parse(TEMPLATES_FILE).expect("bundled templates parse")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.matches(SLOT).count() != 1 {
                return Err(Error::Parse {
                    path: "negation templates".into(),
                    line: lineno + 1,
                    message: format!("template must contain {SLOT} exactly once"),
                });
            }
            templates.push(line.to_string());
        }
        if templates.len() != Self::SIZE {
            return Err(Error::Config(format!(
                "expected {} templates, found {}",
                Self::SIZE,
                templates.len()
            )));
        }
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreenResult {
    pub matched: bool,
    /// Matching surfaces in term-list order.
    pub hits: Vec<String>,
}

/// Lexical screen: a term hits when its token sequence occurs in the text.
/// Acronym tokens must match exactly, everything else ignores case.
pub fn keyword_screen(text: &str, terms: &TermList) -> ScreenResult {
    let words = split_words(text);
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let mut hits = Vec::new();
    for term in &terms.entries {
        let pattern = split_words(&term.surface);
        let tok_eq = |i: usize, p: &str| {
            if is_acronym(p) {
                words[i] == p
            } else {
                lower[i] == p.to_lowercase()
            }
        };
        let found = words.len() >= pattern.len()
            && (0..=words.len() - pattern.len())
                .any(|s| pattern.iter().enumerate().all(|(k, p)| tok_eq(s + k, p)));
        if found {
            hits.push(term.surface.clone());
        }
    }
    ScreenResult {
        matched: !hits.is_empty(),
        hits,
    }
}
