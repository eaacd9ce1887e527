use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Class index used by the classifier head (positive = 1).
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Human,
    KeywordScreen,
    NegationSynthetic,
    CorpusSynthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteRecord {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub origin: Origin,
}

impl NoteRecord {
    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::Contract(format!(
                "record {} has empty text",
                self.id
            )));
        }
        if self.origin == Origin::NegationSynthetic && self.label != Label::Negative {
            return Err(Error::Contract(format!(
                "negation sample {} must be negative",
                self.id
            )));
        }
        Ok(())
    }
}

/// Reads line-delimited records; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<NoteRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: NoteRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, records: &[NoteRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(buf, "{line}").expect("write to string");
    }
    write_atomic(path, buf.as_bytes())
}
