//! BI-RADS-style category list used to tag phenomena.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category id meaning "no lexicon category applies".
pub const NO_CATEGORY: &str = "none";

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub id: String,
    pub display_name: String,
    pub group: String,
}

/// Ordered, id-unique category list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

impl Lexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.id.trim().is_empty() || e.group.trim().is_empty() {
                return Err(Error::Lexicon(format!("entry {:?} has an empty id or group", e.display_name)));
            }
            if e.id == NO_CATEGORY {
                return Err(Error::Lexicon(format!("`{NO_CATEGORY}` is reserved and cannot be a category id")));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Lexicon(format!("duplicate category id `{}`", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries: Vec<LexiconEntry> =
            serde_json::from_str(text).map_err(|e| Error::Lexicon(format!("parse error: {e}")))?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The lexicon shipped with the crate (`data/lexicon.json`).
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&LexiconEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn group_of(&self, id: &str) -> Option<&str> {
        self.get(id).map(|e| e.group.as_str())
    }

    /// Distinct groups in order of first appearance.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group.as_str()) {
                out.push(&e.group);
            }
        }
        out
    }
}
