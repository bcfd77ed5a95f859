//! Reader reports on a single unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, NO_CATEGORY};

/// Identifies a unit across models and layers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub model: String,
    pub layer: String,
    pub unit_index: usize,
}

impl std::fmt::Display for UnitRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.model, self.layer, self.unit_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CancerAssociation {
    Benign,
    Malignant,
    Unclear,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phenomenon {
    pub description: String,
    /// Lexicon category id, or `"none"`.
    pub lexicon_category: String,
    pub cancer_association: CancerAssociation,
}

/// Client-supplied part of an annotation (the POST body).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationInput {
    pub annotation_id: String,
    pub reader_id: String,
    pub recognizable: bool,
    #[serde(default)]
    pub phenomena: Vec<Phenomenon>,
}

/// A stored annotation: one log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub annotation_id: String,
    pub unit_ref: UnitRef,
    pub reader_id: String,
    pub recognizable: bool,
    pub phenomena: Vec<Phenomenon>,
    /// Milliseconds since the Unix epoch at which the server accepted it.
    pub timestamp_ms: u64,
}

impl Annotation {
    pub fn from_input(input: AnnotationInput, unit_ref: UnitRef, timestamp_ms: u64) -> Self {
        Self {
            annotation_id: input.annotation_id,
            unit_ref,
            reader_id: input.reader_id,
            recognizable: input.recognizable,
            phenomena: input.phenomena,
            timestamp_ms,
        }
    }

    /// Whether `input` for `unit` describes this record (the timestamp is
    /// server-assigned and ignored).
    pub fn same_body(&self, input: &AnnotationInput, unit: &UnitRef) -> bool {
        self.annotation_id == input.annotation_id
            && &self.unit_ref == unit
            && self.reader_id == input.reader_id
            && self.recognizable == input.recognizable
            && self.phenomena == input.phenomena
    }

    /// More than one phenomenon in a single report.
    pub fn is_entangled(&self) -> bool {
        self.phenomena.len() > 1
    }
}

/// Checks the rules every stored annotation satisfies.
///
/// Rejected: non-UUID `annotation_id`, blank `reader_id`, phenomena on an
/// unrecognizable unit, a recognizable unit with no phenomena, blank
/// descriptions, and categories absent from the lexicon.
pub fn validate(input: &AnnotationInput, lexicon: &Lexicon) -> Result<()> {
    let bad = |m: String| Err(Error::Invalid(m));
    if uuid::Uuid::parse_str(&input.annotation_id).is_err() {
        return bad(format!("annotation_id `{}` is not a UUID", input.annotation_id));
    }
    if input.reader_id.trim().is_empty() {
        return bad("reader_id must not be blank".into());
    }
    if !input.recognizable && !input.phenomena.is_empty() {
        return bad("an unrecognizable unit cannot list phenomena".into());
    }
    if input.recognizable && input.phenomena.is_empty() {
        return bad("a recognizable unit needs at least one phenomenon".into());
    }
    for (i, p) in input.phenomena.iter().enumerate() {
        if p.description.trim().is_empty() {
            return bad(format!("phenomena[{i}].description must not be blank"));
        }
        if p.lexicon_category != NO_CATEGORY && lexicon.get(&p.lexicon_category).is_none() {
            return bad(format!(
                "phenomena[{i}].lexicon_category `{}` is not in the lexicon",
                p.lexicon_category
            ));
        }
    }
    Ok(())
}
