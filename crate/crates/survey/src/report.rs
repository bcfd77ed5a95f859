//! Lexicon overlap report: which lexicon groups the readers' phenomena fall
//! into, counted per distinct unit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, CancerAssociation, UnitRef};
use crate::lexicon::Lexicon;

/// Descriptions longer than this are cut (by characters) in report rows.
pub const SUMMARY_CHARS: usize = 120;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub unit_ref: UnitRef,
    pub description: String,
    pub lexicon_category: String,
    pub cancer_association: CancerAssociation,
    pub reader_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    /// Distinct units with at least one phenomenon in this group.
    pub unit_count: usize,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    /// One entry per lexicon group, in lexicon order.
    pub groups: Vec<GroupReport>,
    /// Phenomena tagged with category `none`.
    pub uncategorized: Vec<ReportRow>,
    pub annotated_units: usize,
    /// Distinct units with at least one `recognizable = false` report.
    pub unrecognizable_units: usize,
    /// Distinct units with at least one multi-phenomenon report.
    pub entangled_units: usize,
    pub annotation_count: usize,
}

pub fn summarize(description: &str) -> String {
    description.chars().take(SUMMARY_CHARS).collect()
}

/// Builds the report. A pure function of the annotation set and lexicon.
pub fn build_report(annotations: &[Annotation], lexicon: &Lexicon) -> Report {
    let mut ordered: Vec<&Annotation> = annotations.iter().collect();
    ordered.sort_by(|a, b| {
        (&a.unit_ref, &a.reader_id, &a.annotation_id).cmp(&(&b.unit_ref, &b.reader_id, &b.annotation_id))
    });

    let mut groups: Vec<(GroupReport, BTreeSet<&UnitRef>)> = lexicon
        .groups()
        .into_iter()
        .map(|g| {
            (
                GroupReport {
                    group: g.to_string(),
                    unit_count: 0,
                    rows: Vec::new(),
                },
                BTreeSet::new(),
            )
        })
        .collect();
    let mut uncategorized = Vec::new();
    let mut annotated = BTreeSet::new();
    let mut unrecognizable = BTreeSet::new();
    let mut entangled = BTreeSet::new();

    for a in ordered {
        annotated.insert(&a.unit_ref);
        if !a.recognizable {
            unrecognizable.insert(&a.unit_ref);
        }
        if a.is_entangled() {
            entangled.insert(&a.unit_ref);
        }
        for p in &a.phenomena {
            let row = ReportRow {
                unit_ref: a.unit_ref.clone(),
                description: summarize(&p.description),
                lexicon_category: p.lexicon_category.clone(),
                cancer_association: p.cancer_association,
                reader_id: a.reader_id.clone(),
            };
            let group = lexicon
                .group_of(&p.lexicon_category)
                .and_then(|g| groups.iter_mut().find(|(r, _)| r.group == g));
            match group {
                Some((report, units)) => {
                    units.insert(&a.unit_ref);
                    report.rows.push(row);
                }
                None => uncategorized.push(row),
            }
        }
    }

    Report {
        groups: groups
            .into_iter()
            .map(|(mut r, units)| {
                r.unit_count = units.len();
                r
            })
            .collect(),
        uncategorized,
        annotated_units: annotated.len(),
        unrecognizable_units: unrecognizable.len(),
        entangled_units: entangled.len(),
        annotation_count: annotations.len(),
    }
}

/// Plain-text rendering for terminals.
pub fn render_table(report: &Report) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>6}", "group", "units");
    for g in &report.groups {
        let _ = writeln!(s, "{:<28} {:>6}", g.group, g.unit_count);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "annotations:         {}", report.annotation_count);
    let _ = writeln!(s, "annotated units:     {}", report.annotated_units);
    let _ = writeln!(s, "unrecognizable units: {}", report.unrecognizable_units);
    let _ = writeln!(s, "entangled units:     {}", report.entangled_units);
    for g in &report.groups {
        if g.rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "\n[{}]", g.group);
        for r in &g.rows {
            let _ = writeln!(
                s,
                "  {:<24} {:<10} {:<9} {}",
                r.unit_ref.to_string(),
                r.reader_id,
                format!("{:?}", r.cancer_association).to_lowercase(),
                r.description
            );
        }
    }
    if !report.uncategorized.is_empty() {
        let _ = writeln!(s, "\n[uncategorized]");
        for r in &report.uncategorized {
            let _ = writeln!(s, "  {:<24} {:<10} {}", r.unit_ref.to_string(), r.reader_id, r.description);
        }
    }
    s
}
