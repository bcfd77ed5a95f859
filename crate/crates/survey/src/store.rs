//! Append-only annotation log, one JSON record per line.
//!
//! A record is acknowledged only after its line, including the newline, has
//! been written and synced. On load, a final line that is unterminated or
//! does not parse is treated as a torn write: it is dropped with a warning,
//! and [`AnnotationLog::open`] truncates it away before appending again.
//! A malformed line anywhere else is an error.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::annotation::{self, Annotation, AnnotationInput, UnitRef};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

/// Result of replaying a log file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedLog {
    /// Distinct annotations in log order; a repeated id keeps its first record.
    pub annotations: Vec<Annotation>,
    /// Records skipped because their id had already appeared.
    pub duplicates: usize,
    /// Byte length of the valid prefix of the file.
    pub valid_len: u64,
    /// Set when a torn final record was dropped.
    pub torn_tail: Option<String>,
}

/// Replays the log at `path` without modifying it. A missing file is an
/// empty log.
pub fn load_annotation_log(path: &Path) -> Result<LoadedLog> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LoadedLog::default()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let loaded = replay(&bytes, path)?;
    if let Some(reason) = &loaded.torn_tail {
        log::warn!(
            "{}: dropping torn final record after byte {} ({reason})",
            path.display(),
            loaded.valid_len
        );
    }
    Ok(loaded)
}

fn replay(bytes: &[u8], path: &Path) -> Result<LoadedLog> {
    let mut out = LoadedLog::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut pos = 0usize;
    let mut line_no = 0usize;
    while pos < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[pos..pos + i], pos + i + 1, true),
            None => (&bytes[pos..], bytes.len(), false),
        };
        let is_last = next == bytes.len();
        if !terminated {
            out.torn_tail = Some(format!("line {line_no} has no terminating newline"));
            break;
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            pos = next;
            out.valid_len = pos as u64;
            continue;
        }
        match serde_json::from_slice::<Annotation>(line) {
            Ok(a) => {
                if !seen.insert(a.annotation_id.clone()) {
                    out.duplicates += 1;
                } else {
                    out.annotations.push(a);
                }
            }
            Err(e) if is_last => {
                out.torn_tail = Some(format!("line {line_no}: {e}"));
                break;
            }
            Err(e) => {
                return Err(Error::CorruptLog {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        }
        pos = next;
        out.valid_len = pos as u64;
    }
    Ok(out)
}

/// Outcome of submitting an annotation.
#[derive(Debug, Clone, PartialEq)]
pub enum Submission {
    /// Newly appended.
    Created(Annotation),
    /// Identical replay of an existing record; nothing was written.
    Replayed(Annotation),
}

impl Submission {
    pub fn annotation(&self) -> &Annotation {
        match self {
            Submission::Created(a) | Submission::Replayed(a) => a,
        }
    }
}

/// Writable handle on a log file plus its replayed contents.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: File,
    records: Vec<Annotation>,
    index: HashMap<String, usize>,
}

impl AnnotationLog {
    /// Opens (creating if absent) and replays the log, truncating a torn tail.
    pub fn open(path: &Path) -> Result<Self> {
        let loaded = load_annotation_log(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len != loaded.valid_len {
            file.set_len(loaded.valid_len).map_err(|e| Error::io(path, e))?;
            file.sync_all().map_err(|e| Error::io(path, e))?;
        }
        let index = loaded
            .annotations
            .iter()
            .enumerate()
            .map(|(i, a)| (a.annotation_id.clone(), i))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records: loaded.annotations,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.records
    }

    pub fn get(&self, annotation_id: &str) -> Option<&Annotation> {
        self.index.get(annotation_id).map(|&i| &self.records[i])
    }

    /// Validates `input` and appends it durably, unless a record with the
    /// same id exists: an identical body is a replay, a different one a
    /// conflict.
    pub fn submit(
        &mut self,
        input: AnnotationInput,
        unit: UnitRef,
        lexicon: &Lexicon,
        timestamp_ms: u64,
    ) -> Result<Submission> {
        annotation::validate(&input, lexicon)?;
        if let Some(existing) = self.get(&input.annotation_id) {
            return if existing.same_body(&input, &unit) {
                Ok(Submission::Replayed(existing.clone()))
            } else {
                Err(Error::Conflict {
                    id: input.annotation_id,
                })
            };
        }
        let record = Annotation::from_input(input, unit, timestamp_ms);
        self.append(&record)?;
        Ok(Submission::Created(record))
    }

    fn append(&mut self, record: &Annotation) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        self.index.insert(record.annotation_id.clone(), self.records.len());
        self.records.push(record.clone());
        Ok(())
    }
}
