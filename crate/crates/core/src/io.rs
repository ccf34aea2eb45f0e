// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution documents on disk and dataset ingestion.
//!
//! Documents are canonical JSON: keys sorted, floats in shortest
//! round-trip form, two-space indentation and a trailing newline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attribution::{AttributionMetadata, AttributionRequest, FeatureAttributionOutput, SequenceAttribution};
use crate::error::{Error, Result};

pub const DOCUMENT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionDocument {
    pub format_version: String,
    pub metadata: AttributionMetadata,
    pub sequences: Vec<SequenceAttribution>,
}

impl From<FeatureAttributionOutput> for AttributionDocument {
    fn from(out: FeatureAttributionOutput) -> Self {
        Self {
            format_version: DOCUMENT_VERSION.to_string(),
            metadata: out.metadata,
            sequences: out.sequences,
        }
    }
}

impl From<AttributionDocument> for FeatureAttributionOutput {
    fn from(doc: AttributionDocument) -> Self {
        Self {
            metadata: doc.metadata,
            sequences: doc.sequences,
        }
    }
}

/// A parsed document plus the keys that were ignored while reading it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDocument {
    pub document: AttributionDocument,
    /// JSON paths of unknown keys.
    pub ignored_keys: Vec<String>,
}

/// Canonical text of a document.
pub fn to_canonical_json(doc: &AttributionDocument) -> Result<String> {
    // `Value` keeps objects in a `BTreeMap`, which sorts the keys.
    let value = serde_json::to_value(doc).map_err(|e| Error::Parse {
        offset: 0,
        detail: e.to_string(),
    })?;
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| Error::Parse {
        offset: 0,
        detail: e.to_string(),
    })?;
    text.push('\n');
    Ok(text)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        detail: e.to_string(),
    }
}

/// Keys present in `raw` but absent from `known`.
fn unknown_keys(raw: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    match (raw, known) {
        (Value::Object(r), Value::Object(k)) => {
            for (key, value) in r {
                let here = format!("{path}.{key}");
                match k.get(key) {
                    Some(kv) => unknown_keys(value, kv, &here, out),
                    None => out.push(here),
                }
            }
        }
        (Value::Array(r), Value::Array(k)) => {
            for (i, (rv, kv)) in r.iter().zip(k).enumerate() {
                unknown_keys(rv, kv, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses a document. Unknown keys are ignored and reported.
pub fn parse_document(text: &str) -> Result<LoadedDocument> {
    let raw: Value = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let version = raw.get("format_version").ok_or(Error::Parse {
        offset: 0,
        detail: "missing format_version".into(),
    })?;
    let found = match version {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if found != DOCUMENT_VERSION {
        return Err(Error::Version {
            found,
            expected: DOCUMENT_VERSION.to_string(),
        });
    }
    let document: AttributionDocument = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let known = serde_json::to_value(&document).map_err(|e| Error::Parse {
        offset: 0,
        detail: e.to_string(),
    })?;
    let mut ignored_keys = Vec::new();
    unknown_keys(&raw, &known, "$", &mut ignored_keys);
    for key in &ignored_keys {
        log::warn!("ignoring unknown key {key}");
    }
    Ok(LoadedDocument { document, ignored_keys })
}

pub fn save_document(doc: &AttributionDocument, path: &Path) -> Result<()> {
    let text = to_canonical_json(doc)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_document(path: &Path) -> Result<LoadedDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// One source text per line.
    #[default]
    Lines,
    /// Tab-separated columns.
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub source_column: usize,
    /// Column holding forced targets.
    pub target_column: Option<usize>,
}

impl DatasetSource {
    /// A plain file with one input per line.
    pub fn lines(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            format: DatasetFormat::Lines,
            source_column: 0,
            target_column: None,
        }
    }

    /// A two-column `source<TAB>target` file.
    pub fn pairs(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            format: DatasetFormat::Tsv,
            source_column: 0,
            target_column: Some(1),
        }
    }
}

/// Rows read from a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub inputs: Vec<String>,
    pub forced_targets: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Consecutive row ranges of at most `batch_size` rows.
    pub fn batches(&self, batch_size: usize) -> Vec<std::ops::Range<usize>> {
        let size = batch_size.max(1);
        (0..self.len()).step_by(size).map(|s| s..(s + size).min(self.len())).collect()
    }

    pub fn into_request(self, max_new_tokens: usize, batch_size: usize) -> AttributionRequest {
        AttributionRequest {
            forced_targets: self.forced_targets,
            max_new_tokens,
            batch_size: Some(batch_size.max(1)),
            ..AttributionRequest::new(self.inputs)
        }
    }
}

/// Parses dataset text. Blank lines are skipped.
pub fn parse_dataset(text: &str, source: &DatasetSource) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut targets = source.target_column.map(|_| Vec::new());
    let mut width = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let columns: Vec<&str> = match source.format {
            DatasetFormat::Lines => vec![line],
            DatasetFormat::Tsv => line.split('\t').collect(),
        };
        if *width.get_or_insert(columns.len()) != columns.len() {
            return Err(Error::Dataset(format!(
                "line {} has {} columns, expected {}",
                n + 1,
                columns.len(),
                width.unwrap_or(0)
            )));
        }
        let column = |c: usize| {
            columns
                .get(c)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Dataset(format!("line {} has no value in column {c}", n + 1)))
        };
        inputs.push(column(source.source_column)?);
        if let (Some(t), Some(c)) = (targets.as_mut(), source.target_column) {
            t.push(column(c)?);
        }
    }
    if inputs.is_empty() {
        return Err(Error::Dataset("dataset has no rows".into()));
    }
    Ok(Dataset {
        inputs,
        forced_targets: targets,
    })
}

pub fn ingest_dataset(source: &DatasetSource) -> Result<Dataset> {
    let text = std::fs::read_to_string(&source.path).map_err(|e| Error::io(&source.path, e))?;
    parse_dataset(&text, source)
}
