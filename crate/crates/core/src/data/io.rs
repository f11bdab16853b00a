use std::collections::HashSet;
use std::path::Path;

use serde_json::{Map, Value};

use super::{DataError, MemeRecord, Vocab};
use crate::fsutil;

/// Records from a dataset file plus the optional `{"meta": ...}` header.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Option<Value>,
    pub records: Vec<MemeRecord>,
}

impl Dataset {
    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(line: usize, field: &str, reason: impl Into<String>) -> DataError {
    DataError::Malformed {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn number_rows(v: &Value, line: usize, field: &str) -> Result<Vec<Vec<f64>>, DataError> {
    let rows = v
        .as_array()
        .ok_or_else(|| malformed(line, field, "expected an array of arrays"))?;
    rows.iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| malformed(line, field, "expected an array of numbers"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| malformed(line, field, "expected a number")))
                .collect()
        })
        .collect()
}

fn parse_record(obj: &Map<String, Value>, line: usize) -> Result<MemeRecord, DataError> {
    const KNOWN: [&str; 6] = ["id", "label", "text", "caption", "features", "boxes"];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(malformed(line, k, "unknown field"));
    }
    let string = |key: &str| -> Result<Option<String>, DataError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(malformed(line, key, "expected a string")),
        }
    };
    let id = string("id")?.ok_or_else(|| malformed(line, "id", "missing"))?;
    let text = string("text")?.ok_or_else(|| malformed(line, "text", "missing"))?;
    let caption = string("caption")?;
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_u64() {
            Some(l @ (0 | 1)) => Some(l as u8),
            _ => return Err(malformed(line, "label", "label must be 0 or 1")),
        },
    };
    let features = number_rows(
        obj.get("features")
            .ok_or_else(|| malformed(line, "features", "missing"))?,
        line,
        "features",
    )?;
    let boxes = number_rows(
        obj.get("boxes").ok_or_else(|| malformed(line, "boxes", "missing"))?,
        line,
        "boxes",
    )?
    .into_iter()
    .map(|b| <[f64; 4]>::try_from(b).map_err(|_| malformed(line, "boxes", "each box needs 4 numbers")))
    .collect::<Result<Vec<_>, _>>()?;
    let record = MemeRecord {
        id,
        label,
        text,
        caption,
        features,
        boxes,
    };
    record
        .check()
        .map_err(|(field, reason)| malformed(line, field, reason))?;
    Ok(record)
}

/// Reads a line-delimited dataset file, validating every record.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut meta = None;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| malformed(line, "<line>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(line, "<line>", "expected an object"))?;
        if records.is_empty() && meta.is_none() && obj.len() == 1 && obj.contains_key("meta") {
            meta = obj.get("meta").cloned();
            continue;
        }
        let record = parse_record(obj, line)?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId { id: record.id, line });
        }
        records.push(record);
    }
    Ok(Dataset { meta, records })
}

/// Serializes a dataset to its line-delimited form.
pub fn dataset_to_string(meta: Option<&Value>, records: &[MemeRecord]) -> String {
    let mut out = String::new();
    if let Some(m) = meta {
        out.push_str(&serde_json::json!({ "meta": m }).to_string());
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Writes the dataset atomically (temp file + rename).
pub fn write_dataset(path: impl AsRef<Path>, meta: Option<&Value>, records: &[MemeRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    fsutil::write_atomic(path, dataset_to_string(meta, records).as_bytes()).map_err(|e| io_err(path, e))
}

/// One token per line, line number = id.
pub fn write_vocab(path: impl AsRef<Path>, vocab: &Vocab) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    fsutil::write_atomic(path, s.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_vocab(path: impl AsRef<Path>) -> Result<Vocab, DataError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let tokens: Vec<String> = content.lines().map(str::to_string).collect();
    let vocab = Vocab::from_tokens(tokens.iter().skip(4).cloned().collect());
    if vocab.tokens() != tokens.as_slice() {
        return Err(malformed(
            1,
            "vocab",
            "reserved tokens must occupy ids 0..4 and tokens must be unique",
        ));
    }
    Ok(vocab)
}
