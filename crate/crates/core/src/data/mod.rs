//! Meme records, tokenization, dataset files and the synthetic confounder generator.

mod io;
mod split;
mod synthetic;
mod vocab;

pub use io::{load_dataset, read_vocab, write_dataset, write_vocab, Dataset};
pub use split::{group_key, split_dataset, Splits};
pub use synthetic::{
    generate_synthetic, unimodal_majority_accuracy, Concepts, SyntheticDataset, SyntheticSpec, IMG_CONF_SUFFIX,
    TXT_CONF_SUFFIX,
};
pub use vocab::{build_vocab, tokenize, tokenize_with_info, words, Vocab, CLS, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{reason}, line {line} (field `{field}`)")]
    Malformed { line: usize, field: String, reason: String },
    #[error("duplicate id {id:?}, line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// One meme: OCR text, inferred caption and precomputed region features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
}

impl MemeRecord {
    pub fn num_regions(&self) -> usize {
        self.features.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Checks record invariants; returns the offending field and reason.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if let Some(l) = self.label {
            if l > 1 {
                return Err(("label", format!("label must be 0 or 1, got {l}")));
            }
        }
        if self.features.is_empty() {
            return Err(("features", "at least one region required".into()));
        }
        let d = self.feat_dim();
        if d == 0 || self.features.iter().any(|f| f.len() != d) {
            return Err(("features", "every region needs the same non-zero feature length".into()));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(("features", "non-finite feature value".into()));
        }
        if self.boxes.len() != self.features.len() {
            return Err((
                "boxes",
                format!("{} boxes for {} regions", self.boxes.len(), self.features.len()),
            ));
        }
        for b in &self.boxes {
            if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(("boxes", "box coordinates outside [0,1]".into()));
            }
            if b[0] > b[2] {
                return Err(("boxes", "x1≤x2 violated".into()));
            }
            if b[1] > b[3] {
                return Err(("boxes", "y1≤y2 violated".into()));
            }
        }
        Ok(())
    }
}
