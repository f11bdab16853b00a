use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Predictions, RocCurve};
use crate::fsutil;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    proba: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Line-delimited `{"id", "proba", "label"?}` objects.
pub fn write_predictions(path: impl AsRef<Path>, preds: &Predictions) -> Result<(), EvalError> {
    let path = path.as_ref();
    preds.validate()?;
    let mut out = String::new();
    for (i, (id, &proba)) in preds.ids.iter().zip(&preds.probs).enumerate() {
        let line = Line {
            id: id.clone(),
            proba,
            label: preds.labels.as_ref().map(|l| l[i]),
        };
        out.push_str(&serde_json::to_string(&line).expect("prediction lines serialize"));
        out.push('\n');
    }
    fsutil::write_atomic(path, out.as_bytes()).map_err(|e| io_err(path, e))
}

/// Reads a prediction file; labels must be present on all lines or on none.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Predictions, EvalError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (mut ids, mut probs, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, raw) in content.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| EvalError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        ids.push(line.id);
        probs.push(line.proba);
        labels.push(line.label);
    }
    let labels = match labels.iter().filter(|l| l.is_some()).count() {
        0 => None,
        n if n == labels.len() => Some(labels.into_iter().flatten().collect()),
        _ => return Err(EvalError::Invalid("labels present on some lines only".into())),
    };
    Predictions::new(ids, probs, labels)
}

/// `threshold,fpr,tpr` with a header row and 6 decimals.
pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        if p.threshold.is_infinite() {
            s.push_str("inf");
        } else {
            write!(s, "{:.6}", p.threshold).unwrap();
        }
        writeln!(s, ",{:.6},{:.6}", p.fpr, p.tpr).unwrap();
    }
    s
}

pub fn write_roc_csv(path: impl AsRef<Path>, curve: &RocCurve) -> Result<(), EvalError> {
    let path = path.as_ref();
    fsutil::write_atomic(path, roc_to_csv(curve).as_bytes()).map_err(|e| io_err(path, e))
}
