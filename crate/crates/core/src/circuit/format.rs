//! JSON document format for circuits.
//!
//! ```json
//! { "format": "c2mf-circuit", "version": 1, "circuit": { ... } }
//! ```
//!
//! Writing is deterministic, so reading and re-writing a document yields the
//! same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate, Circuit, ValidationReport};

pub const FORMAT_NAME: &str = "c2mf-circuit";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed circuit document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown document format `{0}`")]
    UnknownFormat(String),
    #[error("unsupported circuit format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid circuit: {0}")]
    Invalid(ValidationReport),
}

#[derive(Serialize, Deserialize)]
struct Document<C> {
    format: String,
    version: u32,
    circuit: C,
}

pub fn to_json(circuit: &Circuit) -> String {
    serde_json::to_string_pretty(&Document {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        circuit,
    })
    .expect("circuit serialization cannot fail")
}

/// Parses and validates a circuit document.
pub fn from_json(text: &str) -> Result<Circuit, FormatError> {
    let doc: Document<Circuit> = serde_json::from_str(text)?;
    if doc.format != FORMAT_NAME {
        return Err(FormatError::UnknownFormat(doc.format));
    }
    if doc.version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(doc.version));
    }
    let report = validate(&doc.circuit);
    if !report.is_ok() {
        return Err(FormatError::Invalid(report));
    }
    Ok(doc.circuit)
}

pub fn write_file(circuit: &Circuit, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, to_json(circuit))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Circuit, FormatError> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_random_tensorized, StructureConfig};

    #[test]
    fn round_trip_is_byte_identical() {
        let c = build_random_tensorized(&[4, 2], 3, &StructureConfig::default(), 11).unwrap();
        let text = to_json(&c);
        let back = from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_json(&back), text);
    }

    #[test]
    fn rejects_foreign_documents() {
        let c = build_random_tensorized(&[2], 2, &StructureConfig { depth: 1, ..Default::default() }, 0).unwrap();
        let text = to_json(&c).replace(FORMAT_NAME, "something-else");
        assert!(matches!(from_json(&text), Err(FormatError::UnknownFormat(_))));
        let text = to_json(&c).replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(from_json(&text), Err(FormatError::UnsupportedVersion(9))));
    }
}
