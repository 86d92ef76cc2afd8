//! Line-delimited record I/O. Every record is one JSON object per line with
//! a self-describing `kind` field; field names match the domain types.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: expected kind `{expected}`, found `{found}`")]
    WrongKind {
        line: usize,
        expected: String,
        found: String,
    },
}

/// A type with a canonical record form.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

/// Serializes one record (no trailing newline).
pub fn to_line<T: Record>(value: &T) -> String {
    let mut obj = Map::new();
    obj.insert("kind".into(), Value::String(T::KIND.into()));
    match serde_json::to_value(value).expect("record types serialize to JSON") {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("value".into(), other);
        }
    }
    Value::Object(obj).to_string()
}

pub fn from_line<T: Record>(line: &str, line_no: usize) -> Result<T, RecordError> {
    let value: Value = serde_json::from_str(line).map_err(|e| RecordError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(RecordError::Malformed {
            line: line_no,
            message: "record is not an object".into(),
        });
    };
    match obj.remove("kind") {
        Some(Value::String(kind)) if kind == T::KIND => {}
        Some(Value::String(kind)) => {
            return Err(RecordError::WrongKind {
                line: line_no,
                expected: T::KIND.into(),
                found: kind,
            })
        }
        _ => {
            return Err(RecordError::Malformed {
                line: line_no,
                message: "missing `kind` field".into(),
            })
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| RecordError::Malformed {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn parse_lines<T: Record>(text: &str) -> Result<Vec<T>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| from_line(l, i + 1))
        .collect()
}

pub fn read_file<T: Record>(path: &Path) -> Result<Vec<T>, RecordError> {
    let io = |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_file<'a, T: Record + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), RecordError> {
    let io = |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        writeln!(w, "{}", to_line(item)).map_err(io)?;
    }
    w.flush().map_err(io)
}
