//! Table ingestion from CSV and JSONL files.
//!
//! CSV: the header row defines the schema; column kinds are inferred with an
//! Int -> Float -> Text fallback. A cell holding a `file://` URI becomes a
//! FILE value; metadata comes from a sidecar `<path>.meta.json` when present.
//! JSONL: one object per row, schema from the union of keys in field order of
//! the first row.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::data::{Column, FileRef, Row, Schema, Table, Value, ValueKind};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}:{line}: invalid JSON row: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("table error in {path}: {source}")]
    Table {
        path: PathBuf,
        source: crate::data::DataError,
    },
    #[error("unsupported table file extension: {0}")]
    UnsupportedExtension(PathBuf),
}

#[derive(Deserialize, Default)]
struct FileMeta {
    #[serde(default)]
    mime_type: Option<String>,
    #[serde(default)]
    size_bytes: Option<u64>,
    #[serde(default)]
    created_at: Option<i64>,
}

/// Loads every `.csv` / `.jsonl` file in a directory into a catalog keyed by
/// file stem.
pub fn load_dir(dir: &Path) -> Result<BTreeMap<String, Table>, IngestError> {
    let mut catalog = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("csv") | Some("jsonl")
            )
        })
        .collect();
    paths.sort();
    for path in paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        catalog.insert(name, load_table(&path)?);
    }
    Ok(catalog)
}

pub fn load_table(path: &Path) -> Result<Table, IngestError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(path),
        Some("jsonl") => load_jsonl(path),
        _ => Err(IngestError::UnsupportedExtension(path.to_path_buf())),
    }
}

fn parse_cell(raw: &str, base: &Path) -> Value {
    if raw.is_empty() {
        return Value::Null;
    }
    if let Some(rest) = raw.strip_prefix("file://") {
        return Value::File(file_ref_with_sidecar(raw, rest, base));
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Int(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Value::Float(f);
        }
    }
    Value::Text(raw.to_string())
}

fn file_ref_with_sidecar(uri: &str, local_path: &str, base: &Path) -> FileRef {
    let mut fr = FileRef::new(uri, "application/octet-stream");
    let candidate = if local_path.starts_with('/') {
        PathBuf::from(format!("{local_path}.meta.json"))
    } else {
        base.join(format!("{local_path}.meta.json"))
    };
    if let Ok(text) = fs::read_to_string(&candidate) {
        if let Ok(meta) = serde_json::from_str::<FileMeta>(&text) {
            if let Some(m) = meta.mime_type {
                fr.mime_type = m.to_ascii_lowercase();
            }
            if let Some(s) = meta.size_bytes {
                fr.size_bytes = s;
            }
            if let Some(c) = meta.created_at {
                fr.created_at = c;
            }
        }
    }
    fr
}

fn load_csv(path: &Path) -> Result<Table, IngestError> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let mut rows: Vec<Row> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        rows.push(record.iter().map(|c| parse_cell(c, &base)).collect());
    }
    let schema = infer_schema(&headers, &rows).map_err(|message| IngestError::Format {
        path: path.to_path_buf(),
        message,
    })?;
    let rows = coerce_rows(&schema, rows);
    Table::new(schema, rows).map_err(|source| IngestError::Table {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-column kind inference: Int if every non-null cell is Int, else Float
/// if every non-null cell is numeric, else Text; FILE and Bool only when all
/// cells agree.
fn infer_schema(headers: &[String], rows: &[Row]) -> Result<Schema, String> {
    let mut columns = Vec::with_capacity(headers.len());
    for (idx, name) in headers.iter().enumerate() {
        let mut kind: Option<ValueKind> = None;
        for row in rows {
            let cell = match row.get(idx) {
                Some(v) if !v.is_null() => v,
                _ => continue,
            };
            let ck = cell.kind().unwrap();
            kind = Some(match (kind, ck) {
                (None, k) => k,
                (Some(a), b) if a == b => a,
                (Some(ValueKind::Int), ValueKind::Float)
                | (Some(ValueKind::Float), ValueKind::Int) => ValueKind::Float,
                _ => ValueKind::Text,
            });
        }
        columns.push(Column {
            name: name.clone(),
            kind: kind.unwrap_or(ValueKind::Text),
        });
    }
    Schema::from_columns(columns).map_err(|e| e.to_string())
}

fn coerce_rows(schema: &Schema, rows: Vec<Row>) -> Vec<Row> {
    rows.into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&schema.columns)
                .map(|(v, col)| match (&v, col.kind) {
                    (Value::Null, _) => Value::Null,
                    (Value::Int(i), ValueKind::Text) => Value::Text(i.to_string()),
                    (Value::Float(f), ValueKind::Text) => Value::Text(f.to_string()),
                    (Value::Int(i), ValueKind::Float) => Value::Float(*i as f64),
                    _ => v,
                })
                .collect()
        })
        .collect()
}

fn load_jsonl(path: &Path) -> Result<Table, IngestError> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut headers: Vec<String> = Vec::new();
    let mut objects: Vec<serde_json::Map<String, serde_json::Value>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
            .map_err(|e| IngestError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        for key in obj.keys() {
            if !headers.iter().any(|h| h == key) {
                headers.push(key.clone());
            }
        }
        objects.push(obj);
    }
    let rows: Vec<Row> = objects
        .iter()
        .map(|obj| {
            headers
                .iter()
                .map(|h| match obj.get(h) {
                    None | Some(serde_json::Value::Null) => Value::Null,
                    Some(serde_json::Value::Bool(b)) => Value::Bool(*b),
                    Some(serde_json::Value::Number(n)) => {
                        if let Some(i) = n.as_i64() {
                            Value::Int(i)
                        } else {
                            Value::Float(n.as_f64().unwrap_or(0.0))
                        }
                    }
                    Some(serde_json::Value::String(s)) => parse_string_cell(s, &base),
                    Some(other) => Value::Text(other.to_string()),
                })
                .collect()
        })
        .collect();
    let schema = infer_schema(&headers, &rows).map_err(|message| IngestError::Format {
        path: path.to_path_buf(),
        message,
    })?;
    let rows = coerce_rows(&schema, rows);
    Table::new(schema, rows).map_err(|source| IngestError::Table {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_string_cell(s: &str, base: &Path) -> Value {
    if let Some(rest) = s.strip_prefix("file://") {
        Value::File(file_ref_with_sidecar(s, rest, base))
    } else {
        Value::Text(s.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn csv_kind_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "id,score,name").unwrap();
        writeln!(f, "1,0.5,alpha").unwrap();
        writeln!(f, "2,3,beta").unwrap();
        writeln!(f, "3,,").unwrap();
        let t = load_table(&path).unwrap();
        assert_eq!(t.schema.columns[0].kind, ValueKind::Int);
        assert_eq!(t.schema.columns[1].kind, ValueKind::Float);
        assert_eq!(t.schema.columns[2].kind, ValueKind::Text);
        assert_eq!(t.rows[1][1], Value::Float(3.0));
        assert_eq!(t.rows[2][2], Value::Null);
    }

    #[test]
    fn csv_file_uri_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        fs::write(&img, b"png").unwrap();
        fs::write(
            dir.path().join("a.png.meta.json"),
            r#"{"mime_type":"image/PNG","size_bytes":3,"created_at":100}"#,
        )
        .unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "f\nfile://a.png\nfile://missing.bin\n").unwrap();
        let t = load_table(&path).unwrap();
        match &t.rows[0][0] {
            Value::File(fr) => {
                assert_eq!(fr.mime_type, "image/png");
                assert_eq!(fr.size_bytes, 3);
                assert_eq!(fr.created_at, 100);
            }
            other => panic!("expected file, got {other:?}"),
        }
        match &t.rows[1][0] {
            Value::File(fr) => assert_eq!(fr.mime_type, "application/octet-stream"),
            other => panic!("expected file, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(
            &path,
            "{\"a\":1,\"b\":\"x\"}\n{\"a\":2,\"b\":null}\n",
        )
        .unwrap();
        let t = load_table(&path).unwrap();
        assert_eq!(t.stats.row_count, 2);
        assert_eq!(t.rows[1][1], Value::Null);
    }

    #[test]
    fn jsonl_bad_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "{\"a\":1}\nnot json\n").unwrap();
        match load_table(&path) {
            Err(IngestError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected json error, got {other:?}"),
        }
    }
}
