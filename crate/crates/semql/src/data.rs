//! Relational data model shared by the whole engine: values, schemas,
//! in-memory tables, prompt templates, token accounting, and table statistics.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference to an external file (image, document, ...). The engine never
/// reads file contents; interpretation is delegated to providers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRef {
    pub uri: String,
    pub mime_type: String,
    pub size_bytes: u64,
    /// Seconds since the Unix epoch.
    pub created_at: i64,
}

impl FileRef {
    pub fn new(uri: impl Into<String>, mime_type: impl Into<String>) -> Self {
        FileRef {
            uri: uri.into(),
            mime_type: mime_type.into().to_ascii_lowercase(),
            size_bytes: 0,
            created_at: 0,
        }
    }
}

// Equality is by uri only; metadata is advisory so joins on FILE columns stay stable.
impl PartialEq for FileRef {
    fn eq(&self, other: &Self) -> bool {
        self.uri == other.uri
    }
}
impl Eq for FileRef {}

impl std::hash::Hash for FileRef {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.uri.hash(state);
    }
}

/// True iff the file's mime type is in the `image/` family.
pub fn fl_is_image(f: &FileRef) -> bool {
    f.mime_type.starts_with("image/")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    Bool,
    Int,
    Float,
    Text,
    File,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Bool => "bool",
            ValueKind::Int => "int",
            ValueKind::Float => "float",
            ValueKind::Text => "text",
            ValueKind::File => "file",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    File(FileRef),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("type error: cannot compare {0} with {1}")]
    IncomparableKinds(ValueKind, ValueKind),
    #[error("arity mismatch: template has {expected} bindings, got {got} values")]
    ArityMismatch { expected: usize, got: usize },
    #[error("row length {got} does not match schema arity {expected}")]
    RowArity { expected: usize, got: usize },
    #[error("value kind {got} does not match declared kind {expected} for column '{column}'")]
    KindMismatch {
        column: String,
        expected: ValueKind,
        got: ValueKind,
    },
    #[error("duplicate column name '{0}' (case-insensitive)")]
    DuplicateColumn(String),
    #[error("float value is not finite")]
    NonFiniteFloat,
}

impl Value {
    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            Value::Null => None,
            Value::Bool(_) => Some(ValueKind::Bool),
            Value::Int(_) => Some(ValueKind::Int),
            Value::Float(_) => Some(ValueKind::Float),
            Value::Text(_) => Some(ValueKind::Text),
            Value::File(_) => Some(ValueKind::File),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn float(v: f64) -> Result<Value, DataError> {
        if v.is_finite() {
            Ok(Value::Float(v))
        } else {
            Err(DataError::NonFiniteFloat)
        }
    }

    /// Text used when substituting this value into a prompt, and when
    /// displaying result rows. FileRefs render as their uri.
    pub fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Bool(b) => b.to_string(),
            Value::Int(i) => i.to_string(),
            Value::Float(f) => {
                if f.fract() == 0.0 && f.abs() < 1e15 {
                    format!("{:.1}", f)
                } else {
                    f.to_string()
                }
            }
            Value::Text(s) => s.clone(),
            Value::File(fr) => fr.uri.clone(),
        }
    }

    /// Three-valued comparison: NULL compares as NULL (None); different
    /// non-null variants are a type error, not a coercion. Int and Float
    /// are both numeric and compare exactly.
    pub fn compare(&self, other: &Value) -> Result<Option<std::cmp::Ordering>, DataError> {
        use std::cmp::Ordering;
        let ord = match (self, other) {
            (Value::Null, _) | (_, Value::Null) => return Ok(None),
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Float(a), Value::Float(b)) => {
                a.partial_cmp(b).expect("floats are finite by invariant")
            }
            (Value::Int(a), Value::Float(b)) => (*a as f64)
                .partial_cmp(b)
                .expect("floats are finite by invariant"),
            (Value::Float(a), Value::Int(b)) => a
                .partial_cmp(&(*b as f64))
                .expect("floats are finite by invariant"),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::File(a), Value::File(b)) => a.uri.cmp(&b.uri),
            (a, b) => {
                return Err(DataError::IncomparableKinds(
                    a.kind().unwrap(),
                    b.kind().unwrap(),
                ))
            }
            };
        let _ = Ordering::Equal;
        Ok(Some(ord))
    }

    /// Equality for joins and grouping. NULL never equals anything.
    pub fn eq_value(&self, other: &Value) -> Result<bool, DataError> {
        Ok(self.compare(other)? == Some(std::cmp::Ordering::Equal))
    }

    /// Canonical key for distinct counting and hash joins. NULLs get their
    /// own bucket (they never join, callers filter them out first).
    pub fn group_key(&self) -> String {
        match self {
            Value::Null => "\u{0}null".to_string(),
            Value::Bool(b) => format!("b:{b}"),
            Value::Int(i) => format!("n:{i}"),
            Value::Float(f) => {
                if f.fract() == 0.0 && f.abs() < 9e15 {
                    format!("n:{}", *f as i64)
                } else {
                    format!("f:{f}")
                }
            }
            Value::Text(s) => format!("t:{s}"),
            Value::File(fr) => format!("u:{}", fr.uri),
        }
    }
}

/// Approximate token count: ceil(bytes / 4). 0 for empty text.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<(&str, ValueKind)>) -> Result<Schema, DataError> {
        Schema::from_columns(
            columns
                .into_iter()
                .map(|(n, k)| Column {
                    name: n.to_string(),
                    kind: k,
                })
                .collect(),
        )
    }

    pub fn from_columns(columns: Vec<Column>) -> Result<Schema, DataError> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.to_ascii_lowercase()) {
                return Err(DataError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(Schema { columns })
    }

    pub fn arity(&self) -> usize {
        self.columns.len()
    }

    /// Case-insensitive column lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.name.eq_ignore_ascii_case(name))
    }
}

pub type Row = Vec<Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub distinct_count: u64,
    pub avg_token_count: f64,
    pub sample_values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TableStats {
    pub row_count: u64,
    pub columns: Vec<ColumnStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Row>,
    pub stats: TableStats,
}

impl Table {
    /// Builds a table, validating every row against the schema and
    /// computing statistics.
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Table, DataError> {
        for row in &rows {
            if row.len() != schema.arity() {
                return Err(DataError::RowArity {
                    expected: schema.arity(),
                    got: row.len(),
                });
            }
            for (value, col) in row.iter().zip(&schema.columns) {
                if let Some(kind) = value.kind() {
                    let ok = kind == col.kind
                        || (col.kind == ValueKind::Float && kind == ValueKind::Int);
                    if !ok {
                        return Err(DataError::KindMismatch {
                            column: col.name.clone(),
                            expected: col.kind,
                            got: kind,
                        });
                    }
                }
            }
        }
        let mut table = Table {
            schema,
            rows,
            stats: TableStats::default(),
        };
        table.stats = compute_stats(&table);
        Ok(table)
    }
}

/// Exact per-column statistics: distinct counts, average token counts over
/// non-null values, and the first 10 distinct values in row order.
pub fn compute_stats(table: &Table) -> TableStats {
    let mut columns = Vec::with_capacity(table.schema.arity());
    for col_idx in 0..table.schema.arity() {
        let mut distinct = BTreeSet::new();
        let mut samples = Vec::new();
        let mut token_sum = 0u64;
        let mut non_null = 0u64;
        for row in &table.rows {
            let v = &row[col_idx];
            if v.is_null() {
                continue;
            }
            non_null += 1;
            token_sum += estimate_tokens(&v.render());
            if distinct.insert(v.group_key()) && samples.len() < 10 {
                samples.push(v.clone());
            }
        }
        columns.push(ColumnStats {
            distinct_count: distinct.len() as u64,
            avg_token_count: if non_null == 0 {
                0.0
            } else {
                token_sum as f64 / non_null as f64
            },
            sample_values: samples,
        });
    }
    TableStats {
        row_count: table.rows.len() as u64,
        columns,
    }
}

/// A natural-language template with positional placeholders `{0}..{k}`
/// bound to column references (possibly spanning two join sides).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template: String,
    /// Column references, one per binding index.
    pub bindings: Vec<ColumnRef>,
}

/// A possibly-qualified column reference, e.g. `p.abstract` or `review`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub qualifier: Option<String>,
    pub name: String,
}

impl ColumnRef {
    pub fn bare(name: impl Into<String>) -> ColumnRef {
        ColumnRef {
            qualifier: None,
            name: name.into(),
        }
    }

    pub fn qualified(q: impl Into<String>, name: impl Into<String>) -> ColumnRef {
        ColumnRef {
            qualifier: Some(q.into()),
            name: name.into(),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.qualifier {
            Some(q) => write!(f, "{}.{}", q, self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl PromptTemplate {
    /// Validates that every placeholder index is in range and every binding
    /// is referenced at least once.
    pub fn new(template: impl Into<String>, bindings: Vec<ColumnRef>) -> Result<Self, String> {
        let template = template.into();
        let mut used = vec![false; bindings.len()];
        for idx in placeholder_indices(&template) {
            match used.get_mut(idx) {
                Some(slot) => *slot = true,
                None => {
                    return Err(format!(
                        "placeholder {{{idx}}} out of range for {} bindings",
                        bindings.len()
                    ))
                }
            }
        }
        if let Some(unused) = used.iter().position(|u| !u) {
            return Err(format!("binding {unused} is never referenced"));
        }
        Ok(PromptTemplate { template, bindings })
    }

    /// A template with no placeholders (bare-string AI call argument).
    pub fn bare(text: impl Into<String>) -> Self {
        PromptTemplate {
            template: text.into(),
            bindings: Vec::new(),
        }
    }
}

fn placeholder_indices(template: &str) -> Vec<usize> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(close) = template[i + 1..].find('}') {
                let inner = &template[i + 1..i + 1 + close];
                if let Ok(idx) = inner.parse::<usize>() {
                    out.push(idx);
                    i += close + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// Substitutes placeholders verbatim; other braces are left untouched.
pub fn render_prompt(t: &PromptTemplate, row_values: &[Value]) -> Result<String, DataError> {
    if row_values.len() != t.bindings.len() {
        return Err(DataError::ArityMismatch {
            expected: t.bindings.len(),
            got: row_values.len(),
        });
    }
    let mut out = String::with_capacity(t.template.len());
    let bytes = t.template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(close) = t.template[i + 1..].find('}') {
                let inner = &t.template[i + 1..i + 1 + close];
                if let Ok(idx) = inner.parse::<usize>() {
                    out.push_str(&row_values[idx].render());
                    i += close + 2;
                    continue;
                }
            }
        }
        let ch = t.template[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    Ok(out)
}
