//! Result-table rendering: fixed-width text, CSV, and JSON.

use semql::{Table, Value};

/// Aligned text table: header row, dashed rule, then data rows.
pub fn render_table(table: &Table) -> String {
    let headers: Vec<&str> = table.schema.columns.iter().map(|c| c.name.as_str()).collect();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|row| row.iter().map(Value::render).collect())
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let push_row = |cells: &[&str], out: &mut String| {
        let line: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    push_row(&headers, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        push_row(&cells, &mut out);
    }
    out.push_str(&format!("({} rows)\n", rows.len()));
    out
}

pub fn render_csv(table: &Table) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let headers: Vec<&str> = table.schema.columns.iter().map(|c| c.name.as_str()).collect();
    wtr.write_record(&headers).expect("csv header");
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(Value::render).collect();
        wtr.write_record(&cells).expect("csv row");
    }
    String::from_utf8(wtr.into_inner().expect("csv flush")).expect("csv utf8")
}

fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Null => serde_json::Value::Null,
        Value::Bool(b) => serde_json::Value::Bool(*b),
        Value::Int(i) => serde_json::json!(i),
        Value::Float(f) => serde_json::json!(f),
        Value::Text(_) | Value::File(_) => serde_json::Value::String(v.render()),
    }
}

/// JSON array of objects keyed by output column name, one per row.
pub fn render_json(table: &Table) -> String {
    let objects: Vec<serde_json::Value> = table
        .rows
        .iter()
        .map(|row| {
            let map: serde_json::Map<String, serde_json::Value> = table
                .schema
                .columns
                .iter()
                .zip(row)
                .map(|(c, v)| (c.name.clone(), value_to_json(v)))
                .collect();
            serde_json::Value::Object(map)
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&objects).expect("json render");
    text.push('\n');
    text
}
