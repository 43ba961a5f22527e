//! `semql bench`: runs a sweep scenario and emits a CSV of call counts,
//! wall time, and quality metrics, followed by a speedup table normalized
//! to the first strategy.
//!
//! Scenario JSON:
//! ```json
//! {
//!   "tables": {
//!     "docs": {"rows": 200, "columns": [
//!       {"name": "id", "kind": "int"},
//!       {"name": "tag", "kind": "text", "distinct": 10},
//!       {"name": "body", "kind": "text", "pattern": "entry {i} ok"}
//!     ]}
//!   },
//!   "query": "SELECT * FROM docs WHERE tag IN ({value}) AND AI_FILTER(PROMPT('Keep {0}?', body))",
//!   "sweep": {"param": "in_list", "values": ["'tag0'", "'tag0','tag1'"]},
//!   "strategies": ["reorder=off,placement=pushdown,rewrite=off", "reorder=on,placement=auto,rewrite=on"],
//!   "providers": [{"name": "default", "kind": "consistent", "params": {"pairs": [["entry 0 ok", "yes"]]}}],
//!   "ground_truth": {"optimizer": "reorder=on,placement=auto,rewrite=on"}
//! }
//! ```
//!
//! Generated columns: `int` yields `i % distinct` (distinct defaults to the
//! row count); `text` renders `pattern` with `{i}` -> row index and `{v}` ->
//! `i % distinct` (default pattern `"<name>{v}"`). A sweep param named
//! `<table>.rows` resizes that table instead of substituting into the query;
//! any other param replaces `{value}` in the query text.
//!
//! Strategies are optimizer specs (see `--optimizer`) or objects
//! `{"name": ..., "optimizer": ..., "cascade": ...}`. Quality metrics are
//! computed against the `ground_truth` strategy's output when present.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::Deserialize;

use semql::data::{Schema, ValueKind};
use semql::exec::{execute, ExecOptions, ProviderSet};
use semql::models::ProviderConfig;
use semql::{Table, Value};

use crate::{
    exec_options, load_catalog, map_exec_error, parse_cascade, parse_optimizer, prepare, CliError,
    Common,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Scenario {
    #[serde(default)]
    tables: BTreeMap<String, TableSpec>,
    query: String,
    sweep: Sweep,
    strategies: Vec<StrategySpec>,
    #[serde(default)]
    providers: Option<Vec<ProviderConfig>>,
    #[serde(default)]
    ground_truth: Option<StrategyDetail>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableSpec {
    rows: u64,
    columns: Vec<ColSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ColSpec {
    name: String,
    kind: String,
    #[serde(default)]
    distinct: Option<u64>,
    #[serde(default)]
    pattern: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Sweep {
    param: String,
    values: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StrategySpec {
    Spec(String),
    Detailed(StrategyDetail),
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct StrategyDetail {
    #[serde(default)]
    name: Option<String>,
    #[serde(default = "default_optimizer")]
    optimizer: String,
    #[serde(default)]
    cascade: Option<String>,
}

fn default_optimizer() -> String {
    "reorder=on,placement=auto,rewrite=on".into()
}

struct Strategy {
    label: String,
    optimizer: String,
    cascade: Option<String>,
}

impl Strategy {
    fn from_spec(spec: &StrategySpec) -> Strategy {
        match spec {
            StrategySpec::Spec(s) => Strategy {
                label: s.clone(),
                optimizer: s.clone(),
                cascade: None,
            },
            StrategySpec::Detailed(d) => Strategy {
                label: d.name.clone().unwrap_or_else(|| d.optimizer.clone()),
                optimizer: d.optimizer.clone(),
                cascade: d.cascade.clone(),
            },
        }
    }
}

fn render_sweep_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn gen_table(spec: &TableSpec, rows: u64) -> Result<Table, CliError> {
    let mut columns = Vec::new();
    for col in &spec.columns {
        let kind = match col.kind.as_str() {
            "int" => ValueKind::Int,
            "text" => ValueKind::Text,
            other => {
                return Err(CliError::Sql(format!(
                    "ScenarioParseError: column kind '{other}' (use int or text)"
                )))
            }
        };
        columns.push((col.name.as_str(), kind));
    }
    let schema = Schema::new(columns)
        .map_err(|e| CliError::Sql(format!("ScenarioParseError: {e}")))?;
    let mut out = Vec::with_capacity(rows as usize);
    for i in 0..rows {
        let mut row = Vec::with_capacity(spec.columns.len());
        for col in &spec.columns {
            let d = col.distinct.unwrap_or(rows).max(1);
            match col.kind.as_str() {
                "int" => row.push(Value::Int((i % d) as i64)),
                _ => {
                    let pattern = col
                        .pattern
                        .clone()
                        .unwrap_or_else(|| format!("{}{{v}}", col.name));
                    let text = pattern
                        .replace("{i}", &i.to_string())
                        .replace("{v}", &(i % d).to_string());
                    row.push(Value::Text(text));
                }
            }
        }
        out.push(row);
    }
    Table::new(schema, out).map_err(|e| CliError::Sql(format!("ScenarioParseError: {e}")))
}

/// Materializes the catalog for one sweep point, applying a `<table>.rows`
/// sweep if the param names one.
fn catalog_for(
    scenario: &Scenario,
    base: &BTreeMap<String, Table>,
    value: &serde_json::Value,
) -> Result<(BTreeMap<String, Table>, String), CliError> {
    let mut catalog = base.clone();
    let mut query = scenario.query.clone();
    if let Some(table_name) = scenario.sweep.param.strip_suffix(".rows") {
        let rows = value.as_u64().ok_or_else(|| {
            CliError::Sql(format!(
                "ScenarioParseError: sweep over {}.rows needs integer values",
                table_name
            ))
        })?;
        let spec = scenario.tables.get(table_name).ok_or_else(|| {
            CliError::Sql(format!(
                "ScenarioParseError: sweep names unknown table '{table_name}'"
            ))
        })?;
        catalog.insert(table_name.to_string(), gen_table(spec, rows)?);
    } else {
        query = query.replace("{value}", &render_sweep_value(value));
    }
    Ok((catalog, query))
}

struct RunOutcome {
    rows: BTreeSet<String>,
    rows_out: usize,
    ai_calls: u64,
    wall_ms: u128,
}

fn run_once(
    query: &str,
    catalog: &BTreeMap<String, Table>,
    providers: &ProviderSet,
    optimizer: &str,
    cascade: Option<&str>,
    base_options: &ExecOptions,
) -> Result<RunOutcome, CliError> {
    let flags = parse_optimizer(optimizer)?;
    let plan = prepare(query, catalog, &flags)?;
    let mut options = base_options.clone();
    if let Some(spec) = cascade {
        options.cascade = Some(parse_cascade(spec)?);
    }
    let started = Instant::now();
    let (table, stats) = execute(&plan, catalog, providers, &options).map_err(map_exec_error)?;
    let wall_ms = started.elapsed().as_millis();
    let rows: BTreeSet<String> = table
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(Value::render)
                .collect::<Vec<_>>()
                .join("\u{1f}")
        })
        .collect();
    Ok(RunOutcome {
        rows_out: table.rows.len(),
        rows,
        ai_calls: stats.total_ai_calls(),
        wall_ms,
    })
}

fn quality(out: &BTreeSet<String>, truth: &BTreeSet<String>) -> (f64, f64, f64) {
    let hits = out.intersection(truth).count() as f64;
    let precision = if out.is_empty() { 1.0 } else { hits / out.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { hits / truth.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn cmd_bench(scenario_path: &Path, common: &Common) -> Result<(), CliError> {
    let text = std::fs::read_to_string(scenario_path)
        .map_err(|e| CliError::Sql(format!("reading {}: {e}", scenario_path.display())))?;
    let scenario: Scenario = serde_json::from_str(&text)
        .map_err(|e| CliError::Sql(format!("ScenarioParseError: {e}")))?;
    if scenario.strategies.is_empty() {
        return Err(CliError::Sql("ScenarioParseError: no strategies".into()));
    }

    // Scenario tables are generated; --tables files fill in the rest.
    let mut base_catalog = load_catalog(common)?;
    for (name, spec) in &scenario.tables {
        base_catalog.insert(name.clone(), gen_table(spec, spec.rows)?);
    }

    let providers = match &scenario.providers {
        Some(entries) => crate::providers::build_set_from_entries(
            entries,
            scenario_path.parent().unwrap_or(Path::new(".")),
        )?,
        None => crate::providers::build_provider_set(common.providers.as_deref())?,
    };
    let base_options = exec_options(common)?;
    let strategies: Vec<Strategy> = scenario.strategies.iter().map(Strategy::from_spec).collect();

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "seed", "param", "value", "strategy", "rows_out", "ai_calls", "wall_ms", "precision",
        "recall", "f1",
    ])
    .expect("csv header");

    // (value label, strategy label) -> ai_calls, for the speedup table.
    let mut calls: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut value_labels = Vec::new();

    for value in &scenario.sweep.values {
        let (catalog, query) = catalog_for(&scenario, &base_catalog, value)?;
        let value_label = render_sweep_value(value);
        value_labels.push(value_label.clone());

        let truth = match &scenario.ground_truth {
            Some(detail) => Some(
                run_once(
                    &query,
                    &catalog,
                    &providers,
                    &detail.optimizer,
                    detail.cascade.as_deref(),
                    &base_options,
                )?
                .rows,
            ),
            None => None,
        };

        for strategy in &strategies {
            let outcome = run_once(
                &query,
                &catalog,
                &providers,
                &strategy.optimizer,
                strategy.cascade.as_deref(),
                &base_options,
            )?;
            let (p, r, f1) = match &truth {
                Some(t) => {
                    let (p, r, f1) = quality(&outcome.rows, t);
                    (format!("{p:.4}"), format!("{r:.4}"), format!("{f1:.4}"))
                }
                None => (String::new(), String::new(), String::new()),
            };
            csv.write_record([
                common.seed.to_string(),
                scenario.sweep.param.clone(),
                value_label.clone(),
                strategy.label.clone(),
                outcome.rows_out.to_string(),
                outcome.ai_calls.to_string(),
                outcome.wall_ms.to_string(),
                p,
                r,
                f1,
            ])
            .expect("csv row");
            calls.insert((value_label.clone(), strategy.label.clone()), outcome.ai_calls);
        }
    }

    let csv_text =
        String::from_utf8(csv.into_inner().expect("csv flush")).expect("csv utf8");
    print!("{csv_text}");

    // Speedup table: baseline ai_calls / strategy ai_calls per sweep point.
    let baseline = &strategies[0].label;
    println!();
    println!("speedup in ai_calls vs '{baseline}':");
    for value_label in &value_labels {
        let base_calls = calls[&(value_label.clone(), baseline.clone())];
        for strategy in &strategies {
            let c = calls[&(value_label.clone(), strategy.label.clone())];
            let speedup = if c == 0 {
                "inf".to_string()
            } else {
                format!("{:.2}x", base_calls as f64 / c as f64)
            };
            println!("  {}={}  {}  {}", scenario.sweep.param, value_label, strategy.label, speedup);
        }
    }
    Ok(())
}
