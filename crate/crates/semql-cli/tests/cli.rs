//! End-to-end tests driving the compiled `semql` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semql(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semql"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn semql")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// 100-row docs table: tags cycle through 10 values, bodies are unique.
fn write_fixture(dir: &Path) {
    let tables = dir.join("tables");
    fs::create_dir(&tables).unwrap();
    let mut csv = String::from("id,tag,body\n");
    for i in 0..100 {
        csv.push_str(&format!("{i},tag{},note {i} fine\n", i % 10));
    }
    fs::write(tables.join("docs.csv"), csv).unwrap();
    fs::write(
        dir.join("providers.json"),
        r#"{"providers": [{"name": "default", "kind": "consistent",
            "params": {"pairs": [["note 13 fine", "Keep"], ["note 73 fine", "Keep"]]}}]}"#,
    )
    .unwrap();
}

const QUERY: &str =
    "SELECT id FROM docs WHERE tag = 'tag3' AND AI_FILTER(PROMPT('Keep {0}?', body))";

#[test]
fn run_executes_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let args = [
        "run",
        QUERY,
        "--tables",
        "tables",
        "--providers",
        "providers.json",
        "--format",
        "csv",
        "--stats",
        "stats.json",
        "--seed",
        "9",
    ];
    let first = semql(&args, dir.path());
    assert!(first.status.success(), "stderr: {}", stderr(&first));
    assert_eq!(stdout(&first), "id\n13\n73\n");

    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    let ai_calls: u64 = stats["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n["ai_calls"].as_u64().unwrap())
        .sum();
    assert_eq!(ai_calls, 10, "AI filter runs only on the tag3 slice");

    let second = semql(&args, dir.path());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(first.status.code(), second.status.code());
}

#[test]
fn run_formats_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let base = [
        "run",
        "SELECT id, tag FROM docs WHERE id = 5",
        "--tables",
        "tables",
    ];
    let table = semql(&base, dir.path());
    assert!(table.status.success());
    let text = stdout(&table);
    assert!(text.contains("id  tag"), "aligned header, got: {text}");
    assert!(text.contains("(1 rows)"));

    let mut json_args = base.to_vec();
    json_args.extend(["--format", "json"]);
    let json = semql(&json_args, dir.path());
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(parsed[0]["id"], 5);
    assert_eq!(parsed[0]["tag"], "tag5");
}

#[test]
fn sql_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = semql(
        &["run", "SELEKT id FROM docs", "--tables", "tables"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    let out = semql(
        &["run", "SELECT id FROM missing_table", "--tables", "tables"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn provider_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    // AI query with no --providers: the default provider fails fatally.
    let out = semql(&["run", QUERY, "--tables", "tables"], dir.path());
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("no provider configured"));
}

#[test]
fn explain_shows_both_plans_with_call_totals() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    // AI filter first in the text, so the baseline runs it on all 100 rows;
    // the optimizer reorders it behind the tag filter (10 rows).
    let sql =
        "SELECT id FROM docs WHERE AI_FILTER(PROMPT('Keep {0}?', body)) AND tag = 'tag3'";
    let out = semql(&["explain", sql, "--tables", "tables"], dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("baseline plan (push-down):"));
    assert!(text.contains("optimized plan:"));
    assert!(text.contains("total est_ai_calls: 100"), "got: {text}");
    assert!(text.contains("total est_ai_calls: 10\n"), "got: {text}");
}

#[test]
fn bench_emits_csv_and_speedup_table() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"{
        "tables": {
            "docs": {"rows": 100, "columns": [
                {"name": "id", "kind": "int"},
                {"name": "tag", "kind": "text", "distinct": 10},
                {"name": "body", "kind": "text", "pattern": "note {i} fine"}
            ]}
        },
        "query": "SELECT id FROM docs WHERE AI_FILTER(PROMPT('Keep {0}?', body)) AND tag IN ({value})",
        "sweep": {"param": "in_list", "values": ["'tag3'", "'tag3','tag4'"]},
        "strategies": [
            {"name": "baseline", "optimizer": "reorder=off,placement=pushdown,rewrite=off"},
            {"name": "optimized", "optimizer": "reorder=on,placement=auto,rewrite=on"}
        ],
        "providers": [{"name": "default", "kind": "consistent",
            "params": {"pairs": [["note 13 fine", "Keep"], ["note 24 fine", "Keep"]]}}],
        "ground_truth": {"optimizer": "reorder=off,placement=pushdown,rewrite=off"}
    }"#;
    fs::write(dir.path().join("scenario.json"), scenario).unwrap();
    let out = semql(&["bench", "scenario.json", "--seed", "5"], dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,param,value,strategy,rows_out,ai_calls,wall_ms,precision,recall,f1"
    );
    // 2 sweep values x 2 strategies.
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .collect();
    assert_eq!(rows.len(), 4, "got: {text}");
    for row in &rows {
        assert!(row.starts_with("5,in_list,"), "seed column first: {row}");
        assert!(row.ends_with(",1.0000,1.0000,1.0000"), "exact vs truth: {row}");
    }
    let baseline_calls: u64 = rows[0].split(',').nth(5).unwrap().parse().unwrap();
    let optimized_calls: u64 = rows[1].split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(baseline_calls, 100);
    assert_eq!(optimized_calls, 10);
    assert!(text.contains("speedup in ai_calls vs 'baseline':"));
    assert!(text.contains("10.00x"), "got: {text}");
}

#[test]
fn bench_rejects_malformed_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = semql(&["bench", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ScenarioParseError"));
}

#[test]
fn ingest_prints_column_stats() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let out = semql(&["ingest", "tables"], dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("docs: 100 rows"));
    assert!(text.contains("tag text distinct=10"), "got: {text}");
}
