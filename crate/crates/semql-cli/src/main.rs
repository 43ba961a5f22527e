//! `semql` — command-line front end for the semantic SQL engine.
//!
//! Subcommands:
//!   run      parse, optimize, and execute a query, printing the result rows
//!   explain  print the baseline push-down plan and the optimized plan
//!   bench    run a sweep scenario and emit a CSV plus a speedup table
//!   ingest   load a table directory and print per-column statistics
//!
//! Exit codes: 0 success, 2 SQL/usage error, 3 provider error.

mod bench;
mod output;
mod providers;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semql::cascade::Target;
use semql::exec::{execute, CascadeSettings, ExecError, ExecOptions};
use semql::ingest::load_dir;
use semql::parser::{lower, parse};
use semql::planner::plan::{explain, PlanNode};
use semql::planner::{annotate, optimize, HeuristicOracle, OptimizerFlags, Placement, ProfileOverrides};
use semql::Table;

#[derive(Parser)]
#[command(name = "semql", version, about = "Semantic SQL engine with AI-aware optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a query and print its rows.
    Run {
        /// SQL text of the query.
        sql: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print the baseline push-down plan and the optimized plan.
    Explain {
        /// SQL text of the query.
        sql: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run a benchmark scenario file and emit CSV results.
    Bench {
        /// Path to the scenario JSON file.
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Load a table directory and print per-column statistics.
    Ingest {
        /// Directory of CSV table files.
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Directory of CSV table files forming the catalog.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Provider configuration JSON file.
    #[arg(long)]
    providers: Option<PathBuf>,
    /// Optimizer switches, e.g. reorder=on,placement=auto,rewrite=on.
    #[arg(long, default_value = "reorder=on,placement=auto,rewrite=on")]
    optimizer: String,
    /// Cascade settings, e.g. oracle_budget=100,target_precision=0.9.
    #[arg(long)]
    cascade: Option<String>,
    /// Seed for all randomized behavior.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write execution statistics as JSON to this path.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output format for result rows.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Rows per execution batch.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Logical worker partitions.
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

/// Error carrying the process exit code mandated for its class.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage, config, scenario, or SQL: exit 2.
    Sql(String),
    /// Provider failure: exit 3.
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Sql(_) => 2,
            CliError::Provider(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Sql(m) | CliError::Provider(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { sql, common } => cmd_run(&sql, &common),
        Command::Explain { sql, common } => cmd_explain(&sql, &common),
        Command::Bench { scenario, common } => bench::cmd_bench(&scenario, &common),
        Command::Ingest { dir } => cmd_ingest(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semql: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_catalog(common: &Common) -> Result<BTreeMap<String, Table>, CliError> {
    match &common.tables {
        Some(dir) => load_dir(dir).map_err(|e| CliError::Sql(format!("loading tables: {e}"))),
        None => Ok(BTreeMap::new()),
    }
}

fn parse_optimizer(spec: &str) -> Result<OptimizerFlags, CliError> {
    let mut flags = OptimizerFlags::default();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Sql(format!("optimizer switch '{part}' is not key=value")))?;
        match (key.trim(), value.trim()) {
            ("reorder", v) => flags.reorder = parse_on_off(v)?,
            ("rewrite", v) => flags.rewrite = parse_on_off(v)?,
            ("placement", "auto") => flags.placement = Placement::Auto,
            ("placement", "pullup") => flags.placement = Placement::AlwaysPullup,
            ("placement", "pushdown") => flags.placement = Placement::AlwaysPushdown,
            ("context_window_tokens", v) => {
                flags.context_window_tokens = v
                    .parse()
                    .map_err(|_| CliError::Sql(format!("bad context_window_tokens '{v}'")))?
            }
            (k, v) => {
                return Err(CliError::Sql(format!("unknown optimizer switch '{k}={v}'")));
            }
        }
    }
    Ok(flags)
}

fn parse_on_off(v: &str) -> Result<bool, CliError> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(CliError::Sql(format!("expected on/off, got '{other}'"))),
    }
}

fn parse_cascade(spec: &str) -> Result<CascadeSettings, CliError> {
    let mut settings = CascadeSettings::default();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Sql(format!("cascade switch '{part}' is not key=value")))?;
        let value = value.trim();
        let bad = |what: &str| CliError::Sql(format!("bad cascade {what} '{value}'"));
        match key.trim() {
            "oracle_budget" => {
                settings.config.oracle_budget = value.parse().map_err(|_| bad("oracle_budget"))?
            }
            "phase2_fraction" => {
                settings.config.phase2_fraction =
                    value.parse().map_err(|_| bad("phase2_fraction"))?
            }
            "target_precision" => {
                settings.config.target =
                    Some(Target::Precision(value.parse().map_err(|_| bad("target_precision"))?))
            }
            "target_recall" => {
                settings.config.target =
                    Some(Target::Recall(value.parse().map_err(|_| bad("target_recall"))?))
            }
            "delta" => settings.config.delta = value.parse().map_err(|_| bad("delta"))?,
            "proxy_model" => settings.proxy_model = value.to_string(),
            "oracle_model" => settings.oracle_model = value.to_string(),
            k => return Err(CliError::Sql(format!("unknown cascade switch '{k}'"))),
        }
    }
    Ok(settings)
}

fn exec_options(common: &Common) -> Result<ExecOptions, CliError> {
    let cascade = match &common.cascade {
        Some(spec) => Some(parse_cascade(spec)?),
        None => None,
    };
    Ok(ExecOptions {
        batch_size: common.batch_size.max(1),
        workers: common.workers.max(1),
        seed: common.seed,
        cascade,
        ..ExecOptions::default()
    })
}

/// Parses and optimizes a query against the catalog.
fn prepare(
    sql: &str,
    catalog: &BTreeMap<String, Table>,
    flags: &OptimizerFlags,
) -> Result<PlanNode, CliError> {
    let ast = parse(sql).map_err(|e| CliError::Sql(e.to_string()))?;
    let lowered = lower(&ast, catalog).map_err(|e| CliError::Sql(e.to_string()))?;
    Ok(optimize(
        lowered,
        catalog,
        &ProfileOverrides::default(),
        flags,
        &HeuristicOracle,
    ))
}

fn map_exec_error(e: ExecError) -> CliError {
    match e {
        ExecError::Sql(m) => CliError::Sql(m),
        ExecError::LabelOverflow(m) => CliError::Sql(format!("label overflow: {m}")),
        ExecError::Provider { error, .. } => CliError::Provider(error.to_string()),
    }
}

fn cmd_run(sql: &str, common: &Common) -> Result<(), CliError> {
    let catalog = load_catalog(common)?;
    let flags = parse_optimizer(&common.optimizer)?;
    let plan = prepare(sql, &catalog, &flags)?;
    let provider_set = providers::build_provider_set(common.providers.as_deref())?;
    let options = exec_options(common)?;
    let (table, stats) = execute(&plan, &catalog, &provider_set, &options).map_err(map_exec_error)?;
    if let Some(path) = &common.stats {
        std::fs::write(path, stats.to_json())
            .map_err(|e| CliError::Sql(format!("writing stats to {}: {e}", path.display())))?;
    }
    let rendered = match common.format {
        Format::Table => output::render_table(&table),
        Format::Csv => output::render_csv(&table),
        Format::Json => output::render_json(&table),
    };
    print!("{rendered}");
    Ok(())
}

fn total_est_ai_calls(plan: &PlanNode) -> f64 {
    let mut total = 0.0;
    plan.visit(&mut |n| total += n.est_ai_calls);
    total
}

fn format_calls(calls: f64) -> String {
    if (calls - calls.round()).abs() < 1e-6 {
        format!("{}", calls.round() as u64)
    } else {
        format!("{calls:.1}")
    }
}

fn cmd_explain(sql: &str, common: &Common) -> Result<(), CliError> {
    let catalog = load_catalog(common)?;
    let ast = parse(sql).map_err(|e| CliError::Sql(e.to_string()))?;
    let lowered = lower(&ast, &catalog).map_err(|e| CliError::Sql(e.to_string()))?;
    let overrides = ProfileOverrides::default();

    let baseline = annotate(lowered.clone(), &catalog, &overrides);
    let flags = parse_optimizer(&common.optimizer)?;
    let optimized = optimize(lowered, &catalog, &overrides, &flags, &HeuristicOracle);

    println!("baseline plan (push-down):");
    print!("{}", explain(&baseline));
    println!("total est_ai_calls: {}", format_calls(total_est_ai_calls(&baseline)));
    println!();
    println!("optimized plan:");
    print!("{}", explain(&optimized));
    println!("total est_ai_calls: {}", format_calls(total_est_ai_calls(&optimized)));
    Ok(())
}

fn cmd_ingest(dir: &Path) -> Result<(), CliError> {
    let catalog = load_dir(dir).map_err(|e| CliError::Sql(format!("loading tables: {e}")))?;
    for (name, table) in &catalog {
        println!("{name}: {} rows", table.stats.row_count);
        for (col, stats) in table.schema.columns.iter().zip(&table.stats.columns) {
            println!(
                "  {} {} distinct={} avg_tokens={:.1}",
                col.name, col.kind, stats.distinct_count, stats.avg_token_count
            );
        }
    }
    Ok(())
}
