//! Abstract syntax tree for the AISQL subset, with a pretty-printer whose
//! output reparses to a structurally equal tree.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnRef, PromptTemplate, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ast {
    pub select: Vec<SelectItem>,
    pub from: Option<FromClause>,
    /// WHERE as a conjunction, in textual order.
    pub where_conjuncts: Vec<Expr>,
    pub group_by: Vec<ColumnRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectItem {
    Star,
    Expr { expr: Expr, alias: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRef {
    pub table: String,
    pub alias: Option<String>,
}

impl TableRef {
    /// The name columns are qualified with: the alias if present.
    pub fn binding_name(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FromClause {
    pub left: TableRef,
    pub join: Option<JoinClause>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinClause {
    pub right: TableRef,
    /// ON condition conjuncts.
    pub on: Vec<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    Eq,
    Neq,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Neq => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AiKind {
    Complete,
    Filter,
    Classify,
    Agg,
    SummarizeAgg,
}

impl AiKind {
    pub fn function_name(&self) -> &'static str {
        match self {
            AiKind::Complete => "AI_COMPLETE",
            AiKind::Filter => "AI_FILTER",
            AiKind::Classify => "AI_CLASSIFY",
            AiKind::Agg => "AI_AGG",
            AiKind::SummarizeAgg => "AI_SUMMARIZE_AGG",
        }
    }

    pub fn is_aggregate(&self) -> bool {
        matches!(self, AiKind::Agg | AiKind::SummarizeAgg)
    }
}

/// Source of candidate labels for AI_CLASSIFY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelsArg {
    List(Vec<String>),
    Column(ColumnRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiCallExpr {
    pub kind: AiKind,
    /// For Complete/Filter: the user's PROMPT (or bare-string) template.
    /// For Classify/Agg/SummarizeAgg: a `{0}` template over the input column.
    pub prompt: PromptTemplate,
    pub labels: Option<LabelsArg>,
    pub instruction: Option<String>,
    pub options: BTreeMap<String, String>,
}

impl AiCallExpr {
    pub fn model_name(&self) -> Option<&str> {
        self.options.get("model").map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Column(ColumnRef),
    Literal(Value),
    Compare {
        op: CompareOp,
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Between {
        expr: Box<Expr>,
        low: Box<Expr>,
        high: Box<Expr>,
    },
    InList {
        expr: Box<Expr>,
        list: Vec<Expr>,
    },
    AiCall(AiCallExpr),
    FlIsImage(Box<Expr>),
    CountStar,
}

impl Expr {
    pub fn is_ai_call(&self) -> bool {
        matches!(self, Expr::AiCall(_))
    }

    pub fn as_ai_call(&self) -> Option<&AiCallExpr> {
        match self {
            Expr::AiCall(c) => Some(c),
            _ => None,
        }
    }

    /// Column references mentioned anywhere in this expression.
    pub fn column_refs(&self) -> Vec<&ColumnRef> {
        let mut out = Vec::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut Vec<&'a ColumnRef>) {
        match self {
            Expr::Column(c) => out.push(c),
            Expr::Literal(_) | Expr::CountStar => {}
            Expr::Compare { left, right, .. } => {
                left.collect_columns(out);
                right.collect_columns(out);
            }
            Expr::Between { expr, low, high } => {
                expr.collect_columns(out);
                low.collect_columns(out);
                high.collect_columns(out);
            }
            Expr::InList { expr, list } => {
                expr.collect_columns(out);
                for e in list {
                    e.collect_columns(out);
                }
            }
            Expr::AiCall(call) => {
                out.extend(call.prompt.bindings.iter());
                if let Some(LabelsArg::Column(c)) = &call.labels {
                    out.push(c);
                }
            }
            Expr::FlIsImage(e) => e.collect_columns(out),
        }
    }

    /// True if any AI call appears in the expression.
    pub fn contains_ai(&self) -> bool {
        match self {
            Expr::AiCall(_) => true,
            Expr::Column(_) | Expr::Literal(_) | Expr::CountStar => false,
            Expr::Compare { left, right, .. } => left.contains_ai() || right.contains_ai(),
            Expr::Between { expr, low, high } => {
                expr.contains_ai() || low.contains_ai() || high.contains_ai()
            }
            Expr::InList { expr, list } => {
                expr.contains_ai() || list.iter().any(|e| e.contains_ai())
            }
            Expr::FlIsImage(e) => e.contains_ai(),
        }
    }

    pub fn contains_aggregate(&self) -> bool {
        match self {
            Expr::CountStar => true,
            Expr::AiCall(c) => c.kind.is_aggregate(),
            Expr::Column(_) | Expr::Literal(_) => false,
            Expr::Compare { left, right, .. } => {
                left.contains_aggregate() || right.contains_aggregate()
            }
            Expr::Between { expr, low, high } => {
                expr.contains_aggregate() || low.contains_aggregate() || high.contains_aggregate()
            }
            Expr::InList { expr, list } => {
                expr.contains_aggregate() || list.iter().any(|e| e.contains_aggregate())
            }
            Expr::FlIsImage(e) => e.contains_aggregate(),
        }
    }
}

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

fn print_value(v: &Value) -> String {
    match v {
        Value::Text(s) => quote(s),
        other => other.render(),
    }
}

pub fn print_expr(e: &Expr) -> String {
    match e {
        Expr::Column(c) => c.to_string(),
        Expr::Literal(v) => print_value(v),
        Expr::Compare { op, left, right } => {
            format!("{} {} {}", print_expr(left), op.symbol(), print_expr(right))
        }
        Expr::Between { expr, low, high } => format!(
            "{} BETWEEN {} AND {}",
            print_expr(expr),
            print_expr(low),
            print_expr(high)
        ),
        Expr::InList { expr, list } => {
            let items: Vec<String> = list.iter().map(print_expr).collect();
            format!("{} IN ({})", print_expr(expr), items.join(", "))
        }
        Expr::FlIsImage(inner) => format!("FL_IS_IMAGE({})", print_expr(inner)),
        Expr::CountStar => "COUNT(*)".to_string(),
        Expr::AiCall(call) => print_ai_call(call),
    }
}

fn print_prompt_arg(p: &PromptTemplate) -> String {
    if p.bindings.is_empty() {
        quote(&p.template)
    } else {
        let mut s = format!("PROMPT({}", quote(&p.template));
        for b in &p.bindings {
            write!(s, ", {b}").unwrap();
        }
        s.push(')');
        s
    }
}

fn print_options(options: &BTreeMap<String, String>) -> String {
    let items: Vec<String> = options
        .iter()
        .map(|(k, v)| format!("{}: {}", quote(k), quote(v)))
        .collect();
    format!("{{{}}}", items.join(", "))
}

fn print_ai_call(call: &AiCallExpr) -> String {
    let mut args: Vec<String> = Vec::new();
    match call.kind {
        AiKind::Complete | AiKind::Filter => args.push(print_prompt_arg(&call.prompt)),
        AiKind::Classify | AiKind::Agg | AiKind::SummarizeAgg => {
            // Input is always the single `{0}` binding.
            args.push(call.prompt.bindings[0].to_string());
        }
    }
    if let Some(labels) = &call.labels {
        match labels {
            LabelsArg::List(items) => {
                let quoted: Vec<String> = items.iter().map(|l| quote(l)).collect();
                args.push(format!("[{}]", quoted.join(", ")));
            }
            LabelsArg::Column(c) => args.push(c.to_string()),
        }
    }
    if let Some(instr) = &call.instruction {
        args.push(quote(instr));
    }
    if !call.options.is_empty() {
        args.push(print_options(&call.options));
    }
    format!("{}({})", call.kind.function_name(), args.join(", "))
}

/// Renders the AST back to SQL text. `parse(print(ast)) == ast`.
pub fn print_ast(ast: &Ast) -> String {
    let mut s = String::from("SELECT ");
    let items: Vec<String> = ast
        .select
        .iter()
        .map(|item| match item {
            SelectItem::Star => "*".to_string(),
            SelectItem::Expr { expr, alias } => match alias {
                Some(a) => format!("{} AS {}", print_expr(expr), a),
                None => print_expr(expr),
            },
        })
        .collect();
    s.push_str(&items.join(", "));
    if let Some(from) = &ast.from {
        write!(s, " FROM {}", print_table_ref(&from.left)).unwrap();
        if let Some(join) = &from.join {
            write!(s, " JOIN {} ON ", print_table_ref(&join.right)).unwrap();
            let conjuncts: Vec<String> = join.on.iter().map(print_expr).collect();
            s.push_str(&conjuncts.join(" AND "));
        }
    }
    if !ast.where_conjuncts.is_empty() {
        let conjuncts: Vec<String> = ast.where_conjuncts.iter().map(print_expr).collect();
        write!(s, " WHERE {}", conjuncts.join(" AND ")).unwrap();
    }
    if !ast.group_by.is_empty() {
        let keys: Vec<String> = ast.group_by.iter().map(|c| c.to_string()).collect();
        write!(s, " GROUP BY {}", keys.join(", ")).unwrap();
    }
    s
}

fn print_table_ref(t: &TableRef) -> String {
    match &t.alias {
        Some(a) => format!("{} AS {}", t.table, a),
        None => t.table.clone(),
    }
}
