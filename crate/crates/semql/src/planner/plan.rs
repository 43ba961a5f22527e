//! Logical plan tree with cost/cardinality annotations and the stable
//! EXPLAIN text format.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnRef, ValueKind};
use crate::parser::ast::{AiCallExpr, Expr, LabelsArg};
use crate::parser::print_expr;

/// One column of a plan node's output, qualified by the table binding it
/// came from (None for computed columns).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCol {
    pub qualifier: Option<String>,
    pub name: String,
    pub kind: ValueKind,
}

pub type PlanSchema = Vec<PlanCol>;

/// Finds the unique column matching a reference. Unqualified references
/// must be unambiguous.
pub fn resolve_col(schema: &PlanSchema, col: &ColumnRef) -> Result<usize, String> {
    let matches: Vec<usize> = schema
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            c.name.eq_ignore_ascii_case(&col.name)
                && match &col.qualifier {
                    Some(q) => c
                        .qualifier
                        .as_deref()
                        .is_some_and(|cq| cq.eq_ignore_ascii_case(q)),
                    None => true,
                }
        })
        .map(|(i, _)| i)
        .collect();
    match matches.len() {
        1 => Ok(matches[0]),
        0 => Err(format!("unknown column '{col}'")),
        _ => Err(format!("ambiguous column '{col}'")),
    }
}

/// A filter conjunct with a stable identifier (assigned in textual order
/// during lowering).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub id: usize,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggCall {
    /// Output column name (alias or function name).
    pub name: String,
    pub kind: AggCallKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AggCallKind {
    CountStar,
    Ai(AiCallExpr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectItem {
    pub name: String,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanOp {
    Scan {
        table: String,
        binding: String,
        schema: PlanSchema,
    },
    Filter {
        pred: Predicate,
    },
    Join {
        /// Pairs of (left column, right column); empty means cross join.
        equi_keys: Vec<(ColumnRef, ColumnRef)>,
    },
    /// Adds computed columns to the child's output (used for group-by over
    /// computed expressions such as AI_CLASSIFY aliases).
    Extend {
        items: Vec<ProjectItem>,
    },
    Project {
        items: Vec<ProjectItem>,
    },
    Aggregate {
        group_keys: Vec<ColumnRef>,
        aggs: Vec<AggCall>,
    },
    /// Semantic join rewritten as per-row multi-label classification.
    /// Child 0 is the row side, child 1 the label side. Output schema is
    /// identical to the original join (left columns then right columns).
    ClassifyJoin {
        /// Column on the row side fed to the classifier.
        row_input: ColumnRef,
        /// Column on the label side supplying candidate labels.
        label_col: ColumnRef,
        instruction: Option<String>,
        options: BTreeMap<String, String>,
        /// Token window used for label chunking.
        context_window_tokens: u64,
        /// True when the label side is the left join input (output column
        /// order still follows the original join).
        label_side_is_left: bool,
        /// Predicate id of the original AI join predicate.
        original_pred: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub op: PlanOp,
    pub children: Vec<PlanNode>,
    pub est_rows: f64,
    pub est_ai_calls: f64,
}

impl PlanNode {
    pub fn new(op: PlanOp, children: Vec<PlanNode>) -> PlanNode {
        PlanNode {
            op,
            children,
            est_rows: 0.0,
            est_ai_calls: 0.0,
        }
    }

    pub fn child(&self, i: usize) -> &PlanNode {
        &self.children[i]
    }

    /// Output schema, derived structurally (scans embed their schema).
    pub fn output_schema(&self) -> PlanSchema {
        match &self.op {
            PlanOp::Scan { schema, .. } => schema.clone(),
            PlanOp::Filter { .. } => self.children[0].output_schema(),
            PlanOp::Join { .. } => {
                let mut s = self.children[0].output_schema();
                s.extend(self.children[1].output_schema());
                s
            }
            PlanOp::ClassifyJoin {
                label_side_is_left, ..
            } => {
                let row = self.children[0].output_schema();
                let label = self.children[1].output_schema();
                if *label_side_is_left {
                    let mut s = label;
                    s.extend(row);
                    s
                } else {
                    let mut s = row;
                    s.extend(label);
                    s
                }
            }
            PlanOp::Extend { items } => {
                let mut s = self.children[0].output_schema();
                for item in items {
                    s.push(PlanCol {
                        qualifier: None,
                        name: item.name.clone(),
                        kind: expr_kind(&item.expr),
                    });
                }
                s
            }
            PlanOp::Project { items } => items
                .iter()
                .map(|item| PlanCol {
                    qualifier: None,
                    name: item.name.clone(),
                    kind: expr_kind(&item.expr),
                })
                .collect(),
            PlanOp::Aggregate { group_keys, aggs } => {
                let child = self.children[0].output_schema();
                let mut s: PlanSchema = group_keys
                    .iter()
                    .map(|k| {
                        let idx = resolve_col(&child, k).expect("validated group key");
                        child[idx].clone()
                    })
                    .collect();
                for agg in aggs {
                    s.push(PlanCol {
                        qualifier: None,
                        name: agg.name.clone(),
                        kind: match agg.kind {
                            AggCallKind::CountStar => ValueKind::Int,
                            AggCallKind::Ai(_) => ValueKind::Text,
                        },
                    });
                }
                s
            }
        }
    }

    /// Sum of estimated AI calls over the whole tree.
    pub fn total_est_ai_calls(&self) -> f64 {
        self.est_ai_calls
            + self
                .children
                .iter()
                .map(|c| c.total_est_ai_calls())
                .sum::<f64>()
    }

    /// All filter predicates in the tree, top-down.
    pub fn predicates(&self) -> Vec<&Predicate> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let PlanOp::Filter { pred } = &n.op {
                out.push(pred);
            }
        });
        out
    }

    /// One-line operator label (same text EXPLAIN uses).
    pub fn label(&self) -> String {
        op_label(&self.op)
    }

    /// Number of nodes in this subtree (pre-order id arithmetic).
    pub fn subtree_size(&self) -> usize {
        1 + self.children.iter().map(|c| c.subtree_size()).sum::<usize>()
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a PlanNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }
}

fn expr_kind(expr: &Expr) -> ValueKind {
    use crate::parser::ast::AiKind;
    match expr {
        Expr::Literal(v) => v.kind().unwrap_or(ValueKind::Text),
        Expr::CountStar => ValueKind::Int,
        Expr::Compare { .. } | Expr::Between { .. } | Expr::InList { .. } | Expr::FlIsImage(_) => {
            ValueKind::Bool
        }
        Expr::AiCall(c) => match c.kind {
            AiKind::Filter => ValueKind::Bool,
            _ => ValueKind::Text,
        },
        // Column kind is resolved against the child schema where needed;
        // Text is the conservative default for detached printing.
        Expr::Column(_) => ValueKind::Text,
    }
}

fn format_est(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

fn op_label(op: &PlanOp) -> String {
    match op {
        PlanOp::Scan { table, binding, .. } => {
            if table.eq_ignore_ascii_case(binding) {
                format!("Scan {table}")
            } else {
                format!("Scan {table} AS {binding}")
            }
        }
        PlanOp::Filter { pred } => format!("Filter {}", print_expr(&pred.expr)),
        PlanOp::Join { equi_keys } => {
            if equi_keys.is_empty() {
                "CrossJoin".to_string()
            } else {
                let keys: Vec<String> = equi_keys
                    .iter()
                    .map(|(l, r)| format!("{l} = {r}"))
                    .collect();
                format!("Join {}", keys.join(" AND "))
            }
        }
        PlanOp::Extend { items } => {
            let cols: Vec<String> = items
                .iter()
                .map(|i| format!("{} = {}", i.name, print_expr(&i.expr)))
                .collect();
            format!("Extend {}", cols.join(", "))
        }
        PlanOp::Project { items } => {
            let cols: Vec<String> = items.iter().map(|i| i.name.clone()).collect();
            format!("Project {}", cols.join(", "))
        }
        PlanOp::Aggregate { group_keys, aggs } => {
            let aggs: Vec<String> = aggs.iter().map(|a| a.name.clone()).collect();
            if group_keys.is_empty() {
                format!("Aggregate {}", aggs.join(", "))
            } else {
                let keys: Vec<String> = group_keys.iter().map(|k| k.to_string()).collect();
                format!("Aggregate {} BY {}", aggs.join(", "), keys.join(", "))
            }
        }
        PlanOp::ClassifyJoin {
            row_input,
            label_col,
            ..
        } => format!("ClassifyJoin {row_input} BY {label_col} [rewritten: classify]"),
    }
}

/// Stable EXPLAIN rendering: one node per line, two-space indent per depth,
/// `(rows=<est>, ai_calls=<est>)` suffix.
pub fn explain(plan: &PlanNode) -> String {
    let mut out = String::new();
    explain_node(plan, 0, &mut out);
    out
}

fn explain_node(node: &PlanNode, depth: usize, out: &mut String) {
    for _ in 0..depth {
        out.push_str("  ");
    }
    writeln!(
        out,
        "{} (rows={}, ai_calls={})",
        op_label(&node.op),
        format_est(node.est_rows),
        format_est(node.est_ai_calls)
    )
    .unwrap();
    for c in &node.children {
        explain_node(c, depth + 1, out);
    }
}

/// True when the expression is an AI_FILTER call.
pub fn is_ai_filter(expr: &Expr) -> bool {
    matches!(expr.as_ai_call().map(|c| c.kind), Some(crate::parser::ast::AiKind::Filter))
}

/// Labels source helper re-exported for rewrite code.
pub fn labels_as_column(labels: &Option<LabelsArg>) -> Option<&ColumnRef> {
    match labels {
        Some(LabelsArg::Column(c)) => Some(c),
        _ => None,
    }
}
