//! Semantic-join rewrite: CrossJoin + AI_FILTER over (row, candidate)
//! pairs becomes one multi-label classification per row, with the
//! candidate values as labels. Cuts calls from |R|x|S| to |R| x chunks.

use std::collections::BTreeMap;

use crate::data::ColumnRef;
use crate::parser::ast::AiKind;

use super::plan::{resolve_col, PlanNode, PlanOp, Predicate};
use super::{StatsView, DEFAULT_CONTEXT_WINDOW_TOKENS};

/// What the rewrite decision gets to look at: the filter template plus
/// per-side column statistics. No row data beyond the stats samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteQuestion {
    pub template: String,
    pub left: SideInfo,
    pub right: SideInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideInfo {
    pub column: String,
    pub distinct_count: u64,
    pub avg_token_count: f64,
    pub samples: Vec<String>,
}

/// `label_side_is_left = None` means "do not rewrite".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewriteAnswer {
    pub label_side_is_left: Option<bool>,
}

pub trait RewriteOracle {
    fn assess(&self, q: &RewriteQuestion) -> Result<RewriteAnswer, String>;
}

/// Stats-threshold oracle: a side qualifies as the label side when it is a
/// small categorical domain (<= 1000 distinct, <= 16 avg tokens) and the
/// template reads like a membership test. Ties go to the smaller domain.
pub struct HeuristicOracle;

const MEMBERSHIP_HINTS: &[&str] = &[
    "mapped to",
    "belongs to",
    "categor",
    "label",
    "topic",
    "class",
    "type",
    "is about",
    "matches",
    "is in",
];

impl RewriteOracle for HeuristicOracle {
    fn assess(&self, q: &RewriteQuestion) -> Result<RewriteAnswer, String> {
        let template = q.template.to_ascii_lowercase();
        if !MEMBERSHIP_HINTS.iter().any(|h| template.contains(h)) {
            return Ok(RewriteAnswer {
                label_side_is_left: None,
            });
        }
        let qualifies =
            |s: &SideInfo| s.distinct_count <= 1000 && s.avg_token_count <= 16.0;
        let answer = match (qualifies(&q.left), qualifies(&q.right)) {
            (true, true) => Some(q.left.distinct_count <= q.right.distinct_count),
            (true, false) => Some(true),
            (false, true) => Some(false),
            (false, false) => None,
        };
        Ok(RewriteAnswer {
            label_side_is_left: answer,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewritePlan {
    pub pred_id: usize,
    pub row_col: ColumnRef,
    pub label_col: ColumnRef,
    pub label_side_is_left: bool,
    pub instruction: Option<String>,
    pub options: BTreeMap<String, String>,
}

/// Looks for `Filter(AI_FILTER over one column per side) -> ... -> CrossJoin`
/// and asks the oracle whether one side is a label domain. Oracle errors
/// fall back to the heuristic.
pub fn detect_classify_rewrite(
    plan: &PlanNode,
    stats: &StatsView,
    oracle: &dyn RewriteOracle,
) -> Option<RewritePlan> {
    let mut found = None;
    plan.visit(&mut |n| {
        if found.is_some() {
            return;
        }
        if let PlanOp::Filter { pred } = &n.op {
            if let Some(rw) = try_match(n, pred, stats, oracle) {
                found = Some(rw);
            }
        }
    });
    found
}

fn try_match(
    filter: &PlanNode,
    pred: &Predicate,
    stats: &StatsView,
    oracle: &dyn RewriteOracle,
) -> Option<RewritePlan> {
    let call = pred.expr.as_ai_call()?;
    if call.kind != AiKind::Filter || call.prompt.bindings.len() != 2 {
        return None;
    }
    // Descend through intervening filters to the join.
    let mut cur = &filter.children[0];
    while let PlanOp::Filter { .. } = &cur.op {
        cur = &cur.children[0];
    }
    let join = cur;
    match &join.op {
        PlanOp::Join { equi_keys } if equi_keys.is_empty() => {}
        _ => return None,
    }
    let left_schema = join.children[0].output_schema();
    let right_schema = join.children[1].output_schema();
    let side_of = |c: &ColumnRef| -> Option<bool> {
        match (
            resolve_col(&left_schema, c).is_ok(),
            resolve_col(&right_schema, c).is_ok(),
        ) {
            (true, false) => Some(true),
            (false, true) => Some(false),
            _ => None,
        }
    };
    let b0 = &call.prompt.bindings[0];
    let b1 = &call.prompt.bindings[1];
    let (left_col, right_col) = match (side_of(b0)?, side_of(b1)?) {
        (true, false) => (b0, b1),
        (false, true) => (b1, b0),
        _ => return None,
    };
    let side_info = |c: &ColumnRef| SideInfo {
        column: c.to_string(),
        distinct_count: stats.distinct(c),
        avg_token_count: stats.avg_tokens(c),
        samples: stats
            .samples(c)
            .into_iter()
            .map(|v| v.render())
            .collect(),
    };
    let question = RewriteQuestion {
        template: call.prompt.template.clone(),
        left: side_info(left_col),
        right: side_info(right_col),
    };
    let answer = oracle
        .assess(&question)
        .or_else(|_| HeuristicOracle.assess(&question))
        .ok()?;
    let label_side_is_left = answer.label_side_is_left?;
    let (label_col, row_col) = if label_side_is_left {
        (left_col.clone(), right_col.clone())
    } else {
        (right_col.clone(), left_col.clone())
    };
    Some(RewritePlan {
        pred_id: pred.id,
        row_col,
        label_col,
        label_side_is_left,
        instruction: Some(call.prompt.template.clone()),
        options: call.options.clone(),
    })
}

/// Replaces the matched Filter + CrossJoin with a ClassifyJoin node. The
/// output schema (left columns then right columns) is unchanged.
pub fn apply_classify_rewrite(
    node: PlanNode,
    rw: &RewritePlan,
    context_window_tokens: u64,
) -> PlanNode {
    let window = if context_window_tokens == 0 {
        DEFAULT_CONTEXT_WINDOW_TOKENS
    } else {
        context_window_tokens
    };
    rewrite_rec(node, rw, window)
}

fn rewrite_rec(node: PlanNode, rw: &RewritePlan, window: u64) -> PlanNode {
    if let PlanOp::Filter { pred } = &node.op {
        if pred.id == rw.pred_id {
            let below = node.children.into_iter().next().unwrap();
            return replace_join(below, rw, window);
        }
    }
    let children = node
        .children
        .into_iter()
        .map(|c| rewrite_rec(c, rw, window))
        .collect();
    PlanNode::new(node.op, children)
}

fn replace_join(node: PlanNode, rw: &RewritePlan, window: u64) -> PlanNode {
    match node.op {
        PlanOp::Join { ref equi_keys } if equi_keys.is_empty() => {
            let mut children = node.children.into_iter();
            let left = children.next().unwrap();
            let right = children.next().unwrap();
            let (row_side, label_side) = if rw.label_side_is_left {
                (right, left)
            } else {
                (left, right)
            };
            PlanNode::new(
                PlanOp::ClassifyJoin {
                    row_input: rw.row_col.clone(),
                    label_col: rw.label_col.clone(),
                    instruction: rw.instruction.clone(),
                    options: rw.options.clone(),
                    context_window_tokens: window,
                    label_side_is_left: rw.label_side_is_left,
                    original_pred: rw.pred_id,
                },
                vec![row_side, label_side],
            )
        }
        PlanOp::Filter { pred } => {
            let below = node.children.into_iter().next().unwrap();
            let inner = replace_join(below, rw, window);
            PlanNode::new(PlanOp::Filter { pred }, vec![inner])
        }
        op => PlanNode::new(op, node.children),
    }
}
