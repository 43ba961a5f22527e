//! AI-aware cost-based optimization.
//!
//! Cost is measured in abstract units proportional to expected model-call
//! token weight; model calls dominate everything else, so cheap relational
//! predicates get unit cost. The optimizer (a) orders conjuncts by
//! cost/(1-selectivity) rank, (b) places single-side AI predicates above or
//! below the join by comparing expected call counts, and (c) rewrites
//! eligible semantic joins into per-row multi-label classification.

pub mod plan;
pub mod rewrite;

use std::collections::BTreeMap;

use crate::data::{estimate_tokens, ColumnRef, Table, ValueKind};
use crate::parser::ast::{AiKind, Expr};
use plan::{resolve_col, PlanNode, PlanOp, Predicate};

pub use rewrite::{
    detect_classify_rewrite, HeuristicOracle, RewriteAnswer, RewriteOracle, RewritePlan,
    RewriteQuestion,
};

/// Multimodal AI calls cost this much more than text calls.
pub const MULTIMODAL_COST_FACTOR: f64 = 10.0;
/// Selectivity assumed for AI predicates with no observations or hints.
pub const DEFAULT_AI_SELECTIVITY: f64 = 0.5;
/// Selectivity for cheap predicates we cannot estimate from stats.
pub const DEFAULT_CHEAP_SELECTIVITY: f64 = 0.3;
/// Hard cap on labels per AI_CLASSIFY call.
pub const MAX_LABELS_PER_CHUNK: usize = 250;
/// Default classifier context window, in estimated tokens.
pub const DEFAULT_CONTEXT_WINDOW_TOKENS: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredKind {
    Cheap,
    AiText,
    AiMultimodal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedStats {
    pub rows_seen: u64,
    pub rows_passed: u64,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateProfile {
    pub pred_id: usize,
    pub kind: PredKind,
    pub est_cost_per_row: f64,
    pub est_selectivity: f64,
    pub observed: Option<ObservedStats>,
}

impl PredicateProfile {
    /// Ordering rank: cost / (1 - selectivity); +inf when nothing is filtered.
    pub fn rank(&self) -> f64 {
        let (cost, sel) = self.effective();
        if sel >= 1.0 {
            f64::INFINITY
        } else {
            cost / (1.0 - sel)
        }
    }

    /// Cost/selectivity, preferring runtime observations when present.
    pub fn effective(&self) -> (f64, f64) {
        match &self.observed {
            Some(o) if o.rows_seen > 0 => (
                o.total_cost / o.rows_seen as f64,
                o.rows_passed as f64 / o.rows_seen as f64,
            ),
            _ => (self.est_cost_per_row, self.est_selectivity),
        }
    }
}

/// Per-predicate selectivity overrides (from scenario fixtures or cached
/// runtime stats).
#[derive(Debug, Clone, Default)]
pub struct ProfileOverrides {
    pub selectivity: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    #[default]
    Auto,
    AlwaysPullup,
    AlwaysPushdown,
}

#[derive(Debug, Clone)]
pub struct OptimizerFlags {
    pub reorder: bool,
    pub placement: Placement,
    pub rewrite: bool,
    pub context_window_tokens: u64,
}

impl Default for OptimizerFlags {
    fn default() -> Self {
        OptimizerFlags {
            reorder: true,
            placement: Placement::Auto,
            rewrite: true,
            context_window_tokens: DEFAULT_CONTEXT_WINDOW_TOKENS,
        }
    }
}

/// Column statistics looked up through the plan's scan bindings.
pub struct StatsView<'a> {
    scans: Vec<(String, &'a Table)>,
}

impl<'a> StatsView<'a> {
    pub fn new(plan: &PlanNode, catalog: &'a BTreeMap<String, Table>) -> StatsView<'a> {
        let mut scans = Vec::new();
        plan.visit(&mut |n| {
            if let PlanOp::Scan { table, binding, .. } = &n.op {
                if let Some(t) = catalog
                    .iter()
                    .find(|(name, _)| name.eq_ignore_ascii_case(table))
                    .map(|(_, t)| t)
                {
                    scans.push((binding.clone(), t));
                }
            }
        });
        StatsView { scans }
    }

    fn column(&self, col: &ColumnRef) -> Option<(&crate::data::ColumnStats, ValueKind, u64)> {
        for (binding, table) in &self.scans {
            if let Some(q) = &col.qualifier {
                if !q.eq_ignore_ascii_case(binding) {
                    continue;
                }
            }
            if let Some(idx) = table.schema.index_of(&col.name) {
                return Some((
                    &table.stats.columns[idx],
                    table.schema.columns[idx].kind,
                    table.stats.row_count,
                ));
            }
        }
        None
    }

    pub fn avg_tokens(&self, col: &ColumnRef) -> f64 {
        self.column(col).map(|(s, _, _)| s.avg_token_count).unwrap_or(0.0)
    }

    pub fn distinct(&self, col: &ColumnRef) -> u64 {
        self.column(col).map(|(s, _, _)| s.distinct_count).unwrap_or(0)
    }

    fn kind(&self, col: &ColumnRef) -> Option<ValueKind> {
        self.column(col).map(|(_, k, _)| k)
    }

    pub fn samples(&self, col: &ColumnRef) -> Vec<crate::data::Value> {
        self.column(col)
            .map(|(s, _, _)| s.sample_values.clone())
            .unwrap_or_default()
    }
}

/// Builds a cost/selectivity profile for every filter predicate in the plan.
pub fn profile_predicates(
    plan: &PlanNode,
    catalog: &BTreeMap<String, Table>,
    overrides: &ProfileOverrides,
) -> Vec<PredicateProfile> {
    let stats = StatsView::new(plan, catalog);
    plan.predicates()
        .into_iter()
        .map(|pred| profile_one(pred, &stats, overrides))
        .collect()
}

fn profile_one(
    pred: &Predicate,
    stats: &StatsView,
    overrides: &ProfileOverrides,
) -> PredicateProfile {
    if let Some(call) = pred.expr.as_ai_call() {
        let multimodal = call
            .prompt
            .bindings
            .iter()
            .any(|b| stats.kind(b) == Some(ValueKind::File));
        let tokens: f64 = call.prompt.bindings.iter().map(|b| stats.avg_tokens(b)).sum();
        let base = 100.0 * (tokens / 100.0);
        let cost = if multimodal {
            base * MULTIMODAL_COST_FACTOR
        } else {
            base
        };
        let selectivity = overrides
            .selectivity
            .get(&pred.id)
            .copied()
            .or_else(|| {
                call.options
                    .get("est_selectivity")
                    .and_then(|s| s.parse::<f64>().ok())
            })
            .unwrap_or(DEFAULT_AI_SELECTIVITY)
            .clamp(0.0, 1.0);
        return PredicateProfile {
            pred_id: pred.id,
            kind: if multimodal {
                PredKind::AiMultimodal
            } else {
                PredKind::AiText
            },
            est_cost_per_row: cost,
            est_selectivity: selectivity,
            observed: None,
        };
    }

    let selectivity = overrides
        .selectivity
        .get(&pred.id)
        .copied()
        .unwrap_or_else(|| cheap_selectivity(&pred.expr, stats))
        .clamp(0.0, 1.0);
    PredicateProfile {
        pred_id: pred.id,
        kind: PredKind::Cheap,
        est_cost_per_row: 1.0,
        est_selectivity: selectivity,
        observed: None,
    }
}

fn cheap_selectivity(expr: &Expr, stats: &StatsView) -> f64 {
    match expr {
        Expr::InList { expr, list } => {
            if let Expr::Column(c) = expr.as_ref() {
                let d = stats.distinct(c);
                if d > 0 {
                    return (list.len() as f64 / d as f64).clamp(0.0, 1.0);
                }
            }
            DEFAULT_CHEAP_SELECTIVITY
        }
        Expr::Compare {
            op: crate::parser::ast::CompareOp::Eq,
            left,
            right,
        } => {
            let col = match (left.as_ref(), right.as_ref()) {
                (Expr::Column(c), Expr::Literal(_)) | (Expr::Literal(_), Expr::Column(c)) => {
                    Some(c)
                }
                _ => None,
            };
            if let Some(c) = col {
                let d = stats.distinct(c);
                if d > 0 {
                    return (1.0 / d as f64).clamp(0.0, 1.0);
                }
            }
            DEFAULT_CHEAP_SELECTIVITY
        }
        _ => DEFAULT_CHEAP_SELECTIVITY,
    }
}

/// Evaluation order minimizing expected per-row cost for independent
/// conjuncts: ascending cost/(1-sel) rank; ties broken Cheap-first, then by
/// predicate id.
pub fn order_predicates(profiles: &[PredicateProfile]) -> Vec<usize> {
    let mut order: Vec<&PredicateProfile> = profiles.iter().collect();
    order.sort_by(|a, b| {
        a.rank()
            .partial_cmp(&b.rank())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let ka = (a.kind != PredKind::Cheap) as u8;
                let kb = (b.kind != PredKind::Cheap) as u8;
                ka.cmp(&kb)
            })
            .then_with(|| a.pred_id.cmp(&b.pred_id))
    });
    order.into_iter().map(|p| p.pred_id).collect()
}

fn profile_for(profiles: &[PredicateProfile], id: usize) -> Option<&PredicateProfile> {
    profiles.iter().find(|p| p.pred_id == id)
}

/// Full optimization pipeline. The input is the lowered push-down baseline.
pub fn optimize(
    mut node: PlanNode,
    catalog: &BTreeMap<String, Table>,
    overrides: &ProfileOverrides,
    flags: &OptimizerFlags,
    oracle: &dyn RewriteOracle,
) -> PlanNode {
    let profiles = profile_predicates(&node, catalog, overrides);
    if flags.reorder {
        node = reorder_filter_chains(node, &profiles);
    }
    node = match flags.placement {
        Placement::Auto => place_ai_predicates(node, &profiles, catalog),
        Placement::AlwaysPullup => force_placement(node, &profiles, true),
        Placement::AlwaysPushdown => node,
    };
    if flags.rewrite {
        let stats_owned = StatsView::new(&node, catalog);
        if let Some(rw) = detect_classify_rewrite(&node, &stats_owned, oracle) {
            node = rewrite::apply_classify_rewrite(node, &rw, flags.context_window_tokens);
        }
    }
    annotate(node, catalog, overrides)
}

/// Sorts every maximal chain of Filter nodes by predicate rank.
pub fn reorder_filter_chains(node: PlanNode, profiles: &[PredicateProfile]) -> PlanNode {
    if let PlanOp::Filter { .. } = node.op {
        // Collect the whole chain.
        let mut preds = Vec::new();
        let mut cur = node;
        loop {
            match cur.op {
                PlanOp::Filter { pred } => {
                    preds.push(pred);
                    cur = cur.children.into_iter().next().unwrap();
                }
                _ => break,
            }
        }
        let base = reorder_filter_chains(cur, profiles);
        rebuild_chain(base, preds, profiles)
    } else {
        let children = node
            .children
            .into_iter()
            .map(|c| reorder_filter_chains(c, profiles))
            .collect();
        PlanNode::new(node.op, children)
    }
}

/// Stacks `preds` over `base` so the lowest filter is the first evaluated,
/// following the rank ordering.
fn rebuild_chain(
    base: PlanNode,
    preds: Vec<Predicate>,
    profiles: &[PredicateProfile],
) -> PlanNode {
    let chain_profiles: Vec<PredicateProfile> = preds
        .iter()
        .filter_map(|p| profile_for(profiles, p.id).cloned())
        .collect();
    let order = order_predicates(&chain_profiles);
    let mut by_id: BTreeMap<usize, Predicate> =
        preds.into_iter().map(|p| (p.id, p)).collect();
    let mut node = base;
    for id in order {
        if let Some(pred) = by_id.remove(&id) {
            node = PlanNode::new(PlanOp::Filter { pred }, vec![node]);
        }
    }
    // Predicates without profiles keep their original place on top.
    for (_, pred) in by_id {
        node = PlanNode::new(PlanOp::Filter { pred }, vec![node]);
    }
    node
}

struct JoinShape {
    top_preds: Vec<Predicate>,
    equi_keys: Vec<(ColumnRef, ColumnRef)>,
    left_preds: Vec<Predicate>,
    right_preds: Vec<Predicate>,
    left_base: PlanNode,
    right_base: PlanNode,
}

/// Splits `Filter* -> Join(Filter*->Scan, Filter*->Scan)` into its parts.
/// Returns None when the subtree does not have that shape.
fn split_join_shape(node: PlanNode) -> Result<JoinShape, PlanNode> {
    let mut top_preds = Vec::new();
    let mut cur = node;
    loop {
        match cur.op {
            PlanOp::Filter { pred } => {
                top_preds.push(pred);
                cur = cur.children.into_iter().next().unwrap();
            }
            PlanOp::Join { .. } => break,
            _ => {
                // Rebuild and bail.
                let mut n = cur;
                for pred in top_preds.into_iter().rev() {
                    n = PlanNode::new(PlanOp::Filter { pred }, vec![n]);
                }
                return Err(n);
            }
        }
    }
    let equi_keys = match &cur.op {
        PlanOp::Join { equi_keys } => equi_keys.clone(),
        _ => unreachable!(),
    };
    let mut children = cur.children.into_iter();
    let (left_preds, left_base) = strip_filters(children.next().unwrap());
    let (right_preds, right_base) = strip_filters(children.next().unwrap());
    Ok(JoinShape {
        top_preds,
        equi_keys,
        left_preds,
        right_preds,
        left_base,
        right_base,
    })
}

fn strip_filters(node: PlanNode) -> (Vec<Predicate>, PlanNode) {
    let mut preds = Vec::new();
    let mut cur = node;
    loop {
        match cur.op {
            PlanOp::Filter { pred } => {
                preds.push(pred);
                cur = cur.children.into_iter().next().unwrap();
            }
            _ => return (preds, cur),
        }
    }
}

fn rebuild_join(shape: JoinShape, profiles: &[PredicateProfile]) -> PlanNode {
    let left = rebuild_chain(shape.left_base, shape.left_preds, profiles);
    let right = rebuild_chain(shape.right_base, shape.right_preds, profiles);
    let join = PlanNode::new(
        PlanOp::Join {
            equi_keys: shape.equi_keys,
        },
        vec![left, right],
    );
    rebuild_chain(join, shape.top_preds, profiles)
}

/// For each single-side AI predicate below the join, chooses push-down vs
/// pull-up by expected model calls; ties go to push-down.
pub fn place_ai_predicates(
    node: PlanNode,
    profiles: &[PredicateProfile],
    catalog: &BTreeMap<String, Table>,
) -> PlanNode {
    place_rec(node, profiles, catalog)
}

fn place_rec(
    node: PlanNode,
    profiles: &[PredicateProfile],
    catalog: &BTreeMap<String, Table>,
) -> PlanNode {
    let has_join = {
        let mut found = false;
        node.visit(&mut |n| {
            if matches!(n.op, PlanOp::Join { .. }) {
                found = true;
            }
        });
        found
    };
    if !has_join {
        return node;
    }
    match split_join_shape(node) {
        Err(n) => {
            let children = n
                .children
                .into_iter()
                .map(|c| place_rec(c, profiles, catalog))
                .collect();
            PlanNode::new(n.op, children)
        }
        Ok(mut shape) => {
            let stats_left = base_rows(&shape.left_base, catalog);
            let stats_right = base_rows(&shape.right_base, catalog);

            // Candidates: AI predicates currently on either side.
            let mut moved: Vec<(Predicate, bool)> = Vec::new(); // (pred, from_left)
            for from_left in [true, false] {
                let side_preds = if from_left {
                    shape.left_preds.clone()
                } else {
                    shape.right_preds.clone()
                };
                for pred in &side_preds {
                    if !plan::is_ai_filter(&pred.expr) {
                        continue;
                    }
                    let Some(profile) = profile_for(profiles, pred.id) else {
                        continue;
                    };
                    let pushdown_calls = rows_before_pred(
                        if from_left { stats_left } else { stats_right },
                        &side_preds,
                        pred.id,
                        profiles,
                    );
                    let pullup_calls = join_output_before_pred(
                        &shape, pred.id, profiles, stats_left, stats_right, catalog,
                    );
                    let _ = profile;
                    if pullup_calls < pushdown_calls {
                        moved.push((pred.clone(), from_left));
                    }
                }
            }
            for (pred, from_left) in moved {
                let side = if from_left {
                    &mut shape.left_preds
                } else {
                    &mut shape.right_preds
                };
                side.retain(|p| p.id != pred.id);
                shape.top_preds.push(pred);
            }
            shape.left_base = place_rec(shape.left_base, profiles, catalog);
            shape.right_base = place_rec(shape.right_base, profiles, catalog);
            rebuild_join(shape, profiles)
        }
    }
}

fn force_placement(
    node: PlanNode,
    profiles: &[PredicateProfile],
    _pullup: bool,
) -> PlanNode {
    match split_join_shape(node) {
        Err(n) => {
            let children = n
                .children
                .into_iter()
                .map(|c| force_placement(c, profiles, _pullup))
                .collect();
            PlanNode::new(n.op, children)
        }
        Ok(mut shape) => {
            let pull = |preds: &mut Vec<Predicate>, top: &mut Vec<Predicate>| {
                let (ai, rest): (Vec<_>, Vec<_>) = preds
                    .drain(..)
                    .partition(|p| plan::is_ai_filter(&p.expr));
                *preds = rest;
                top.extend(ai);
            };
            let mut top = std::mem::take(&mut shape.top_preds);
            pull(&mut shape.left_preds, &mut top);
            pull(&mut shape.right_preds, &mut top);
            shape.top_preds = top;
            rebuild_join(shape, profiles)
        }
    }
}

fn base_rows(node: &PlanNode, catalog: &BTreeMap<String, Table>) -> f64 {
    match &node.op {
        PlanOp::Scan { table, .. } => catalog
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(table))
            .map(|(_, t)| t.stats.row_count as f64)
            .unwrap_or(0.0),
        _ => {
            // Nested shapes: fall back to the annotated estimate if present.
            node.est_rows
        }
    }
}

/// Estimated rows reaching predicate `target` on a side, assuming the
/// side's predicates are evaluated in rank order.
fn rows_before_pred(
    base: f64,
    side_preds: &[Predicate],
    target: usize,
    profiles: &[PredicateProfile],
) -> f64 {
    let mut chain: Vec<&PredicateProfile> = side_preds
        .iter()
        .filter_map(|p| profile_for(profiles, p.id))
        .collect();
    chain.sort_by(|a, b| {
        a.rank()
            .partial_cmp(&b.rank())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.pred_id.cmp(&b.pred_id))
    });
    let mut rows = base;
    for p in chain {
        if p.pred_id == target {
            break;
        }
        rows *= p.effective().1;
    }
    rows
}

/// Estimated join output rows reaching predicate `target` in the pull-up
/// position: the join of both sides (with `target` removed from its side)
/// filtered by cheaper post-join predicates.
fn join_output_before_pred(
    shape: &JoinShape,
    target: usize,
    profiles: &[PredicateProfile],
    left_base: f64,
    right_base: f64,
    catalog: &BTreeMap<String, Table>,
) -> f64 {
    let side_rows = |preds: &[Predicate], base: f64| {
        let mut rows = base;
        for p in preds {
            if p.id == target {
                continue;
            }
            if let Some(profile) = profile_for(profiles, p.id) {
                rows *= profile.effective().1;
            }
        }
        rows
    };
    let l = side_rows(&shape.left_preds, left_base);
    let r = side_rows(&shape.right_preds, right_base);
    let join_rows = estimate_join_rows(
        l,
        r,
        &shape.equi_keys,
        &shape.left_base,
        &shape.right_base,
        catalog,
    );
    // Cheaper post-join predicates run first.
    let target_rank = profile_for(profiles, target).map(|p| p.rank()).unwrap_or(0.0);
    let mut rows = join_rows;
    for p in &shape.top_preds {
        if let Some(profile) = profile_for(profiles, p.id) {
            if profile.rank() < target_rank {
                rows *= profile.effective().1;
            }
        }
    }
    rows
}

fn estimate_join_rows(
    left_rows: f64,
    right_rows: f64,
    equi_keys: &[(ColumnRef, ColumnRef)],
    left_base: &PlanNode,
    right_base: &PlanNode,
    catalog: &BTreeMap<String, Table>,
) -> f64 {
    if equi_keys.is_empty() {
        return left_rows * right_rows;
    }
    // Distinct counts scale down with filtering: d' = min(d, rows).
    let scan_distinct = |node: &PlanNode, col: &ColumnRef| -> f64 {
        let stats = StatsView::new(node, catalog);
        stats.distinct(col) as f64
    };
    let (lk, rk) = &equi_keys[0];
    let dl = scan_distinct(left_base, lk).max(1.0).min(left_rows.max(1.0));
    let dr = scan_distinct(right_base, rk)
        .max(1.0)
        .min(right_rows.max(1.0));
    left_rows * right_rows / dl.max(dr)
}

/// Estimated AI calls issued by one projected expression per input row.
fn expr_calls_per_row(expr: &Expr, window: u64) -> f64 {
    match expr {
        Expr::AiCall(c) => match c.kind {
            AiKind::Complete => 1.0,
            AiKind::Classify => match &c.labels {
                Some(crate::parser::ast::LabelsArg::List(items)) => {
                    let label_tokens: u64 = items.iter().map(|l| estimate_tokens(l)).sum();
                    let capacity_tokens = window.saturating_sub(64).max(1);
                    let by_tokens = label_tokens.div_ceil(capacity_tokens).max(1);
                    let by_count =
                        (items.len() as u64).div_ceil(MAX_LABELS_PER_CHUNK as u64).max(1);
                    by_tokens.max(by_count) as f64
                }
                _ => 1.0,
            },
            _ => 0.0,
        },
        _ => 0.0,
    }
}

/// Computes est_rows / est_ai_calls annotations bottom-up.
pub fn annotate(
    node: PlanNode,
    catalog: &BTreeMap<String, Table>,
    overrides: &ProfileOverrides,
) -> PlanNode {
    let profiles = profile_predicates(&node, catalog, overrides);
    annotate_rec(node, catalog, &profiles)
}

fn annotate_rec(
    node: PlanNode,
    catalog: &BTreeMap<String, Table>,
    profiles: &[PredicateProfile],
) -> PlanNode {
    let children: Vec<PlanNode> = node
        .children
        .into_iter()
        .map(|c| annotate_rec(c, catalog, profiles))
        .collect();
    let (est_rows, est_ai_calls) = match &node.op {
        PlanOp::Scan { table, schema, .. } => {
            let rows = catalog
                .iter()
                .find(|(name, _)| name.eq_ignore_ascii_case(table))
                .map(|(_, t)| t.stats.row_count as f64)
                .unwrap_or(if schema.is_empty() { 1.0 } else { 0.0 });
            (rows, 0.0)
        }
        PlanOp::Filter { pred } => {
            let input = children[0].est_rows;
            let profile = profile_for(profiles, pred.id);
            let sel = profile.map(|p| p.effective().1).unwrap_or(1.0);
            let calls = if plan::is_ai_filter(&pred.expr) {
                input
            } else {
                0.0
            };
            (input * sel, calls)
        }
        PlanOp::Join { equi_keys } => {
            let (lp, l_base) = peel(&children[0]);
            let (rp, r_base) = peel(&children[1]);
            let _ = (lp, rp);
            let rows = estimate_join_rows(
                children[0].est_rows,
                children[1].est_rows,
                equi_keys,
                l_base,
                r_base,
                catalog,
            );
            (rows, 0.0)
        }
        PlanOp::ClassifyJoin {
            row_input: _,
            label_col,
            instruction,
            context_window_tokens,
            original_pred,
            ..
        } => {
            let row_rows = children[0].est_rows;
            let label_rows = children[1].est_rows;
            let stats = StatsView::new(&children[1], catalog);
            let distinct = stats.distinct(label_col).max(1) as f64;
            let avg_label_tokens = stats.avg_tokens(label_col).max(1.0);
            let row_stats = StatsView::new(&children[0], catalog);
            let row_tokens = if let PlanOp::ClassifyJoin { row_input, .. } = &node.op {
                row_stats.avg_tokens(row_input)
            } else {
                0.0
            };
            let instr_tokens = instruction
                .as_deref()
                .map(|s| estimate_tokens(s) as f64)
                .unwrap_or(0.0);
            let budget = (*context_window_tokens as f64 - instr_tokens - row_tokens).max(1.0);
            let capacity = (budget / avg_label_tokens)
                .floor()
                .clamp(1.0, MAX_LABELS_PER_CHUNK as f64);
            let chunks = (distinct / capacity).ceil().max(1.0);
            let sel = profile_for(profiles, *original_pred)
                .map(|p| p.effective().1)
                .unwrap_or(DEFAULT_AI_SELECTIVITY);
            (row_rows * label_rows * sel, row_rows * chunks)
        }
        PlanOp::Extend { items } | PlanOp::Project { items } => {
            let input = children[0].est_rows;
            let calls: f64 = items
                .iter()
                .map(|i| expr_calls_per_row(&i.expr, DEFAULT_CONTEXT_WINDOW_TOKENS))
                .sum();
            (input, input * calls)
        }
        PlanOp::Aggregate { group_keys, aggs } => {
            let input = children[0].est_rows;
            let child_schema = children[0].output_schema();
            let groups = if group_keys.is_empty() {
                1.0
            } else {
                let mut g = 1.0;
                let stats = StatsView::new(&children[0], catalog);
                for k in group_keys {
                    if resolve_col(&child_schema, k).is_ok() {
                        let d = stats.distinct(k);
                        g *= if d > 0 { d as f64 } else { input.max(1.0) };
                    }
                }
                g.min(input.max(1.0))
            };
            let ai_aggs = aggs
                .iter()
                .filter(|a| matches!(a.kind, plan::AggCallKind::Ai(_)))
                .count() as f64;
            // One call per group is the short-circuit floor.
            (groups, groups * ai_aggs)
        }
    };
    PlanNode {
        op: node.op,
        children,
        est_rows,
        est_ai_calls,
    }
}

fn peel<'a>(node: &'a PlanNode) -> (Vec<&'a Predicate>, &'a PlanNode) {
    let mut preds = Vec::new();
    let mut cur = node;
    while let PlanOp::Filter { pred } = &cur.op {
        preds.push(pred);
        cur = &cur.children[0];
    }
    (preds, cur)
}

/// Convenience wrapper used by Project items during execution planning.
pub fn classify_list_chunks(items: &[String], window: u64) -> Vec<Vec<String>> {
    let mut chunks: Vec<Vec<String>> = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    let mut cur_tokens = 0u64;
    let capacity_tokens = window.saturating_sub(64).max(1);
    for label in items {
        let t = estimate_tokens(label);
        if !cur.is_empty()
            && (cur_tokens + t > capacity_tokens || cur.len() >= MAX_LABELS_PER_CHUNK)
        {
            chunks.push(std::mem::take(&mut cur));
            cur_tokens = 0;
        }
        cur.push(label.clone());
        cur_tokens += t;
    }
    if !cur.is_empty() {
        chunks.push(cur);
    }
    chunks
}
