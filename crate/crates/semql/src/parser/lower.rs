//! Lowering of a parsed statement to the canonical logical plan:
//! Scan -> Filter* -> Join -> Filter* -> Project/Aggregate, with every WHERE
//! conjunct pushed to its lowest legal position. This is the "always
//! push-down" baseline the optimizer starts from.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::{ColumnRef, Table};
use crate::parser::ast::{
    AiKind, Ast, CompareOp, Expr, FromClause, SelectItem, TableRef,
};
use crate::planner::plan::{
    resolve_col, AggCall, AggCallKind, PlanCol, PlanNode, PlanOp, PlanSchema, Predicate,
    ProjectItem,
};

#[derive(Debug, Error, PartialEq)]
pub enum LowerError {
    #[error("name error: {0}")]
    Name(String),
    #[error("type error: {0}")]
    Type(String),
}

/// Which join inputs an expression references.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Sides {
    None,
    Left,
    Right,
    Both,
}

pub fn lower(ast: &Ast, catalog: &BTreeMap<String, Table>) -> Result<PlanNode, LowerError> {
    let mut pred_id = 0usize;
    let mut next_pred = |expr: &Expr| {
        let p = Predicate {
            id: pred_id,
            expr: expr.clone(),
        };
        pred_id += 1;
        p
    };

    let (mut node, left_schema, right_schema) = match &ast.from {
        None => {
            // SELECT without FROM: a single empty-schema row.
            let scan = PlanNode::new(
                PlanOp::Scan {
                    table: String::new(),
                    binding: String::new(),
                    schema: Vec::new(),
                },
                vec![],
            );
            (scan, Vec::new(), None)
        }
        Some(from) => lower_from(from, catalog, &mut next_pred)?,
    };

    let full_schema: PlanSchema = {
        let mut s = left_schema.clone();
        if let Some(r) = &right_schema {
            s.extend(r.clone());
        }
        s
    };

    // WHERE conjuncts, each pushed to its lowest legal position.
    let mut left_filters: Vec<Predicate> = Vec::new();
    let mut right_filters: Vec<Predicate> = Vec::new();
    let mut top_filters: Vec<Predicate> = Vec::new();
    for conj in &ast.where_conjuncts {
        check_boolean_predicate(conj)?;
        resolve_expr(conj, &full_schema)?;
        let pred = next_pred(conj);
        match sides_of(conj, &left_schema, right_schema.as_ref())? {
            Sides::Right => right_filters.push(pred),
            Sides::Left | Sides::None => left_filters.push(pred),
            Sides::Both => top_filters.push(pred),
        }
    }

    node = attach_where_filters(node, left_filters, right_filters)?;
    for pred in top_filters {
        node = PlanNode::new(PlanOp::Filter { pred }, vec![node]);
    }

    // Select list: aggregate or plain projection.
    let is_aggregate = !ast.group_by.is_empty()
        || ast.select.iter().any(|item| {
            matches!(item, SelectItem::Expr { expr, .. } if expr.contains_aggregate())
        });

    if is_aggregate {
        node = lower_aggregate(ast, node)?;
    } else {
        let items = project_items(&ast.select, &node.output_schema())?;
        for item in &items {
            if let Some(call) = item.expr.as_ai_call() {
                if call.kind == AiKind::Filter {
                    return Err(LowerError::Type(
                        "AI_FILTER outside boolean context".into(),
                    ));
                }
            }
        }
        node = PlanNode::new(PlanOp::Project { items }, vec![node]);
    }
    Ok(node)
}

type NextPred<'a> = dyn FnMut(&Expr) -> Predicate + 'a;

fn lower_from(
    from: &FromClause,
    catalog: &BTreeMap<String, Table>,
    next_pred: &mut NextPred,
) -> Result<(PlanNode, PlanSchema, Option<PlanSchema>), LowerError> {
    let left = scan_node(&from.left, catalog)?;
    let left_schema = left.output_schema();
    match &from.join {
        None => Ok((left, left_schema, None)),
        Some(join) => {
            let right = scan_node(&join.right, catalog)?;
            let right_schema = right.output_schema();
            let full: PlanSchema = left_schema
                .iter()
                .chain(right_schema.iter())
                .cloned()
                .collect();

            let mut equi_keys: Vec<(ColumnRef, ColumnRef)> = Vec::new();
            let mut left_filters: Vec<Predicate> = Vec::new();
            let mut right_filters: Vec<Predicate> = Vec::new();
            let mut pair_filters: Vec<Predicate> = Vec::new();
            for conj in &join.on {
                check_boolean_predicate(conj)?;
                resolve_expr(conj, &full)?;
                if let Some((l, r)) = as_equi_key(conj, &left_schema, &right_schema)? {
                    equi_keys.push((l, r));
                    continue;
                }
                let pred = next_pred(conj);
                match sides_of(conj, &left_schema, Some(&right_schema))? {
                    Sides::Left | Sides::None => left_filters.push(pred),
                    Sides::Right => right_filters.push(pred),
                    Sides::Both => pair_filters.push(pred),
                }
            }

            let mut l = left;
            for pred in left_filters {
                l = PlanNode::new(PlanOp::Filter { pred }, vec![l]);
            }
            let mut r = right;
            for pred in right_filters {
                r = PlanNode::new(PlanOp::Filter { pred }, vec![r]);
            }
            let mut node = PlanNode::new(PlanOp::Join { equi_keys }, vec![l, r]);
            for pred in pair_filters {
                node = PlanNode::new(PlanOp::Filter { pred }, vec![node]);
            }
            Ok((node, left_schema, Some(right_schema)))
        }
    }
}

fn scan_node(tref: &TableRef, catalog: &BTreeMap<String, Table>) -> Result<PlanNode, LowerError> {
    let table = catalog
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(&tref.table))
        .map(|(_, t)| t)
        .ok_or_else(|| LowerError::Name(format!("unknown table '{}'", tref.table)))?;
    let binding = tref.binding_name().to_string();
    let schema: PlanSchema = table
        .schema
        .columns
        .iter()
        .map(|c| PlanCol {
            qualifier: Some(binding.clone()),
            name: c.name.clone(),
            kind: c.kind,
        })
        .collect();
    Ok(PlanNode::new(
        PlanOp::Scan {
            table: tref.table.clone(),
            binding,
            schema,
        },
        vec![],
    ))
}

fn attach_where_filters(
    node: PlanNode,
    left_filters: Vec<Predicate>,
    right_filters: Vec<Predicate>,
) -> Result<PlanNode, LowerError> {
    if left_filters.is_empty() && right_filters.is_empty() {
        return Ok(node);
    }
    Ok(push_filters(node, left_filters, right_filters))
}

/// Pushes single-side filters below the join (above the respective scan's
/// existing filter chain, preserving textual order).
fn push_filters(
    node: PlanNode,
    left_filters: Vec<Predicate>,
    right_filters: Vec<Predicate>,
) -> PlanNode {
    match node.op {
        PlanOp::Filter { pred } => {
            let child = push_filters(
                node.children.into_iter().next().unwrap(),
                left_filters,
                right_filters,
            );
            PlanNode::new(PlanOp::Filter { pred }, vec![child])
        }
        PlanOp::Join { equi_keys } => {
            let mut children = node.children.into_iter();
            let mut l = children.next().unwrap();
            let mut r = children.next().unwrap();
            for pred in left_filters {
                l = PlanNode::new(PlanOp::Filter { pred }, vec![l]);
            }
            for pred in right_filters {
                r = PlanNode::new(PlanOp::Filter { pred }, vec![r]);
            }
            PlanNode::new(PlanOp::Join { equi_keys }, vec![l, r])
        }
        op => {
            // Single-table query: all filters stack above this node.
            let mut n = PlanNode {
                op,
                children: node.children,
                est_rows: 0.0,
                est_ai_calls: 0.0,
            };
            for pred in left_filters.into_iter().chain(right_filters) {
                n = PlanNode::new(PlanOp::Filter { pred }, vec![n]);
            }
            n
        }
    }
}

fn as_equi_key(
    expr: &Expr,
    left: &PlanSchema,
    right: &PlanSchema,
) -> Result<Option<(ColumnRef, ColumnRef)>, LowerError> {
    if let Expr::Compare {
        op: CompareOp::Eq,
        left: l,
        right: r,
    } = expr
    {
        if let (Expr::Column(a), Expr::Column(b)) = (l.as_ref(), r.as_ref()) {
            let a_left = resolve_col(left, a).is_ok();
            let b_left = resolve_col(left, b).is_ok();
            let a_right = resolve_col(right, a).is_ok();
            let b_right = resolve_col(right, b).is_ok();
            if a_left && b_right && !a_right && !b_left {
                return Ok(Some((a.clone(), b.clone())));
            }
            if b_left && a_right && !b_right && !a_left {
                return Ok(Some((b.clone(), a.clone())));
            }
        }
    }
    Ok(None)
}

fn sides_of(
    expr: &Expr,
    left: &PlanSchema,
    right: Option<&PlanSchema>,
) -> Result<Sides, LowerError> {
    let mut side = Sides::None;
    for col in expr.column_refs() {
        let in_left = resolve_col(left, col).is_ok();
        let in_right = right.map(|r| resolve_col(r, col).is_ok()).unwrap_or(false);
        let this = match (in_left, in_right) {
            (true, false) => Sides::Left,
            (false, true) => Sides::Right,
            (true, true) => {
                return Err(LowerError::Name(format!("ambiguous column '{col}'")));
            }
            (false, false) => {
                return Err(LowerError::Name(format!("unknown column '{col}'")));
            }
        };
        side = match (side, this) {
            (Sides::None, s) => s,
            (s, t) if s == t => s,
            _ => Sides::Both,
        };
    }
    Ok(side)
}

/// Validates every column reference in the expression against the schema.
fn resolve_expr(expr: &Expr, schema: &PlanSchema) -> Result<(), LowerError> {
    for col in expr.column_refs() {
        resolve_col(schema, col).map_err(LowerError::Name)?;
    }
    Ok(())
}

fn check_boolean_predicate(expr: &Expr) -> Result<(), LowerError> {
    match expr {
        Expr::Compare { .. }
        | Expr::Between { .. }
        | Expr::InList { .. }
        | Expr::FlIsImage(_)
        | Expr::Literal(crate::data::Value::Bool(_)) => Ok(()),
        Expr::AiCall(c) if c.kind == AiKind::Filter => Ok(()),
        Expr::Column(_) => Ok(()), // boolean column
        other => Err(LowerError::Type(format!(
            "'{}' is not a boolean predicate",
            crate::parser::print_expr(other)
        ))),
    }
}

fn item_name(expr: &Expr, alias: &Option<String>) -> String {
    if let Some(a) = alias {
        return a.clone();
    }
    match expr {
        Expr::Column(c) => c.name.clone(),
        Expr::CountStar => "count".to_string(),
        Expr::AiCall(c) => c.kind.function_name().to_ascii_lowercase(),
        other => crate::parser::print_expr(other),
    }
}

fn project_items(
    select: &[SelectItem],
    schema: &PlanSchema,
) -> Result<Vec<ProjectItem>, LowerError> {
    let mut items = Vec::new();
    for item in select {
        match item {
            SelectItem::Star => {
                for col in schema {
                    // Qualify names shared across join sides so the output
                    // schema stays unambiguous.
                    let dup = schema
                        .iter()
                        .filter(|c| c.name.eq_ignore_ascii_case(&col.name))
                        .count()
                        > 1;
                    let name = match (&col.qualifier, dup) {
                        (Some(q), true) => format!("{q}.{}", col.name),
                        _ => col.name.clone(),
                    };
                    items.push(ProjectItem {
                        name,
                        expr: Expr::Column(ColumnRef {
                            qualifier: col.qualifier.clone(),
                            name: col.name.clone(),
                        }),
                    });
                }
            }
            SelectItem::Expr { expr, alias } => {
                resolve_expr(expr, schema)?;
                items.push(ProjectItem {
                    name: item_name(expr, alias),
                    expr: expr.clone(),
                });
            }
        }
    }
    Ok(items)
}

fn lower_aggregate(ast: &Ast, mut node: PlanNode) -> Result<PlanNode, LowerError> {
    let child_schema = node.output_schema();

    // Computed group keys (e.g. GROUP BY an AI_CLASSIFY alias) become an
    // Extend below the aggregate.
    let mut extend_items: Vec<ProjectItem> = Vec::new();
    let mut group_keys: Vec<ColumnRef> = Vec::new();
    for key in &ast.group_by {
        if key.qualifier.is_none() {
            let aliased = ast.select.iter().find_map(|item| match item {
                SelectItem::Expr {
                    expr,
                    alias: Some(a),
                } if a.eq_ignore_ascii_case(&key.name) => Some(expr),
                _ => None,
            });
            if let Some(expr) = aliased {
                if !matches!(expr, Expr::Column(_)) {
                    resolve_expr(expr, &child_schema)?;
                    extend_items.push(ProjectItem {
                        name: key.name.clone(),
                        expr: expr.clone(),
                    });
                    group_keys.push(ColumnRef::bare(&key.name));
                    continue;
                }
            }
        }
        resolve_col(&child_schema, key).map_err(LowerError::Name)?;
        group_keys.push(key.clone());
    }
    if !extend_items.is_empty() {
        node = PlanNode::new(
            PlanOp::Extend {
                items: extend_items,
            },
            vec![node],
        );
    }
    let agg_input_schema = node.output_schema();

    let mut aggs: Vec<AggCall> = Vec::new();
    let mut project: Vec<ProjectItem> = Vec::new();
    for item in &ast.select {
        let (expr, alias) = match item {
            SelectItem::Star => {
                return Err(LowerError::Type(
                    "SELECT * is not allowed with GROUP BY".into(),
                ))
            }
            SelectItem::Expr { expr, alias } => (expr, alias),
        };
        let name = item_name(expr, alias);
        if expr.contains_aggregate() {
            let kind = match expr {
                Expr::CountStar => AggCallKind::CountStar,
                Expr::AiCall(c) if c.kind.is_aggregate() => {
                    resolve_expr(expr, &agg_input_schema)?;
                    AggCallKind::Ai(c.clone())
                }
                other => {
                    return Err(LowerError::Type(format!(
                        "unsupported aggregate expression '{}'",
                        crate::parser::print_expr(other)
                    )))
                }
            };
            aggs.push(AggCall {
                name: name.clone(),
                kind,
            });
            project.push(ProjectItem {
                name: name.clone(),
                expr: Expr::Column(ColumnRef::bare(&name)),
            });
        } else {
            // Non-aggregate select item must be a group key (by alias or name).
            let matches_key = group_keys.iter().any(|k| {
                k.name.eq_ignore_ascii_case(&name)
                    || matches!(expr, Expr::Column(c) if c.name.eq_ignore_ascii_case(&k.name))
            });
            if !matches_key {
                return Err(LowerError::Type(format!(
                    "select item '{name}' is neither an aggregate nor a group key"
                )));
            }
            let key_name = match expr {
                Expr::Column(c) => c.name.clone(),
                _ => name.clone(),
            };
            project.push(ProjectItem {
                name: name.clone(),
                expr: Expr::Column(ColumnRef::bare(key_name)),
            });
        }
    }

    node = PlanNode::new(PlanOp::Aggregate { group_keys, aggs }, vec![node]);
    Ok(PlanNode::new(PlanOp::Project { items: project }, vec![node]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Schema, Value, ValueKind};
    use crate::parser::parse;

    fn catalog() -> BTreeMap<String, Table> {
        let mut c = BTreeMap::new();
        let papers = Table::new(
            Schema::new(vec![
                ("id", ValueKind::Int),
                ("date", ValueKind::Int),
                ("abstract", ValueKind::Text),
            ])
            .unwrap(),
            vec![vec![
                Value::Int(1),
                Value::Int(2012),
                Value::Text("a1".into()),
            ]],
        )
        .unwrap();
        let images = Table::new(
            Schema::new(vec![("id", ValueKind::Int), ("image_file", ValueKind::Text)]).unwrap(),
            vec![vec![Value::Int(1), Value::Text("f1".into())]],
        )
        .unwrap();
        c.insert("papers".to_string(), papers);
        c.insert("paper_images".to_string(), images);
        c
    }

    #[test]
    fn lower_listing_1_pushdown_baseline() {
        let sql = "SELECT AI_SUMMARIZE_AGG(p.abstract) \
            FROM papers p JOIN paper_images i ON p.id = i.id \
            WHERE p.date BETWEEN 2010 AND 2015 AND \
            AI_FILTER(PROMPT('text {0}', p.abstract)) AND \
            AI_FILTER(PROMPT('image {0}', i.image_file))";
        let plan = lower(&parse(sql).unwrap(), &catalog()).unwrap();
        // Project -> Aggregate -> Join(left: filters over papers, right: filter over images)
        let agg = &plan.children[0];
        let join = &agg.children[0];
        assert!(matches!(join.op, PlanOp::Join { .. }));
        let left = &join.children[0];
        let right = &join.children[1];
        // Both WHERE predicates on papers sit over the papers scan.
        let left_preds = left.predicates();
        assert_eq!(left_preds.len(), 2);
        let right_preds = right.predicates();
        assert_eq!(right_preds.len(), 1);
        assert!(crate::planner::plan::is_ai_filter(&right_preds[0].expr));
    }

    #[test]
    fn lower_single_table_no_where() {
        let plan = lower(&parse("SELECT id FROM papers").unwrap(), &catalog()).unwrap();
        assert!(matches!(plan.op, PlanOp::Project { .. }));
        assert!(matches!(plan.children[0].op, PlanOp::Scan { .. }));
    }

    #[test]
    fn lower_unknown_column() {
        let err = lower(
            &parse("SELECT nope FROM papers").unwrap(),
            &catalog(),
        )
        .unwrap_err();
        assert!(matches!(err, LowerError::Name(_)));
    }

    #[test]
    fn lower_unknown_table() {
        let err = lower(&parse("SELECT a FROM missing").unwrap(), &catalog()).unwrap_err();
        assert!(matches!(err, LowerError::Name(_)));
    }

    #[test]
    fn semantic_join_is_cross_join_with_filter() {
        let sql = "SELECT * FROM papers p JOIN paper_images i \
                   ON AI_FILTER(PROMPT('{0} about {1}', p.abstract, i.image_file))";
        let plan = lower(&parse(sql).unwrap(), &catalog()).unwrap();
        let filter = &plan.children[0];
        assert!(matches!(&filter.op, PlanOp::Filter { pred } if pred.expr.is_ai_call()));
        assert!(
            matches!(&filter.children[0].op, PlanOp::Join { equi_keys } if equi_keys.is_empty())
        );
    }

    #[test]
    fn options_survive_lowering() {
        let sql = "SELECT * FROM papers WHERE \
                   AI_FILTER(PROMPT('x {0}', abstract), {'model': 'm9', 'cascade': 'on'})";
        let plan = lower(&parse(sql).unwrap(), &catalog()).unwrap();
        let preds = plan.predicates();
        let call = preds[0].expr.as_ai_call().unwrap();
        assert_eq!(call.options.get("model").unwrap(), "m9");
        assert_eq!(call.options.get("cascade").unwrap(), "on");
    }

    #[test]
    fn group_by_computed_alias_gets_extend() {
        let mut c = catalog();
        let reviews = Table::new(
            Schema::new(vec![("review", ValueKind::Text)]).unwrap(),
            vec![vec![Value::Text("good".into())]],
        )
        .unwrap();
        c.insert("product_reviews".to_string(), reviews);
        let sql = "SELECT AI_CLASSIFY(review, ['pos','neg']) AS sentiment, COUNT(*) AS n \
                   FROM product_reviews GROUP BY sentiment";
        let plan = lower(&parse(sql).unwrap(), &c).unwrap();
        let agg = &plan.children[0];
        assert!(matches!(agg.op, PlanOp::Aggregate { .. }));
        assert!(matches!(agg.children[0].op, PlanOp::Extend { .. }));
        let schema = plan.output_schema();
        assert_eq!(schema[0].name, "sentiment");
        assert_eq!(schema[1].name, "n");
    }
}
