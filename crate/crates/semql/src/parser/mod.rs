//! Recursive-descent parser for the AISQL subset used by the engine, plus
//! lowering of the parsed tree to a logical plan.

pub mod ast;
pub mod lexer;
pub mod lower;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::{ColumnRef, PromptTemplate, Value};
use ast::{
    AiCallExpr, AiKind, Ast, CompareOp, Expr, FromClause, JoinClause, LabelsArg, SelectItem,
    TableRef,
};
use lexer::{Spanned, Tok};

pub use ast::{print_ast, print_expr};
pub use lower::{lower, LowerError};

#[derive(Debug, Error, PartialEq)]
#[error("syntax error at {line}:{col}: {message}{}", expected_suffix(.expected))]
pub struct SyntaxError {
    pub line: usize,
    pub col: usize,
    pub message: String,
    pub expected: Vec<String>,
}

fn expected_suffix(expected: &[String]) -> String {
    if expected.is_empty() {
        String::new()
    } else {
        format!(" (expected {})", expected.join(" or "))
    }
}

/// Parses a single AISQL statement.
pub fn parse(sql: &str) -> Result<Ast, SyntaxError> {
    let tokens = lexer::tokenize(sql)?;
    let mut p = Parser { tokens, pos: 0 };
    let ast = p.statement()?;
    validate(&ast)?;
    Ok(ast)
}

fn validate(ast: &Ast) -> Result<(), SyntaxError> {
    let err = |message: String| SyntaxError {
        line: 1,
        col: 1,
        message,
        expected: vec![],
    };
    for item in &ast.select {
        if let SelectItem::Expr { expr, .. } = item {
            if matches!(expr.as_ai_call().map(|c| c.kind), Some(AiKind::Filter)) {
                return Err(err("AI_FILTER may only appear in WHERE or ON".into()));
            }
        }
    }
    let predicate_positions = ast
        .where_conjuncts
        .iter()
        .chain(ast.from.iter().flat_map(|f| {
            f.join.iter().flat_map(|j| j.on.iter())
        }));
    for pred in predicate_positions {
        if pred.contains_aggregate() {
            return Err(err(
                "aggregate functions may only appear in the select list".into(),
            ));
        }
        if let Some(call) = pred.as_ai_call() {
            if call.kind != AiKind::Filter {
                return Err(err(format!(
                    "{} is not a boolean predicate",
                    call.kind.function_name()
                )));
            }
        }
    }
    Ok(())
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn advance(&mut self) -> Spanned {
        let t = self.tokens[self.pos.min(self.tokens.len() - 1)].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>, expected: &[&str]) -> SyntaxError {
        let t = self.peek();
        SyntaxError {
            line: t.line,
            col: t.col,
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.is_keyword(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), SyntaxError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.error(
                format!("unexpected {}", self.peek().tok.describe()),
                &[kw],
            ))
        }
    }

    fn expect(&mut self, tok: &Tok) -> Result<(), SyntaxError> {
        if &self.peek().tok == tok {
            self.advance();
            Ok(())
        } else {
            let want = tok.describe();
            Err(self.error(
                format!("unexpected {}", self.peek().tok.describe()),
                &[want.as_str()],
            ))
        }
    }

    fn identifier(&mut self) -> Result<String, SyntaxError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            _ => Err(self.error(
                format!("unexpected {}", self.peek().tok.describe()),
                &["identifier"],
            )),
        }
    }

    fn string_lit(&mut self) -> Result<String, SyntaxError> {
        match &self.peek().tok {
            Tok::StringLit(s) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            _ => Err(self.error(
                format!("unexpected {}", self.peek().tok.describe()),
                &["string literal"],
            )),
        }
    }

    fn statement(&mut self) -> Result<Ast, SyntaxError> {
        self.expect_keyword("SELECT")?;
        let select = self.select_list()?;
        let from = if self.eat_keyword("FROM") {
            Some(self.from_clause()?)
        } else {
            None
        };
        let where_conjuncts = if self.eat_keyword("WHERE") {
            self.conjunction()?
        } else {
            Vec::new()
        };
        let group_by = if self.eat_keyword("GROUP") {
            self.expect_keyword("BY")?;
            let mut keys = vec![self.column_ref()?];
            while self.peek().tok == Tok::Comma {
                self.advance();
                keys.push(self.column_ref()?);
            }
            keys
        } else {
            Vec::new()
        };
        if self.peek().tok == Tok::Semicolon {
            self.advance();
        }
        if self.peek().tok != Tok::Eof {
            return Err(self.error(
                format!("trailing input: {}", self.peek().tok.describe()),
                &["end of statement"],
            ));
        }
        Ok(Ast {
            select,
            from,
            where_conjuncts,
            group_by,
        })
    }

    fn select_list(&mut self) -> Result<Vec<SelectItem>, SyntaxError> {
        let mut items = Vec::new();
        loop {
            if self.peek().tok == Tok::Star {
                self.advance();
                items.push(SelectItem::Star);
            } else {
                let expr = self.expr()?;
                let alias = if self.eat_keyword("AS") {
                    Some(self.identifier()?)
                } else {
                    None
                };
                items.push(SelectItem::Expr { expr, alias });
            }
            if self.peek().tok == Tok::Comma {
                self.advance();
            } else {
                break;
            }
        }
        Ok(items)
    }

    fn from_clause(&mut self) -> Result<FromClause, SyntaxError> {
        let left = self.table_ref()?;
        let join = if self.eat_keyword("JOIN") {
            let right = self.table_ref()?;
            self.expect_keyword("ON")?;
            let on = self.conjunction()?;
            Some(JoinClause { right, on })
        } else {
            None
        };
        Ok(FromClause { left, join })
    }

    fn table_ref(&mut self) -> Result<TableRef, SyntaxError> {
        let table = self.identifier()?;
        let alias = if self.eat_keyword("AS") {
            Some(self.identifier()?)
        } else if matches!(&self.peek().tok, Tok::Ident(s)
            if !is_reserved(s))
        {
            Some(self.identifier()?)
        } else {
            None
        };
        Ok(TableRef { table, alias })
    }

    fn conjunction(&mut self) -> Result<Vec<Expr>, SyntaxError> {
        let mut out = vec![self.expr()?];
        loop {
            if self.eat_keyword("AND") {
                out.push(self.expr()?);
            } else if self.is_keyword("OR") {
                return Err(self.error("OR between predicates is not supported", &["AND"]));
            } else {
                break;
            }
        }
        Ok(out)
    }

    /// Expression with optional comparison / BETWEEN / IN suffix.
    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        let left = self.primary()?;
        if self.is_keyword("BETWEEN") {
            self.advance();
            let low = self.primary()?;
            self.expect_keyword("AND")?;
            let high = self.primary()?;
            return Ok(Expr::Between {
                expr: Box::new(left),
                low: Box::new(low),
                high: Box::new(high),
            });
        }
        if self.is_keyword("IN") {
            self.advance();
            self.expect(&Tok::LParen)?;
            let mut list = vec![self.primary()?];
            while self.peek().tok == Tok::Comma {
                self.advance();
                list.push(self.primary()?);
            }
            self.expect(&Tok::RParen)?;
            return Ok(Expr::InList {
                expr: Box::new(left),
                list,
            });
        }
        let op = match self.peek().tok {
            Tok::Eq => Some(CompareOp::Eq),
            Tok::Neq => Some(CompareOp::Neq),
            Tok::Lt => Some(CompareOp::Lt),
            Tok::Le => Some(CompareOp::Le),
            Tok::Gt => Some(CompareOp::Gt),
            Tok::Ge => Some(CompareOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            let right = self.primary()?;
            return Ok(Expr::Compare {
                op,
                left: Box::new(left),
                right: Box::new(right),
            });
        }
        Ok(left)
    }

    fn primary(&mut self) -> Result<Expr, SyntaxError> {
        match self.peek().tok.clone() {
            Tok::Number(n) => {
                self.advance();
                let v = if let Ok(i) = n.parse::<i64>() {
                    Value::Int(i)
                } else {
                    match n.parse::<f64>() {
                        Ok(f) if f.is_finite() => Value::Float(f),
                        _ => return Err(self.error(format!("invalid number '{n}'"), &[])),
                    }
                };
                Ok(Expr::Literal(v))
            }
            Tok::StringLit(s) => {
                self.advance();
                Ok(Expr::Literal(Value::Text(s)))
            }
            Tok::Ident(word) => {
                let upper = word.to_ascii_uppercase();
                match upper.as_str() {
                    "TRUE" => {
                        self.advance();
                        Ok(Expr::Literal(Value::Bool(true)))
                    }
                    "FALSE" => {
                        self.advance();
                        Ok(Expr::Literal(Value::Bool(false)))
                    }
                    "NULL" => {
                        self.advance();
                        Ok(Expr::Literal(Value::Null))
                    }
                    "COUNT" => {
                        self.advance();
                        self.expect(&Tok::LParen)?;
                        self.expect(&Tok::Star)?;
                        self.expect(&Tok::RParen)?;
                        Ok(Expr::CountStar)
                    }
                    "FL_IS_IMAGE" => {
                        self.advance();
                        self.expect(&Tok::LParen)?;
                        let inner = self.expr()?;
                        self.expect(&Tok::RParen)?;
                        Ok(Expr::FlIsImage(Box::new(inner)))
                    }
                    "AI_COMPLETE" => self.ai_prompt_call(AiKind::Complete),
                    "AI_FILTER" => self.ai_prompt_call(AiKind::Filter),
                    "AI_CLASSIFY" => self.ai_classify(),
                    "AI_AGG" => self.ai_agg(AiKind::Agg),
                    "AI_SUMMARIZE_AGG" => self.ai_agg(AiKind::SummarizeAgg),
                    _ => Ok(Expr::Column(self.column_ref()?)),
                }
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                Ok(e)
            }
            _ => Err(self.error(
                format!("unexpected {}", self.peek().tok.describe()),
                &["expression"],
            )),
        }
    }

    fn column_ref(&mut self) -> Result<ColumnRef, SyntaxError> {
        let first = self.identifier()?;
        if self.peek().tok == Tok::Dot {
            self.advance();
            let name = self.identifier()?;
            Ok(ColumnRef::qualified(first, name))
        } else {
            Ok(ColumnRef::bare(first))
        }
    }

    /// AI_FILTER / AI_COMPLETE: (prompt_arg [, options]).
    fn ai_prompt_call(&mut self, kind: AiKind) -> Result<Expr, SyntaxError> {
        self.advance();
        self.expect(&Tok::LParen)?;
        let prompt = self.prompt_arg()?;
        let options = if self.peek().tok == Tok::Comma {
            self.advance();
            self.options_map()?
        } else {
            BTreeMap::new()
        };
        self.expect(&Tok::RParen)?;
        Ok(Expr::AiCall(AiCallExpr {
            kind,
            prompt,
            labels: None,
            instruction: None,
            options,
        }))
    }

    /// PROMPT('template', col, ...) or a bare string (0-binding template).
    fn prompt_arg(&mut self) -> Result<PromptTemplate, SyntaxError> {
        if self.is_keyword("PROMPT") {
            let at = (self.peek().line, self.peek().col);
            self.advance();
            self.expect(&Tok::LParen)?;
            let template = self.string_lit()?;
            let mut bindings = Vec::new();
            while self.peek().tok == Tok::Comma {
                self.advance();
                bindings.push(self.column_ref()?);
            }
            self.expect(&Tok::RParen)?;
            PromptTemplate::new(template, bindings).map_err(|message| SyntaxError {
                line: at.0,
                col: at.1,
                message,
                expected: vec![],
            })
        } else {
            Ok(PromptTemplate::bare(self.string_lit()?))
        }
    }

    /// AI_CLASSIFY(input_col, labels [, 'instruction'] [, options]).
    fn ai_classify(&mut self) -> Result<Expr, SyntaxError> {
        self.advance();
        self.expect(&Tok::LParen)?;
        let input = self.column_ref()?;
        self.expect(&Tok::Comma)?;
        let labels = if self.peek().tok == Tok::LBracket {
            self.advance();
            let mut items = vec![self.string_lit()?];
            while self.peek().tok == Tok::Comma {
                self.advance();
                items.push(self.string_lit()?);
            }
            self.expect(&Tok::RBracket)?;
            LabelsArg::List(items)
        } else {
            LabelsArg::Column(self.column_ref()?)
        };
        let mut instruction = None;
        let mut options = BTreeMap::new();
        while self.peek().tok == Tok::Comma {
            self.advance();
            if self.peek().tok == Tok::LBrace {
                options = self.options_map()?;
            } else {
                instruction = Some(self.string_lit()?);
            }
        }
        self.expect(&Tok::RParen)?;
        let prompt = PromptTemplate::new("{0}", vec![input]).expect("single-binding template");
        Ok(Expr::AiCall(AiCallExpr {
            kind: AiKind::Classify,
            prompt,
            labels: Some(labels),
            instruction,
            options,
        }))
    }

    /// AI_AGG(col, 'instruction' [, options]) / AI_SUMMARIZE_AGG(col [, options]).
    fn ai_agg(&mut self, kind: AiKind) -> Result<Expr, SyntaxError> {
        self.advance();
        self.expect(&Tok::LParen)?;
        let input = self.column_ref()?;
        let mut instruction = None;
        let mut options = BTreeMap::new();
        while self.peek().tok == Tok::Comma {
            self.advance();
            if self.peek().tok == Tok::LBrace {
                options = self.options_map()?;
            } else if kind == AiKind::Agg && instruction.is_none() {
                instruction = Some(self.string_lit()?);
            } else {
                return Err(self.error(
                    format!("unexpected {}", self.peek().tok.describe()),
                    &["options map"],
                ));
            }
        }
        if kind == AiKind::Agg && instruction.is_none() {
            return Err(self.error("AI_AGG requires a task instruction", &["string literal"]));
        }
        self.expect(&Tok::RParen)?;
        let prompt = PromptTemplate::new("{0}", vec![input]).expect("single-binding template");
        Ok(Expr::AiCall(AiCallExpr {
            kind,
            prompt,
            labels: None,
            instruction,
            options,
        }))
    }

    /// {'key': 'value', ...}
    fn options_map(&mut self) -> Result<BTreeMap<String, String>, SyntaxError> {
        self.expect(&Tok::LBrace)?;
        let mut map = BTreeMap::new();
        if self.peek().tok != Tok::RBrace {
            loop {
                let key = self.string_lit()?;
                self.expect(&Tok::Colon)?;
                let value = match &self.peek().tok {
                    Tok::StringLit(_) => self.string_lit()?,
                    Tok::Number(n) => {
                        let n = n.clone();
                        self.advance();
                        n
                    }
                    _ => {
                        return Err(self.error(
                            format!("unexpected {}", self.peek().tok.describe()),
                            &["string literal", "number"],
                        ))
                    }
                };
                map.insert(key, value);
                if self.peek().tok == Tok::Comma {
                    self.advance();
                } else {
                    break;
                }
            }
        }
        self.expect(&Tok::RBrace)?;
        Ok(map)
    }
}

fn is_reserved(word: &str) -> bool {
    const RESERVED: &[&str] = &[
        "SELECT", "FROM", "JOIN", "ON", "WHERE", "AND", "OR", "GROUP", "BY", "AS", "BETWEEN",
        "IN", "COUNT", "TRUE", "FALSE", "NULL",
    ];
    RESERVED.iter().any(|r| word.eq_ignore_ascii_case(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING_1: &str = "SELECT AI_SUMMARIZE_AGG(p.abstract) \
        FROM papers p JOIN paper_images i ON p.id = i.id \
        WHERE p.date BETWEEN 2010 AND 2015 AND \
        AI_FILTER(PROMPT('Abstract {0} discusses energy efficiency in database systems', p.abstract)) \
        AND AI_FILTER(PROMPT('Image {0} shows energy consumption of different systems using the TPC-H workload', i.image_file));";

    const LISTING_2: &str = "SELECT * FROM \
        Reviews JOIN Categories \
        ON AI_FILTER(PROMPT('Review {0} is mapped to category {1}', Reviews.review, Categories.label));";

    #[test]
    fn parse_listing_1() {
        let ast = parse(LISTING_1).unwrap();
        let from = ast.from.as_ref().unwrap();
        assert!(from.join.is_some());
        assert_eq!(ast.where_conjuncts.len(), 3);
        let aggregates = ast
            .select
            .iter()
            .filter(|i| matches!(i, SelectItem::Expr { expr, .. } if expr.contains_aggregate()))
            .count();
        assert_eq!(aggregates, 1);
        // second and third conjuncts are AI filters
        assert!(ast.where_conjuncts[1].is_ai_call());
        assert!(ast.where_conjuncts[2].is_ai_call());
        assert!(matches!(
            &ast.where_conjuncts[0],
            Expr::Between { .. }
        ));
    }

    #[test]
    fn parse_listing_2() {
        let ast = parse(LISTING_2).unwrap();
        let join = ast.from.as_ref().unwrap().join.as_ref().unwrap();
        assert_eq!(join.on.len(), 1);
        let call = join.on[0].as_ai_call().unwrap();
        assert_eq!(call.kind, AiKind::Filter);
        assert_eq!(call.prompt.bindings.len(), 2);
        assert_eq!(
            call.prompt.bindings[0],
            ColumnRef::qualified("Reviews", "review")
        );
    }

    #[test]
    fn parse_select_one() {
        let ast = parse("SELECT 1").unwrap();
        assert!(ast.from.is_none());
        assert_eq!(
            ast.select,
            vec![SelectItem::Expr {
                expr: Expr::Literal(Value::Int(1)),
                alias: None
            }]
        );
    }

    #[test]
    fn parse_classify_with_group_by() {
        let sql = "SELECT AI_CLASSIFY(review, ['positive','neutral','negative'], \
                   'Classify the sentiment of this product review.') AS sentiment, \
                   COUNT(*) AS review_count FROM product_reviews GROUP BY sentiment;";
        let ast = parse(sql).unwrap();
        assert_eq!(ast.group_by, vec![ColumnRef::bare("sentiment")]);
        match &ast.select[0] {
            SelectItem::Expr { expr, alias } => {
                assert_eq!(alias.as_deref(), Some("sentiment"));
                let call = expr.as_ai_call().unwrap();
                assert_eq!(call.kind, AiKind::Classify);
                assert_eq!(
                    call.labels,
                    Some(LabelsArg::List(vec![
                        "positive".into(),
                        "neutral".into(),
                        "negative".into()
                    ]))
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_options_map() {
        let sql = "SELECT year, title FROM NYT_ARTICLES WHERE id_group IN (1, 2, 3) AND \
                   AI_FILTER(PROMPT('The article title is about finance: {0}', title), {'model': 'llama3.1-70b'});";
        let ast = parse(sql).unwrap();
        let call = ast.where_conjuncts[1].as_ai_call().unwrap();
        assert_eq!(call.options.get("model").map(|s| s.as_str()), Some("llama3.1-70b"));
    }

    #[test]
    fn syntax_error_has_position_and_expected() {
        let err = parse("SELECT FROM t").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.col > 1);
        assert!(!err.expected.is_empty());
    }

    #[test]
    fn or_rejected() {
        let err =
            parse("SELECT * FROM t WHERE a = 1 OR b = 2").unwrap_err();
        assert!(err.message.contains("OR"));
    }

    #[test]
    fn aggregate_not_allowed_in_where() {
        assert!(parse("SELECT * FROM t WHERE COUNT(*) = 1").is_err());
        assert!(parse("SELECT * FROM t WHERE AI_AGG(x, 'do') = 'y'").is_err());
    }

    #[test]
    fn filter_not_allowed_in_select() {
        assert!(parse("SELECT AI_FILTER('is it good?') FROM t").is_err());
    }

    #[test]
    fn bare_string_filter_argument() {
        let ast = parse("SELECT * FROM t WHERE AI_FILTER('only electronics reviews')").unwrap();
        let call = ast.where_conjuncts[0].as_ai_call().unwrap();
        assert!(call.prompt.bindings.is_empty());
        assert_eq!(call.prompt.template, "only electronics reviews");
    }

    #[test]
    fn string_escape_round_trip() {
        let ast = parse("SELECT 'it''s fine'").unwrap();
        match &ast.select[0] {
            SelectItem::Expr {
                expr: Expr::Literal(Value::Text(s)),
                ..
            } => assert_eq!(s, "it's fine"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn print_parse_fixpoint_on_listings() {
        for sql in [
            LISTING_1,
            LISTING_2,
            "SELECT 1",
            "SELECT a AS x, COUNT(*) FROM t AS u WHERE u.a IN ('p', 'q') GROUP BY x",
            "SELECT AI_COMPLETE(PROMPT('Evaluate {0}', review), {'model': 'm1'}) FROM product_reviews",
            "SELECT AI_AGG(review, 'Identify complaints', {'model': 'm2'}) FROM user_reviews GROUP BY product_id",
        ] {
            let ast = parse(sql).unwrap();
            let printed = print_ast(&ast);
            let reparsed = parse(&printed).unwrap_or_else(|e| {
                panic!("reparse of {printed:?} failed: {e}");
            });
            assert_eq!(ast, reparsed, "fixpoint failed for {printed}");
        }
    }

    #[test]
    fn keywords_case_insensitive() {
        let ast = parse("select a from t where a between 1 and 2").unwrap();
        assert_eq!(ast.where_conjuncts.len(), 1);
    }
}
