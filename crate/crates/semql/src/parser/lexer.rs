//! Tokenizer for the AISQL subset. Tracks line/column for error reporting.

use super::SyntaxError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    StringLit(String),
    Number(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Star,
    Colon,
    Semicolon,
    Eq,
    Neq,
    Lt,
    Gt,
    Le,
    Ge,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::StringLit(_) => "string literal".to_string(),
            Tok::Number(n) => format!("number '{n}'"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::LBrace => "'{'".into(),
            Tok::RBrace => "'}'".into(),
            Tok::LBracket => "'['".into(),
            Tok::RBracket => "']'".into(),
            Tok::Comma => "','".into(),
            Tok::Dot => "'.'".into(),
            Tok::Star => "'*'".into(),
            Tok::Colon => "':'".into(),
            Tok::Semicolon => "';'".into(),
            Tok::Eq => "'='".into(),
            Tok::Neq => "'!='".into(),
            Tok::Lt => "'<'".into(),
            Tok::Gt => "'>'".into(),
            Tok::Le => "'<='".into(),
            Tok::Ge => "'>='".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Spanned {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

pub fn tokenize(sql: &str) -> Result<Vec<Spanned>, SyntaxError> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = sql.chars().peekable();

    macro_rules! push {
        ($tok:expr, $l:expr, $c:expr) => {
            out.push(Spanned {
                tok: $tok,
                line: $l,
                col: $c,
            })
        };
    }

    while let Some(&ch) = chars.peek() {
        let (tl, tc) = (line, col);
        match ch {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            '\'' => {
                chars.next();
                col += 1;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some('\'') => {
                            col += 1;
                            // '' escapes a quote inside the literal
                            if chars.peek() == Some(&'\'') {
                                chars.next();
                                col += 1;
                                s.push('\'');
                            } else {
                                break;
                            }
                        }
                        Some('\n') => {
                            line += 1;
                            col = 1;
                            s.push('\n');
                        }
                        Some(c) => {
                            col += 1;
                            s.push(c);
                        }
                        None => {
                            return Err(SyntaxError {
                                line: tl,
                                col: tc,
                                message: "unterminated string literal".into(),
                                expected: vec!["'".into()],
                            })
                        }
                    }
                }
                push!(Tok::StringLit(s), tl, tc);
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() || c == '.' {
                        // Leave trailing `.` alone when followed by non-digit
                        if c == '.' {
                            let mut look = chars.clone();
                            look.next();
                            if !look.peek().is_some_and(|d| d.is_ascii_digit()) {
                                break;
                            }
                        }
                        s.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                push!(Tok::Number(s), tl, tc);
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        s.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                push!(Tok::Ident(s), tl, tc);
            }
            _ => {
                chars.next();
                col += 1;
                let tok = match ch {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    ',' => Tok::Comma,
                    '.' => Tok::Dot,
                    '*' => Tok::Star,
                    ':' => Tok::Colon,
                    ';' => Tok::Semicolon,
                    '=' => Tok::Eq,
                    '!' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Neq
                        } else {
                            return Err(SyntaxError {
                                line: tl,
                                col: tc,
                                message: "unexpected character '!'".into(),
                                expected: vec!["'!='".into()],
                            });
                        }
                    }
                    '<' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Le
                        } else if chars.peek() == Some(&'>') {
                            chars.next();
                            col += 1;
                            Tok::Neq
                        } else {
                            Tok::Lt
                        }
                    }
                    '>' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Ge
                        } else {
                            Tok::Gt
                        }
                    }
                    other => {
                        return Err(SyntaxError {
                            line: tl,
                            col: tc,
                            message: format!("unexpected character '{other}'"),
                            expected: vec![],
                        })
                    }
                };
                push!(tok, tl, tc);
            }
        }
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}
