//! Parser for the analyzed source language.
//!
//! Hand-rolled lexer and recursive descent, with `//` line comments,
//! double-quoted strings, and conventional operator precedence
//! (`||`/`&&`, then comparisons, then `+`/`-`, then `*`/`/`/`%`).

use std::fmt;

use super::ast::{precedence, Expr, Function, SourceFile, Stmt};

/// A parse failure, with the 1-based source position it was detected at.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{file}:{line}:{column}: {message}")]
pub struct SyntaxError {
    pub file: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Punct(&'static str),
    Op(String),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(name) => write!(f, "`{name}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Str(_) => f.write_str("string literal"),
            Tok::Punct(p) => write!(f, "`{p}`"),
            Tok::Op(op) => write!(f, "`{op}`"),
            Tok::Eof => f.write_str("end of file"),
        }
    }
}

struct Lexed {
    tok: Tok,
    line: usize,
    column: usize,
}

struct Lexer<'s> {
    chars: std::iter::Peekable<std::str::Chars<'s>>,
    file: String,
    line: usize,
    column: usize,
}

impl Lexer<'_> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> char {
        let c = self.chars.next().expect("peeked before bump");
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        c
    }

    fn err(&self, line: usize, column: usize, message: String) -> SyntaxError {
        SyntaxError {
            file: self.file.clone(),
            line,
            column,
            message,
        }
    }
}

fn lex(source: &str, file: &str) -> Result<Vec<Lexed>, SyntaxError> {
    let mut toks = Vec::new();
    let mut lx = Lexer {
        chars: source.chars().peekable(),
        file: file.to_owned(),
        line: 1,
        column: 1,
    };

    while let Some(c) = lx.peek() {
        let (tok_line, tok_column) = (lx.line, lx.column);
        let mut push = |tok: Tok| {
            toks.push(Lexed {
                tok,
                line: tok_line,
                column: tok_column,
            })
        };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                lx.bump();
            }
            '/' => {
                lx.bump();
                match lx.peek() {
                    Some('/') => {
                        while lx.peek().is_some_and(|c| c != '\n') {
                            lx.bump();
                        }
                    }
                    _ => push(Tok::Op("/".to_owned())),
                }
            }
            '0'..='9' => {
                let mut digits = String::new();
                while lx.peek().is_some_and(|c| c.is_ascii_digit()) {
                    digits.push(lx.bump());
                }
                let value: i64 = digits.parse().map_err(|_| {
                    lx.err(tok_line, tok_column, format!("integer literal `{digits}` out of range"))
                })?;
                push(Tok::Int(value));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let mut name = String::new();
                while lx.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                    name.push(lx.bump());
                }
                push(Tok::Ident(name));
            }
            '"' => {
                lx.bump();
                let mut text = String::new();
                loop {
                    match lx.peek() {
                        None => {
                            return Err(lx.err(tok_line, tok_column, "unterminated string".to_owned()))
                        }
                        Some('"') => {
                            lx.bump();
                            break;
                        }
                        Some('\\') => {
                            lx.bump();
                            let (esc_line, esc_column) = (lx.line, lx.column);
                            match lx.peek() {
                                Some('"') => text.push('"'),
                                Some('\\') => text.push('\\'),
                                Some('n') => text.push('\n'),
                                Some('t') => text.push('\t'),
                                other => {
                                    return Err(lx.err(
                                        esc_line,
                                        esc_column,
                                        format!(
                                            "unknown escape `\\{}`",
                                            other.map(String::from).unwrap_or_default()
                                        ),
                                    ))
                                }
                            }
                            lx.bump();
                        }
                        Some(_) => {
                            let c = lx.bump();
                            text.push(c);
                        }
                    }
                }
                push(Tok::Str(text));
            }
            '(' | ')' | '{' | '}' | ',' | ';' | '.' => {
                lx.bump();
                let punct = match c {
                    '(' => "(",
                    ')' => ")",
                    '{' => "{",
                    '}' => "}",
                    ',' => ",",
                    ';' => ";",
                    _ => ".",
                };
                push(Tok::Punct(punct));
            }
            '=' | '!' | '<' | '>' | '+' | '-' | '*' | '%' | '&' | '|' => {
                lx.bump();
                let two = matches!(
                    (c, lx.peek()),
                    ('=', Some('=')) | ('!', Some('=')) | ('<', Some('=')) | ('>', Some('='))
                        | ('&', Some('&'))
                        | ('|', Some('|'))
                );
                let op = if two {
                    let second = lx.bump();
                    format!("{c}{second}")
                } else {
                    c.to_string()
                };
                if op == "&" || op == "|" || op == "!" {
                    return Err(lx.err(tok_line, tok_column, format!("unknown operator `{op}`")));
                }
                push(Tok::Op(op));
            }
            other => {
                return Err(lx.err(tok_line, tok_column, format!("unexpected character `{other}`")));
            }
        }
    }
    toks.push(Lexed {
        tok: Tok::Eof,
        line: lx.line,
        column: lx.column,
    });
    Ok(toks)
}

struct Parser {
    file: String,
    toks: Vec<Lexed>,
    at: usize,
}

/// Parse one source file. `file_path` names the file in errors and becomes
/// the [`SourceFile::path`] used for global keys.
pub fn parse_minilang(source: &str, file_path: &str) -> Result<SourceFile, SyntaxError> {
    let toks = lex(source, file_path)?;
    let mut parser = Parser {
        file: file_path.to_owned(),
        toks,
        at: 0,
    };
    let mut functions = Vec::new();
    while parser.peek() != &Tok::Eof {
        functions.push(parser.function()?);
    }
    Ok(SourceFile {
        path: file_path.to_owned(),
        functions,
    })
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].tok
    }

    fn line(&self) -> usize {
        self.toks[self.at].line
    }

    fn advance(&mut self) -> Tok {
        let tok = self.toks[self.at].tok.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        tok
    }

    fn err(&self, message: String) -> SyntaxError {
        let here = &self.toks[self.at];
        SyntaxError {
            file: self.file.clone(),
            line: here.line,
            column: here.column,
            message,
        }
    }

    fn expect_punct(&mut self, punct: &str) -> Result<(), SyntaxError> {
        match self.peek() {
            Tok::Punct(p) if *p == punct => {
                self.advance();
                Ok(())
            }
            _ => Err(self.err(format!("expected `{punct}`, found {}", self.peek()))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.advance();
                Ok(name)
            }
            other => Err(self.err(format!("expected {what}, found {other}"))),
        }
    }

    fn function(&mut self) -> Result<Function, SyntaxError> {
        let line = self.line();
        match self.peek() {
            Tok::Ident(kw) if kw == "fn" => {
                self.advance();
            }
            other => return Err(self.err(format!("expected `fn`, found {other}"))),
        }
        let name = self.ident("function name")?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if self.peek() != &Tok::Punct(")") {
            loop {
                params.push(self.ident("parameter name")?);
                if self.peek() == &Tok::Punct(",") {
                    self.advance();
                } else {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        let body = self.block()?;
        Ok(Function {
            name,
            params,
            body,
            line,
        })
    }

    fn block(&mut self) -> Result<Vec<Stmt>, SyntaxError> {
        self.expect_punct("{")?;
        let mut stmts = Vec::new();
        while self.peek() != &Tok::Punct("}") {
            if self.peek() == &Tok::Eof {
                return Err(self.err("expected `}`, found end of file".to_owned()));
            }
            stmts.push(self.stmt()?);
        }
        self.advance();
        Ok(stmts)
    }

    fn stmt(&mut self) -> Result<Stmt, SyntaxError> {
        let line = self.line();
        match self.peek().clone() {
            Tok::Ident(kw) if kw == "let" => {
                self.advance();
                let name = self.ident("variable name")?;
                match self.peek() {
                    Tok::Op(op) if op == "=" => {
                        self.advance();
                    }
                    other => return Err(self.err(format!("expected `=`, found {other}"))),
                }
                let value = self.expr()?;
                self.expect_punct(";")?;
                Ok(Stmt::Assign { name, value, line })
            }
            Tok::Ident(kw) if kw == "while" => {
                self.advance();
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let body = self.block()?;
                Ok(Stmt::While { cond, body, line })
            }
            Tok::Ident(kw) if kw == "if" => {
                self.advance();
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let then_body = self.block()?;
                let else_body = match self.peek() {
                    Tok::Ident(kw) if kw == "else" => {
                        self.advance();
                        self.block()?
                    }
                    _ => Vec::new(),
                };
                Ok(Stmt::If { cond, then_body, else_body, line })
            }
            Tok::Ident(kw) if kw == "return" => {
                self.advance();
                let value = if self.peek() == &Tok::Punct(";") {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.expect_punct(";")?;
                Ok(Stmt::Return { value, line })
            }
            Tok::Ident(name) => {
                // Distinguish `x = e;`, `o.f = e;`, and an expression
                // statement by looking past the name.
                if self.peek2() == &Tok::Op("=".to_owned()) {
                    self.advance();
                    self.advance();
                    let value = self.expr()?;
                    self.expect_punct(";")?;
                    return Ok(Stmt::Assign { name, value, line });
                }
                if self.peek2() == &Tok::Punct(".") {
                    let object = name;
                    self.advance();
                    self.advance();
                    let field = self.ident("field name")?;
                    if self.peek() == &Tok::Op("=".to_owned()) {
                        self.advance();
                        let value = self.expr()?;
                        self.expect_punct(";")?;
                        return Ok(Stmt::FieldWrite { object, field, value, line });
                    }
                    // A field read in expression position: continue parsing
                    // the expression around it.
                    let lead = Expr::FieldRead { object, field };
                    let value = self.binop_chain(lead, 1)?;
                    self.expect_punct(";")?;
                    return Ok(Stmt::Expr { value, line });
                }
                let value = self.expr()?;
                self.expect_punct(";")?;
                Ok(Stmt::Expr { value, line })
            }
            other => Err(self.err(format!("expected a statement, found {other}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        self.expr_at(1)
    }

    fn expr_at(&mut self, min_precedence: u8) -> Result<Expr, SyntaxError> {
        let lead = self.primary()?;
        self.binop_chain(lead, min_precedence)
    }

    fn binop_chain(&mut self, mut lhs: Expr, min_precedence: u8) -> Result<Expr, SyntaxError> {
        loop {
            let op = match self.peek() {
                Tok::Op(op) if precedence(op) >= min_precedence => op.clone(),
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.expr_at(precedence(&op) + 1)?;
            lhs = Expr::Binop {
                op,
                left: Box::new(lhs),
                right: Box::new(rhs),
            };
        }
    }

    fn primary(&mut self) -> Result<Expr, SyntaxError> {
        match self.peek().clone() {
            Tok::Int(n) => {
                self.advance();
                Ok(Expr::Int(n))
            }
            Tok::Op(op) if op == "-" => {
                self.advance();
                match self.peek().clone() {
                    Tok::Int(n) => {
                        self.advance();
                        Ok(Expr::Int(-n))
                    }
                    other => Err(self.err(format!("expected integer after `-`, found {other}"))),
                }
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Expr::Str(s))
            }
            Tok::Punct("(") => {
                self.advance();
                let inner = self.expr()?;
                self.expect_punct(")")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.advance();
                match self.peek() {
                    Tok::Punct("(") => {
                        self.advance();
                        let mut args = Vec::new();
                        if self.peek() != &Tok::Punct(")") {
                            loop {
                                args.push(self.expr()?);
                                if self.peek() == &Tok::Punct(",") {
                                    self.advance();
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect_punct(")")?;
                        Ok(Expr::Call { callee: name, args })
                    }
                    Tok::Punct(".") => {
                        self.advance();
                        let field = self.ident("field name")?;
                        Ok(Expr::FieldRead { object: name, field })
                    }
                    _ => Ok(Expr::Var(name)),
                }
            }
            other => Err(self.err(format!("expected an expression, found {other}"))),
        }
    }
}
