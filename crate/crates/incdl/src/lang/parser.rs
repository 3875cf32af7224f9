//! Hand-rolled lexer and recursive-descent parser for the dialect.
//!
//! The grammar is documented in the guide (`book/src/language.md`). Errors
//! carry line/column and the set of tokens that would have been accepted.

use std::fmt;

use super::ast::{AggFunc, Atom, CmpOp, Literal, Program, RelationDecl, Rule, Term};
use super::validate;
use crate::value::ColumnType;

/// Parse failure: either a syntax error with position and expectations, or a
/// well-formedness violation detected after parsing.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("{line}:{col}: {message} (expected {})", expected.join(", "))]
    Syntax { line: u32, col: u32, message: String, expected: Vec<String> },
    #[error("rule {rule}: {message}")]
    Validation { rule: usize, message: String },
    #[error("{message}")]
    Program { message: String },
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Dot,
    Semi,
    ColonDash,
    Eq,
    Ne,
    Lt,
    Le,
    At,
    Underscore,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Int(n) => write!(f, "integer `{n}`"),
            Tok::Str(_) => f.write_str("string literal"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Dot => f.write_str("`.`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::ColonDash => f.write_str("`:-`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Ne => f.write_str("`!=`"),
            Tok::Lt => f.write_str("`<`"),
            Tok::Le => f.write_str("`<=`"),
            Tok::At => f.write_str("`@`"),
            Tok::Underscore => f.write_str("`_`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Lexer<'a> {
        Lexer { src, bytes: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.src[self.pos..].chars().next()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: self.line,
            col: self.col,
            message: message.into(),
            expected: vec![],
        }
    }

    fn next_token(&mut self) -> Result<(Tok, u32, u32), ParseError> {
        loop {
            // Skip whitespace and `//` comments.
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'/') if self.bytes.get(self.pos + 1) == Some(&b'/') => {
                    while let Some(b) = self.peek() {
                        if b == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
        let (line, col) = (self.line, self.col);
        let tok = match self.peek() {
            None => Tok::Eof,
            Some(b'(') => {
                self.bump();
                Tok::LParen
            }
            Some(b')') => {
                self.bump();
                Tok::RParen
            }
            Some(b'{') => {
                self.bump();
                Tok::LBrace
            }
            Some(b'}') => {
                self.bump();
                Tok::RBrace
            }
            Some(b',') => {
                self.bump();
                Tok::Comma
            }
            Some(b'.') => {
                self.bump();
                Tok::Dot
            }
            Some(b';') => {
                self.bump();
                Tok::Semi
            }
            Some(b'@') => {
                self.bump();
                Tok::At
            }
            Some(b'=') => {
                self.bump();
                Tok::Eq
            }
            Some(b'!') => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    Tok::Ne
                } else {
                    return Err(self.error("stray `!`; did you mean `!=`?"));
                }
            }
            Some(b'<') => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    Tok::Le
                } else {
                    Tok::Lt
                }
            }
            Some(b':') => {
                self.bump();
                if self.peek() == Some(b'-') {
                    self.bump();
                    Tok::ColonDash
                } else {
                    return Err(self.error("stray `:`; did you mean `:-`?"));
                }
            }
            Some(b'"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        None => return Err(self.error("unterminated string literal")),
                        Some('"') => break,
                        Some('\\') => match self.bump() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            other => {
                                return Err(self.error(format!(
                                    "unknown escape `\\{}`",
                                    other.map(String::from).unwrap_or_default()
                                )))
                            }
                        },
                        Some(c) => s.push(c),
                    }
                }
                Tok::Str(s)
            }
            Some(b) if b == b'-' || b.is_ascii_digit() => {
                let start = self.pos;
                if b == b'-' {
                    self.bump();
                    if !self.peek().is_some_and(|d| d.is_ascii_digit()) {
                        return Err(self.error("`-` must start an integer literal"));
                    }
                }
                while self.peek().is_some_and(|d| d.is_ascii_digit()) {
                    self.bump();
                }
                let text = &self.src[start..self.pos];
                let n = text
                    .parse::<i64>()
                    .map_err(|_| self.error(format!("integer `{text}` out of range")))?;
                Tok::Int(n)
            }
            Some(b) if b == b'_' || b.is_ascii_alphabetic() => {
                let start = self.pos;
                while self
                    .peek()
                    .is_some_and(|c| c == b'_' || c.is_ascii_alphanumeric())
                {
                    self.bump();
                }
                let text = &self.src[start..self.pos];
                if text == "_" {
                    Tok::Underscore
                } else {
                    Tok::Ident(text.to_owned())
                }
            }
            Some(b) => return Err(self.error(format!("unexpected character `{}`", b as char))),
        };
        Ok((tok, line, col))
    }
}

struct Parser {
    toks: Vec<(Tok, u32, u32)>,
    at: usize,
    /// Counter for throwaway variables minted from `_` in positive atoms;
    /// reset per rule so re-parsing printed output reproduces names.
    wildcards: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> (u32, u32) {
        let (_, l, c) = self.toks[self.at];
        (l, c)
    }

    fn advance(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err(&self, message: impl Into<String>, expected: &[&str]) -> ParseError {
        let (line, col) = self.pos();
        ParseError::Syntax {
            line,
            col,
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expect(&mut self, tok: &Tok, expected: &str) -> Result<(), ParseError> {
        if self.peek() == tok {
            self.advance();
            Ok(())
        } else {
            Err(self.err(format!("found {}", self.peek()), &[expected]))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Tok::Ident(_) => match self.advance() {
                Tok::Ident(s) => Ok(s),
                _ => unreachable!(),
            },
            other => Err(self.err(format!("found {other}"), &[what])),
        }
    }

    /// Either a relation declaration (`name(type, ...).`) or a rule.
    /// Distinguished by what follows the closing paren of the head atom and
    /// by whether the arguments are type keywords.
    fn item(&mut self, decls: &mut Vec<RelationDecl>, rules: &mut Vec<Rule>) -> Result<(), ParseError> {
        self.wildcards = 0;
        let name = self.ident("relation or rule head")?;
        self.expect(&Tok::LParen, "`(`")?;
        // Empty argument lists are not part of the dialect: relations have
        // arity >= 1.
        let mut args = Vec::new();
        loop {
            args.push(self.term(true)?);
            if self.peek() == &Tok::Comma {
                self.advance();
            } else {
                break;
            }
        }
        self.expect(&Tok::RParen, "`)`")?;
        match self.peek() {
            Tok::Dot => {
                self.advance();
                // Declaration: every argument must be a type keyword.
                let mut columns = Vec::new();
                for a in &args {
                    let ty = match a {
                        Term::Var(v) if v == "id" => ColumnType::Id,
                        Term::Var(v) if v == "int" => ColumnType::Int,
                        Term::Var(v) if v == "string" => ColumnType::Str,
                        other => {
                            return Err(ParseError::Program {
                                message: format!(
                                    "declaration of `{name}` must list column types \
                                     (`id`, `int`, `string`), found `{other}`"
                                ),
                            })
                        }
                    };
                    columns.push(ty);
                }
                decls.push(RelationDecl { name, columns });
                Ok(())
            }
            Tok::ColonDash => {
                self.advance();
                let mut body = Vec::new();
                loop {
                    body.push(self.literal()?);
                    if self.peek() == &Tok::Comma {
                        self.advance();
                    } else {
                        break;
                    }
                }
                self.expect(&Tok::Dot, "`.`")?;
                rules.push(Rule { head: Atom { predicate: name, args }, body });
                Ok(())
            }
            other => Err(self.err(format!("found {other}"), &["`.`", "`:-`"])),
        }
    }

    /// `allow_wildcard_named` controls whether `_` is minted into a fresh
    /// variable (positive/head positions) or kept as a wildcard (negated and
    /// aggregate atoms).
    fn term(&mut self, mint_wildcards: bool) -> Result<Term, ParseError> {
        match self.peek().clone() {
            Tok::Ident(_) => {
                let v = self.ident("term")?;
                Ok(Term::Var(v))
            }
            Tok::Int(n) => {
                self.advance();
                Ok(Term::Int(n))
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Term::Str(s))
            }
            Tok::Underscore => {
                self.advance();
                if mint_wildcards {
                    let v = format!("${}", self.wildcards);
                    self.wildcards += 1;
                    Ok(Term::Var(v))
                } else {
                    Ok(Term::Wildcard)
                }
            }
            other => Err(self.err(format!("found {other}"), &["variable", "constant", "`_`"])),
        }
    }

    fn atom(&mut self, mint_wildcards: bool) -> Result<Atom, ParseError> {
        let predicate = self.ident("predicate")?;
        self.expect(&Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        loop {
            args.push(self.term(mint_wildcards)?);
            if self.peek() == &Tok::Comma {
                self.advance();
            } else {
                break;
            }
        }
        self.expect(&Tok::RParen, "`)`")?;
        Ok(Atom { predicate, args })
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        match self.peek().clone() {
            Tok::Ident(name) if name == "not" => {
                self.advance();
                Ok(Literal::Neg(self.atom(false)?))
            }
            Tok::At => {
                self.advance();
                let name = self.ident("built-in name")?;
                self.expect(&Tok::LParen, "`(`")?;
                let mut inputs = vec![self.ident("input relation")?];
                while self.peek() == &Tok::Comma {
                    self.advance();
                    inputs.push(self.ident("input relation")?);
                }
                self.expect(&Tok::Semi, "`;`")?;
                let mut outputs = vec![self.term(true)?];
                while self.peek() == &Tok::Comma {
                    self.advance();
                    outputs.push(self.term(true)?);
                }
                self.expect(&Tok::RParen, "`)`")?;
                Ok(Literal::Builtin { name, inputs, outputs })
            }
            Tok::Ident(_) => {
                // Could be `pred(...)`, `v = ...`, or `v < w` etc.
                let save = self.at;
                let first = self.ident("identifier")?;
                match self.peek().clone() {
                    Tok::LParen => {
                        self.at = save;
                        Ok(Literal::Pos(self.atom(true)?))
                    }
                    Tok::Eq => {
                        self.advance();
                        self.binding_or_eq(first)
                    }
                    Tok::Ne | Tok::Lt | Tok::Le => {
                        let op = match self.advance() {
                            Tok::Ne => CmpOp::Ne,
                            Tok::Lt => CmpOp::Lt,
                            Tok::Le => CmpOp::Le,
                            _ => unreachable!(),
                        };
                        let rhs = self.term(false)?;
                        Ok(Literal::Cmp { op, lhs: Term::Var(first), rhs })
                    }
                    other => Err(self.err(
                        format!("found {other}"),
                        &["`(`", "`=`", "`!=`", "`<`", "`<=`"],
                    )),
                }
            }
            Tok::Int(_) | Tok::Str(_) => {
                // Comparison with a constant on the left.
                let lhs = self.term(false)?;
                let op = match self.advance() {
                    Tok::Eq => CmpOp::Eq,
                    Tok::Ne => CmpOp::Ne,
                    Tok::Lt => CmpOp::Lt,
                    Tok::Le => CmpOp::Le,
                    other => {
                        return Err(self.err(
                            format!("found {other}"),
                            &["`=`", "`!=`", "`<`", "`<=`"],
                        ))
                    }
                };
                let rhs = self.term(false)?;
                Ok(Literal::Cmp { op, lhs, rhs })
            }
            other => Err(self.err(
                format!("found {other}"),
                &["atom", "`not`", "`@`", "comparison", "binding"],
            )),
        }
    }

    /// After `v =`: an aggregate binding, a fresh-id binding, or an equality
    /// comparison, distinguished by lookahead.
    fn binding_or_eq(&mut self, result: String) -> Result<Literal, ParseError> {
        let func = match self.peek() {
            Tok::Ident(k) if k == "count" => Some(AggFunc::Count),
            Tok::Ident(k) if k == "sum" => Some(AggFunc::Sum),
            Tok::Ident(k) if k == "min" => Some(AggFunc::Min),
            Tok::Ident(k) if k == "max" => Some(AggFunc::Max),
            Tok::Ident(k) if k == "concat" => Some(AggFunc::Concat),
            _ => None,
        };
        if let Some(func) = func {
            // Guard against a predicate that happens to share an aggregate
            // keyword name: `n = count(x)` is equality with... not valid, so
            // keywords here are effectively reserved in binding position.
            self.advance();
            let value = match func {
                AggFunc::Count => None,
                _ => Some(self.ident("aggregated variable")?),
            };
            let order = if matches!(func, AggFunc::Concat) {
                match self.peek() {
                    Tok::Ident(k) if k == "order" => {
                        self.advance();
                        Some(self.ident("order variable")?)
                    }
                    _ => {
                        return Err(self.err(
                            "concat requires an ordering key".to_string(),
                            &["`order`"],
                        ))
                    }
                }
            } else {
                None
            };
            self.expect(&Tok::LBrace, "`{`")?;
            let atom = self.atom(false)?;
            self.expect(&Tok::RBrace, "`}`")?;
            return Ok(Literal::Agg { result, func, value, order, atom });
        }
        if matches!(self.peek(), Tok::Ident(k) if k == "new") {
            self.advance();
            let ctor = self.ident("constructor name")?;
            self.expect(&Tok::LParen, "`(`")?;
            let mut args = Vec::new();
            if self.peek() != &Tok::RParen {
                args.push(self.ident("argument variable")?);
                while self.peek() == &Tok::Comma {
                    self.advance();
                    args.push(self.ident("argument variable")?);
                }
            }
            self.expect(&Tok::RParen, "`)`")?;
            return Ok(Literal::Fresh { result, ctor, args });
        }
        let rhs = self.term(false)?;
        Ok(Literal::Cmp { op: CmpOp::Eq, lhs: Term::Var(result), rhs })
    }
}

/// Parses and validates a program. The returned [`Program`] satisfies every
/// well-formedness rule of the dialect (see `lang::validate`) and carries
/// inferred column types for all predicates.
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    let mut lexer = Lexer::new(source);
    let mut toks = Vec::new();
    loop {
        let t = lexer.next_token()?;
        let eof = t.0 == Tok::Eof;
        toks.push(t);
        if eof {
            break;
        }
    }
    let mut parser = Parser { toks, at: 0, wildcards: 0 };
    let mut decls = Vec::new();
    let mut rules = Vec::new();
    while parser.peek() != &Tok::Eof {
        parser.item(&mut decls, &mut rules)?;
    }
    Program::new(decls, rules)
}

impl Program {
    /// Validates declarations and rules, inferring predicate column types.
    /// This is the only way to construct a `Program`; the parser goes
    /// through it too.
    pub fn new(decls: Vec<RelationDecl>, rules: Vec<Rule>) -> Result<Program, ParseError> {
        let types = validate::validate(&decls, &rules)?;
        Ok(Program { decls, rules, types })
    }
}
