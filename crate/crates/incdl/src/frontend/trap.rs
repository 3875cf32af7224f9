//! The trap interchange format: a line-oriented text file that an extractor
//! emits per source file and the importer turns into database tuples.
//!
//! Each line is one directive:
//!
//! ```text
//! #func = @"src/main.ml#r_1"      // bind a label to a global key
//! #tmp = *                        // bind a label to a fresh local id
//! func_def(#func, 'main')        // insert a tuple
//! bump_id_counter                 // advance the id counter to a fresh range
//! ```
//!
//! Tuple arguments are labels (`#name`), integers, or single-quoted strings
//! with `\'`, `\\`, `\n`, `\t` escapes. Rendering and parsing round-trip
//! byte for byte, which keeps extractor output diffable and lets goldens be
//! checked exactly.

use std::fmt;

/// What a label is bound to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrapKey {
    /// A global key: the same key in any trap file maps to the same id.
    Global(String),
    /// A fresh id private to this trap file (written `*`).
    Local,
}

/// One argument of a tuple directive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrapArg {
    /// A reference to a label defined earlier in the same file.
    Label(String),
    Int(i64),
    Str(String),
}

/// One line of a trap file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrapDirective {
    LabelDef { label: String, key: TrapKey },
    TupleInsert { relation: String, args: Vec<TrapArg> },
    /// Advance the importer's id counter to the next fresh range, so ids
    /// minted for later files do not depend on how many this file used.
    BumpIdCounter,
}

/// A parsed or freshly extracted trap file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrapFile {
    pub directives: Vec<TrapDirective>,
}

/// A malformed trap line, reported with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("trap line {line}: {message}")]
pub struct TrapParseError {
    pub line: usize,
    pub message: String,
}

fn escape_str(text: &str, quote: char, out: &mut String) {
    out.push(quote);
    for c in text.chars() {
        if c == quote || c == '\\' {
            out.push('\\');
            out.push(c);
        } else if c == '\n' {
            out.push_str("\\n");
        } else if c == '\t' {
            out.push_str("\\t");
        } else {
            out.push(c);
        }
    }
    out.push(quote);
}

impl fmt::Display for TrapArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapArg::Label(label) => write!(f, "#{label}"),
            TrapArg::Int(n) => write!(f, "{n}"),
            TrapArg::Str(s) => {
                let mut text = String::new();
                escape_str(s, '\'', &mut text);
                f.write_str(&text)
            }
        }
    }
}

impl fmt::Display for TrapDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapDirective::LabelDef { label, key: TrapKey::Global(key) } => {
                let mut text = String::new();
                escape_str(key, '"', &mut text);
                write!(f, "#{label} = @{text}")
            }
            TrapDirective::LabelDef { label, key: TrapKey::Local } => {
                write!(f, "#{label} = *")
            }
            TrapDirective::TupleInsert { relation, args } => {
                write!(f, "{relation}(")?;
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{arg}")?;
                }
                f.write_str(")")
            }
            TrapDirective::BumpIdCounter => f.write_str("bump_id_counter"),
        }
    }
}

impl TrapFile {
    /// Serialize to the canonical text form: one directive per line,
    /// trailing newline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for directive in &self.directives {
            out.push_str(&directive.to_string());
            out.push('\n');
        }
        out
    }

    /// Parse the canonical text form. Blank lines are allowed and skipped.
    pub fn parse(text: &str) -> Result<TrapFile, TrapParseError> {
        let mut directives = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            directives.push(parse_directive(trimmed, line)?);
        }
        Ok(TrapFile { directives })
    }
}

fn parse_directive(text: &str, line: usize) -> Result<TrapDirective, TrapParseError> {
    let err = |message: String| TrapParseError { line, message };
    if text == "bump_id_counter" {
        return Ok(TrapDirective::BumpIdCounter);
    }
    if let Some(rest) = text.strip_prefix('#') {
        // Label definition: `#label = @"key"` or `#label = *`.
        let (label, rest) = split_ident(rest)
            .ok_or_else(|| err("expected a label name after `#`".to_owned()))?;
        let rest = rest
            .strip_prefix(" = ")
            .ok_or_else(|| err(format!("expected ` = ` after `#{label}`")))?;
        if rest == "*" {
            return Ok(TrapDirective::LabelDef {
                label: label.to_owned(),
                key: TrapKey::Local,
            });
        }
        let rest = rest
            .strip_prefix("@\"")
            .ok_or_else(|| err("expected `*` or `@\"...\"` after `=`".to_owned()))?;
        let (key, rest) = take_quoted(rest, '"')
            .ok_or_else(|| err("unterminated global key".to_owned()))?;
        if !rest.is_empty() {
            return Err(err(format!("unexpected trailing `{rest}`")));
        }
        return Ok(TrapDirective::LabelDef {
            label: label.to_owned(),
            key: TrapKey::Global(key),
        });
    }
    // Tuple insert: `relation(arg, ...)`.
    let (relation, rest) = split_ident(text)
        .ok_or_else(|| err("expected a directive".to_owned()))?;
    let rest = rest
        .strip_prefix('(')
        .ok_or_else(|| err(format!("expected `(` after `{relation}`")))?;
    let body = rest
        .strip_suffix(')')
        .ok_or_else(|| err("expected closing `)`".to_owned()))?;
    let mut args = Vec::new();
    let mut remaining = body;
    if !remaining.is_empty() {
        loop {
            let (arg, rest) = parse_arg(remaining).map_err(&err)?;
            args.push(arg);
            if rest.is_empty() {
                break;
            }
            remaining = rest
                .strip_prefix(", ")
                .ok_or_else(|| err(format!("expected `, ` before `{rest}`")))?;
        }
    }
    Ok(TrapDirective::TupleInsert {
        relation: relation.to_owned(),
        args,
    })
}

fn parse_arg(text: &str) -> Result<(TrapArg, &str), String> {
    if let Some(rest) = text.strip_prefix('#') {
        let (label, rest) =
            split_ident(rest).ok_or_else(|| "expected a label name after `#`".to_owned())?;
        return Ok((TrapArg::Label(label.to_owned()), rest));
    }
    if let Some(rest) = text.strip_prefix('\'') {
        let (value, rest) =
            take_quoted(rest, '\'').ok_or_else(|| "unterminated string".to_owned())?;
        return Ok((TrapArg::Str(value), rest));
    }
    let digits_end = text
        .char_indices()
        .find(|(i, c)| !(c.is_ascii_digit() || (*i == 0 && *c == '-')))
        .map_or(text.len(), |(i, _)| i);
    if digits_end == 0 {
        return Err(format!("expected an argument at `{text}`"));
    }
    let value: i64 = text[..digits_end]
        .parse()
        .map_err(|_| format!("malformed integer `{}`", &text[..digits_end]))?;
    Ok((TrapArg::Int(value), &text[digits_end..]))
}

/// Read characters up to an unescaped closing quote, decoding escapes.
/// Returns the decoded text and the remainder after the quote.
fn take_quoted(text: &str, quote: char) -> Option<(String, &str)> {
    let mut value = String::new();
    let mut chars = text.char_indices();
    while let Some((i, c)) = chars.next() {
        if c == quote {
            return Some((value, &text[i + c.len_utf8()..]));
        }
        if c == '\\' {
            let (_, escaped) = chars.next()?;
            match escaped {
                'n' => value.push('\n'),
                't' => value.push('\t'),
                other => value.push(other),
            }
        } else {
            value.push(c);
        }
    }
    None
}

fn split_ident(text: &str) -> Option<(&str, &str)> {
    let end = text
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
        .map_or(text.len(), |(i, _)| i);
    if end == 0 {
        None
    } else {
        Some((&text[..end], &text[end..]))
    }
}
