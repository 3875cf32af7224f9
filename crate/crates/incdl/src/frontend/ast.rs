//! Abstract syntax of the analyzed source language.
//!
//! The language is a small imperative one — functions, assignments, field
//! accesses, loops, branches, calls — just enough surface for an
//! inter-procedural, field-aware data-flow analysis to say something
//! interesting about it. Every tree is renderable back to source text with
//! [`SourceFile::render`], and parsing the rendered text reproduces the
//! tree exactly, which the change-synthesis tooling relies on.

use std::fmt;

/// One parsed source file: the root of the AST.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceFile {
    /// Path the file was parsed from; the prefix of every global key.
    pub path: String,
    pub functions: Vec<Function>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
    /// 1-based line of the `fn` keyword.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    /// `let x = e;` and `x = e;` — both bind a variable to an expression.
    Assign { name: String, value: Expr, line: usize },
    /// `o.f = e;`
    FieldWrite { object: String, field: String, value: Expr, line: usize },
    /// `while (c) { ... }`
    While { cond: Expr, body: Vec<Stmt>, line: usize },
    /// `if (c) { ... }` with an optional `else { ... }`.
    If { cond: Expr, then_body: Vec<Stmt>, else_body: Vec<Stmt>, line: usize },
    /// `return e;` / `return;`
    Return { value: Option<Expr>, line: usize },
    /// An expression evaluated for effect: `f(x);`
    Expr { value: Expr, line: usize },
}

impl Stmt {
    pub fn line(&self) -> usize {
        match self {
            Stmt::Assign { line, .. }
            | Stmt::FieldWrite { line, .. }
            | Stmt::While { line, .. }
            | Stmt::If { line, .. }
            | Stmt::Return { line, .. }
            | Stmt::Expr { line, .. } => *line,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Str(String),
    /// A variable read: `x`
    Var(String),
    /// `o.f`
    FieldRead { object: String, field: String },
    /// `f(a, b)`
    Call { callee: String, args: Vec<Expr> },
    /// `a + b`, `a < b`, ... — `op` is the operator lexeme.
    Binop { op: String, left: Box<Expr>, right: Box<Expr> },
}

/// Binding strength of an operator; higher binds tighter. The renderer
/// parenthesizes a child exactly when it binds no tighter than its parent
/// requires, so rendered text reparses to the identical tree.
pub(crate) fn precedence(op: &str) -> u8 {
    match op {
        "||" | "&&" => 1,
        "==" | "!=" | "<" | ">" | "<=" | ">=" => 2,
        "+" | "-" => 3,
        "*" | "/" | "%" => 4,
        _ => 0,
    }
}

impl SourceFile {
    /// Deterministic source text for this tree. Parsing the result yields
    /// an equal tree (with lines renumbered to the rendered layout).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (index, function) in self.functions.iter().enumerate() {
            if index > 0 {
                out.push('\n');
            }
            render_function(function, &mut out);
        }
        out
    }
}

fn render_function(function: &Function, out: &mut String) {
    out.push_str("fn ");
    out.push_str(&function.name);
    out.push('(');
    for (index, param) in function.params.iter().enumerate() {
        if index > 0 {
            out.push_str(", ");
        }
        out.push_str(param);
    }
    out.push_str(") {\n");
    for stmt in &function.body {
        render_stmt(stmt, 1, out);
    }
    out.push_str("}\n");
}

fn indent(depth: usize, out: &mut String) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn render_stmt(stmt: &Stmt, depth: usize, out: &mut String) {
    indent(depth, out);
    match stmt {
        Stmt::Assign { name, value, .. } => {
            out.push_str("let ");
            out.push_str(name);
            out.push_str(" = ");
            render_expr(value, 0, out);
            out.push_str(";\n");
        }
        Stmt::FieldWrite { object, field, value, .. } => {
            out.push_str(object);
            out.push('.');
            out.push_str(field);
            out.push_str(" = ");
            render_expr(value, 0, out);
            out.push_str(";\n");
        }
        Stmt::While { cond, body, .. } => {
            out.push_str("while (");
            render_expr(cond, 0, out);
            out.push_str(") {\n");
            for inner in body {
                render_stmt(inner, depth + 1, out);
            }
            indent(depth, out);
            out.push_str("}\n");
        }
        Stmt::If { cond, then_body, else_body, .. } => {
            out.push_str("if (");
            render_expr(cond, 0, out);
            out.push_str(") {\n");
            for inner in then_body {
                render_stmt(inner, depth + 1, out);
            }
            indent(depth, out);
            if else_body.is_empty() {
                out.push_str("}\n");
            } else {
                out.push_str("} else {\n");
                for inner in else_body {
                    render_stmt(inner, depth + 1, out);
                }
                indent(depth, out);
                out.push_str("}\n");
            }
        }
        Stmt::Return { value, .. } => {
            out.push_str("return");
            if let Some(expr) = value {
                out.push(' ');
                render_expr(expr, 0, out);
            }
            out.push_str(";\n");
        }
        Stmt::Expr { value, .. } => {
            render_expr(value, 0, out);
            out.push_str(";\n");
        }
    }
}

fn render_expr(expr: &Expr, min_precedence: u8, out: &mut String) {
    match expr {
        Expr::Int(n) => out.push_str(&n.to_string()),
        Expr::Str(s) => {
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    other => out.push(other),
                }
            }
            out.push('"');
        }
        Expr::Var(name) => out.push_str(name),
        Expr::FieldRead { object, field } => {
            out.push_str(object);
            out.push('.');
            out.push_str(field);
        }
        Expr::Call { callee, args } => {
            out.push_str(callee);
            out.push('(');
            for (index, arg) in args.iter().enumerate() {
                if index > 0 {
                    out.push_str(", ");
                }
                render_expr(arg, 0, out);
            }
            out.push(')');
        }
        Expr::Binop { op, left, right } => {
            let level = precedence(op);
            let parenthesize = level < min_precedence;
            if parenthesize {
                out.push('(');
            }
            // Left-associative: the left child may sit at the same level,
            // the right child must bind strictly tighter.
            render_expr(left, level, out);
            out.push(' ');
            out.push_str(op);
            out.push(' ');
            render_expr(right, level + 1, out);
            if parenthesize {
                out.push(')');
            }
        }
    }
}

impl fmt::Display for SourceFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
