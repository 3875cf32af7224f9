//! Extraction: walk a parsed source file and emit its trap directives.
//!
//! Every syntax node gets a label whose global key is the file path plus the
//! node's tree path (`src/a.ml#r_2_1` is the first child of the second child
//! of the root). Keys derived from tree paths — rather than from a visit
//! counter — mean an unchanged file always re-extracts to the identical trap
//! file, and an unchanged prefix of a file keeps its keys even when later
//! siblings change.
//!
//! Directive order per node: the label definition first, then the node's
//! children (recursively), then the node's own rows — which may therefore
//! refer to both parent and child labels — and finally its `loc` row. The
//! file ends with `bump_id_counter` so a counter-based importer starts the
//! next file in a fresh id range.

use super::ast::{Expr, Function, SourceFile, Stmt};
use super::trap::{TrapArg, TrapDirective, TrapFile, TrapKey};

/// Extract one source file into its trap representation.
pub fn extract_trap(file: &SourceFile) -> TrapFile {
    let mut ex = Extractor {
        file_path: file.path.clone(),
        directives: Vec::new(),
    };
    ex.file(file);
    ex.directives.push(TrapDirective::BumpIdCounter);
    TrapFile {
        directives: ex.directives,
    }
}

struct Extractor {
    file_path: String,
    directives: Vec<TrapDirective>,
}

fn label(path: &str) -> TrapArg {
    TrapArg::Label(path.to_owned())
}

impl Extractor {
    fn define(&mut self, path: &str) {
        self.directives.push(TrapDirective::LabelDef {
            label: path.to_owned(),
            key: TrapKey::Global(format!("{}#{}", self.file_path, path)),
        });
    }

    fn row(&mut self, relation: &str, args: Vec<TrapArg>) {
        self.directives.push(TrapDirective::TupleInsert {
            relation: relation.to_owned(),
            args,
        });
    }

    fn child_edge(&mut self, parent: &str, index: usize, child: &str) {
        self.row(
            "child",
            vec![label(parent), TrapArg::Int(index as i64), label(child)],
        );
    }

    fn loc(&mut self, path: &str, line: usize) {
        self.row("loc", vec![label(path), TrapArg::Int(line as i64)]);
    }

    fn file(&mut self, file: &SourceFile) {
        let path = "r";
        self.define(path);
        for (i, function) in file.functions.iter().enumerate() {
            self.function(function, &format!("{path}_{}", i + 1));
        }
        self.row(
            "file_def",
            vec![label(path), TrapArg::Str(file.path.clone())],
        );
        for i in 1..=file.functions.len() {
            self.child_edge(path, i, &format!("{path}_{i}"));
        }
    }

    fn function(&mut self, function: &Function, path: &str) {
        self.define(path);
        let params = function.params.len();
        for (i, name) in function.params.iter().enumerate() {
            let param_path = format!("{path}_{}", i + 1);
            self.define(&param_path);
            self.row(
                "param",
                vec![
                    label(&param_path),
                    label(path),
                    TrapArg::Int((i + 1) as i64),
                    TrapArg::Str(name.clone()),
                ],
            );
            self.loc(&param_path, function.line);
        }
        for (i, stmt) in function.body.iter().enumerate() {
            self.stmt(stmt, &format!("{path}_{}", params + i + 1));
        }
        self.row(
            "func_def",
            vec![label(path), TrapArg::Str(function.name.clone())],
        );
        for i in 1..=params + function.body.len() {
            self.child_edge(path, i, &format!("{path}_{i}"));
        }
        self.loc(path, function.line);
    }

    fn stmt(&mut self, stmt: &Stmt, path: &str) {
        self.define(path);
        let line = stmt.line();
        match stmt {
            Stmt::Assign { name, value, .. } => {
                let rhs = format!("{path}_1");
                self.expr(value, &rhs, line);
                self.row(
                    "assign",
                    vec![label(path), TrapArg::Str(name.clone()), label(&rhs)],
                );
                self.child_edge(path, 1, &rhs);
            }
            Stmt::FieldWrite {
                object,
                field,
                value,
                ..
            } => {
                let rhs = format!("{path}_1");
                self.expr(value, &rhs, line);
                self.row(
                    "field_write",
                    vec![
                        label(path),
                        TrapArg::Str(object.clone()),
                        TrapArg::Str(field.clone()),
                        label(&rhs),
                    ],
                );
                self.child_edge(path, 1, &rhs);
            }
            Stmt::While { cond, body, .. } => {
                let cond_path = format!("{path}_1");
                self.expr(cond, &cond_path, line);
                for (i, inner) in body.iter().enumerate() {
                    self.stmt(inner, &format!("{path}_{}", i + 2));
                }
                self.row("while_def", vec![label(path), label(&cond_path)]);
                for i in 1..=body.len() + 1 {
                    self.child_edge(path, i, &format!("{path}_{i}"));
                }
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
                ..
            } => {
                let cond_path = format!("{path}_1");
                self.expr(cond, &cond_path, line);
                for (i, inner) in then_body.iter().enumerate() {
                    self.stmt(inner, &format!("{path}_{}", i + 2));
                }
                for (i, inner) in else_body.iter().enumerate() {
                    self.stmt(inner, &format!("{path}_{}", then_body.len() + i + 2));
                }
                self.row("if_def", vec![label(path), label(&cond_path)]);
                for i in 1..=then_body.len() + else_body.len() + 1 {
                    self.child_edge(path, i, &format!("{path}_{i}"));
                }
            }
            Stmt::Return { value: Some(value), .. } => {
                let inner = format!("{path}_1");
                self.expr(value, &inner, line);
                self.row("ret", vec![label(path), label(&inner)]);
                self.child_edge(path, 1, &inner);
            }
            Stmt::Return { value: None, .. } => {
                self.row("ret_void", vec![label(path)]);
            }
            Stmt::Expr { value, .. } => {
                let inner = format!("{path}_1");
                self.expr(value, &inner, line);
                self.row("expr_stmt", vec![label(path), label(&inner)]);
                self.child_edge(path, 1, &inner);
            }
        }
        self.loc(path, line);
    }

    fn expr(&mut self, expr: &Expr, path: &str, line: usize) {
        self.define(path);
        match expr {
            Expr::Int(value) => {
                self.row("lit", vec![label(path), TrapArg::Int(*value)]);
            }
            Expr::Str(value) => {
                self.row("str_lit", vec![label(path), TrapArg::Str(value.clone())]);
            }
            Expr::Var(name) => {
                self.row("var_read", vec![label(path), TrapArg::Str(name.clone())]);
            }
            Expr::FieldRead { object, field } => {
                self.row(
                    "field_read",
                    vec![
                        label(path),
                        TrapArg::Str(object.clone()),
                        TrapArg::Str(field.clone()),
                    ],
                );
            }
            Expr::Call { callee, args } => {
                for (i, arg) in args.iter().enumerate() {
                    self.expr(arg, &format!("{path}_{}", i + 1), line);
                }
                self.row("call", vec![label(path), TrapArg::Str(callee.clone())]);
                for (i, _) in args.iter().enumerate() {
                    let arg_path = format!("{path}_{}", i + 1);
                    self.row(
                        "arg",
                        vec![
                            label(path),
                            TrapArg::Int((i + 1) as i64),
                            label(&arg_path),
                        ],
                    );
                }
                for i in 1..=args.len() {
                    self.child_edge(path, i, &format!("{path}_{i}"));
                }
            }
            Expr::Binop { op, left, right } => {
                let left_path = format!("{path}_1");
                let right_path = format!("{path}_2");
                self.expr(left, &left_path, line);
                self.expr(right, &right_path, line);
                self.row("binop", vec![label(path), TrapArg::Str(op.clone())]);
                self.child_edge(path, 1, &left_path);
                self.child_edge(path, 2, &right_path);
            }
        }
        self.loc(path, line);
    }
}

/// The column types of every relation the extractor can emit, in the order
/// the analysis schema must declare them. Shared by importer validation and
/// by generated analyses.
pub fn extracted_schema() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("file_def", vec!["id", "string"]),
        ("func_def", vec!["id", "string"]),
        ("param", vec!["id", "id", "int", "string"]),
        ("assign", vec!["id", "string", "id"]),
        ("field_write", vec!["id", "string", "string", "id"]),
        ("while_def", vec!["id", "id"]),
        ("if_def", vec!["id", "id"]),
        ("ret", vec!["id", "id"]),
        ("ret_void", vec!["id"]),
        ("expr_stmt", vec!["id", "id"]),
        ("var_read", vec!["id", "string"]),
        ("lit", vec!["id", "int"]),
        ("str_lit", vec!["id", "string"]),
        ("field_read", vec!["id", "string", "string"]),
        ("call", vec!["id", "string"]),
        ("arg", vec!["id", "int", "id"]),
        ("binop", vec!["id", "string"]),
        ("child", vec!["id", "int", "id"]),
        ("loc", vec!["id", "int"]),
    ]
}
