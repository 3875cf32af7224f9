//! Abstract syntax for the Datalog dialect.
//!
//! A program is a list of extensional relation declarations plus a list of
//! rules. The dialect is deliberately flat: rule bodies are conjunctions of
//! literals, and the only binding forms beyond positive atoms are aggregate
//! bindings, fresh-id bindings, and built-in calls.

use std::collections::BTreeMap;
use std::fmt;

use crate::value::ColumnType;

/// A term in an atom argument position.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Var(String),
    Int(i64),
    Str(String),
    /// `_` — matches anything and binds nothing. Only meaningful inside
    /// negated atoms and aggregate atoms; in positive atoms the parser
    /// replaces each `_` with a unique throwaway variable.
    Wildcard,
}

impl Term {
    pub fn as_var(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // Throwaway variables minted for `_` in positive atoms print
            // back as `_` (their names use `$`, which the lexer cannot
            // produce, so this cannot capture a user variable).
            Term::Var(v) if v.starts_with('$') => f.write_str("_"),
            Term::Var(v) => f.write_str(v),
            Term::Int(n) => write!(f, "{n}"),
            Term::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Term::Wildcard => f.write_str("_"),
        }
    }
}

/// `predicate(arg, ...)`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub predicate: String,
    pub args: Vec<Term>,
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.predicate)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

/// Comparison operators. Ids support only `=` and `!=`; ordering operators
/// apply to ints and strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
        })
    }
}

/// Aggregation functions. All of them range over the *set* of matching
/// tuples of the aggregate atom; a group with no matching tuples produces no
/// binding (the enclosing rule does not fire for that group).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggFunc {
    Count,
    Sum,
    Min,
    Max,
    /// String concatenation ordered by a stated key variable.
    Concat,
}

impl fmt::Display for AggFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggFunc::Count => "count",
            AggFunc::Sum => "sum",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
            AggFunc::Concat => "concat",
        })
    }
}

/// One conjunct of a rule body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Literal {
    /// `p(x, y)`
    Pos(Atom),
    /// `not p(x, _)` — every named variable must be bound by a positive
    /// literal of the same body.
    Neg(Atom),
    /// `x < y`, `x = 3`, ... — both operands must be bound.
    Cmp { op: CmpOp, lhs: Term, rhs: Term },
    /// `n = count { p(x, _) }`, `s = sum w { weight(x, w) }`,
    /// `s = concat v order k { item(g, k, v) }`.
    ///
    /// Variables of `atom` that are bound elsewhere in the body act as group
    /// keys; the remaining ones are local to the aggregate. `value` names the
    /// aggregated column variable (absent for `count`), `order` the ordering
    /// key for `concat`.
    Agg { result: String, func: AggFunc, value: Option<String>, order: Option<String>, atom: Atom },
    /// `v = new ctor(x, y)` — binds `v` to an id unique to
    /// `(ctor, x, y)`, stable across evaluations sharing an id pool.
    Fresh { result: String, ctor: String, args: Vec<String> },
    /// `@name(input_rel, ...; out_term, ...)` — calls a registered built-in
    /// on whole input relations and matches its output rows against the
    /// output terms. Binds output variables like a positive atom.
    Builtin { name: String, inputs: Vec<String>, outputs: Vec<Term> },
}

impl Literal {
    /// A literal that can bind fresh variables by matching rows: positive
    /// atoms and built-in calls.
    pub fn is_binding(&self) -> bool {
        matches!(self, Literal::Pos(_) | Literal::Builtin { .. })
    }

    /// A literal that reads a relation: positive atoms, aggregates (they
    /// scan their atom's relation), and built-in calls. Every rule body
    /// needs at least one, so derivation is always grounded in data.
    pub fn reads_relation(&self) -> bool {
        matches!(self, Literal::Pos(_) | Literal::Agg { .. } | Literal::Builtin { .. })
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Pos(a) => write!(f, "{a}"),
            Literal::Neg(a) => write!(f, "not {a}"),
            Literal::Cmp { op, lhs, rhs } => write!(f, "{lhs} {op} {rhs}"),
            Literal::Agg { result, func, value, order, atom } => {
                write!(f, "{result} = {func}")?;
                if let Some(v) = value {
                    write!(f, " {v}")?;
                }
                if let Some(k) = order {
                    write!(f, " order {k}")?;
                }
                write!(f, " {{ {atom} }}")
            }
            Literal::Fresh { result, ctor, args } => {
                write!(f, "{result} = new {ctor}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    f.write_str(a)?;
                }
                f.write_str(")")
            }
            Literal::Builtin { name, inputs, outputs } => {
                write!(f, "@{name}(")?;
                for (i, r) in inputs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    f.write_str(r)?;
                }
                f.write_str("; ")?;
                for (i, t) in outputs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// `head :- body.`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub head: Atom,
    pub body: Vec<Literal>,
}

impl Rule {
    /// Predicates referenced by the body, with the dependency kind needed
    /// for stratification. Yields `(predicate, DependencyKind)` pairs.
    pub fn body_dependencies(&self) -> Vec<(&str, DependencyKind)> {
        let mut deps = Vec::new();
        let fresh = self.body.iter().any(|l| matches!(l, Literal::Fresh { .. }));
        for lit in &self.body {
            match lit {
                Literal::Pos(a) => deps.push((
                    a.predicate.as_str(),
                    if fresh { DependencyKind::FreshGuard } else { DependencyKind::Positive },
                )),
                Literal::Neg(a) => deps.push((a.predicate.as_str(), DependencyKind::Negative)),
                Literal::Agg { atom, .. } => {
                    deps.push((atom.predicate.as_str(), DependencyKind::Aggregate))
                }
                Literal::Builtin { inputs, .. } => {
                    for r in inputs {
                        deps.push((r.as_str(), DependencyKind::Builtin));
                    }
                }
                Literal::Cmp { .. } | Literal::Fresh { .. } => {}
            }
        }
        deps
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} :-", self.head)?;
        for (i, l) in self.body.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, " {l}")?;
        }
        f.write_str(".")
    }
}

/// How a body predicate feeds a rule head, for stratification purposes.
/// Everything except `Positive` requires the body predicate to live in a
/// strictly earlier stratum than the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DependencyKind {
    Positive,
    Negative,
    Aggregate,
    Builtin,
    /// Positive dependency of a rule that also creates fresh ids: the head
    /// must not be recursive with any of its body predicates, so the edge is
    /// treated as stratum-increasing.
    FreshGuard,
}

impl DependencyKind {
    pub fn is_strict(&self) -> bool {
        !matches!(self, DependencyKind::Positive)
    }
}

/// Declaration of an extensional (input) relation: `edge(id, id).`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationDecl {
    pub name: String,
    pub columns: Vec<ColumnType>,
}

impl fmt::Display for RelationDecl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, c) in self.columns.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str(").")
    }
}

/// A validated program. Constructed through [`Program::new`] (or the parser),
/// which enforces the dialect's well-formedness rules and infers the column
/// types of every derived predicate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub decls: Vec<RelationDecl>,
    pub rules: Vec<Rule>,
    pub(crate) types: BTreeMap<String, Vec<ColumnType>>,
}

impl Program {
    /// Column types of a predicate — declared for EDB relations, inferred
    /// from rules for IDB relations.
    pub fn predicate_types(&self, name: &str) -> Option<&[ColumnType]> {
        self.types.get(name).map(|v| v.as_slice())
    }

    /// All predicates with their column types, EDB and IDB alike.
    pub fn all_types(&self) -> &BTreeMap<String, Vec<ColumnType>> {
        &self.types
    }

    pub fn is_edb(&self, name: &str) -> bool {
        self.decls.iter().any(|d| d.name == name)
    }

    /// Names of derived predicates (rule heads), sorted.
    pub fn idb_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> =
            self.rules.iter().map(|r| r.head.predicate.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Canonical text form. `parse_program(p.to_string())` yields a program
    /// equal to `p`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for d in &self.decls {
            out.push_str(&d.to_string());
            out.push('\n');
        }
        for r in &self.rules {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
