//! Well-formedness checking and column-type inference.
//!
//! Runs as part of program construction: a [`super::ast::Program`] that
//! exists has passed every check here. The checks are, in order: name
//! hygiene, the EDB/IDB split, arity consistency, per-rule binding rules
//! (range restriction and friends), and a type-inference fixpoint that
//! assigns `id`/`int`/`string` to every column of every predicate.

use std::collections::{BTreeMap, BTreeSet};

use super::ast::{AggFunc, Atom, CmpOp, Literal, RelationDecl, Rule, Term};
use super::parser::ParseError;
use crate::builtins::{default_signatures, BuiltinSignature};
use crate::value::ColumnType;

/// Words that cannot name predicates, variables, or constructors.
const RESERVED: &[&str] =
    &["not", "new", "order", "count", "sum", "min", "max", "concat", "id", "int", "string"];

fn reserved(name: &str) -> bool {
    RESERVED.contains(&name)
}

pub(crate) fn validate(
    decls: &[RelationDecl],
    rules: &[Rule],
) -> Result<BTreeMap<String, Vec<ColumnType>>, ParseError> {
    validate_with_builtins(decls, rules, &default_signatures())
}

pub(crate) fn validate_with_builtins(
    decls: &[RelationDecl],
    rules: &[Rule],
    builtins: &BTreeMap<String, BuiltinSignature>,
) -> Result<BTreeMap<String, Vec<ColumnType>>, ParseError> {
    let program_err = |message: String| ParseError::Program { message };

    // --- Declarations and the EDB/IDB split. ---
    let mut edb: BTreeSet<&str> = BTreeSet::new();
    for d in decls {
        if reserved(&d.name) {
            return Err(program_err(format!("`{}` is a reserved word", d.name)));
        }
        if d.columns.is_empty() {
            return Err(program_err(format!(
                "relation `{}` must have at least one column",
                d.name
            )));
        }
        if !edb.insert(&d.name) {
            return Err(program_err(format!("relation `{}` declared twice", d.name)));
        }
    }
    let idb: BTreeSet<&str> = rules.iter().map(|r| r.head.predicate.as_str()).collect();
    for name in &idb {
        if reserved(name) {
            return Err(program_err(format!("`{name}` is a reserved word")));
        }
        if edb.contains(name) {
            return Err(program_err(format!(
                "`{name}` is declared as an input relation and also defined by a rule"
            )));
        }
    }

    // --- Arity consistency across declarations, heads, and body atoms. ---
    let mut arity: BTreeMap<&str, usize> = BTreeMap::new();
    for d in decls {
        arity.insert(&d.name, d.columns.len());
    }
    for (ri, rule) in rules.iter().enumerate() {
        let mut atoms: Vec<&Atom> = vec![&rule.head];
        for lit in &rule.body {
            match lit {
                Literal::Pos(a) | Literal::Neg(a) | Literal::Agg { atom: a, .. } => atoms.push(a),
                _ => {}
            }
        }
        for atom in atoms {
            match arity.get(atom.predicate.as_str()) {
                Some(&n) if n != atom.args.len() => {
                    return Err(ParseError::Validation {
                        rule: ri,
                        message: format!(
                            "`{}` used with {} arguments but has {} elsewhere",
                            atom.predicate,
                            atom.args.len(),
                            n
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    arity.insert(&atom.predicate, atom.args.len());
                }
            }
        }
    }

    // --- Per-rule binding rules. ---
    for (ri, rule) in rules.iter().enumerate() {
        check_rule_bindings(ri, rule, &edb, &idb, builtins)?;
    }

    // --- Type inference to a fixed point. ---
    let mut types: BTreeMap<String, Vec<Option<ColumnType>>> = BTreeMap::new();
    for d in decls {
        types.insert(d.name.clone(), d.columns.iter().map(|&c| Some(c)).collect());
    }
    for rule in rules {
        types
            .entry(rule.head.predicate.clone())
            .or_insert_with(|| vec![None; rule.head.args.len()]);
    }
    loop {
        let mut changed = false;
        for (ri, rule) in rules.iter().enumerate() {
            changed |= infer_rule(ri, rule, &mut types, builtins)?;
        }
        if !changed {
            break;
        }
    }
    let mut resolved = BTreeMap::new();
    for (name, cols) in types {
        let mut out = Vec::with_capacity(cols.len());
        for (i, c) in cols.iter().enumerate() {
            match c {
                Some(t) => out.push(*t),
                None => {
                    return Err(program_err(format!(
                        "cannot infer the type of column {} of `{name}`; \
                         the predicate never derives from typed relations",
                        i + 1
                    )))
                }
            }
        }
        resolved.insert(name, out);
    }

    // --- Checks that need full type information. ---
    for (ri, rule) in rules.iter().enumerate() {
        check_rule_types(ri, rule, &resolved, builtins)?;
    }

    Ok(resolved)
}

/// Binding discipline for one rule: at least one binding literal, range
/// restriction for the head, and boundness rules for negation, comparisons,
/// aggregates, and fresh-id bindings.
fn check_rule_bindings(
    ri: usize,
    rule: &Rule,
    edb: &BTreeSet<&str>,
    idb: &BTreeSet<&str>,
    builtins: &BTreeMap<String, BuiltinSignature>,
) -> Result<(), ParseError> {
    let err = |message: String| ParseError::Validation { rule: ri, message };
    let known = |p: &str| edb.contains(p) || idb.contains(p);

    if !rule.body.iter().any(Literal::reads_relation) {
        return Err(err(
            "rule body needs at least one binding literal that reads a relation \
             (a positive atom, an aggregate, or a built-in call)"
                .into(),
        ));
    }

    // Variables bound by matching rows (positive atoms, built-in outputs).
    let mut bound: BTreeSet<&str> = BTreeSet::new();
    for lit in &rule.body {
        match lit {
            Literal::Pos(a) => bound.extend(a.args.iter().filter_map(Term::as_var)),
            Literal::Builtin { outputs, .. } => {
                bound.extend(outputs.iter().filter_map(Term::as_var))
            }
            _ => {}
        }
    }
    // Variables bound by value-producing literals (aggregates, fresh ids).
    // Those are head-only: they may not be re-used by other body literals.
    let produced_all: BTreeSet<&str> = rule
        .body
        .iter()
        .filter_map(|l| match l {
            Literal::Agg { result, .. } | Literal::Fresh { result, .. } => {
                Some(result.as_str())
            }
            _ => None,
        })
        .collect();
    let mut produced: BTreeSet<&str> = BTreeSet::new();

    for lit in &rule.body {
        match lit {
            Literal::Pos(a) => {
                if !known(&a.predicate) {
                    return Err(err(format!("unknown predicate `{}`", a.predicate)));
                }
                for v in a.args.iter().filter_map(Term::as_var) {
                    if reserved(v) {
                        return Err(err(format!("`{v}` is a reserved word")));
                    }
                }
            }
            Literal::Neg(a) => {
                if !known(&a.predicate) {
                    return Err(err(format!("unknown predicate `{}`", a.predicate)));
                }
                for t in &a.args {
                    if let Some(v) = t.as_var() {
                        if !bound.contains(v) {
                            return Err(err(format!(
                                "variable `{v}` in negated `{}` is not bound by a positive literal",
                                a.predicate
                            )));
                        }
                    }
                }
            }
            Literal::Cmp { lhs, rhs, .. } => {
                for t in [lhs, rhs] {
                    match t {
                        Term::Var(v) if !bound.contains(v.as_str()) => {
                            return Err(err(format!(
                                "variable `{v}` in a comparison is not bound by a positive literal"
                            )))
                        }
                        Term::Wildcard => {
                            return Err(err("`_` cannot appear in a comparison".into()))
                        }
                        _ => {}
                    }
                }
            }
            Literal::Agg { result, func, value, order, atom } => {
                if !known(&atom.predicate) {
                    return Err(err(format!("unknown predicate `{}`", atom.predicate)));
                }
                if reserved(result) {
                    return Err(err(format!("`{result}` is a reserved word")));
                }
                if bound.contains(result.as_str()) || !produced.insert(result) {
                    return Err(err(format!(
                        "aggregate result `{result}` must be a fresh variable"
                    )));
                }
                let atom_vars: BTreeSet<&str> =
                    atom.args.iter().filter_map(Term::as_var).collect();
                for v in &atom_vars {
                    if produced_all.contains(v) {
                        return Err(err(format!(
                            "variable `{v}` in the aggregate atom is the result of an \
                             aggregate or fresh-id binding; those are head-only — rename \
                             the local variable"
                        )));
                    }
                }
                for (role, v) in [("aggregated", value.as_deref()), ("ordering", order.as_deref())]
                {
                    if let Some(v) = v {
                        if !atom_vars.contains(v) {
                            return Err(err(format!(
                                "{role} variable `{v}` does not occur in the aggregate atom"
                            )));
                        }
                        if bound.contains(v) {
                            return Err(err(format!(
                                "{role} variable `{v}` must be local to the aggregate"
                            )));
                        }
                    }
                }
                if matches!(func, AggFunc::Concat) && value.as_deref() == order.as_deref() {
                    return Err(err("concat needs distinct value and order variables".into()));
                }
            }
            Literal::Fresh { result, ctor, args } => {
                if reserved(result) || reserved(ctor) {
                    return Err(err("reserved word in fresh-id binding".into()));
                }
                if bound.contains(result.as_str()) || !produced.insert(result) {
                    return Err(err(format!(
                        "fresh-id result `{result}` must be a fresh variable"
                    )));
                }
                for a in args {
                    if !bound.contains(a.as_str()) {
                        return Err(err(format!(
                            "fresh-id argument `{a}` is not bound by a positive literal"
                        )));
                    }
                }
            }
            Literal::Builtin { name, inputs, outputs } => {
                let Some(sig) = builtins.get(name) else {
                    return Err(err(format!("unknown built-in `@{name}`")));
                };
                if inputs.len() != sig.input_types.len() {
                    return Err(err(format!(
                        "@{name} takes {} input relations, found {}",
                        sig.input_types.len(),
                        inputs.len()
                    )));
                }
                for r in inputs {
                    if !known(r) {
                        return Err(err(format!("unknown predicate `{r}` passed to @{name}")));
                    }
                }
                if outputs.len() != sig.output_types.len() {
                    return Err(err(format!(
                        "@{name} produces {} columns, found {} output terms",
                        sig.output_types.len(),
                        outputs.len()
                    )));
                }
                if outputs.iter().any(|t| matches!(t, Term::Wildcard)) {
                    return Err(err("`_` cannot appear in built-in outputs".into()));
                }
            }
        }
    }

    for t in &rule.head.args {
        match t {
            Term::Var(v) => {
                if reserved(v) {
                    return Err(err(format!("`{v}` is a reserved word")));
                }
                if !bound.contains(v.as_str()) && !produced.contains(v.as_str()) {
                    return Err(err(format!(
                        "head variable `{v}` is not bound in the body (range restriction)"
                    )));
                }
            }
            Term::Wildcard => return Err(err("`_` cannot appear in a rule head".into())),
            _ => {}
        }
    }
    Ok(())
}

/// One inference pass over a rule. Returns whether any predicate column type
/// was newly fixed.
fn infer_rule(
    ri: usize,
    rule: &Rule,
    types: &mut BTreeMap<String, Vec<Option<ColumnType>>>,
    builtins: &BTreeMap<String, BuiltinSignature>,
) -> Result<bool, ParseError> {
    let mut venv: BTreeMap<String, ColumnType> = BTreeMap::new();
    let bind = |venv: &mut BTreeMap<String, ColumnType>, v: &str, t: ColumnType| {
        match venv.get(v) {
            Some(&existing) if existing != t => Err(ParseError::Validation {
                rule: ri,
                message: format!("variable `{v}` is used both as {existing} and as {t}"),
            }),
            Some(_) => Ok(()),
            None => {
                venv.insert(v.to_owned(), t);
                Ok(())
            }
        }
    };

    for lit in &rule.body {
        match lit {
            Literal::Pos(a) | Literal::Agg { atom: a, .. } => {
                if let Some(cols) = types.get(&a.predicate).cloned() {
                    for (term, col) in a.args.iter().zip(cols.iter()) {
                        if let (Term::Var(v), Some(t)) = (term, col) {
                            bind(&mut venv, v, *t)?;
                        }
                    }
                }
            }
            Literal::Builtin { name, outputs, .. } => {
                let sig = &builtins[name.as_str()];
                for (term, t) in outputs.iter().zip(sig.output_types.iter()) {
                    if let Term::Var(v) = term {
                        bind(&mut venv, v, *t)?;
                    }
                }
            }
            _ => {}
        }
    }
    for lit in &rule.body {
        match lit {
            Literal::Agg { result, func, value, .. } => {
                let t = match func {
                    AggFunc::Count | AggFunc::Sum => ColumnType::Int,
                    AggFunc::Concat => ColumnType::Str,
                    AggFunc::Min | AggFunc::Max => {
                        match value.as_ref().and_then(|v| venv.get(v.as_str())) {
                            Some(&t) => t,
                            None => continue, // unknown as yet; a later pass will see it
                        }
                    }
                };
                bind(&mut venv, result, t)?;
            }
            Literal::Fresh { result, .. } => bind(&mut venv, result, ColumnType::Id)?,
            _ => {}
        }
    }

    // Push head term types into the head predicate's columns.
    let mut changed = false;
    let mut new_cols = types[&rule.head.predicate].clone();
    for (i, term) in rule.head.args.iter().enumerate() {
        let t = match term {
            Term::Var(v) => venv.get(v.as_str()).copied(),
            Term::Int(_) => Some(ColumnType::Int),
            Term::Str(_) => Some(ColumnType::Str),
            Term::Wildcard => None,
        };
        if let Some(t) = t {
            match new_cols[i] {
                Some(existing) if existing != t => {
                    return Err(ParseError::Validation {
                        rule: ri,
                        message: format!(
                            "column {} of `{}` is both {existing} and {t}",
                            i + 1,
                            rule.head.predicate
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    new_cols[i] = Some(t);
                    changed = true;
                }
            }
        }
    }
    if changed {
        types.insert(rule.head.predicate.clone(), new_cols);
    }
    Ok(changed)
}

/// Final pass with every column type known: argument and operand typing.
fn check_rule_types(
    ri: usize,
    rule: &Rule,
    types: &BTreeMap<String, Vec<ColumnType>>,
    builtins: &BTreeMap<String, BuiltinSignature>,
) -> Result<(), ParseError> {
    let err = |message: String| ParseError::Validation { rule: ri, message };

    // Variable types, from binding literals.
    let mut venv: BTreeMap<String, ColumnType> = BTreeMap::new();
    for lit in &rule.body {
        match lit {
            Literal::Pos(a) | Literal::Agg { atom: a, .. } => {
                for (term, &col) in a.args.iter().zip(types[a.predicate.as_str()].iter()) {
                    if let Term::Var(v) = term {
                        venv.entry(v.clone()).or_insert(col);
                    }
                }
            }
            Literal::Builtin { name, outputs, .. } => {
                let sig = &builtins[name.as_str()];
                for (term, &t) in outputs.iter().zip(sig.output_types.iter()) {
                    if let Term::Var(v) = term {
                        venv.entry(v.clone()).or_insert(t);
                    }
                }
            }
            _ => {}
        }
    }

    // Every atom's arguments must match its predicate's column types.
    let check_atom = |a: &Atom| -> Result<(), ParseError> {
        for (term, &col) in a.args.iter().zip(types[a.predicate.as_str()].iter()) {
            let ok = match term {
                Term::Var(v) => venv.get(v.as_str()).is_none_or(|&t| t == col),
                Term::Int(_) => col == ColumnType::Int,
                Term::Str(_) => col == ColumnType::Str,
                Term::Wildcard => true,
            };
            if !ok {
                return Err(ParseError::Validation {
                    rule: ri,
                    message: format!("argument `{term}` does not fit {col} column of `{}`", a.predicate),
                });
            }
        }
        Ok(())
    };

    for lit in &rule.body {
        match lit {
            Literal::Pos(a) | Literal::Neg(a) => check_atom(a)?,
            Literal::Cmp { op, lhs, rhs } => {
                let ty_of = |t: &Term| -> Option<ColumnType> {
                    match t {
                        Term::Var(v) => venv.get(v.as_str()).copied(),
                        Term::Int(_) => Some(ColumnType::Int),
                        Term::Str(_) => Some(ColumnType::Str),
                        Term::Wildcard => None,
                    }
                };
                let (Some(lt), Some(rt)) = (ty_of(lhs), ty_of(rhs)) else { continue };
                if lt != rt {
                    return Err(err(format!("cannot compare {lt} with {rt}")));
                }
                if lt == ColumnType::Id && !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(err("ids support only `=` and `!=`".into()));
                }
            }
            Literal::Agg { func, value, order, atom, .. } => {
                check_atom(atom)?;
                let cols = &types[atom.predicate.as_str()];
                let var_ty = |name: &Option<String>| -> Option<ColumnType> {
                    let v = name.as_deref()?;
                    atom.args.iter().position(|t| t.as_var() == Some(v)).map(|i| cols[i])
                };
                match func {
                    AggFunc::Sum => {
                        if var_ty(value) != Some(ColumnType::Int) {
                            return Err(err("sum needs an int variable".into()));
                        }
                    }
                    AggFunc::Min | AggFunc::Max => {
                        if var_ty(value) == Some(ColumnType::Id) {
                            return Err(err(format!("{func} cannot order ids")));
                        }
                    }
                    AggFunc::Concat => {
                        if var_ty(value) != Some(ColumnType::Str) {
                            return Err(err("concat needs a string value variable".into()));
                        }
                        if var_ty(order) == Some(ColumnType::Id) {
                            return Err(err("concat cannot order by an id".into()));
                        }
                    }
                    AggFunc::Count => {}
                }
            }
            Literal::Builtin { name, inputs, .. } => {
                let sig = &builtins[name.as_str()];
                for (r, want) in inputs.iter().zip(sig.input_types.iter()) {
                    let got = &types[r.as_str()];
                    if got != want {
                        return Err(err(format!(
                            "@{name} input `{r}` has columns ({}), expected ({})",
                            join_types(got),
                            join_types(want)
                        )));
                    }
                }
            }
            Literal::Fresh { .. } => {}
        }
    }
    Ok(())
}

fn join_types(ts: &[ColumnType]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use crate::lang::parser::parse_program;

    fn expect_err(src: &str, needle: &str) {
        let err = parse_program(src).expect_err("program should be rejected");
        let text = err.to_string();
        assert!(text.contains(needle), "expected error mentioning {needle:?}, got: {text}");
    }

    #[test]
    fn head_variables_must_be_bound() {
        expect_err("q(id).\np(x) :- q(y).", "x");
    }

    #[test]
    fn rules_need_a_binding_literal() {
        expect_err("q(int).\np(x) :- x = 1.", "binding");
    }

    #[test]
    fn negated_atoms_cannot_bind_new_variables() {
        expect_err("node(id).\nedge(id, id).\np(x) :- node(x), not edge(x, y).", "y");
    }

    #[test]
    fn comparison_variables_must_be_bound() {
        expect_err("node(id).\np(x) :- node(x), y < 1.", "y");
    }

    #[test]
    fn duplicate_declarations_are_rejected() {
        expect_err("node(id).\nnode(id).", "node");
    }

    #[test]
    fn declared_relations_cannot_also_be_derived() {
        expect_err("node(id).\nedge(id, id).\nnode(x) :- edge(x, _).", "node");
    }

    #[test]
    fn arity_must_be_consistent() {
        expect_err("edge(id, id).\np(x) :- edge(x).", "edge");
        expect_err("edge(id, id).\np(x) :- edge(x, _).\np(x, y) :- edge(x, y).", "p");
    }

    #[test]
    fn variable_types_cannot_conflict() {
        expect_err("num(int).\nname(string).\np(x) :- num(x), name(x).", "x");
    }

    #[test]
    fn ids_only_support_equality_comparisons() {
        expect_err("edge(id, id).\np(x, y) :- edge(x, y), x < y.", "id");
        // Equality and inequality on ids are fine.
        parse_program("edge(id, id).\nloop(x) :- edge(x, y), x = y.\n").unwrap();
        parse_program("edge(id, id).\nhop(x, y) :- edge(x, y), x != y.\n").unwrap();
    }

    #[test]
    fn aggregate_results_must_be_fresh_variables() {
        expect_err(
            "item(id, int).\np(c) :- item(c, _), c = count { item(_, _) }.",
            "c",
        );
    }

    #[test]
    fn aggregate_value_variable_must_come_from_the_aggregated_atom() {
        expect_err(
            "item(id, int).\nnum(int).\np(s) :- num(v), s = sum v { item(_, _) }.",
            "v",
        );
    }

    #[test]
    fn sum_requires_integer_values() {
        expect_err("named(id, string).\np(s) :- s = sum v { named(_, v) }.", "int");
    }

    #[test]
    fn min_max_cannot_aggregate_ids() {
        expect_err("edge(id, id).\np(m) :- m = min v { edge(_, v) }.", "id");
    }

    #[test]
    fn concat_requires_string_values() {
        expect_err(
            "item(id, int, int).\np(s) :- s = concat v order k { item(_, k, v) }.",
            "string",
        );
    }

    #[test]
    fn fresh_id_arguments_must_be_bound() {
        expect_err("node(id).\nwrap(n) :- node(y), n = new w(x).", "x");
    }

    #[test]
    fn rule_bodies_must_read_at_least_one_relation() {
        expect_err("node(id).\nwrap(n) :- n = new w().", "reads a relation");
    }

    #[test]
    fn global_aggregates_without_other_atoms_are_legal() {
        let p = parse_program("item(id, int).\ntotal(s) :- s = sum v { item(_, v) }.").unwrap();
        assert_eq!(p.predicate_types("total"), Some(&[crate::value::ColumnType::Int][..]));
    }

    #[test]
    fn fresh_id_result_must_be_fresh() {
        expect_err("node(id).\nwrap(x) :- node(x), x = new w(x).", "x");
    }

    #[test]
    fn builtin_input_types_are_checked() {
        expect_err(
            "edge(id, id).\nd(x, y, n) :- @shortest_path(edge; x, y, n).",
            "shortest_path",
        );
    }

    #[test]
    fn builtin_output_count_is_checked() {
        expect_err("w(id, id, int).\nd(x, y) :- @shortest_path(w; x, y).", "output");
    }

    #[test]
    fn idb_types_are_inferred_through_rules() {
        let p = parse_program(
            "w(id, id, int).\n\
             dist(x, y, d) :- @shortest_path(w; x, y, d).\n\
             close(x, y) :- dist(x, y, d), d <= 2.\n\
             tag(x, t) :- close(x, _), t = new tag_of(x).\n",
        )
        .unwrap();
        use crate::value::ColumnType::*;
        assert_eq!(p.predicate_types("dist"), Some(&[Id, Id, Int][..]));
        assert_eq!(p.predicate_types("close"), Some(&[Id, Id][..]));
        assert_eq!(p.predicate_types("tag"), Some(&[Id, Id][..]));
    }

    #[test]
    fn uninferrable_types_are_reported() {
        expect_err("p(x) :- q(x).\nq(x) :- p(x).", "infer");
    }
}
