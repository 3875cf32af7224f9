//! From-scratch reference evaluator.
//!
//! Evaluates a program directly off its rules: strata in order, a naive
//! fixpoint within each stratum (re-derive everything until nothing new
//! appears). No deltas, no caches, no cleverness — this is the *oracle*
//! that defines the semantics the incremental engine must reproduce, and it
//! doubles as the batch evaluator the hybrid mode uses for predicate
//! chains.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::builtins::{BuiltinError, BuiltinRegistry};
use crate::freshids::{IdPool, PoolExhausted};
use crate::lang::ast::{AggFunc, Atom, CmpOp, Literal, Program, Rule, Term};
use crate::lang::stratify::{stratify, StratificationReport};
use crate::value::{Database, Relation, Tuple, Value};

/// Evaluation failure. Static validation rules most of these out; the ones
/// left are runtime conditions (built-in contract violations, arithmetic
/// overflow) and defensive schema checks at the EDB boundary.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("input database: {0}")]
    Schema(String),
    #[error("program is not stratified: {0}")]
    Unstratified(String),
    #[error("built-in @{name}: {source}")]
    Builtin { name: String, source: BuiltinError },
    #[error("sum aggregate overflowed 64-bit integers")]
    SumOverflow,
    #[error(transparent)]
    Pool(#[from] PoolExhausted),
}

/// Checks that `edb` holds exactly declared EDB relations with correctly
/// typed tuples. Missing relations are fine (treated as empty); unknown
/// names, IDB names, arity or column-type mismatches are not.
pub fn check_edb(program: &Program, edb: &Database) -> Result<(), EvalError> {
    let idb: BTreeSet<&str> = program.idb_names().into_iter().collect();
    for (name, rel) in &edb.relations {
        if idb.contains(name.as_str()) {
            return Err(EvalError::Schema(format!(
                "relation `{name}` is derived by rules and cannot be supplied as input"
            )));
        }
        let Some(types) = program.predicate_types(name) else {
            return Err(EvalError::Schema(format!("unknown relation `{name}`")));
        };
        if !program.is_edb(name) {
            return Err(EvalError::Schema(format!("relation `{name}` is not declared")));
        }
        for t in rel {
            if t.len() != types.len() {
                return Err(EvalError::Schema(format!(
                    "`{name}` expects {} columns, got a {}-tuple",
                    types.len(),
                    t.len()
                )));
            }
            for (v, ty) in t.iter().zip(types) {
                if v.column_type() != *ty {
                    return Err(EvalError::Schema(format!(
                        "`{name}` column of type {ty} holds {v}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Evaluates `program` on `edb` from scratch. The result holds the EDB
/// relations plus every derived relation. Fresh ids are minted from `pool`;
/// two runs sharing a pool produce bit-identical results.
pub fn evaluate(
    program: &Program,
    edb: &Database,
    pool: &mut IdPool,
    builtins: &BuiltinRegistry,
) -> Result<Database, EvalError> {
    let report = stratify(program);
    if !report.is_ok() {
        return Err(EvalError::Unstratified(report.errors[0].message.clone()));
    }
    evaluate_stratified(program, &report, edb, pool, builtins)
}

/// [`evaluate`] with a precomputed stratification.
pub fn evaluate_stratified(
    program: &Program,
    report: &StratificationReport,
    edb: &Database,
    pool: &mut IdPool,
    builtins: &BuiltinRegistry,
) -> Result<Database, EvalError> {
    check_edb(program, edb)?;
    let mut db = Database::default();
    for name in program.all_types().keys() {
        let stored = edb.relations.get(name).cloned().unwrap_or_default();
        db.relations.insert(name.clone(), stored);
    }
    for stratum in &report.strata {
        evaluate_predicates(program, &mut db, stratum, pool, builtins)?;
    }
    Ok(db)
}

/// Runs the rules whose heads are in `preds` to fixpoint against `db`,
/// inserting derivations in place. Used stratum-by-stratum above, and by the
/// hybrid mode to re-derive a chain of predicates from its cached inputs.
///
/// The caller must present the predicates in a stratification-compatible
/// way: everything the rules read besides `preds` themselves must already be
/// final in `db`.
pub fn evaluate_predicates(
    program: &Program,
    db: &mut Database,
    preds: &BTreeSet<String>,
    pool: &mut IdPool,
    builtins: &BuiltinRegistry,
) -> Result<(), EvalError> {
    let rules: Vec<&Rule> =
        program.rules.iter().filter(|r| preds.contains(&r.head.predicate)).collect();
    if rules.is_empty() {
        return Ok(());
    }
    // Built-in results are memoized: their inputs live in strictly lower
    // strata, so they cannot change while this fixpoint runs.
    let mut builtin_cache: BTreeMap<(String, Vec<String>), Relation> = BTreeMap::new();
    loop {
        let mut changed = false;
        for rule in &rules {
            let derived = eval_rule(rule, db, pool, builtins, &mut builtin_cache)?;
            let rel = db
                .relations
                .entry(rule.head.predicate.clone())
                .or_default();
            for t in derived {
                changed |= rel.insert(t);
            }
        }
        if !changed {
            return Ok(());
        }
    }
}

type Env = BTreeMap<String, Value>;

/// All head tuples derivable by one rule against the current database.
fn eval_rule(
    rule: &Rule,
    db: &Database,
    pool: &mut IdPool,
    builtins: &BuiltinRegistry,
    builtin_cache: &mut BTreeMap<(String, Vec<String>), Relation>,
) -> Result<BTreeSet<Tuple>, EvalError> {
    // Row-binding literals first (source order), then filters and value
    // producers (source order). Validation guarantees this order never
    // reads an unbound variable.
    let (binding, rest): (Vec<&Literal>, Vec<&Literal>) =
        rule.body.iter().partition(|l| l.is_binding());

    let mut envs: Vec<Env> = vec![Env::new()];
    for lit in binding.into_iter().chain(rest) {
        envs = extend(lit, envs, db, pool, builtins, builtin_cache)?;
        if envs.is_empty() {
            return Ok(BTreeSet::new());
        }
    }

    let mut out = BTreeSet::new();
    for env in &envs {
        let tuple: Tuple = rule
            .head
            .args
            .iter()
            .map(|t| ground(t, env).expect("head terms are bound after validation"))
            .collect();
        out.insert(tuple);
    }
    Ok(out)
}

/// The value of a term under an environment; `None` if it is an unbound
/// variable or a wildcard.
fn ground(term: &Term, env: &Env) -> Option<Value> {
    match term {
        Term::Var(v) => env.get(v).cloned(),
        Term::Int(n) => Some(Value::Int(*n)),
        Term::Str(s) => Some(Value::str(s)),
        Term::Wildcard => None,
    }
}

/// Extends `env` with the bindings from matching `tuple` against the terms,
/// or `None` if the tuple does not match. Wildcards match anything;
/// repeated variables must agree.
fn match_tuple(args: &[Term], tuple: &Tuple, env: &Env) -> Option<Env> {
    let mut out = env.clone();
    for (term, value) in args.iter().zip(tuple) {
        match term {
            Term::Wildcard => {}
            Term::Int(n) => {
                if *value != Value::Int(*n) {
                    return None;
                }
            }
            Term::Str(s) => {
                if value.as_str() != Some(s.as_str()) {
                    return None;
                }
            }
            Term::Var(v) => match out.get(v) {
                Some(bound) if bound != value => return None,
                Some(_) => {}
                None => {
                    out.insert(v.clone(), value.clone());
                }
            },
        }
    }
    Some(out)
}

fn relation<'a>(db: &'a Database, name: &str) -> &'a Relation {
    static EMPTY: Relation = Relation::new();
    db.relations.get(name).unwrap_or(&EMPTY)
}

fn extend(
    lit: &Literal,
    envs: Vec<Env>,
    db: &Database,
    pool: &mut IdPool,
    builtins: &BuiltinRegistry,
    builtin_cache: &mut BTreeMap<(String, Vec<String>), Relation>,
) -> Result<Vec<Env>, EvalError> {
    let mut out = Vec::new();
    match lit {
        Literal::Pos(atom) => {
            let rel = relation(db, &atom.predicate);
            for env in &envs {
                for tuple in rel {
                    if let Some(next) = match_tuple(&atom.args, tuple, env) {
                        out.push(next);
                    }
                }
            }
        }
        Literal::Neg(atom) => {
            let rel = relation(db, &atom.predicate);
            for env in envs {
                let witnessed = rel.iter().any(|t| match_tuple(&atom.args, t, &env).is_some());
                if !witnessed {
                    out.push(env);
                }
            }
        }
        Literal::Cmp { op, lhs, rhs } => {
            for env in envs {
                let l = ground(lhs, &env).expect("comparison operands are bound");
                let r = ground(rhs, &env).expect("comparison operands are bound");
                let keep = match op {
                    CmpOp::Eq => l == r,
                    CmpOp::Ne => l != r,
                    CmpOp::Lt => l < r,
                    CmpOp::Le => l <= r,
                };
                if keep {
                    out.push(env);
                }
            }
        }
        Literal::Agg { result, func, value, order, atom } => {
            for env in envs {
                if let Some(v) = aggregate(func, value, order, atom, db, &env)? {
                    let mut next = env;
                    next.insert(result.clone(), v);
                    out.push(next);
                }
            }
        }
        Literal::Fresh { result, ctor, args } => {
            for env in envs {
                let key: Vec<Value> = args
                    .iter()
                    .map(|a| env.get(a).cloned().expect("fresh-id arguments are bound"))
                    .collect();
                let id = pool.number_tuple(ctor, &key)?;
                let mut next = env;
                next.insert(result.clone(), Value::Id(id));
                out.push(next);
            }
        }
        Literal::Builtin { name, inputs, outputs } => {
            let key = (name.clone(), inputs.clone());
            if !builtin_cache.contains_key(&key) {
                let spec = builtins
                    .get(name)
                    .unwrap_or_else(|| panic!("validation admits only registered built-ins"));
                let input_rels: Vec<Relation> =
                    inputs.iter().map(|r| relation(db, r).clone()).collect();
                let result = (spec.evaluate)(&input_rels)
                    .map_err(|source| EvalError::Builtin { name: name.clone(), source })?;
                builtin_cache.insert(key.clone(), result);
            }
            let rel = &builtin_cache[&key];
            for env in &envs {
                for tuple in rel {
                    if let Some(next) = match_tuple(outputs, tuple, env) {
                        out.push(next);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Computes one aggregate under one environment. Returns `None` when the
/// match set is empty: an empty group produces no binding, for every
/// function (a `count` of zero never fires a rule).
fn aggregate(
    func: &AggFunc,
    value: &Option<String>,
    order: &Option<String>,
    atom: &Atom,
    db: &Database,
    env: &Env,
) -> Result<Option<Value>, EvalError> {
    let rel = relation(db, &atom.predicate);
    let value_of = |tuple_env: &Env, var: &Option<String>| -> Value {
        let v = var.as_ref().expect("validation requires a value variable");
        tuple_env[v.as_str()].clone()
    };

    let mut count: i64 = 0;
    let mut sum: i64 = 0;
    let mut best: Option<Value> = None;
    let mut pieces: BTreeSet<(Value, Value)> = BTreeSet::new();

    for tuple in rel {
        // Variables bound in the outer env act as group keys here; the rest
        // are local to this one tuple.
        let Some(tuple_env) = match_tuple(&atom.args, tuple, env) else { continue };
        match func {
            AggFunc::Count => count += 1,
            AggFunc::Sum => {
                let Value::Int(n) = value_of(&tuple_env, value) else {
                    unreachable!("validation types sum over int columns")
                };
                sum = sum.checked_add(n).ok_or(EvalError::SumOverflow)?;
                count += 1;
            }
            AggFunc::Min | AggFunc::Max => {
                let v = value_of(&tuple_env, value);
                best = Some(match best.take() {
                    None => v,
                    Some(b) => {
                        if matches!(func, AggFunc::Min) == (v < b) {
                            v
                        } else {
                            b
                        }
                    }
                });
                count += 1;
            }
            AggFunc::Concat => {
                let k = order.as_ref().map(|o| tuple_env[o.as_str()].clone()).expect(
                    "validation requires an order variable for concat",
                );
                pieces.insert((k, value_of(&tuple_env, value)));
                count += 1;
            }
        }
    }

    if count == 0 {
        return Ok(None);
    }
    Ok(Some(match func {
        AggFunc::Count => Value::Int(count),
        AggFunc::Sum => Value::Int(sum),
        AggFunc::Min | AggFunc::Max => best.expect("nonempty match set"),
        AggFunc::Concat => {
            let mut s = String::new();
            for (_, v) in &pieces {
                s.push_str(v.as_str().expect("validation types concat over strings"));
            }
            Value::str(&s)
        }
    }))
}
