//! Translation of validated rules into a relational-algebra plan.
//!
//! Each IDB predicate gets exactly one [`RaOp::Union`] sink, created up
//! front so that recursive rules can reference their own sink before the
//! rules feeding it have been compiled. Every rule then becomes a pipeline
//! hanging off scans and sinks:
//!
//! 1. Positive atoms are joined left-deep in the order chosen by
//!    [`order_joins`](super::order::order_joins); built-in calls extend the
//!    pipeline after them in source order. Join nodes carry their output
//!    column selection inline, so no separate projection nodes appear
//!    between joins.
//! 2. Comparisons are applied as [`RaOp::Select`]s at the earliest point
//!    where both operands are available.
//! 3. Negations, aggregates, and fresh-id bindings follow in source order.
//! 4. The head either fuses into the final join's output selection, matches
//!    the pipeline schema exactly, or costs one final [`RaOp::Project`].

use std::collections::{BTreeMap, BTreeSet};
use std::collections::BinaryHeap;
use std::cmp::Reverse;

use crate::builtins::BuiltinRegistry;
use crate::lang::{Atom, CmpOp, Literal, Program, Rule, StratificationReport, Term};
use crate::value::Value;

use super::order::{order_joins, CardinalityEstimates};
use super::plan::{
    NodeId, Operand, OutCol, RaNode, RaOp, RaPlan, RecursionGroup, SelectCond, Side,
};

/// Why a program could not be lowered to a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompileError {
    /// The program has no valid stratification; the payload lists the
    /// offending cycles as reported by the stratifier.
    Unstratified(Vec<String>),
    /// An internal invariant failed. Validation is supposed to make these
    /// unreachable; seeing one is a bug in the compiler, not in the input.
    Internal(String),
}

impl std::fmt::Display for CompileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CompileError::Unstratified(errors) => {
                write!(f, "program cannot be stratified: {}", errors.join("; "))
            }
            CompileError::Internal(message) => write!(f, "internal compiler error: {message}"),
        }
    }
}

impl std::error::Error for CompileError {}

/// A pipeline column layout: which rule variable each column carries.
/// Columns holding constants (possible only transiently, before a select
/// pins them) carry `None`. Duplicate variables can appear when the head
/// repeats a variable; lookups always resolve to the first occurrence.
#[derive(Debug, Clone, Default)]
struct Schema {
    cols: Vec<Option<String>>,
}

impl Schema {
    fn of_terms(terms: &[Term]) -> Schema {
        let cols = terms
            .iter()
            .map(|term| match term {
                Term::Var(v) => Some(v.clone()),
                _ => None,
            })
            .collect();
        Schema { cols }
    }

    fn of_atom(atom: &Atom) -> Schema {
        Schema::of_terms(&atom.args)
    }

    fn of_vars(vars: &[String]) -> Schema {
        Schema {
            cols: vars.iter().cloned().map(Some).collect(),
        }
    }

    fn len(&self) -> usize {
        self.cols.len()
    }

    /// Column of the first occurrence of `var`, if bound here.
    fn col_of(&self, var: &str) -> Option<usize> {
        self.cols
            .iter()
            .position(|c| c.as_deref() == Some(var))
    }

    fn contains(&self, var: &str) -> bool {
        self.col_of(var).is_some()
    }

    /// `(column, variable)` pairs for the first occurrence of each variable,
    /// in column order.
    fn first_occurrences(&self) -> Vec<(usize, &str)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (i, col) in self.cols.iter().enumerate() {
            if let Some(v) = col {
                if seen.insert(v.as_str()) {
                    out.push((i, v.as_str()));
                }
            }
        }
        out
    }

    fn var_set(&self) -> BTreeSet<&str> {
        self.cols
            .iter()
            .filter_map(|c| c.as_deref())
            .collect()
    }
}

/// Intra-atom constraints implied by an argument list: constants must match
/// and repeated variables must agree. Returns the select conditions (empty
/// when the arguments are all distinct variables and wildcards).
fn term_conditions(terms: &[Term]) -> Vec<SelectCond> {
    let mut conds = Vec::new();
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, term) in terms.iter().enumerate() {
        match term {
            Term::Var(v) => {
                if let Some(&j) = first_seen.get(v.as_str()) {
                    conds.push(SelectCond {
                        lhs: Operand::Col(j),
                        op: CmpOp::Eq,
                        rhs: Operand::Col(i),
                    });
                } else {
                    first_seen.insert(v, i);
                }
            }
            Term::Int(n) => conds.push(SelectCond {
                lhs: Operand::Col(i),
                op: CmpOp::Eq,
                rhs: Operand::Const(Value::Int(*n)),
            }),
            Term::Str(s) => conds.push(SelectCond {
                lhs: Operand::Col(i),
                op: CmpOp::Eq,
                rhs: Operand::Const(Value::str(s)),
            }),
            Term::Wildcard => {}
        }
    }
    conds
}

fn atom_vars<'t>(atom: &'t Atom, vars: &mut BTreeSet<&'t str>) {
    for term in &atom.args {
        if let Term::Var(v) = term {
            vars.insert(v.as_str());
        }
    }
}

/// All named variables appearing anywhere in a literal.
fn literal_vars(literal: &Literal) -> BTreeSet<&str> {
    let mut vars = BTreeSet::new();
    match literal {
        Literal::Pos(atom) | Literal::Neg(atom) => atom_vars(atom, &mut vars),
        Literal::Cmp { lhs, rhs, .. } => {
            for term in [lhs, rhs] {
                if let Term::Var(v) = term {
                    vars.insert(v.as_str());
                }
            }
        }
        Literal::Agg { result, atom, .. } => {
            vars.insert(result.as_str());
            atom_vars(atom, &mut vars);
        }
        Literal::Fresh { result, args, .. } => {
            vars.insert(result.as_str());
            for v in args {
                vars.insert(v.as_str());
            }
        }
        Literal::Builtin { outputs, .. } => {
            for term in outputs {
                if let Term::Var(v) = term {
                    vars.insert(v.as_str());
                }
            }
        }
    }
    vars
}

struct Builder<'a> {
    program: &'a Program,
    report: &'a StratificationReport,
    estimates: &'a CardinalityEstimates,
    builtins: &'a BuiltinRegistry,
    nodes: Vec<RaNode>,
    /// Stratum owning each node, parallel to `nodes`.
    node_stratum: Vec<usize>,
    /// Memoized scan per EDB relation.
    scans: BTreeMap<String, NodeId>,
    /// The unique union sink per IDB predicate.
    sinks: BTreeMap<String, NodeId>,
}

impl<'a> Builder<'a> {
    fn internal(message: impl Into<String>) -> CompileError {
        CompileError::Internal(message.into())
    }

    fn add(&mut self, op: RaOp, arity: usize, stratum: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(RaNode { id, op, arity });
        self.node_stratum.push(stratum);
        id
    }

    fn stratum_of(&self, predicate: &str) -> Result<usize, CompileError> {
        self.report
            .stratum_of
            .get(predicate)
            .copied()
            .ok_or_else(|| Self::internal(format!("predicate `{predicate}` has no stratum")))
    }

    /// The node producing a relation's contents: its memoized scan for EDB
    /// relations, its union sink for IDB predicates.
    fn relation_node(&mut self, predicate: &str) -> Result<NodeId, CompileError> {
        if self.program.is_edb(predicate) {
            if let Some(&id) = self.scans.get(predicate) {
                return Ok(id);
            }
            let arity = self
                .program
                .predicate_types(predicate)
                .ok_or_else(|| Self::internal(format!("no declaration for `{predicate}`")))?
                .len();
            let stratum = self.stratum_of(predicate)?;
            let id = self.add(
                RaOp::Scan {
                    relation: predicate.to_string(),
                },
                arity,
                stratum,
            );
            self.scans.insert(predicate.to_string(), id);
            Ok(id)
        } else {
            self.sinks
                .get(predicate)
                .copied()
                .ok_or_else(|| Self::internal(format!("no sink for IDB predicate `{predicate}`")))
        }
    }

    /// Wrap `input` in a select when `conds` is non-empty.
    fn select(&mut self, input: NodeId, conds: Vec<SelectCond>, stratum: usize) -> NodeId {
        if conds.is_empty() {
            return input;
        }
        let arity = self.nodes[input].arity;
        self.add(RaOp::Select { input, conds }, arity, stratum)
    }

    /// Source node and schema for one binding literal (positive atom or
    /// built-in call), including the select for its intra-atom constraints.
    fn binding_source(
        &mut self,
        literal: &Literal,
        stratum: usize,
    ) -> Result<(NodeId, Schema), CompileError> {
        match literal {
            Literal::Pos(atom) => {
                let base = self.relation_node(&atom.predicate)?;
                let node = self.select(base, term_conditions(&atom.args), stratum);
                Ok((node, Schema::of_atom(atom)))
            }
            Literal::Builtin {
                name,
                inputs,
                outputs,
            } => {
                let mut input_nodes = Vec::with_capacity(inputs.len());
                for relation in inputs {
                    input_nodes.push(self.relation_node(relation)?);
                }
                let spec = self
                    .builtins
                    .get(name)
                    .ok_or_else(|| Self::internal(format!("unknown built-in `@{name}`")))?;
                let arity = spec.signature.output_types.len();
                let node = self.add(
                    RaOp::Builtin {
                        name: name.clone(),
                        inputs: input_nodes,
                    },
                    arity,
                    stratum,
                );
                let node = self.select(node, term_conditions(outputs), stratum);
                Ok((node, Schema::of_terms(outputs)))
            }
            other => Err(Self::internal(format!(
                "literal is not a binding source: {other:?}"
            ))),
        }
    }

    /// Join the current pipeline with a new source on their shared
    /// variables, keeping only the columns for variables in `needed`.
    fn join(
        &mut self,
        left: (NodeId, Schema),
        right: (NodeId, Schema),
        needed: &BTreeSet<&str>,
        stratum: usize,
    ) -> (NodeId, Schema) {
        let (left_node, left_schema) = left;
        let (right_node, right_schema) = right;

        let mut left_keys = Vec::new();
        let mut right_keys = Vec::new();
        for (right_col, var) in right_schema.first_occurrences() {
            if let Some(left_col) = left_schema.col_of(var) {
                left_keys.push(left_col);
                right_keys.push(right_col);
            }
        }

        let mut output = Vec::new();
        let mut vars = Vec::new();
        for (col, var) in left_schema.first_occurrences() {
            if needed.contains(var) {
                output.push((Side::Left, col));
                vars.push(var.to_string());
            }
        }
        for (col, var) in right_schema.first_occurrences() {
            if needed.contains(var) && !left_schema.contains(var) {
                output.push((Side::Right, col));
                vars.push(var.to_string());
            }
        }

        let arity = output.len();
        let id = self.add(
            RaOp::Join {
                left: left_node,
                right: right_node,
                left_keys,
                right_keys,
                output,
            },
            arity,
            stratum,
        );
        (id, Schema::of_vars(&vars))
    }

    fn compile_rule(&mut self, rule_index: usize, rule: &Rule) -> Result<(), CompileError> {
        let head = &rule.head;
        let stratum = self.stratum_of(&head.predicate)?;
        let sink = self
            .sinks
            .get(&head.predicate)
            .copied()
            .ok_or_else(|| Self::internal(format!("no sink for `{}`", head.predicate)))?;

        // Partition the body. Binding literals feed rows into the pipeline:
        // positive atoms first in the greedily chosen join order, then
        // built-in calls in source order. Comparisons apply as early as
        // their operands allow. Everything else runs post-join in source
        // order.
        let hint = order_joins(rule_index, rule, self.estimates);
        let mut binding: Vec<&Literal> = hint
            .order
            .iter()
            .map(|&i| &rule.body[i])
            .collect();
        binding.extend(
            rule.body
                .iter()
                .filter(|l| matches!(l, Literal::Builtin { .. })),
        );
        let post: Vec<&Literal> = rule
            .body
            .iter()
            .filter(|l| {
                matches!(
                    l,
                    Literal::Neg(_) | Literal::Agg { .. } | Literal::Fresh { .. }
                )
            })
            .collect();
        let comparisons: Vec<&Literal> = rule
            .body
            .iter()
            .filter(|l| matches!(l, Literal::Cmp { .. }))
            .collect();
        let mut cmp_applied = vec![false; comparisons.len()];

        let head_vars: BTreeSet<&str> = head
            .args
            .iter()
            .filter_map(|t| match t {
                Term::Var(v) => Some(v.as_str()),
                _ => None,
            })
            .collect();

        // Variables required downstream of a given pipeline position:
        // everything mentioned by the binding literals not yet joined, the
        // post-join literals not yet processed, the comparisons not yet
        // applied, and the head.
        let needed_after = |binding_done: usize,
                            post_done: usize,
                            cmp_applied: &[bool]|
         -> BTreeSet<&str> {
            let mut needed: BTreeSet<&str> = head_vars.clone();
            for &literal in &binding[binding_done..] {
                needed.extend(literal_vars(literal));
            }
            for &literal in &post[post_done..] {
                needed.extend(literal_vars(literal));
            }
            for (i, &literal) in comparisons.iter().enumerate() {
                if !cmp_applied[i] {
                    needed.extend(literal_vars(literal));
                }
            }
            needed
        };

        let mut cur: Option<(NodeId, Schema)> = None;
        // Schemas feeding the most recent join, while `cur` still is that
        // join; used to fuse the head projection into its output selection.
        let mut last_join_inputs: Option<(Schema, Schema)> = None;

        // Apply every comparison whose operands are all bound by `cur`,
        // batching them into a single select.
        let apply_ready_cmps = |builder: &mut Builder<'a>,
                                cur: &mut Option<(NodeId, Schema)>,
                                cmp_applied: &mut [bool],
                                last_join_inputs: &mut Option<(Schema, Schema)>|
         -> Result<(), CompileError> {
            let Some((node, schema)) = cur.as_mut() else {
                return Ok(());
            };
            let mut conds = Vec::new();
            for (i, &literal) in comparisons.iter().enumerate() {
                if cmp_applied[i] {
                    continue;
                }
                let Literal::Cmp { lhs, op, rhs } = literal else {
                    unreachable!("comparisons holds only Cmp literals");
                };
                let operand = |term: &Term| -> Result<Option<Operand>, CompileError> {
                    match term {
                        Term::Var(v) => Ok(schema.col_of(v).map(Operand::Col)),
                        Term::Int(n) => Ok(Some(Operand::Const(Value::Int(*n)))),
                        Term::Str(s) => Ok(Some(Operand::Const(Value::str(s)))),
                        Term::Wildcard => Err(Self::internal(
                            "wildcard in comparison survived validation".to_string(),
                        )),
                    }
                };
                if let (Some(l), Some(r)) = (operand(lhs)?, operand(rhs)?) {
                    conds.push(SelectCond {
                        lhs: l,
                        op: *op,
                        rhs: r,
                    });
                    cmp_applied[i] = true;
                }
            }
            if !conds.is_empty() {
                let stratum = builder.node_stratum[*node];
                *node = builder.select(*node, conds, stratum);
                *last_join_inputs = None;
            }
            Ok(())
        };

        for (step, &literal) in binding.iter().enumerate() {
            let source = self.binding_source(literal, stratum)?;
            match cur.take() {
                None => {
                    cur = Some(source);
                    last_join_inputs = None;
                }
                Some(left) => {
                    let needed = needed_after(step + 1, 0, &cmp_applied);
                    let inputs = (left.1.clone(), source.1.clone());
                    cur = Some(self.join(left, source, &needed, stratum));
                    last_join_inputs = Some(inputs);
                }
            }
            apply_ready_cmps(self, &mut cur, &mut cmp_applied, &mut last_join_inputs)?;
        }

        for (post_index, &literal) in post.iter().enumerate() {
            match literal {
                Literal::Neg(atom) => {
                    let (left_node, left_schema) = cur
                        .take()
                        .ok_or_else(|| Self::internal("negation with no bound pipeline"))?;
                    let base = self.relation_node(&atom.predicate)?;
                    let right = self.select(base, term_conditions(&atom.args), stratum);
                    let mut left_keys = Vec::new();
                    let mut right_keys = Vec::new();
                    let mut seen = BTreeSet::new();
                    for (col, term) in atom.args.iter().enumerate() {
                        if let Term::Var(v) = term {
                            if !seen.insert(v.as_str()) {
                                continue;
                            }
                            let left_col = left_schema.col_of(v).ok_or_else(|| {
                                Self::internal(format!(
                                    "negated variable `{v}` is not bound by the pipeline"
                                ))
                            })?;
                            left_keys.push(left_col);
                            right_keys.push(col);
                        }
                    }
                    let arity = left_schema.len();
                    let id = self.add(
                        RaOp::Antijoin {
                            left: left_node,
                            right,
                            left_keys,
                            right_keys,
                        },
                        arity,
                        stratum,
                    );
                    cur = Some((id, left_schema));
                    last_join_inputs = None;
                }
                Literal::Agg {
                    result,
                    func,
                    value,
                    order,
                    atom,
                } => {
                    let base = self.relation_node(&atom.predicate)?;
                    let source = self.select(base, term_conditions(&atom.args), stratum);
                    let atom_schema = Schema::of_atom(atom);
                    let bound: BTreeSet<&str> = match &cur {
                        Some((_, schema)) => schema.var_set(),
                        None => BTreeSet::new(),
                    };
                    let mut group_cols = Vec::new();
                    let mut group_vars = Vec::new();
                    for (col, var) in atom_schema.first_occurrences() {
                        if bound.contains(var) {
                            group_cols.push(col);
                            group_vars.push(var.to_string());
                        }
                    }
                    let value_col = match value {
                        Some(v) => Some(atom_schema.col_of(v).ok_or_else(|| {
                            Self::internal(format!(
                                "aggregate value variable `{v}` missing from its atom"
                            ))
                        })?),
                        None => None,
                    };
                    let order_col = match order {
                        Some(v) => Some(atom_schema.col_of(v).ok_or_else(|| {
                            Self::internal(format!(
                                "aggregate order variable `{v}` missing from its atom"
                            ))
                        })?),
                        None => None,
                    };
                    let arity = group_cols.len() + 1;
                    let agg_node = self.add(
                        RaOp::Aggregate {
                            input: source,
                            group: group_cols,
                            func: *func,
                            value: value_col,
                            order: order_col,
                        },
                        arity,
                        stratum,
                    );
                    let mut agg_vars = group_vars;
                    agg_vars.push(result.clone());
                    let agg_schema = Schema::of_vars(&agg_vars);
                    match cur.take() {
                        None => {
                            cur = Some((agg_node, agg_schema));
                            last_join_inputs = None;
                        }
                        Some(left) => {
                            let needed = needed_after(binding.len(), post_index + 1, &cmp_applied);
                            let inputs = (left.1.clone(), agg_schema.clone());
                            cur = Some(self.join(left, (agg_node, agg_schema), &needed, stratum));
                            last_join_inputs = Some(inputs);
                        }
                    }
                }
                Literal::Fresh { result, ctor, args } => {
                    let (node, schema) = cur
                        .take()
                        .ok_or_else(|| Self::internal("fresh-id binding with no bound pipeline"))?;
                    let mut arg_cols = Vec::with_capacity(args.len());
                    for v in args {
                        let col = schema.col_of(v).ok_or_else(|| {
                            Self::internal(format!(
                                "fresh-id argument `{v}` is not bound by the pipeline"
                            ))
                        })?;
                        arg_cols.push(col);
                    }
                    let arity = schema.len() + 1;
                    let id = self.add(
                        RaOp::FreshId {
                            input: node,
                            ctor: ctor.clone(),
                            args: arg_cols,
                        },
                        arity,
                        stratum,
                    );
                    let mut vars: Vec<String> = schema
                        .cols
                        .iter()
                        .map(|c| c.clone().unwrap_or_default())
                        .collect();
                    vars.push(result.clone());
                    cur = Some((id, Schema::of_vars(&vars)));
                    last_join_inputs = None;
                }
                other => {
                    return Err(Self::internal(format!(
                        "unexpected post-join literal {other:?}"
                    )))
                }
            }
            apply_ready_cmps(self, &mut cur, &mut cmp_applied, &mut last_join_inputs)?;
        }

        if let Some(unapplied) = cmp_applied.iter().position(|a| !a) {
            return Err(Self::internal(format!(
                "comparison {:?} never became applicable",
                comparisons[unapplied]
            )));
        }

        let (final_node, final_schema) = cur
            .ok_or_else(|| Self::internal("rule compiled to an empty pipeline"))?;

        let head_is_vars = head.args.iter().all(|t| matches!(t, Term::Var(_)));
        let finished = if head_is_vars && last_join_inputs.is_some() {
            // The pipeline ends in a join whose output selection we control:
            // rewrite it to produce the head columns directly.
            let (left_schema, right_schema) = last_join_inputs.unwrap();
            let mut output = Vec::with_capacity(head.args.len());
            for term in &head.args {
                let Term::Var(v) = term else { unreachable!() };
                if let Some(col) = left_schema.col_of(v) {
                    output.push((Side::Left, col));
                } else if let Some(col) = right_schema.col_of(v) {
                    output.push((Side::Right, col));
                } else {
                    return Err(Self::internal(format!(
                        "head variable `{v}` is not available in the final join"
                    )));
                }
            }
            let arity = output.len();
            match &mut self.nodes[final_node].op {
                RaOp::Join {
                    output: join_output,
                    ..
                } => {
                    *join_output = output;
                    self.nodes[final_node].arity = arity;
                }
                other => {
                    return Err(Self::internal(format!(
                        "final node expected to be a join, found {other:?}"
                    )))
                }
            }
            final_node
        } else if head_is_vars
            && final_schema.len() == head.args.len()
            && head.args.iter().enumerate().all(|(i, t)| {
                matches!(t, Term::Var(v) if final_schema.cols[i].as_deref() == Some(v.as_str()))
            })
        {
            // The pipeline already produces exactly the head row.
            final_node
        } else {
            let mut cols = Vec::with_capacity(head.args.len());
            for term in &head.args {
                let out = match term {
                    Term::Var(v) => OutCol::Col(final_schema.col_of(v).ok_or_else(|| {
                        Self::internal(format!("head variable `{v}` is not bound"))
                    })?),
                    Term::Int(n) => OutCol::Const(Value::Int(*n)),
                    Term::Str(s) => OutCol::Const(Value::str(s)),
                    Term::Wildcard => {
                        return Err(Self::internal(
                            "wildcard head argument survived validation".to_string(),
                        ))
                    }
                };
                cols.push(out);
            }
            let arity = cols.len();
            self.add(
                RaOp::Project {
                    input: final_node,
                    cols,
                },
                arity,
                stratum,
            )
        };

        if self.nodes[finished].arity != self.nodes[sink].arity {
            return Err(Self::internal(format!(
                "rule for `{}` produces arity {}, sink expects {}",
                head.predicate, self.nodes[finished].arity, self.nodes[sink].arity
            )));
        }
        match &mut self.nodes[sink].op {
            RaOp::Union { inputs, .. } => inputs.push(finished),
            other => {
                return Err(Self::internal(format!(
                    "sink for `{}` is not a union: {other:?}",
                    head.predicate
                )))
            }
        }
        Ok(())
    }

    /// Group the nodes of each stratum, topologically ordered with edges
    /// out of same-stratum sinks ignored (those are the back edges of
    /// recursive strata). Ties break toward the smallest node id.
    fn build_strata(&self) -> Result<Vec<RecursionGroup>, CompileError> {
        let recursive = self.report.recursive_strata(self.program);
        let mut groups = Vec::with_capacity(self.report.strata.len());
        let sink_ids: BTreeSet<NodeId> = self.sinks.values().copied().collect();

        for (index, members) in self.report.strata.iter().enumerate() {
            let in_stratum: Vec<NodeId> = (0..self.nodes.len())
                .filter(|&n| self.node_stratum[n] == index)
                .collect();
            let node_set: BTreeSet<NodeId> = in_stratum.iter().copied().collect();

            let mut indegree: BTreeMap<NodeId, usize> =
                in_stratum.iter().map(|&n| (n, 0)).collect();
            let mut successors: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
            for &n in &in_stratum {
                for input in self.nodes[n].op.inputs() {
                    if node_set.contains(&input) && !sink_ids.contains(&input) {
                        successors.entry(input).or_default().push(n);
                        *indegree.get_mut(&n).expect("node in stratum") += 1;
                    }
                }
            }

            let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
                .iter()
                .filter(|(_, &d)| d == 0)
                .map(|(&n, _)| Reverse(n))
                .collect();
            let mut order = Vec::with_capacity(in_stratum.len());
            while let Some(Reverse(n)) = ready.pop() {
                order.push(n);
                if let Some(next) = successors.get(&n) {
                    for &m in next {
                        let d = indegree.get_mut(&m).expect("node in stratum");
                        *d -= 1;
                        if *d == 0 {
                            ready.push(Reverse(m));
                        }
                    }
                }
            }
            if order.len() != in_stratum.len() {
                return Err(Self::internal(format!(
                    "stratum {index} contains a cycle not broken by its sinks"
                )));
            }

            let entry_nodes = order
                .iter()
                .copied()
                .filter(|&n| {
                    self.nodes[n]
                        .op
                        .inputs()
                        .iter()
                        .all(|input| !node_set.contains(input))
                })
                .collect();
            let exit_nodes = members
                .iter()
                .filter_map(|p| self.sinks.get(p).copied())
                .collect();

            groups.push(RecursionGroup {
                members: members.clone(),
                recursive: recursive[index],
                nodes: order,
                entry_nodes,
                exit_nodes,
            });
        }
        Ok(groups)
    }
}

/// Lower a validated program to a relational-algebra plan.
///
/// `estimates` steers the greedy join ordering; `builtins` supplies the
/// output arities of built-in calls. Fails if `report` carries
/// stratification errors.
pub fn compile(
    program: &Program,
    report: &StratificationReport,
    estimates: &CardinalityEstimates,
    builtins: &BuiltinRegistry,
) -> Result<RaPlan, CompileError> {
    if !report.is_ok() {
        return Err(CompileError::Unstratified(
            report.errors.iter().map(|e| e.message.clone()).collect(),
        ));
    }

    let mut builder = Builder {
        program,
        report,
        estimates,
        builtins,
        nodes: Vec::new(),
        node_stratum: Vec::new(),
        scans: BTreeMap::new(),
        sinks: BTreeMap::new(),
    };

    // One union sink per IDB predicate, created before any rule so that
    // recursive bodies can reference it. Creation order follows the strata,
    // members alphabetically within each stratum.
    for (index, members) in report.strata.iter().enumerate() {
        for predicate in members {
            if program.is_edb(predicate) {
                continue;
            }
            let arity = program
                .predicate_types(predicate)
                .ok_or_else(|| Builder::internal(format!("no declaration for `{predicate}`")))?
                .len();
            let sink = builder.add(
                RaOp::Union {
                    predicate: predicate.clone(),
                    inputs: Vec::new(),
                },
                arity,
                index,
            );
            builder.sinks.insert(predicate.clone(), sink);
        }
    }

    for (rule_index, rule) in program.rules.iter().enumerate() {
        builder.compile_rule(rule_index, rule)?;
    }

    let strata = builder.build_strata()?;
    Ok(RaPlan {
        nodes: builder.nodes,
        sinks: builder.sinks,
        strata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_program, stratify};

    fn plan_for(source: &str) -> RaPlan {
        let program = parse_program(source).expect("program parses");
        let report = stratify(&program);
        compile(
            &program,
            &report,
            &CardinalityEstimates::default(),
            &BuiltinRegistry::default(),
        )
        .expect("program compiles")
    }

    const TC: &str = "\
        edge(id, id).\n\
        path(x, y) :- edge(x, y).\n\
        path(x, z) :- edge(x, y), path(y, z).\n";

    #[test]
    fn transitive_closure_plan_shape() {
        let plan = plan_for(TC);
        // The whole plan is one union, one scan, and one join: the
        // single-atom rule feeds the scan straight into the sink, and the
        // recursive rule's head projection is fused into the join's output
        // selection.
        assert_eq!(plan.nodes.len(), 3);
        let sink = plan.sinks["path"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        assert_eq!(inputs.len(), 2);

        let scan = inputs[0];
        assert!(matches!(
            &plan.node(scan).op,
            RaOp::Scan { relation } if relation == "edge"
        ));

        // edge and path tie on estimates, so `edge` wins alphabetically and
        // becomes the left side: edge(x, y) ⋈ path(y, z) on y, producing
        // (x, z) = (left 0, right 1).
        let join = inputs[1];
        let RaOp::Join {
            left,
            right,
            left_keys,
            right_keys,
            output,
        } = &plan.node(join).op
        else {
            panic!("recursive rule must compile to a join");
        };
        assert_eq!(*left, scan);
        assert_eq!(*right, sink);
        assert_eq!((left_keys.as_slice(), right_keys.as_slice()), (&[1][..], &[0][..]));
        assert_eq!(output, &[(Side::Left, 0), (Side::Right, 1)]);
    }

    #[test]
    fn transitive_closure_groups() {
        let plan = plan_for(TC);
        assert_eq!(plan.strata.len(), 2);
        let edge_group = &plan.strata[0];
        assert!(!edge_group.recursive);
        assert_eq!(
            edge_group.members.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            ["edge"]
        );

        let path_group = &plan.strata[1];
        assert!(path_group.recursive);
        assert_eq!(
            path_group.members.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            ["path"]
        );
        assert_eq!(path_group.exit_nodes, vec![plan.sinks["path"]]);
        // Within the stratum the join feeds the sink, and the sink's back
        // edge into the join is ignored, so the join orders first.
        assert_eq!(path_group.nodes, vec![2, plan.sinks["path"]]);
    }

    #[test]
    fn constants_and_repeats_become_selects() {
        let plan = plan_for(
            "\
            e(id, id, int).\n\
            self_tagged(x) :- e(x, x, 7).\n",
        );
        let sink = plan.sinks["self_tagged"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        let RaOp::Project { input, cols } = &plan.node(inputs[0]).op else {
            panic!("head narrows three columns to one, needs a projection");
        };
        assert_eq!(cols, &[OutCol::Col(0)]);
        let RaOp::Select { conds, .. } = &plan.node(*input).op else {
            panic!("constants and the repeated variable require a select");
        };
        assert_eq!(
            conds.as_slice(),
            [
                SelectCond {
                    lhs: Operand::Col(0),
                    op: CmpOp::Eq,
                    rhs: Operand::Col(1),
                },
                SelectCond {
                    lhs: Operand::Col(2),
                    op: CmpOp::Eq,
                    rhs: Operand::Const(Value::Int(7)),
                },
            ]
        );
    }

    #[test]
    fn negation_compiles_to_antijoin() {
        let plan = plan_for(
            "\
            node(id).\n\
            link(id, id).\n\
            isolated(x) :- node(x), not link(x, _).\n",
        );
        let sink = plan.sinks["isolated"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        // node(x) already matches the head, so no projection follows.
        let RaOp::Antijoin {
            left,
            right,
            left_keys,
            right_keys,
        } = &plan.node(inputs[0]).op
        else {
            panic!("negation must become an antijoin, got {:?}", plan.node(inputs[0]).op);
        };
        assert!(matches!(
            &plan.node(*left).op,
            RaOp::Scan { relation } if relation == "node"
        ));
        assert!(matches!(
            &plan.node(*right).op,
            RaOp::Scan { relation } if relation == "link"
        ));
        // Only the named variable joins; the wildcard column is free.
        assert_eq!((left_keys.as_slice(), right_keys.as_slice()), (&[0][..], &[0][..]));
    }

    #[test]
    fn comparisons_apply_at_the_earliest_join() {
        let plan = plan_for(
            "\
            a(id, int).\n\
            b(id, int).\n\
            c(id, int).\n\
            out(x) :- a(x, u), b(x, v), c(x, w), u < v.\n",
        );
        // u < v involves only a and b, so the select must sit between the
        // first join (a ⋈ b) and the second (⋈ c).
        let sink = plan.sinks["out"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        let RaOp::Join { left, .. } = &plan.node(inputs[0]).op else {
            panic!("rule of three atoms ends in a join");
        };
        let RaOp::Select { input, conds } = &plan.node(*left).op else {
            panic!("comparison must be applied before the final join");
        };
        assert_eq!(conds.len(), 1);
        assert_eq!(conds[0].op, CmpOp::Lt);
        assert!(matches!(&plan.node(*input).op, RaOp::Join { .. }));
    }

    #[test]
    fn aggregate_joins_back_on_group_variables() {
        let plan = plan_for(
            "\
            node(id).\n\
            edge(id, id).\n\
            fanout(x, n) :- node(x), n = count { edge(x, _) }.\n",
        );
        let sink = plan.sinks["fanout"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        let RaOp::Join {
            right, output: join_output, ..
        } = &plan.node(inputs[0]).op
        else {
            panic!("grouped aggregate joins back to the bound pipeline");
        };
        let RaOp::Aggregate { group, value, order, .. } = &plan.node(*right).op else {
            panic!("aggregate node expected on the right of the join");
        };
        assert_eq!(group.as_slice(), &[0]);
        assert_eq!((*value, *order), (None, None));
        // Head (x, n): x from the left pipeline, n from the aggregate.
        assert_eq!(join_output, &[(Side::Left, 0), (Side::Right, 1)]);
    }

    #[test]
    fn global_aggregate_stands_alone() {
        let plan = plan_for(
            "\
            item(id, int).\n\
            total(n) :- n = sum v { item(_, v) }.\n",
        );
        let sink = plan.sinks["total"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        // No bound variables: the aggregate output (just `n`) is the rule.
        let RaOp::Aggregate { group, value, .. } = &plan.node(inputs[0]).op else {
            panic!("global aggregate feeds the sink directly");
        };
        assert!(group.is_empty());
        assert_eq!(*value, Some(1));
    }

    #[test]
    fn fresh_id_appends_a_column() {
        let plan = plan_for(
            "\
            obj(id).\n\
            wrapped(x, w) :- obj(x), w = new wrap(x).\n",
        );
        let sink = plan.sinks["wrapped"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        // obj(x) + fresh column = (x, w), which is exactly the head.
        let RaOp::FreshId { input, ctor, args } = &plan.node(inputs[0]).op else {
            panic!("fresh-id binding compiles to a fresh-id node");
        };
        assert_eq!(ctor, "wrap");
        assert_eq!(args.as_slice(), &[0]);
        assert!(matches!(&plan.node(*input).op, RaOp::Scan { .. }));
        assert_eq!(plan.node(inputs[0]).arity, 2);
    }

    #[test]
    fn builtin_call_reads_relation_nodes() {
        let plan = plan_for(
            "\
            edge(id, id, int).\n\
            dist(x, y, d) :- @shortest_path(edge; x, y, d).\n",
        );
        let sink = plan.sinks["dist"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        let RaOp::Builtin { name, inputs: bin } = &plan.node(inputs[0]).op else {
            panic!("built-in call compiles to a builtin node");
        };
        assert_eq!(name, "shortest_path");
        assert_eq!(bin.len(), 1);
        assert!(matches!(
            &plan.node(bin[0]).op,
            RaOp::Scan { relation } if relation == "edge"
        ));
    }

    #[test]
    fn unstratifiable_program_is_rejected() {
        let program = parse_program(
            "\
            p(id).\n\
            win(x) :- p(x), not lose(x).\n\
            lose(x) :- p(x), not win(x).\n",
        )
        .expect("parses");
        let report = stratify(&program);
        let err = compile(
            &program,
            &report,
            &CardinalityEstimates::default(),
            &BuiltinRegistry::default(),
        )
        .expect_err("unstratifiable");
        assert!(matches!(err, CompileError::Unstratified(_)));
    }

    #[test]
    fn join_order_follows_estimates() {
        let program = parse_program(
            "\
            big(id, id).\n\
            small(id, id).\n\
            out(x, y) :- big(x, y), small(y, x).\n",
        )
        .expect("parses");
        let report = stratify(&program);
        let mut estimates = CardinalityEstimates::default();
        estimates.set("big", 100_000);
        estimates.set("small", 10);
        let plan = compile(&program, &report, &estimates, &BuiltinRegistry::default())
            .expect("compiles");
        let sink = plan.sinks["out"];
        let RaOp::Union { inputs, .. } = &plan.node(sink).op else {
            panic!("sink must be a union");
        };
        let RaOp::Join { left, right, .. } = &plan.node(inputs[0]).op else {
            panic!("two-atom rule compiles to a join");
        };
        assert!(matches!(
            &plan.node(*left).op,
            RaOp::Scan { relation } if relation == "small"
        ));
        assert!(matches!(
            &plan.node(*right).op,
            RaOp::Scan { relation } if relation == "big"
        ));
    }
}
