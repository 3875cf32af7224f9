//! Plan-level constant folding.
//!
//! Three simplifications, applied in one forward pass plus cleanup:
//!
//! 1. **Static selects.** Conditions between two constants, or between a
//!    column and itself, are decided at compile time: satisfied conditions
//!    disappear, unsatisfiable ones turn the node into [`RaOp::Empty`], and
//!    a select left with no conditions becomes an alias for its input.
//! 2. **Emptiness propagation.** Joins, projections, aggregations, and
//!    fresh-id nodes over an empty input are themselves empty (an aggregate
//!    over no rows binds nothing in this dialect); an antijoin against an
//!    empty right side passes its left input through unchanged. Union sinks
//!    drop empty inputs but always survive, even with none left — they are
//!    the outputs of the plan. Built-in calls are never folded, since their
//!    behaviour on empty inputs is theirs to define.
//! 3. **Dead node removal.** Nodes no longer reachable from any sink are
//!    dropped and the survivors renumbered densely, preserving the relative
//!    order (and therefore the topological order) of what remains.

use std::collections::{BTreeMap, BTreeSet};

use crate::lang::CmpOp;

use super::plan::{NodeId, Operand, RaNode, RaOp, RaPlan, RecursionGroup, SelectCond};

/// The folded form of one original node.
enum Folded {
    /// Keep the node, with its (possibly rewritten) operator.
    Keep(RaOp),
    /// The node is redundant; every reference should point here instead.
    Alias(NodeId),
}

/// Follow alias links to the surviving node.
fn resolve(folded: &[Folded], mut id: NodeId) -> NodeId {
    while let Folded::Alias(target) = folded[id] {
        id = target;
    }
    id
}

fn is_empty(folded: &[Folded], id: NodeId) -> bool {
    matches!(folded[resolve(folded, id)], Folded::Keep(RaOp::Empty))
}

/// Decide a condition at compile time if possible.
fn eval_static(cond: &SelectCond) -> Option<bool> {
    match (&cond.lhs, &cond.rhs) {
        (Operand::Const(a), Operand::Const(b)) => Some(match cond.op {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
        }),
        (Operand::Col(i), Operand::Col(j)) if i == j => Some(match cond.op {
            CmpOp::Eq | CmpOp::Le => true,
            CmpOp::Ne | CmpOp::Lt => false,
        }),
        _ => None,
    }
}

/// Rewrite the node references inside an operator.
fn remap_inputs(op: &RaOp, f: impl Fn(NodeId) -> NodeId) -> RaOp {
    let mut op = op.clone();
    match &mut op {
        RaOp::Scan { .. } | RaOp::Empty => {}
        RaOp::Select { input, .. }
        | RaOp::Project { input, .. }
        | RaOp::Aggregate { input, .. }
        | RaOp::FreshId { input, .. } => *input = f(*input),
        RaOp::Join { left, right, .. } | RaOp::Antijoin { left, right, .. } => {
            *left = f(*left);
            *right = f(*right);
        }
        RaOp::Union { inputs, .. } | RaOp::Builtin { inputs, .. } => {
            for input in inputs {
                *input = f(*input);
            }
        }
    }
    op
}

/// Constant-fold a plan. The result computes the same relations for every
/// database; it only ever has fewer nodes and weaker select conditions.
pub fn constant_fold(plan: &RaPlan) -> RaPlan {
    let n = plan.nodes.len();

    // Forward pass. Every operator except Union references only
    // lower-numbered nodes (sinks are created before the rules that feed
    // them), so inputs are already folded when we reach their consumer.
    // Union inputs are rewritten afterwards.
    let mut folded: Vec<Folded> = Vec::with_capacity(n);
    for node in &plan.nodes {
        let entry = match &node.op {
            RaOp::Scan { .. } | RaOp::Empty | RaOp::Union { .. } => Folded::Keep(node.op.clone()),
            RaOp::Builtin { .. } => {
                Folded::Keep(remap_inputs(&node.op, |i| resolve(&folded, i)))
            }
            RaOp::Select { input, conds } => {
                let input = resolve(&folded, *input);
                if is_empty(&folded, input) {
                    Folded::Keep(RaOp::Empty)
                } else {
                    let mut kept = Vec::new();
                    let mut unsatisfiable = false;
                    for cond in conds {
                        match eval_static(cond) {
                            Some(true) => {}
                            Some(false) => {
                                unsatisfiable = true;
                                break;
                            }
                            None => kept.push(cond.clone()),
                        }
                    }
                    if unsatisfiable {
                        Folded::Keep(RaOp::Empty)
                    } else if kept.is_empty() {
                        Folded::Alias(input)
                    } else {
                        Folded::Keep(RaOp::Select { input, conds: kept })
                    }
                }
            }
            RaOp::Join { left, right, .. } => {
                let (l, r) = (resolve(&folded, *left), resolve(&folded, *right));
                if is_empty(&folded, l) || is_empty(&folded, r) {
                    Folded::Keep(RaOp::Empty)
                } else {
                    Folded::Keep(remap_inputs(&node.op, |i| resolve(&folded, i)))
                }
            }
            RaOp::Antijoin { left, right, .. } => {
                let (l, r) = (resolve(&folded, *left), resolve(&folded, *right));
                if is_empty(&folded, l) {
                    Folded::Keep(RaOp::Empty)
                } else if is_empty(&folded, r) {
                    Folded::Alias(l)
                } else {
                    Folded::Keep(remap_inputs(&node.op, |i| resolve(&folded, i)))
                }
            }
            RaOp::Project { input, .. }
            | RaOp::Aggregate { input, .. }
            | RaOp::FreshId { input, .. } => {
                let input = resolve(&folded, *input);
                if is_empty(&folded, input) {
                    Folded::Keep(RaOp::Empty)
                } else {
                    Folded::Keep(remap_inputs(&node.op, |i| resolve(&folded, i)))
                }
            }
        };
        folded.push(entry);
    }

    // Union inputs can have higher ids than the union; rewrite them now
    // that every node is folded. Dropping a duplicate input is sound for a
    // set-semantics union.
    let mut union_rewrites: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
    for (id, node) in plan.nodes.iter().enumerate() {
        if let RaOp::Union { inputs, .. } = &node.op {
            let mut rewritten = Vec::with_capacity(inputs.len());
            for &input in inputs {
                let r = resolve(&folded, input);
                if !is_empty(&folded, r) && !rewritten.contains(&r) {
                    rewritten.push(r);
                }
            }
            union_rewrites.push((id, rewritten));
        }
    }
    for (id, inputs) in union_rewrites {
        let Folded::Keep(RaOp::Union { inputs: slot, .. }) = &mut folded[id] else {
            unreachable!("unions are never aliased or emptied");
        };
        *slot = inputs;
    }

    // Reachability from the sinks — the plan's outputs — over the folded
    // operators.
    let mut reachable = BTreeSet::new();
    let mut frontier: Vec<NodeId> = plan.sinks.values().copied().collect();
    while let Some(id) = frontier.pop() {
        if !reachable.insert(id) {
            continue;
        }
        if let Folded::Keep(op) = &folded[id] {
            frontier.extend(op.inputs());
        }
    }

    // Dense renumbering of the survivors, in original order.
    let compact: BTreeMap<NodeId, NodeId> = reachable
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();

    let mut nodes = Vec::with_capacity(compact.len());
    for (&old, &new) in &compact {
        let Folded::Keep(op) = &folded[old] else {
            unreachable!("aliases are never referenced after resolution");
        };
        let op = remap_inputs(op, |i| compact[&i]);
        nodes.push(RaNode {
            id: new,
            op,
            arity: plan.nodes[old].arity,
        });
    }

    let sinks: BTreeMap<String, NodeId> = plan
        .sinks
        .iter()
        .map(|(predicate, &id)| (predicate.clone(), compact[&id]))
        .collect();

    let strata = plan
        .strata
        .iter()
        .map(|group| {
            let kept: Vec<NodeId> = group
                .nodes
                .iter()
                .filter_map(|id| compact.get(id).copied())
                .collect();
            let node_set: BTreeSet<NodeId> = kept.iter().copied().collect();
            let entry_nodes = kept
                .iter()
                .copied()
                .filter(|&id| {
                    nodes[id]
                        .op
                        .inputs()
                        .iter()
                        .all(|input| !node_set.contains(input))
                })
                .collect();
            let exit_nodes = group
                .exit_nodes
                .iter()
                .filter_map(|id| compact.get(id).copied())
                .collect();
            RecursionGroup {
                members: group.members.clone(),
                recursive: group.recursive,
                nodes: kept,
                entry_nodes,
                exit_nodes,
            }
        })
        .collect();

    RaPlan { nodes, sinks, strata }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::BuiltinRegistry;
    use crate::lang::{parse_program, stratify};
    use crate::ra::compile::compile;
    use crate::ra::order::CardinalityEstimates;
    use crate::ra::plan::OutCol;

    fn folded_plan(source: &str) -> (RaPlan, RaPlan) {
        let program = parse_program(source).expect("program parses");
        let report = stratify(&program);
        let plan = compile(
            &program,
            &report,
            &CardinalityEstimates::default(),
            &BuiltinRegistry::default(),
        )
        .expect("program compiles");
        let folded = constant_fold(&plan);
        (plan, folded)
    }

    #[test]
    fn plans_without_constants_are_untouched() {
        let (plan, folded) = folded_plan(
            "\
            edge(id, id).\n\
            path(x, y) :- edge(x, y).\n\
            path(x, z) :- edge(x, y), path(y, z).\n",
        );
        assert_eq!(plan, folded);
    }

    #[test]
    fn impossible_comparison_turns_the_rule_off() {
        let (_, folded) = folded_plan(
            "\
            a(int).\n\
            out(v) :- a(v), v < v.\n",
        );
        // The select v < v can never hold, so the rule vanishes: its scan is
        // unreachable and the sink is an empty union.
        assert_eq!(folded.nodes.len(), 1);
        let sink = folded.sinks["out"];
        let RaOp::Union { inputs, .. } = &folded.node(sink).op else {
            panic!("sink must survive as a union");
        };
        assert!(inputs.is_empty());
    }

    #[test]
    fn tautological_comparison_is_erased() {
        let (_, folded) = folded_plan(
            "\
            a(int).\n\
            out(v) :- a(v), 1 < 2, v <= v.\n",
        );
        // Both conditions hold statically, the select aliases away, and the
        // scan feeds the union directly.
        assert_eq!(folded.nodes.len(), 2);
        let sink = folded.sinks["out"];
        let RaOp::Union { inputs, .. } = &folded.node(sink).op else {
            panic!("sink must be a union");
        };
        assert_eq!(inputs.len(), 1);
        assert!(matches!(
            &folded.node(inputs[0]).op,
            RaOp::Scan { relation } if relation == "a"
        ));
    }

    #[test]
    fn false_constant_guard_empties_downstream_joins() {
        let (_, folded) = folded_plan(
            "\
            a(id).\n\
            b(id).\n\
            out(x) :- a(x), b(x), 1 = 2.\n\
            keep(x) :- a(x).\n",
        );
        // `out` loses its only rule; `keep` still reads the scan of `a`.
        let out = folded.sinks["out"];
        let RaOp::Union { inputs, .. } = &folded.node(out).op else {
            panic!("sink must be a union");
        };
        assert!(inputs.is_empty());
        let keep = folded.sinks["keep"];
        let RaOp::Union { inputs, .. } = &folded.node(keep).op else {
            panic!("sink must be a union");
        };
        assert_eq!(inputs.len(), 1);
        // The scan of `b` served only the dead rule and is gone.
        assert!(folded
            .nodes
            .iter()
            .all(|n| !matches!(&n.op, RaOp::Scan { relation } if relation == "b")));
    }

    #[test]
    fn antijoin_against_statically_empty_right_passes_left_through() {
        // Hand-built: compiled plans only produce equality selects on atom
        // columns, so an empty right side arises there only via emptied
        // subplans; the rewrite itself is easiest to pin down directly.
        let plan = RaPlan {
            nodes: vec![
                RaNode {
                    id: 0,
                    op: RaOp::Scan { relation: "a".into() },
                    arity: 1,
                },
                RaNode { id: 1, op: RaOp::Empty, arity: 1 },
                RaNode {
                    id: 2,
                    op: RaOp::Antijoin {
                        left: 0,
                        right: 1,
                        left_keys: vec![0],
                        right_keys: vec![0],
                    },
                    arity: 1,
                },
                RaNode {
                    id: 3,
                    op: RaOp::Union { predicate: "out".into(), inputs: vec![2] },
                    arity: 1,
                },
            ],
            sinks: BTreeMap::from([("out".to_string(), 3)]),
            strata: vec![RecursionGroup {
                members: BTreeSet::from(["a".to_string(), "out".to_string()]),
                recursive: false,
                nodes: vec![0, 1, 2, 3],
                entry_nodes: vec![0, 1],
                exit_nodes: vec![3],
            }],
        };
        let folded = constant_fold(&plan);
        assert_eq!(folded.nodes.len(), 2);
        let sink = folded.sinks["out"];
        let RaOp::Union { inputs, .. } = &folded.node(sink).op else {
            panic!("sink must be a union");
        };
        assert!(matches!(
            &folded.node(inputs[0]).op,
            RaOp::Scan { relation } if relation == "a"
        ));
    }

    #[test]
    fn renumbering_rewires_consumers_of_folded_nodes() {
        // `1 <= 1` is applicable right after the first scan, so it compiles
        // to a select between the scan of `a` and the join. Folding removes
        // that select, and the join must end up reading the scan directly.
        let (plan, folded) = folded_plan(
            "\
            a(id, int).\n\
            b(id, int).\n\
            out(x) :- a(x, u), b(x, v), u < v, 1 <= 1.\n",
        );
        assert_eq!(plan.nodes.len(), folded.nodes.len() + 1);
        let sink = folded.sinks["out"];
        let RaOp::Union { inputs, .. } = &folded.node(sink).op else {
            panic!("sink must be a union");
        };
        let RaOp::Project { input, cols } = &folded.node(inputs[0]).op else {
            panic!("head keeps one of three columns, got {:?}", folded.node(inputs[0]).op);
        };
        assert_eq!(cols, &[OutCol::Col(0)]);
        let RaOp::Select { input, conds } = &folded.node(*input).op else {
            panic!("the real comparison must survive");
        };
        assert_eq!(conds.len(), 1);
        assert_eq!(conds[0].op, CmpOp::Lt);
        let RaOp::Join { left, .. } = &folded.node(*input).op else {
            panic!("select reads the join");
        };
        assert!(
            matches!(&folded.node(*left).op, RaOp::Scan { relation } if relation == "a"),
            "the join must read the scan once its select folds away"
        );
    }
}
