//! Relational-algebra plans: the compiled form of a program.
//!
//! A plan is a DAG of operator nodes — the only cycles are back edges from a
//! recursive predicate's sink to joins inside the same recursion group.
//! Every derived predicate owns exactly one [`RaOp::Union`] sink; everything
//! else reads predicates through those sinks (or through [`RaOp::Scan`] for
//! stored relations).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::lang::ast::{AggFunc, CmpOp};
use crate::value::Value;

pub type NodeId = usize;

/// Which input of a binary node a column comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

/// One operand of a selection predicate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Col(usize),
    Const(Value),
}

/// A conjunct of a selection: `lhs op rhs` over one tuple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectCond {
    pub lhs: Operand,
    pub op: CmpOp,
    pub rhs: Operand,
}

impl SelectCond {
    /// Evaluates the condition on a tuple.
    pub fn holds(&self, tuple: &[Value]) -> bool {
        let get = |o: &Operand| match o {
            Operand::Col(c) => tuple[*c].clone(),
            Operand::Const(v) => v.clone(),
        };
        let (l, r) = (get(&self.lhs), get(&self.rhs));
        match self.op {
            CmpOp::Eq => l == r,
            CmpOp::Ne => l != r,
            CmpOp::Lt => l < r,
            CmpOp::Le => l <= r,
        }
    }
}

/// An output column of a projection: taken from the input or constant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OutCol {
    Col(usize),
    Const(Value),
}

/// The operator of a plan node.
///
/// Output arities: `Scan`/`Union` have the arity of their relation;
/// `Select` preserves its input; `Project` has `cols.len()`; `Join` has
/// `output.len()`; `Antijoin` preserves its left input; `Aggregate` has
/// `group.len() + 1`; `FreshId` appends one id column; `Builtin` has the
/// arity of the built-in's output signature; `Empty` is declared on the
/// node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RaOp {
    /// Stored relation contents (EDB).
    Scan { relation: String },
    /// Tuples of `input` satisfying every condition.
    Select { input: NodeId, conds: Vec<SelectCond> },
    /// Column selection/reordering, possibly introducing constants.
    Project { input: NodeId, cols: Vec<OutCol> },
    /// Equi-join on `left_keys` = `right_keys`; `output` fuses the
    /// projection, naming which columns of which side survive.
    Join {
        left: NodeId,
        right: NodeId,
        left_keys: Vec<usize>,
        right_keys: Vec<usize>,
        output: Vec<(Side, usize)>,
    },
    /// Left tuples whose key has no match in the right input.
    Antijoin { left: NodeId, right: NodeId, left_keys: Vec<usize>, right_keys: Vec<usize> },
    /// Set union of same-arity inputs; the unique sink of `predicate`.
    Union { predicate: String, inputs: Vec<NodeId> },
    /// Grouped aggregation over `input`: output = group columns + result.
    Aggregate {
        input: NodeId,
        group: Vec<usize>,
        func: AggFunc,
        value: Option<usize>,
        order: Option<usize>,
    },
    /// Appends the pool id of `(ctor, args)` to each input tuple.
    FreshId { input: NodeId, ctor: String, args: Vec<usize> },
    /// Whole-relation built-in call; inputs are relation nodes.
    Builtin { name: String, inputs: Vec<NodeId> },
    /// The empty relation (result of constant folding).
    Empty,
}

impl RaOp {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            RaOp::Scan { .. } | RaOp::Empty => vec![],
            RaOp::Select { input, .. }
            | RaOp::Project { input, .. }
            | RaOp::Aggregate { input, .. }
            | RaOp::FreshId { input, .. } => vec![*input],
            RaOp::Join { left, right, .. } | RaOp::Antijoin { left, right, .. } => {
                vec![*left, *right]
            }
            RaOp::Union { inputs, .. } | RaOp::Builtin { inputs, .. } => inputs.clone(),
        }
    }
}

/// A plan node: operator plus its output arity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RaNode {
    pub id: NodeId,
    pub op: RaOp,
    pub arity: usize,
}

/// One stratum of the plan: the predicates that must be computed together,
/// and the nodes that compute them, in evaluation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecursionGroup {
    /// Exactly one stratum of the stratification report.
    pub members: BTreeSet<String>,
    /// Whether the members recurse (then the group needs fixpoint
    /// iteration, and deletions need delete–rederive).
    pub recursive: bool,
    /// Every node of this group, topologically ordered ignoring back edges
    /// out of the members' sinks.
    pub nodes: Vec<NodeId>,
    /// Group nodes all of whose inputs lie outside the group (or that have
    /// none): where outside deltas enter.
    pub entry_nodes: Vec<NodeId>,
    /// The sinks of the member predicates that are derived.
    pub exit_nodes: Vec<NodeId>,
}

/// A compiled program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RaPlan {
    pub nodes: Vec<RaNode>,
    /// Derived predicate name → its union sink.
    pub sinks: BTreeMap<String, NodeId>,
    /// Strata in evaluation order.
    pub strata: Vec<RecursionGroup>,
}

impl RaPlan {
    pub fn node(&self, id: NodeId) -> &RaNode {
        &self.nodes[id]
    }

    /// Consumers of each node (the reverse of `inputs`), id-sorted.
    pub fn downstream(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for i in n.op.inputs() {
                out[i].push(n.id);
            }
        }
        for v in &mut out {
            v.dedup();
        }
        out
    }

    /// Deterministic one-node-per-line text form, for golden tests and the
    /// CLI plan dump.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("{:>4}: {}\n", n.id, describe(&n.op, n.arity)));
        }
        for (i, g) in self.strata.iter().enumerate() {
            let members: Vec<&str> = g.members.iter().map(|s| s.as_str()).collect();
            out.push_str(&format!(
                "stratum {i}: {{{}}} {} nodes={:?} entry={:?} exit={:?}\n",
                members.join(", "),
                if g.recursive { "recursive" } else { "straight" },
                g.nodes,
                g.entry_nodes,
                g.exit_nodes,
            ));
        }
        out
    }
}

fn describe(op: &RaOp, arity: usize) -> String {
    fn cols(cs: &[usize]) -> String {
        let parts: Vec<String> = cs.iter().map(|c| format!("c{c}")).collect();
        format!("[{}]", parts.join(","))
    }
    let body = match op {
        RaOp::Scan { relation } => format!("scan {relation}"),
        RaOp::Select { input, conds } => {
            let show = |o: &Operand| match o {
                Operand::Col(c) => format!("c{c}"),
                Operand::Const(v) => v.to_string(),
            };
            let parts: Vec<String> = conds
                .iter()
                .map(|c| format!("{} {} {}", show(&c.lhs), c.op, show(&c.rhs)))
                .collect();
            format!("select {input} where {}", parts.join(" and "))
        }
        RaOp::Project { input, cols } => {
            let parts: Vec<String> = cols
                .iter()
                .map(|c| match c {
                    OutCol::Col(i) => format!("c{i}"),
                    OutCol::Const(v) => v.to_string(),
                })
                .collect();
            format!("project {input} to [{}]", parts.join(","))
        }
        RaOp::Join { left, right, left_keys, right_keys, output } => {
            let parts: Vec<String> = output
                .iter()
                .map(|(s, c)| match s {
                    Side::Left => format!("l{c}"),
                    Side::Right => format!("r{c}"),
                })
                .collect();
            format!(
                "join {left} {right} on {}={} out [{}]",
                cols(left_keys),
                cols(right_keys),
                parts.join(",")
            )
        }
        RaOp::Antijoin { left, right, left_keys, right_keys } => {
            format!("antijoin {left} {right} on {}={}", cols(left_keys), cols(right_keys))
        }
        RaOp::Union { predicate, inputs } => format!("union {predicate} of {inputs:?}"),
        RaOp::Aggregate { input, group, func, value, order } => {
            let mut s = format!("aggregate {input} {func} group {}", cols(group));
            if let Some(v) = value {
                s.push_str(&format!(" value c{v}"));
            }
            if let Some(o) = order {
                s.push_str(&format!(" order c{o}"));
            }
            s
        }
        RaOp::FreshId { input, ctor, args } => {
            format!("fresh-id {input} {ctor}{}", cols(args))
        }
        RaOp::Builtin { name, inputs } => format!("builtin @{name} of {inputs:?}"),
        RaOp::Empty => "empty".to_string(),
    };
    format!("{body} ->{arity}")
}

impl fmt::Display for RaPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}
