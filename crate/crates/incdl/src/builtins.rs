//! Built-in relational operators.
//!
//! A built-in maps whole input relations to an output relation in one call —
//! the opposite of the engine's tuple-at-a-time discipline. Rules reference
//! them as `@name(input_rel, ...; out, ...)`. The engine wraps each call
//! site in a batching node: input deltas are accumulated, the full inputs
//! are reconstructed, the function is evaluated at most once per
//! transaction (after all inputs have stabilized), and the fresh output is
//! diffed against the previous one so only changes propagate downstream.
//!
//! Three built-ins ship with the engine: `@shortest_path`, `@dominators`,
//! and `@concat`. Custom ones can be registered on a [`BuiltinRegistry`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::value::{ColumnType, Relation, Value};

/// Errors surfaced by built-in evaluation.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BuiltinError {
    #[error("@shortest_path: negative weight {weight} on edge #{from} -> #{to}")]
    NegativeWeight { from: u64, to: u64, weight: i64 },
    #[error("@dominators: expected at most one entry node, found {count}")]
    MultipleEntries { count: usize },
    #[error("@{builtin}: {message}")]
    Other { builtin: String, message: String },
}

/// The typed interface of a built-in: what relations it consumes and what it
/// produces. Needed by program validation and plan construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuiltinSignature {
    pub name: String,
    pub input_types: Vec<Vec<ColumnType>>,
    pub output_types: Vec<ColumnType>,
}

/// A runnable built-in: signature plus evaluation function over full input
/// relations.
#[derive(Clone)]
pub struct BuiltinSpec {
    pub signature: BuiltinSignature,
    pub evaluate: Arc<dyn Fn(&[Relation]) -> Result<Relation, BuiltinError> + Send + Sync>,
}

impl std::fmt::Debug for BuiltinSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuiltinSpec").field("signature", &self.signature).finish()
    }
}

/// Named collection of built-ins available to an engine instance.
#[derive(Clone, Debug)]
pub struct BuiltinRegistry {
    specs: BTreeMap<String, BuiltinSpec>,
}

impl Default for BuiltinRegistry {
    /// Registry with the three standard built-ins.
    fn default() -> BuiltinRegistry {
        let mut r = BuiltinRegistry { specs: BTreeMap::new() };
        r.register(shortest_path_spec());
        r.register(dominators_spec());
        r.register(concat_spec());
        r
    }
}

impl BuiltinRegistry {
    pub fn register(&mut self, spec: BuiltinSpec) {
        self.specs.insert(spec.signature.name.clone(), spec);
    }

    pub fn get(&self, name: &str) -> Option<&BuiltinSpec> {
        self.specs.get(name)
    }

    pub fn signatures(&self) -> BTreeMap<String, BuiltinSignature> {
        self.specs.iter().map(|(k, v)| (k.clone(), v.signature.clone())).collect()
    }
}

/// Signatures of the standard built-ins, for program validation without a
/// full registry.
pub fn default_signatures() -> BTreeMap<String, BuiltinSignature> {
    BuiltinRegistry::default().signatures()
}

/// `@shortest_path(edges; src, dst, dist)` — all-pairs shortest distances
/// over a non-negatively weighted edge relation `(from, to, weight)`.
/// Every node appearing in `edges` reaches itself with distance 0. Parallel
/// edges collapse to the cheapest. Negative weights are an error.
pub fn shortest_path_spec() -> BuiltinSpec {
    BuiltinSpec {
        signature: BuiltinSignature {
            name: "shortest_path".into(),
            input_types: vec![vec![ColumnType::Id, ColumnType::Id, ColumnType::Int]],
            output_types: vec![ColumnType::Id, ColumnType::Id, ColumnType::Int],
        },
        evaluate: Arc::new(|inputs| {
            let edges = &inputs[0];
            let mut adj: BTreeMap<u64, Vec<(u64, i64)>> = BTreeMap::new();
            let mut nodes: BTreeSet<u64> = BTreeSet::new();
            for t in edges {
                let (Value::Id(a), Value::Id(b), Value::Int(w)) = (&t[0], &t[1], &t[2]) else {
                    return Err(BuiltinError::Other {
                        builtin: "shortest_path".into(),
                        message: format!("malformed edge tuple {t:?}"),
                    });
                };
                if *w < 0 {
                    return Err(BuiltinError::NegativeWeight { from: *a, to: *b, weight: *w });
                }
                adj.entry(*a).or_default().push((*b, *w));
                nodes.insert(*a);
                nodes.insert(*b);
            }
            let mut out = Relation::new();
            for &src in &nodes {
                // Dijkstra with a sorted frontier; weights are non-negative.
                let mut dist: BTreeMap<u64, i64> = BTreeMap::new();
                let mut heap = std::collections::BinaryHeap::new();
                heap.push(std::cmp::Reverse((0i64, src)));
                while let Some(std::cmp::Reverse((d, n))) = heap.pop() {
                    match dist.get(&n) {
                        Some(&best) if best <= d => continue,
                        _ => {}
                    }
                    dist.insert(n, d);
                    for &(m, w) in adj.get(&n).into_iter().flatten() {
                        if let Some(nd) = d.checked_add(w) {
                            if dist.get(&m).is_none_or(|&best| nd < best) {
                                heap.push(std::cmp::Reverse((nd, m)));
                            }
                        }
                    }
                }
                for (n, d) in dist {
                    out.insert(vec![Value::Id(src), Value::Id(n), Value::Int(d)]);
                }
            }
            Ok(out)
        }),
    }
}

/// `@dominators(cfg_edges, entry; node, idom)` — immediate dominators of the
/// flow graph `cfg_edges: (from, to)` rooted at the single node in `entry`.
/// The entry node itself has no immediate dominator and produces no row;
/// unreachable nodes produce no rows. More than one entry is an error; an
/// empty entry relation yields an empty result.
pub fn dominators_spec() -> BuiltinSpec {
    BuiltinSpec {
        signature: BuiltinSignature {
            name: "dominators".into(),
            input_types: vec![
                vec![ColumnType::Id, ColumnType::Id],
                vec![ColumnType::Id],
            ],
            output_types: vec![ColumnType::Id, ColumnType::Id],
        },
        evaluate: Arc::new(|inputs| {
            let (edges, entry) = (&inputs[0], &inputs[1]);
            if entry.len() > 1 {
                return Err(BuiltinError::MultipleEntries { count: entry.len() });
            }
            let Some(root_tuple) = entry.iter().next() else {
                return Ok(Relation::new());
            };
            let Value::Id(root) = root_tuple[0] else {
                return Err(BuiltinError::Other {
                    builtin: "dominators".into(),
                    message: "entry node must be an id".into(),
                });
            };
            let mut succ: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            let mut pred: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for t in edges {
                let (Value::Id(a), Value::Id(b)) = (&t[0], &t[1]) else {
                    return Err(BuiltinError::Other {
                        builtin: "dominators".into(),
                        message: format!("malformed edge tuple {t:?}"),
                    });
                };
                succ.entry(*a).or_default().push(*b);
                pred.entry(*b).or_default().push(*a);
            }
            // Reverse postorder over reachable nodes.
            let mut order = Vec::new();
            let mut seen = BTreeSet::new();
            let mut stack = vec![(root, 0usize)];
            seen.insert(root);
            while let Some(&mut (n, ref mut i)) = stack.last_mut() {
                let nexts = succ.get(&n).map(|v| v.as_slice()).unwrap_or(&[]);
                if *i < nexts.len() {
                    let m = nexts[*i];
                    *i += 1;
                    if seen.insert(m) {
                        stack.push((m, 0));
                    }
                } else {
                    order.push(n);
                    stack.pop();
                }
            }
            order.reverse();
            let rpo_index: BTreeMap<u64, usize> =
                order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
            // Cooper–Harvey–Kennedy iteration to a fixed point.
            let mut idom: BTreeMap<u64, u64> = BTreeMap::new();
            idom.insert(root, root);
            let intersect = |idom: &BTreeMap<u64, u64>, mut a: u64, mut b: u64| -> u64 {
                while a != b {
                    while rpo_index[&a] > rpo_index[&b] {
                        a = idom[&a];
                    }
                    while rpo_index[&b] > rpo_index[&a] {
                        b = idom[&b];
                    }
                }
                a
            };
            let mut changed = true;
            while changed {
                changed = false;
                for &n in order.iter().skip(1) {
                    let mut new_idom = None;
                    for &p in pred.get(&n).into_iter().flatten() {
                        if !idom.contains_key(&p) {
                            continue;
                        }
                        new_idom = Some(match new_idom {
                            None => p,
                            Some(cur) => intersect(&idom, p, cur),
                        });
                    }
                    if let Some(d) = new_idom {
                        if idom.get(&n) != Some(&d) {
                            idom.insert(n, d);
                            changed = true;
                        }
                    }
                }
            }
            let mut out = Relation::new();
            for (n, d) in idom {
                if n != root {
                    out.insert(vec![Value::Id(n), Value::Id(d)]);
                }
            }
            Ok(out)
        }),
    }
}

/// `@concat(groups; group, joined)` — per group id, the concatenation of the
/// distinct string values of `groups: (group, value)` in ascending value
/// order.
pub fn concat_spec() -> BuiltinSpec {
    BuiltinSpec {
        signature: BuiltinSignature {
            name: "concat".into(),
            input_types: vec![vec![ColumnType::Id, ColumnType::Str]],
            output_types: vec![ColumnType::Id, ColumnType::Str],
        },
        evaluate: Arc::new(|inputs| {
            let groups = &inputs[0];
            let mut by_group: BTreeMap<u64, String> = BTreeMap::new();
            // Input relation is sorted, so values arrive in ascending order
            // per group already.
            for t in groups {
                let (Value::Id(g), Value::Str(s)) = (&t[0], &t[1]) else {
                    return Err(BuiltinError::Other {
                        builtin: "concat".into(),
                        message: format!("malformed group tuple {t:?}"),
                    });
                };
                by_group.entry(*g).or_default().push_str(s);
            }
            Ok(by_group
                .into_iter()
                .map(|(g, s)| vec![Value::Id(g), Value::str(s)])
                .collect())
        }),
    }
}
