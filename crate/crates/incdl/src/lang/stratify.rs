//! Stratification: layering predicates so that negation, aggregation,
//! built-in calls, and fresh-id creation never feed back into their own
//! layer. Positive recursion stays legal within a layer; everything else
//! must cross strictly upward.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::ast::{DependencyKind, Program};

/// Predicate dependency graph: one edge per (body predicate → head
/// predicate) reference, labeled with how the reference binds.
pub(crate) struct DepGraph {
    pub preds: Vec<String>,
    pub index: BTreeMap<String, usize>,
    /// `(from, to, kind)` — deduplicated, sorted.
    pub edges: Vec<(usize, usize, DependencyKind)>,
}

impl DepGraph {
    pub fn build(program: &Program) -> DepGraph {
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for d in &program.decls {
            names.insert(&d.name);
        }
        for r in &program.rules {
            names.insert(&r.head.predicate);
            for (p, _) in r.body_dependencies() {
                names.insert(p);
            }
        }
        let preds: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let index: BTreeMap<String, usize> =
            preds.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();

        let rank = |k: DependencyKind| match k {
            DependencyKind::Positive => 0u8,
            DependencyKind::Negative => 1,
            DependencyKind::Aggregate => 2,
            DependencyKind::Builtin => 3,
            DependencyKind::FreshGuard => 4,
        };
        let mut edge_set: BTreeSet<(usize, usize, u8)> = BTreeSet::new();
        for r in &program.rules {
            let to = index[&r.head.predicate];
            for (p, kind) in r.body_dependencies() {
                edge_set.insert((index[p], to, rank(kind)));
            }
        }
        let unrank = |r: u8| match r {
            0 => DependencyKind::Positive,
            1 => DependencyKind::Negative,
            2 => DependencyKind::Aggregate,
            3 => DependencyKind::Builtin,
            _ => DependencyKind::FreshGuard,
        };
        let edges = edge_set.into_iter().map(|(f, t, r)| (f, t, unrank(r))).collect();
        DepGraph { preds, index, edges }
    }

    /// Strongly connected components, each a sorted set of predicate
    /// indices. Deterministic for a given program's predicate set.
    pub fn sccs(&self) -> Vec<BTreeSet<usize>> {
        let mut g: DiGraph<usize, ()> = DiGraph::new();
        let nodes: Vec<_> = (0..self.preds.len()).map(|i| g.add_node(i)).collect();
        for &(f, t, _) in &self.edges {
            g.update_edge(nodes[f], nodes[t], ());
        }
        tarjan_scc(&g)
            .into_iter()
            .map(|c| c.into_iter().map(|n| g[n]).collect())
            .collect()
    }

    /// Shortest path `from -> ... -> to` using only edges inside `scc`
    /// (plain BFS, so the path is simple).
    pub fn path_within(
        &self,
        scc: &BTreeSet<usize>,
        from: usize,
        to: usize,
    ) -> Option<Vec<usize>> {
        let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(n) = queue.pop_front() {
            if n == to {
                let mut path = vec![n];
                let mut cur = n;
                while cur != from {
                    cur = parent[&cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &(f, t, _) in &self.edges {
                if f == n && scc.contains(&t) && seen.insert(t) {
                    parent.insert(t, n);
                    queue.push_back(t);
                }
            }
        }
        None
    }

    /// A *simple* path `from -> ... -> to` inside `scc` that crosses at
    /// least one negative edge, if one exists. Simplicity matters: a
    /// single-negation cycle walked twice crosses two negations, but that
    /// does not make the program parity-stratified. Exhaustive DFS — fine
    /// for the small recursive components analyses have.
    pub fn negative_simple_path(
        &self,
        scc: &BTreeSet<usize>,
        from: usize,
        to: usize,
    ) -> Option<Vec<usize>> {
        fn dfs(
            g: &DepGraph,
            scc: &BTreeSet<usize>,
            at: usize,
            to: usize,
            crossed_neg: bool,
            path: &mut Vec<usize>,
            on_path: &mut BTreeSet<usize>,
        ) -> bool {
            if at == to && crossed_neg && path.len() > 1 {
                return true;
            }
            for &(f, t, kind) in &g.edges {
                if f != at || !scc.contains(&t) {
                    continue;
                }
                let neg = crossed_neg || kind == DependencyKind::Negative;
                // `to == from` searches for a nontrivial loop, so reaching
                // `to` again is allowed even though it is on the path.
                if t == to {
                    if neg {
                        path.push(t);
                        return true;
                    }
                    continue;
                }
                if !on_path.insert(t) {
                    continue;
                }
                path.push(t);
                if dfs(g, scc, t, to, neg, path, on_path) {
                    return true;
                }
                path.pop();
                on_path.remove(&t);
            }
            false
        }

        let mut path = vec![from];
        let mut on_path = BTreeSet::from([from]);
        if from == to {
            // Look for a nontrivial negative loop from -> ... -> from.
            if dfs(self, scc, from, to, false, &mut path, &mut on_path) {
                return Some(path);
            }
            return None;
        }
        if dfs(self, scc, from, to, false, &mut path, &mut on_path) {
            return Some(path);
        }
        None
    }
}

/// What made a stratum ill-formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StratumErrorKind {
    NegationInCycle,
    AggregateInCycle,
    BuiltinInCycle,
    FreshIdInCycle,
}

/// A non-monotonic dependency trapped inside a recursive component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StratumError {
    pub kind: StratumErrorKind,
    /// The offending cycle as predicate names: consecutive entries are
    /// dependency steps, and the last entry depends on the first through the
    /// non-monotonic edge.
    pub cycle: Vec<String>,
    pub message: String,
}

/// Result of stratification: the layers in evaluation order plus any
/// violations. The layers are computed even when errors are present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StratificationReport {
    /// Ascending evaluation order; each stratum is a set of predicates that
    /// are mutually recursive (or a single predicate).
    pub strata: Vec<BTreeSet<String>>,
    pub stratum_of: BTreeMap<String, usize>,
    pub errors: Vec<StratumError>,
}

impl StratificationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    /// True if the stratum at `index` contains recursion (a predicate that
    /// depends on itself, directly or mutually).
    pub fn recursive_strata(&self, program: &Program) -> Vec<bool> {
        let graph = DepGraph::build(program);
        self.strata
            .iter()
            .map(|stratum| {
                if stratum.len() > 1 {
                    return true;
                }
                let p = stratum.iter().next().expect("strata are non-empty");
                let Some(&i) = graph.index.get(p) else { return false };
                graph.edges.iter().any(|&(f, t, _)| f == i && t == i)
            })
            .collect()
    }
}

/// Computes the stratification of a program. Deterministic and independent
/// of rule order: the same program text permuted yields the same strata and
/// the same order.
pub fn stratify(program: &Program) -> StratificationReport {
    let graph = DepGraph::build(program);
    let sccs = graph.sccs();
    let scc_of: BTreeMap<usize, usize> = sccs
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.iter().map(move |&n| (n, ci)))
        .collect();

    // Non-monotonic edges inside a component are errors.
    let mut errors = Vec::new();
    for &(f, t, kind) in &graph.edges {
        if !kind.is_strict() || scc_of[&f] != scc_of[&t] {
            continue;
        }
        let scc = &sccs[scc_of[&f]];
        // A strict edge f -> t is cyclic if t reaches back to f within the
        // component (or f == t).
        let back = if f == t {
            Some(vec![f])
        } else {
            graph.path_within(scc, t, f)
        };
        let Some(path) = back else { continue };
        let cycle: Vec<String> = path.iter().map(|&i| graph.preds[i].clone()).collect();
        let (kind, what) = match kind {
            DependencyKind::Negative => (StratumErrorKind::NegationInCycle, "negation"),
            DependencyKind::Aggregate => (StratumErrorKind::AggregateInCycle, "aggregation"),
            DependencyKind::Builtin => (StratumErrorKind::BuiltinInCycle, "a built-in call"),
            DependencyKind::FreshGuard => (StratumErrorKind::FreshIdInCycle, "fresh-id creation"),
            DependencyKind::Positive => unreachable!("positive edges are not strict"),
        };
        let message = format!(
            "`{}` depends on `{}` through {what}, but `{}` also depends on `{}` (cycle: {})",
            graph.preds[t],
            graph.preds[f],
            graph.preds[f],
            graph.preds[t],
            cycle.join(" -> "),
        );
        errors.push(StratumError { kind, cycle, message });
    }

    // Order the condensation topologically; ties broken by the smallest
    // member name so the result never depends on rule order.
    let n_sccs = sccs.len();
    let mut indegree = vec![0usize; n_sccs];
    let mut succs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_sccs];
    for &(f, t, _) in &graph.edges {
        let (cf, ct) = (scc_of[&f], scc_of[&t]);
        if cf != ct && succs[cf].insert(ct) {
            indegree[ct] += 1;
        }
    }
    let min_name = |ci: usize| -> &str {
        sccs[ci].iter().map(|&n| graph.preds[n].as_str()).min().expect("non-empty scc")
    };
    let mut ready: BTreeSet<(&str, usize)> = (0..n_sccs)
        .filter(|&ci| indegree[ci] == 0)
        .map(|ci| (min_name(ci), ci))
        .collect();
    let mut order = Vec::with_capacity(n_sccs);
    while let Some(&(name, ci)) = ready.iter().next() {
        ready.remove(&(name, ci));
        order.push(ci);
        for &nx in &succs[ci] {
            indegree[nx] -= 1;
            if indegree[nx] == 0 {
                ready.insert((min_name(nx), nx));
            }
        }
    }
    // With cyclic strict edges the condensation is still acyclic (SCCs
    // absorb the cycles), so `order` always covers every component.
    debug_assert_eq!(order.len(), n_sccs);

    let strata: Vec<BTreeSet<String>> = order
        .iter()
        .map(|&ci| sccs[ci].iter().map(|&n| graph.preds[n].clone()).collect())
        .collect();
    let stratum_of = strata
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.iter().map(move |p| (p.clone(), si)))
        .collect();
    StratificationReport { strata, stratum_of, errors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parser::parse_program;

    fn strata_names(report: &StratificationReport) -> Vec<Vec<&str>> {
        report
            .strata
            .iter()
            .map(|s| s.iter().map(|p| p.as_str()).collect())
            .collect()
    }

    #[test]
    fn transitive_closure_is_one_recursive_stratum() {
        let p = parse_program(
            "edge(id, id).\npath(x, y) :- edge(x, y).\npath(x, z) :- path(x, y), edge(y, z).\n",
        )
        .unwrap();
        let report = stratify(&p);
        assert!(report.is_ok());
        assert_eq!(strata_names(&report), vec![vec!["edge"], vec!["path"]]);
        assert_eq!(report.recursive_strata(&p), vec![false, true]);
    }

    #[test]
    fn negation_forces_a_higher_stratum() {
        let p = parse_program(
            "link(id, id).\nnode(id).\nsource(id).\n\
             reach(x) :- source(x).\n\
             reach(y) :- reach(x), link(x, y).\n\
             unreach(x) :- node(x), not reach(x).\n",
        )
        .unwrap();
        let report = stratify(&p);
        assert!(report.is_ok());
        assert_eq!(
            strata_names(&report),
            vec![vec!["link"], vec!["node"], vec!["source"], vec!["reach"], vec!["unreach"]]
        );
        assert!(report.stratum_of["reach"] < report.stratum_of["unreach"]);
        assert_eq!(report.recursive_strata(&p), vec![false, false, false, true, false]);
    }

    #[test]
    fn mutual_recursion_shares_a_stratum() {
        let p = parse_program(
            "e(id, id).\n\
             even(x, y) :- e(x, y).\n\
             even(x, z) :- odd(x, y), e(y, z).\n\
             odd(x, z) :- even(x, y), e(y, z).\n",
        )
        .unwrap();
        let report = stratify(&p);
        assert!(report.is_ok());
        assert_eq!(strata_names(&report), vec![vec!["e"], vec!["even", "odd"]]);
    }

    #[test]
    fn negation_inside_a_cycle_is_an_error() {
        let p = parse_program(
            "node(id).\n\
             p(x) :- node(x), not q(x).\n\
             q(x) :- node(x), p(x).\n",
        )
        .unwrap();
        let report = stratify(&p);
        assert_eq!(report.errors.len(), 1);
        let err = &report.errors[0];
        assert_eq!(err.kind, StratumErrorKind::NegationInCycle);
        assert!(err.cycle.contains(&"p".to_string()) && err.cycle.contains(&"q".to_string()));
        assert!(err.message.contains("negation"), "{}", err.message);
    }

    #[test]
    fn aggregation_inside_a_cycle_is_an_error() {
        let p = parse_program(
            "edge(id, id).\n\
             cnt(x, c) :- edge(x, _), c = count { r(x, _) }.\n\
             r(x, y) :- edge(x, y).\n\
             r(x, y) :- cnt(x, _), edge(x, y).\n",
        )
        .unwrap();
        let report = stratify(&p);
        assert!(report
            .errors
            .iter()
            .any(|e| e.kind == StratumErrorKind::AggregateInCycle));
    }

    #[test]
    fn fresh_id_guards_inside_a_cycle_are_an_error() {
        let p = parse_program(
            "seed(id).\n\
             grow(x, n) :- seed(x), n = new layer(x).\n\
             grow(x, n) :- grow(_, x), n = new layer(x).\n",
        )
        .unwrap();
        let report = stratify(&p);
        assert!(report
            .errors
            .iter()
            .any(|e| e.kind == StratumErrorKind::FreshIdInCycle));
    }

    #[test]
    fn order_is_independent_of_rule_order() {
        let a = parse_program(
            "b(id).\na(id).\n\
             x(v) :- a(v).\n\
             y(v) :- b(v), not x(v).\n\
             z(v) :- y(v), x(v).\n",
        )
        .unwrap();
        let b = parse_program(
            "a(id).\nb(id).\n\
             z(v) :- y(v), x(v).\n\
             y(v) :- b(v), not x(v).\n\
             x(v) :- a(v).\n",
        )
        .unwrap();
        assert_eq!(stratify(&a).strata, stratify(&b).strata);
    }
}
