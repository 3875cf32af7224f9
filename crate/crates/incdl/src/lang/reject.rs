//! Detection of constructs the engine deliberately does not evaluate, with
//! hints for rewriting them into the supported stratified core.

use super::ast::{DependencyKind, Program};
use super::stratify::DepGraph;

/// Why a program was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnsupportedFeature {
    /// A recursive cycle that crosses two or more negations. Such programs
    /// have well-defined alternating-fixpoint semantics, but this engine
    /// only evaluates stratified programs.
    ParityStratifiedNegation,
    /// An aggregate whose input depends on the aggregating predicate.
    RecursiveAggregate,
}

/// A rejection with the predicates involved and a rewrite hint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub feature: UnsupportedFeature,
    /// The offending cycle as predicate names (first element repeats as the
    /// implicit closing step).
    pub cycle: Vec<String>,
    pub message: String,
}

/// Scans for unsupported-but-meaningful constructs. Programs flagged here
/// would also fail stratification; this pass exists to say *why* in terms of
/// the construct the author wrote, and how to rewrite it.
pub fn reject_unsupported(program: &Program) -> Vec<Diagnostic> {
    let graph = DepGraph::build(program);
    let sccs = graph.sccs();
    let mut diagnostics = Vec::new();

    for scc in &sccs {
        let mut reported_parity = false;
        let mut reported_aggregate = false;
        for &(f, t, kind) in &graph.edges {
            if !scc.contains(&f) || !scc.contains(&t) {
                continue;
            }
            match kind {
                DependencyKind::Aggregate if !reported_aggregate => {
                    let back = if f == t {
                        Some(vec![f])
                    } else {
                        graph.path_within(scc, t, f)
                    };
                    let Some(path) = back else { continue };
                    let cycle: Vec<String> =
                        path.iter().map(|&i| graph.preds[i].clone()).collect();
                    diagnostics.push(Diagnostic {
                        feature: UnsupportedFeature::RecursiveAggregate,
                        message: format!(
                            "recursive aggregate: `{}` aggregates over `{}`, which depends on it \
                             (cycle: {}); rewrite as a fixpoint over an explicit frontier \
                             predicate, aggregating only the finished frontier",
                            graph.preds[t],
                            graph.preds[f],
                            cycle.join(" -> "),
                        ),
                        cycle,
                    });
                    reported_aggregate = true;
                }
                DependencyKind::Negative if !reported_parity => {
                    // The closing edge f -> t is one negation; the cycle has
                    // parity > 1 if some simple return path t -> f crosses
                    // another.
                    let back = if f == t {
                        None
                    } else {
                        graph.negative_simple_path(scc, t, f)
                    };
                    let Some(path) = back else { continue };
                    let cycle: Vec<String> =
                        path.iter().map(|&i| graph.preds[i].clone()).collect();
                    diagnostics.push(Diagnostic {
                        feature: UnsupportedFeature::ParityStratifiedNegation,
                        message: format!(
                            "parity-stratified negation unsupported: the cycle {} crosses two or \
                             more negations; split the even and odd phases into separate \
                             predicates so each negation points strictly downward",
                            cycle.join(" -> "),
                        ),
                        cycle,
                    });
                    reported_parity = true;
                }
                _ => {}
            }
        }
    }
    diagnostics
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parser::parse_program;

    #[test]
    fn double_negation_cycles_are_flagged_as_parity_stratified() {
        let p = parse_program(
            "node(id).\n\
             win(x) :- node(x), not lose(x).\n\
             lose(x) :- node(x), not win(x).\n",
        )
        .unwrap();
        let ds = reject_unsupported(&p);
        assert_eq!(ds.len(), 1, "{ds:?}");
        assert_eq!(ds[0].feature, UnsupportedFeature::ParityStratifiedNegation);
        assert!(ds[0].message.contains("parity"), "{}", ds[0].message);
    }

    #[test]
    fn single_negation_cycles_are_not_parity_errors() {
        // Still ill-stratified, but the specific parity rewrite hint does
        // not apply: stratification reports it instead.
        let p = parse_program(
            "node(id).\n\
             p(x) :- node(x), not q(x).\n\
             q(x) :- node(x), p(x).\n",
        )
        .unwrap();
        assert!(reject_unsupported(&p).is_empty());
    }

    #[test]
    fn recursive_aggregates_are_flagged_with_a_rewrite_hint() {
        let p = parse_program(
            "edge(id, id).\n\
             cnt(x, c) :- edge(x, _), c = count { r(x, _) }.\n\
             r(x, y) :- edge(x, y).\n\
             r(x, y) :- cnt(x, _), edge(x, y).\n",
        )
        .unwrap();
        let ds = reject_unsupported(&p);
        assert_eq!(ds.len(), 1, "{ds:?}");
        assert_eq!(ds[0].feature, UnsupportedFeature::RecursiveAggregate);
        assert!(ds[0].message.contains("frontier"), "{}", ds[0].message);
    }

    #[test]
    fn stratified_programs_produce_no_diagnostics() {
        let p = parse_program(
            "edge(id, id).\nnode(id).\n\
             path(x, y) :- edge(x, y).\n\
             path(x, z) :- path(x, y), edge(y, z).\n\
             unreached(x) :- node(x), not path(_, x).\n\
             fanout(x, c) :- node(x), c = count { edge(x, _) }.\n",
        )
        .unwrap();
        assert!(reject_unsupported(&p).is_empty());
    }
}
