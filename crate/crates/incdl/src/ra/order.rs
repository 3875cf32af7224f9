//! Compile-time join ordering.
//!
//! Join order matters enormously for Datalog performance, and it is fixed
//! at compile time here: the engine never reorders at run time. The model
//! is deliberately simple — estimated cardinalities per predicate, greedy
//! smallest-intermediate-result-first, left-deep — and deterministic, so
//! plans are stable artifacts. It is a documented stand-in for a real
//! optimizer, not a claim about one.

use std::collections::BTreeMap;

use crate::lang::ast::{Literal, Rule};
use crate::value::Database;

/// Estimated row counts per predicate. Defaults to 1000 for anything
/// unknown; seeding from an actual database uses real counts for stored
/// relations.
#[derive(Clone, Debug)]
pub struct CardinalityEstimates {
    counts: BTreeMap<String, u64>,
    default: u64,
}

impl Default for CardinalityEstimates {
    fn default() -> Self {
        CardinalityEstimates { counts: BTreeMap::new(), default: 1000 }
    }
}

impl CardinalityEstimates {
    /// Uses the actual sizes of the stored relations; everything else (all
    /// derived predicates) keeps the default.
    pub fn from_database(db: &Database) -> CardinalityEstimates {
        let counts =
            db.relations.iter().map(|(name, rel)| (name.clone(), rel.len() as u64)).collect();
        CardinalityEstimates { counts, default: 1000 }
    }

    pub fn set(&mut self, predicate: &str, estimate: u64) {
        self.counts.insert(predicate.to_owned(), estimate);
    }

    pub fn estimate(&self, predicate: &str) -> u64 {
        self.counts.get(predicate).copied().unwrap_or(self.default)
    }
}

/// The chosen evaluation order for one rule's positive atoms, as indices
/// into the rule body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinOrderHint {
    pub rule: usize,
    /// Body indices of the positive literals, in join order.
    pub order: Vec<usize>,
}

/// Greedy order: ascending by `(estimate, predicate name, body index)`.
///
/// Under the cost model "sum over join prefixes of the product of estimated
/// input cardinalities", ascending order is optimal: swapping any adjacent
/// out-of-order pair strictly lowers the cost (the shared prefixes cancel
/// and the smaller factor should come first). Ties break by name, then by
/// body position, so the result is deterministic and independent of
/// estimate-free reformattings.
pub fn order_joins(rule_index: usize, rule: &Rule, stats: &CardinalityEstimates) -> JoinOrderHint {
    let mut keyed: Vec<(u64, &str, usize)> = rule
        .body
        .iter()
        .enumerate()
        .filter_map(|(i, lit)| match lit {
            Literal::Pos(a) => Some((stats.estimate(&a.predicate), a.predicate.as_str(), i)),
            _ => None,
        })
        .collect();
    keyed.sort();
    JoinOrderHint { rule: rule_index, order: keyed.into_iter().map(|(_, _, i)| i).collect() }
}

/// The cost of evaluating a rule's positive atoms in the given order: the
/// sum over every prefix of the product of its estimates. Exposed for
/// tests, which enumerate all permutations and confirm the greedy order
/// attains the minimum.
pub fn join_order_cost(estimates: &[u64]) -> u128 {
    let mut cost: u128 = 0;
    let mut product: u128 = 1;
    for &e in estimates {
        product = product.saturating_mul(e as u128);
        cost = cost.saturating_add(product);
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parser::parse_program;

    #[test]
    fn small_relations_come_first() {
        let p = parse_program(
            "big(id, id).\nsmall(id, id).\nq(x, z) :- big(x, y), small(y, z).\n",
        )
        .unwrap();
        let mut stats = CardinalityEstimates::default();
        stats.set("big", 1_000_000);
        stats.set("small", 10);
        let hint = order_joins(0, &p.rules[0], &stats);
        assert_eq!(hint.order, vec![1, 0], "small before big");
    }

    #[test]
    fn equal_estimates_keep_source_order() {
        let p = parse_program(
            "r(id, id).\ns(id, id).\nt(id, id).\n\
             q(x, w) :- r(x, y), s(y, z), t(z, w).\n",
        )
        .unwrap();
        let hint = order_joins(0, &p.rules[0], &CardinalityEstimates::default());
        assert_eq!(hint.order, vec![0, 1, 2]);
    }

    #[test]
    fn repeated_predicates_tie_break_by_body_index() {
        let p = parse_program("e(id, id).\nq(x, z) :- e(x, y), e(y, z).\n").unwrap();
        let hint = order_joins(0, &p.rules[0], &CardinalityEstimates::default());
        assert_eq!(hint.order, vec![0, 1]);
    }

    #[test]
    fn greedy_matches_exhaustive_enumeration_on_a_chain() {
        // Chain query with estimates a:100, b:10, c:1000.
        let p = parse_program(
            "a(id, id).\nb(id, id).\nc(id, id).\n\
             q(x, w) :- a(x, y), b(y, z), c(z, w).\n",
        )
        .unwrap();
        let mut stats = CardinalityEstimates::default();
        stats.set("a", 100);
        stats.set("b", 10);
        stats.set("c", 1000);

        let hint = order_joins(0, &p.rules[0], &stats);
        assert_eq!(hint.order, vec![1, 0, 2], "b, then a, then c");

        // Confirm against the cost model by brute force over all 6 orders.
        let names = ["a", "b", "c"];
        let mut best: Option<(u128, Vec<usize>)> = None;
        let mut perms = vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ];
        perms.sort();
        for perm in perms {
            let ests: Vec<u64> = perm.iter().map(|&i| stats.estimate(names[i])).collect();
            let cost = join_order_cost(&ests);
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, perm));
            }
        }
        let (_, best_perm) = best.unwrap();
        assert_eq!(best_perm, hint.order, "greedy attains the enumerated minimum");
    }
}
