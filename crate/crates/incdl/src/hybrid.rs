//! Hybrid evaluation: batch-evaluate the non-recursive parts of a program
//! and keep only the recursive parts in the incremental network.
//!
//! A fully incremental network caches outputs, derivation counts, and join
//! indexes at every operator, which is where the memory goes. Most of a
//! typical analysis is non-recursive plumbing, and plumbing is cheap to
//! recompute from scratch — so this module partitions the derived
//! predicates into *chains* (maximal sequences of non-recursive predicates
//! that each flow into at most one other predicate) and re-derives a whole
//! chain per transaction, caching nothing but the chain's final relation.
//! Fork points deliberately terminate chains: a relation read by several
//! consumers is worth caching once rather than recomputing inside each.
//!
//! The chain boundary relations enter the incremental network as if they
//! were stored inputs: after each batch evaluation the new boundary is
//! diffed against the previous one and only the difference propagates. An
//! unchanged boundary propagates nothing, and a chain none of whose inputs
//! changed is not re-evaluated at all.
//!
//! [`partition`] computes the split, [`evaluate_chain`] re-derives one
//! chain, and [`HybridState`] drives the whole arrangement with the same
//! `initialize`/`apply_delta` surface as the fully incremental engine.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::builtins::BuiltinRegistry;
use crate::engine::{Delta, EngineError, EngineState, UpdateStats};
use crate::freshids::IdPool;
use crate::lang::{stratify, Literal, Program, RelationDecl, StratificationReport};
use crate::ra::{compile, constant_fold, evaluate_predicates, CardinalityEstimates, EvalError};
use crate::value::{Database, Relation};

/// A maximal sequence of non-recursive derived predicates, each consumed
/// only by the next, re-evaluated from scratch as a unit. Only the final
/// member — the boundary — is ever cached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    /// Members in derivation order; intermediate results are transient.
    pub members: Vec<String>,
    /// The last member, whose relation feeds everything downstream.
    pub boundary: String,
}

/// How [`partition`] groups the non-recursive derived predicates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Group into maximal chains (the default).
    Chaining,
    /// Wrap every predicate in its own singleton chain. Exists to measure
    /// how much worse per-predicate wrapping is; never the default.
    PerPredicate,
}

/// The complete split of a program's predicates: every predicate is in
/// exactly one of `chains`, `incremental`, or `edb`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    /// Batch-evaluated chains, sorted by first member name.
    pub chains: Vec<Chain>,
    /// Predicates kept in the incremental network: every recursive
    /// predicate, plus any whose rules mint fresh ids (a batch re-run
    /// would renumber them).
    pub incremental: BTreeSet<String>,
    /// Stored input relations, each maintained individually.
    pub edb: BTreeSet<String>,
}

impl PartitionPlan {
    /// Stable text form, one line per component — the golden-test surface.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for chain in &self.chains {
            out.push_str("chain: ");
            out.push_str(&chain.members.join(" -> "));
            out.push('\n');
        }
        if !self.incremental.is_empty() {
            out.push_str("incremental: ");
            let names: Vec<&str> = self.incremental.iter().map(String::as_str).collect();
            out.push_str(&names.join(", "));
            out.push('\n');
        }
        if !self.edb.is_empty() {
            out.push_str("edb: ");
            let names: Vec<&str> = self.edb.iter().map(String::as_str).collect();
            out.push_str(&names.join(", "));
            out.push('\n');
        }
        out
    }
}

/// Per-predicate consumer sets: which derived predicates read each
/// predicate's relation, directly (positively, negatively, aggregated, or
/// through a built-in).
fn consumers(program: &Program) -> BTreeMap<&str, BTreeSet<&str>> {
    let mut map: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for name in program.all_types().keys() {
        map.insert(name, BTreeSet::new());
    }
    for rule in &program.rules {
        let head = rule.head.predicate.as_str();
        for (dep, _) in rule.body_dependencies() {
            if dep != head {
                map.entry(dep).or_default().insert(head);
            }
        }
    }
    map
}

/// Predicates with at least one rule that mints fresh ids.
fn fresh_minters(program: &Program) -> BTreeSet<&str> {
    program
        .rules
        .iter()
        .filter(|r| r.body.iter().any(|l| matches!(l, Literal::Fresh { .. })))
        .map(|r| r.head.predicate.as_str())
        .collect()
}

/// Split the program's predicates into batch-evaluated chains, incremental
/// predicates, and stored inputs.
///
/// A derived predicate is chainable if it is non-recursive and mints no
/// fresh ids. Chainable `p` links to chainable `q` when `q` is `p`'s *only*
/// consumer — fork points end chains so their caches are shared — and
/// chains are the maximal paths of such links. When two predicates link to
/// the same successor, the lexicographically smaller one keeps it and the
/// other's chain ends there. The result is deterministic.
pub fn partition(
    program: &Program,
    report: &StratificationReport,
    strategy: PartitionStrategy,
) -> PartitionPlan {
    let consumer_map = consumers(program);
    let recursive = report.recursive_strata(program);
    let minters = fresh_minters(program);

    let mut edb = BTreeSet::new();
    let mut incremental = BTreeSet::new();
    let mut chainable = BTreeSet::new();
    for name in program.all_types().keys() {
        if program.is_edb(name) {
            edb.insert(name.clone());
        } else if recursive[report.stratum_of[name]] || minters.contains(name.as_str()) {
            incremental.insert(name.clone());
        } else {
            chainable.insert(name.as_str());
        }
    }

    // link(p) = q when q is p's only consumer and both are chainable.
    let mut link: BTreeMap<&str, &str> = BTreeMap::new();
    if strategy == PartitionStrategy::Chaining {
        for &p in &chainable {
            let out = &consumer_map[p];
            if out.len() == 1 {
                let q = *out.iter().next().expect("len checked");
                if chainable.contains(q) {
                    link.insert(p, q);
                }
            }
        }
        // Resolve competing predecessors: q chains after its
        // lexicographically smallest linker, the rest end their chains.
        let mut chosen: BTreeMap<&str, &str> = BTreeMap::new();
        for (&p, &q) in &link {
            chosen.entry(q).or_insert(p); // BTreeMap iteration is sorted, first p wins
        }
        link.retain(|p, q| chosen.get(*q) == Some(p));
    }

    let followers: BTreeSet<&str> = link.values().copied().collect();
    let mut chains = Vec::new();
    for &start in &chainable {
        if followers.contains(start) {
            continue; // not a chain head
        }
        let mut members = vec![start.to_owned()];
        let mut here = start;
        while let Some(&next) = link.get(here) {
            members.push(next.to_owned());
            here = next;
        }
        let boundary = members.last().expect("chains are non-empty").clone();
        chains.push(Chain { members, boundary });
    }
    chains.sort_by(|a, b| a.members[0].cmp(&b.members[0]));

    PartitionPlan {
        chains,
        incremental,
        edb,
    }
}

/// A failure while initializing or updating a [`HybridState`].
#[derive(Debug, thiserror::Error)]
pub enum HybridError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("chain `{chain}`: {source}")]
    Chain { chain: String, source: EvalError },
    #[error("delta touches `{relation}`, which is not a stored input relation")]
    NotExtensional { relation: String },
    #[error("program construction: {0}")]
    Reduce(String),
}

/// Re-derive one chain from scratch against its (complete) inputs and
/// return the boundary relation. Intermediate member relations are
/// dropped on return; nothing persists.
///
/// `inputs` must hold every relation the members' rules read other than
/// the members themselves. Members are evaluated stratum by stratum so
/// negation and aggregation *between* members see settled operands.
pub fn evaluate_chain(
    program: &Program,
    report: &StratificationReport,
    chain: &Chain,
    inputs: &Database,
    builtins: &BuiltinRegistry,
) -> Result<Relation, EvalError> {
    let mut db = inputs.clone();
    let mut by_stratum: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for member in &chain.members {
        by_stratum
            .entry(report.stratum_of[member])
            .or_default()
            .insert(member.clone());
    }
    // Chain members never mint fresh ids, so the pool is never drawn from.
    let mut pool = IdPool::new();
    for preds in by_stratum.values() {
        evaluate_predicates(program, &mut db, preds, &mut pool, builtins)?;
    }
    Ok(db.relations.remove(&chain.boundary).unwrap_or_default())
}

/// The hybrid evaluator: an incremental network over the recursive part of
/// the program, fed by batch-evaluated chains.
#[derive(Clone)]
pub struct HybridState {
    program: Program,
    report: StratificationReport,
    partition: PartitionPlan,
    builtins: BuiltinRegistry,
    /// Incremental network over the reduced program: chain boundaries
    /// appear to it as stored input relations.
    engine: EngineState,
    /// Chain indexes in evaluation order (upstream first).
    schedule: Vec<usize>,
    /// Non-member relations each chain's rules read.
    chain_inputs: Vec<BTreeSet<String>>,
    /// Whole-chain re-evaluations, per chain.
    chain_evals: Vec<usize>,
    last_stats: UpdateStats,
}

impl HybridState {
    /// Partition `program`, build the reduced incremental network, and load
    /// `edb` — batch-evaluating every chain once to seed the boundaries.
    pub fn initialize(
        program: &Program,
        edb: &Database,
        pool: IdPool,
        builtins: BuiltinRegistry,
        strategy: PartitionStrategy,
        estimates: &CardinalityEstimates,
    ) -> Result<HybridState, HybridError> {
        let started = Instant::now();
        let report = stratify(program);
        crate::ra::check_edb(program, edb).map_err(|e| HybridError::Reduce(e.to_string()))?;
        let partition = partition(program, &report, strategy);

        // The reduced program: declarations for stored inputs and chain
        // boundaries, rules only for incremental predicates. Mid-chain
        // predicates do not exist in it at all.
        let mut decls = program.decls.clone();
        for chain in &partition.chains {
            let columns = program
                .predicate_types(&chain.boundary)
                .expect("boundary is typed")
                .to_vec();
            decls.push(RelationDecl {
                name: chain.boundary.clone(),
                columns,
            });
        }
        let rules = program
            .rules
            .iter()
            .filter(|r| partition.incremental.contains(&r.head.predicate))
            .cloned()
            .collect();
        let reduced =
            Program::new(decls, rules).map_err(|e| HybridError::Reduce(e.to_string()))?;
        let reduced_report = stratify(&reduced);
        let plan = constant_fold(
            &compile(&reduced, &reduced_report, estimates, &builtins)
                .map_err(|e| HybridError::Reduce(e.to_string()))?,
        );
        let engine = EngineState::initialize(&reduced, plan, edb, pool, builtins.clone())?;

        let schedule = schedule(&partition, &report);
        let chain_inputs = partition
            .chains
            .iter()
            .map(|chain| {
                let members: BTreeSet<&str> =
                    chain.members.iter().map(String::as_str).collect();
                let mut inputs = BTreeSet::new();
                for rule in &program.rules {
                    if !members.contains(rule.head.predicate.as_str()) {
                        continue;
                    }
                    for (dep, _) in rule.body_dependencies() {
                        if !members.contains(dep) {
                            inputs.insert(dep.to_owned());
                        }
                    }
                }
                inputs
            })
            .collect();

        let mut state = HybridState {
            program: program.clone(),
            report,
            partition,
            builtins,
            engine,
            schedule,
            chain_inputs,
            chain_evals: vec![0; 0],
            last_stats: UpdateStats::default(),
        };
        state.chain_evals = vec![0; state.partition.chains.len()];

        let mut stats = state.engine.last_stats().clone();
        let mut changed: BTreeSet<String> = state.engine.changed_relations().clone();
        state.run_chains(true, &mut changed, &mut stats)?;
        stats.wall_time = started.elapsed();
        state.last_stats = stats;
        Ok(state)
    }

    /// Apply one atomic change to the stored relations: propagate it
    /// through the incremental network, re-evaluate every chain whose
    /// inputs changed, and propagate the boundary differences.
    pub fn apply_delta(&mut self, delta: &Delta) -> Result<UpdateStats, HybridError> {
        let started = Instant::now();
        for name in delta.per_relation.keys() {
            if !self.partition.edb.contains(name) {
                return Err(HybridError::NotExtensional {
                    relation: name.clone(),
                });
            }
        }
        let mut stats = self.engine.apply_delta(delta)?;
        let mut changed = self.engine.changed_relations().clone();
        self.run_chains(false, &mut changed, &mut stats)?;
        stats.wall_time = started.elapsed();
        self.last_stats = stats.clone();
        Ok(stats)
    }

    /// Evaluate chains in dependency order, diffing each boundary against
    /// its previous contents and feeding non-empty differences back into
    /// the network. `force` evaluates even with no changed inputs (initial
    /// seeding); afterwards a chain runs only if something it reads
    /// changed earlier in this transaction.
    fn run_chains(
        &mut self,
        force: bool,
        changed: &mut BTreeSet<String>,
        stats: &mut UpdateStats,
    ) -> Result<(), HybridError> {
        for position in 0..self.schedule.len() {
            let index = self.schedule[position];
            let touched = self.chain_inputs[index]
                .iter()
                .any(|input| changed.contains(input));
            if !force && !touched {
                continue;
            }
            let chain = &self.partition.chains[index];
            let mut inputs = Database::new();
            for name in &self.chain_inputs[index] {
                let relation = self
                    .engine
                    .relation(name)
                    .cloned()
                    .unwrap_or_default();
                inputs.relations.insert(name.clone(), relation);
            }
            let fresh = evaluate_chain(&self.program, &self.report, chain, &inputs, &self.builtins)
                .map_err(|source| HybridError::Chain {
                    chain: chain.members.join(" -> "),
                    source,
                })?;
            self.chain_evals[index] += 1;

            let previous = self
                .engine
                .relation(&chain.boundary)
                .cloned()
                .unwrap_or_default();
            let mut boundary_delta = Delta::new();
            for tuple in fresh.difference(&previous) {
                boundary_delta.insert(&chain.boundary, tuple.clone());
            }
            for tuple in previous.difference(&fresh) {
                boundary_delta.delete(&chain.boundary, tuple.clone());
            }
            if boundary_delta.is_empty() {
                continue;
            }
            changed.insert(chain.boundary.clone());
            let step = self.engine.apply_delta(&boundary_delta)?;
            stats.tuples_propagated += step.tuples_propagated;
            stats.nodes_activated += step.nodes_activated;
            stats.rederivation_attempts += step.rederivation_attempts;
            changed.extend(self.engine.changed_relations().iter().cloned());
        }
        Ok(())
    }

    /// The current contents of a materialized relation: a stored input, a
    /// chain boundary, or an incrementally maintained predicate. Mid-chain
    /// relations are not materialized and return `None`.
    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.engine.relation(name)
    }

    /// Derived predicates nothing else consumes — the analysis results.
    /// Always materialized in both hybrid and fully incremental modes.
    pub fn sinks(&self) -> Vec<String> {
        let consumer_map = consumers(&self.program);
        self.program
            .idb_names()
            .into_iter()
            .filter(|name| consumer_map[name].is_empty())
            .map(str::to_owned)
            .collect()
    }

    /// Accounting for the most recent transaction (the initial load counts).
    pub fn last_stats(&self) -> &UpdateStats {
        &self.last_stats
    }

    /// How the program's predicates were split.
    pub fn partition(&self) -> &PartitionPlan {
        &self.partition
    }

    /// Whole-chain re-evaluations so far, in `partition().chains` order.
    pub fn chain_evaluations(&self) -> &[usize] {
        &self.chain_evals
    }

    /// Total tuples held in persistent state. Chain intermediates are
    /// transient and contribute nothing; boundaries count once as stored
    /// relations of the reduced network.
    pub fn cached_tuples(&self) -> usize {
        self.engine.cached_tuples()
    }

    /// The reduced incremental network (for inspection).
    pub fn engine(&self) -> &EngineState {
        &self.engine
    }
}

/// Chain evaluation order: ascending by the boundary's stratum in the full
/// program. Strata are topologically ordered, every member of a chain sits
/// at or below its boundary, and distinct non-recursive predicates never
/// share a stratum — so by each chain's turn, everything upstream of it
/// (stored inputs, earlier boundaries, recursive predicates) has settled.
fn schedule(partition: &PartitionPlan, report: &StratificationReport) -> Vec<usize> {
    let mut order: Vec<usize> = (0..partition.chains.len()).collect();
    order.sort_by_key(|&i| report.stratum_of[&partition.chains[i].boundary]);
    order
}
