//! Incremental Datalog analysis engine.
//!
//! This crate evaluates stratified Datalog programs — extended with
//! negation, aggregation, batch built-in algorithms, and fresh-id creation —
//! both from scratch and *incrementally*: after a change to the input
//! database, the engine updates all derived relations by propagating deltas
//! through a compiled dataflow network instead of recomputing them.
//!
//! The pieces, bottom-up:
//!
//! - [`value`]: typed tuple values and databases.
//! - [`lang`]: the rule language — parser, validation, stratification.
//! - [`ra`]: compilation of rules to relational-algebra plans, plus a naive
//!   from-scratch evaluator that serves as the correctness oracle.
//! - [`builtins`]: batch algorithms (shortest paths, dominators, string
//!   concatenation) wrapped for differential execution.
//! - [`freshids`]: the persistent pool that mints stable ids for
//!   analysis-created entities.
//! - [`engine`]: the incremental evaluation network itself.
//! - [`frontend`]: a small source language, its extractor, and the import
//!   pipeline that turns source trees into input databases.
//! - [`hybrid`]: the cost-saving mode that re-evaluates chains of cheap
//!   predicates from scratch inside an otherwise incremental network.
//! - [`harness`]: replay, verification, and change-synthesis tooling.

pub mod builtins;
pub mod engine;
pub mod freshids;
pub mod frontend;
pub mod hybrid;
pub mod lang;
pub mod ra;
pub mod value;

pub use engine::{Delta, EngineError, EngineState, RelationDelta, UpdateStats};
pub use hybrid::{Chain, HybridError, HybridState, PartitionPlan, PartitionStrategy};
pub use value::{ColumnType, Database, Relation, Tuple, Value, FRESH_ID_BIT};
