//! Relational algebra: the plan representation rules compile into, the
//! compiler that produces it, constant folding over it, and a from-scratch
//! reference evaluator that defines what every plan must compute.

pub mod compile;
pub mod fold;
pub mod naive;
pub mod order;
pub mod plan;

pub use compile::{compile, CompileError};
pub use fold::constant_fold;
pub use naive::{check_edb, evaluate, evaluate_predicates, evaluate_stratified, EvalError};
pub use order::{join_order_cost, order_joins, CardinalityEstimates, JoinOrderHint};
pub use plan::{
    NodeId, Operand, OutCol, RaNode, RaOp, RaPlan, RecursionGroup, SelectCond, Side,
};
