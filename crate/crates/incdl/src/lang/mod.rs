//! The analysis language: abstract syntax, parser, static validation,
//! stratification, and rejection of unsupported constructs.

pub mod ast;
pub mod parser;
pub mod reject;
pub mod stratify;
mod validate;

pub use ast::{
    AggFunc, Atom, CmpOp, DependencyKind, Literal, Program, RelationDecl, Rule, Term,
};
pub use parser::{parse_program, ParseError};
pub use reject::{reject_unsupported, Diagnostic, UnsupportedFeature};
pub use stratify::{stratify, StratificationReport, StratumError, StratumErrorKind};
