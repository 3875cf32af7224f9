//! Database diffing: turn two extensional databases into the delta that
//! updates the first into the second.
//!
//! This is how re-extraction feeds the incremental engine: extract and
//! import the changed files, diff against the previous database, and apply
//! the resulting delta. Tuples present in both databases never appear in
//! the delta, so the delta size is proportional to the real change.

use crate::engine::Delta;
use crate::value::Database;

/// Structurally incompatible inputs to [`diff_edb`].
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("relation `{relation}` has {old} columns in the old database but {new} in the new")]
pub struct ArityMismatch {
    pub relation: String,
    pub old: usize,
    pub new: usize,
}

/// Compute the delta that transforms `old` into `new`: per relation, the
/// tuples only in `new` become insertions and the tuples only in `old`
/// become deletions. A relation missing from one side is treated as empty.
pub fn diff_edb(old: &Database, new: &Database) -> Result<Delta, ArityMismatch> {
    let mut delta = Delta::new();
    let empty = crate::value::Relation::new();
    let names: std::collections::BTreeSet<&String> = old
        .relations
        .keys()
        .chain(new.relations.keys())
        .collect();
    for name in names {
        let before = old.relations.get(name).unwrap_or(&empty);
        let after = new.relations.get(name).unwrap_or(&empty);
        if let (Some(a), Some(b)) = (before.iter().next(), after.iter().next()) {
            if a.len() != b.len() {
                return Err(ArityMismatch {
                    relation: name.clone(),
                    old: a.len(),
                    new: b.len(),
                });
            }
        }
        for tuple in after.difference(before) {
            delta.insert(name, tuple.clone());
        }
        for tuple in before.difference(after) {
            delta.delete(name, tuple.clone());
        }
    }
    Ok(delta)
}
