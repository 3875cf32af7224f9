//! Core value, tuple, and relation types shared by every stage of the
//! pipeline (parsing, planning, evaluation, fact import).
//!
//! Relations are sets of tuples held in ordered containers so that every
//! iteration in the system is deterministic: two runs over the same inputs
//! visit tuples in the same order and produce byte-identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

/// High bit of the 64-bit id space. Ids minted by the engine at runtime
/// (fresh-id bindings) have this bit set; ids assigned by fact extraction
/// (hashed node keys or sequential counters) have it clear. The two
/// populations can therefore never collide.
pub const FRESH_ID_BIT: u64 = 1 << 63;

/// A single column value. Ids are opaque 64-bit entity references and only
/// support equality comparison at the language level; the `Ord` impl exists
/// so relations can be stored sorted.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Id(u64),
    Int(i64),
    Str(Arc<str>),
}

impl Value {
    /// Convenience constructor for string values.
    pub fn str(s: impl AsRef<str>) -> Value {
        Value::Str(Arc::from(s.as_ref()))
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            Value::Id(_) => ColumnType::Id,
            Value::Int(_) => ColumnType::Int,
            Value::Str(_) => ColumnType::Str,
        }
    }

    /// True for ids minted by the engine (fresh-id bindings), false for
    /// extraction-assigned ids and non-id values.
    pub fn is_fresh_id(&self) -> bool {
        matches!(self, Value::Id(n) if n & FRESH_ID_BIT != 0)
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    /// The rendering used by relation snapshots: ids as `#<u64>`, ints bare,
    /// strings double-quoted with `\\ \" \n \t` escapes (so tab-separated
    /// snapshot lines cannot be corrupted by string content).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Id(n) => write!(f, "#{n}"),
            Value::Int(n) => write!(f, "{n}"),
            Value::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Declared type of one relation column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColumnType {
    Id,
    Int,
    Str,
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Id => "id",
            ColumnType::Int => "int",
            ColumnType::Str => "string",
        })
    }
}

/// One row of a relation.
pub type Tuple = Vec<Value>;

/// A relation is a set of same-arity tuples, kept sorted.
pub type Relation = BTreeSet<Tuple>;

/// A named collection of relations. Used both for extensional input (EDB)
/// and for evaluation results (IDB).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Database {
    pub relations: BTreeMap<String, Relation>,
}

impl Database {
    pub fn new() -> Database {
        Database::default()
    }

    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.get(name)
    }

    /// Inserts a tuple, creating the relation if needed. Returns true if the
    /// tuple was not already present.
    pub fn insert(&mut self, relation: &str, tuple: Tuple) -> bool {
        self.relations.entry(relation.to_owned()).or_default().insert(tuple)
    }

    /// Total tuple count across all relations.
    pub fn total_tuples(&self) -> usize {
        self.relations.values().map(|r| r.len()).sum()
    }

    /// Renders the database in the snapshot interchange format: relations in
    /// sorted name order, one tuple per line as
    /// `name\tvalue\tvalue...`, tuples in sorted order. The same renderer is
    /// used for engine sink snapshots and reference-evaluator output so the
    /// two can be diffed textually.
    pub fn render_snapshot(&self) -> String {
        let mut out = String::new();
        for (name, rel) in &self.relations {
            for tuple in rel {
                out.push_str(name);
                for v in tuple {
                    out.push('\t');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        out
    }
}

impl FromIterator<(String, Relation)> for Database {
    fn from_iter<T: IntoIterator<Item = (String, Relation)>>(iter: T) -> Database {
        Database { relations: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_display_escapes_strings() {
        assert_eq!(Value::Id(7).to_string(), "#7");
        assert_eq!(Value::Int(-3).to_string(), "-3");
        assert_eq!(Value::str("a\tb\"c\\d\ne").to_string(), "\"a\\tb\\\"c\\\\d\\ne\"");
    }

    #[test]
    fn fresh_id_bit_splits_namespace() {
        assert!(Value::Id(FRESH_ID_BIT | 1).is_fresh_id());
        assert!(!Value::Id(1).is_fresh_id());
        assert!(!Value::Int(5).is_fresh_id());
    }

    #[test]
    fn snapshot_is_sorted_and_tab_separated() {
        let mut db = Database::new();
        db.insert("b", vec![Value::Int(2)]);
        db.insert("a", vec![Value::Int(9), Value::str("x")]);
        db.insert("a", vec![Value::Int(1), Value::str("y")]);
        assert_eq!(db.render_snapshot(), "a\t1\t\"y\"\na\t9\t\"x\"\nb\t2\n");
    }
}
