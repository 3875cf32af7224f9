//! Importing trap files into an extensional database.
//!
//! The importer assigns a concrete 64-bit id to every label and materializes
//! tuple directives as database rows. Two id-assignment modes exist:
//!
//! - [`IdMode::NodePath`] hashes each global key, so an entity's id depends
//!   only on its own key. Re-importing a project after editing one file
//!   leaves every id from the untouched files bit-identical, which keeps
//!   database diffs proportional to the edit.
//! - [`IdMode::BumpCounter`] assigns ids sequentially. The
//!   `bump_id_counter` directive at the end of each trap file jumps the
//!   counter to the next million boundary, so later files still start at
//!   the same id after an earlier file grows or shrinks — only ids inside
//!   the edited file move.
//!
//! Hashed ids always have a clear top bit, so they can never collide with
//!   the ids the evaluation engine mints for fresh-id rules.

use std::collections::BTreeMap;

use crate::value::{Database, Value, FRESH_ID_BIT};

use super::trap::{TrapArg, TrapDirective, TrapFile, TrapKey};

/// How the importer assigns ids to labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdMode {
    /// Hash each global key with FNV-1a; ids are a pure function of the key.
    NodePath,
    /// Assign ids from a counter that jumps to the next million at each
    /// `bump_id_counter` directive.
    BumpCounter,
}

/// A failure while importing trap files. `file` is the 0-based index of the
/// offending trap file in the imported slice.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ImportError {
    #[error("trap file {file}: label `#{label}` defined twice")]
    DuplicateLabel { file: usize, label: String },
    #[error("trap file {file}: label `#{label}` used before definition")]
    DanglingLabel { file: usize, label: String },
    #[error("id collision: keys `{key_a}` and `{key_b}` both hash to {id:#x}")]
    KeyCollision { key_a: String, key_b: String, id: u64 },
    #[error("trap file {file}: local ids exhausted")]
    LocalIdsExhausted { file: usize },
}

/// 64-bit FNV-1a over the key's UTF-8 bytes.
pub fn fnv1a64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Owner {
    Key(String),
    Local,
}

/// Import an ordered sequence of trap files into one database.
///
/// Labels are file-scoped; global keys are shared across the whole import,
/// so a key that appears in two files maps to the same id. The relation
/// set of the result is exactly the set of relation names that appear in
/// tuple directives.
pub fn import_traps(traps: &[TrapFile], mode: IdMode) -> Result<Database, ImportError> {
    let mut db = Database::new();
    // Global key -> id, shared across files.
    let mut interned: BTreeMap<String, u64> = BTreeMap::new();
    // Every assigned id -> what owns it, to detect hash collisions.
    let mut owners: BTreeMap<u64, Owner> = BTreeMap::new();
    // BumpCounter mode: next id to hand out. NodePath mode: next candidate
    // local id (advanced past any id already taken by a hash).
    let mut counter: u64 = 1;

    for (file, trap) in traps.iter().enumerate() {
        let mut labels: BTreeMap<&str, u64> = BTreeMap::new();
        for directive in &trap.directives {
            match directive {
                TrapDirective::LabelDef { label, key } => {
                    if labels.contains_key(label.as_str()) {
                        return Err(ImportError::DuplicateLabel {
                            file,
                            label: label.clone(),
                        });
                    }
                    let id = match key {
                        TrapKey::Global(key) => {
                            if let Some(&id) = interned.get(key) {
                                id
                            } else {
                                let id = match mode {
                                    IdMode::NodePath => {
                                        let id = fnv1a64(key) & !FRESH_ID_BIT;
                                        match owners.get(&id) {
                                            None => id,
                                            Some(Owner::Key(other)) => {
                                                return Err(ImportError::KeyCollision {
                                                    key_a: other.clone(),
                                                    key_b: key.clone(),
                                                    id,
                                                })
                                            }
                                            Some(Owner::Local) => {
                                                return Err(ImportError::KeyCollision {
                                                    key_a: "<local id>".to_owned(),
                                                    key_b: key.clone(),
                                                    id,
                                                })
                                            }
                                        }
                                    }
                                    IdMode::BumpCounter => {
                                        let id = counter;
                                        counter += 1;
                                        id
                                    }
                                };
                                interned.insert(key.clone(), id);
                                owners.insert(id, Owner::Key(key.clone()));
                                id
                            }
                        }
                        TrapKey::Local => {
                            if mode == IdMode::NodePath {
                                // Skip over ids already owned by hashed keys.
                                while owners.contains_key(&counter) {
                                    counter += 1;
                                }
                            }
                            if counter & FRESH_ID_BIT != 0 {
                                return Err(ImportError::LocalIdsExhausted { file });
                            }
                            let id = counter;
                            counter += 1;
                            owners.insert(id, Owner::Local);
                            id
                        }
                    };
                    labels.insert(label, id);
                }
                TrapDirective::TupleInsert { relation, args } => {
                    let mut tuple = Vec::with_capacity(args.len());
                    for arg in args {
                        tuple.push(match arg {
                            TrapArg::Label(label) => {
                                let id = labels.get(label.as_str()).ok_or_else(|| {
                                    ImportError::DanglingLabel {
                                        file,
                                        label: label.clone(),
                                    }
                                })?;
                                Value::Id(*id)
                            }
                            TrapArg::Int(n) => Value::Int(*n),
                            TrapArg::Str(s) => Value::str(s),
                        });
                    }
                    db.insert(relation, tuple);
                }
                TrapDirective::BumpIdCounter => {
                    if mode == IdMode::BumpCounter {
                        counter = (counter / 1_000_000 + 1) * 1_000_000;
                    }
                }
            }
        }
    }
    Ok(db)
}
