//! The extraction frontend: a small imperative source language, its parser,
//! a trap-file emitter, and the importer that assigns stable entity ids and
//! builds the extensional database an analysis runs over.
//!
//! The pipeline is `source text -> AST -> trap file -> database`:
//!
//! 1. [`parse_minilang`] parses one source file.
//! 2. [`extract_trap`] walks the AST and emits one [`TrapFile`] whose label
//!    keys are derived from tree paths, so unchanged code re-extracts to
//!    identical directives.
//! 3. [`import_traps`] assigns ids ([`IdMode::NodePath`] hashes keys,
//!    [`IdMode::BumpCounter`] numbers them sequentially with per-file
//!    range bumps) and materializes tuples.
//! 4. [`diff_edb`] compares the database before and after an edit and
//!    produces the [`crate::engine::Delta`] to feed the running engine.

pub mod ast;
pub mod diff;
pub mod extract;
pub mod import;
pub mod parser;
pub mod trap;

pub use ast::{Expr, Function, SourceFile, Stmt};
pub use diff::{diff_edb, ArityMismatch};
pub use extract::{extract_trap, extracted_schema};
pub use import::{fnv1a64, import_traps, IdMode, ImportError};
pub use parser::{parse_minilang, SyntaxError};
pub use trap::{TrapArg, TrapDirective, TrapFile, TrapKey, TrapParseError};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Delta;
    use crate::value::{Value, FRESH_ID_BIT};

    fn parse(source: &str, path: &str) -> SourceFile {
        parse_minilang(source, path).expect("fixture parses")
    }

    const SMALL: &str = "\
fn get(obj) {
  let v = obj.data;
  return v;
}

fn main(input) {
  let boxed = wrap(input, 3);
  boxed.data = input;
  if (input > 0) {
    print(get(boxed));
  } else {
    print(\"none\");
  }
}
";

    #[test]
    fn parser_round_trips_through_the_renderer() {
        let file = parse(SMALL, "src/small.ml");
        let rendered = file.render();
        let reparsed = parse(&rendered, "src/small.ml");
        assert_eq!(reparsed.render(), rendered);
    }

    #[test]
    fn parse_then_render_is_identity_on_rendered_text() {
        let once = parse(SMALL, "src/small.ml").render();
        let reparsed = parse(&once, "src/small.ml");
        assert_eq!(reparsed, parse(&reparsed.render(), "src/small.ml"));
    }

    #[test]
    fn parser_handles_precedence_and_parens() {
        let file = parse(
            "fn f(a, b) { let x = a + b * 2 == 7 && b < a; let y = (a + b) * 2; }",
            "p.ml",
        );
        let rendered = file.render();
        assert!(rendered.contains("let x = a + b * 2 == 7 && b < a;"));
        assert!(rendered.contains("let y = (a + b) * 2;"));
        assert_eq!(parse(&rendered, "p.ml").render(), rendered);
    }

    #[test]
    fn parser_reports_position_of_errors() {
        let err = parse_minilang("fn f() {\n  let x = ;\n}", "bad.ml").unwrap_err();
        assert_eq!(err.line, 2);
        assert_eq!(err.file, "bad.ml");
        assert!(err.message.contains("expected an expression"));
    }

    #[test]
    fn extraction_is_deterministic() {
        let file = parse(SMALL, "src/small.ml");
        assert_eq!(extract_trap(&file), extract_trap(&file));
    }

    #[test]
    fn extraction_emits_only_declared_relations() {
        let file = parse(SMALL, "src/small.ml");
        let schema: std::collections::BTreeMap<&str, usize> = extracted_schema()
            .into_iter()
            .map(|(name, cols)| (name, cols.len()))
            .collect();
        for directive in &extract_trap(&file).directives {
            if let TrapDirective::TupleInsert { relation, args } = directive {
                let arity = schema
                    .get(relation.as_str())
                    .unwrap_or_else(|| panic!("relation `{relation}` not in schema"));
                assert_eq!(*arity, args.len(), "arity of `{relation}`");
            }
        }
    }

    #[test]
    fn trap_files_round_trip_as_text() {
        let file = parse(SMALL, "src/small.ml");
        let trap = extract_trap(&file);
        let text = trap.render();
        assert_eq!(TrapFile::parse(&text).expect("reparse"), trap);
    }

    #[test]
    fn labels_are_defined_before_use() {
        let file = parse(SMALL, "src/small.ml");
        let trap = extract_trap(&file);
        let mut defined = std::collections::BTreeSet::new();
        for directive in &trap.directives {
            match directive {
                TrapDirective::LabelDef { label, .. } => {
                    assert!(defined.insert(label.clone()), "label `{label}` redefined");
                }
                TrapDirective::TupleInsert { args, .. } => {
                    for arg in args {
                        if let TrapArg::Label(label) = arg {
                            assert!(defined.contains(label), "label `{label}` used early");
                        }
                    }
                }
                TrapDirective::BumpIdCounter => {}
            }
        }
    }

    #[test]
    fn both_id_modes_build_the_same_database_shape() {
        let file = parse(SMALL, "src/small.ml");
        let trap = extract_trap(&file);
        let hashed = import_traps(std::slice::from_ref(&trap), IdMode::NodePath).expect("import");
        let counted = import_traps(&[trap], IdMode::BumpCounter).expect("import");
        let names = |db: &crate::value::Database| {
            db.relations.keys().cloned().collect::<Vec<_>>()
        };
        assert_eq!(names(&hashed), names(&counted));
        for (name, relation) in &hashed.relations {
            assert_eq!(
                relation.len(),
                counted.relations[name].len(),
                "cardinality of `{name}`"
            );
        }
    }

    #[test]
    fn imported_ids_never_use_the_fresh_namespace() {
        let file = parse(SMALL, "src/small.ml");
        let trap = extract_trap(&file);
        for mode in [IdMode::NodePath, IdMode::BumpCounter] {
            let db = import_traps(std::slice::from_ref(&trap), mode).expect("import");
            for relation in db.relations.values() {
                for tuple in relation {
                    for value in tuple {
                        if let Value::Id(id) = value {
                            assert_eq!(id & FRESH_ID_BIT, 0, "{mode:?} minted a fresh-range id");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn node_path_ids_survive_edits_to_other_files() {
        let a = parse(SMALL, "src/a.ml");
        let b0 = parse("fn b() { return 1; }", "src/b.ml");
        let b1 = parse("fn b() { let z = 9; return z; }", "src/b.ml");
        let before = import_traps(&[extract_trap(&a), extract_trap(&b0)], IdMode::NodePath)
            .expect("import");
        let after = import_traps(&[extract_trap(&a), extract_trap(&b1)], IdMode::NodePath)
            .expect("import");
        // Every tuple whose file is `a` must be bit-identical across imports:
        // check that the full `a`-only import is a subset of both.
        let only_a = import_traps(&[extract_trap(&a)], IdMode::NodePath).expect("import");
        for (name, relation) in &only_a.relations {
            for tuple in relation {
                assert!(before.relations[name].contains(tuple));
                assert!(after.relations[name].contains(tuple));
            }
        }
    }

    #[test]
    fn bump_counter_ids_survive_growth_in_earlier_files() {
        let a0 = parse("fn a() { return 1; }", "src/a.ml");
        let a1 = parse("fn a() { let x = 2; let y = 3; return x + y; }", "src/a.ml");
        let b = parse(SMALL, "src/b.ml");
        let before =
            import_traps(&[extract_trap(&a0), extract_trap(&b)], IdMode::BumpCounter).expect("ok");
        let after =
            import_traps(&[extract_trap(&a1), extract_trap(&b)], IdMode::BumpCounter).expect("ok");
        // `b` is the second file in both imports, so its ids start at the
        // first million boundary regardless of how much `a` grew.
        let b_rows = |db: &crate::value::Database| {
            db.relations["func_def"]
                .iter()
                .filter(|t| t[1] == Value::str("get") || t[1] == Value::str("main"))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(b_rows(&before), b_rows(&after));
        assert!(!b_rows(&before).is_empty());
    }

    #[test]
    fn statement_insertion_shifts_only_following_siblings() {
        // Appending a statement at the end of a function leaves every
        // existing node's path — and therefore its hashed id — intact;
        // inserting at the front renames all following siblings.
        let tail0 = parse("fn f() { let a = 1; }", "t.ml");
        let tail1 = parse("fn f() { let a = 1; let b = 2; }", "t.ml");
        let d_tail = diff_edb(
            &import_traps(&[extract_trap(&tail0)], IdMode::NodePath).expect("ok"),
            &import_traps(&[extract_trap(&tail1)], IdMode::NodePath).expect("ok"),
        )
        .expect("diff");
        let head1 = parse("fn f() { let b = 2; let a = 1; }", "t.ml");
        let d_head = diff_edb(
            &import_traps(&[extract_trap(&tail0)], IdMode::NodePath).expect("ok"),
            &import_traps(&[extract_trap(&head1)], IdMode::NodePath).expect("ok"),
        )
        .expect("diff");
        assert!(
            d_tail.tuple_count() < d_head.tuple_count(),
            "tail insert ({}) should be cheaper than head insert ({})",
            d_tail.tuple_count(),
            d_head.tuple_count()
        );
    }

    #[test]
    fn duplicate_and_dangling_labels_are_rejected() {
        let dup = TrapFile::parse("#a = *\n#a = *\n").expect("parse");
        assert_eq!(
            import_traps(&[dup], IdMode::BumpCounter),
            Err(ImportError::DuplicateLabel {
                file: 0,
                label: "a".to_owned()
            })
        );
        let dangling = TrapFile::parse("loc(#ghost, 1)\n").expect("parse");
        assert_eq!(
            import_traps(&[dangling], IdMode::NodePath),
            Err(ImportError::DanglingLabel {
                file: 0,
                label: "ghost".to_owned()
            })
        );
    }

    #[test]
    fn labels_are_scoped_to_their_file_but_keys_are_global() {
        let first = TrapFile::parse("#n = @\"shared#key\"\nmark(#n)\n").expect("parse");
        let second = TrapFile::parse("#m = @\"shared#key\"\nseen(#m)\n").expect("parse");
        let db = import_traps(&[first, second], IdMode::BumpCounter).expect("import");
        let mark = db.relations["mark"].iter().next().expect("row");
        let seen = db.relations["seen"].iter().next().expect("row");
        assert_eq!(mark[0], seen[0], "same key must map to the same id");
    }

    #[test]
    fn diff_edb_produces_the_exact_set_difference() {
        let mut old = crate::value::Database::new();
        old.insert("edge", vec![Value::Id(1), Value::Id(2)]);
        old.insert("edge", vec![Value::Id(2), Value::Id(3)]);
        old.insert("gone", vec![Value::Int(7)]);
        let mut new = crate::value::Database::new();
        new.insert("edge", vec![Value::Id(2), Value::Id(3)]);
        new.insert("edge", vec![Value::Id(3), Value::Id(4)]);
        let delta = diff_edb(&old, &new).expect("diff");
        assert_eq!(delta.tuple_count(), 3);
        let mut expected = Delta::new();
        expected.insert("edge", vec![Value::Id(3), Value::Id(4)]);
        expected.delete("edge", vec![Value::Id(1), Value::Id(2)]);
        expected.delete("gone", vec![Value::Int(7)]);
        assert_eq!(delta, expected);
        assert!(diff_edb(&old, &old).expect("diff").is_empty());
    }

    #[test]
    fn diff_edb_rejects_arity_changes() {
        let mut old = crate::value::Database::new();
        old.insert("r", vec![Value::Int(1)]);
        let mut new = crate::value::Database::new();
        new.insert("r", vec![Value::Int(1), Value::Int(2)]);
        assert_eq!(
            diff_edb(&old, &new),
            Err(ArityMismatch {
                relation: "r".to_owned(),
                old: 1,
                new: 2,
            })
        );
    }
}
