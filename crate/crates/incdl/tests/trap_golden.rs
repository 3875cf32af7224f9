//! Pins the trap output format: the committed golden file is compared byte
//! for byte, so any change to directive syntax, key derivation, emission
//! order, or the trailing `bump_id_counter` shows up as a test failure.

use incdl::frontend::{extract_trap, parse_minilang, TrapDirective, TrapFile};

const SOURCE: &str = include_str!("../testdata/golden.ml");
const GOLDEN: &str = include_str!("../testdata/golden.trap");

fn extracted() -> TrapFile {
    let file = parse_minilang(SOURCE, "src/golden.ml").expect("fixture parses");
    extract_trap(&file)
}

#[test]
fn extraction_matches_the_committed_golden_byte_for_byte() {
    let rendered = extracted().render();
    if std::env::var_os("TRAP_GOLDEN_WRITE").is_some() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/testdata/golden.trap");
        std::fs::write(path, &rendered).expect("rewrite golden");
        return;
    }
    assert_eq!(
        rendered, GOLDEN,
        "trap output changed; diff against testdata/golden.trap, \
         or rerun with TRAP_GOLDEN_WRITE=1 to accept"
    );
}

#[test]
fn golden_ends_with_a_counter_bump() {
    let trap = TrapFile::parse(GOLDEN).expect("golden parses");
    assert_eq!(trap.directives.last(), Some(&TrapDirective::BumpIdCounter));
}

#[test]
fn golden_parses_back_to_the_extracted_directives() {
    assert_eq!(TrapFile::parse(GOLDEN).expect("golden parses"), extracted());
}
