use std::fs;
use std::path::PathBuf;

use cima_core::frontend::compile;
use cima_core::instrument::cima_transform;
use cima_core::ir::{function_to_dot, parse_program, print_program, verify};

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn transformed_dot(input: &str) -> String {
    let p = parse_program(&golden(input)).expect("golden IR parses");
    assert!(verify(&p).is_empty(), "{:?}", verify(&p));
    let (out, _) = cima_transform(&p).expect("transform");
    assert!(verify(&out).is_empty(), "{:?}", verify(&out));
    function_to_dot(&out, out.function("main").unwrap())
}

#[test]
fn successor_in_same_block_splits() {
    assert_eq!(transformed_dot("same_block.ir"), golden("same_block.dot"));
}

#[test]
fn successor_in_next_block_rewires_only() {
    assert_eq!(transformed_dot("next_block.ir"), golden("next_block.dot"));
}

#[test]
fn if_else_lowers_to_single_access_branches() {
    let p = compile(&golden("if_else.mpc")).expect("compiles");
    assert_eq!(print_program(&p), golden("if_else.ir"));
}
