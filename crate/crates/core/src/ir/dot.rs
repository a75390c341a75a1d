//! Graphviz rendering of control-flow graphs.

use std::fmt::Write as _;

use super::text::instr_text;
use super::{Function, InstrKind, Program};

/// One `digraph` per function. Block labels list the instructions, and
/// edges out of a check are labelled `fail`/`pass` (failing edge first),
/// out of a branch `then`/`else`.
pub fn function_to_dot(p: &Program, f: &Function) -> String {
    let mut out = String::new();
    writeln!(out, "digraph \"{}\" {{", f.name).unwrap();
    writeln!(out, "  node [shape=box];").unwrap();
    for b in f.blocks.values() {
        let mut label = format!("{}:\\l", b.id);
        for i in &b.instrs {
            label.push_str(&instr_text(p, f, i).replace('"', "\\\""));
            label.push_str("\\l");
        }
        let entry = if b.id == f.entry { ", style=bold" } else { "" };
        writeln!(out, "  {} [label=\"{label}\"{entry}];", b.id).unwrap();
    }
    for b in f.blocks.values() {
        let labels: &[&str] = match b.instrs.last().map(|i| &i.kind) {
            Some(InstrKind::Check { .. }) => &["fail", "pass"],
            Some(InstrKind::Branch { .. }) => &["then", "else"],
            _ => &[],
        };
        for (k, s) in b.succs.iter().enumerate() {
            match labels.get(k) {
                Some(l) => writeln!(out, "  {} -> {s} [label=\"{l}\"];", b.id).unwrap(),
                None => writeln!(out, "  {} -> {s};", b.id).unwrap(),
            }
        }
    }
    writeln!(out, "}}").unwrap();
    out
}

pub fn program_to_dot(p: &Program) -> String {
    p.functions
        .iter()
        .map(|f| function_to_dot(p, f))
        .collect::<Vec<_>>()
        .join("\n")
}
