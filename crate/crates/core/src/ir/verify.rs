//! Structural well-formedness checks over a whole program.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;

use super::{Base, BlockId, Callee, Function, InstrId, InstrKind, Program, Reg};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    MissingMain {
        name: String,
    },
    DuplicateGlobal {
        name: String,
    },
    DuplicateFunction {
        name: String,
    },
    MissingEntry {
        func: String,
        entry: BlockId,
    },
    BlockKeyMismatch {
        func: String,
        key: BlockId,
        id: BlockId,
    },
    EmptyBlock {
        func: String,
        block: BlockId,
    },
    MissingTerminator {
        func: String,
        block: BlockId,
    },
    MisplacedTerminator {
        func: String,
        block: BlockId,
        instr: InstrId,
    },
    DanglingEdge {
        func: String,
        from: BlockId,
        to: BlockId,
    },
    SuccMismatch {
        func: String,
        block: BlockId,
    },
    PredMismatch {
        func: String,
        block: BlockId,
        pred: BlockId,
    },
    EntryHasPreds {
        func: String,
        entry: BlockId,
    },
    ExtraRoot {
        func: String,
        block: BlockId,
    },
    Unreachable {
        func: String,
        block: BlockId,
    },
    NoExitPath {
        func: String,
        block: BlockId,
    },
    DuplicateInstrId {
        func: String,
        instr: InstrId,
    },
    StaleIdCounter {
        func: String,
    },
    UnknownCallee {
        func: String,
        instr: InstrId,
        callee: String,
    },
    ArityMismatch {
        func: String,
        instr: InstrId,
        expected: usize,
        found: usize,
    },
    UnknownArray {
        func: String,
        instr: InstrId,
        name: String,
    },
    BadRegister {
        func: String,
        instr: InstrId,
    },
    CheckNotGuarding {
        func: String,
        block: BlockId,
        access: InstrId,
    },
}

/// Every invariant violation found in `p`; empty iff the program is
/// well-formed.
pub fn verify(p: &Program) -> Vec<Violation> {
    let mut out = Vec::new();
    if p.function(&p.main).is_none() {
        out.push(Violation::MissingMain { name: p.main.clone() });
    }
    let mut names = HashSet::new();
    for g in p
        .globals
        .iter()
        .map(|g| &g.name)
        .chain(p.scalars.iter().map(|s| &s.name))
    {
        if !names.insert(g.as_str()) {
            out.push(Violation::DuplicateGlobal { name: g.clone() });
        }
    }
    let mut fnames = HashSet::new();
    for f in &p.functions {
        if !fnames.insert(f.name.as_str()) {
            out.push(Violation::DuplicateFunction { name: f.name.clone() });
        }
        verify_function(p, f, &mut out);
    }
    out
}

fn verify_function(p: &Program, f: &Function, out: &mut Vec<Violation>) {
    let func = || f.name.clone();
    if !f.blocks.contains_key(&f.entry) {
        out.push(Violation::MissingEntry {
            func: func(),
            entry: f.entry,
        });
        return;
    }

    let mut ids = HashSet::new();
    let mut max_block = 0;
    let mut max_instr = 0;
    for (key, b) in &f.blocks {
        if *key != b.id {
            out.push(Violation::BlockKeyMismatch {
                func: func(),
                key: *key,
                id: b.id,
            });
        }
        max_block = max_block.max(b.id.0 + 1);
        if b.instrs.is_empty() {
            out.push(Violation::EmptyBlock {
                func: func(),
                block: b.id,
            });
            continue;
        }
        for (pos, i) in b.instrs.iter().enumerate() {
            max_instr = max_instr.max(i.id.0 + 1);
            if !ids.insert(i.id) {
                out.push(Violation::DuplicateInstrId {
                    func: func(),
                    instr: i.id,
                });
            }
            let last = pos + 1 == b.instrs.len();
            if i.kind.is_terminator() && !last {
                out.push(Violation::MisplacedTerminator {
                    func: func(),
                    block: b.id,
                    instr: i.id,
                });
            }
            verify_operands(p, f, i.id, &i.kind, out);
        }
        let term = b.instrs.last().expect("non-empty");
        if !term.kind.is_terminator() {
            out.push(Violation::MissingTerminator {
                func: func(),
                block: b.id,
            });
        } else if term.kind.targets() != b.succs {
            out.push(Violation::SuccMismatch {
                func: func(),
                block: b.id,
            });
        }
        if let InstrKind::Check { access, pass, .. } = &term.kind {
            let guards = f
                .blocks
                .get(pass)
                .and_then(|pb| pb.instrs.first())
                .is_some_and(|first| first.id == *access && first.kind.is_memory_access());
            if !guards {
                out.push(Violation::CheckNotGuarding {
                    func: func(),
                    block: b.id,
                    access: *access,
                });
            }
        }
        for s in &b.succs {
            match f.blocks.get(s) {
                None => out.push(Violation::DanglingEdge {
                    func: func(),
                    from: b.id,
                    to: *s,
                }),
                Some(sb) if !sb.preds.contains(&b.id) => out.push(Violation::PredMismatch {
                    func: func(),
                    block: *s,
                    pred: b.id,
                }),
                _ => {}
            }
        }
        let unique: BTreeSet<_> = b.preds.iter().collect();
        if unique.len() != b.preds.len() {
            out.push(Violation::PredMismatch {
                func: func(),
                block: b.id,
                pred: b.id,
            });
        }
        for pr in &b.preds {
            let linked = f.blocks.get(pr).is_some_and(|pb| pb.succs.contains(&b.id));
            if !linked {
                out.push(Violation::PredMismatch {
                    func: func(),
                    block: b.id,
                    pred: *pr,
                });
            }
        }
    }
    if f.next_block < max_block || f.next_instr < max_instr {
        out.push(Violation::StaleIdCounter { func: func() });
    }

    if !f.blocks[&f.entry].preds.is_empty() {
        out.push(Violation::EntryHasPreds {
            func: func(),
            entry: f.entry,
        });
    }
    for b in f.blocks.values() {
        if b.id != f.entry && b.preds.is_empty() {
            out.push(Violation::ExtraRoot {
                func: func(),
                block: b.id,
            });
        }
    }
    let reachable: BTreeSet<BlockId> = f.reachable().into_iter().collect();
    for b in f.blocks.keys() {
        if !reachable.contains(b) {
            out.push(Violation::Unreachable {
                func: func(),
                block: *b,
            });
        }
    }

    // Backward reachability from exits: every live block must be able to
    // reach a Return or Abort.
    let mut can_exit: BTreeSet<BlockId> = f
        .blocks
        .values()
        .filter(|b| {
            matches!(
                b.instrs.last().map(|i| &i.kind),
                Some(InstrKind::Return { .. } | InstrKind::Abort { .. })
            )
        })
        .map(|b| b.id)
        .collect();
    let mut work: Vec<BlockId> = can_exit.iter().copied().collect();
    while let Some(b) = work.pop() {
        for p in &f.blocks[&b].preds {
            if f.blocks.contains_key(p) && can_exit.insert(*p) {
                work.push(*p);
            }
        }
    }
    for b in &reachable {
        if !can_exit.contains(b) {
            out.push(Violation::NoExitPath {
                func: func(),
                block: *b,
            });
        }
    }
}

fn verify_operands(p: &Program, f: &Function, id: InstrId, kind: &InstrKind, out: &mut Vec<Violation>) {
    let reg_ok = |r: Reg| match r {
        Reg::Local(i) => (i as usize) < f.regs.len(),
        Reg::Global(i) => (i as usize) < p.scalars.len(),
    };
    let regs = kind.uses().into_iter().chain(kind.def());
    if !regs.into_iter().all(reg_ok) {
        out.push(Violation::BadRegister {
            func: f.name.clone(),
            instr: id,
        });
    }
    let base = match kind {
        InstrKind::MemRead { base, .. } | InstrKind::MemWrite { base, .. } | InstrKind::Check { base, .. } => {
            Some(base)
        }
        _ => None,
    };
    match base {
        Some(Base::Local(name)) if f.local_slot(name).is_none() => out.push(Violation::UnknownArray {
            func: f.name.clone(),
            instr: id,
            name: name.clone(),
        }),
        Some(Base::Global(name)) if p.global(name).is_none() => out.push(Violation::UnknownArray {
            func: f.name.clone(),
            instr: id,
            name: name.clone(),
        }),
        _ => {}
    }
    if let InstrKind::Call { callee, args, .. } = kind {
        let expected = match callee {
            Callee::Intrinsic(i) => Some(i.arity()),
            Callee::Function(name) => p.function(name).map(|g| g.params.len()),
        };
        match expected {
            None => out.push(Violation::UnknownCallee {
                func: f.name.clone(),
                instr: id,
                callee: callee.to_string(),
            }),
            Some(n) if n != args.len() => out.push(Violation::ArityMismatch {
                func: f.name.clone(),
                instr: id,
                expected: n,
                found: args.len(),
            }),
            _ => {}
        }
    }
}
