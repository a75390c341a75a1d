//! Natural-loop discovery and the optional loop-exit lowering.
//!
//! Dominators follow the iterative scheme of Cooper, Harvey and Kennedy over
//! reverse postorder. A back edge is an edge whose target dominates its
//! source; loops sharing a header are merged. A retreating edge whose target
//! does not dominate its source marks an irreducible region, which is
//! reported and left alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{is_abort_block, InstrumentError, TransformReport};
use crate::ir::{BinOp, BlockId, Callee, Function, InstrId, InstrKind, Intrinsic, Program};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NaturalLoop {
    pub header: BlockId,
    pub body: BTreeSet<BlockId>,
    /// Sources of the back edges into `header`.
    pub latches: Vec<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoopExitInfo {
    pub func: String,
    /// Program-wide loop number passed to `loop_exit`.
    pub loop_id: u32,
    pub header: BlockId,
    pub exit: BlockId,
    pub checks: usize,
    pub budget: u32,
    /// Accesses whose skips count toward this loop's budget.
    pub guarded: Vec<InstrId>,
    /// Counter resets executed on each entry into the loop.
    pub resets: Vec<InstrId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum LoopIssue {
    IrreducibleLoop {
        func: String,
        header: BlockId,
    },
    NoLoopExit {
        func: String,
        header: BlockId,
        exits: Vec<BlockId>,
    },
}

fn reverse_postorder(f: &Function) -> Vec<BlockId> {
    let mut seen = BTreeSet::new();
    let mut post = Vec::new();
    let mut stack = vec![(f.entry, 0usize)];
    seen.insert(f.entry);
    while let Some((b, k)) = stack.pop() {
        let succs = &f.blocks[&b].succs;
        if k < succs.len() {
            stack.push((b, k + 1));
            let s = succs[k];
            if f.blocks.contains_key(&s) && seen.insert(s) {
                stack.push((s, 0));
            }
        } else {
            post.push(b);
        }
    }
    post.reverse();
    post
}

/// Immediate dominators of the blocks reachable from the entry.
pub fn dominators(f: &Function) -> BTreeMap<BlockId, BlockId> {
    let rpo = reverse_postorder(f);
    let order: BTreeMap<BlockId, usize> = rpo.iter().enumerate().map(|(i, b)| (*b, i)).collect();
    let mut idom: BTreeMap<BlockId, BlockId> = BTreeMap::new();
    idom.insert(f.entry, f.entry);
    let intersect = |idom: &BTreeMap<BlockId, BlockId>, mut a: BlockId, mut b: BlockId| {
        while a != b {
            while order[&a] > order[&b] {
                a = idom[&a];
            }
            while order[&b] > order[&a] {
                b = idom[&b];
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for b in rpo.iter().skip(1) {
            let mut new = None;
            for p in &f.blocks[b].preds {
                if !idom.contains_key(p) {
                    continue;
                }
                new = Some(match new {
                    None => *p,
                    Some(cur) => intersect(&idom, *p, cur),
                });
            }
            if let Some(n) = new {
                if idom.get(b) != Some(&n) {
                    idom.insert(*b, n);
                    changed = true;
                }
            }
        }
    }
    idom
}

fn dominates(idom: &BTreeMap<BlockId, BlockId>, a: BlockId, mut b: BlockId) -> bool {
    loop {
        if a == b {
            return true;
        }
        match idom.get(&b) {
            Some(p) if *p != b => b = *p,
            _ => return false,
        }
    }
}

/// Natural loops of `f` plus the headers of irreducible regions.
pub fn natural_loops(f: &Function) -> (Vec<NaturalLoop>, Vec<BlockId>) {
    let idom = dominators(f);
    let mut loops: BTreeMap<BlockId, NaturalLoop> = BTreeMap::new();
    let mut irreducible = BTreeSet::new();

    // DFS with an explicit on-stack set to classify retreating edges.
    let mut on_stack = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![(f.entry, 0usize)];
    seen.insert(f.entry);
    on_stack.insert(f.entry);
    while let Some((b, k)) = stack.pop() {
        let succs = &f.blocks[&b].succs;
        if k < succs.len() {
            stack.push((b, k + 1));
            let s = succs[k];
            if on_stack.contains(&s) {
                if dominates(&idom, s, b) {
                    let l = loops.entry(s).or_insert_with(|| NaturalLoop {
                        header: s,
                        body: BTreeSet::from([s]),
                        latches: Vec::new(),
                    });
                    if !l.latches.contains(&b) {
                        l.latches.push(b);
                    }
                } else {
                    irreducible.insert(s);
                }
            } else if f.blocks.contains_key(&s) && seen.insert(s) {
                on_stack.insert(s);
                stack.push((s, 0));
            }
        } else {
            on_stack.remove(&b);
        }
    }
    // Back edges found as forward/cross edges in DFS order still count.
    for b in f.blocks.keys().filter(|b| idom.contains_key(b)) {
        for s in &f.blocks[b].succs {
            if dominates(&idom, *s, *b) {
                let l = loops.entry(*s).or_insert_with(|| NaturalLoop {
                    header: *s,
                    body: BTreeSet::from([*s]),
                    latches: Vec::new(),
                });
                if !l.latches.contains(b) {
                    l.latches.push(*b);
                }
            }
        }
    }
    for l in loops.values_mut() {
        let mut work: Vec<BlockId> = l.latches.clone();
        while let Some(n) = work.pop() {
            if l.body.insert(n) {
                work.extend(f.blocks[&n].preds.iter().copied());
            }
        }
    }
    (loops.into_values().collect(), irreducible.into_iter().collect())
}

/// Give each natural loop containing skip-routed checks a skip counter that
/// is reset on loop entry; once it reaches `budget`, control leaves the loop
/// through a `loop_exit(loop_id, count)` call.
pub fn lower_loop_exit(p: &Program, budget: u32) -> Result<(Program, TransformReport), InstrumentError> {
    if budget == 0 {
        return Err(InstrumentError::ZeroBudget);
    }
    if !super::consistent_with(p, super::Mode::Cima) {
        return Err(InstrumentError::NotTransformed);
    }
    let mut out = p.clone();
    let mut report = TransformReport::default();
    let mut next_id = 0u32;
    for f in &mut out.functions {
        let (loops, irreducible) = natural_loops(f);
        for h in irreducible {
            report.loop_issues.push(LoopIssue::IrreducibleLoop {
                func: f.name.clone(),
                header: h,
            });
        }
        // Each check belongs to its innermost (smallest) enclosing loop.
        let mut owned: BTreeMap<BlockId, Vec<(BlockId, BlockId, InstrId)>> = BTreeMap::new();
        for b in f.blocks.values() {
            let Some(InstrKind::Check { fail, access, .. }) = b.terminator().map(|t| &t.kind) else {
                continue;
            };
            if is_abort_block(f, *fail) {
                continue;
            }
            let inner = loops
                .iter()
                .filter(|l| l.body.contains(&b.id))
                .min_by_key(|l| l.body.len());
            if let Some(l) = inner {
                owned.entry(l.header).or_default().push((b.id, *fail, *access));
            }
        }
        for l in &loops {
            let Some(checks) = owned.get(&l.header) else {
                continue;
            };
            let header_exits: BTreeSet<BlockId> = f.blocks[&l.header]
                .succs
                .iter()
                .filter(|s| !l.body.contains(s))
                .copied()
                .collect();
            let all_exits: BTreeSet<BlockId> = l
                .body
                .iter()
                .flat_map(|b| f.blocks[b].succs.iter())
                .filter(|s| !l.body.contains(s))
                .copied()
                .collect();
            let exit = if header_exits.len() == 1 {
                *header_exits.iter().next().expect("one exit")
            } else if all_exits.len() == 1 {
                *all_exits.iter().next().expect("one exit")
            } else {
                report.loop_issues.push(LoopIssue::NoLoopExit {
                    func: f.name.clone(),
                    header: l.header,
                    exits: all_exits.into_iter().collect(),
                });
                continue;
            };
            let id = next_id;
            next_id += 1;
            let cnt = f.add_reg(format!("lx{id}.cnt"));
            let one = f.add_reg(format!("lx{id}.one"));
            let lim = f.add_reg(format!("lx{id}.lim"));
            let hit = f.add_reg(format!("lx{id}.hit"));
            let lid = f.add_reg(format!("lx{id}.id"));

            let entries: Vec<BlockId> = f.blocks[&l.header]
                .preds
                .iter()
                .filter(|p| !l.body.contains(p))
                .copied()
                .collect();
            let mut resets = Vec::new();
            for pred in entries {
                let reset = f.fresh_block();
                resets.push(f.push(reset, InstrKind::Const { dst: cnt, value: 0 }, true));
                f.push(reset, InstrKind::Jump { target: l.header }, true);
                f.redirect_edge(pred, l.header, reset)?;
            }

            let stub = f.fresh_block();
            f.push(
                stub,
                InstrKind::Const {
                    dst: lid,
                    value: id as i64,
                },
                true,
            );
            f.push(
                stub,
                InstrKind::Call {
                    dst: None,
                    callee: Callee::Intrinsic(Intrinsic::LoopExit),
                    args: vec![lid, cnt],
                },
                true,
            );
            f.push(stub, InstrKind::Jump { target: exit }, true);

            for (check_bb, target, _) in checks {
                let skip = f.fresh_block();
                f.push(skip, InstrKind::Const { dst: one, value: 1 }, true);
                f.push(
                    skip,
                    InstrKind::Arith {
                        dst: cnt,
                        op: BinOp::Add,
                        lhs: cnt,
                        rhs: one,
                    },
                    true,
                );
                f.push(
                    skip,
                    InstrKind::Const {
                        dst: lim,
                        value: budget as i64,
                    },
                    true,
                );
                f.push(
                    skip,
                    InstrKind::Arith {
                        dst: hit,
                        op: BinOp::Ge,
                        lhs: cnt,
                        rhs: lim,
                    },
                    true,
                );
                f.push(
                    skip,
                    InstrKind::Branch {
                        cond: hit,
                        then_bb: stub,
                        else_bb: *target,
                    },
                    true,
                );
                f.redirect_edge(*check_bb, *target, skip)?;
            }
            report.loop_exits.push(LoopExitInfo {
                func: f.name.clone(),
                loop_id: id,
                header: l.header,
                exit,
                checks: checks.len(),
                budget,
                guarded: checks.iter().map(|c| c.2).collect(),
                resets,
            });
        }
    }
    Ok((out, report))
}
