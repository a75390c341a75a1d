//! Instrumentation passes.
//!
//! [`insert_checks`] guards every memory access with a check block whose
//! failing edge leads to a fresh abort block. [`cima_transform`] then rewires
//! each failing edge to the access's target instruction, splitting the
//! access's block when the target sits in it, and drops the orphaned abort
//! blocks. [`lower_loop_exit`] optionally adds per-loop skip counters that
//! leave a loop once its budget of skips is reached.

mod loops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loops::{lower_loop_exit, natural_loops, LoopExitInfo, LoopIssue, NaturalLoop};

use crate::ir::{verify, BlockId, InstrId, InstrKind, IrError, Program, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    None,
    Abort,
    Cima,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::None, Mode::Abort, Mode::Cima];

    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Abort => "abort",
            Mode::Cima => "cima",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Mode::None),
            "abort" => Ok(Mode::Abort),
            "cima" => Ok(Mode::Cima),
            other => Err(format!("unknown mode `{other}` (expected none, abort or cima)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstrumentationConfig {
    pub mode: Mode,
    /// Skips tolerated per loop execution before the loop is left. Only
    /// valid together with [`Mode::Cima`].
    pub loop_exit_budget: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckSite {
    pub func: String,
    pub access: InstrId,
    pub check_block: BlockId,
    pub abort_block: BlockId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub func: String,
    pub original: BlockId,
    pub head: BlockId,
    pub tail: BlockId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rewire {
    pub func: String,
    pub from: BlockId,
    pub removed: BlockId,
    pub added: BlockId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TransformReport {
    pub checks_inserted: usize,
    pub checks: Vec<CheckSite>,
    pub blocks_split: Vec<Split>,
    pub edges_rewired: Vec<Rewire>,
    /// Abort blocks present in the program after the pass.
    pub abort_blocks: Vec<(String, BlockId)>,
    /// Abort blocks deleted because nothing reached them any more.
    pub abort_blocks_pruned: Vec<(String, BlockId)>,
    pub loop_exits: Vec<LoopExitInfo>,
    pub loop_issues: Vec<LoopIssue>,
}

impl TransformReport {
    pub fn merge(&mut self, other: TransformReport) {
        self.checks_inserted += other.checks_inserted;
        self.checks.extend(other.checks);
        self.blocks_split.extend(other.blocks_split);
        self.edges_rewired.extend(other.edges_rewired);
        self.abort_blocks = other.abort_blocks;
        self.abort_blocks_pruned.extend(other.abort_blocks_pruned);
        self.loop_exits.extend(other.loop_exits);
        self.loop_issues.extend(other.loop_issues);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error("program has memory accesses but no checks to transform")]
    NotInstrumented,
    #[error("program still routes checks to abort blocks; run the skip transformation first")]
    NotTransformed,
    #[error("a loop-exit budget requires the cima mode")]
    BudgetRequiresCima,
    #[error("loop-exit budget must be positive")]
    ZeroBudget,
    #[error("program already carries checks that do not fit the {0} mode")]
    AlreadyInstrumented(Mode),
    #[error("input program is malformed: {0:?}")]
    InvalidInput(Vec<Violation>),
    #[error("{stage} produced a malformed program: {violations:?}")]
    BrokenOutput {
        stage: &'static str,
        violations: Vec<Violation>,
    },
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn abort_blocks(p: &Program) -> Vec<(String, BlockId)> {
    p.functions
        .iter()
        .flat_map(|f| {
            f.blocks
                .values()
                .filter(|b| matches!(b.instrs.first().map(|i| &i.kind), Some(InstrKind::Abort { .. })))
                .map(|b| (f.name.clone(), b.id))
        })
        .collect()
}

/// True when `bb` is an abort block produced by [`insert_checks`].
fn is_abort_block(f: &crate::ir::Function, bb: BlockId) -> bool {
    f.blocks
        .get(&bb)
        .and_then(|b| b.instrs.first())
        .is_some_and(|i| matches!(i.kind, InstrKind::Abort { access: Some(_) }))
}

/// Guard every memory access with a check block and a dedicated abort block.
/// Afterwards each access is the first instruction of its block and that
/// block's only predecessor is its check block.
pub fn insert_checks(p: &Program) -> Result<(Program, TransformReport), InstrumentError> {
    let mut out = p.clone();
    let mut report = TransformReport::default();
    for f in &mut out.functions {
        for access in f.memory_accesses() {
            let (bb, pos) = f.locate(access)?;
            let acc_bb = if pos > 0 {
                let (head, tail) = f.split_block_at(bb, pos)?;
                report.blocks_split.push(Split {
                    func: f.name.clone(),
                    original: bb,
                    head,
                    tail,
                });
                tail
            } else {
                bb
            };
            let (base, index) = {
                let instr = f.instr(access)?;
                let (b, i) = instr.kind.access_operands().expect("memory access");
                (b.clone(), i)
            };
            let check_bb = f.fresh_block();
            let abort_bb = f.fresh_block();
            let preds = f.block(acc_bb)?.preds.clone();
            for pred in preds {
                f.redirect_edge(pred, acc_bb, check_bb)?;
            }
            if f.entry == acc_bb {
                f.entry = check_bb;
            }
            f.push(abort_bb, InstrKind::Abort { access: Some(access) }, true);
            f.push(
                check_bb,
                InstrKind::Check {
                    base,
                    index,
                    width: 1,
                    access,
                    fail: abort_bb,
                    pass: acc_bb,
                },
                true,
            );
            report.checks.push(CheckSite {
                func: f.name.clone(),
                access,
                check_block: check_bb,
                abort_block: abort_bb,
            });
        }
    }
    report.checks_inserted = report.checks.len();
    report.abort_blocks = abort_blocks(&out);
    Ok((out, report))
}

/// Rewire every check's failing edge from its abort block to the block
/// holding the access's target instruction.
pub fn cima_transform(p: &Program) -> Result<(Program, TransformReport), InstrumentError> {
    let mut out = p.clone();
    let mut report = TransformReport::default();
    if out.check_count() == 0 {
        return if out.memory_access_count() == 0 {
            Ok((out, report))
        } else {
            Err(InstrumentError::NotInstrumented)
        };
    }
    for f in &mut out.functions {
        let sites: Vec<(BlockId, InstrId, BlockId, BlockId)> = f
            .blocks
            .values()
            .filter_map(|b| match b.terminator().map(|t| &t.kind) {
                Some(InstrKind::Check { access, fail, pass, .. }) => Some((b.id, *access, *fail, *pass)),
                _ => None,
            })
            .filter(|(_, _, fail, _)| is_abort_block(f, *fail))
            .collect();
        for (check_bb, access, abort_bb, acc_bb) in sites {
            let target = f.target_of(access)?;
            let t_bb = if target.same_block {
                let (i_bb, t_bb) = f.split_block(acc_bb, target.instr)?;
                report.blocks_split.push(Split {
                    func: f.name.clone(),
                    original: acc_bb,
                    head: i_bb,
                    tail: t_bb,
                });
                t_bb
            } else {
                target.block
            };
            f.redirect_edge(check_bb, abort_bb, t_bb)?;
            report.edges_rewired.push(Rewire {
                func: f.name.clone(),
                from: check_bb,
                removed: abort_bb,
                added: t_bb,
            });
            if f.block(abort_bb)?.preds.is_empty() {
                f.remove_block(abort_bb)?;
                report.abort_blocks_pruned.push((f.name.clone(), abort_bb));
            }
        }
    }
    report.abort_blocks = abort_blocks(&out);
    Ok((out, report))
}

/// Whether the checks in `p` are wired the way `mode` expects: no checks
/// for `None`, all to abort blocks for `Abort`, none to abort blocks for
/// `Cima`.
pub fn consistent_with(p: &Program, mode: Mode) -> bool {
    let mut checks = 0;
    let mut aborting = 0;
    for f in &p.functions {
        for b in f.blocks.values() {
            if let Some(InstrKind::Check { fail, .. }) = b.terminator().map(|t| &t.kind) {
                checks += 1;
                if is_abort_block(f, *fail) {
                    aborting += 1;
                }
            }
        }
    }
    let accesses = p.memory_access_count();
    match mode {
        Mode::None => checks == 0,
        Mode::Abort => checks == accesses && aborting == checks,
        Mode::Cima => checks == accesses && aborting == 0,
    }
}

fn ensure_valid(stage: &'static str, p: &Program) -> Result<(), InstrumentError> {
    let violations = verify(p);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(InstrumentError::BrokenOutput { stage, violations })
    }
}

/// Run the pass pipeline selected by `cfg`, verifying the CFG after every
/// stage.
pub fn instrument(p: &Program, cfg: &InstrumentationConfig) -> Result<(Program, TransformReport), InstrumentError> {
    let violations = verify(p);
    if !violations.is_empty() {
        return Err(InstrumentError::InvalidInput(violations));
    }
    if cfg.loop_exit_budget.is_some() && cfg.mode != Mode::Cima {
        return Err(InstrumentError::BudgetRequiresCima);
    }
    let mut report = TransformReport::default();
    // Already instrumented input resumes from the stage it reached.
    let mut prog = if p.check_count() == 0 {
        if cfg.mode == Mode::None {
            return Ok((p.clone(), report));
        }
        let (prog, r) = insert_checks(p)?;
        ensure_valid("check insertion", &prog)?;
        report.merge(r);
        prog
    } else if consistent_with(p, cfg.mode) || (cfg.mode == Mode::Cima && consistent_with(p, Mode::Abort)) {
        p.clone()
    } else {
        return Err(InstrumentError::AlreadyInstrumented(cfg.mode));
    };
    if cfg.mode == Mode::Cima {
        let (next, r) = cima_transform(&prog)?;
        ensure_valid("skip transformation", &next)?;
        report.merge(r);
        prog = next;
        if let Some(budget) = cfg.loop_exit_budget {
            let (next, r) = lower_loop_exit(&prog, budget)?;
            ensure_valid("loop exit lowering", &next)?;
            report.merge(r);
            prog = next;
        }
    }
    Ok((prog, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::compile;

    const SRC: &str = "int a[4]; int b[4];
        func main() {
            int i; int x;
            for (i = 0; i < 6; i++) { x = a[i]; b[i] = x + 1; output(0, x); }
        }";

    #[test]
    fn one_check_and_abort_block_per_access() {
        let p = compile(SRC).unwrap();
        let (q, r) = insert_checks(&p).unwrap();
        assert_eq!(r.checks_inserted, 2);
        assert_eq!(q.check_count(), 2);
        assert_eq!(r.abort_blocks.len(), 2);
        assert!(verify(&q).is_empty(), "{:?}", verify(&q));
        assert!(consistent_with(&q, Mode::Abort));
    }

    #[test]
    fn cima_removes_every_abort_block() {
        let p = compile(SRC).unwrap();
        let (q, _) = insert_checks(&p).unwrap();
        let (c, r) = cima_transform(&q).unwrap();
        assert!(r.abort_blocks.is_empty());
        assert_eq!(r.abort_blocks_pruned.len(), 2);
        assert_eq!(r.edges_rewired.len(), 2);
        assert!(verify(&c).is_empty(), "{:?}", verify(&c));
        assert!(consistent_with(&c, Mode::Cima));
    }

    #[test]
    fn transform_without_checks_is_rejected() {
        let p = compile(SRC).unwrap();
        assert_eq!(cima_transform(&p).unwrap_err(), InstrumentError::NotInstrumented);
    }

    #[test]
    fn access_free_program_is_left_alone() {
        let p = compile("func main() { int x = 1; output(0, x); }").unwrap();
        let (q, r) = insert_checks(&p).unwrap();
        let (c, r2) = cima_transform(&q).unwrap();
        assert_eq!(c, p);
        assert_eq!(r, TransformReport::default());
        assert_eq!(r2, TransformReport::default());
    }

    #[test]
    fn budget_outside_cima_is_rejected() {
        let p = compile(SRC).unwrap();
        let cfg = InstrumentationConfig {
            mode: Mode::Abort,
            loop_exit_budget: Some(1),
        };
        assert_eq!(instrument(&p, &cfg).unwrap_err(), InstrumentError::BudgetRequiresCima);
    }

    #[test]
    fn access_in_entry_block_moves_the_entry() {
        let p = compile("int a[2]; func f(p) { return a[p]; } func main() { output(0, f(1)); }").unwrap();
        let (q, _) = insert_checks(&p).unwrap();
        let f = q.function("f").unwrap();
        assert!(matches!(f.blocks[&f.entry].instrs[0].kind, InstrKind::Check { .. }));
        assert!(verify(&q).is_empty(), "{:?}", verify(&q));
    }

    #[test]
    fn instrumented_input_resumes() {
        let p = compile(SRC).unwrap();
        let cfg = |mode| InstrumentationConfig {
            mode,
            loop_exit_budget: None,
        };
        let (abort, _) = instrument(&p, &cfg(Mode::Abort)).unwrap();
        let (cima, _) = instrument(&p, &cfg(Mode::Cima)).unwrap();
        assert_eq!(instrument(&abort, &cfg(Mode::Abort)).unwrap().0, abort);
        assert_eq!(instrument(&abort, &cfg(Mode::Cima)).unwrap().0, cima);
        assert_eq!(instrument(&cima, &cfg(Mode::Cima)).unwrap().0, cima);
        assert_eq!(
            instrument(&cima, &cfg(Mode::Abort)),
            Err(InstrumentError::AlreadyInstrumented(Mode::Abort))
        );
        assert_eq!(
            instrument(&abort, &cfg(Mode::None)),
            Err(InstrumentError::AlreadyInstrumented(Mode::None))
        );
    }
}
