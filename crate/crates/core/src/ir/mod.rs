//! Register IR organised as functions of basic blocks.
//!
//! Every block ends in exactly one terminator (`Branch`, `Jump`, `Check`,
//! `Return` or `Abort`), and fall-through is always an explicit `Jump`.
//! Blocks carry their successor and predecessor lists; the mutation helpers
//! on [`Function`] keep both in step with the terminator. Instruction ids are
//! never renumbered, so reports and traces written against an uninstrumented
//! program stay meaningful after the passes have run.

mod dot;
mod text;
mod verify;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dot::{function_to_dot, program_to_dot};
pub use text::{parse_program, print_program, TextError};
pub use verify::{verify, Violation};

use crate::shadow::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u32);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bb{}", self.0)
    }
}

/// Instruction identifier, unique within its function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstrId(pub u32);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A virtual register: either a function-local slot or a program-wide
/// global scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reg {
    Local(u32),
    Global(u32),
}

/// What a memory access is relative to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    /// Stack array declared in the enclosing function.
    Local(String),
    /// Global array.
    Global(String),
    /// Pointer value held in a register (heap objects from `alloc`).
    Ptr(Reg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    BitAnd,
    BitOr,
    BitXor,
}

impl BinOp {
    pub const ALL: [BinOp; 14] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Rem,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::BitAnd,
        BinOp::BitOr,
        BinOp::BitXor,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Rem => "rem",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
            BinOp::BitAnd => "and",
            BinOp::BitOr => "or",
            BinOp::BitXor => "xor",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Wrapping two's-complement evaluation. Division and remainder by zero
    /// yield zero.
    pub fn eval(self, lhs: i64, rhs: i64) -> i64 {
        match self {
            BinOp::Add => lhs.wrapping_add(rhs),
            BinOp::Sub => lhs.wrapping_sub(rhs),
            BinOp::Mul => lhs.wrapping_mul(rhs),
            BinOp::Div => {
                if rhs == 0 {
                    0
                } else {
                    lhs.wrapping_div(rhs)
                }
            }
            BinOp::Rem => {
                if rhs == 0 {
                    0
                } else {
                    lhs.wrapping_rem(rhs)
                }
            }
            BinOp::Eq => (lhs == rhs) as i64,
            BinOp::Ne => (lhs != rhs) as i64,
            BinOp::Lt => (lhs < rhs) as i64,
            BinOp::Le => (lhs <= rhs) as i64,
            BinOp::Gt => (lhs > rhs) as i64,
            BinOp::Ge => (lhs >= rhs) as i64,
            BinOp::BitAnd => lhs & rhs,
            BinOp::BitOr => lhs | rhs,
            BinOp::BitXor => lhs ^ rhs,
        }
    }
}

/// Runtime-provided operations reachable through `Call`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intrinsic {
    /// `read_input(channel)`: next value of the input tape.
    ReadInput,
    /// `output(channel, value)`.
    Output,
    /// `alloc(n)`: heap object of `n` words, returns its base address.
    Alloc,
    /// `free(p)`.
    Free,
    /// `scan_end()`: marks the end of one PLC scan cycle.
    ScanEnd,
    /// Emitted by the loop-exit pass when a loop is left early.
    LoopExit,
}

impl Intrinsic {
    pub const ALL: [Intrinsic; 6] = [
        Intrinsic::ReadInput,
        Intrinsic::Output,
        Intrinsic::Alloc,
        Intrinsic::Free,
        Intrinsic::ScanEnd,
        Intrinsic::LoopExit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::ReadInput => "read_input",
            Intrinsic::Output => "output",
            Intrinsic::Alloc => "alloc",
            Intrinsic::Free => "free",
            Intrinsic::ScanEnd => "scan_end",
            Intrinsic::LoopExit => "loop_exit",
        }
    }

    pub fn from_name(name: &str) -> Option<Intrinsic> {
        Intrinsic::ALL.into_iter().find(|i| i.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Intrinsic::ReadInput | Intrinsic::Alloc | Intrinsic::Free => 1,
            Intrinsic::Output | Intrinsic::LoopExit => 2,
            Intrinsic::ScanEnd => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Callee {
    Intrinsic(Intrinsic),
    Function(String),
}

impl fmt::Display for Callee {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Callee::Intrinsic(i) => f.write_str(i.name()),
            Callee::Function(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstrKind {
    Const {
        dst: Reg,
        value: i64,
    },
    Copy {
        dst: Reg,
        src: Reg,
    },
    Arith {
        dst: Reg,
        op: BinOp,
        lhs: Reg,
        rhs: Reg,
    },
    MemRead {
        dst: Reg,
        base: Base,
        index: Reg,
    },
    MemWrite {
        base: Base,
        index: Reg,
        src: Reg,
    },
    Call {
        dst: Option<Reg>,
        callee: Callee,
        args: Vec<Reg>,
    },
    /// Validity test guarding the memory access `access`. Control moves to
    /// `pass` when `[base + index, base + index + width)` is addressable and
    /// to `fail` otherwise.
    Check {
        base: Base,
        index: Reg,
        width: u32,
        access: InstrId,
        fail: BlockId,
        pass: BlockId,
    },
    Branch {
        cond: Reg,
        then_bb: BlockId,
        else_bb: BlockId,
    },
    Jump {
        target: BlockId,
    },
    Return {
        value: Option<Reg>,
    },
    /// Terminates the run. `access` names the guarded access when the
    /// abort comes from a failed check.
    Abort {
        access: Option<InstrId>,
    },
}

impl InstrKind {
    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            InstrKind::Check { .. }
                | InstrKind::Branch { .. }
                | InstrKind::Jump { .. }
                | InstrKind::Return { .. }
                | InstrKind::Abort { .. }
        )
    }

    pub fn is_memory_access(&self) -> bool {
        matches!(self, InstrKind::MemRead { .. } | InstrKind::MemWrite { .. })
    }

    /// Control-flow targets of a terminator, in edge order. `Check` lists
    /// its failing edge first.
    pub fn targets(&self) -> Vec<BlockId> {
        match self {
            InstrKind::Check { fail, pass, .. } => vec![*fail, *pass],
            InstrKind::Branch { then_bb, else_bb, .. } => vec![*then_bb, *else_bb],
            InstrKind::Jump { target } => vec![*target],
            _ => Vec::new(),
        }
    }

    fn retarget(&mut self, from: BlockId, to: BlockId) {
        let swap = |b: &mut BlockId| {
            if *b == from {
                *b = to;
            }
        };
        match self {
            InstrKind::Check { fail, pass, .. } => {
                swap(fail);
                swap(pass);
            }
            InstrKind::Branch { then_bb, else_bb, .. } => {
                swap(then_bb);
                swap(else_bb);
            }
            InstrKind::Jump { target } => swap(target),
            _ => {}
        }
    }

    /// The `(base, index)` pair of a memory access.
    pub fn access_operands(&self) -> Option<(&Base, Reg)> {
        match self {
            InstrKind::MemRead { base, index, .. } | InstrKind::MemWrite { base, index, .. } => Some((base, *index)),
            _ => None,
        }
    }

    /// Register written by this instruction, if any.
    pub fn def(&self) -> Option<Reg> {
        match self {
            InstrKind::Const { dst, .. }
            | InstrKind::Copy { dst, .. }
            | InstrKind::Arith { dst, .. }
            | InstrKind::MemRead { dst, .. } => Some(*dst),
            InstrKind::Call { dst, .. } => *dst,
            _ => None,
        }
    }

    /// Registers read by this instruction.
    pub fn uses(&self) -> Vec<Reg> {
        let base_reg = |b: &Base| match b {
            Base::Ptr(r) => Some(*r),
            _ => None,
        };
        match self {
            InstrKind::Const { .. } | InstrKind::Jump { .. } | InstrKind::Abort { .. } => vec![],
            InstrKind::Copy { src, .. } => vec![*src],
            InstrKind::Arith { lhs, rhs, .. } => vec![*lhs, *rhs],
            InstrKind::MemRead { base, index, .. } => base_reg(base).into_iter().chain([*index]).collect(),
            InstrKind::MemWrite { base, index, src } => base_reg(base).into_iter().chain([*index, *src]).collect(),
            InstrKind::Call { args, .. } => args.clone(),
            InstrKind::Check { base, index, .. } => base_reg(base).into_iter().chain([*index]).collect(),
            InstrKind::Branch { cond, .. } => vec![*cond],
            InstrKind::Return { value } => value.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instr {
    pub id: InstrId,
    pub kind: InstrKind,
    /// Inserted by a pass rather than produced by lowering.
    pub synthetic: bool,
}

impl Instr {
    pub fn new(id: InstrId, kind: InstrKind) -> Self {
        Instr {
            id,
            kind,
            synthetic: false,
        }
    }

    pub fn synthetic(id: InstrId, kind: InstrKind) -> Self {
        Instr {
            id,
            kind,
            synthetic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instrs: Vec<Instr>,
    pub succs: Vec<BlockId>,
    pub preds: Vec<BlockId>,
}

impl BasicBlock {
    pub fn new(id: BlockId) -> Self {
        BasicBlock {
            id,
            instrs: Vec::new(),
            succs: Vec::new(),
            preds: Vec::new(),
        }
    }

    pub fn terminator(&self) -> Option<&Instr> {
        self.instrs.last().filter(|i| i.kind.is_terminator())
    }

    pub fn position(&self, id: InstrId) -> Option<usize> {
        self.instrs.iter().position(|i| i.id == id)
    }
}

/// One entry of a layout table: a named array or scalar with its storage
/// region and optional initial contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub size: u32,
    pub region: Region,
    pub init: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub params: Vec<Reg>,
    /// Names of local registers, indexed by `Reg::Local`.
    pub regs: Vec<String>,
    pub blocks: BTreeMap<BlockId, BasicBlock>,
    pub entry: BlockId,
    /// Stack arrays, allocated when a frame is pushed.
    pub locals: Vec<Slot>,
    pub next_block: u32,
    pub next_instr: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("no block {block} in function `{func}`")]
    NoSuchBlock { func: String, block: BlockId },
    #[error("no instruction {instr} in function `{func}`")]
    NoSuchInstr { func: String, instr: InstrId },
    #[error("splitting {block} at position {pos} would leave an empty block")]
    EmptySplit { block: BlockId, pos: usize },
    #[error("instruction {instr} has {count} successors")]
    AmbiguousSuccessor { instr: InstrId, count: usize },
}

/// Where the target instruction of a bypassed access lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub instr: InstrId,
    pub block: BlockId,
    /// The access and its target share a block (a split is required).
    pub same_block: bool,
}

impl Function {
    pub fn new(name: impl Into<String>) -> Self {
        let entry = BlockId(0);
        let mut blocks = BTreeMap::new();
        blocks.insert(entry, BasicBlock::new(entry));
        Function {
            name: name.into(),
            params: Vec::new(),
            regs: Vec::new(),
            blocks,
            entry,
            locals: Vec::new(),
            next_block: 1,
            next_instr: 0,
        }
    }

    pub fn block(&self, id: BlockId) -> Result<&BasicBlock, IrError> {
        self.blocks.get(&id).ok_or_else(|| IrError::NoSuchBlock {
            func: self.name.clone(),
            block: id,
        })
    }

    pub fn block_mut(&mut self, id: BlockId) -> Result<&mut BasicBlock, IrError> {
        let func = self.name.clone();
        self.blocks.get_mut(&id).ok_or(IrError::NoSuchBlock { func, block: id })
    }

    pub fn fresh_block(&mut self) -> BlockId {
        let id = BlockId(self.next_block);
        self.next_block += 1;
        self.blocks.insert(id, BasicBlock::new(id));
        id
    }

    pub fn fresh_instr(&mut self) -> InstrId {
        let id = InstrId(self.next_instr);
        self.next_instr += 1;
        id
    }

    pub fn add_reg(&mut self, name: impl Into<String>) -> Reg {
        self.regs.push(name.into());
        Reg::Local(self.regs.len() as u32 - 1)
    }

    pub fn reg_index(&self, name: &str) -> Option<Reg> {
        self.regs.iter().position(|r| r == name).map(|i| Reg::Local(i as u32))
    }

    pub fn local_slot(&self, name: &str) -> Option<&Slot> {
        self.locals.iter().find(|s| s.name == name)
    }

    /// Block holding `instr` and its position there.
    pub fn locate(&self, instr: InstrId) -> Result<(BlockId, usize), IrError> {
        self.blocks
            .values()
            .find_map(|b| b.position(instr).map(|p| (b.id, p)))
            .ok_or_else(|| IrError::NoSuchInstr {
                func: self.name.clone(),
                instr,
            })
    }

    pub fn instr(&self, id: InstrId) -> Result<&Instr, IrError> {
        let (b, p) = self.locate(id)?;
        Ok(&self.blocks[&b].instrs[p])
    }

    /// Append an instruction to `block`. Appending a terminator also sets
    /// the block's successor list and the targets' predecessor lists.
    pub fn push(&mut self, block: BlockId, kind: InstrKind, synthetic: bool) -> InstrId {
        let id = self.fresh_instr();
        let targets = kind.targets();
        let terminates = kind.is_terminator();
        let b = self.blocks.get_mut(&block).expect("push into unknown block");
        b.instrs.push(Instr { id, kind, synthetic });
        if terminates {
            b.succs = targets.clone();
            for t in targets {
                self.add_pred(t, block);
            }
        }
        id
    }

    fn add_pred(&mut self, block: BlockId, pred: BlockId) {
        if let Some(b) = self.blocks.get_mut(&block) {
            if !b.preds.contains(&pred) {
                b.preds.push(pred);
            }
        }
    }

    fn drop_pred_if_unlinked(&mut self, block: BlockId, pred: BlockId) {
        let still_linked = self.blocks.get(&pred).is_some_and(|p| p.succs.contains(&block));
        if !still_linked {
            if let Some(b) = self.blocks.get_mut(&block) {
                b.preds.retain(|p| *p != pred);
            }
        }
    }

    /// Replace every edge `from -> old` with `from -> new`, updating the
    /// terminator, `from`'s successors and both predecessor lists.
    pub fn redirect_edge(&mut self, from: BlockId, old: BlockId, new: BlockId) -> Result<(), IrError> {
        self.block(new)?;
        let b = self.block_mut(from)?;
        if let Some(term) = b.instrs.last_mut() {
            term.kind.retarget(old, new);
        }
        for s in b.succs.iter_mut() {
            if *s == old {
                *s = new;
            }
        }
        self.drop_pred_if_unlinked(old, from);
        self.add_pred(new, from);
        Ok(())
    }

    /// Split `bb` so that its second half starts with instruction `at`.
    ///
    /// Returns `(head, tail)`. The head keeps `bb`'s id (and therefore all of
    /// its incoming edges) and ends in a synthesized `Jump` to the tail; the
    /// tail takes over `bb`'s terminator and successors.
    pub fn split_block(&mut self, bb: BlockId, at: InstrId) -> Result<(BlockId, BlockId), IrError> {
        let pos = self.block(bb)?.position(at).ok_or_else(|| IrError::NoSuchInstr {
            func: self.name.clone(),
            instr: at,
        })?;
        self.split_block_at(bb, pos)
    }

    /// Position-based form of [`Function::split_block`]. `pos` may be zero
    /// (empty head) but must leave at least one instruction in the tail.
    pub fn split_block_at(&mut self, bb: BlockId, pos: usize) -> Result<(BlockId, BlockId), IrError> {
        let len = self.block(bb)?.instrs.len();
        if pos >= len {
            return Err(IrError::EmptySplit { block: bb, pos });
        }
        let tail = self.fresh_block();
        let jump_id = self.fresh_instr();
        let head = self.blocks.get_mut(&bb).expect("checked above");
        let moved = head.instrs.split_off(pos);
        let old_succs = std::mem::replace(&mut head.succs, vec![tail]);
        head.instrs
            .push(Instr::synthetic(jump_id, InstrKind::Jump { target: tail }));

        let t = self.blocks.get_mut(&tail).expect("fresh block");
        t.instrs = moved;
        t.succs = old_succs.clone();
        t.preds = vec![bb];
        for s in old_succs {
            let sb = self.blocks.get_mut(&s).expect("successor exists");
            for p in sb.preds.iter_mut() {
                if *p == bb {
                    *p = tail;
                }
            }
            sb.preds.dedup();
        }
        Ok((bb, tail))
    }

    /// Remove a block that nothing branches to any more.
    pub fn remove_block(&mut self, id: BlockId) -> Result<BasicBlock, IrError> {
        let b = self.blocks.remove(&id).ok_or_else(|| IrError::NoSuchBlock {
            func: self.name.clone(),
            block: id,
        })?;
        for s in &b.succs {
            if let Some(sb) = self.blocks.get_mut(s) {
                sb.preds.retain(|p| *p != id);
            }
        }
        Ok(b)
    }

    /// Recompute every predecessor list from the successor lists.
    pub fn rebuild_preds(&mut self) {
        let edges: Vec<(BlockId, BlockId)> = self
            .blocks
            .values()
            .flat_map(|b| b.succs.iter().map(move |s| (b.id, *s)))
            .collect();
        for b in self.blocks.values_mut() {
            b.preds.clear();
        }
        for (from, to) in edges {
            self.add_pred(to, from);
        }
    }

    /// Blocks reachable from the entry, in depth-first preorder.
    pub fn reachable(&self) -> Vec<BlockId> {
        let mut seen = std::collections::BTreeSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.entry];
        while let Some(b) = stack.pop() {
            if !self.blocks.contains_key(&b) || !seen.insert(b) {
                continue;
            }
            order.push(b);
            for s in self.blocks[&b].succs.iter().rev() {
                stack.push(*s);
            }
        }
        order
    }

    pub fn prune_unreachable(&mut self) -> Vec<BlockId> {
        let live: std::collections::BTreeSet<_> = self.reachable().into_iter().collect();
        let dead: Vec<BlockId> = self.blocks.keys().filter(|b| !live.contains(b)).copied().collect();
        for d in &dead {
            self.blocks.remove(d);
        }
        self.rebuild_preds();
        dead
    }

    /// The instruction executed right after `i` when `i` is bypassed.
    pub fn successor_of(&self, i: InstrId) -> Result<InstrId, IrError> {
        self.target_of(i).map(|t| t.instr)
    }

    /// Like [`Function::successor_of`], also reporting the holding block.
    ///
    /// An unconditional `Jump` carries no work of its own, so an access that
    /// is followed only by a `Jump` has its target in the jump's destination.
    pub fn target_of(&self, i: InstrId) -> Result<Target, IrError> {
        let (bb, pos) = self.locate(i)?;
        let block = &self.blocks[&bb];
        let instr = &block.instrs[pos];
        let follow_jump = |target: BlockId| -> Result<Target, IrError> {
            let tb = self.block(target)?;
            let first = tb.instrs.first().ok_or_else(|| IrError::NoSuchInstr {
                func: self.name.clone(),
                instr: i,
            })?;
            Ok(Target {
                instr: first.id,
                block: target,
                same_block: false,
            })
        };
        match &instr.kind {
            InstrKind::Jump { target } => follow_jump(*target),
            k if k.is_terminator() => Err(IrError::AmbiguousSuccessor {
                instr: i,
                count: k.targets().len(),
            }),
            _ => {
                let next = block
                    .instrs
                    .get(pos + 1)
                    .ok_or(IrError::AmbiguousSuccessor { instr: i, count: 0 })?;
                match next.kind {
                    InstrKind::Jump { target } => follow_jump(target),
                    _ => Ok(Target {
                        instr: next.id,
                        block: bb,
                        same_block: true,
                    }),
                }
            }
        }
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instr> {
        self.blocks.values().flat_map(|b| b.instrs.iter())
    }

    pub fn memory_accesses(&self) -> Vec<InstrId> {
        self.instrs()
            .filter(|i| i.kind.is_memory_access())
            .map(|i| i.id)
            .collect()
    }

    pub fn reg_name(&self, r: Reg, program: &Program) -> String {
        match r {
            Reg::Local(i) => self.regs.get(i as usize).cloned().unwrap_or_else(|| format!("r{i}")),
            Reg::Global(i) => program
                .scalars
                .get(i as usize)
                .map(|s| s.name.clone())
                .unwrap_or_else(|| format!("g{i}")),
        }
    }
}

/// A global scalar with its initial value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalScalar {
    pub name: String,
    pub init: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub functions: Vec<Function>,
    /// Global arrays, laid out in declaration order.
    pub globals: Vec<Slot>,
    pub scalars: Vec<GlobalScalar>,
    pub main: String,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&Slot> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn scalar_index(&self, name: &str) -> Option<Reg> {
        self.scalars
            .iter()
            .position(|s| s.name == name)
            .map(|i| Reg::Global(i as u32))
    }

    pub fn memory_access_count(&self) -> usize {
        self.functions.iter().map(|f| f.memory_accesses().len()).sum()
    }

    pub fn check_count(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| f.instrs())
            .filter(|i| matches!(i.kind, InstrKind::Check { .. }))
            .count()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_program(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_line(n: usize) -> Function {
        let mut f = Function::new("f");
        let r = f.add_reg("x");
        for k in 0..n {
            f.push(
                BlockId(0),
                InstrKind::Const {
                    dst: r,
                    value: k as i64,
                },
                false,
            );
        }
        f.push(BlockId(0), InstrKind::Return { value: Some(r) }, false);
        f
    }

    fn program_of(f: Function) -> Program {
        Program {
            main: f.name.clone(),
            functions: vec![f],
            globals: vec![],
            scalars: vec![],
        }
    }

    #[test]
    fn split_two_instruction_block() {
        // [i; T_i; ret] split at T_i
        let mut f = Function::new("main");
        let x = f.add_reg("x");
        let exit = f.fresh_block();
        let i = f.push(BlockId(0), InstrKind::Const { dst: x, value: 1 }, false);
        let t = f.push(BlockId(0), InstrKind::Const { dst: x, value: 2 }, false);
        f.push(BlockId(0), InstrKind::Jump { target: exit }, false);
        f.push(exit, InstrKind::Return { value: None }, false);

        let (ibb, tbb) = f.split_block(BlockId(0), t).unwrap();
        assert_eq!(ibb, BlockId(0));
        let head = &f.blocks[&ibb];
        assert_eq!(head.instrs[0].id, i);
        assert_eq!(head.instrs.len(), 2);
        assert!(head.instrs[1].synthetic);
        assert_eq!(head.succs, vec![tbb]);
        let tail = &f.blocks[&tbb];
        assert_eq!(tail.instrs[0].id, t);
        assert_eq!(tail.succs, vec![exit]);
        assert_eq!(f.blocks[&exit].preds, vec![tbb]);
        assert!(verify(&program_of(f)).is_empty());
    }

    #[test]
    fn split_past_end_is_rejected() {
        let mut f = straight_line(0);
        let len = f.blocks[&BlockId(0)].instrs.len();
        assert_eq!(
            f.split_block_at(BlockId(0), len),
            Err(IrError::EmptySplit {
                block: BlockId(0),
                pos: len
            })
        );
    }

    #[test]
    fn split_five_instruction_block_stays_consistent() {
        let mut f = straight_line(5);
        f.split_block_at(BlockId(0), 3).unwrap();
        assert!(verify(&program_of(f)).is_empty());
    }

    #[test]
    fn split_at_front_leaves_empty_head() {
        let mut f = straight_line(2);
        let (head, tail) = f.split_block_at(BlockId(0), 0).unwrap();
        assert_eq!(f.blocks[&head].instrs.len(), 1);
        assert_eq!(f.blocks[&tail].instrs.len(), 3);
        assert!(verify(&program_of(f)).is_empty());
    }

    #[test]
    fn split_self_loop_rewires_back_edge() {
        let mut f = Function::new("main");
        let x = f.add_reg("x");
        let body = f.fresh_block();
        let exit = f.fresh_block();
        f.push(BlockId(0), InstrKind::Jump { target: body }, false);
        f.push(body, InstrKind::Const { dst: x, value: 0 }, false);
        let c = f.push(body, InstrKind::Const { dst: x, value: 1 }, false);
        f.push(
            body,
            InstrKind::Branch {
                cond: x,
                then_bb: body,
                else_bb: exit,
            },
            false,
        );
        f.push(exit, InstrKind::Return { value: None }, false);
        let (_, tail) = f.split_block(body, c).unwrap();
        assert!(f.blocks[&body].preds.contains(&tail));
        assert!(!f.blocks[&body].preds.contains(&body));
        assert!(verify(&program_of(f)).is_empty());
    }

    #[test]
    fn successor_same_block_and_across_jump() {
        let mut f = Function::new("main");
        let x = f.add_reg("x");
        let next = f.fresh_block();
        let a = f.push(BlockId(0), InstrKind::Const { dst: x, value: 1 }, false);
        let b = f.push(BlockId(0), InstrKind::Const { dst: x, value: 2 }, false);
        f.push(BlockId(0), InstrKind::Jump { target: next }, false);
        let first = f.push(next, InstrKind::Return { value: None }, false);

        assert_eq!(f.successor_of(a), Ok(b));
        let t = f.target_of(b).unwrap();
        assert_eq!(t.instr, first);
        assert_eq!(t.block, next);
        assert!(!t.same_block);
    }

    #[test]
    fn successor_of_branch_is_ambiguous() {
        let mut f = Function::new("main");
        let x = f.add_reg("x");
        let a = f.fresh_block();
        let b = f.fresh_block();
        let br = f.push(
            BlockId(0),
            InstrKind::Branch {
                cond: x,
                then_bb: a,
                else_bb: b,
            },
            false,
        );
        assert_eq!(
            f.successor_of(br),
            Err(IrError::AmbiguousSuccessor { instr: br, count: 2 })
        );
    }

    #[test]
    fn binop_division_by_zero_is_zero() {
        assert_eq!(BinOp::Div.eval(7, 0), 0);
        assert_eq!(BinOp::Rem.eval(7, 0), 0);
        assert_eq!(BinOp::Rem.eval(-7, 3), -1);
        assert_eq!(BinOp::Add.eval(i64::MAX, 1), i64::MIN);
    }
}
