//! Deterministic interpreter for (instrumented) IR programs.
//!
//! Memory is a flat word array whose validity is tracked by a
//! [`ShadowMap`]. Inserted checks consult the map; what happens on a failed
//! check depends on where its failing edge goes. An abort block ends the run,
//! anything else is a skip: the guarded access is bypassed without touching
//! registers or memory, `skip_cost` is charged, and control follows the
//! failing edge.
//!
//! Every dispatched instruction becomes a [`Step`] carrying its cost, which
//! is what scan-time accounting is computed from.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instrument::{consistent_with, Mode};
use crate::ir::{verify, Base, BlockId, Callee, InstrId, InstrKind, Intrinsic, Program, Reg, Violation};
use crate::shadow::{Addr, FaultKind, ObjectId, Region, ShadowConfig, ShadowError, ShadowMap};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostTable {
    pub constant: u64,
    pub copy: u64,
    pub arith: u64,
    pub mem_read: u64,
    pub mem_write: u64,
    pub call: u64,
    pub branch: u64,
    pub jump: u64,
    pub ret: u64,
    pub check_cost: u64,
    pub skip_cost: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            constant: 1,
            copy: 1,
            arith: 1,
            mem_read: 1,
            mem_write: 1,
            call: 1,
            branch: 1,
            jump: 1,
            ret: 1,
            check_cost: 2,
            skip_cost: 1,
        }
    }
}

impl CostTable {
    fn of(&self, kind: &InstrKind) -> u64 {
        match kind {
            InstrKind::Const { .. } => self.constant,
            InstrKind::Copy { .. } => self.copy,
            InstrKind::Arith { .. } => self.arith,
            InstrKind::MemRead { .. } => self.mem_read,
            InstrKind::MemWrite { .. } => self.mem_write,
            InstrKind::Call { .. } => self.call,
            InstrKind::Check { .. } => self.check_cost,
            InstrKind::Branch { .. } => self.branch,
            InstrKind::Jump { .. } => self.jump,
            InstrKind::Return { .. } => self.ret,
            InstrKind::Abort { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub mode: Mode,
    /// Values served, in order, to `read_input` regardless of channel; an
    /// exhausted tape reads as zero.
    pub input_tape: Vec<i64>,
    pub max_steps: u64,
    pub costs: CostTable,
    pub shadow: ShadowConfig,
    pub max_call_depth: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            mode: Mode::None,
            input_tape: Vec::new(),
            max_steps: 1_000_000,
            costs: CostTable::default(),
            shadow: ShadowConfig::default(),
            max_call_depth: 256,
        }
    }
}

impl ExecConfig {
    pub fn with_mode(mode: Mode) -> Self {
        ExecConfig {
            mode,
            ..ExecConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InputScan,
    ProgramExec,
    OutputUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Exec,
    Check {
        ok: bool,
    },
    /// A guarded access bypassed after its check failed.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// Index into [`ExecTrace::functions`].
    pub func: u32,
    pub instr: InstrId,
    pub kind: StepKind,
    /// The instruction was inserted by an instrumentation pass.
    pub synthetic: bool,
    pub phase: Phase,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub func: String,
    pub instr: InstrId,
    pub fault: FaultKind,
    /// How many times this instruction's check had run before this one.
    pub ordinal: u64,
    pub index: i64,
    pub addr: Addr,
}

/// An invalid access or free observed without a check in the way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncheckedFault {
    pub func: String,
    pub instr: InstrId,
    pub fault: FaultKind,
    pub addr: Addr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Completed,
    Aborted {
        func: String,
        at: InstrId,
        fault: FaultKind,
        index: i64,
    },
    StepBudgetExhausted,
    LoopExited {
        loop_id: i64,
        skips: i64,
    },
    /// The run could not continue (address space or call depth exhausted).
    Trapped {
        reason: String,
    },
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Completed => "completed",
            Status::Aborted { .. } => "aborted",
            Status::StepBudgetExhausted => "step_budget_exhausted",
            Status::LoopExited { .. } => "loop_exited",
            Status::Trapped { .. } => "trapped",
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Completed => 0,
            Status::Aborted { .. } => 2,
            Status::StepBudgetExhausted => 3,
            Status::LoopExited { .. } => 4,
            Status::Trapped { .. } => 5,
        }
    }
}

/// One execution or skip of a `load`, kept for reconstructing the value a
/// destination register holds after each iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadEvent {
    pub func: u32,
    pub instr: InstrId,
    pub dst: Reg,
    pub before: i64,
    /// `None` when the load was skipped.
    pub value: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecTrace {
    pub mode: Mode,
    pub status: Status,
    pub functions: Vec<String>,
    /// Register names per function, then global scalar names.
    pub reg_names: Vec<Vec<String>>,
    pub scalar_names: Vec<String>,
    pub steps: Vec<Step>,
    pub skipped: Vec<Skipped>,
    pub unchecked_faults: Vec<UncheckedFault>,
    pub outputs: Vec<(i64, i64)>,
    pub total_cost: u64,
    pub leaks: Vec<ObjectId>,
    pub loads: Vec<LoadEvent>,
    /// Step counts at which `scan_end` completed a cycle.
    pub cycle_ends: Vec<usize>,
    pub loop_exits: Vec<(i64, i64)>,
    pub return_value: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("program is malformed: {0:?}")]
    InvalidProgram(Vec<Violation>),
    #[error("program is not instrumented for mode {0}")]
    ModeMismatch(Mode),
    #[error("max_steps must be at least 1")]
    ZeroStepBudget,
    #[error("global layout failed: {0}")]
    Layout(ShadowError),
    #[error("no load ever wrote `{0}`")]
    NoSuchVar(String),
    #[error("ordinal {t} out of range; `{var}` was loaded {count} times")]
    OrdinalOutOfRange { var: String, t: usize, count: usize },
    #[error("cycle window {start}..{end} exceeds the {cycles} recorded cycles")]
    WindowOutOfRange { start: usize, end: usize, cycles: usize },
}

impl ExecTrace {
    /// Non-check instructions that actually ran, excluding pass-inserted
    /// ones, as `(function, instruction)`.
    pub fn executed(&self) -> Vec<(u32, InstrId)> {
        self.steps
            .iter()
            .filter(|s| s.kind == StepKind::Exec && !s.synthetic)
            .map(|s| (s.func, s.instr))
            .collect()
    }

    pub fn instruction_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.kind == StepKind::Exec && !s.synthetic)
            .count()
    }

    pub fn check_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.kind, StepKind::Check { .. }))
            .count()
    }

    /// Cost charged for skipping, i.e. the delay attributable to mitigation.
    pub fn skip_cost(&self) -> u64 {
        self.steps
            .iter()
            .filter(|s| s.kind == StepKind::Skip)
            .map(|s| s.cost)
            .sum()
    }

    /// Step ranges of the completed scan cycles. A run that never calls
    /// `scan_end` counts as a single cycle.
    pub fn cycles(&self) -> Vec<Range<usize>> {
        if self.cycle_ends.is_empty() {
            return std::iter::once(0..self.steps.len()).collect();
        }
        let mut start = 0;
        self.cycle_ends
            .iter()
            .map(|&end| {
                let r = start..end;
                start = end;
                r
            })
            .collect()
    }

    /// Cost of each completed cycle, split by phase.
    pub fn cycle_phase_costs(&self) -> Vec<[u64; 3]> {
        self.cycles()
            .into_iter()
            .map(|r| {
                let mut out = [0u64; 3];
                for s in &self.steps[r] {
                    let k = match s.phase {
                        Phase::InputScan => 0,
                        Phase::ProgramExec => 1,
                        Phase::OutputUpdate => 2,
                    };
                    out[k] += s.cost;
                }
                out
            })
            .collect()
    }

    pub fn cycle_costs(&self) -> Vec<u64> {
        self.cycle_phase_costs().iter().map(|c| c.iter().sum()).collect()
    }

    fn reg_name(&self, func: u32, r: Reg) -> &str {
        match r {
            Reg::Local(i) => &self.reg_names[func as usize][i as usize],
            Reg::Global(i) => &self.scalar_names[i as usize],
        }
    }

    /// Line-per-record JSON: a summary line, then steps, skips and outputs.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let summary = serde_json::json!({
            "mode": self.mode,
            "status": self.status,
            "steps": self.steps.len(),
            "instructions": self.instruction_count(),
            "checks": self.check_count(),
            "skips": self.skipped.len(),
            "total_cost": self.total_cost,
            "leaks": self.leaks,
        });
        writeln!(out, "{summary}").unwrap();
        for s in &self.steps {
            let line = serde_json::json!({
                "step": {
                    "func": self.functions[s.func as usize],
                    "instr": s.instr.0,
                    "kind": s.kind,
                    "synthetic": s.synthetic,
                    "phase": s.phase,
                    "cost": s.cost,
                }
            });
            writeln!(out, "{line}").unwrap();
        }
        for s in &self.skipped {
            writeln!(out, "{}", serde_json::json!({ "skip": s })).unwrap();
        }
        for f in &self.unchecked_faults {
            writeln!(out, "{}", serde_json::json!({ "fault": f })).unwrap();
        }
        for (ch, v) in &self.outputs {
            writeln!(
                out,
                "{}",
                serde_json::json!({ "output": { "channel": ch, "value": v } })
            )
            .unwrap();
        }
        out
    }
}

/// Value held by `var` after its `t`-th load (0-based): the loaded value if
/// that load was legal, otherwise the most recent legally loaded value, or
/// the register's value before the first load when no load has been legal
/// yet.
pub fn skipped_assignment_value(trace: &ExecTrace, var: &str, t: usize) -> Result<i64, VmError> {
    let events: Vec<&LoadEvent> = trace
        .loads
        .iter()
        .filter(|e| trace.reg_name(e.func, e.dst) == var)
        .collect();
    if events.is_empty() {
        return Err(VmError::NoSuchVar(var.to_string()));
    }
    if t >= events.len() {
        return Err(VmError::OrdinalOutOfRange {
            var: var.to_string(),
            t,
            count: events.len(),
        });
    }
    fn at(events: &[&LoadEvent], t: usize) -> i64 {
        match events[t].value {
            Some(v) => v,
            None if t == 0 => events[0].before,
            None => at(events, t - 1),
        }
    }
    Ok(at(&events, t))
}

/// Total cost of the completed cycles in `window`.
pub fn cost_of(trace: &ExecTrace, window: Range<usize>) -> Result<u64, VmError> {
    let cycles = trace.cycles();
    if window.end > cycles.len() || window.start > window.end {
        return Err(VmError::WindowOutOfRange {
            start: window.start,
            end: window.end,
            cycles: cycles.len(),
        });
    }
    Ok(cycles[window]
        .iter()
        .flat_map(|r| trace.steps[r.clone()].iter())
        .map(|s| s.cost)
        .sum())
}

struct Frame {
    func: usize,
    regs: Vec<i64>,
    block: BlockId,
    pos: usize,
    locals: HashMap<String, Addr>,
    objects: Vec<ObjectId>,
    ret_dst: Option<Reg>,
}

struct Machine<'p> {
    p: &'p Program,
    cfg: &'p ExecConfig,
    shadow: ShadowMap,
    mem: Vec<i64>,
    scalars: Vec<i64>,
    global_bases: HashMap<String, Addr>,
    frames: Vec<Frame>,
    tape: std::slice::Iter<'p, i64>,
    check_runs: HashMap<(usize, InstrId), u64>,
    pending_fault: Option<(InstrId, FaultKind, i64)>,
    trace: ExecTrace,
}

enum Flow {
    Next,
    /// The frame stack changed; resume wherever the top frame points.
    Stay,
    Goto(BlockId),
    Stop(Status),
}

impl<'p> Machine<'p> {
    fn read(&self, r: Reg) -> i64 {
        match r {
            Reg::Local(i) => self.frames.last().expect("frame").regs[i as usize],
            Reg::Global(i) => self.scalars[i as usize],
        }
    }

    fn write(&mut self, r: Reg, v: i64) {
        match r {
            Reg::Local(i) => self.frames.last_mut().expect("frame").regs[i as usize] = v,
            Reg::Global(i) => self.scalars[i as usize] = v,
        }
    }

    fn base(&self, b: &Base) -> Addr {
        match b {
            Base::Global(n) => self.global_bases[n],
            Base::Local(n) => self.frames.last().expect("frame").locals[n],
            Base::Ptr(r) => self.read(*r),
        }
    }

    fn load(&self, addr: Addr) -> i64 {
        usize::try_from(addr)
            .ok()
            .and_then(|a| self.mem.get(a))
            .copied()
            .unwrap_or(0)
    }

    fn store(&mut self, addr: Addr, v: i64) {
        if let Some(slot) = usize::try_from(addr).ok().and_then(|a| self.mem.get_mut(a)) {
            *slot = v;
        }
    }

    fn place(&mut self, name: &str, size: u32, region: Region, init: &[i64]) -> Result<(ObjectId, Addr), ShadowError> {
        let id = self.shadow.allocate(name, size, region)?;
        let base = self.shadow.object(id).expect("just allocated").base;
        for k in 0..size as usize {
            self.mem[base as usize + k] = init.get(k).copied().unwrap_or(0);
        }
        Ok((id, base))
    }

    fn push_frame(&mut self, func: usize, args: &[i64], ret_dst: Option<Reg>) -> Result<(), Status> {
        if self.frames.len() >= self.cfg.max_call_depth {
            return Err(Status::Trapped {
                reason: format!("call depth limit {} reached", self.cfg.max_call_depth),
            });
        }
        let f = &self.p.functions[func];
        let mut regs = vec![0; f.regs.len()];
        for (param, v) in f.params.iter().zip(args) {
            if let Reg::Local(i) = param {
                regs[*i as usize] = *v;
            }
        }
        let mut locals = HashMap::new();
        let mut objects = Vec::new();
        for slot in &f.locals {
            match self.place(&slot.name, slot.size, Region::Stack, &slot.init) {
                Ok((id, base)) => {
                    locals.insert(slot.name.clone(), base);
                    objects.push(id);
                }
                Err(e) => return Err(Status::Trapped { reason: e.to_string() }),
            }
        }
        self.frames.push(Frame {
            func,
            regs,
            block: f.entry,
            pos: 0,
            locals,
            objects,
            ret_dst,
        });
        Ok(())
    }

    fn pop_frame(&mut self) -> Frame {
        let frame = self.frames.pop().expect("frame");
        for id in &frame.objects {
            self.shadow.release(*id).expect("stack object");
        }
        frame
    }

    fn func_name(&self) -> String {
        self.p.functions[self.frames.last().expect("frame").func].name.clone()
    }

    fn step(&mut self, instr: InstrId, kind: StepKind, synthetic: bool, phase: Phase, cost: u64) {
        let func = self.frames.last().expect("frame").func as u32;
        self.trace.total_cost += cost;
        self.trace.steps.push(Step {
            func,
            instr,
            kind,
            synthetic,
            phase,
            cost,
        });
    }

    fn run(mut self) -> (ExecTrace, ShadowMap) {
        let main = self.p.function_index(&self.p.main).expect("verified main");
        let status = match self.push_frame(main, &[], None) {
            Ok(()) => self.dispatch_loop(),
            Err(s) => s,
        };
        let status = match status {
            Status::Completed => match self.trace.loop_exits.last() {
                Some(&(loop_id, skips)) => Status::LoopExited { loop_id, skips },
                None => Status::Completed,
            },
            other => other,
        };
        self.trace.status = status;
        self.trace.leaks = self.shadow.leak_report();
        (self.trace, self.shadow)
    }

    fn dispatch_loop(&mut self) -> Status {
        loop {
            if self.trace.steps.len() as u64 >= self.cfg.max_steps {
                return Status::StepBudgetExhausted;
            }
            let frame = self.frames.last().expect("frame");
            let f = &self.p.functions[frame.func];
            let instr = &f.blocks[&frame.block].instrs[frame.pos];
            let flow = self.exec(instr.id, &instr.kind, instr.synthetic);
            match flow {
                Flow::Next => self.frames.last_mut().expect("frame").pos += 1,
                Flow::Goto(b) => {
                    let fr = self.frames.last_mut().expect("frame");
                    fr.block = b;
                    fr.pos = 0;
                }
                Flow::Stay => {}
                Flow::Stop(s) => return s,
            }
        }
    }

    fn exec(&mut self, id: InstrId, kind: &'p InstrKind, synthetic: bool) -> Flow {
        let costs = &self.cfg.costs;
        let cost = if synthetic && matches!(kind, InstrKind::Jump { .. }) {
            0
        } else {
            costs.of(kind)
        };
        let mut phase = Phase::ProgramExec;
        let flow = match kind {
            InstrKind::Const { dst, value } => {
                self.write(*dst, *value);
                Flow::Next
            }
            InstrKind::Copy { dst, src } => {
                let v = self.read(*src);
                self.write(*dst, v);
                Flow::Next
            }
            InstrKind::Arith { dst, op, lhs, rhs } => {
                let v = op.eval(self.read(*lhs), self.read(*rhs));
                self.write(*dst, v);
                Flow::Next
            }
            InstrKind::MemRead { dst, base, index } => {
                let addr = self.base(base).wrapping_add(self.read(*index));
                self.log_unchecked(id, addr);
                let before = self.read(*dst);
                let v = self.load(addr);
                self.write(*dst, v);
                self.trace.loads.push(LoadEvent {
                    func: self.frames.last().expect("frame").func as u32,
                    instr: id,
                    dst: *dst,
                    before,
                    value: Some(v),
                });
                Flow::Next
            }
            InstrKind::MemWrite { base, index, src } => {
                let addr = self.base(base).wrapping_add(self.read(*index));
                self.log_unchecked(id, addr);
                let v = self.read(*src);
                self.store(addr, v);
                Flow::Next
            }
            InstrKind::Check {
                base,
                index,
                width,
                access,
                fail,
                pass,
            } => {
                let idx = self.read(*index);
                let addr = self.base(base).wrapping_add(idx);
                let verdict = self.shadow.check(addr, *width);
                let func = self.frames.last().expect("frame").func;
                let runs = self.check_runs.entry((func, *access)).or_insert(0);
                let ordinal = *runs;
                *runs += 1;
                self.step(id, StepKind::Check { ok: verdict.ok }, synthetic, phase, cost);
                if verdict.ok {
                    return Flow::Goto(*pass);
                }
                let fault = verdict.fault.expect("failed verdict has a fault");
                let f = &self.p.functions[func];
                let aborting = f
                    .blocks
                    .get(fail)
                    .and_then(|b| b.instrs.first())
                    .is_some_and(|i| matches!(i.kind, InstrKind::Abort { .. }));
                if aborting {
                    self.pending_fault = Some((*access, fault, idx));
                } else {
                    self.trace.skipped.push(Skipped {
                        func: f.name.clone(),
                        instr: *access,
                        fault,
                        ordinal,
                        index: idx,
                        addr,
                    });
                    let acc = f.instr(*access).expect("guarded access exists");
                    if let InstrKind::MemRead { dst, .. } = acc.kind {
                        let before = self.read(dst);
                        self.trace.loads.push(LoadEvent {
                            func: func as u32,
                            instr: *access,
                            dst,
                            before,
                            value: None,
                        });
                    }
                    let skip_cost = self.cfg.costs.skip_cost;
                    self.step(*access, StepKind::Skip, false, phase, skip_cost);
                }
                return Flow::Goto(*fail);
            }
            InstrKind::Branch { cond, then_bb, else_bb } => {
                if self.read(*cond) != 0 {
                    Flow::Goto(*then_bb)
                } else {
                    Flow::Goto(*else_bb)
                }
            }
            InstrKind::Jump { target } => Flow::Goto(*target),
            InstrKind::Return { value } => {
                let v = value.map(|r| self.read(r)).unwrap_or(0);
                self.step(id, StepKind::Exec, synthetic, phase, cost);
                let frame = self.pop_frame();
                if self.frames.is_empty() {
                    self.trace.return_value = Some(v);
                    return Flow::Stop(Status::Completed);
                }
                if let Some(d) = frame.ret_dst {
                    self.write(d, v);
                }
                self.frames.last_mut().expect("caller").pos += 1;
                return Flow::Stay;
            }
            InstrKind::Abort { access } => {
                self.step(id, StepKind::Exec, synthetic, phase, cost);
                let func = self.func_name();
                let (at, fault, index) = match (self.pending_fault.take(), access) {
                    (Some(pf), _) => pf,
                    (None, Some(a)) => (*a, FaultKind::Wild, 0),
                    (None, None) => (id, FaultKind::Wild, 0),
                };
                return Flow::Stop(Status::Aborted { func, at, fault, index });
            }
            InstrKind::Call { dst, callee, args } => {
                let argv: Vec<i64> = args.iter().map(|a| self.read(*a)).collect();
                match callee {
                    Callee::Function(name) => {
                        self.step(id, StepKind::Exec, synthetic, phase, cost);
                        let callee = self.p.function_index(name).expect("verified callee");
                        if let Err(s) = self.push_frame(callee, &argv, *dst) {
                            return Flow::Stop(s);
                        }
                        return Flow::Stay;
                    }
                    Callee::Intrinsic(i) => {
                        phase = match i {
                            Intrinsic::ReadInput => Phase::InputScan,
                            Intrinsic::Output => Phase::OutputUpdate,
                            _ => Phase::ProgramExec,
                        };
                        match self.intrinsic(id, *i, &argv, *dst) {
                            Ok(()) => Flow::Next,
                            Err(s) => {
                                self.step(id, StepKind::Exec, synthetic, phase, cost);
                                return Flow::Stop(s);
                            }
                        }
                    }
                }
            }
        };
        self.step(id, StepKind::Exec, synthetic, phase, cost);
        if matches!(
            kind,
            InstrKind::Call {
                callee: Callee::Intrinsic(Intrinsic::ScanEnd),
                ..
            }
        ) {
            self.trace.cycle_ends.push(self.trace.steps.len());
        }
        flow
    }

    fn log_unchecked(&mut self, id: InstrId, addr: Addr) {
        if self.cfg.mode != Mode::None {
            return;
        }
        let v = self.shadow.check(addr, 1);
        if let Some(fault) = v.fault {
            let func = self.func_name();
            self.trace.unchecked_faults.push(UncheckedFault {
                func,
                instr: id,
                fault,
                addr,
            });
        }
    }

    fn intrinsic(&mut self, id: InstrId, i: Intrinsic, args: &[i64], dst: Option<Reg>) -> Result<(), Status> {
        let result = match i {
            Intrinsic::ReadInput => Some(self.tape.next().copied().unwrap_or(0)),
            Intrinsic::Output => {
                self.trace.outputs.push((args[0], args[1]));
                None
            }
            Intrinsic::Alloc => {
                let n = args[0];
                if n <= 0 || n > u32::MAX as i64 {
                    Some(0)
                } else {
                    match self.place("heap", n as u32, Region::Heap, &[]) {
                        Ok((_, base)) => Some(base),
                        Err(e) => return Err(Status::Trapped { reason: e.to_string() }),
                    }
                }
            }
            Intrinsic::Free => {
                if let Err(e) = self.shadow.free_at(args[0]) {
                    let fault = match e {
                        ShadowError::DoubleFree(_) => FaultKind::DoubleFree,
                        _ => FaultKind::BadFree,
                    };
                    let func = self.func_name();
                    match self.cfg.mode {
                        Mode::Abort => {
                            return Err(Status::Aborted {
                                func,
                                at: id,
                                fault,
                                index: args[0],
                            })
                        }
                        Mode::Cima => {
                            let runs = self
                                .check_runs
                                .entry((self.frames.last().expect("frame").func, id))
                                .or_insert(0);
                            let ordinal = *runs;
                            *runs += 1;
                            self.trace.skipped.push(Skipped {
                                func,
                                instr: id,
                                fault,
                                ordinal,
                                index: args[0],
                                addr: args[0],
                            });
                        }
                        Mode::None => self.trace.unchecked_faults.push(UncheckedFault {
                            func,
                            instr: id,
                            fault,
                            addr: args[0],
                        }),
                    }
                }
                None
            }
            Intrinsic::ScanEnd => None,
            Intrinsic::LoopExit => {
                self.trace.loop_exits.push((args[0], args[1]));
                None
            }
        };
        if let (Some(d), Some(v)) = (dst, result) {
            self.write(d, v);
        }
        Ok(())
    }
}

/// Execute `p` under `cfg`. The program must be well-formed and wired for
/// `cfg.mode` (see [`crate::instrument::instrument`]).
pub fn run(p: &Program, cfg: &ExecConfig) -> Result<ExecTrace, VmError> {
    let violations = verify(p);
    if !violations.is_empty() {
        return Err(VmError::InvalidProgram(violations));
    }
    run_unverified(p, cfg)
}

/// [`run`] without the up-front CFG verification, for callers that have
/// already verified `p`.
pub fn run_unverified(p: &Program, cfg: &ExecConfig) -> Result<ExecTrace, VmError> {
    run_with_memory(p, cfg).map(|(t, _)| t)
}

/// [`run_unverified`], also returning the final shadow state.
pub fn run_with_memory(p: &Program, cfg: &ExecConfig) -> Result<(ExecTrace, ShadowMap), VmError> {
    if cfg.max_steps == 0 {
        return Err(VmError::ZeroStepBudget);
    }
    if !consistent_with(p, cfg.mode) {
        return Err(VmError::ModeMismatch(cfg.mode));
    }
    let shadow = ShadowMap::new(cfg.shadow);
    let mut m = Machine {
        p,
        cfg,
        mem: vec![0; shadow.address_space() as usize],
        shadow,
        scalars: p.scalars.iter().map(|s| s.init).collect(),
        global_bases: HashMap::new(),
        frames: Vec::new(),
        tape: cfg.input_tape.iter(),
        check_runs: HashMap::new(),
        pending_fault: None,
        trace: ExecTrace {
            mode: cfg.mode,
            status: Status::Completed,
            functions: p.functions.iter().map(|f| f.name.clone()).collect(),
            reg_names: p.functions.iter().map(|f| f.regs.clone()).collect(),
            scalar_names: p.scalars.iter().map(|s| s.name.clone()).collect(),
            steps: Vec::new(),
            skipped: Vec::new(),
            unchecked_faults: Vec::new(),
            outputs: Vec::new(),
            total_cost: 0,
            leaks: Vec::new(),
            loads: Vec::new(),
            cycle_ends: Vec::new(),
            loop_exits: Vec::new(),
            return_value: None,
        },
    };
    for g in &p.globals {
        let (_, base) = m
            .place(&g.name, g.size, Region::Global, &g.init)
            .map_err(VmError::Layout)?;
        m.global_bases.insert(g.name.clone(), base);
    }
    Ok(m.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::compile;
    use crate::instrument::{instrument, InstrumentationConfig};

    fn build(src: &str, mode: Mode, budget: Option<u32>) -> Program {
        let p = compile(src).expect("compiles");
        let cfg = InstrumentationConfig {
            mode,
            loop_exit_budget: budget,
        };
        instrument(&p, &cfg).expect("instruments").0
    }

    fn exec(src: &str, mode: Mode, tape: &[i64]) -> ExecTrace {
        let p = build(src, mode, None);
        let cfg = ExecConfig {
            input_tape: tape.to_vec(),
            ..ExecConfig::with_mode(mode)
        };
        run(&p, &cfg).expect("runs")
    }

    const OVERFLOW_LOOP: &str = "
        const LO = 1024;
        const HI = 2047;
        int mem[1024];
        func fill() {
            int i = 0;
            while (i <= 2047) {
                if (i >= LO && i <= HI) { mem[i] = i - LO; }
                i++;
            }
        }
        func main() { fill(); }
    ";

    #[test]
    fn arithmetic_calls_and_outputs() {
        let t = exec(
            "func sq(x) { return x * x; }
             func main() { int a = read_input(0); output(1, sq(a) + 1); output(2, 7 / 0); }",
            Mode::None,
            &[6],
        );
        assert_eq!(t.status, Status::Completed);
        assert_eq!(t.outputs, vec![(1, 37), (2, 0)]);
    }

    #[test]
    fn runs_are_deterministic() {
        for mode in Mode::ALL {
            let a = exec(OVERFLOW_LOOP, mode, &[]);
            let b = exec(OVERFLOW_LOOP, mode, &[]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn overflow_loop_under_each_mode() {
        let cima = exec(OVERFLOW_LOOP, Mode::Cima, &[]);
        assert_eq!(cima.status, Status::Completed);
        assert_eq!(cima.skipped.len(), 1024);
        let idx: Vec<i64> = cima.skipped.iter().map(|s| s.index).collect();
        assert_eq!(idx, (1024..=2047).collect::<Vec<_>>());
        assert!(cima.skipped.iter().enumerate().all(|(k, s)| s.ordinal == k as u64));

        let abort = exec(OVERFLOW_LOOP, Mode::Abort, &[]);
        match abort.status {
            Status::Aborted { fault, index, .. } => {
                assert_eq!(fault, FaultKind::Overflow);
                assert_eq!(index, 1024);
            }
            other => panic!("{other:?}"),
        }

        let plain = exec(OVERFLOW_LOOP, Mode::None, &[]);
        assert_eq!(plain.status, Status::Completed);
        assert_eq!(plain.unchecked_faults.len(), 1024);
        assert_eq!(plain.check_count(), 0);
        // The write's skip target lies past the fall-through jump that
        // follows it, so each skip bypasses two instructions.
        assert_eq!(cima.instruction_count() + 2 * 1024, plain.instruction_count());
        assert_eq!(cima.check_count(), 2048 - 1024);
    }

    #[test]
    fn skipped_accesses_leave_state_untouched() {
        let src = "
            int a[4];
            int b[4];
            func main() {
                int k = read_input(0);
                a[k] = 99;
                int y = 5;
                y = a[k];
                output(0, y);
                output(1, b[0]);
            }";
        let plain = exec(src, Mode::None, &[5]);
        assert_eq!(plain.outputs, vec![(0, 99), (1, 0)]);
        let cima = exec(src, Mode::Cima, &[5]);
        assert_eq!(cima.outputs, vec![(0, 5), (1, 0)]);
        assert_eq!(cima.skipped.len(), 2);
        assert!(cima.skipped.iter().all(|s| s.fault == FaultKind::Overflow));
        assert_eq!(cima.skip_cost(), 2);
        let ok = exec(src, Mode::Cima, &[3]);
        assert_eq!(ok.outputs, vec![(0, 99), (1, 0)]);
        assert!(ok.skipped.is_empty());
    }

    #[test]
    fn skipped_load_keeps_last_legal_value() {
        let src = "
            int arr[3] = {10, 20, 30};
            func main() {
                int x = 7;
                int i = 0;
                while (i < 6) {
                    x = arr[read_input(0)];
                    i++;
                }
                output(0, x);
            }";
        let t = exec(src, Mode::Cima, &[9, 1, 5, 6, 2, 8]);
        let got: Vec<i64> = (0..6).map(|k| skipped_assignment_value(&t, "x", k).unwrap()).collect();
        assert_eq!(got, vec![7, 20, 20, 20, 30, 30]);
        assert_eq!(t.outputs, vec![(0, 30)]);
        assert!(matches!(
            skipped_assignment_value(&t, "x", 6),
            Err(VmError::OrdinalOutOfRange { count: 6, .. })
        ));
        assert!(matches!(
            skipped_assignment_value(&t, "nope", 0),
            Err(VmError::NoSuchVar(_))
        ));
    }

    #[test]
    fn cycle_costs_and_windows() {
        let src = "
            func main() {
                int c = 0;
                while (c < 3) {
                    int v = read_input(0);
                    output(0, v + c);
                    scan_end();
                    c++;
                }
            }";
        let t = exec(src, Mode::None, &[1, 2, 3]);
        let costs = t.cycle_costs();
        assert_eq!(costs.len(), 3);
        let phases = t.cycle_phase_costs();
        assert!(phases.iter().all(|p| p[0] == 1 && p[2] == 1));
        assert_eq!(cost_of(&t, 0..3).unwrap(), costs.iter().sum::<u64>());
        assert_eq!(cost_of(&t, 1..2).unwrap(), costs[1]);
        assert!(matches!(
            cost_of(&t, 2..4),
            Err(VmError::WindowOutOfRange { cycles: 3, .. })
        ));
        assert!(cost_of(&t, 0..3).unwrap() < t.total_cost);
    }

    #[test]
    fn heap_faults_by_mode() {
        let src = "
            func main() {
                int p = alloc(4);
                p[1] = 3;
                free(p);
                int v = p[1];
                free(p);
                int q = alloc(2);
                output(0, v);
            }";
        let abort = exec(src, Mode::Abort, &[]);
        assert!(matches!(
            abort.status,
            Status::Aborted {
                fault: FaultKind::UseAfterFree,
                index: 1,
                ..
            }
        ));
        let cima = exec(src, Mode::Cima, &[]);
        assert_eq!(cima.status, Status::Completed);
        let kinds: Vec<FaultKind> = cima.skipped.iter().map(|s| s.fault).collect();
        assert_eq!(kinds, vec![FaultKind::UseAfterFree, FaultKind::DoubleFree]);
        assert_eq!(cima.leaks.len(), 1);
        let plain = exec(src, Mode::None, &[]);
        assert_eq!(plain.unchecked_faults.len(), 2);
    }

    #[test]
    fn step_budget_and_call_depth() {
        let p = build(
            "func main() { int i = 0; while (i < 100000) { i++; } }",
            Mode::None,
            None,
        );
        let cfg = ExecConfig {
            max_steps: 500,
            ..ExecConfig::default()
        };
        let t = run(&p, &cfg).unwrap();
        assert_eq!(t.status, Status::StepBudgetExhausted);
        assert_eq!(t.steps.len(), 500);

        let p = build("func f(n) { return f(n + 1); } func main() { f(0); }", Mode::None, None);
        let t = run(&p, &ExecConfig::default()).unwrap();
        assert!(matches!(t.status, Status::Trapped { .. }));
        assert_eq!(t.status.exit_code(), 5);
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let p = build("int a[2]; func main() { a[0] = 1; }", Mode::Abort, None);
        assert_eq!(
            run(&p, &ExecConfig::with_mode(Mode::Cima)),
            Err(VmError::ModeMismatch(Mode::Cima))
        );
        assert!(run(&p, &ExecConfig::with_mode(Mode::Abort)).is_ok());
    }

    #[test]
    fn loop_exit_leaves_after_budget_skips() {
        let p = build(OVERFLOW_LOOP, Mode::Cima, Some(10));
        let t = run(&p, &ExecConfig::with_mode(Mode::Cima)).unwrap();
        assert!(matches!(t.status, Status::LoopExited { skips: 10, .. }));
        assert_eq!(t.skipped.len(), 10);
        assert_eq!(t.status.exit_code(), 4);
    }

    #[test]
    fn trace_serializes_as_json_lines() {
        let t = exec("int a[1]; func main() { a[3] = 1; }", Mode::Cima, &[]);
        let text = t.to_json_lines();
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
        assert!(text.lines().any(|l| l.contains("\"skip\"")));
    }
}
