//! Textual IR: one instruction per line, `bbN:` labels and explicit
//! `succ`/`pred` edge lists.
//!
//! ```text
//! main main
//! global @buf[4] = {1, 2, 3, 4}
//! scalar @limit = 3
//! func main() entry bb0 blocks 2 instrs 3 {
//!   regs %i %v
//! bb0:
//!   #0 %i = const 1
//!   #1 %v = load @buf[%i]
//!   #2 ret %v
//!   succ: []
//!   pred: []
//! }
//! ```
//!
//! Sigils: `%` local register, `@` global array or scalar, `$` stack array,
//! `#` instruction id. A `*` after an id marks a pass-inserted instruction.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use super::{
    Base, BasicBlock, BinOp, BlockId, Callee, Function, GlobalScalar, Instr, InstrId, InstrKind, Intrinsic, Program,
    Reg, Slot,
};
use crate::shadow::Region;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct TextError {
    pub line: usize,
    pub message: String,
}

fn reg_text(p: &Program, f: &Function, r: Reg) -> String {
    match r {
        Reg::Local(_) => format!("%{}", f.reg_name(r, p)),
        Reg::Global(_) => format!("@{}", f.reg_name(r, p)),
    }
}

fn base_text(p: &Program, f: &Function, b: &Base) -> String {
    match b {
        Base::Local(n) => format!("${n}"),
        Base::Global(n) => format!("@{n}"),
        Base::Ptr(r) => reg_text(p, f, *r),
    }
}

fn init_text(init: &[i64]) -> String {
    if init.is_empty() {
        String::new()
    } else {
        let vals: Vec<String> = init.iter().map(|v| v.to_string()).collect();
        format!(" = {{{}}}", vals.join(", "))
    }
}

pub(crate) fn instr_text(p: &Program, f: &Function, i: &Instr) -> String {
    let r = |reg: Reg| reg_text(p, f, reg);
    let body = match &i.kind {
        InstrKind::Const { dst, value } => format!("{} = const {value}", r(*dst)),
        InstrKind::Copy { dst, src } => format!("{} = copy {}", r(*dst), r(*src)),
        InstrKind::Arith { dst, op, lhs, rhs } => {
            format!("{} = {} {}, {}", r(*dst), op.mnemonic(), r(*lhs), r(*rhs))
        }
        InstrKind::MemRead { dst, base, index } => {
            format!("{} = load {}[{}]", r(*dst), base_text(p, f, base), r(*index))
        }
        InstrKind::MemWrite { base, index, src } => {
            format!("store {}[{}], {}", base_text(p, f, base), r(*index), r(*src))
        }
        InstrKind::Call { dst, callee, args } => {
            let args: Vec<String> = args.iter().map(|a| r(*a)).collect();
            let call = format!("call {callee}({})", args.join(", "));
            match dst {
                Some(d) => format!("{} = {call}", r(*d)),
                None => call,
            }
        }
        InstrKind::Check {
            base,
            index,
            width,
            access,
            fail,
            pass,
        } => format!(
            "check {}[{}] w{width} guard {access} fail {fail} pass {pass}",
            base_text(p, f, base),
            r(*index)
        ),
        InstrKind::Branch { cond, then_bb, else_bb } => format!("br {}, {then_bb}, {else_bb}", r(*cond)),
        InstrKind::Jump { target } => format!("jump {target}"),
        InstrKind::Return { value: Some(v) } => format!("ret {}", r(*v)),
        InstrKind::Return { value: None } => "ret".to_string(),
        InstrKind::Abort { access: Some(a) } => format!("abort {a}"),
        InstrKind::Abort { access: None } => "abort".to_string(),
    };
    let mark = if i.synthetic { "*" } else { "" };
    format!("{}{mark} {body}", i.id)
}

fn block_list(ids: &[BlockId]) -> String {
    let v: Vec<String> = ids.iter().map(|b| b.to_string()).collect();
    format!("[{}]", v.join(", "))
}

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    writeln!(out, "main {}", p.main).unwrap();
    for g in &p.globals {
        writeln!(out, "global @{}[{}]{}", g.name, g.size, init_text(&g.init)).unwrap();
    }
    for s in &p.scalars {
        writeln!(out, "scalar @{} = {}", s.name, s.init).unwrap();
    }
    for f in &p.functions {
        let params: Vec<String> = f.params.iter().map(|r| reg_text(p, f, *r)).collect();
        writeln!(
            out,
            "func {}({}) entry {} blocks {} instrs {} {{",
            f.name,
            params.join(", "),
            f.entry,
            f.next_block,
            f.next_instr
        )
        .unwrap();
        if !f.regs.is_empty() {
            let regs: Vec<String> = f.regs.iter().map(|r| format!("%{r}")).collect();
            writeln!(out, "  regs {}", regs.join(" ")).unwrap();
        }
        for l in &f.locals {
            writeln!(out, "  local ${}[{}]{}", l.name, l.size, init_text(&l.init)).unwrap();
        }
        for b in f.blocks.values() {
            writeln!(out, "{}:", b.id).unwrap();
            for i in &b.instrs {
                writeln!(out, "  {}", instr_text(p, f, i)).unwrap();
            }
            writeln!(out, "  succ: {}", block_list(&b.succs)).unwrap();
            writeln!(out, "  pred: {}", block_list(&b.preds)).unwrap();
        }
        writeln!(out, "}}").unwrap();
    }
    out
}

fn tokenize(line: &str) -> Vec<String> {
    let mut toks = Vec::new();
    let mut cur = String::new();
    for c in line.chars() {
        if c.is_whitespace() || "[](),={}:".contains(c) {
            if !cur.is_empty() {
                toks.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                toks.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        toks.push(cur);
    }
    toks
}

struct Cursor<'a> {
    toks: &'a [String],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, TextError> {
        Err(TextError {
            line: self.line,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(|s| s.as_str())
    }

    fn next(&mut self) -> Result<&'a str, TextError> {
        let t = self.toks.get(self.pos).map(|s| s.as_str());
        self.pos += 1;
        match t {
            Some(t) => Ok(t),
            None => self.err("unexpected end of line"),
        }
    }

    fn expect(&mut self, want: &str) -> Result<(), TextError> {
        let t = self.next()?;
        if t == want {
            Ok(())
        } else {
            self.err(format!("expected `{want}`, found `{t}`"))
        }
    }

    fn eat(&mut self, want: &str) -> bool {
        if self.peek() == Some(want) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn done(&self) -> Result<(), TextError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => self.err(format!("trailing token `{t}`")),
        }
    }

    fn int(&mut self) -> Result<i64, TextError> {
        let t = self.next()?;
        t.parse()
            .or_else(|_| self.err(format!("expected integer, found `{t}`")))
    }

    fn block(&mut self) -> Result<BlockId, TextError> {
        let t = self.next()?;
        parse_block_id(t)
            .ok_or(())
            .or_else(|_| self.err(format!("expected block label, found `{t}`")))
    }

    fn instr_id(&mut self) -> Result<InstrId, TextError> {
        let t = self.next()?;
        match t.strip_prefix('#').and_then(|n| n.parse().ok()) {
            Some(n) => Ok(InstrId(n)),
            None => self.err(format!("expected instruction id, found `{t}`")),
        }
    }

    fn block_list(&mut self) -> Result<Vec<BlockId>, TextError> {
        self.expect("[")?;
        let mut v = Vec::new();
        if self.eat("]") {
            return Ok(v);
        }
        loop {
            v.push(self.block()?);
            if self.eat("]") {
                return Ok(v);
            }
            self.expect(",")?;
        }
    }

    fn init_list(&mut self) -> Result<Vec<i64>, TextError> {
        if !self.eat("=") {
            return Ok(Vec::new());
        }
        self.expect("{")?;
        let mut v = Vec::new();
        if self.eat("}") {
            return Ok(v);
        }
        loop {
            v.push(self.int()?);
            if self.eat("}") {
                return Ok(v);
            }
            self.expect(",")?;
        }
    }
}

fn parse_block_id(t: &str) -> Option<BlockId> {
    t.strip_prefix("bb").and_then(|n| n.parse().ok()).map(BlockId)
}

struct FnCtx<'p> {
    scalars: &'p [GlobalScalar],
    arrays: &'p HashSet<String>,
    func: Function,
}

impl FnCtx<'_> {
    fn reg(&mut self, c: &mut Cursor<'_>) -> Result<Reg, TextError> {
        let t = c.next()?;
        if let Some(name) = t.strip_prefix('%') {
            Ok(self.local(name))
        } else if let Some(name) = t.strip_prefix('@') {
            match self.scalars.iter().position(|s| s.name == name) {
                Some(i) => Ok(Reg::Global(i as u32)),
                None => c.err(format!("unknown global scalar `@{name}`")),
            }
        } else {
            c.err(format!("expected register, found `{t}`"))
        }
    }

    fn local(&mut self, name: &str) -> Reg {
        match self.func.reg_index(name) {
            Some(r) => r,
            None => self.func.add_reg(name),
        }
    }

    fn base(&mut self, c: &mut Cursor<'_>) -> Result<Base, TextError> {
        let t = c.peek().unwrap_or_default();
        if let Some(name) = t.strip_prefix('$') {
            c.pos += 1;
            Ok(Base::Local(name.to_string()))
        } else if let Some(name) = t.strip_prefix('@').filter(|n| self.arrays.contains(*n)) {
            c.pos += 1;
            Ok(Base::Global(name.to_string()))
        } else {
            Ok(Base::Ptr(self.reg(c)?))
        }
    }

    fn address(&mut self, c: &mut Cursor<'_>) -> Result<(Base, Reg), TextError> {
        let base = self.base(c)?;
        c.expect("[")?;
        let index = self.reg(c)?;
        c.expect("]")?;
        Ok((base, index))
    }

    fn call(&mut self, c: &mut Cursor<'_>, dst: Option<Reg>) -> Result<InstrKind, TextError> {
        let name = c.next()?;
        let callee = match Intrinsic::from_name(name) {
            Some(i) => Callee::Intrinsic(i),
            None => Callee::Function(name.to_string()),
        };
        c.expect("(")?;
        let mut args = Vec::new();
        if !c.eat(")") {
            loop {
                args.push(self.reg(c)?);
                if c.eat(")") {
                    break;
                }
                c.expect(",")?;
            }
        }
        Ok(InstrKind::Call { dst, callee, args })
    }

    fn instr(&mut self, c: &mut Cursor<'_>) -> Result<Instr, TextError> {
        let head = c.next()?;
        let (num, synthetic) = match head.strip_suffix('*') {
            Some(n) => (n, true),
            None => (head, false),
        };
        let id = match num.strip_prefix('#').and_then(|n| n.parse().ok()) {
            Some(n) => InstrId(n),
            None => return c.err(format!("expected instruction id, found `{head}`")),
        };
        let first = c.peek().unwrap_or_default();
        let kind = if first.starts_with('%') || first.starts_with('@') {
            let dst = self.reg(c)?;
            c.expect("=")?;
            let op = c.next()?;
            match op {
                "const" => InstrKind::Const { dst, value: c.int()? },
                "copy" => InstrKind::Copy { dst, src: self.reg(c)? },
                "load" => {
                    let (base, index) = self.address(c)?;
                    InstrKind::MemRead { dst, base, index }
                }
                "call" => self.call(c, Some(dst))?,
                other => match BinOp::from_mnemonic(other) {
                    Some(op) => {
                        let lhs = self.reg(c)?;
                        c.expect(",")?;
                        let rhs = self.reg(c)?;
                        InstrKind::Arith { dst, op, lhs, rhs }
                    }
                    None => return c.err(format!("unknown operation `{other}`")),
                },
            }
        } else {
            match c.next()? {
                "store" => {
                    let (base, index) = self.address(c)?;
                    c.expect(",")?;
                    InstrKind::MemWrite {
                        base,
                        index,
                        src: self.reg(c)?,
                    }
                }
                "call" => self.call(c, None)?,
                "check" => {
                    let (base, index) = self.address(c)?;
                    let w = c.next()?;
                    let width = match w.strip_prefix('w').and_then(|n| n.parse().ok()) {
                        Some(n) => n,
                        None => return c.err(format!("expected width, found `{w}`")),
                    };
                    c.expect("guard")?;
                    let access = c.instr_id()?;
                    c.expect("fail")?;
                    let fail = c.block()?;
                    c.expect("pass")?;
                    let pass = c.block()?;
                    InstrKind::Check {
                        base,
                        index,
                        width,
                        access,
                        fail,
                        pass,
                    }
                }
                "br" => {
                    let cond = self.reg(c)?;
                    c.expect(",")?;
                    let then_bb = c.block()?;
                    c.expect(",")?;
                    let else_bb = c.block()?;
                    InstrKind::Branch { cond, then_bb, else_bb }
                }
                "jump" => InstrKind::Jump { target: c.block()? },
                "ret" => InstrKind::Return {
                    value: if c.peek().is_some() { Some(self.reg(c)?) } else { None },
                },
                "abort" => InstrKind::Abort {
                    access: if c.peek().is_some() { Some(c.instr_id()?) } else { None },
                },
                other => return c.err(format!("unknown instruction `{other}`")),
            }
        };
        c.done()?;
        Ok(Instr { id, kind, synthetic })
    }
}

/// Parse the textual form produced by [`print_program`].
pub fn parse_program(text: &str) -> Result<Program, TextError> {
    let lines: Vec<(usize, Vec<String>)> = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, tokenize(l.split(';').next().unwrap_or(""))))
        .filter(|(_, t)| !t.is_empty())
        .collect();

    let mut program = Program {
        functions: Vec::new(),
        globals: Vec::new(),
        scalars: Vec::new(),
        main: "main".to_string(),
    };
    // Globals first so `@name` operands can be classified anywhere.
    for (line, toks) in &lines {
        let mut c = Cursor {
            toks,
            pos: 1,
            line: *line,
        };
        match toks[0].as_str() {
            "global" => {
                let name = sigil_name(&mut c, '@')?;
                c.expect("[")?;
                let size = c.int()?;
                c.expect("]")?;
                let init = c.init_list()?;
                c.done()?;
                program.globals.push(Slot {
                    name,
                    size: size_u32(&c, size)?,
                    region: Region::Global,
                    init,
                });
            }
            "scalar" => {
                let name = sigil_name(&mut c, '@')?;
                c.expect("=")?;
                let init = c.int()?;
                c.done()?;
                program.scalars.push(GlobalScalar { name, init });
            }
            _ => {}
        }
    }
    let arrays: HashSet<String> = program.globals.iter().map(|g| g.name.clone()).collect();

    let mut ctx: Option<FnCtx<'_>> = None;
    let mut current: Option<BlockId> = None;
    let mut explicit_counters = (None, None);
    let mut functions = Vec::new();
    for (line, toks) in &lines {
        let mut c = Cursor {
            toks,
            pos: 0,
            line: *line,
        };
        let head = toks[0].as_str();
        match (&mut ctx, head) {
            (None, "main") => {
                c.pos = 1;
                program.main = c.next()?.to_string();
                c.done()?;
            }
            (None, "global" | "scalar") => {}
            (None, "func") => {
                c.pos = 1;
                let name = c.next()?.to_string();
                let mut f = FnCtx {
                    scalars: &program.scalars,
                    arrays: &arrays,
                    func: Function::new(name),
                };
                f.func.blocks.clear();
                c.expect("(")?;
                if !c.eat(")") {
                    loop {
                        let r = f.reg(&mut c)?;
                        f.func.params.push(r);
                        if c.eat(")") {
                            break;
                        }
                        c.expect(",")?;
                    }
                }
                c.expect("entry")?;
                f.func.entry = c.block()?;
                explicit_counters = (None, None);
                if c.eat("blocks") {
                    explicit_counters.0 = Some(c.int()? as u32);
                }
                if c.eat("instrs") {
                    explicit_counters.1 = Some(c.int()? as u32);
                }
                c.expect("{")?;
                c.done()?;
                ctx = Some(f);
                current = None;
            }
            (Some(_), "}") => {
                c.pos = 1;
                c.done()?;
                let mut func = ctx.take().expect("inside function").func;
                let max_block = func.blocks.keys().map(|b| b.0 + 1).max().unwrap_or(0);
                let max_instr = func.instrs().map(|i| i.id.0 + 1).max().unwrap_or(0);
                func.next_block = explicit_counters.0.unwrap_or(max_block);
                func.next_instr = explicit_counters.1.unwrap_or(max_instr);
                functions.push(func);
                current = None;
            }
            (Some(f), "regs") => {
                c.pos = 1;
                while c.peek().is_some() {
                    let t = c.next()?;
                    match t.strip_prefix('%') {
                        Some(name) => {
                            f.local(name);
                        }
                        None => return c.err(format!("expected register, found `{t}`")),
                    }
                }
            }
            (Some(f), "local") => {
                c.pos = 1;
                let name = sigil_name(&mut c, '$')?;
                c.expect("[")?;
                let size = c.int()?;
                c.expect("]")?;
                let init = c.init_list()?;
                c.done()?;
                f.func.locals.push(Slot {
                    name,
                    size: size_u32(&c, size)?,
                    region: Region::Stack,
                    init,
                });
            }
            (Some(f), "succ" | "pred") => {
                let Some(b) = current else {
                    return c.err("edge list outside a block");
                };
                c.pos = 1;
                c.eat(":");
                let list = c.block_list()?;
                c.done()?;
                let block = f.func.blocks.get_mut(&b).expect("current block exists");
                if head == "succ" {
                    block.succs = list;
                } else {
                    block.preds = list;
                }
            }
            (Some(f), label) if label.starts_with("bb") => {
                let id = c.block()?;
                c.expect(":")?;
                c.done()?;
                if f.func.blocks.insert(id, BasicBlock::new(id)).is_some() {
                    return c.err(format!("duplicate block {id}"));
                }
                current = Some(id);
            }
            (Some(f), t) if t.starts_with('#') => {
                let Some(b) = current else {
                    return c.err("instruction outside a block");
                };
                let instr = f.instr(&mut c)?;
                f.func
                    .blocks
                    .get_mut(&b)
                    .expect("current block exists")
                    .instrs
                    .push(instr);
            }
            (_, other) => return c.err(format!("unexpected `{other}`")),
        }
    }
    if ctx.is_some() {
        return Err(TextError {
            line: lines.last().map(|l| l.0).unwrap_or(0),
            message: "unterminated function".into(),
        });
    }
    // Blocks without an explicit `succ` line take their edges from the
    // terminator, and missing `pred` lines are derived from the edges.
    for f in &mut functions {
        let mut derive_preds = false;
        for b in f.blocks.values_mut() {
            if b.succs.is_empty() {
                if let Some(t) = b.instrs.last() {
                    b.succs = t.kind.targets();
                }
            }
            derive_preds |= b.preds.is_empty();
        }
        if derive_preds && !has_explicit_preds(text) {
            f.rebuild_preds();
        }
    }
    program.functions = functions;
    Ok(program)
}

fn has_explicit_preds(text: &str) -> bool {
    text.lines().any(|l| l.trim_start().starts_with("pred"))
}

fn sigil_name(c: &mut Cursor<'_>, sigil: char) -> Result<String, TextError> {
    let t = c.next()?;
    match t.strip_prefix(sigil) {
        Some(n) if !n.is_empty() => Ok(n.to_string()),
        _ => c.err(format!("expected `{sigil}name`, found `{t}`")),
    }
}

fn size_u32(c: &Cursor<'_>, size: i64) -> Result<u32, TextError> {
    u32::try_from(size)
        .ok()
        .filter(|s| *s > 0)
        .ok_or(())
        .or_else(|_| c.err(format!("array size must be positive, found {size}")))
}

/// Names of every block in `f`, for diagnostics.
#[allow(dead_code)]
pub(crate) fn block_names(f: &Function) -> BTreeMap<BlockId, String> {
    f.blocks.keys().map(|b| (*b, b.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::verify;

    const SAMPLE: &str = "\
main main
global @buf[4] = {1, 2, 3, 4}
scalar @limit = 3
func main() entry bb0 {
bb0:
  #0 %i = const 1
  #1 %v = load @buf[%i]
  #2 %c = lt %v, @limit
  #3 br %c, bb1, bb2
bb1:
  #4 store @buf[%i], %v
  #5* jump bb2
bb2:
  #6 ret %v
}
";

    #[test]
    fn parses_handwritten_ir_and_derives_edges() {
        let p = parse_program(SAMPLE).unwrap();
        assert!(verify(&p).is_empty(), "{:?}", verify(&p));
        let f = p.function("main").unwrap();
        assert_eq!(f.blocks[&BlockId(2)].preds, vec![BlockId(0), BlockId(1)]);
        assert!(f.blocks[&BlockId(1)].instrs[1].synthetic);
        assert_eq!(f.next_instr, 7);
    }

    #[test]
    fn print_parse_round_trip() {
        let p = parse_program(SAMPLE).unwrap();
        let text = print_program(&p);
        assert_eq!(parse_program(&text).unwrap(), p);
    }

    #[test]
    fn reports_line_of_bad_instruction() {
        let bad = SAMPLE.replace("#2 %c = lt", "#2 %c = frob");
        let err = parse_program(&bad).unwrap_err();
        assert_eq!(err.line, 8);
    }
}
