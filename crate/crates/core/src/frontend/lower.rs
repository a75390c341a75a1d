//! AST to IR lowering.
//!
//! Expressions are lowered straight into their destination register where
//! one exists, so `y = a[i]` becomes a single `load` into `y`; nested
//! subexpressions go through fresh `tmp.N` registers. `&&` and `||` are
//! lowered to branches. Every function ends in an implicit `ret`, and blocks
//! left unreachable by `break`/`continue`/`return` are pruned.

use std::collections::HashMap;

use super::ast::*;
use crate::ir::{Base, BinOp, BlockId, Callee, Function, GlobalScalar, InstrKind, Intrinsic, Program, Reg, Slot};
use crate::shadow::Region;

#[derive(Clone, Copy)]
enum GlobalSym {
    Array,
    Scalar(Reg),
}

struct FnLowerer<'a> {
    f: Function,
    /// `None` after a terminator, until something jumps somewhere new.
    cur: Option<BlockId>,
    vars: HashMap<String, Reg>,
    globals: &'a HashMap<String, GlobalSym>,
    /// `(continue target, break target)` of each enclosing loop.
    loops: Vec<(BlockId, BlockId)>,
    temps: u32,
}

pub fn lower(ast: &Ast) -> Program {
    let mut globals = HashMap::new();
    let mut program = Program {
        functions: Vec::new(),
        globals: Vec::new(),
        scalars: Vec::new(),
        main: "main".to_string(),
    };
    for g in &ast.globals {
        match g {
            GlobalDecl::Array { name, size, init } => {
                globals.insert(name.clone(), GlobalSym::Array);
                program.globals.push(Slot {
                    name: name.clone(),
                    size: *size,
                    region: Region::Global,
                    init: init.clone(),
                });
            }
            GlobalDecl::Scalar { name, init } => {
                globals.insert(
                    name.clone(),
                    GlobalSym::Scalar(Reg::Global(program.scalars.len() as u32)),
                );
                program.scalars.push(GlobalScalar {
                    name: name.clone(),
                    init: *init,
                });
            }
        }
    }
    for def in &ast.functions {
        program.functions.push(lower_function(def, &globals));
    }
    program
}

fn lower_function(def: &FuncDef, globals: &HashMap<String, GlobalSym>) -> Function {
    let mut l = FnLowerer {
        f: Function::new(def.name.clone()),
        cur: Some(BlockId(0)),
        vars: HashMap::new(),
        globals,
        loops: Vec::new(),
        temps: 0,
    };
    for p in &def.params {
        let r = l.f.add_reg(p.clone());
        l.f.params.push(r);
        l.vars.insert(p.clone(), r);
    }
    l.body(&def.body);
    if l.cur.is_some() {
        l.emit(InstrKind::Return { value: None });
    }
    l.f.prune_unreachable();
    l.f
}

fn arith(op: BinaryOp) -> BinOp {
    match op {
        BinaryOp::Add => BinOp::Add,
        BinaryOp::Sub => BinOp::Sub,
        BinaryOp::Mul => BinOp::Mul,
        BinaryOp::Div => BinOp::Div,
        BinaryOp::Rem => BinOp::Rem,
        BinaryOp::Eq => BinOp::Eq,
        BinaryOp::Ne => BinOp::Ne,
        BinaryOp::Lt => BinOp::Lt,
        BinaryOp::Le => BinOp::Le,
        BinaryOp::Gt => BinOp::Gt,
        BinaryOp::Ge => BinOp::Ge,
        BinaryOp::BitAnd => BinOp::BitAnd,
        BinaryOp::BitOr => BinOp::BitOr,
        BinaryOp::BitXor => BinOp::BitXor,
        BinaryOp::And | BinaryOp::Or => unreachable!("short-circuit operators lower to branches"),
    }
}

impl FnLowerer<'_> {
    fn block(&mut self) -> BlockId {
        match self.cur {
            Some(b) => b,
            None => {
                let b = self.f.fresh_block();
                self.cur = Some(b);
                b
            }
        }
    }

    fn emit(&mut self, kind: InstrKind) {
        let b = self.block();
        let terminates = kind.is_terminator();
        self.f.push(b, kind, false);
        if terminates {
            self.cur = None;
        }
    }

    fn jump(&mut self, target: BlockId) {
        self.emit(InstrKind::Jump { target });
    }

    fn temp(&mut self) -> Reg {
        let r = self.f.add_reg(format!("tmp.{}", self.temps));
        self.temps += 1;
        r
    }

    fn scalar(&self, name: &str) -> Reg {
        match self.vars.get(name) {
            Some(r) => *r,
            None => match self.globals.get(name) {
                Some(GlobalSym::Scalar(r)) => *r,
                _ => panic!("unresolved scalar `{name}`"),
            },
        }
    }

    fn base(&self, name: &str) -> Base {
        if self.f.local_slot(name).is_some() {
            Base::Local(name.to_string())
        } else if self.vars.contains_key(name) {
            Base::Ptr(self.vars[name])
        } else {
            match self.globals.get(name) {
                Some(GlobalSym::Array) => Base::Global(name.to_string()),
                Some(GlobalSym::Scalar(r)) => Base::Ptr(*r),
                None => panic!("unresolved array `{name}`"),
            }
        }
    }

    fn body(&mut self, stmts: &[Stmt]) {
        for s in stmts {
            self.stmt(s);
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::Local { name, init } => {
                let r = self.f.add_reg(name.clone());
                self.vars.insert(name.clone(), r);
                if let Some(e) = init {
                    self.expr_into(e, r);
                }
            }
            Stmt::LocalArray { name, size, init } => self.f.locals.push(Slot {
                name: name.clone(),
                size: *size,
                region: Region::Stack,
                init: init.clone(),
            }),
            Stmt::Assign {
                target: LValue::Var(name),
                op,
                value,
            } => {
                let dst = self.scalar(name);
                match op {
                    AssignOp::Set => self.expr_into(value, dst),
                    AssignOp::Add | AssignOp::Sub => {
                        let rhs = self.operand(value);
                        let op = if *op == AssignOp::Add { BinOp::Add } else { BinOp::Sub };
                        self.emit(InstrKind::Arith { dst, op, lhs: dst, rhs });
                    }
                }
            }
            Stmt::Assign {
                target: LValue::Index { array, index },
                value,
                ..
            } => {
                let base = self.base(array);
                let index = self.operand(index);
                let src = self.operand(value);
                self.emit(InstrKind::MemWrite { base, index, src });
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
            } => {
                let c = self.operand(cond);
                let then_bb = self.f.fresh_block();
                let join = self.f.fresh_block();
                let else_bb = if else_body.is_some() {
                    self.f.fresh_block()
                } else {
                    join
                };
                self.emit(InstrKind::Branch {
                    cond: c,
                    then_bb,
                    else_bb,
                });
                self.cur = Some(then_bb);
                self.body(then_body);
                if self.cur.is_some() {
                    self.jump(join);
                }
                if let Some(e) = else_body {
                    self.cur = Some(else_bb);
                    self.body(e);
                    if self.cur.is_some() {
                        self.jump(join);
                    }
                }
                self.cur = Some(join);
            }
            Stmt::While { cond, body } => {
                let head = self.f.fresh_block();
                self.jump(head);
                self.cur = Some(head);
                let c = self.operand(cond);
                let body_bb = self.f.fresh_block();
                let exit = self.f.fresh_block();
                self.emit(InstrKind::Branch {
                    cond: c,
                    then_bb: body_bb,
                    else_bb: exit,
                });
                self.loops.push((head, exit));
                self.cur = Some(body_bb);
                self.body(body);
                if self.cur.is_some() {
                    self.jump(head);
                }
                self.loops.pop();
                self.cur = Some(exit);
            }
            Stmt::For { init, cond, step, body } => {
                if let Some(i) = init {
                    self.stmt(i);
                }
                let head = self.f.fresh_block();
                self.jump(head);
                self.cur = Some(head);
                let body_bb = self.f.fresh_block();
                let step_bb = self.f.fresh_block();
                let exit = self.f.fresh_block();
                match cond {
                    Some(c) => {
                        let c = self.operand(c);
                        self.emit(InstrKind::Branch {
                            cond: c,
                            then_bb: body_bb,
                            else_bb: exit,
                        });
                    }
                    None => self.jump(body_bb),
                }
                self.loops.push((step_bb, exit));
                self.cur = Some(body_bb);
                self.body(body);
                if self.cur.is_some() {
                    self.jump(step_bb);
                }
                self.loops.pop();
                self.cur = Some(step_bb);
                if let Some(s) = step {
                    self.stmt(s);
                }
                self.jump(head);
                self.cur = Some(exit);
            }
            Stmt::Break => {
                let (_, exit) = *self.loops.last().expect("break outside loop");
                self.jump(exit);
            }
            Stmt::Continue => {
                let (cont, _) = *self.loops.last().expect("continue outside loop");
                self.jump(cont);
            }
            Stmt::Return(value) => {
                let value = value.as_ref().map(|e| self.operand(e));
                self.emit(InstrKind::Return { value });
            }
            Stmt::Call(Expr::Call { name, args }) => self.call(name, args, None),
            Stmt::Call(other) => panic!("non-call expression statement {other}"),
        }
    }

    fn call(&mut self, name: &str, args: &[Expr], dst: Option<Reg>) {
        let args: Vec<Reg> = args.iter().map(|a| self.operand(a)).collect();
        let callee = match Intrinsic::from_name(name) {
            Some(i) => Callee::Intrinsic(i),
            None => Callee::Function(name.to_string()),
        };
        self.emit(InstrKind::Call { dst, callee, args });
    }

    /// Register holding the value of `e`; variables are used in place.
    fn operand(&mut self, e: &Expr) -> Reg {
        if let Expr::Var(name) = e {
            return self.scalar(name);
        }
        let t = self.temp();
        self.expr_into(e, t);
        t
    }

    fn expr_into(&mut self, e: &Expr, dst: Reg) {
        match e {
            Expr::Int(value) | Expr::Const { value, .. } => self.emit(InstrKind::Const { dst, value: *value }),
            Expr::Var(name) => {
                let src = self.scalar(name);
                if src != dst {
                    self.emit(InstrKind::Copy { dst, src });
                }
            }
            Expr::Index { array, index } => {
                let base = self.base(array);
                let index = self.operand(index);
                self.emit(InstrKind::MemRead { dst, base, index });
            }
            Expr::Unary { op, expr } => {
                let v = self.operand(expr);
                let zero = self.temp();
                self.emit(InstrKind::Const { dst: zero, value: 0 });
                let kind = match op {
                    UnOp::Neg => InstrKind::Arith {
                        dst,
                        op: BinOp::Sub,
                        lhs: zero,
                        rhs: v,
                    },
                    UnOp::Not => InstrKind::Arith {
                        dst,
                        op: BinOp::Eq,
                        lhs: v,
                        rhs: zero,
                    },
                };
                self.emit(kind);
            }
            Expr::Binary {
                op: op @ (BinaryOp::And | BinaryOp::Or),
                lhs,
                rhs,
            } => {
                let l = self.operand(lhs);
                let rhs_bb = self.f.fresh_block();
                let short_bb = self.f.fresh_block();
                let join = self.f.fresh_block();
                let (then_bb, else_bb, short_value) = match op {
                    BinaryOp::And => (rhs_bb, short_bb, 0),
                    _ => (short_bb, rhs_bb, 1),
                };
                self.emit(InstrKind::Branch {
                    cond: l,
                    then_bb,
                    else_bb,
                });
                self.cur = Some(rhs_bb);
                let r = self.operand(rhs);
                let zero = self.temp();
                self.emit(InstrKind::Const { dst: zero, value: 0 });
                self.emit(InstrKind::Arith {
                    dst,
                    op: BinOp::Ne,
                    lhs: r,
                    rhs: zero,
                });
                self.jump(join);
                self.cur = Some(short_bb);
                self.emit(InstrKind::Const {
                    dst,
                    value: short_value,
                });
                self.jump(join);
                self.cur = Some(join);
            }
            Expr::Binary { op, lhs, rhs } => {
                let l = self.operand(lhs);
                let r = self.operand(rhs);
                self.emit(InstrKind::Arith {
                    dst,
                    op: arith(*op),
                    lhs: l,
                    rhs: r,
                });
            }
            Expr::Call { name, args } => self.call(name, args, Some(dst)),
        }
    }
}
