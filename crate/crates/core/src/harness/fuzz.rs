//! Seeded random programs and tapes, and the cross-mode differential check.
//!
//! Generated programs are violation-free by construction: every subscript
//! is reduced into range with `((e % n) + n) % n`, every loop has a constant
//! trip count, and helpers only call helpers defined before them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frontend::ast::{AssignOp, Ast, BinaryOp, Expr, FuncDef, GlobalDecl, LValue, Stmt, UnOp};
use crate::instrument::Mode;
use crate::ir::{verify, Program};
use crate::shadow::ShadowConfig;
use crate::vm::Status;

use super::execute;

pub const SEED_VAR: &str = "CIMA_LAB_SEED";
const DEFAULT_SEED: u64 = 0x5eed_c1a4;

/// Seed from `CIMA_LAB_SEED`, or a fixed default.
pub fn seed_from_env() -> u64 {
    std::env::var(SEED_VAR)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(DEFAULT_SEED)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FNV-1a, for deriving stable per-scenario seeds.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn random_tape(rng: &mut impl Rng, len: usize, lo: i64, hi: i64) -> Vec<i64> {
    (0..len).map(|_| rng.gen_range(lo..=hi)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenConfig {
    pub max_arrays: usize,
    pub max_array_len: u32,
    pub max_helpers: usize,
    pub max_stmts: usize,
    pub max_depth: usize,
    pub max_trip: i64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_arrays: 3,
            max_array_len: 12,
            max_helpers: 2,
            max_stmts: 6,
            max_depth: 2,
            max_trip: 5,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LoopKind {
    For,
    While,
}

struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    cfg: GenConfig,
    arrays: Vec<(String, u32)>,
    scalars: Vec<String>,
    helpers: Vec<(String, usize)>,
    names: usize,
    // Per function.
    scopes: Vec<Vec<String>>,
    readonly: Vec<String>,
    local_arrays: Vec<(String, u32)>,
    heap: Option<(String, u32)>,
    loops: Vec<LoopKind>,
    in_main: bool,
}

fn bin(op: BinaryOp, l: Expr, r: Expr) -> Expr {
    Expr::binary(op, l, r)
}

/// `((e % n) + n) % n`, always in `0..n`.
pub fn in_range(e: Expr, n: u32) -> Expr {
    let n = Expr::int(n as i64);
    bin(
        BinaryOp::Rem,
        bin(BinaryOp::Add, bin(BinaryOp::Rem, e, n.clone()), n.clone()),
        n,
    )
}

impl<R: Rng> Gen<'_, R> {
    fn fresh(&mut self, prefix: &str) -> String {
        self.names += 1;
        format!("{prefix}{}", self.names)
    }

    fn readable(&self) -> Vec<String> {
        let mut v: Vec<String> = self.scopes.iter().flatten().cloned().collect();
        v.extend(self.readonly.iter().cloned());
        v.extend(self.scalars.iter().cloned());
        v
    }

    fn writable(&self) -> Vec<String> {
        let mut v: Vec<String> = self.scopes.iter().flatten().cloned().collect();
        v.extend(self.scalars.iter().cloned());
        v
    }

    fn indexable(&self) -> Vec<(String, u32)> {
        let mut v = self.arrays.clone();
        v.extend(self.local_arrays.iter().cloned());
        v.extend(self.heap.iter().cloned());
        v
    }

    fn leaf(&mut self) -> Expr {
        let vars = self.readable();
        match self.rng.gen_range(0..10) {
            0..=3 if !vars.is_empty() => Expr::var(vars.choose(self.rng).expect("nonempty")),
            4 => Expr::call("read_input", vec![Expr::int(self.rng.gen_range(0..3))]),
            _ => Expr::int(self.rng.gen_range(0..=20)),
        }
    }

    fn expr(&mut self, depth: usize) -> Expr {
        if depth == 0 {
            return self.leaf();
        }
        match self.rng.gen_range(0..12) {
            0..=4 => {
                let op = *BinaryOp::ALL.choose(self.rng).expect("ops");
                let l = self.expr(depth - 1);
                let r = self.expr(depth - 1);
                bin(op, l, r)
            }
            5 => {
                let op = if self.rng.gen_bool(0.5) { UnOp::Neg } else { UnOp::Not };
                Expr::Unary {
                    op,
                    expr: Box::new(self.expr(depth - 1)),
                }
            }
            6 | 7 => {
                let arrays = self.indexable();
                match arrays.choose(self.rng).cloned() {
                    Some((a, n)) => {
                        let i = self.expr(depth - 1);
                        Expr::index(&a, in_range(i, n))
                    }
                    None => self.leaf(),
                }
            }
            8 if !self.helpers.is_empty() => {
                let (h, arity) = self.helpers.choose(self.rng).cloned().expect("nonempty");
                let args = (0..arity).map(|_| self.expr(depth - 1)).collect();
                Expr::call(&h, args)
            }
            _ => self.leaf(),
        }
    }

    fn body(&mut self, depth: usize) -> Vec<Stmt> {
        self.scopes.push(Vec::new());
        let n = self.rng.gen_range(1..=self.cfg.max_stmts.max(1));
        let out = (0..n).map(|_| self.stmt(depth)).collect();
        self.scopes.pop();
        out
    }

    fn stmt(&mut self, depth: usize) -> Stmt {
        let nested = depth < self.cfg.max_depth;
        match self.rng.gen_range(0..16) {
            0 | 1 => {
                let name = self.fresh("v");
                let init = self.expr(2);
                self.scopes.last_mut().expect("scope").push(name.clone());
                Stmt::Local { name, init: Some(init) }
            }
            2..=4 => {
                let targets = self.writable();
                let Some(t) = targets.choose(self.rng).cloned() else {
                    return self.output();
                };
                let op = *[AssignOp::Set, AssignOp::Add, AssignOp::Sub]
                    .choose(self.rng)
                    .expect("ops");
                Stmt::Assign {
                    target: LValue::Var(t),
                    op,
                    value: self.expr(2),
                }
            }
            5 | 6 => {
                let arrays = self.indexable();
                let Some((a, n)) = arrays.choose(self.rng).cloned() else {
                    return self.output();
                };
                let i = self.expr(1);
                Stmt::Assign {
                    target: LValue::Index {
                        array: a,
                        index: Box::new(in_range(i, n)),
                    },
                    op: AssignOp::Set,
                    value: self.expr(2),
                }
            }
            7 | 8 if nested => {
                let cond = self.expr(2);
                let then_body = self.body(depth + 1);
                let else_body = self.rng.gen_bool(0.5).then(|| self.body(depth + 1));
                Stmt::If {
                    cond,
                    then_body,
                    else_body,
                }
            }
            9 if nested => self.for_loop(depth),
            10 if nested => self.while_loop(depth),
            11 if !self.loops.is_empty() => {
                let cond = self.expr(1);
                let leave = if self.loops.last() == Some(&LoopKind::For) && self.rng.gen_bool(0.5) {
                    Stmt::Continue
                } else {
                    Stmt::Break
                };
                Stmt::If {
                    cond,
                    then_body: vec![leave],
                    else_body: None,
                }
            }
            12 if !self.helpers.is_empty() => {
                let (h, arity) = self.helpers.choose(self.rng).cloned().expect("nonempty");
                let args = (0..arity).map(|_| self.expr(1)).collect();
                Stmt::Call(Expr::call(&h, args))
            }
            13 if self.in_main && self.loops.len() == 1 => Stmt::Call(Expr::call("scan_end", vec![])),
            _ => self.output(),
        }
    }

    fn output(&mut self) -> Stmt {
        let ch = self.rng.gen_range(0..4);
        Stmt::Call(Expr::call("output", vec![Expr::int(ch), self.expr(2)]))
    }

    fn for_loop(&mut self, depth: usize) -> Stmt {
        let v = self.fresh("lv");
        let trip = self.rng.gen_range(0..=self.cfg.max_trip);
        self.readonly.push(v.clone());
        self.loops.push(LoopKind::For);
        let body = self.body(depth + 1);
        self.loops.pop();
        self.readonly.pop();
        Stmt::For {
            init: Some(Box::new(Stmt::Local {
                name: v.clone(),
                init: Some(Expr::int(0)),
            })),
            cond: Some(bin(BinaryOp::Lt, Expr::var(&v), Expr::int(trip))),
            step: Some(Box::new(Stmt::Assign {
                target: LValue::Var(v.clone()),
                op: AssignOp::Add,
                value: Expr::int(1),
            })),
            body,
        }
    }

    fn while_loop(&mut self, depth: usize) -> Stmt {
        let v = self.fresh("w");
        let trip = self.rng.gen_range(0..=self.cfg.max_trip);
        self.readonly.push(v.clone());
        self.loops.push(LoopKind::While);
        let mut body = self.body(depth + 1);
        self.loops.pop();
        self.readonly.pop();
        body.push(Stmt::Assign {
            target: LValue::Var(v.clone()),
            op: AssignOp::Add,
            value: Expr::int(1),
        });
        // The counter is declared just before the loop.
        Stmt::If {
            cond: Expr::int(1),
            then_body: vec![
                Stmt::Local {
                    name: v.clone(),
                    init: Some(Expr::int(0)),
                },
                Stmt::While {
                    cond: bin(BinaryOp::Lt, Expr::var(&v), Expr::int(trip)),
                    body,
                },
            ],
            else_body: None,
        }
    }

    fn function(&mut self, name: &str, params: usize, is_main: bool) -> FuncDef {
        self.scopes = vec![Vec::new()];
        self.readonly.clear();
        self.local_arrays.clear();
        self.heap = None;
        self.loops.clear();
        self.in_main = is_main;
        let params: Vec<String> = (0..params).map(|_| self.fresh("p")).collect();
        self.scopes[0].extend(params.iter().cloned());
        let mut body = Vec::new();
        if self.rng.gen_bool(0.4) {
            let name = self.fresh("la");
            let size = self.rng.gen_range(1..=self.cfg.max_array_len);
            let init = (0..self.rng.gen_range(0..=size))
                .map(|_| self.rng.gen_range(0..50))
                .collect();
            self.local_arrays.push((name.clone(), size));
            body.push(Stmt::LocalArray { name, size, init });
        }
        if is_main && self.rng.gen_bool(0.3) {
            let name = self.fresh("hp");
            let size = self.rng.gen_range(1..=self.cfg.max_array_len);
            body.push(Stmt::Local {
                name: name.clone(),
                init: Some(Expr::call("alloc", vec![Expr::int(size as i64)])),
            });
            self.heap = Some((name, size));
        }
        let n = self.rng.gen_range(1..=self.cfg.max_stmts);
        for _ in 0..n {
            let s = self.stmt(0);
            body.push(s);
        }
        if let Some((hp, _)) = self.heap.take() {
            if self.rng.gen_bool(0.7) {
                body.push(Stmt::Call(Expr::call("free", vec![Expr::var(&hp)])));
            }
        }
        if !is_main {
            let e = self.expr(2);
            body.push(Stmt::Return(Some(e)));
        }
        FuncDef {
            name: name.to_string(),
            params,
            body,
        }
    }
}

/// A random terminating program that performs no illegal access on any
/// input tape.
pub fn clean_program(rng: &mut impl Rng, cfg: &GenConfig) -> Ast {
    let mut g = Gen {
        rng,
        cfg: *cfg,
        arrays: Vec::new(),
        scalars: Vec::new(),
        helpers: Vec::new(),
        names: 0,
        scopes: Vec::new(),
        readonly: Vec::new(),
        local_arrays: Vec::new(),
        heap: None,
        loops: Vec::new(),
        in_main: false,
    };
    let mut globals = Vec::new();
    for k in 0..g.rng.gen_range(1..=cfg.max_arrays.max(1)) {
        let name = format!("g{k}");
        let size = g.rng.gen_range(1..=cfg.max_array_len);
        let init = (0..g.rng.gen_range(0..=size))
            .map(|_| g.rng.gen_range(0..100))
            .collect();
        g.arrays.push((name.clone(), size));
        globals.push(GlobalDecl::Array { name, size, init });
    }
    for k in 0..g.rng.gen_range(0..=2) {
        let name = format!("s{k}");
        let init = g.rng.gen_range(0..10);
        g.scalars.push(name.clone());
        globals.push(GlobalDecl::Scalar { name, init });
    }
    let mut functions = Vec::new();
    for k in 0..g.rng.gen_range(0..=cfg.max_helpers) {
        let name = format!("h{k}");
        let arity = g.rng.gen_range(0..=2);
        let f = g.function(&name, arity, false);
        functions.push(f);
        g.helpers.push((name, arity));
    }
    functions.push(g.function("main", 0, true));
    Ast {
        consts: Vec::new(),
        globals,
        functions,
    }
}

/// Arrays visible at the top level of `main` before statement `pos`.
fn arrays_before(ast: &Ast, pos: usize) -> Vec<(String, u32)> {
    let mut v: Vec<(String, u32)> = ast
        .globals
        .iter()
        .filter_map(|g| match g {
            GlobalDecl::Array { name, size, .. } => Some((name.clone(), *size)),
            GlobalDecl::Scalar { .. } => None,
        })
        .collect();
    let main = ast.functions.last().expect("main");
    for s in &main.body[..pos] {
        if let Stmt::LocalArray { name, size, .. } = s {
            v.push((name.clone(), *size));
        }
    }
    v
}

/// Derive a variant of a [`clean_program`] whose `main` first reads an
/// attacker index and then uses it unreduced on some array. Returns the
/// variant and the out-of-range value to put first on the tape.
pub fn violating_variant(rng: &mut impl Rng, ast: &Ast) -> (Ast, i64) {
    let mut out = ast.clone();
    let main = out.functions.last_mut().expect("main");
    let pos = rng.gen_range(0..=main.body.len());
    let arrays = arrays_before(ast, pos);
    let (array, size) = arrays.choose(rng).cloned().expect("at least one global array");
    let atk = "atk".to_string();
    let access = if rng.gen_bool(0.5) {
        Stmt::Assign {
            target: LValue::Index {
                array: array.clone(),
                index: Box::new(Expr::var(&atk)),
            },
            op: AssignOp::Set,
            value: Expr::int(rng.gen_range(0..100)),
        }
    } else {
        Stmt::Call(Expr::call(
            "output",
            vec![Expr::int(9), Expr::index(&array, Expr::var(&atk))],
        ))
    };
    main.body.insert(pos, access);
    main.body.insert(
        0,
        Stmt::Local {
            name: atk,
            init: Some(Expr::call("read_input", vec![Expr::int(0)])),
        },
    );
    // Stay inside the redzones: further out the index may land in a
    // neighbouring object, which no redzone scheme can see.
    let rz = ShadowConfig::default().redzone_words as i64;
    let bad = if rng.gen_bool(0.6) {
        size as i64 + rng.gen_range(0..rz)
    } else {
        -rng.gen_range(1..=rz)
    };
    (out, bad)
}

/// Result of running one program under all three modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffOutcome {
    /// No mode observed an illegal access.
    pub clean: bool,
    /// Every mode ran to completion within the step budget.
    pub finished: bool,
}

fn common_prefix<T: PartialEq>(a: &[T], b: &[T]) -> bool {
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

/// Run `base` under every mode and check that the modes agree: identical
/// behaviour when nothing illegal happens, and otherwise an abort-mode
/// instruction trace that is a strict prefix of the skip-mode one. Runs cut
/// short by the step budget are compared on their common prefix.
pub fn differential(base: &Program, tape: &[i64], max_steps: u64) -> Result<DiffOutcome, String> {
    let run = |m: Mode| execute(base, m, None, tape, max_steps).map_err(|e| format!("{m}: {e}"));
    let none = run(Mode::None)?;
    let abort = run(Mode::Abort)?;
    let cima = run(Mode::Cima)?;
    let mut finished = true;
    for r in [&none, &abort, &cima] {
        let v = verify(&r.program);
        if !v.is_empty() {
            return Err(format!("{} program fails verification: {v:?}", r.mode));
        }
        match r.trace.status {
            Status::Trapped { ref reason } => return Err(format!("{} run trapped: {reason}", r.mode)),
            Status::StepBudgetExhausted => finished = false,
            _ => {}
        }
    }
    let aborted = matches!(abort.trace.status, Status::Aborted { .. });
    if aborted == cima.trace.skipped.is_empty() {
        return Err(format!(
            "abort status {:?} disagrees with {} skips",
            abort.trace.status,
            cima.trace.skipped.len()
        ));
    }
    let n = none.trace.executed();
    let a = abort.trace.executed();
    let c = cima.trace.executed();
    if !aborted {
        if a != c || abort.trace.outputs != cima.trace.outputs {
            return Err(format!(
                "abort and skip runs differ: {} vs {} instructions",
                a.len(),
                c.len()
            ));
        }
        if abort.trace.check_count() != cima.trace.check_count() {
            return Err(format!(
                "check counts differ: {} vs {}",
                abort.trace.check_count(),
                cima.trace.check_count()
            ));
        }
        if finished {
            if !none.trace.unchecked_faults.is_empty() {
                return Err(format!(
                    "unchecked faults {:?} went undetected",
                    none.trace.unchecked_faults
                ));
            }
            if n != a || none.trace.outputs != abort.trace.outputs {
                return Err(format!(
                    "unchecked run differs: {} vs {} instructions",
                    n.len(),
                    a.len()
                ));
            }
        } else if !common_prefix(&n, &a) {
            return Err("unchecked and checked runs diverge before the step budget".into());
        }
        return Ok(DiffOutcome { clean: true, finished });
    }
    if a.len() >= c.len() || c[..a.len()] != a[..] {
        return Err(format!(
            "abort trace ({}) is not a strict prefix of the skip trace ({})",
            a.len(),
            c.len()
        ));
    }
    if !n.starts_with(&a) && !a.starts_with(&n) {
        return Err("unchecked run diverges before the first illegal access".into());
    }
    if !cima.trace.outputs.starts_with(&abort.trace.outputs) {
        return Err("abort outputs are not a prefix of skip outputs".into());
    }
    Ok(DiffOutcome { clean: false, finished })
}

/// A loop that loads `arr[input]` into `x` once per iteration, with tape
/// windows of out-of-range indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowCase {
    pub ast: Ast,
    pub tape: Vec<i64>,
    pub init: Vec<i64>,
    pub x0: i64,
}

pub fn window_case(rng: &mut impl Rng) -> WindowCase {
    let size = rng.gen_range(1..=16u32);
    let init: Vec<i64> = (0..size).map(|_| rng.gen_range(0..1000)).collect();
    let iters = rng.gen_range(1..=40usize);
    let x0 = rng.gen_range(0..1000);
    let mut tape: Vec<i64> = (0..iters).map(|_| rng.gen_range(0..size as i64)).collect();
    for _ in 0..rng.gen_range(0..=3) {
        let start = rng.gen_range(0..iters);
        let len = rng.gen_range(1..=iters - start);
        for slot in &mut tape[start..start + len] {
            *slot = if rng.gen_bool(0.5) {
                size as i64 + rng.gen_range(0..50)
            } else {
                -rng.gen_range(1..=50)
            };
        }
    }
    let body = vec![
        Stmt::Assign {
            target: LValue::Var("x".into()),
            op: AssignOp::Set,
            value: Expr::index("arr", Expr::call("read_input", vec![Expr::int(0)])),
        },
        Stmt::Call(Expr::call("output", vec![Expr::int(0), Expr::var("x")])),
    ];
    let main = FuncDef {
        name: "main".into(),
        params: Vec::new(),
        body: vec![
            Stmt::Local {
                name: "x".into(),
                init: Some(Expr::int(x0)),
            },
            Stmt::For {
                init: Some(Box::new(Stmt::Local {
                    name: "t".into(),
                    init: Some(Expr::int(0)),
                })),
                cond: Some(bin(BinaryOp::Lt, Expr::var("t"), Expr::int(iters as i64))),
                step: Some(Box::new(Stmt::Assign {
                    target: LValue::Var("t".into()),
                    op: AssignOp::Add,
                    value: Expr::int(1),
                })),
                body,
            },
        ],
    };
    WindowCase {
        ast: Ast {
            consts: Vec::new(),
            globals: vec![GlobalDecl::Array {
                name: "arr".into(),
                size,
                init: init.clone(),
            }],
            functions: vec![main],
        },
        tape,
        init,
        x0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile, lower, parse_source};

    #[test]
    fn generated_programs_print_and_reparse() {
        let mut r = rng(7);
        for _ in 0..60 {
            let ast = clean_program(&mut r, &GenConfig::default());
            let text = ast.to_string();
            let back = parse_source(&text).unwrap_or_else(|d| panic!("{d:?}\n{text}"));
            assert_eq!(back, ast, "{text}");
        }
    }

    #[test]
    fn clean_programs_agree_across_modes() {
        let mut r = rng(11);
        for _ in 0..40 {
            let ast = clean_program(&mut r, &GenConfig::default());
            let tape = random_tape(&mut r, 16, -100, 100);
            let out = differential(&lower(&ast), &tape, 1_000_000).unwrap_or_else(|e| panic!("{e}\n{ast}"));
            assert!(out.clean && out.finished, "{ast}");
        }
    }

    #[test]
    fn violating_variants_abort_on_a_prefix() {
        let mut r = rng(13);
        for _ in 0..40 {
            let ast = clean_program(&mut r, &GenConfig::default());
            let (bad, idx) = violating_variant(&mut r, &ast);
            let mut tape = vec![idx];
            tape.extend(random_tape(&mut r, 16, -100, 100));
            let p = compile(&bad.to_string()).unwrap();
            let out = differential(&p, &tape, 1_000_000).unwrap_or_else(|e| panic!("{e}\n{bad}"));
            assert!(!out.clean, "{bad}");
        }
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(hash_str("a"), hash_str("a"));
        assert_ne!(hash_str("a"), hash_str("b"));
        let a = random_tape(&mut rng(3), 5, 0, 9);
        let b = random_tape(&mut rng(3), 5, 0, 9);
        assert_eq!(a, b);
    }
}
