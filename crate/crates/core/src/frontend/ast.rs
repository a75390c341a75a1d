//! Resolved syntax tree and its canonical pretty-printer.
//!
//! The printer parenthesizes every compound expression and braces every
//! body, so `parse(print(ast)) == ast` for any tree the parser produces.

use std::fmt::{self, Write as _};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ast {
    pub consts: Vec<ConstDecl>,
    pub globals: Vec<GlobalDecl>,
    pub functions: Vec<FuncDef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstDecl {
    pub name: String,
    pub value: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlobalDecl {
    Array { name: String, size: u32, init: Vec<i64> },
    Scalar { name: String, init: i64 },
}

impl GlobalDecl {
    pub fn name(&self) -> &str {
        match self {
            GlobalDecl::Array { name, .. } | GlobalDecl::Scalar { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuncDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignOp {
    Set,
    Add,
    Sub,
}

impl AssignOp {
    fn symbol(self) -> &'static str {
        match self {
            AssignOp::Set => "=",
            AssignOp::Add => "+=",
            AssignOp::Sub => "-=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LValue {
    Var(String),
    Index { array: String, index: Box<Expr> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Local {
        name: String,
        init: Option<Expr>,
    },
    LocalArray {
        name: String,
        size: u32,
        init: Vec<i64>,
    },
    /// Compound operators only apply to scalars.
    Assign {
        target: LValue,
        op: AssignOp,
        value: Expr,
    },
    If {
        cond: Expr,
        then_body: Vec<Stmt>,
        else_body: Option<Vec<Stmt>>,
    },
    While {
        cond: Expr,
        body: Vec<Stmt>,
    },
    For {
        init: Option<Box<Stmt>>,
        cond: Option<Expr>,
        step: Option<Box<Stmt>>,
        body: Vec<Stmt>,
    },
    Break,
    Continue,
    Return(Option<Expr>),
    /// A call evaluated for its effect.
    Call(Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
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
    And,
    Or,
    BitAnd,
    BitOr,
    BitXor,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Rem => "%",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
            BinaryOp::BitAnd => "&",
            BinaryOp::BitOr => "|",
            BinaryOp::BitXor => "^",
        }
    }

    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::BitOr => 3,
            BinaryOp::BitXor => 4,
            BinaryOp::BitAnd => 5,
            BinaryOp::Eq | BinaryOp::Ne => 6,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 7,
            BinaryOp::Add | BinaryOp::Sub => 8,
            BinaryOp::Mul | BinaryOp::Div | BinaryOp::Rem => 9,
        }
    }

    pub const ALL: [BinaryOp; 16] = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Rem,
        BinaryOp::Eq,
        BinaryOp::Ne,
        BinaryOp::Lt,
        BinaryOp::Le,
        BinaryOp::Gt,
        BinaryOp::Ge,
        BinaryOp::And,
        BinaryOp::Or,
        BinaryOp::BitAnd,
        BinaryOp::BitOr,
        BinaryOp::BitXor,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    /// Reference to a named constant, kept by name for printing.
    Const {
        name: String,
        value: i64,
    },
    Var(String),
    Index {
        array: String,
        index: Box<Expr>,
    },
    Unary {
        op: UnOp,
        expr: Box<Expr>,
    },
    Binary {
        op: BinaryOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        name: String,
        args: Vec<Expr>,
    },
}

impl Expr {
    pub fn int(v: i64) -> Expr {
        Expr::Int(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn index(array: &str, index: Expr) -> Expr {
        Expr::Index {
            array: array.to_string(),
            index: Box::new(index),
        }
    }

    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn call(name: &str, args: Vec<Expr>) -> Expr {
        Expr::Call {
            name: name.to_string(),
            args,
        }
    }

    /// Number of array subscripts in this expression.
    pub fn subscripts(&self) -> usize {
        match self {
            Expr::Int(_) | Expr::Const { .. } | Expr::Var(_) => 0,
            Expr::Index { index, .. } => 1 + index.subscripts(),
            Expr::Unary { expr, .. } => expr.subscripts(),
            Expr::Binary { lhs, rhs, .. } => lhs.subscripts() + rhs.subscripts(),
            Expr::Call { args, .. } => args.iter().map(Expr::subscripts).sum(),
        }
    }
}

impl Stmt {
    pub fn subscripts(&self) -> usize {
        let body = |b: &[Stmt]| b.iter().map(Stmt::subscripts).sum::<usize>();
        match self {
            Stmt::Local { init, .. } => init.as_ref().map_or(0, Expr::subscripts),
            Stmt::LocalArray { .. } | Stmt::Break | Stmt::Continue => 0,
            Stmt::Assign { target, value, .. } => {
                let t = match target {
                    LValue::Var(_) => 0,
                    LValue::Index { index, .. } => 1 + index.subscripts(),
                };
                t + value.subscripts()
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
            } => cond.subscripts() + body(then_body) + else_body.as_deref().map_or(0, body),
            Stmt::While { cond, body: b } => cond.subscripts() + body(b),
            Stmt::For {
                init,
                cond,
                step,
                body: b,
            } => {
                init.as_deref().map_or(0, Stmt::subscripts)
                    + cond.as_ref().map_or(0, Expr::subscripts)
                    + step.as_deref().map_or(0, Stmt::subscripts)
                    + body(b)
            }
            Stmt::Return(e) => e.as_ref().map_or(0, Expr::subscripts),
            Stmt::Call(e) => e.subscripts(),
        }
    }
}

impl Ast {
    /// Total array subscripts in the program; lowering emits exactly one
    /// memory access per subscript.
    pub fn subscripts(&self) -> usize {
        self.functions.iter().flat_map(|f| &f.body).map(Stmt::subscripts).sum()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Const { name, .. } | Expr::Var(name) => f.write_str(name),
            Expr::Index { array, index } => write!(f, "{array}[{index}]"),
            Expr::Unary { op: UnOp::Neg, expr } => write!(f, "(-{expr})"),
            Expr::Unary { op: UnOp::Not, expr } => write!(f, "(!{expr})"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Call { name, args } => {
                let args: Vec<String> = args.iter().map(|a| a.to_string()).collect();
                write!(f, "{name}({})", args.join(", "))
            }
        }
    }
}

fn init_list(init: &[i64]) -> String {
    if init.is_empty() {
        String::new()
    } else {
        let v: Vec<String> = init.iter().map(|x| x.to_string()).collect();
        format!(" = {{{}}}", v.join(", "))
    }
}

/// A statement without its trailing `;`, as it appears in `for` headers.
fn simple(s: &Stmt) -> String {
    match s {
        Stmt::Local { name, init: None } => format!("int {name}"),
        Stmt::Local { name, init: Some(e) } => format!("int {name} = {e}"),
        Stmt::LocalArray { name, size, init } => format!("int {name}[{size}]{}", init_list(init)),
        Stmt::Assign { target, op, value } => {
            let t = match target {
                LValue::Var(v) => v.clone(),
                LValue::Index { array, index } => format!("{array}[{index}]"),
            };
            format!("{t} {} {value}", op.symbol())
        }
        Stmt::Break => "break".into(),
        Stmt::Continue => "continue".into(),
        Stmt::Return(None) => "return".into(),
        Stmt::Return(Some(e)) => format!("return {e}"),
        Stmt::Call(e) => e.to_string(),
        Stmt::If { .. } | Stmt::While { .. } | Stmt::For { .. } => {
            unreachable!("compound statement in simple position")
        }
    }
}

fn write_body(out: &mut String, body: &[Stmt], depth: usize) {
    for s in body {
        write_stmt(out, s, depth);
    }
}

fn write_stmt(out: &mut String, s: &Stmt, depth: usize) {
    let pad = "    ".repeat(depth);
    match s {
        Stmt::If {
            cond,
            then_body,
            else_body,
        } => {
            writeln!(out, "{pad}if ({cond}) {{").unwrap();
            write_body(out, then_body, depth + 1);
            match else_body {
                Some(e) => {
                    writeln!(out, "{pad}}} else {{").unwrap();
                    write_body(out, e, depth + 1);
                    writeln!(out, "{pad}}}").unwrap();
                }
                None => writeln!(out, "{pad}}}").unwrap(),
            }
        }
        Stmt::While { cond, body } => {
            writeln!(out, "{pad}while ({cond}) {{").unwrap();
            write_body(out, body, depth + 1);
            writeln!(out, "{pad}}}").unwrap();
        }
        Stmt::For { init, cond, step, body } => {
            let i = init.as_deref().map(simple).unwrap_or_default();
            let c = cond.as_ref().map(|c| c.to_string()).unwrap_or_default();
            let st = step.as_deref().map(simple).unwrap_or_default();
            writeln!(out, "{pad}for ({i}; {c}; {st}) {{").unwrap();
            write_body(out, body, depth + 1);
            writeln!(out, "{pad}}}").unwrap();
        }
        other => writeln!(out, "{pad}{};", simple(other)).unwrap(),
    }
}

impl fmt::Display for Ast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for c in &self.consts {
            writeln!(out, "const {} = {};", c.name, c.value).unwrap();
        }
        for g in &self.globals {
            match g {
                GlobalDecl::Array { name, size, init } => {
                    writeln!(out, "int {name}[{size}]{};", init_list(init)).unwrap()
                }
                GlobalDecl::Scalar { name, init } => writeln!(out, "int {name} = {init};").unwrap(),
            }
        }
        for func in &self.functions {
            writeln!(out, "func {}({}) {{", func.name, func.params.join(", ")).unwrap();
            write_body(&mut out, &func.body, 1);
            writeln!(out, "}}").unwrap();
        }
        f.write_str(&out)
    }
}
