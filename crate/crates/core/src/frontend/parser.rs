//! Recursive-descent parser with name resolution folded in: the first
//! problem found, syntactic or semantic, is reported with its position.

use std::collections::{HashMap, HashSet};

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::Diagnostic;
use crate::ir::Intrinsic;

const KEYWORDS: [&str; 10] = [
    "func", "int", "const", "if", "else", "while", "for", "break", "continue", "return",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sym {
    Const(i64),
    Scalar,
    Array,
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    consts: HashMap<String, i64>,
    globals: HashMap<String, Sym>,
    functions: HashMap<String, usize>,
    /// Calls to user functions, checked once every definition is known.
    pending_calls: Vec<(String, usize, usize, usize)>,
    scopes: Vec<HashMap<String, Sym>>,
    fn_names: HashSet<String>,
    loop_depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.toks[self.pos];
        (t.line, t.col)
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn syntax<T>(&self, expected: &str) -> PResult<T> {
        let (line, col) = self.here();
        Err(Diagnostic::Syntax {
            line,
            col,
            expected: expected.to_string(),
            found: self.peek().to_string(),
        })
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_keyword(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == k)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            self.syntax(&format!("`{p}`"))
        }
    }

    fn expect_keyword(&mut self, k: &str) -> PResult<()> {
        if self.is_keyword(k) {
            self.bump();
            Ok(())
        } else {
            self.syntax(&format!("`{k}`"))
        }
    }

    fn ident(&mut self) -> PResult<(String, usize, usize)> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let t = self.bump();
                Ok((s, t.line, t.col))
            }
            _ => self.syntax("identifier"),
        }
    }

    fn lookup(&self, name: &str) -> Option<Sym> {
        for scope in self.scopes.iter().rev() {
            if let Some(s) = scope.get(name) {
                return Some(*s);
            }
        }
        self.globals
            .get(name)
            .copied()
            .or_else(|| self.consts.get(name).map(|v| Sym::Const(*v)))
    }

    fn name_error<T>(&self, identifier: &str, line: usize, col: usize, message: &str) -> PResult<T> {
        Err(Diagnostic::Name {
            line,
            col,
            identifier: identifier.to_string(),
            message: message.to_string(),
        })
    }

    fn type_error<T>(&self, line: usize, col: usize, message: String) -> PResult<T> {
        Err(Diagnostic::Type { line, col, message })
    }

    /// Reject a new declaration that would clash with any visible name.
    fn check_fresh(&self, name: &str, line: usize, col: usize) -> PResult<()> {
        let taken = self.consts.contains_key(name)
            || self.globals.contains_key(name)
            || self.fn_names.contains(name)
            || self.functions.contains_key(name)
            || Intrinsic::from_name(name).is_some();
        if taken {
            self.name_error(name, line, col, "already declared")
        } else {
            Ok(())
        }
    }

    fn declare_local(&mut self, name: &str, sym: Sym, line: usize, col: usize) -> PResult<()> {
        self.check_fresh(name, line, col)?;
        self.fn_names.insert(name.to_string());
        self.scopes
            .last_mut()
            .expect("inside a function")
            .insert(name.to_string(), sym);
        Ok(())
    }

    /// `-`? (integer | constant name)
    fn const_value(&mut self) -> PResult<i64> {
        let neg = self.eat_punct("-");
        let v = match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                v
            }
            Tok::Ident(name) if !KEYWORDS.contains(&name.as_str()) => {
                let t = self.bump();
                match self.consts.get(&name) {
                    Some(v) => *v,
                    None if self.lookup(&name).is_some() => {
                        return self.type_error(t.line, t.col, format!("`{name}` is not a constant"))
                    }
                    None => return self.name_error(&name, t.line, t.col, "undeclared constant"),
                }
            }
            _ => return self.syntax("integer constant"),
        };
        Ok(if neg { v.wrapping_neg() } else { v })
    }

    fn array_size(&mut self, name: &str) -> PResult<u32> {
        let (line, col) = self.here();
        let size = self.const_value()?;
        match u32::try_from(size) {
            Ok(s) if s > 0 => Ok(s),
            _ => Err(Diagnostic::Size {
                line,
                col,
                name: name.to_string(),
                size,
            }),
        }
    }

    fn init_list(&mut self, name: &str, size: u32) -> PResult<Vec<i64>> {
        let mut v = Vec::new();
        if !self.eat_punct("=") {
            return Ok(v);
        }
        let (line, col) = self.here();
        self.expect_punct("{")?;
        if !self.eat_punct("}") {
            loop {
                v.push(self.const_value()?);
                if self.eat_punct("}") {
                    break;
                }
                self.expect_punct(",")?;
            }
        }
        if v.len() > size as usize {
            return Err(Diagnostic::Size {
                line,
                col,
                name: name.to_string(),
                size: v.len() as i64,
            });
        }
        Ok(v)
    }

    fn program(&mut self) -> PResult<Ast> {
        let mut ast = Ast {
            consts: Vec::new(),
            globals: Vec::new(),
            functions: Vec::new(),
        };
        // Function names are visible before their definitions.
        for (k, t) in self.toks.iter().enumerate() {
            if t.tok == Tok::Ident("func".into()) {
                if let Some(Token {
                    tok: Tok::Ident(n),
                    line,
                    col,
                }) = self.toks.get(k + 1)
                {
                    if self.functions.contains_key(n) {
                        return self.name_error(n, *line, *col, "function defined twice");
                    }
                    let arity = count_params(&self.toks[k + 2..]);
                    self.functions.insert(n.clone(), arity);
                }
            }
        }
        loop {
            if *self.peek() == Tok::Eof {
                break;
            } else if self.is_keyword("const") {
                self.bump();
                let (name, line, col) = self.ident()?;
                self.check_fresh(&name, line, col)?;
                self.expect_punct("=")?;
                let value = self.const_value()?;
                self.expect_punct(";")?;
                self.consts.insert(name.clone(), value);
                ast.consts.push(ConstDecl { name, value });
            } else if self.is_keyword("int") {
                self.bump();
                let (name, line, col) = self.ident()?;
                self.check_fresh(&name, line, col)?;
                if self.eat_punct("[") {
                    let size = self.array_size(&name)?;
                    self.expect_punct("]")?;
                    let init = self.init_list(&name, size)?;
                    self.expect_punct(";")?;
                    self.globals.insert(name.clone(), Sym::Array);
                    ast.globals.push(GlobalDecl::Array { name, size, init });
                } else {
                    let init = if self.eat_punct("=") { self.const_value()? } else { 0 };
                    self.expect_punct(";")?;
                    self.globals.insert(name.clone(), Sym::Scalar);
                    ast.globals.push(GlobalDecl::Scalar { name, init });
                }
            } else if self.is_keyword("func") {
                let f = self.function()?;
                ast.functions.push(f);
            } else {
                return self.syntax("`const`, `int` or `func`");
            }
        }
        for (name, argc, line, col) in std::mem::take(&mut self.pending_calls) {
            let expected = self.functions[&name];
            if expected != argc {
                return Err(Diagnostic::Arity {
                    line,
                    col,
                    function: name,
                    expected,
                    found: argc,
                });
            }
        }
        match ast.functions.iter().find(|f| f.name == "main") {
            None => {
                let (line, col) = self.here();
                self.name_error("main", line, col, "no `main` function")
            }
            Some(m) if !m.params.is_empty() => {
                let (line, col) = self.here();
                Err(Diagnostic::Arity {
                    line,
                    col,
                    function: "main".into(),
                    expected: 0,
                    found: m.params.len(),
                })
            }
            Some(_) => Ok(ast),
        }
    }

    fn function(&mut self) -> PResult<FuncDef> {
        self.expect_keyword("func")?;
        let (name, line, col) = self.ident()?;
        if Intrinsic::from_name(&name).is_some() || self.globals.contains_key(&name) || self.consts.contains_key(&name)
        {
            return self.name_error(&name, line, col, "already declared");
        }
        self.fn_names.clear();
        self.scopes = vec![HashMap::new()];
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if !self.eat_punct(")") {
            loop {
                let (p, line, col) = self.ident()?;
                if p == name {
                    return self.name_error(&p, line, col, "already declared");
                }
                self.declare_local(&p, Sym::Scalar, line, col)?;
                params.push(p);
                if self.eat_punct(")") {
                    break;
                }
                self.expect_punct(",")?;
            }
        }
        let body = self.block()?;
        self.scopes.clear();
        Ok(FuncDef { name, params, body })
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect_punct("{")?;
        self.scopes.push(HashMap::new());
        let mut body = Vec::new();
        while !self.eat_punct("}") {
            if *self.peek() == Tok::Eof {
                return self.syntax("`}`");
            }
            body.push(self.stmt()?);
        }
        self.scopes.pop();
        Ok(body)
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        if self.is_keyword("if") {
            return self.if_stmt();
        }
        if self.is_keyword("while") {
            self.bump();
            self.expect_punct("(")?;
            let cond = self.expr()?;
            self.expect_punct(")")?;
            self.loop_depth += 1;
            let body = self.block()?;
            self.loop_depth -= 1;
            return Ok(Stmt::While { cond, body });
        }
        if self.is_keyword("for") {
            self.bump();
            self.expect_punct("(")?;
            // The header's declarations are scoped to the loop.
            self.scopes.push(HashMap::new());
            let init = if self.is_punct(";") {
                None
            } else {
                Some(Box::new(self.simple()?))
            };
            self.expect_punct(";")?;
            let cond = if self.is_punct(";") { None } else { Some(self.expr()?) };
            self.expect_punct(";")?;
            let step = if self.is_punct(")") {
                None
            } else {
                Some(Box::new(self.simple()?))
            };
            self.expect_punct(")")?;
            self.loop_depth += 1;
            let body = self.block()?;
            self.loop_depth -= 1;
            self.scopes.pop();
            return Ok(Stmt::For { init, cond, step, body });
        }
        let s = if self.is_keyword("break") || self.is_keyword("continue") {
            let t = self.bump();
            if self.loop_depth == 0 {
                return self.syntax_at(&t, "statement inside a loop");
            }
            if t.tok == Tok::Ident("break".into()) {
                Stmt::Break
            } else {
                Stmt::Continue
            }
        } else if self.is_keyword("return") {
            self.bump();
            if self.is_punct(";") {
                Stmt::Return(None)
            } else {
                Stmt::Return(Some(self.expr()?))
            }
        } else {
            self.simple()?
        };
        self.expect_punct(";")?;
        Ok(s)
    }

    fn syntax_at<T>(&self, t: &Token, expected: &str) -> PResult<T> {
        Err(Diagnostic::Syntax {
            line: t.line,
            col: t.col,
            expected: expected.to_string(),
            found: t.tok.to_string(),
        })
    }

    fn if_stmt(&mut self) -> PResult<Stmt> {
        self.expect_keyword("if")?;
        self.expect_punct("(")?;
        let cond = self.expr()?;
        self.expect_punct(")")?;
        let then_body = self.block()?;
        let else_body = if self.is_keyword("else") {
            self.bump();
            if self.is_keyword("if") {
                Some(vec![self.if_stmt()?])
            } else {
                Some(self.block()?)
            }
        } else {
            None
        };
        Ok(Stmt::If {
            cond,
            then_body,
            else_body,
        })
    }

    /// Declarations, assignments, `++`/`--` and calls.
    fn simple(&mut self) -> PResult<Stmt> {
        if self.is_keyword("int") {
            self.bump();
            let (name, line, col) = self.ident()?;
            if self.eat_punct("[") {
                let size = self.array_size(&name)?;
                self.expect_punct("]")?;
                let init = self.init_list(&name, size)?;
                self.declare_local(&name, Sym::Array, line, col)?;
                return Ok(Stmt::LocalArray { name, size, init });
            }
            let init = if self.eat_punct("=") { Some(self.expr()?) } else { None };
            self.declare_local(&name, Sym::Scalar, line, col)?;
            return Ok(Stmt::Local { name, init });
        }
        if matches!(self.peek_at(1), Tok::Punct("(")) {
            let (name, line, col) = self.ident()?;
            return Ok(Stmt::Call(self.call(name, line, col, false)?));
        }
        let (name, line, col) = self.ident()?;
        let sym = self.lookup(&name);
        if self.eat_punct("[") {
            match sym {
                Some(Sym::Array | Sym::Scalar) => {}
                Some(Sym::Const(_)) => return self.type_error(line, col, format!("cannot index constant `{name}`")),
                None => return self.name_error(&name, line, col, "undeclared"),
            }
            let index = self.expr()?;
            self.expect_punct("]")?;
            self.expect_punct("=")?;
            let value = self.expr()?;
            return Ok(Stmt::Assign {
                target: LValue::Index {
                    array: name,
                    index: Box::new(index),
                },
                op: AssignOp::Set,
                value,
            });
        }
        match sym {
            Some(Sym::Scalar) => {}
            Some(Sym::Array) => return self.type_error(line, col, format!("cannot assign to array `{name}`")),
            Some(Sym::Const(_)) => return self.type_error(line, col, format!("cannot assign to constant `{name}`")),
            None => return self.name_error(&name, line, col, "undeclared"),
        }
        let target = LValue::Var(name);
        let (op, value) = match self.peek().clone() {
            Tok::Punct("=") => {
                self.bump();
                (AssignOp::Set, self.expr()?)
            }
            Tok::Punct("+=") => {
                self.bump();
                (AssignOp::Add, self.expr()?)
            }
            Tok::Punct("-=") => {
                self.bump();
                (AssignOp::Sub, self.expr()?)
            }
            Tok::Punct("++") => {
                self.bump();
                (AssignOp::Add, Expr::Int(1))
            }
            Tok::Punct("--") => {
                self.bump();
                (AssignOp::Sub, Expr::Int(1))
            }
            _ => return self.syntax("assignment operator"),
        };
        Ok(Stmt::Assign { target, op, value })
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.binary(1)
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        match self.peek() {
            Tok::Punct(p) => BinaryOp::ALL.into_iter().find(|op| op.symbol() == *p),
            _ => None,
        }
    }

    fn binary(&mut self, min_prec: u8) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op().filter(|op| op.precedence() >= min_prec) {
            self.bump();
            let rhs = self.binary(op.precedence() + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat_punct("-") {
            let e = self.unary()?;
            return Ok(Expr::Unary {
                op: UnOp::Neg,
                expr: Box::new(e),
            });
        }
        if self.eat_punct("!") {
            let e = self.unary()?;
            return Ok(Expr::Unary {
                op: UnOp::Not,
                expr: Box::new(e),
            });
        }
        self.primary(true)
    }

    fn primary(&mut self, value_needed: bool) -> PResult<Expr> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int(v))
            }
            Tok::Punct("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(_) => {
                let (name, line, col) = self.ident()?;
                if self.is_punct("(") {
                    return self.call(name, line, col, value_needed);
                }
                let sym = self.lookup(&name);
                if self.eat_punct("[") {
                    match sym {
                        Some(Sym::Array | Sym::Scalar) => {}
                        Some(Sym::Const(_)) => {
                            return self.type_error(line, col, format!("cannot index constant `{name}`"))
                        }
                        None => return self.name_error(&name, line, col, "undeclared"),
                    }
                    let index = self.expr()?;
                    self.expect_punct("]")?;
                    return Ok(Expr::index(&name, index));
                }
                match sym {
                    Some(Sym::Scalar) => Ok(Expr::Var(name)),
                    Some(Sym::Const(value)) => Ok(Expr::Const { name, value }),
                    Some(Sym::Array) => self.type_error(line, col, format!("array `{name}` used as a value")),
                    None if self.functions.contains_key(&name) => {
                        self.type_error(line, col, format!("function `{name}` used as a value"))
                    }
                    None => self.name_error(&name, line, col, "undeclared"),
                }
            }
            _ => self.syntax("expression"),
        }
    }

    fn call(&mut self, name: String, line: usize, col: usize, value_needed: bool) -> PResult<Expr> {
        self.expect_punct("(")?;
        let mut args = Vec::new();
        if !self.eat_punct(")") {
            loop {
                args.push(self.expr()?);
                if self.eat_punct(")") {
                    break;
                }
                self.expect_punct(",")?;
            }
        }
        match Intrinsic::from_name(&name) {
            Some(Intrinsic::LoopExit) => self.name_error(&name, line, col, "reserved for instrumentation"),
            Some(i) => {
                if i.arity() != args.len() {
                    return Err(Diagnostic::Arity {
                        line,
                        col,
                        function: name,
                        expected: i.arity(),
                        found: args.len(),
                    });
                }
                let returns = matches!(i, Intrinsic::ReadInput | Intrinsic::Alloc);
                if value_needed && !returns {
                    return self.type_error(line, col, format!("`{name}` does not return a value"));
                }
                Ok(Expr::call(&name, args))
            }
            None if self.functions.contains_key(&name) => {
                self.pending_calls.push((name.clone(), args.len(), line, col));
                Ok(Expr::call(&name, args))
            }
            None => self.name_error(&name, line, col, "undeclared function"),
        }
    }
}

/// Parameter count of a function header starting at `(`.
fn count_params(toks: &[Token]) -> usize {
    let mut n = 0;
    for t in toks.iter().skip(1) {
        match &t.tok {
            Tok::Punct(")") => break,
            Tok::Ident(_) => n += 1,
            _ => {}
        }
    }
    n
}

pub fn parse_source(src: &str) -> Result<Ast, Vec<Diagnostic>> {
    let toks = lex(src).map_err(|d| vec![d])?;
    let mut p = Parser {
        toks,
        pos: 0,
        consts: HashMap::new(),
        globals: HashMap::new(),
        functions: HashMap::new(),
        pending_calls: Vec::new(),
        scopes: Vec::new(),
        fn_names: HashSet::new(),
        loop_depth: 0,
    };
    p.program().map_err(|d| vec![d])
}
