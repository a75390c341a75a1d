//! Source language front end: lexing, parsing with name resolution, and
//! lowering to the register IR. The grammar is described in `docs/lang.md`.

pub mod ast;
mod lexer;
mod lower;
mod parser;

use std::fmt;
use std::path::Path;

use serde::Serialize;

pub use ast::Ast;
pub use lower::lower;

use crate::ir::Program;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Diagnostic {
    Syntax {
        line: usize,
        col: usize,
        expected: String,
        found: String,
    },
    Name {
        line: usize,
        col: usize,
        identifier: String,
        message: String,
    },
    /// Non-positive array size, or an initializer longer than its array.
    Size {
        line: usize,
        col: usize,
        name: String,
        size: i64,
    },
    Type {
        line: usize,
        col: usize,
        message: String,
    },
    Arity {
        line: usize,
        col: usize,
        function: String,
        expected: usize,
        found: usize,
    },
}

impl Diagnostic {
    pub fn position(&self) -> (usize, usize) {
        match self {
            Diagnostic::Syntax { line, col, .. }
            | Diagnostic::Name { line, col, .. }
            | Diagnostic::Size { line, col, .. }
            | Diagnostic::Type { line, col, .. }
            | Diagnostic::Arity { line, col, .. } => (*line, *col),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (line, col) = self.position();
        write!(f, "{line}:{col}: ")?;
        match self {
            Diagnostic::Syntax { expected, found, .. } => write!(f, "syntax error: expected {expected}, found {found}"),
            Diagnostic::Name {
                identifier, message, ..
            } => write!(f, "name error: `{identifier}`: {message}"),
            Diagnostic::Size { name, size, .. } => write!(f, "size error: `{name}` has size {size}"),
            Diagnostic::Type { message, .. } => write!(f, "type error: {message}"),
            Diagnostic::Arity {
                function,
                expected,
                found,
                ..
            } => write!(f, "arity error: `{function}` takes {expected} argument(s), got {found}"),
        }
    }
}

/// A source file and the functions it declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceUnit {
    pub path: String,
    pub text: String,
    pub declared_functions: Vec<String>,
}

impl SourceUnit {
    pub fn new(path: impl Into<String>, text: impl Into<String>) -> Self {
        SourceUnit {
            path: path.into(),
            text: text.into(),
            declared_functions: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(SourceUnit::new(path.display().to_string(), text))
    }
}

/// Parse `unit`, recording its function names on success. On failure the
/// list holds the first diagnostic encountered.
pub fn parse(unit: &mut SourceUnit) -> Result<Ast, Vec<Diagnostic>> {
    let ast = parse_source(&unit.text)?;
    unit.declared_functions = ast.functions.iter().map(|f| f.name.clone()).collect();
    Ok(ast)
}

pub fn parse_source(text: &str) -> Result<Ast, Vec<Diagnostic>> {
    parser::parse_source(text)
}

/// Parse and lower in one step.
pub fn compile(text: &str) -> Result<Program, Vec<Diagnostic>> {
    parse_source(text).map(|ast| lower(&ast))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first(src: &str) -> Diagnostic {
        parse_source(src).unwrap_err().remove(0)
    }

    #[test]
    fn empty_main_parses() {
        let ast = parse_source("func main() { }").unwrap();
        assert_eq!(ast.functions.len(), 1);
        assert!(ast.functions[0].body.is_empty());
    }

    #[test]
    fn zero_size_array_is_a_size_error() {
        assert!(matches!(
            first("int a[0]; func main() {}"),
            Diagnostic::Size { size: 0, .. }
        ));
        assert!(matches!(
            first("const N = -2; int a[N]; func main() {}"),
            Diagnostic::Size { size: -2, .. }
        ));
    }

    #[test]
    fn syntax_error_carries_position_and_expectation() {
        let d = first("func main() {\n  int x = ;\n}");
        assert_eq!(
            d,
            Diagnostic::Syntax {
                line: 2,
                col: 11,
                expected: "expression".into(),
                found: "`;`".into()
            }
        );
    }

    #[test]
    fn name_errors() {
        assert!(matches!(first("func main() { x = 1; }"), Diagnostic::Name { identifier, .. } if identifier == "x"));
        assert!(matches!(
            first("func main() { int x; int x; }"),
            Diagnostic::Name { identifier, .. } if identifier == "x"
        ));
        assert!(matches!(first("func f() {}"), Diagnostic::Name { identifier, .. } if identifier == "main"));
        assert!(matches!(first("func main() { g(); }"), Diagnostic::Name { .. }));
    }

    #[test]
    fn type_and_arity_errors() {
        assert!(matches!(
            first("int a[2]; func main() { int x = a; }"),
            Diagnostic::Type { .. }
        ));
        assert!(matches!(
            first("func main() { int x = output(0, 1); }"),
            Diagnostic::Type { .. }
        ));
        assert!(matches!(
            first("func f(a) { } func main() { f(); }"),
            Diagnostic::Arity {
                expected: 1,
                found: 0,
                ..
            }
        ));
        assert!(matches!(
            first("func main() { read_input(); }"),
            Diagnostic::Arity { .. }
        ));
    }

    #[test]
    fn declared_functions_are_recorded() {
        let mut unit = SourceUnit::new("t.mpc", "func helper() {} func main() { helper(); }");
        parse(&mut unit).unwrap();
        assert_eq!(unit.declared_functions, vec!["helper", "main"]);
    }
}
