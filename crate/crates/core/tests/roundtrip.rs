use proptest::prelude::*;

use cima_core::frontend::ast::{Ast, BinaryOp, Expr, FuncDef, GlobalDecl, Stmt, UnOp};
use cima_core::frontend::{lower, parse_source};
use cima_core::harness::fuzz::{clean_program, rng, violating_variant, GenConfig};
use cima_core::instrument::{instrument, InstrumentationConfig, Mode};
use cima_core::ir::{parse_program, print_program};

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0i64..1000).prop_map(Expr::Int),
        prop_oneof![Just("a"), Just("b")].prop_map(Expr::var),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            (0..BinaryOp::ALL.len(), inner.clone(), inner.clone()).prop_map(|(op, l, r)| Expr::binary(
                BinaryOp::ALL[op],
                l,
                r
            )),
            (prop_oneof![Just(UnOp::Neg), Just(UnOp::Not)], inner.clone())
                .prop_map(|(op, e)| Expr::Unary { op, expr: Box::new(e) }),
            inner.clone().prop_map(|e| Expr::index("g", e)),
            inner.prop_map(|e| Expr::call("read_input", vec![e])),
        ]
    })
}

fn wrap(e: Expr) -> Ast {
    let local = |name: &str, v| Stmt::Local {
        name: name.into(),
        init: Some(v),
    };
    Ast {
        consts: Vec::new(),
        globals: vec![GlobalDecl::Array {
            name: "g".into(),
            size: 4,
            init: vec![1, 2],
        }],
        functions: vec![FuncDef {
            name: "main".into(),
            params: Vec::new(),
            body: vec![local("a", Expr::int(1)), local("b", Expr::int(2)), local("v", e)],
        }],
    }
}

fn roundtrip_ir(ast: &Ast) {
    let base = lower(ast);
    let configs = Mode::ALL
        .map(|mode| InstrumentationConfig {
            mode,
            loop_exit_budget: None,
        })
        .into_iter()
        .chain([InstrumentationConfig {
            mode: Mode::Cima,
            loop_exit_budget: Some(2),
        }]);
    for cfg in configs {
        let (p, _) = instrument(&base, &cfg).unwrap();
        let text = print_program(&p);
        let back = parse_program(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
        assert_eq!(back, p, "{text}");
        assert_eq!(print_program(&back), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn printed_expressions_reparse(e in expr()) {
        let ast = wrap(e);
        let text = ast.to_string();
        let back = parse_source(&text).map_err(|d| TestCaseError::fail(format!("{d:?}\n{text}")))?;
        prop_assert_eq!(back, ast);
    }

    #[test]
    fn generated_programs_reparse(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ast = clean_program(&mut r, &GenConfig::default());
        let text = ast.to_string();
        prop_assert_eq!(parse_source(&text).unwrap(), ast.clone());
        let (bad, _) = violating_variant(&mut r, &ast);
        prop_assert_eq!(parse_source(&bad.to_string()).unwrap(), bad);
    }

    #[test]
    fn instrumented_ir_reparses(seed in any::<u64>()) {
        let ast = clean_program(&mut rng(seed), &GenConfig::default());
        roundtrip_ir(&ast);
    }

    #[test]
    fn expression_ir_reparses(e in expr()) {
        roundtrip_ir(&wrap(e));
    }
}
