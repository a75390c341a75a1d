//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use cima_core::cps::{check_resiliency, PlantModel, Resiliency, ScanCycleConfig};
use cima_core::frontend::{compile, lower};
use cima_core::harness::fuzz::{
    clean_program, differential, random_tape, rng, seed_from_env, violating_variant, window_case, GenConfig,
};
use cima_core::harness::published::verify_paper_arithmetic;
use cima_core::harness::scenario::PlantFile;
use cima_core::harness::{execute, skips_per_loop};
use cima_core::instrument::{cima_transform, insert_checks, lower_loop_exit, Mode};
use cima_core::ir::{function_to_dot, parse_program, verify, InstrKind, Program};
use cima_core::shadow::FaultKind;
use cima_core::vm::{skipped_assignment_value, Status};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, Box<dyn Fn() -> Outcome>);

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn scenario_dir() -> PathBuf {
    root().join("../../scenarios")
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn compile_file(name: &str) -> Result<Program, String> {
    compile(&read(&scenario_dir().join(name))?).map_err(|d| format!("{name}: {d:?}"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn goldens() -> Outcome {
    let dir = root().join("tests/golden");
    for (input, want) in [("same_block.ir", "same_block.dot"), ("next_block.ir", "next_block.dot")] {
        let p = parse_program(&read(&dir.join(input))?).map_err(|e| e.to_string())?;
        let (out, _) = cima_transform(&p).map_err(|e| e.to_string())?;
        let got = function_to_dot(&out, out.function("main").ok_or("no main")?);
        ensure(got == read(&dir.join(want))?, || {
            format!("{input} does not transform to {want}:\n{got}")
        })?;
    }
    Ok("2 CFG pairs identical".into())
}

fn openplc() -> Outcome {
    let base = compile_file("openplc_overflow.mpc")?;
    let cima = execute(&base, Mode::Cima, None, &[], 1_000_000).map_err(|e| e.to_string())?;
    let t = &cima.trace;
    ensure(t.status == Status::Completed, || format!("cima status {:?}", t.status))?;
    ensure(t.skipped.len() == 1024, || format!("{} skips", t.skipped.len()))?;
    for (k, s) in t.skipped.iter().enumerate() {
        ensure(s.index == 1024 + k as i64, || format!("skip {k} at index {}", s.index))?;
        let f = cima.program.function(&s.func).ok_or("unknown function")?;
        let kind = &f.instr(s.instr).map_err(|e| e.to_string())?.kind;
        ensure(matches!(kind, InstrKind::MemWrite { .. }), || {
            format!("skip {k} is not a write")
        })?;
    }
    let abort = execute(&base, Mode::Abort, None, &[], 1_000_000).map_err(|e| e.to_string())?;
    match &abort.trace.status {
        Status::Aborted {
            index: 1024,
            fault: FaultKind::Overflow,
            ..
        } => {}
        other => return Err(format!("abort status {other:?}")),
    }
    let a = abort.trace.executed();
    ensure(t.executed().starts_with(&a), || {
        "abort run is not a prefix of the skip run".into()
    })?;
    Ok("1024 skips at 1024..=2047, abort at i = 1024".into())
}

fn window_oracle(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (mut cases, mut illegal) = (0, 0);
    for _ in 0..1000 {
        let case = window_case(&mut r);
        let base = lower(&case.ast);
        let run = execute(&base, Mode::Cima, None, &case.tape, 1_000_000).map_err(|e| e.to_string())?;
        ensure(run.trace.status == Status::Completed, || {
            format!("status {:?}\n{}", run.trace.status, case.ast)
        })?;
        let mut held = case.x0;
        let mut expected_outputs = Vec::new();
        for (t, &i) in case.tape.iter().enumerate() {
            if (0..case.init.len() as i64).contains(&i) {
                held = case.init[i as usize];
            } else {
                illegal += 1;
            }
            let got = skipped_assignment_value(&run.trace, "x", t).map_err(|e| e.to_string())?;
            ensure(got == held, || format!("t={t}: got {got}, want {held}\n{}", case.ast))?;
            expected_outputs.push((0, held));
        }
        ensure(run.trace.outputs == expected_outputs, || {
            format!("outputs differ\n{}", case.ast)
        })?;
        cases += 1;
    }
    Ok(format!("{cases} programs, {illegal} illegal loads, all match"))
}

fn differential_suite(seed: u64) -> Outcome {
    let mut r = rng(seed ^ 0x5eed);
    let cfg = GenConfig::default();
    let (mut clean, mut violating) = (0, 0);
    while clean < 500 {
        let ast = clean_program(&mut r, &cfg);
        let tape = random_tape(&mut r, 16, -100, 100);
        let out = differential(&lower(&ast), &tape, 1_000_000).map_err(|e| format!("{e}\n{ast}"))?;
        ensure(out.clean, || format!("generated clean program hit a violation\n{ast}"))?;
        clean += 1;
        let (bad, idx) = violating_variant(&mut r, &ast);
        let mut tape = tape;
        tape[0] = idx;
        let out = differential(&lower(&bad), &tape, 1_000_000).map_err(|e| format!("{e}\n{bad}"))?;
        if !out.clean {
            violating += 1;
        }
    }
    ensure(violating >= 250, || {
        format!("only {violating} variants reached their violation")
    })?;
    Ok(format!(
        "{clean} clean programs agree, {violating} violating variants abort on a strict prefix"
    ))
}

fn published() -> Outcome {
    let r = verify_paper_arithmetic();
    ensure(r.passed(), || r.render())?;
    Ok(r.render().lines().collect::<Vec<_>>().join("; "))
}

/// Plain per-step simulation of the held-command plant.
fn brute_force(a: &[Vec<f64>], bu: &[f64], lo: &[f64], hi: &[f64], x0: &[f64], hold: usize) -> Option<(usize, usize)> {
    let mut x = x0.to_vec();
    for step in 0..=hold {
        if let Some(i) = (0..x.len()).find(|&i| x[i] < lo[i] || x[i] > hi[i]) {
            return Some((step, i));
        }
        let mut next = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut acc = 0.0;
            for k in 0..x.len() {
                acc += a[i][k] * x[k];
            }
            next[i] = acc + bu[i];
        }
        x = next;
    }
    None
}

fn mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn resiliency(seed: u64) -> Outcome {
    let mut r = rng(seed ^ 0xc0de);
    let (mut violated, n_cases) = (0, 10_000);
    for case in 0..n_cases {
        let k = r.gen_range(1..=3);
        let m = r.gen_range(1..=2);
        let a: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..k).map(|_| r.gen_range(-1.2..1.2)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..m).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let lo: Vec<f64> = (0..k).map(|_| -r.gen_range(1.0..50.0)).collect();
        let hi: Vec<f64> = (0..k).map(|_| r.gen_range(1.0..50.0)).collect();
        let x0: Vec<f64> = (0..k).map(|i| r.gen_range(lo[i]..=hi[i])).collect();
        let u_last: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fail_safe: Option<Vec<f64>> = r
            .gen_bool(0.3)
            .then(|| (0..m).map(|_| r.gen_range(-1.0..1.0)).collect());
        let tc = [1_000.0, 10_000.0, 150_000.0][r.gen_range(0..3)];
        let hold = r.gen_range(0..=100usize);
        // τ in (hold - 1, hold] cycles, so it rounds up to exactly `hold`.
        let frac = if hold == 0 || r.gen_bool(0.3) {
            0.0
        } else {
            r.gen_range(0.05..0.95)
        };
        let tau = (hold as f64 - frac) * tc;

        let u = fail_safe.as_ref().unwrap_or(&u_last);
        let bu: Vec<f64> = (0..k).map(|i| (0..m).map(|j| b[i][j] * u[j]).sum()).collect();
        let want = brute_force(&a, &bu, &lo, &hi, &x0, hold);

        let mut model = PlantModel::new(
            mat(&a),
            mat(&b),
            DMatrix::identity(k, k),
            DVector::from_vec(lo.clone()),
            DVector::from_vec(hi.clone()),
            DVector::from_vec(x0.clone()),
        )
        .map_err(|e| e.to_string())?;
        model.fail_safe = fail_safe.map(DVector::from_vec);
        let cfg = ScanCycleConfig::new(tc, 1.0).map_err(|e| e.to_string())?;
        let got = check_resiliency(&model, &model.x0.clone(), &DVector::from_vec(u_last), tau, &cfg)
            .map_err(|e| e.to_string())?;
        let got = match got {
            Resiliency::Resilient => None,
            Resiliency::Violated { step, component, .. } => Some((step, component)),
        };
        ensure(got == want, || format!("case {case}: got {got:?}, oracle {want:?}"))?;
        violated += usize::from(want.is_some());
    }

    let plant = PlantFile::load(&scenario_dir().join("plants/tank.toml")).map_err(|e| e.to_string())?;
    let (tank, u) = plant.model().map_err(|e| e.to_string())?;
    ensure(
        tank.x0[0] == 0.9 * tank.upper[0] && tank.b[(0, 0)] * u[0] == 0.05 * tank.upper[0],
        || "tank plant is not x = 0.9ω with inflow 0.05ω per cycle".into(),
    )?;
    let cfg = ScanCycleConfig::new(10_000.0, 1.0).map_err(|e| e.to_string())?;
    let verdict = check_resiliency(&tank, &tank.x0, &u, 3.0 * cfg.cycle_time_us, &cfg).map_err(|e| e.to_string())?;
    ensure(matches!(verdict, Resiliency::Violated { step: 3, .. }), || {
        format!("tank verdict {verdict:?}")
    })?;
    Ok(format!(
        "{n_cases} instances agree ({violated} violated); tank violated at step 3"
    ))
}

const OVERFLOW_CORPUS: [(&str, &[i64]); 4] = [
    ("openplc_overflow.mpc", &[]),
    ("loop_bound_attack.mpc", &[104, 1]),
    ("loop_counter_attack.mpc", &[5, 150]),
    ("stack_overflow.mpc", &[9, -1]),
];

fn nontermination() -> Outcome {
    let base = compile_file("loop_counter_attack.mpc")?;
    let max_steps = 200_000;
    let run = execute(&base, Mode::Cima, None, &[5, 150], max_steps).map_err(|e| e.to_string())?;
    ensure(run.trace.status == Status::StepBudgetExhausted, || {
        format!("status {:?}", run.trace.status)
    })?;
    ensure(run.trace.steps.len() as u64 <= max_steps, || {
        format!("{} steps", run.trace.steps.len())
    })?;
    let mut loops = 0;
    for (file, tape) in OVERFLOW_CORPUS {
        let base = compile_file(file)?;
        let run = execute(&base, Mode::Cima, Some(1), tape, max_steps).map_err(|e| e.to_string())?;
        ensure(
            !matches!(run.trace.status, Status::StepBudgetExhausted | Status::Trapped { .. }),
            || format!("{file}: status {:?}", run.trace.status),
        )?;
        for (id, n) in skips_per_loop(&run) {
            ensure(n <= 1, || format!("{file}: loop {id} took {n} skips"))?;
            loops += 1;
        }
        if file == "openplc_overflow.mpc" {
            ensure(run.trace.skipped.len() == 1, || {
                format!("openplc took {} skips", run.trace.skipped.len())
            })?;
        }
    }
    Ok(format!(
        "loop counter attack hits the step budget; {loops} loops take at most 1 skip"
    ))
}

fn zero_overhead(seed: u64) -> Outcome {
    let mut r = rng(seed ^ 0x0123);
    let mut bases = vec![compile_file("benign_swat_logic.mpc")?];
    for _ in 0..200 {
        bases.push(lower(&clean_program(&mut r, &GenConfig::default())));
    }
    for (n, base) in bases.iter().enumerate() {
        let tape = random_tape(&mut r, 16, -100, 100);
        let abort = execute(base, Mode::Abort, None, &tape, 1_000_000).map_err(|e| e.to_string())?;
        let cima = execute(base, Mode::Cima, None, &tape, 1_000_000).map_err(|e| e.to_string())?;
        ensure(
            abort.trace.status == Status::Completed && cima.trace.skipped.is_empty(),
            || format!("program {n} is not violation-free: {:?}", abort.trace.status),
        )?;
        ensure(
            abort.trace.instruction_count() == cima.trace.instruction_count(),
            || {
                format!(
                    "program {n}: {} vs {} instructions",
                    abort.trace.instruction_count(),
                    cima.trace.instruction_count()
                )
            },
        )?;
        ensure(abort.trace.check_count() == cima.trace.check_count(), || {
            format!(
                "program {n}: {} vs {} checks",
                abort.trace.check_count(),
                cima.trace.check_count()
            )
        })?;
    }
    Ok(format!(
        "{} clean runs with equal instruction and check counts",
        bases.len()
    ))
}

fn verify_all_passes(p: &Program, what: &str) -> Result<(), String> {
    let clean = |stage: &str, q: &Program| {
        let v = verify(q);
        ensure(v.is_empty(), || format!("{what} after {stage}: {v:?}"))
    };
    clean("lowering", p)?;
    let (checked, _) = insert_checks(p).map_err(|e| format!("{what}: {e}"))?;
    clean("check insertion", &checked)?;
    let (skipping, _) = cima_transform(&checked).map_err(|e| format!("{what}: {e}"))?;
    clean("skip transformation", &skipping)?;
    let (bounded, _) = lower_loop_exit(&skipping, 1).map_err(|e| format!("{what}: {e}"))?;
    clean("loop-exit lowering", &bounded)
}

fn well_formed(seed: u64) -> Outcome {
    let mut count = 0;
    for entry in std::fs::read_dir(scenario_dir()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|e| e == "mpc") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            verify_all_passes(&compile_file(&name)?, &name)?;
            count += 1;
        }
    }
    for input in ["same_block.ir", "next_block.ir"] {
        let p = parse_program(&read(&root().join("tests/golden").join(input))?).map_err(|e| e.to_string())?;
        let (out, _) = cima_transform(&p).map_err(|e| e.to_string())?;
        ensure(verify(&p).is_empty() && verify(&out).is_empty(), || {
            format!("{input} fails verification")
        })?;
        count += 1;
    }
    let mut r = rng(seed ^ 0x9abc);
    let cfg = GenConfig::default();
    while count < 1500 {
        let ast = clean_program(&mut r, &cfg);
        verify_all_passes(&lower(&ast), &ast.to_string())?;
        let (bad, _) = violating_variant(&mut r, &ast);
        verify_all_passes(&lower(&bad), &bad.to_string())?;
        let w = window_case(&mut r);
        verify_all_passes(&lower(&w.ast), &w.ast.to_string())?;
        count += 3;
    }
    Ok(format!("{count} programs verify after every pass"))
}

fn main() -> ExitCode {
    let seed = seed_from_env();
    println!("acceptance seed {seed}");
    let criteria: Vec<Criterion> = vec![
        (
            "1 skip-transformation goldens",
            Duration::from_secs(1),
            Box::new(goldens),
        ),
        (
            "2 OpenPLC overflow reproduction",
            Duration::from_secs(1),
            Box::new(openplc),
        ),
        (
            "3 last-legal-value oracle",
            Duration::from_secs(30),
            Box::new(move || window_oracle(seed)),
        ),
        (
            "4 mode-equivalence differential",
            Duration::from_secs(60),
            Box::new(move || differential_suite(seed)),
        ),
        ("5 published overhead arithmetic", Duration::MAX, Box::new(published)),
        (
            "6 resiliency vs brute-force simulator",
            Duration::from_secs(30),
            Box::new(move || resiliency(seed)),
        ),
        (
            "7 nontermination guard",
            Duration::from_secs(5),
            Box::new(nontermination),
        ),
        (
            "8 zero overhead on clean runs",
            Duration::MAX,
            Box::new(move || zero_overhead(seed)),
        ),
        (
            "9 CFG well-formedness",
            Duration::MAX,
            Box::new(move || well_formed(seed)),
        ),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let line = match result {
            Ok(detail) if took <= limit => format!("PASS {name} ({:.2}s): {detail}", took.as_secs_f64()),
            Ok(detail) => format!(
                "FAIL {name} ({:.2}s, limit {}s): {detail}",
                took.as_secs_f64(),
                limit.as_secs()
            ),
            Err(e) => format!("FAIL {name} ({:.2}s): {e}", took.as_secs_f64()),
        };
        if line.starts_with("FAIL") {
            failed += 1;
        }
        println!("{line}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
