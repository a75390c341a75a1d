//! End-to-end experiment runner: scenario files in, report rows and
//! expectation mismatches out.

pub mod fuzz;
pub mod published;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::cps::{self, DowntimeModel, Policy, Resiliency, ScanRecord};
use crate::frontend::compile;
use crate::instrument::{instrument, InstrumentationConfig, Mode, TransformReport};
use crate::ir::{Base, InstrKind, Program};
use crate::shadow::FaultKind;
use crate::vm::{run, ExecConfig, ExecTrace, Status, StepKind};

pub use scenario::{Expected, PlantFile, ResiliencyCase, ScanSection, Scenario};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: invalid scenario: {message}")]
    Scenario { path: String, message: String },
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("bad pattern `{0}`")]
    Pattern(String),
    #[error("no scenarios match `{0}`")]
    NoScenarios(String),
}

fn stage(stage: &'static str) -> impl Fn(String) -> HarnessError {
    move |message| HarnessError::Stage { stage, message }
}

/// One `(scenario, mode)` result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: String,
    pub mode: String,
    pub mso_us: Option<f64>,
    pub mso_pct: Option<f64>,
    pub tolerable_avg: Option<bool>,
    pub tolerable_worst: Option<bool>,
    pub downtime_us: f64,
    pub resilient: Option<bool>,
    pub status: String,
    pub skips: usize,
    pub instructions: usize,
    pub checks: usize,
    pub total_cost: u64,
}

pub const CSV_HEADER: &str = "scenario,mode,mso_us,mso_pct,tolerable_avg,tolerable_worst,downtime_us,resilient";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.2},{}",
            self.scenario,
            self.mode,
            opt(self.mso_us.map(|v| format!("{v:.2}"))),
            opt(self.mso_pct.map(|v| format!("{v:.2}"))),
            opt(self.tolerable_avg),
            opt(self.tolerable_worst),
            self.downtime_us,
            opt(self.resilient),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOutcome {
    pub rows: Vec<ReportRow>,
    pub mismatches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    /// Replaces each scenario's own mode list.
    pub modes: Option<Vec<Mode>>,
    /// Applied to skip-mode runs of scenarios that set no budget of their
    /// own; expectations then reduce to the per-loop skip bound.
    pub loop_exit_budget: Option<u32>,
    /// Extra randomized input tapes per scenario, checked differentially.
    pub fuzz: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            modes: None,
            loop_exit_budget: None,
            fuzz: 0,
            seed: fuzz::seed_from_env(),
        }
    }
}

/// A built and executed program under one mode.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: Mode,
    pub program: Program,
    pub report: TransformReport,
    pub trace: ExecTrace,
}

pub fn build(
    base: &Program,
    mode: Mode,
    loop_exit_budget: Option<u32>,
) -> Result<(Program, TransformReport), HarnessError> {
    let cfg = InstrumentationConfig {
        mode,
        loop_exit_budget: if mode == Mode::Cima { loop_exit_budget } else { None },
    };
    instrument(base, &cfg).map_err(|e| stage("instrument")(e.to_string()))
}

pub fn execute(
    base: &Program,
    mode: Mode,
    budget: Option<u32>,
    tape: &[i64],
    max_steps: u64,
) -> Result<ModeRun, HarnessError> {
    let (program, report) = build(base, mode, budget)?;
    let cfg = ExecConfig {
        input_tape: tape.to_vec(),
        max_steps,
        ..ExecConfig::with_mode(mode)
    };
    let trace = run(&program, &cfg).map_err(|e| stage("vm")(e.to_string()))?;
    Ok(ModeRun {
        mode,
        program,
        report,
        trace,
    })
}

/// Source-level instructions of `p`.
pub fn instruction_total(p: &Program) -> usize {
    p.functions
        .iter()
        .map(|f| f.instrs().filter(|i| !i.synthetic).count())
        .sum()
}

/// Fault kinds seen by a run: skipped, unchecked, or the one that aborted it.
pub fn fault_kinds(t: &ExecTrace) -> BTreeSet<FaultKind> {
    let mut out: BTreeSet<FaultKind> = t.skipped.iter().map(|s| s.fault).collect();
    out.extend(t.unchecked_faults.iter().map(|f| f.fault));
    if let Status::Aborted { fault, .. } = t.status {
        out.insert(fault);
    }
    out
}

/// Most skips taken during a single entry into each loop with an exit
/// counter.
pub fn skips_per_loop(run: &ModeRun) -> BTreeMap<u32, u64> {
    let t = &run.trace;
    let mut out = BTreeMap::new();
    let mut current: HashMap<u32, u64> = HashMap::new();
    let mut resets = HashMap::new();
    let mut guarded = HashMap::new();
    for l in &run.report.loop_exits {
        let Some(f) = t.functions.iter().position(|n| *n == l.func) else {
            continue;
        };
        out.insert(l.loop_id, 0);
        for r in &l.resets {
            resets.insert((f as u32, *r), l.loop_id);
        }
        for g in &l.guarded {
            guarded.insert((f as u32, *g), l.loop_id);
        }
    }
    for s in &t.steps {
        let key = (s.func, s.instr);
        if s.kind == StepKind::Exec {
            if let Some(id) = resets.get(&key) {
                current.insert(*id, 0);
            }
        } else if s.kind == StepKind::Skip {
            if let Some(id) = guarded.get(&key) {
                let c = current.entry(*id).or_insert(0);
                *c += 1;
                let best = out.entry(*id).or_insert(0);
                *best = (*best).max(*c);
            }
        }
    }
    out
}

fn abort_array(run: &ModeRun) -> Option<String> {
    let Status::Aborted { func, at, .. } = &run.trace.status else {
        return None;
    };
    let f = run.program.function(func)?;
    let i = f.instr(*at).ok()?;
    let base = match &i.kind {
        InstrKind::MemRead { base, .. } | InstrKind::MemWrite { base, .. } => base,
        _ => return None,
    };
    Some(match base {
        Base::Global(n) | Base::Local(n) => n.clone(),
        Base::Ptr(r) => f.reg_name(*r, &run.program).to_string(),
    })
}

/// Scan times of completed cycles. A run that never marks a cycle counts
/// as one cycle only if it finished normally.
fn cycle_samples(t: &ExecTrace, scale: f64) -> Vec<f64> {
    if t.cycle_ends.is_empty() && hung(&t.status) {
        return Vec::new();
    }
    t.cycle_costs().iter().map(|c| *c as f64 * scale).collect()
}

fn hung(status: &Status) -> bool {
    matches!(
        status,
        Status::Aborted { .. } | Status::StepBudgetExhausted | Status::Trapped { .. }
    )
}

struct Plant {
    model: cps::PlantModel,
    u: DVector<f64>,
}

fn load_plant(s: &Scenario, rel: &str) -> Result<Plant, HarnessError> {
    let (model, u) = PlantFile::load(&s.resolve(rel))?.model()?;
    Ok(Plant { model, u })
}

fn row_for(
    s: &Scenario,
    scan: &ScanSection,
    plant: Option<&Plant>,
    r: &ModeRun,
    baseline: &ExecTrace,
) -> Result<ReportRow, HarnessError> {
    let cfg = scan.cycle()?;
    let hardened = cycle_samples(&r.trace, cfg.cost_to_time_scale);
    let base = cycle_samples(baseline, cfg.cost_to_time_scale);
    let n = hardened.len().min(base.len());
    let rec = if n == 0 {
        None
    } else {
        Some(ScanRecord::new(base[..n].to_vec(), hardened[..n].to_vec()).map_err(|e| stage("scan")(e.to_string()))?)
    };
    let dtm = DowntimeModel {
        restart_us: scan.restart_us,
    };
    let worst = hardened.iter().copied().fold(0.0, f64::max);
    let downtime = if hung(&r.trace.status) {
        cps::downtime(Policy::AbortRestart, worst, &cfg, &dtm)
    } else {
        cps::downtime(Policy::Continue, worst, &cfg, &dtm)
    };
    let resilient = match plant {
        None => None,
        Some(p) => {
            let verdict = if r.mode == Mode::Cima && !hung(&r.trace.status) {
                let delta = cps::skip_delay_us(r.trace.skip_cost(), &cfg);
                cps::check_skip_delay(&p.model, &p.model.x0, &p.u, downtime + delta, &cfg)
            } else {
                cps::check_resiliency(&p.model, &p.model.x0, &p.u, downtime, &cfg)
            };
            Some(verdict.map_err(|e| stage("plant")(e.to_string()))?.is_resilient())
        }
    };
    Ok(ReportRow {
        scenario: s.id.clone(),
        mode: r.mode.to_string(),
        mso_us: rec.as_ref().map(|r| cps::mso(r).0),
        mso_pct: rec.as_ref().map(|r| cps::mso(r).1),
        tolerable_avg: rec.as_ref().map(|r| cps::tolerable_avg(r, &cfg)),
        tolerable_worst: rec.as_ref().map(|r| cps::tolerable_worst(r, &cfg)),
        downtime_us: downtime,
        resilient,
        status: r.trace.status.name().to_string(),
        skips: r.trace.skipped.len(),
        instructions: r.trace.instruction_count(),
        checks: r.trace.check_count(),
        total_cost: r.trace.total_cost,
    })
}

fn miss(out: &mut Vec<String>, tag: &str, what: &str, want: String, got: String) {
    if want != got {
        out.push(format!("{tag}: {what} expected {want}, got {got}"));
    }
}

fn compare(
    tag: &str,
    e: &Expected,
    run: &ModeRun,
    runs: &BTreeMap<Mode, ModeRun>,
    row: &ReportRow,
    out: &mut Vec<String>,
) {
    let t = &run.trace;
    if let Some(s) = &e.status {
        miss(out, tag, "status", s.clone(), t.status.name().to_string());
    }
    if let Some(n) = e.skips {
        miss(out, tag, "skips", n.to_string(), t.skipped.len().to_string());
    }
    if let Some([lo, hi]) = e.skipped_indices {
        let got: Vec<i64> = t.skipped.iter().map(|s| s.index).collect();
        let want: Vec<i64> = (lo..=hi).collect();
        if got != want {
            out.push(format!(
                "{tag}: skipped indices expected {lo}..={hi}, got {} entries starting {:?}",
                got.len(),
                got.first()
            ));
        }
    }
    let aborted = match &t.status {
        Status::Aborted { index, fault, .. } => Some((*index, *fault)),
        _ => None,
    };
    if let Some(i) = e.abort_index {
        miss(
            out,
            tag,
            "abort index",
            format!("{:?}", Some(i)),
            format!("{:?}", aborted.map(|a| a.0)),
        );
    }
    if let Some(f) = e.abort_fault {
        miss(
            out,
            tag,
            "abort fault",
            format!("{:?}", Some(f)),
            format!("{:?}", aborted.map(|a| a.1)),
        );
    }
    if let Some(a) = &e.abort_array {
        miss(
            out,
            tag,
            "abort array",
            format!("{:?}", Some(a)),
            format!("{:?}", abort_array(run)),
        );
    }
    if let Some(o) = &e.outputs {
        let want: Vec<(i64, i64)> = o.iter().map(|[c, v]| (*c, *v)).collect();
        miss(out, tag, "outputs", format!("{want:?}"), format!("{:?}", t.outputs));
    }
    if let Some(m) = e.outputs_equal_to {
        match runs.get(&m) {
            Some(other) => miss(
                out,
                tag,
                &format!("outputs equal to {m}"),
                format!("{:?}", other.trace.outputs),
                format!("{:?}", t.outputs),
            ),
            None => out.push(format!("{tag}: no {m} run to compare outputs with")),
        }
    }
    if let Some(n) = e.leaks {
        miss(out, tag, "leaks", n.to_string(), t.leaks.len().to_string());
    }
    if let Some(k) = &e.fault_kinds {
        let want: BTreeSet<FaultKind> = k.iter().copied().collect();
        miss(
            out,
            tag,
            "fault kinds",
            format!("{want:?}"),
            format!("{:?}", fault_kinds(t)),
        );
    }
    if let Some(r) = e.resilient {
        miss(
            out,
            tag,
            "resilient",
            format!("{:?}", Some(r)),
            format!("{:?}", row.resilient),
        );
    }
    if let Some(n) = e.instructions {
        miss(
            out,
            tag,
            "instructions",
            n.to_string(),
            instruction_total(&run.program).to_string(),
        );
    }
    if let Some(b) = e.max_skips_per_loop {
        check_loop_bound(tag, b, run, out);
    }
}

fn check_loop_bound(tag: &str, budget: u64, run: &ModeRun, out: &mut Vec<String>) {
    for (id, n) in skips_per_loop(run) {
        if n > budget {
            out.push(format!("{tag}: loop {id} took {n} skips in one entry, budget {budget}"));
        }
    }
}

fn run_source(s: &Scenario, src: &str, opts: &SuiteOptions) -> Result<ScenarioOutcome, HarnessError> {
    let path = s.resolve(src);
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = compile(&text).map_err(|d| {
        stage("frontend")(
            d.iter()
                .map(|d| format!("{}: {d}", path.display()))
                .collect::<Vec<_>>()
                .join("; "),
        )
    })?;
    let max_steps = s.max_steps.unwrap_or(ExecConfig::default().max_steps);
    let modes = opts.modes.clone().unwrap_or_else(|| s.modes.clone());
    let forced_budget = s.loop_exit_budget.is_none() && opts.loop_exit_budget.is_some();
    let budget = s.loop_exit_budget.or(opts.loop_exit_budget);

    let mut runs = BTreeMap::new();
    let mut needed: BTreeSet<Mode> = modes.iter().copied().collect();
    needed.insert(Mode::None);
    for m in modes
        .iter()
        .filter_map(|m| s.expected.get(m))
        .filter_map(|e| e.outputs_equal_to)
    {
        needed.insert(m);
    }
    for m in needed {
        runs.insert(m, execute(&base, m, budget, &s.input_tape, max_steps)?);
    }

    let default_scan = ScanSection::default();
    let scan = s.scan.as_ref().unwrap_or(&default_scan);
    let plant = scan.plant_file.as_deref().map(|f| load_plant(s, f)).transpose()?;
    let mut out = ScenarioOutcome::default();
    for m in &modes {
        let r = &runs[m];
        let row = row_for(s, scan, plant.as_ref(), r, &runs[&Mode::None].trace)?;
        let tag = format!("{}/{}", s.id, m);
        if forced_budget && *m == Mode::Cima {
            check_loop_bound(&tag, budget.unwrap_or(0) as u64, r, &mut out.mismatches);
        } else if let Some(e) = s.expected.get(m) {
            compare(&tag, e, r, &runs, &row, &mut out.mismatches);
        }
        out.rows.push(row);
    }

    let mut rng = fuzz::rng(opts.seed ^ fuzz::hash_str(&s.id));
    for k in 0..opts.fuzz {
        let tape = fuzz::random_tape(&mut rng, s.input_tape.len().max(8), -40, 2100);
        if let Err(e) = fuzz::differential(&base, &tape, max_steps) {
            out.mismatches.push(format!("{}/fuzz#{k}: {e} (tape {tape:?})", s.id));
        }
    }
    Ok(out)
}

fn run_cases(s: &Scenario) -> Result<ScenarioOutcome, HarnessError> {
    let default_scan = ScanSection::default();
    let scan = s.scan.as_ref().unwrap_or(&default_scan);
    let cfg = scan.cycle()?;
    let mut out = ScenarioOutcome::default();
    for c in &s.resiliency_case {
        let mut p = load_plant(s, &c.plant_file)?;
        p.model.fail_safe = c.fail_safe.clone().map(DVector::from_vec);
        p.model.validate().map_err(|e| stage("plant")(e.to_string()))?;
        let x = p.model.x0.clone();
        let (stall, verdict) = match (c.tau_us, c.delta_us) {
            (Some(t), None) => (t, cps::check_resiliency(&p.model, &x, &p.u, t, &cfg)),
            (None, Some(d)) => (d, cps::check_skip_delay(&p.model, &x, &p.u, d, &cfg)),
            _ => {
                return Err(HarnessError::Scenario {
                    path: s.id.clone(),
                    message: format!("case {} needs exactly one of tau_us and delta_us", c.name),
                })
            }
        };
        let verdict = verdict.map_err(|e| stage("plant")(e.to_string()))?;
        let tag = format!("{}/{}", s.id, c.name);
        if let Some(want) = c.resilient {
            if want != verdict.is_resilient() {
                out.mismatches
                    .push(format!("{tag}: resilient expected {want}, got {verdict:?}"));
            }
        }
        if let Some(step) = c.violated_at {
            let ok = match verdict {
                Resiliency::Violated { step: s, component, .. } => {
                    s == step && c.component.is_none_or(|k| k == component)
                }
                Resiliency::Resilient => false,
            };
            if !ok {
                out.mismatches
                    .push(format!("{tag}: expected violation at step {step}, got {verdict:?}"));
            }
        }
        out.rows.push(ReportRow {
            scenario: tag,
            mode: "plant".into(),
            mso_us: None,
            mso_pct: None,
            tolerable_avg: None,
            tolerable_worst: None,
            downtime_us: stall,
            resilient: Some(verdict.is_resilient()),
            status: match verdict {
                Resiliency::Resilient => "resilient".into(),
                Resiliency::Violated { step, component, .. } => format!("violated@{step}[{component}]"),
            },
            skips: 0,
            instructions: 0,
            checks: 0,
            total_cost: 0,
        });
    }
    Ok(out)
}

/// Build, run and evaluate every requested mode of `s`, plus its plant
/// cases.
pub fn run_scenario(s: &Scenario, opts: &SuiteOptions) -> Result<ScenarioOutcome, HarnessError> {
    let mut out = match &s.source {
        Some(src) => run_source(s, src, opts)?,
        None => ScenarioOutcome::default(),
    };
    let cases = run_cases(s)?;
    out.rows.extend(cases.rows);
    out.mismatches.extend(cases.mismatches);
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<String>,
    pub scenarios: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(
                out,
                "{:<32} {:<6} {:<22} skips={:<5} instrs={:<7} checks={:<6} cost={}",
                r.scenario, r.mode, r.status, r.skips, r.instructions, r.checks, r.total_cost
            )
            .unwrap();
        }
        for f in &self.failures {
            writeln!(out, "MISMATCH {f}").unwrap();
        }
        writeln!(
            out,
            "{} scenarios, {} rows, {} mismatches",
            self.scenarios,
            self.rows.len(),
            self.failures.len()
        )
        .unwrap();
        out
    }
}

/// Run every scenario file matching `pattern`, in path order.
pub fn run_suite(pattern: &str, opts: &SuiteOptions) -> Result<SuiteReport, HarnessError> {
    let paths: Vec<_> = glob::glob(pattern)
        .map_err(|e| HarnessError::Pattern(e.to_string()))?
        .filter_map(Result::ok)
        .collect();
    if paths.is_empty() {
        return Err(HarnessError::NoScenarios(pattern.to_string()));
    }
    let mut report = SuiteReport::default();
    let mut ids = BTreeSet::new();
    for path in paths {
        let s = Scenario::load(&path)?;
        if !ids.insert(s.id.clone()) {
            report
                .failures
                .push(format!("{}: duplicate scenario id {}", path.display(), s.id));
        }
        let o = run_scenario(&s, opts)?;
        report.rows.extend(o.rows);
        report.failures.extend(o.mismatches);
        report.scenarios += 1;
    }
    Ok(report)
}

pub fn run_scenario_file(path: &Path, opts: &SuiteOptions) -> Result<ScenarioOutcome, HarnessError> {
    run_scenario(&Scenario::load(path)?, opts)
}
