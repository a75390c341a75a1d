use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cima_core::frontend::compile;
use cima_core::harness::published::verify_paper_arithmetic;
use cima_core::harness::{self, run_scenario_file, run_suite, SuiteOptions};
use cima_core::instrument::{instrument, InstrumentationConfig, Mode, TransformReport};
use cima_core::ir::{parse_program, print_program, program_to_dot, Program};
use cima_core::vm::{run_with_memory, ExecConfig};

macro_rules! out {
    ($($t:tt)*) => { write!(io::stdout(), $($t)*)? };
}

macro_rules! outln {
    ($($t:tt)*) => { writeln!(io::stdout(), $($t)*)? };
}

#[derive(Parser)]
#[command(
    name = "cima-lab",
    version,
    about = "Memory-safety instrumentation lab for scan-cycle programs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct BuildArgs {
    /// Source (`.mpc`) or textual IR (`.ir`) file.
    file: PathBuf,
    #[arg(long, default_value = "none")]
    mode: Mode,
    #[arg(long)]
    loop_exit_budget: Option<u32>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile and instrument a program.
    Build {
        #[command(flatten)]
        build: BuildArgs,
        #[arg(long, conflicts_with = "emit_cfg")]
        emit_ir: bool,
        #[arg(long)]
        emit_cfg: bool,
        /// Print the transformation report as JSON.
        #[arg(long)]
        report_json: bool,
    },
    /// Build and execute a program.
    Exec {
        #[command(flatten)]
        build: BuildArgs,
        /// Comma-separated values served to `read_input`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        input: Vec<i64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Write the execution trace as JSON lines.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Print the final shadow memory state.
        #[arg(long)]
        dump_shadow: bool,
    },
    /// Run one scenario file and check its expectations.
    Run {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        #[arg(long)]
        loop_exit_budget: Option<u32>,
        #[arg(long, default_value_t = 0)]
        fuzz: usize,
    },
    /// Run every scenario matching a glob and emit the CSV report.
    Suite {
        pattern: String,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        #[arg(long)]
        loop_exit_budget: Option<u32>,
        #[arg(long, default_value_t = 0)]
        fuzz: usize,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive the published overhead figures.
    VerifyPaper,
}

fn load(path: &Path) -> Result<Program> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "ir") {
        return parse_program(&text).map_err(|e| anyhow!("{}: {e}", path.display()));
    }
    compile(&text).map_err(|ds| {
        let lines: Vec<String> = ds.iter().map(|d| format!("{}:{d}", path.display())).collect();
        anyhow!(lines.join("\n"))
    })
}

fn build(a: &BuildArgs) -> Result<(Program, TransformReport)> {
    let base = load(&a.file)?;
    let cfg = InstrumentationConfig {
        mode: a.mode,
        loop_exit_budget: a.loop_exit_budget,
    };
    instrument(&base, &cfg).map_err(|e| anyhow!("instrument: {e}"))
}

fn options(modes: Option<Vec<Mode>>, loop_exit_budget: Option<u32>, fuzz: usize) -> SuiteOptions {
    SuiteOptions {
        modes,
        loop_exit_budget,
        fuzz,
        ..SuiteOptions::default()
    }
}

fn real_main(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Build {
            build: args,
            emit_ir,
            emit_cfg,
            report_json,
        } => {
            let (p, report) = build(&args)?;
            if emit_ir {
                out!("{}", print_program(&p));
            } else if emit_cfg {
                out!("{}", program_to_dot(&p));
            }
            if report_json {
                outln!("{}", serde_json::to_string_pretty(&report)?);
            }
            if !emit_ir && !emit_cfg && !report_json {
                outln!(
                    "{}: mode={} accesses={} checks={} split={} rewired={} abort_blocks={} loop_exits={} instructions={}",
                    args.file.display(),
                    args.mode,
                    p.memory_access_count(),
                    p.check_count(),
                    report.blocks_split.len(),
                    report.edges_rewired.len(),
                    report.abort_blocks.len(),
                    report.loop_exits.len(),
                    harness::instruction_total(&p),
                );
            }
            Ok(0)
        }
        Cmd::Exec {
            build: args,
            input,
            max_steps,
            trace_out,
            dump_shadow,
        } => {
            let (p, _) = build(&args)?;
            let mut cfg = ExecConfig {
                input_tape: input,
                ..ExecConfig::with_mode(args.mode)
            };
            if let Some(n) = max_steps {
                cfg.max_steps = n;
            }
            let (trace, shadow) = run_with_memory(&p, &cfg)?;
            if let Some(path) = trace_out {
                fs::write(&path, trace.to_json_lines()).with_context(|| format!("writing {}", path.display()))?;
            }
            for (ch, v) in &trace.outputs {
                outln!("output {ch} {v}");
            }
            for s in &trace.skipped {
                outln!(
                    "skip {}#{} {} index={} ordinal={}",
                    s.func,
                    s.instr.0,
                    s.fault,
                    s.index,
                    s.ordinal
                );
            }
            for f in &trace.unchecked_faults {
                outln!("unchecked {}#{} {} addr={}", f.func, f.instr.0, f.fault, f.addr);
            }
            outln!("status {}", serde_json::to_string(&trace.status)?);
            outln!(
                "instructions={} checks={} cost={} leaks={}",
                trace.instruction_count(),
                trace.check_count(),
                trace.total_cost,
                trace.leaks.len()
            );
            if dump_shadow {
                out!("{}", shadow.dump_json_lines());
            }
            Ok(trace.status.exit_code() as u8)
        }
        Cmd::Run {
            scenario,
            modes,
            loop_exit_budget,
            fuzz,
        } => {
            let out = run_scenario_file(&scenario, &options(modes, loop_exit_budget, fuzz))?;
            let report = harness::SuiteReport {
                rows: out.rows,
                failures: out.mismatches,
                scenarios: 1,
            };
            out!("{}", report.summary());
            Ok(if report.passed() { 0 } else { 1 })
        }
        Cmd::Suite {
            pattern,
            modes,
            loop_exit_budget,
            fuzz,
            out,
        } => {
            let report = run_suite(&pattern, &options(modes, loop_exit_budget, fuzz))?;
            out!("{}", report.summary());
            match out {
                Some(path) => {
                    fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?
                }
                None => out!("{}", report.to_csv()),
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Cmd::VerifyPaper => {
            let r = verify_paper_arithmetic();
            out!("{}", r.render());
            if !r.passed() {
                bail!("published figures do not reproduce");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
