//! Command-line entry points. The `engine` binary is a thin wrapper over
//! [`main_with_args`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{bench_grid, BenchConfig};
use crate::error::{config_err, EngineError, Result};
use crate::importance::ScoreConfig;
use crate::model::{Model, ModelConfig};
use crate::oracle::{measure_drop_error_with, ErrorBoundReport, ErrorProbeOptions};
use crate::pipeline::Mode;
use crate::report::{run_workload, RunOptions};
use crate::tasks::{accuracy_table, calibrate, run_task_suite, AccuracyRow, CalibratedSuite, TaskResult, TaskSuite};
use crate::workload::{gen_workload, load_workload, to_json, WorkloadSpec};

/// Exit code for a run whose invariant audits failed.
pub const EXIT_AUDIT: i32 = 1;
/// Exit code for configuration, IO and contract errors.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "engine", about = "Toy hybrid transformer engine with prefill token dropping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a workload through the continuous-batching scheduler.
    Run(RunArgs),
    /// Prefill throughput grid over lengths, batch sizes and modes.
    Bench(BenchArgs),
    /// Calibrate and run a synthetic retrieval suite.
    Tasks(TasksArgs),
    /// Write a seeded workload file.
    GenWorkload(GenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model_config: PathBuf,
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long)]
    pub score_config: PathBuf,
    #[arg(long, default_value = "uniprefill")]
    pub mode: Mode,
    #[arg(long)]
    pub report: PathBuf,
    /// Simulated tensor-parallel degree for scoring.
    #[arg(long, default_value_t = 1)]
    pub tp: usize,
    /// Check every request's FLOPs savings against the drop-history formula.
    #[arg(long)]
    pub flops_audit: bool,
    #[arg(long, default_value_t = 8192)]
    pub token_budget: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_steps: usize,
    /// Write the per-step event log as JSON lines.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Grid config; the desk defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub batches: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<Mode>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Append a 131072-token row to the grid.
    #[arg(long)]
    pub include_128k: bool,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct TasksArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "dense,uniprefill")]
    pub modes: Vec<Mode>,
    #[arg(long)]
    pub report: PathBuf,
    /// Perturbation trials per sublayer for the Lipschitz estimates.
    #[arg(long, default_value_t = 64)]
    pub lipschitz_trials: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasksReport {
    pub suite: TaskSuite,
    pub calibrated: CalibratedSuite,
    pub results: Vec<TaskResult>,
    pub accuracy: Vec<AccuracyRow>,
    /// Drop-error measurements at the first full-attention layer, one per task.
    pub error_bounds: Vec<ErrorBoundReport>,
    pub needle_agreement: NeedleAgreement,
}

/// Accelerated runs that kept every needle, and how many of those
/// reproduced the dense answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleAgreement {
    pub retained_runs: usize,
    pub agreeing_runs: usize,
}

impl TasksReport {
    pub fn audits_passed(&self) -> bool {
        let dense_exact = self.results.iter().filter(|r| r.mode == Mode::Dense).all(|r| r.correct);
        dense_exact && self.error_bounds.iter().all(|b| b.bound_holds)
    }

    pub fn render_table(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "calibrated {} tasks, rejected {}",
            self.calibrated.tasks.len(),
            self.calibrated.rejected.len()
        );
        let _ = writeln!(s, "{:>16} {:>7} {:>11} {:>6} {:>8} {:>9}", "task", "length", "mode", "tasks", "correct", "accuracy");
        for r in &self.accuracy {
            let kind = serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:>16} {:>7} {:>11} {:>6} {:>8} {:>9.3}",
                kind,
                r.prompt_length,
                r.mode.name(),
                r.tasks,
                r.correct,
                r.accuracy
            );
        }
        let holds = self.error_bounds.iter().filter(|b| b.bound_holds).count();
        let _ = writeln!(s, "drop-layer error bound holds on {holds}/{}", self.error_bounds.len());
        let _ = writeln!(
            s,
            "needles retained in {} accelerated runs, {} of them match dense",
            self.needle_agreement.retained_runs, self.needle_agreement.agreeing_runs
        );
        s
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_report<T: Serialize>(path: &Path, report: &T, table: &str) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(path.with_extension("txt"), table)?;
    Ok(())
}

/// Run `engine run`; returns whether every audit passed.
pub fn cmd_run(a: &RunArgs) -> Result<bool> {
    let model = Model::build(ModelConfig::from_json_file(&a.model_config)?)?;
    let score: ScoreConfig = read_json(&a.score_config)?;
    score.validate()?;
    let items = load_workload(&a.workload)?;
    let opts = RunOptions {
        mode: a.mode,
        tp: a.tp,
        token_budget: a.token_budget,
        flops_audit: a.flops_audit,
        max_steps: a.max_steps,
    };
    let report = run_workload(&model, &items, &score, &opts)?;
    let table = report.render_table();
    write_report(&a.report, &report, &table)?;
    if let Some(path) = &a.events {
        let mut lines = String::new();
        for e in &report.events {
            lines += &serde_json::to_string(e)?;
            lines.push('\n');
        }
        std::fs::write(path, lines)?;
    }
    print!("{table}");
    Ok(report.audits_passed())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::desk_default(),
    };
    if let Some(l) = &a.lengths {
        cfg.lengths = l.clone();
    }
    if let Some(b) = &a.batches {
        cfg.batches = b.clone();
    }
    if let Some(m) = &a.modes {
        cfg.modes = m.clone();
    }
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    if a.include_128k && !cfg.lengths.contains(&131_072) {
        cfg.lengths.push(131_072);
    }
    let report = bench_grid(&cfg)?;
    let table = report.render_table();
    write_report(&a.report, &report, &table)?;
    print!("{table}");
    let finite = report
        .cells
        .iter()
        .filter_map(|c| c.tokens_per_second())
        .all(|t| t.is_finite() && t > 0.0);
    Ok(finite)
}

pub fn run_tasks(suite: &TaskSuite, modes: &[Mode], lipschitz_trials: usize) -> Result<TasksReport> {
    let model = Model::build(suite.model.clone())?;
    suite.score.validate()?;
    let calibrated = calibrate(&model, &suite.tasks, &suite.calibration)?;
    let mut results = Vec::new();
    for &mode in modes {
        results.extend(run_task_suite(&model, &calibrated.tasks, mode, &suite.score)?);
    }
    let kept: Vec<&TaskResult> = results
        .iter()
        .filter(|r| r.mode == Mode::Accelerated && r.needles_retained)
        .collect();
    let needle_agreement = NeedleAgreement {
        retained_runs: kept.len(),
        agreeing_runs: kept.iter().filter(|r| r.correct).count(),
    };
    let first = model
        .config()
        .full_attention_layers()
        .first()
        .copied()
        .ok_or_else(|| config_err("model has no full-attention layer"))?;
    let opts = ErrorProbeOptions {
        lipschitz_trials,
        ..Default::default()
    };
    let mut error_bounds = Vec::new();
    for t in &calibrated.tasks {
        let mut h = t.prompt(&model)?;
        let positions: Vec<usize> = (0..h.rows()).collect();
        let mut cache = model.new_cache();
        for layer in 0..first {
            h = model.forward_sublayer(layer, 0, &h, &positions, &mut cache)?;
        }
        error_bounds.push(measure_drop_error_with(&model, &h, &suite.score, first, &opts)?);
    }
    Ok(TasksReport {
        suite: suite.clone(),
        accuracy: accuracy_table(&results),
        calibrated,
        results,
        error_bounds,
        needle_agreement,
    })
}

pub fn cmd_tasks(a: &TasksArgs) -> Result<bool> {
    let suite: TaskSuite = read_json(&a.suite)?;
    let report = run_tasks(&suite, &a.modes, a.lipschitz_trials)?;
    let table = report.render_table();
    write_report(&a.report, &report, &table)?;
    print!("{table}");
    Ok(report.audits_passed())
}

pub fn cmd_gen_workload(a: &GenArgs) -> Result<bool> {
    let spec: WorkloadSpec = read_json(&a.spec)?;
    let items = gen_workload(&spec)?;
    std::fs::write(&a.out, to_json(&items)?)?;
    println!("wrote {} requests to {}", items.len(), a.out.display());
    Ok(true)
}

pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Tasks(a) => cmd_tasks(a),
        Command::GenWorkload(a) => cmd_gen_workload(a),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("engine: audit failed");
            EXIT_AUDIT
        }
        Err(e @ EngineError::Audit(_)) => {
            eprintln!("engine: {e}");
            EXIT_AUDIT
        }
        Err(e) => {
            eprintln!("engine: {e}");
            EXIT_ERROR
        }
    }
}
