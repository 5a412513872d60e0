//! Command-line front end: `build`, `eval` and `matrix`.
//!
//! Precedence is flag > config file > built-in default. Exit codes: 0 success,
//! 2 configuration error, 3 planner backend error, 4 build incomplete. Errors
//! are also printed to stderr as one JSON object.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use blockbuild::dronesim::{run_build, BuildFailure, BuildReport};
use blockbuild::evalharness::{
    builtin_corpus, corpus_mock, emit_matrix_report, emit_report, load_corpus, run_constrained_suite, summarize,
    run_reprompt_matrix, EvalError,
};
use blockbuild::planner::{BackendError, LiveBackend, MockBackend, PlanError, PlannerBackend, RunLedger};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::{BackendKind, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_INCOMPLETE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("build stopped before completion: {0}")]
    Incomplete(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Incomplete(_) => EXIT_INCOMPLETE,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Backend(BackendError::KeyMissing(_)) => "key_missing",
            CliError::Backend(_) => "backend",
            CliError::Incomplete(_) => "build_incomplete",
        }
    }

    /// Machine-readable form printed to stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CliError::Io(e.to_string()),
            EvalError::Corpus { .. } => CliError::Config(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "blockbuild", version, about = "Plan, simulate and evaluate language-planned block builds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop build and write report.json.
    Build(BuildArgs),
    /// Score the planner on the constrained-prompt suite.
    Eval(EvalArgs),
    /// Run designs with and without reprompting under paired seeds.
    Matrix(MatrixArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

/// Options shared by every command.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file. Each flag names the key it overrides in brackets.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Planner backend [backend.kind].
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Master seed [seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [output_dir].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Set any config key by dotted path, e.g. `world.yaw_rad=0.3` (repeatable).
    /// Applied after the config file and before the dedicated flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Design request [build.request].
    #[arg(long)]
    pub request: Option<String>,
    /// Reprompt after a failed placement [build.reprompt].
    #[arg(long, value_enum)]
    pub reprompt: Option<OnOff>,
    /// Reprompt budget [build.max_reprompts].
    #[arg(long)]
    pub max_reprompts: Option<usize>,
    /// Per-placement misplacement probability [errors.misplace_prob].
    #[arg(long)]
    pub misplace_prob: Option<f64>,
    /// Force attempt N to land off target, as N,DX,DY [errors.forced].
    #[arg(long, value_parser = parse_forced)]
    pub force: Vec<[i64; 3]>,
    /// Write before/after PPM frames for every step [build.dump_frames].
    #[arg(long)]
    pub dump_frames: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of prompt files [eval.suite]; built-in corpus when omitted.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Trials per prompt [eval.trials].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Concurrent requests [eval.parallelism].
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated design requests [matrix.designs]; all mock designs when omitted.
    #[arg(long, value_delimiter = ',')]
    pub designs: Vec<String>,
    /// Seeds per design [matrix.seeds].
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Per-placement misplacement probability [errors.misplace_prob].
    #[arg(long)]
    pub misplace_prob: Option<f64>,
    /// Reprompt budget [build.max_reprompts].
    #[arg(long)]
    pub max_reprompts: Option<usize>,
}

fn parse_forced(s: &str) -> Result<[i64; 3], String> {
    let parts: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[i64; 3]>::try_from(parts).map_err(|_| "expected ATTEMPT,DX,DY".to_string())
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !common.overrides.is_empty() {
        cfg = cfg.with_overrides(&common.overrides)?;
    }
    if let Some(b) = common.backend {
        cfg.backend.kind = b;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn make_backend(cfg: &RunConfig, mock: impl FnOnce() -> MockBackend) -> Result<Box<dyn PlannerBackend>, CliError> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => Box::new(mock()),
        BackendKind::Live => Box::new(LiveBackend::from_env(cfg.backend.live.clone())?),
    })
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Build(a) => cmd_build(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Matrix(a) => cmd_matrix(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn print_build_summary(r: &BuildReport) {
    println!("design:        {}", r.design_request);
    println!("backend:       {}", r.backend);
    println!("steps:         {}", r.steps.len());
    println!("prompts used:  {} ({} reprompts)", r.prompts_used, r.reprompts);
    println!("stop reason:   {:?}", r.stop_reason);
    println!("final IoU:     {:.3}", r.final_iou);
    println!("unrecovered:   {}", r.unrecovered_mismatches);
    println!("final scene:\n{}", r.final_scene);
}

pub fn cmd_build(a: &BuildArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    if let Some(r) = &a.request {
        cfg.build.request = Some(r.clone());
    }
    if let Some(r) = a.reprompt {
        cfg.build.reprompt = r == OnOff::On;
    }
    if let Some(m) = a.max_reprompts {
        cfg.build.max_reprompts = m;
    }
    if let Some(p) = a.misplace_prob {
        cfg.errors.misplace_prob = p;
    }
    cfg.errors.forced.extend(a.force.iter().copied());
    cfg.build.dump_frames |= a.dump_frames;
    let request = cfg
        .build
        .request
        .clone()
        .ok_or_else(|| CliError::Config("no design request: pass --request or set build.request".into()))?;

    let world = cfg.grid()?;
    let pad_map = cfg.pad_map()?;
    let err = cfg.error_model()?;
    let mut build_cfg = cfg.build_config()?;
    let out = cfg.output_dir.clone();
    prepare_out(&out)?;
    if cfg.build.dump_frames {
        let frames = out.join("frames");
        prepare_out(&frames)?;
        build_cfg.frame_dump_dir = Some(frames);
    }
    let backend = make_backend(&cfg, MockBackend::standard)?;
    let ledger_path = out.join("ledger.jsonl");
    // a fresh ledger per invocation
    let _ = fs::remove_file(&ledger_path);
    let ledger = RunLedger::append_to(&ledger_path).map_err(|e| io_err(&ledger_path, e))?;

    let report_path = out.join("report.json");
    match run_build(&request, backend.as_ref(), &world, &pad_map, &err, &build_cfg, Some(&ledger)) {
        Ok(report) => {
            write_json(&report_path, &report)?;
            print_build_summary(&report);
            if report.succeeded() {
                Ok(())
            } else {
                Err(CliError::Incomplete(format!(
                    "final IoU {:.3} with {} unrecovered mismatches ({:?})",
                    report.final_iou, report.unrecovered_mismatches, report.stop_reason
                )))
            }
        }
        Err(e) => {
            write_json(&report_path, &e.partial)?;
            Err(match e.source {
                BuildFailure::Plan(PlanError::Backend { source, .. }) => CliError::Backend(source),
                BuildFailure::Plan(p @ PlanError::Rejected { .. }) => CliError::Incomplete(p.to_string()),
                BuildFailure::Dump(v) => CliError::Io(v.to_string()),
                other => CliError::Config(other.to_string()),
            })
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = &a.suite {
        cfg.eval.suite = Some(s.clone());
    }
    if let Some(t) = a.trials {
        cfg.eval.trials = t;
    }
    if let Some(p) = a.parallelism {
        cfg.eval.parallelism = p;
    }
    let suite_cfg = cfg.suite_config()?;
    let prompts = match &cfg.eval.suite {
        Some(dir) => load_corpus(dir).map_err(|e| CliError::Config(e.to_string()))?,
        None => builtin_corpus(),
    };
    let backend = make_backend(&cfg, || corpus_mock(&prompts))?;
    let results = run_constrained_suite(&prompts, backend.as_ref(), &suite_cfg)?;
    let out = cfg.output_dir.clone();
    prepare_out(&out)?;
    emit_report(&results, &out)?;
    let s = summarize(&results);
    println!("model:      {}", s.model);
    println!("prompts:    {}  trials: {}  unparsed: {}", s.prompts, s.trials, s.unparsed);
    println!("mean IoU:   {:.4}", s.mean_iou);
    println!("variance:   {:.6} (population)", s.variance);
    match s.mean_latency_ms {
        Some(l) => println!("latency:    {l:.1} ms"),
        None => println!("latency:    n/a"),
    }
    println!("reports in: {}", out.display());
    Ok(())
}

pub fn cmd_matrix(a: &MatrixArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    if !a.designs.is_empty() {
        cfg.matrix.designs = a.designs.clone();
    }
    if let Some(s) = a.seeds {
        cfg.matrix.seeds = s;
    }
    if let Some(p) = a.misplace_prob {
        cfg.errors.misplace_prob = p;
    }
    if let Some(m) = a.max_reprompts {
        cfg.build.max_reprompts = m;
    }
    let mock = MockBackend::standard();
    let designs = if cfg.matrix.designs.is_empty() {
        mock.library().names()
    } else {
        cfg.matrix.designs.clone()
    };
    if cfg.backend.kind == BackendKind::Mock {
        if let Some(bad) = designs.iter().find(|d| !mock.library().contains(d)) {
            return Err(CliError::Config(format!(
                "unknown design `{bad}`; the mock library has: {}",
                mock.library().names().join(", ")
            )));
        }
    }
    let world = cfg.grid()?;
    let pad_map = cfg.pad_map()?;
    let err = cfg.error_model()?;
    let build_cfg = cfg.build_config()?;
    let backend = make_backend(&cfg, || mock.clone())?;
    let out = cfg.output_dir.clone();
    prepare_out(&out)?;
    let table = match run_reprompt_matrix(&designs, backend.as_ref(), &world, &pad_map, &err, cfg.matrix.seeds, &build_cfg) {
        Ok(t) => t,
        Err(e) => {
            emit_matrix_report(&e.partial, &out)?;
            return Err(match e.source.source {
                BuildFailure::Plan(PlanError::Backend { source, .. }) => CliError::Backend(source),
                other => CliError::Incomplete(other.to_string()),
            });
        }
    };
    emit_matrix_report(&table, &out)?;
    println!("{:<55} {:>6} {:>12} {:>12}", "design", "runs", "reprompt", "no reprompt");
    for s in table.summaries() {
        println!(
            "{:<55} {:>6} {:>12} {:>12}",
            s.design, s.runs, s.complete_reprompt, s.complete_no_reprompt
        );
    }
    let (on, off) = table.complete_counts();
    println!("runs reaching IoU 1.0: {on} with reprompting, {off} without, of {}", table.rows.len());
    Ok(())
}
