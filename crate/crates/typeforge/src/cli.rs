//! Command-line interface: typecheck, run, and benchmark programs.
//!
//! Exit codes: 0 success (for `bench`: converged), 1 diagnostics / runtime
//! failure / no convergence, 2 I/O problems, 3 deadlock, 4 invalid benchmark
//! configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::fabric::{FabricConfig, MsgKind};
use crate::interp::{run_program, BoundarySpec, FinalArray, RunFailure, RunResult};
use crate::typesys::{check, CheckedProgram};

#[derive(Parser)]
#[command(
    name = "typeforge",
    version,
    about = "Typechecker, SPMD interpreter, and benchmark driver for type-chain programs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and typecheck a program.
    Check {
        /// Program file (.msh).
        path: PathBuf,
    },
    /// Run a program SPMD on virtual processes.
    Run(RunArgs),
    /// Generate, run, and report on a built-in benchmark.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args)]
struct RunArgs {
    /// Program file (.msh).
    path: PathBuf,
    /// Number of virtual processes.
    #[arg(long, default_value_t = 1)]
    procs: usize,
    /// Scheduler seed; defaults to $TYPEFORGE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Run contexts on free OS threads instead of the deterministic
    /// one-at-a-time scheduler.
    #[arg(long)]
    free_running: bool,
    /// Write metrics JSON here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the message trace here (one `seq src dst kind bytes tag` line
    /// per event).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Dump the first distributed array as CSV (`i,j,k,value` rows).
    #[arg(long)]
    dump_field: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// 3D Jacobi heat solve with a selectable communication mode.
    Jacobi(JacobiArgs),
}

#[derive(Args)]
struct JacobiArgs {
    #[arg(long, default_value_t = 16)]
    nx: i64,
    #[arg(long, default_value_t = 16)]
    ny: i64,
    #[arg(long, default_value_t = 16)]
    nz: i64,
    /// Process-grid extent along x; the run spawns px*py*pz processes.
    #[arg(long, default_value_t = 1)]
    px: i64,
    #[arg(long, default_value_t = 1)]
    py: i64,
    #[arg(long, default_value_t = 1)]
    pz: i64,
    #[arg(long, value_enum, default_value_t = Mode::Sync)]
    mode: Mode,
    /// Halo depth. 0 (sync mode only) reads every remote neighbor
    /// one-sided instead of batching faces.
    #[arg(long, default_value_t = 1)]
    halo: i64,
    /// Relative-residual convergence threshold.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 10000)]
    max_iters: i64,
    /// Scheduler seed; defaults to $TYPEFORGE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Run contexts on free OS threads instead of the deterministic
    /// one-at-a-time scheduler.
    #[arg(long)]
    free_running: bool,
    /// Write the benchmark report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the message trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Dump the final solution field as CSV (`i,j,k,value` rows).
    #[arg(long)]
    dump_field: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// No halo by default reads each remote neighbor as it is touched;
    /// with a halo, neighbors swap whole faces at every `sync`.
    Sync,
    /// Halo faces are published without blocking; consumers adopt the
    /// newest complete face.
    Async,
    /// Like async, but element-granular with no version fencing.
    Racy,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
            Mode::Racy => "racy",
        }
    }
}

/// Everything that shapes a generated Jacobi run.
#[derive(Debug, Clone, Serialize)]
pub struct JacobiConfig {
    pub nx: i64,
    pub ny: i64,
    pub nz: i64,
    pub px: i64,
    pub py: i64,
    pub pz: i64,
    pub mode: String,
    pub halo: i64,
    pub tol: f64,
    pub max_iters: i64,
    pub seed: u64,
    pub free_running: bool,
}

impl JacobiConfig {
    pub fn new(mode: Mode) -> Self {
        JacobiConfig {
            nx: 16,
            ny: 16,
            nz: 16,
            px: 1,
            py: 1,
            pz: 1,
            mode: mode.label().to_string(),
            halo: 1,
            tol: 1e-4,
            max_iters: 10000,
            seed: 0,
            free_running: false,
        }
    }

    pub fn procs(&self) -> usize {
        (self.px * self.py * self.pz) as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("nx", self.nx, self.px),
            ("ny", self.ny, self.py),
            ("nz", self.nz, self.pz),
        ];
        for (name, n, p) in dims {
            if n < 3 {
                return Err(format!("{name} must be at least 3 (got {n})"));
            }
            if p < 1 {
                return Err(format!("process grid extent for {name} must be positive (got {p})"));
            }
            if n < p {
                return Err(format!("{name}={n} cannot be split into {p} blocks"));
            }
        }
        if self.halo < 0 {
            return Err(format!("halo depth cannot be negative (got {})", self.halo));
        }
        if self.mode != "sync" && self.halo == 0 {
            return Err(format!("mode `{}` requires a halo depth of at least 1", self.mode));
        }
        if !(self.tol > 0.0) {
            return Err(format!("tol must be positive (got {})", self.tol));
        }
        if self.max_iters < 1 {
            return Err(format!("max-iters must be at least 1 (got {})", self.max_iters));
        }
        Ok(())
    }
}

/// Renders the Jacobi solver with the communication chain the mode calls
/// for. Both grids carry the boundary so whole-array copies preserve it.
pub fn jacobi_source(cfg: &JacobiConfig) -> String {
    let grid_prefix = match (cfg.mode.as_str(), cfg.halo) {
        ("sync", 0) => String::new(),
        ("sync", h) => format!("halo[{h}], "),
        ("async", h) => format!("halo[{h}] :: async, "),
        (_, h) => format!("halo[{h}] :: async :: racy, "),
    };
    let mut s = String::new();
    let _ = write!(
        s,
        "var nx := {nx};\n\
         var ny := {ny};\n\
         var nz := {nz};\n\
         var maxIters := {max_iters};\n\
         var threshold := {tol:?};\n\
         var data : array[Double, nx, ny, nz] :: allocated[grid[{gp}{px}, {py}, {pz}] :: single[evendist]];\n\
         var new_data : array[Double, nx, ny, nz] :: allocated[grid[{gp}{px}, {py}, {pz}] :: single[evendist]];\n\
         \n\
         zeroGrid(data);\n\
         zeroGrid(new_data);\n\
         var norm_b := fillBoundaryConditions(data);\n\
         var norm_b_new := fillBoundaryConditions(new_data);\n\
         \n\
         for i from 0 to maxIters {{\n\
            norm_r := computeResidue(data);\n\
            norm_r := norm_r / norm_b;\n\
            if (norm_r < threshold) break;\n\
         \n\
            for i from data[pid()].low to data[pid()].high {{\n\
               for j from data[pid()][i].low to data[pid()][i].high {{\n\
                  for k from data[pid()][i][j].low to data[pid()][i][j].high {{\n\
                     new_data[i][j][k] := (data[i+1][j][k] + data[i-1][j][k] +\n\
                           data[i][j+1][k] + data[i][j-1][k] +\n\
                           data[i][j][k+1] + data[i][j][k-1]) * 1.0 / 6.0;\n\
                  }};\n\
               }};\n\
            }};\n\
         \n\
            data := new_data;\n\
            sync data;\n\
         }};\n",
        nx = cfg.nx,
        ny = cfg.ny,
        nz = cfg.nz,
        max_iters = cfg.max_iters,
        tol = cfg.tol,
        gp = grid_prefix,
        px = cfg.px,
        py = cfg.py,
        pz = cfg.pz,
    );
    s
}

// ---- reports ----

#[derive(Debug, Clone, Serialize, PartialEq)]
struct KindJson {
    messages: u64,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
struct MessagesJson {
    one_sided: KindJson,
    channel: KindJson,
    halo_face: KindJson,
    reduction: KindJson,
}

/// The stable metrics schema; field order is part of the contract.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsJson {
    procs: usize,
    iterations: u64,
    converged: bool,
    residual_history: Vec<(u64, f64)>,
    messages: MessagesJson,
    staleness: BTreeMap<i64, u64>,
    wall_time_s: f64,
    norm_b_zero_fallback: bool,
}

pub fn metrics_json(result: &RunResult) -> MetricsJson {
    let kind = |k: MsgKind| {
        let c = result.metrics.kind(k);
        KindJson {
            messages: c.messages,
            bytes: c.bytes,
        }
    };
    MetricsJson {
        procs: result.procs,
        iterations: result.iterations,
        converged: result.converged,
        residual_history: result.residual_history.clone(),
        messages: MessagesJson {
            one_sided: kind(MsgKind::OneSided),
            channel: kind(MsgKind::Channel),
            halo_face: kind(MsgKind::HaloFace),
            reduction: kind(MsgKind::ReductionMsg),
        },
        staleness: result.metrics.staleness.clone(),
        wall_time_s: result.wall_time_s,
        norm_b_zero_fallback: result.norm_b_zero_fallback,
    }
}

#[derive(Debug, Clone, Serialize)]
struct PerIterationJson {
    one_sided: f64,
    channel: f64,
    halo_face: f64,
    reduction: f64,
}

#[derive(Debug, Clone, Serialize)]
struct DerivedJson {
    messages_per_iteration: PerIterationJson,
    staleness_mean: f64,
    staleness_max: i64,
    final_true_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    config: JacobiConfig,
    result: MetricsJson,
    derived: DerivedJson,
}

pub fn bench_report(cfg: &JacobiConfig, result: &RunResult) -> BenchReport {
    // Average complete iterations between the first and last metric mark.
    let marks = &result.metrics.marks;
    let per_iter = |k: MsgKind| {
        if marks.len() < 2 {
            return 0.0;
        }
        let first = marks.first().unwrap().by_kind[k.index()].messages;
        let last = marks.last().unwrap().by_kind[k.index()].messages;
        (last - first) as f64 / (marks.len() - 1) as f64
    };

    let total_lags: u64 = result.metrics.staleness.values().sum();
    let staleness_mean = if total_lags == 0 {
        0.0
    } else {
        let weighted: i64 = result
            .metrics
            .staleness
            .iter()
            .map(|(lag, n)| lag * *n as i64)
            .sum();
        weighted as f64 / total_lags as f64
    };
    let staleness_max = result.metrics.staleness.keys().copied().max().unwrap_or(0);

    let field = result
        .arrays
        .iter()
        .find(|a| a.name == "data")
        .or_else(|| result.arrays.first());
    let final_true_residual = field.map_or(f64::INFINITY, true_relative_residual);

    BenchReport {
        config: cfg.clone(),
        result: metrics_json(result),
        derived: DerivedJson {
            messages_per_iteration: PerIterationJson {
                one_sided: per_iter(MsgKind::OneSided),
                channel: per_iter(MsgKind::Channel),
                halo_face: per_iter(MsgKind::HaloFace),
                reduction: per_iter(MsgKind::ReductionMsg),
            },
            staleness_mean,
            staleness_max,
            final_true_residual,
        },
    }
}

/// Residual norm of the gathered field divided by its boundary norm, both
/// recomputed from the field itself, independent of the run's bookkeeping.
pub fn true_relative_residual(field: &FinalArray) -> f64 {
    let dims = field.shape.len();
    let at = |idx: &[i64]| {
        let mut lin = 0usize;
        for d in 0..dims {
            lin = lin * field.shape[d] as usize + idx[d] as usize;
        }
        field.data[lin]
    };

    let mut idx = vec![1i64; dims];
    let mut resid_sq = 0.0;
    let mut norm_b_sq = 0.0;
    'outer: loop {
        let u = at(&idx);
        let mut total = 0.0;
        let mut boundary = 0.0;
        for d in 0..dims {
            for delta in [1i64, -1] {
                let mut n = idx.clone();
                n[d] += delta;
                let v = at(&n);
                total += v;
                if n[d] == 0 || n[d] == field.shape[d] - 1 {
                    boundary += v;
                }
            }
        }
        let r = total - 2.0 * dims as f64 * u;
        resid_sq += r * r;
        norm_b_sq += boundary * boundary;

        let mut d = dims;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < field.shape[d] - 1 {
                break;
            }
            idx[d] = 1;
        }
    }

    let norm_b = norm_b_sq.sqrt();
    let scale = if norm_b == 0.0 { 1.0 } else { norm_b };
    resid_sq.sqrt() / scale
}

/// CSV dump of a gathered field: one `i,j,k,value` row per cell.
pub fn field_csv(field: &FinalArray) -> String {
    let dims = field.shape.len();
    let mut out = String::new();
    let mut idx = vec![0i64; dims];
    for v in &field.data {
        for d in 0..dims {
            let _ = write!(out, "{},", idx[d]);
        }
        let _ = writeln!(out, "{v:?}");
        let mut d = dims;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < field.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ---- commands ----

pub fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Check { path } => cmd_check(&path),
        Cmd::Run(args) => cmd_run(&args),
        Cmd::Bench(BenchCmd::Jacobi(args)) => cmd_bench_jacobi(&args),
    }
}

fn load_checked(path: &Path) -> Result<CheckedProgram, ExitCode> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(ExitCode::from(2));
        }
    };
    let sp = crate::frontend::SourceProgram::new(text, path.display().to_string());
    let program = match crate::frontend::parse(&sp) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            return Err(ExitCode::from(1));
        }
    };
    match check(program, &sp.origin) {
        Ok(cp) => {
            for w in &cp.warnings {
                eprintln!("{}:{}: warning: {}", sp.origin, w.loc, w.message);
            }
            Ok(cp)
        }
        Err(diags) => {
            for d in &diags {
                eprintln!("{}:{}: error: {}", sp.origin, d.loc, d.message);
            }
            Err(ExitCode::from(1))
        }
    }
}

fn cmd_check(path: &Path) -> ExitCode {
    match load_checked(path) {
        Ok(_) => {
            println!("{}: ok", path.display());
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("TYPEFORGE_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExitCode> {
    fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn write_outputs(
    result: &RunResult,
    metrics: Option<&Path>,
    trace: Option<&Path>,
    dump_field: Option<&Path>,
) -> Result<(), ExitCode> {
    if let Some(p) = metrics {
        let json = serde_json::to_string_pretty(&metrics_json(result)).expect("serializable");
        write_file(p, &(json + "\n"))?;
    }
    if let Some(p) = trace {
        let mut body = result.trace.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        write_file(p, &body)?;
    }
    if let Some(p) = dump_field {
        match result.arrays.first() {
            Some(f) => write_file(p, &field_csv(f))?,
            None => {
                eprintln!("error: program has no distributed array to dump");
                return Err(ExitCode::from(1));
            }
        }
    }
    Ok(())
}

fn report_failure(failure: &RunFailure) -> ExitCode {
    match failure {
        RunFailure::Deadlock(msg) => {
            eprintln!("deadlock: {msg}");
            ExitCode::from(3)
        }
        RunFailure::Runtime(errors) => {
            for e in errors {
                eprintln!("error: {e}");
            }
            ExitCode::from(1)
        }
        RunFailure::Setup(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let checked = match load_checked(&args.path) {
        Ok(cp) => cp,
        Err(code) => return code,
    };
    let seed = resolve_seed(args.seed);
    let mut config = if args.free_running {
        FabricConfig::free_running(args.procs, seed)
    } else {
        FabricConfig::deterministic(args.procs, seed)
    };
    config.collect_trace = args.trace.is_some();

    let result = match run_program(&checked, config, &BoundarySpec::default()) {
        Ok(r) => r,
        Err(f) => return report_failure(&f),
    };
    if let Err(code) = write_outputs(
        &result,
        args.metrics.as_deref(),
        args.trace.as_deref(),
        args.dump_field.as_deref(),
    ) {
        return code;
    }
    println!(
        "ran on {} process(es): {} message(s), {} iteration(s)",
        result.procs,
        result.metrics.total_messages(),
        result.iterations
    );
    ExitCode::SUCCESS
}

fn cmd_bench_jacobi(args: &JacobiArgs) -> ExitCode {
    let cfg = JacobiConfig {
        nx: args.nx,
        ny: args.ny,
        nz: args.nz,
        px: args.px,
        py: args.py,
        pz: args.pz,
        mode: args.mode.label().to_string(),
        halo: args.halo,
        tol: args.tol,
        max_iters: args.max_iters,
        seed: resolve_seed(args.seed),
        free_running: args.free_running,
    };
    if let Err(msg) = cfg.validate() {
        eprintln!("error: {msg}");
        return ExitCode::from(4);
    }

    let source = jacobi_source(&cfg);
    let sp = crate::frontend::SourceProgram::new(source, format!("<jacobi:{}>", cfg.mode));
    let program = crate::frontend::parse(&sp).expect("generated program parses");
    let checked = check(program, &sp.origin).expect("generated program typechecks");

    let mut config = if cfg.free_running {
        FabricConfig::free_running(cfg.procs(), cfg.seed)
    } else {
        FabricConfig::deterministic(cfg.procs(), cfg.seed)
    };
    config.collect_trace = args.trace.is_some();

    let bc = BoundarySpec::default();
    let result = match run_program(&checked, config, &bc) {
        Ok(r) => r,
        Err(f) => return report_failure(&f),
    };

    let report = bench_report(&cfg, &result);
    if let Some(p) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("serializable");
        if let Err(code) = write_file(p, &(json + "\n")) {
            return code;
        }
    }
    if let Err(code) = write_outputs(&result, None, args.trace.as_deref(), None) {
        return code;
    }
    if let Some(p) = &args.dump_field {
        let field = result
            .arrays
            .iter()
            .find(|a| a.name == "data")
            .unwrap_or_else(|| &result.arrays[0]);
        if let Err(code) = write_file(p, &field_csv(field)) {
            return code;
        }
    }

    println!(
        "jacobi {}x{}x{} on {} process(es), mode {}: {} at iteration {}, final true residual {:e}",
        cfg.nx,
        cfg.ny,
        cfg.nz,
        cfg.procs(),
        cfg.mode,
        if result.converged { "converged" } else { "did not converge" },
        result.iterations,
        report.derived.final_true_residual,
    );
    if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
