//! Tree-walking SPMD interpreter: one fabric context per process runs the
//! same checked program.
//!
//! Placement decides what each statement does locally: replicated scalars
//! update everywhere, single-placed scalars are owner-executed, channel
//! assignments run only on their two endpoints, and array element access
//! routes through the distributed-array layer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::distarray::{DistArray, DistError, DistSpec};
use crate::fabric::{Fabric, FabricConfig, FabricError, MetricsSnapshot, Pid};
use crate::frontend::{BinOp, Block, BoundsProp, Expr, LValue, Loc, NodeId, Stmt};
use crate::typesys::{
    AssignKind, CheckedProgram, CommMode, DeclId, ElemKind, Mutability, Storage,
};
use crate::value::Value;

/// Dirichlet boundary values per dimension as `(low-face, high-face)` pairs;
/// dimensions past the end of the list get zero on both faces.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    pub faces: Vec<(f64, f64)>,
}

impl Default for BoundarySpec {
    fn default() -> Self {
        BoundarySpec {
            faces: vec![(1.0, 0.0)],
        }
    }
}

impl BoundarySpec {
    pub fn value(&self, dim: usize, high: bool) -> f64 {
        self.faces
            .get(dim)
            .map_or(0.0, |&(lo, hi)| if high { hi } else { lo })
    }
}

/// Error raised by one process context.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("process {pid} at {loc}: {message}")]
pub struct RunError {
    pub pid: Pid,
    pub loc: Loc,
    pub message: String,
}

/// Why a run failed as a whole.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunFailure {
    /// The program could not be brought up (bad placement, bad shapes).
    #[error("setup failed: {0}")]
    Setup(String),
    /// Every live context was blocked with nothing in flight.
    #[error("deadlock: {0}")]
    Deadlock(String),
    /// One or more contexts hit a runtime error.
    #[error("{}", .0.first().map(|e| e.to_string()).unwrap_or_default())]
    Runtime(Vec<RunError>),
}

/// Gathered contents of one distributed array after the run.
#[derive(Debug, Clone)]
pub struct FinalArray {
    pub name: String,
    pub shape: Vec<i64>,
    /// Row-major cell values, widened to f64.
    pub data: Vec<f64>,
}

/// Everything observable from a completed run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub procs: usize,
    /// Index of the last recorded residual check (0 when none ran).
    pub iterations: u64,
    /// True once process 0 breaks out of a loop.
    pub converged: bool,
    /// `(iteration, residual relative to the boundary norm)` from process 0.
    pub residual_history: Vec<(u64, f64)>,
    pub metrics: MetricsSnapshot,
    /// Elapsed seconds; forced to zero in deterministic mode so equal seeds
    /// produce byte-identical reports.
    pub wall_time_s: f64,
    pub norm_b_zero_fallback: bool,
    pub trace: Vec<String>,
    pub tag_violations: u64,
    /// Final scalar slot values in declaration order.
    pub scalars: Vec<(String, Value)>,
    pub arrays: Vec<FinalArray>,
}

#[derive(Debug)]
enum CtxError {
    Fabric(FabricError),
    Fail { loc: Loc, message: String },
}

impl From<FabricError> for CtxError {
    fn from(e: FabricError) -> Self {
        CtxError::Fabric(e)
    }
}

fn fail(loc: Loc, message: impl Into<String>) -> CtxError {
    CtxError::Fail {
        loc,
        message: message.into(),
    }
}

fn dist(loc: Loc, e: DistError) -> CtxError {
    match e {
        DistError::Fabric(f) => CtxError::Fabric(f),
        other => fail(loc, other.to_string()),
    }
}

enum Flow {
    Normal,
    Break,
}

/// State every context can see.
struct Shared {
    history: Mutex<Vec<(u64, f64)>>,
    norm_b: Mutex<f64>,
    norm_b_zero_fallback: AtomicBool,
    converged: AtomicBool,
}

/// Runs a checked program on a fresh fabric and gathers the results.
pub fn run_program(
    prog: &CheckedProgram,
    config: FabricConfig,
    bc: &BoundarySpec,
) -> Result<RunResult, RunFailure> {
    let deterministic = config.deterministic;
    let procs = config.procs;
    let setup = |e: &dyn std::fmt::Display| RunFailure::Setup(e.to_string());
    let mut fab = Fabric::new(config).map_err(|e| setup(&e))?;

    // Scalar slots are keyed by declaration index; arrays get dense ids.
    let mut arrays = Vec::new();
    let mut array_ix: HashMap<DeclId, usize> = HashMap::new();
    for (i, info) in prog.decls.iter().enumerate() {
        match info.storage {
            Storage::Replicated => {}
            Storage::SingleSlot { owner } => {
                if owner < 0 || owner as usize >= procs {
                    return Err(RunFailure::Setup(format!(
                        "`{}` lives on process {owner}, but only {procs} process(es) were spawned",
                        info.name
                    )));
                }
                fab.define_scalar_slot(
                    i,
                    &info.name,
                    owner as usize,
                    default_value(info.attrs.element),
                    info.attrs.mutability == Mutability::ReadOnly,
                )
                .map_err(|e| setup(&e))?;
            }
            Storage::DistArray => {
                let spec =
                    DistSpec::from_attrs(&info.name, &info.attrs).map_err(|e| setup(&e))?;
                let ix = arrays.len();
                let arr = DistArray::new(&mut fab, ix as u32, &info.name, spec)
                    .map_err(|e| setup(&e))?;
                arrays.push(arr);
                array_ix.insert(DeclId(i as u32), ix);
            }
        }
    }

    let shared = Shared {
        history: Mutex::new(Vec::new()),
        norm_b: Mutex::new(1.0),
        norm_b_zero_fallback: AtomicBool::new(false),
        converged: AtomicBool::new(false),
    };

    let start = Instant::now();
    let results = fab.run_contexts(|pid| {
        let mut ctx = Ctx {
            pid,
            fab: &fab,
            prog,
            arrays: &arrays,
            array_ix: &array_ix,
            shared: &shared,
            bc,
            bindings: vec![None; prog.decls.len()],
            residue_calls: 0,
            stop_posted: false,
        };
        let out = ctx.run();
        if out.is_err() {
            fab.abort();
        }
        out
    });
    let wall_time_s = if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    };

    // A deadlock outranks individual errors; collateral aborts are dropped.
    let mut deadlock = None;
    let mut errors = Vec::new();
    for (pid, r) in results.into_iter().enumerate() {
        match r {
            Ok(()) => {}
            Err(CtxError::Fabric(FabricError::DeadlockDetected(msg))) => deadlock = Some(msg),
            Err(CtxError::Fabric(FabricError::Aborted)) => {}
            Err(CtxError::Fabric(f)) => errors.push(RunError {
                pid,
                loc: Loc::default(),
                message: f.to_string(),
            }),
            Err(CtxError::Fail { loc, message }) => errors.push(RunError { pid, loc, message }),
        }
    }
    if let Some(msg) = deadlock {
        return Err(RunFailure::Deadlock(msg));
    }
    if !errors.is_empty() {
        return Err(RunFailure::Runtime(errors));
    }

    let history = shared.history.into_inner().unwrap();
    Ok(RunResult {
        procs,
        iterations: history.last().map_or(0, |&(i, _)| i),
        converged: shared.converged.load(Ordering::Relaxed),
        residual_history: history,
        metrics: fab.metrics(),
        wall_time_s,
        norm_b_zero_fallback: shared.norm_b_zero_fallback.load(Ordering::Relaxed),
        trace: fab.trace_lines(),
        tag_violations: fab.tag_violations(),
        scalars: fab.slot_snapshot(),
        arrays: arrays
            .iter()
            .map(|a| FinalArray {
                name: a.name.clone(),
                shape: a.spec.shape.clone(),
                data: a
                    .snapshot()
                    .into_iter()
                    .map(|bits| value_f64(a.spec.elem, bits))
                    .collect(),
            })
            .collect(),
    })
}

struct Ctx<'a> {
    pid: Pid,
    fab: &'a Fabric,
    prog: &'a CheckedProgram,
    arrays: &'a [DistArray],
    array_ix: &'a HashMap<DeclId, usize>,
    shared: &'a Shared,
    bc: &'a BoundarySpec,
    /// Replicated scalar values, indexed by declaration.
    bindings: Vec<Option<Value>>,
    /// Residual checks performed so far; doubles as the iteration index.
    residue_calls: u64,
    stop_posted: bool,
}

impl<'a> Ctx<'a> {
    fn run(&mut self) -> Result<(), CtxError> {
        for stmt in &self.prog.program.stmts {
            if let Flow::Break = self.exec(stmt)? {
                break;
            }
        }
        Ok(())
    }

    fn exec_block(&mut self, block: &Block) -> Result<Flow, CtxError> {
        for stmt in &block.stmts {
            if let Flow::Break = self.exec(stmt)? {
                return Ok(Flow::Break);
            }
        }
        Ok(Flow::Normal)
    }

    fn exec(&mut self, stmt: &Stmt) -> Result<Flow, CtxError> {
        match stmt {
            Stmt::VarDecl { id, loc, init, .. } => {
                let decl = self.prog.resolution(*id);
                let info = self.prog.decl(decl);
                match info.storage {
                    Storage::Replicated => {
                        let v = match init {
                            Some(e) => {
                                let raw = self.eval(e)?;
                                coerce_value(raw, info.attrs.element, *loc)?
                            }
                            None => default_value(info.attrs.element),
                        };
                        self.bindings[decl.0 as usize] = Some(v);
                    }
                    Storage::SingleSlot { owner } => {
                        // Owner-executes: nobody else even evaluates the
                        // initializer.
                        if self.pid == owner as usize {
                            if let Some(e) = init {
                                let raw = self.eval(e)?;
                                let v = coerce_value(raw, info.attrs.element, *loc)?;
                                self.fab.slot_init(self.pid, decl.0 as usize, v)?;
                            }
                        }
                        // Allocation of placed storage is collective:
                        // every process leaves the declaration seeing the
                        // slot in place with its initial value.
                        self.fab.barrier(self.pid)?;
                    }
                    Storage::DistArray => {
                        self.fab.barrier(self.pid)?;
                    }
                }
                Ok(Flow::Normal)
            }
            Stmt::Assign {
                id,
                loc,
                target,
                value,
            }
            | Stmt::TypedAssign {
                id,
                loc,
                target,
                value,
                ..
            } => {
                self.assign(*id, *loc, target, value)?;
                Ok(Flow::Normal)
            }
            Stmt::Retype { .. } => Ok(Flow::Normal),
            Stmt::For {
                id, from, to, body, ..
            } => {
                let decl = self.prog.resolution(*id);
                let lo = self.expect_int(from)?;
                let hi = self.expect_int(to)?;
                for i in lo..hi {
                    self.bindings[decl.0 as usize] = Some(Value::Int(i));
                    if let Flow::Break = self.exec_block(body)? {
                        break;
                    }
                }
                Ok(Flow::Normal)
            }
            Stmt::If {
                loc,
                cond,
                then_block,
                else_block,
                ..
            } => {
                let c = self.eval(cond)?;
                let Value::Bool(b) = c else {
                    return Err(fail(
                        *loc,
                        format!("if condition evaluated to {}, not Bool", c.kind_name()),
                    ));
                };
                if b {
                    self.exec_block(then_block)
                } else if let Some(e) = else_block {
                    self.exec_block(e)
                } else {
                    Ok(Flow::Normal)
                }
            }
            Stmt::Sync { id, loc, .. } => {
                let decl = self.prog.resolution(*id);
                let info = self.prog.decl(decl);
                if !matches!(info.storage, Storage::DistArray) {
                    return Ok(Flow::Normal);
                }
                match info.attrs.comm_mode {
                    CommMode::HaloSync => {
                        let ix = self.array_ix[&decl];
                        self.arrays[ix]
                            .halo_exchange(self.fab, self.pid)
                            .map_err(|e| dist(*loc, e))?;
                    }
                    CommMode::HaloAsyncSafe | CommMode::HaloAsyncRacy => {
                        let ix = self.array_ix[&decl];
                        self.arrays[ix]
                            .halo_exchange(self.fab, self.pid)
                            .map_err(|e| dist(*loc, e))?;
                        // Process 0 announces its break through the mailbox;
                        // everyone else honors it at the next sync point.
                        if self.pid != 0 && self.fab.mailbox_try_recv(self.pid)?.is_some() {
                            return Ok(Flow::Break);
                        }
                    }
                    // One-sided arrays are always consistent: sync is a no-op.
                    _ => {}
                }
                Ok(Flow::Normal)
            }
            Stmt::Break { .. } => {
                if self.pid == 0 {
                    self.shared.converged.store(true, Ordering::Relaxed);
                    if self.prog.uses_async && !self.stop_posted {
                        for p in 1..self.fab.procs() {
                            self.fab.mailbox_send(self.pid, p, 1)?;
                        }
                        self.stop_posted = true;
                    }
                }
                Ok(Flow::Break)
            }
            Stmt::ExprStmt { expr, .. } => {
                match expr {
                    Expr::Call {
                        loc, name, args, ..
                    } => {
                        self.call(name, args, *loc)?;
                    }
                    other => {
                        self.eval(other)?;
                    }
                }
                Ok(Flow::Normal)
            }
            Stmt::Block(b) => self.exec_block(b),
        }
    }

    fn assign(
        &mut self,
        id: NodeId,
        loc: Loc,
        target: &LValue,
        value: &Expr,
    ) -> Result<(), CtxError> {
        match self.prog.assign_kind(id) {
            AssignKind::LocalScalar { decl } | AssignKind::ImplicitDecl { decl } => {
                let elem = self.prog.decl(decl).attrs.element;
                let raw = self.eval(value)?;
                let v = coerce_value(raw, elem, loc)?;
                self.bindings[decl.0 as usize] = Some(v);
            }
            AssignKind::SingleScalar { decl, owner } => {
                if self.pid == owner as usize {
                    let elem = self.prog.decl(decl).attrs.element;
                    let raw = self.eval(value)?;
                    let v = coerce_value(raw, elem, loc)?;
                    self.fab.one_sided_put(self.pid, decl.0 as usize, v)?;
                }
            }
            AssignKind::ArrayElement { decl } => {
                let elem = self.prog.decl(decl).attrs.element;
                let ix = self.array_ix[&decl];
                let idx = self.eval_indices(&target.indices)?;
                let raw = self.eval(value)?;
                let v = coerce_value(raw, elem, loc)?;
                self.arrays[ix]
                    .write(self.fab, self.pid, &idx, value_bits(v))
                    .map_err(|e| dist(loc, e))?;
            }
            AssignKind::BlockCopy { dst, src } => {
                let d = self.array_ix[&dst];
                let s = self.array_ix[&src];
                self.arrays[d]
                    .block_copy_from(self.fab, self.pid, &self.arrays[s])
                    .map_err(|e| dist(loc, e))?;
            }
            AssignKind::Channel { decl, src, dst } => {
                let elem = self.prog.decl(decl).attrs.element;
                if self.pid == src as usize {
                    let raw = self.eval(value)?;
                    let v = coerce_value(raw, elem, loc)?;
                    self.fab.channel_send(self.pid, dst as usize, v)?;
                } else if self.pid == dst as usize {
                    let v = self.fab.channel_recv(self.pid, src as usize)?;
                    let v = coerce_value(v, elem, loc)?;
                    self.fab.one_sided_put(self.pid, decl.0 as usize, v)?;
                }
            }
        }
        Ok(())
    }

    fn eval(&mut self, expr: &Expr) -> Result<Value, CtxError> {
        match expr {
            Expr::IntLit { value, .. } => Ok(Value::Int(*value)),
            Expr::FloatLit { value, .. } => Ok(Value::Double(*value)),
            Expr::Binary {
                loc, op, lhs, rhs, ..
            } => {
                let a = self.eval(lhs)?;
                let b = self.eval(rhs)?;
                binary(*op, a, b, *loc)
            }
            Expr::Call {
                loc, name, args, ..
            } => match self.call(name, args, *loc)? {
                Some(v) => Ok(v),
                None => Err(fail(*loc, format!("`{name}` returns no value"))),
            },
            Expr::Access { id, lv } => self.access(*id, lv),
        }
    }

    fn access(&mut self, id: NodeId, lv: &LValue) -> Result<Value, CtxError> {
        let loc = lv.loc;
        let decl = self.prog.resolution(id);
        let info = self.prog.decl(decl);

        if let Some(prop) = lv.property {
            // Bounds query: the first index picks the process, the number of
            // indices picks the dimension, and any extra index values are
            // evaluated but do not matter.
            let ix = *self.array_ix.get(&decl).ok_or_else(|| {
                fail(loc, format!("`{}` has no distributed bounds", info.name))
            })?;
            let Some(first) = lv.indices.first() else {
                return Err(fail(loc, "bounds query needs a process index"));
            };
            let p = self.expect_int(first)?;
            for extra in &lv.indices[1..] {
                self.eval(extra)?;
            }
            if p < 0 || p as usize >= self.fab.procs() {
                return Err(fail(loc, format!("process index {p} out of range")));
            }
            let dim = lv.indices.len() - 1;
            let dims = self.arrays[ix].spec.shape.len();
            if dim >= dims {
                return Err(fail(
                    loc,
                    format!(
                        "bounds query names dimension {dim}, but `{}` has {dims}",
                        info.name
                    ),
                ));
            }
            let (lo, hi) = self.arrays[ix]
                .local_bounds(p as usize, dim)
                .map_err(|e| dist(loc, e))?;
            return Ok(Value::Int(match prop {
                BoundsProp::Low => lo,
                BoundsProp::High => hi,
            }));
        }

        match info.storage {
            Storage::Replicated => self.bindings[decl.0 as usize]
                .ok_or_else(|| fail(loc, format!("`{}` used before initialization", info.name))),
            Storage::SingleSlot { .. } => {
                Ok(self.fab.one_sided_get(self.pid, decl.0 as usize)?)
            }
            Storage::DistArray => {
                let ix = self.array_ix[&decl];
                let dims = self.arrays[ix].spec.shape.len();
                if lv.indices.len() != dims {
                    return Err(fail(
                        loc,
                        format!(
                            "`{}` needs {dims} indices, got {}",
                            info.name,
                            lv.indices.len()
                        ),
                    ));
                }
                let idx = self.eval_indices(&lv.indices)?;
                let bits = self.arrays[ix]
                    .read(self.fab, self.pid, &idx)
                    .map_err(|e| dist(loc, e))?;
                Ok(bits_value(info.attrs.element, bits))
            }
        }
    }

    fn eval_indices(&mut self, exprs: &[Expr]) -> Result<Vec<i64>, CtxError> {
        exprs.iter().map(|e| self.expect_int(e)).collect()
    }

    fn expect_int(&mut self, e: &Expr) -> Result<i64, CtxError> {
        match self.eval(e)? {
            Value::Int(i) => Ok(i),
            Value::Char(c) => Ok(c as i64),
            other => Err(fail(
                e.loc(),
                format!("expected an Int here, got {}", other.kind_name()),
            )),
        }
    }

    // ---- builtins ----

    fn call(&mut self, name: &str, args: &[Expr], loc: Loc) -> Result<Option<Value>, CtxError> {
        match name {
            "pid" => Ok(Some(Value::Int(self.pid as i64))),
            "zeroGrid" => {
                let ix = self.array_arg(name, args, loc)?;
                self.zero_grid(ix);
                Ok(None)
            }
            "fillBoundaryConditions" => {
                let ix = self.array_arg(name, args, loc)?;
                Ok(Some(Value::Double(self.fill_boundary(ix, loc)?)))
            }
            "computeResidue" => {
                let ix = self.array_arg(name, args, loc)?;
                Ok(Some(Value::Double(self.compute_residue(ix, loc)?)))
            }
            _ => Err(fail(loc, format!("unknown function `{name}`"))),
        }
    }

    fn array_arg(&self, name: &str, args: &[Expr], loc: Loc) -> Result<usize, CtxError> {
        if let [Expr::Access { id, lv }] = args {
            if lv.indices.is_empty() && lv.property.is_none() {
                if let Some(&ix) = self.array_ix.get(&self.prog.resolution(*id)) {
                    return Ok(ix);
                }
            }
        }
        Err(fail(
            loc,
            format!("`{name}` requires one distributed array argument"),
        ))
    }

    /// Zeroes every owned cell; touches no remote state, sends no messages.
    fn zero_grid(&self, ix: usize) {
        let arr = &self.arrays[ix];
        for &b in arr.owned_blocks(self.pid) {
            let st = arr.store(b);
            for i in 0..st.len() {
                st.store(i, 0);
            }
        }
    }

    /// Writes the Dirichlet planes, warms the halo caches, and returns the
    /// boundary norm: sqrt of the summed squares, over interior cells, of
    /// each cell's boundary-neighbor total.
    fn fill_boundary(&self, ix: usize, loc: Loc) -> Result<f64, CtxError> {
        let arr = &self.arrays[ix];
        let shape = &arr.spec.shape;
        let dims = shape.len();
        let elem = arr.spec.elem;

        // Low face then high face, dimension by dimension; later planes win
        // on shared edges, which never feed the interior stencil.
        for d in 0..dims {
            for (high, plane) in [(false, 0), (true, shape[d] - 1)] {
                let v = coerce_value(Value::Double(self.bc.value(d, high)), elem, loc)?;
                let bits = value_bits(v);
                for &b in arr.owned_blocks(self.pid) {
                    let g = &arr.geoms()[b];
                    if plane < g.lo[d] || plane >= g.hi[d] {
                        continue;
                    }
                    let ranges: Vec<(i64, i64)> = (0..dims)
                        .map(|e| {
                            if e == d {
                                (plane, plane + 1)
                            } else {
                                (g.lo[e], g.hi[e])
                            }
                        })
                        .collect();
                    for_each_cell(&ranges, |idx| {
                        arr.write(self.fab, self.pid, idx, bits)
                            .map_err(|e| dist(loc, e))
                    })?;
                }
            }
        }

        // Every process must finish writing before the halo warm-up reads
        // neighbor blocks directly.
        self.fab.barrier(self.pid)?;
        arr.setup_halo_refresh(self.fab, self.pid)
            .map_err(|e| dist(loc, e))?;

        let mut partial = 0.0;
        for &b in arr.owned_blocks(self.pid) {
            let g = &arr.geoms()[b];
            let ranges = interior_ranges(g, shape);
            let mut nidx = vec![0i64; dims];
            for_each_cell(&ranges, |idx| {
                let mut s = 0.0;
                for d in 0..dims {
                    for delta in [1i64, -1] {
                        let n = idx[d] + delta;
                        if n == 0 || n == shape[d] - 1 {
                            nidx.copy_from_slice(idx);
                            nidx[d] = n;
                            let bits = arr
                                .read(self.fab, self.pid, &nidx)
                                .map_err(|e| dist(loc, e))?;
                            s += value_f64(elem, bits);
                        }
                    }
                }
                partial += s * s;
                Ok(())
            })?;
        }

        let mut norm = self.fab.reduce_blocking(self.pid, partial)?.sqrt();
        if norm == 0.0 {
            // An all-zero boundary would make relative residuals divide by
            // zero; fall back to an absolute scale and record that we did.
            self.shared
                .norm_b_zero_fallback
                .store(true, Ordering::Relaxed);
            norm = 1.0;
        }
        if self.pid == 0 {
            *self.shared.norm_b.lock().unwrap() = norm;
        }
        Ok(norm)
    }

    /// Global residual norm of the current grid. Blocking modes reduce in
    /// lockstep; asynchronous modes contribute without waiting, and process 0
    /// reports the newest completed reduction (infinity until one exists).
    fn compute_residue(&mut self, ix: usize, loc: Loc) -> Result<f64, CtxError> {
        let iteration = self.residue_calls;
        self.residue_calls += 1;

        let arr = &self.arrays[ix];
        let shape = &arr.spec.shape;
        let dims = shape.len();
        let elem = arr.spec.elem;
        let blocking = !matches!(
            arr.spec.comm,
            CommMode::HaloAsyncSafe | CommMode::HaloAsyncRacy
        );

        if blocking {
            // The barrier doubles as a metric mark, so message deltas
            // attribute exactly to iterations.
            self.fab.barrier_mark(self.pid, Some(iteration))?;
        } else if self.pid == 0 {
            self.fab.mark(iteration);
        }

        let mut partial = 0.0;
        for &b in arr.owned_blocks(self.pid) {
            let g = &arr.geoms()[b];
            let ranges = interior_ranges(g, shape);
            let mut nidx = vec![0i64; dims];
            for_each_cell(&ranges, |idx| {
                let u = value_f64(
                    elem,
                    arr.read(self.fab, self.pid, idx).map_err(|e| dist(loc, e))?,
                );
                let mut r = 0.0;
                for d in 0..dims {
                    for delta in [1i64, -1] {
                        nidx.copy_from_slice(idx);
                        nidx[d] = idx[d] + delta;
                        r += value_f64(
                            elem,
                            arr.read(self.fab, self.pid, &nidx)
                                .map_err(|e| dist(loc, e))?,
                        );
                    }
                }
                r -= 2.0 * dims as f64 * u;
                partial += r * r;
                Ok(())
            })?;
        }

        let norm = if blocking {
            self.fab.reduce_blocking(self.pid, partial)?.sqrt()
        } else {
            self.fab.reduce_nonblocking(self.pid, partial)?;
            if self.pid == 0 {
                match self.fab.reduce_poll_newest(self.pid)? {
                    Some((_, total)) => total.sqrt(),
                    None => f64::INFINITY,
                }
            } else {
                f64::INFINITY
            }
        };

        if self.pid == 0 {
            let rel = norm / *self.shared.norm_b.lock().unwrap();
            if rel.is_finite() {
                self.shared.history.lock().unwrap().push((iteration, rel));
            }
        }
        Ok(norm)
    }
}

/// Per-dimension interior range of a block: its extent clipped away from the
/// global boundary planes.
fn interior_ranges(g: &crate::distarray::BlockGeom, shape: &[i64]) -> Vec<(i64, i64)> {
    (0..shape.len())
        .map(|e| (g.lo[e].max(1), g.hi[e].min(shape[e] - 1)))
        .collect()
}

/// Calls `f` for every index in the cartesian product of `ranges`,
/// last dimension fastest.
fn for_each_cell(
    ranges: &[(i64, i64)],
    mut f: impl FnMut(&[i64]) -> Result<(), CtxError>,
) -> Result<(), CtxError> {
    if ranges.iter().any(|&(lo, hi)| lo >= hi) {
        return Ok(());
    }
    let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    loop {
        f(&idx)?;
        let mut d = idx.len();
        loop {
            if d == 0 {
                return Ok(());
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < ranges[d].1 {
                break;
            }
            idx[d] = ranges[d].0;
        }
    }
}

fn binary(op: BinOp, a: Value, b: Value, loc: Loc) -> Result<Value, CtxError> {
    use BinOp::*;
    if let (Value::Bool(x), Value::Bool(y)) = (a, b) {
        return match op {
            Eq => Ok(Value::Bool(x == y)),
            Ne => Ok(Value::Bool(x != y)),
            _ => Err(fail(loc, format!("`{}` is not defined on Bool", op.symbol()))),
        };
    }
    // Char joins arithmetic as its code point; Int widens to Double on mix.
    let as_num = |v: Value| -> Result<Result<i64, f64>, CtxError> {
        match v {
            Value::Int(i) => Ok(Ok(i)),
            Value::Char(c) => Ok(Ok(c as i64)),
            Value::Double(d) => Ok(Err(d)),
            Value::Bool(_) => Err(fail(
                loc,
                format!("`{}` mixes Bool with a number", op.symbol()),
            )),
        }
    };
    match (as_num(a)?, as_num(b)?) {
        (Ok(x), Ok(y)) => Ok(match op {
            Add => Value::Int(x.wrapping_add(y)),
            Sub => Value::Int(x.wrapping_sub(y)),
            Mul => Value::Int(x.wrapping_mul(y)),
            Div => {
                if y == 0 {
                    return Err(fail(loc, "integer division by zero"));
                }
                Value::Int(x / y)
            }
            Lt => Value::Bool(x < y),
            Gt => Value::Bool(x > y),
            Le => Value::Bool(x <= y),
            Ge => Value::Bool(x >= y),
            Eq => Value::Bool(x == y),
            Ne => Value::Bool(x != y),
        }),
        (x, y) => {
            let widen = |t: Result<i64, f64>| match t {
                Ok(i) => i as f64,
                Err(d) => d,
            };
            let (x, y) = (widen(x), widen(y));
            Ok(match op {
                Add => Value::Double(x + y),
                Sub => Value::Double(x - y),
                Mul => Value::Double(x * y),
                Div => Value::Double(x / y),
                Lt => Value::Bool(x < y),
                Gt => Value::Bool(x > y),
                Le => Value::Bool(x <= y),
                Ge => Value::Bool(x >= y),
                Eq => Value::Bool(x == y),
                Ne => Value::Bool(x != y),
            })
        }
    }
}

fn coerce_value(v: Value, target: ElemKind, loc: Loc) -> Result<Value, CtxError> {
    use ElemKind::*;
    let out = match (v, target) {
        (Value::Int(i), Int) => Some(Value::Int(i)),
        (Value::Int(i), Double) => Some(Value::Double(i as f64)),
        (Value::Int(i), Char) => Some(Value::Char(i as u8)),
        (Value::Double(d), Double) => Some(Value::Double(d)),
        (Value::Char(c), Char) => Some(Value::Char(c)),
        (Value::Char(c), Int) => Some(Value::Int(c as i64)),
        (Value::Char(c), Double) => Some(Value::Double(c as f64)),
        (Value::Bool(b), Bool) => Some(Value::Bool(b)),
        _ => None,
    };
    out.ok_or_else(|| {
        fail(
            loc,
            format!("cannot store {} into {target}", v.kind_name()),
        )
    })
}

fn default_value(k: ElemKind) -> Value {
    match k {
        ElemKind::Int => Value::Int(0),
        ElemKind::Double => Value::Double(0.0),
        ElemKind::Bool => Value::Bool(false),
        ElemKind::Char => Value::Char(0),
    }
}

fn value_bits(v: Value) -> u64 {
    match v {
        Value::Int(i) => i as u64,
        Value::Double(d) => d.to_bits(),
        Value::Bool(b) => b as u64,
        Value::Char(c) => c as u64,
    }
}

fn bits_value(k: ElemKind, bits: u64) -> Value {
    match k {
        ElemKind::Int => Value::Int(bits as i64),
        ElemKind::Double => Value::Double(f64::from_bits(bits)),
        ElemKind::Bool => Value::Bool(bits != 0),
        ElemKind::Char => Value::Char(bits as u8),
    }
}

fn value_f64(k: ElemKind, bits: u64) -> f64 {
    match bits_value(k, bits) {
        Value::Double(d) => d,
        Value::Int(i) => i as f64,
        Value::Char(c) => c as f64,
        Value::Bool(b) => u8::from(b) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::MsgKind;
    use crate::frontend::parse;
    use crate::typesys::check;

    fn checked(src: &str) -> CheckedProgram {
        let sp = crate::frontend::SourceProgram::inline(src);
        let prog = parse(&sp).expect("parses");
        check(prog, &sp.origin).expect("typechecks")
    }

    fn run(src: &str, procs: usize) -> RunResult {
        run_program(
            &checked(src),
            FabricConfig::deterministic(procs, 7),
            &BoundarySpec::default(),
        )
        .expect("runs")
    }

    fn scalar(result: &RunResult, name: &str) -> Value {
        result
            .scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .expect("scalar exists")
    }

    #[test]
    fn single_placed_copy_uses_one_message() {
        let res = run(
            "var a : Int :: allocated :: single[on[1]];\n\
             var b : Int :: allocated :: single[on[3]] := 10;\n\
             a := b;",
            4,
        );
        assert_eq!(scalar(&res, "a"), Value::Int(10));
        assert_eq!(scalar(&res, "b"), Value::Int(10));
        assert_eq!(res.metrics.kind(MsgKind::OneSided).messages, 1);
        assert_eq!(res.metrics.total_messages(), 1);
    }

    #[test]
    fn channel_copy_replaces_one_sided_transfer() {
        let res = run(
            "var a : Int :: allocated :: single[on[1]];\n\
             var b : Int :: allocated :: single[on[3]] := 23;\n\
             (a :: channel[3, 1]) := b;",
            4,
        );
        assert_eq!(scalar(&res, "a"), Value::Int(23));
        assert_eq!(res.metrics.kind(MsgKind::Channel).messages, 1);
        assert_eq!(res.metrics.kind(MsgKind::OneSided).messages, 0);
    }

    #[test]
    fn replicated_work_is_message_free() {
        let res = run(
            "var s := 0;\n\
             for i from 0 to 5 { s := s + i; };\n\
             var d := 1.5 * 4.0;\n\
             var half := 3 / 2;",
            4,
        );
        assert_eq!(res.metrics.total_messages(), 0);
        assert!(res.scalars.is_empty());
    }

    #[test]
    fn owner_executes_sees_only_owner_values() {
        // pid() differs per process; only the owner's evaluation lands.
        let res = run(
            "var a : Int :: allocated :: single[on[2]];\n\
             a := pid() * 10;",
            4,
        );
        assert_eq!(scalar(&res, "a"), Value::Int(20));
    }

    #[test]
    fn zero_grid_clears_owned_cells_without_messages() {
        let res = run(
            "var d : array[Double, 4, 4] :: allocated[grid[2, 1] :: single[evendist]];\n\
             if (pid() < 1) { d[1][1] := 9.5; };\n\
             zeroGrid(d);",
            2,
        );
        assert!(res.arrays[0].data.iter().all(|&v| v == 0.0));
        assert_eq!(res.metrics.total_messages(), 0);
    }

    #[test]
    fn boundary_norm_is_exact_on_unit_cube() {
        // 3x3x3 with a single unit face: one interior cell whose boundary
        // neighbors sum to 1, so the norm is exactly 1.
        let res = run(
            "var d : array[Double, 3, 3, 3] :: allocated[grid[1, 1, 1] :: single[evendist]];\n\
             zeroGrid(d);\n\
             var nb := fillBoundaryConditions(d);\n\
             var check : Double :: allocated :: single[on[0]];\n\
             check := nb;",
            1,
        );
        assert_eq!(scalar(&res, "check"), Value::Double(1.0));
        assert!(!res.norm_b_zero_fallback);
    }

    #[test]
    fn zero_boundary_falls_back_to_absolute_scale() {
        let res = run_program(
            &checked(
                "var d : array[Double, 3, 3, 3] :: allocated[grid[1, 1, 1] :: single[evendist]];\n\
                 zeroGrid(d);\n\
                 var nb := fillBoundaryConditions(d);\n\
                 var check : Double :: allocated :: single[on[0]];\n\
                 check := nb;",
            ),
            FabricConfig::deterministic(1, 7),
            &BoundarySpec { faces: vec![] },
        )
        .expect("runs");
        assert_eq!(scalar(&res, "check"), Value::Double(1.0));
        assert!(res.norm_b_zero_fallback);
    }

    fn jacobi_unit_cube(mode: &str) -> String {
        format!(
            "var data : array[Double, 3, 3, 3] :: allocated[grid[{mode}1, 1, 1] :: single[evendist]];\n\
             var new_data : array[Double, 3, 3, 3] :: allocated[grid[{mode}1, 1, 1] :: single[evendist]];\n\
             zeroGrid(data);\n\
             zeroGrid(new_data);\n\
             var norm_b := fillBoundaryConditions(data);\n\
             var norm_b2 := fillBoundaryConditions(new_data);\n\
             for i from 0 to 100 {{\n\
                norm_r := computeResidue(data);\n\
                norm_r := norm_r / norm_b;\n\
                if (norm_r < 0.0000000001) break;\n\
                for i from data[pid()].low to data[pid()].high {{\n\
                   for j from data[pid()][i].low to data[pid()][i].high {{\n\
                      for k from data[pid()][i][j].low to data[pid()][i][j].high {{\n\
                         new_data[i][j][k] := (data[i+1][j][k] + data[i-1][j][k] +\n\
                            data[i][j+1][k] + data[i][j-1][k] + data[i][j][k+1] +\n\
                            data[i][j][k-1]) * 1.0 / 6.0;\n\
                      }};\n\
                   }};\n\
                }};\n\
                data := new_data;\n\
                sync data;\n\
             }};"
        )
    }

    #[test]
    fn unit_cube_converges_after_one_update_in_every_mode() {
        for mode in ["", "halo[1], ", "halo[1] :: async, ", "halo[1] :: async :: racy, "] {
            let res = run(&jacobi_unit_cube(mode), 1);
            assert!(res.converged, "mode {mode:?} did not converge");
            assert_eq!(res.iterations, 1, "mode {mode:?}");
            assert_eq!(res.residual_history[0], (0, 1.0), "mode {mode:?}");
            assert_eq!(res.residual_history[1], (1, 0.0), "mode {mode:?}");
        }
    }

    #[test]
    fn bounds_queries_count_interior_cells() {
        // 16x8x8 split 2x1x1: process 0 interior is 7*6*6 = 252 cells.
        let res = run(
            "var d : array[Double, 16, 8, 8] :: allocated[grid[2, 1, 1] :: single[evendist]];\n\
             var n : Int :: allocated :: single[on[0]];\n\
             n := 0;\n\
             for i from d[pid()].low to d[pid()].high {\n\
                for j from d[pid()][i].low to d[pid()][i].high {\n\
                   for k from d[pid()][i][j].low to d[pid()][i][j].high {\n\
                      n := n + 1;\n\
                   };\n\
                };\n\
             };",
            2,
        );
        assert_eq!(scalar(&res, "n"), Value::Int(252));
    }

    #[test]
    fn stop_token_reaches_other_processes_at_sync() {
        let res = run(
            "var d : array[Double, 8, 8] :: allocated[grid[halo[1] :: async, 2, 1] :: single[evendist]];\n\
             zeroGrid(d);\n\
             for i from 0 to 1000 {\n\
                if (pid() < 1) break;\n\
                sync d;\n\
             };",
            2,
        );
        assert!(res.converged);
        // The only reduction-class traffic is the stop token itself.
        assert_eq!(res.metrics.kind(MsgKind::ReductionMsg).messages, 1);
    }

    #[test]
    fn lopsided_collective_reports_deadlock() {
        let err = run_program(
            &checked(
                "var d : array[Double, 6, 6] :: allocated[grid[2, 1] :: single[evendist]];\n\
                 zeroGrid(d);\n\
                 if (pid() < 1) { var r := computeResidue(d); };",
            ),
            FabricConfig::deterministic(2, 7),
            &BoundarySpec::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RunFailure::Deadlock(_)), "got {err:?}");
    }

    #[test]
    fn integer_division_by_zero_is_a_runtime_error() {
        let err = run_program(
            &checked("var z := 0;\nvar x := 1 / z;"),
            FabricConfig::deterministic(1, 7),
            &BoundarySpec::default(),
        )
        .unwrap_err();
        let RunFailure::Runtime(errors) = err else {
            panic!("expected runtime failure, got {err:?}");
        };
        assert_eq!(errors.len(), 1);
        assert!(errors[0].message.contains("division by zero"));
        assert_eq!(errors[0].loc.line, 2);
    }

    #[test]
    fn sync_on_plain_arrays_is_a_no_op() {
        let res = run(
            "var d : array[Double, 4, 4] :: allocated[grid[2, 1] :: single[evendist]];\n\
             zeroGrid(d);\n\
             sync d;",
            2,
        );
        assert_eq!(res.metrics.total_messages(), 0);
    }

    #[test]
    fn char_and_double_coercions_follow_assignment_rules() {
        let res = run(
            "var c : Char := 65;\n\
             var i : Int :: allocated :: single[on[0]];\n\
             i := c + 1;\n\
             var d : Double :: allocated :: single[on[0]];\n\
             d := 3;",
            1,
        );
        assert_eq!(scalar(&res, "i"), Value::Int(66));
        assert_eq!(scalar(&res, "d"), Value::Double(3.0));
    }
}
