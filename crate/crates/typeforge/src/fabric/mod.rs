//! Simulated interconnect for P virtual processes.
//!
//! Every process is a thread; all communication (one-sided window access,
//! rendezvous channels, barriers, reductions, halo faces, stop tokens) flows
//! through this module and is counted. In deterministic mode a scheduling
//! baton serializes execution: exactly one context runs at a time and the
//! next runner is drawn from a seeded generator, making runs a pure function
//! of (program, P, seed). In free-running mode contexts execute on real
//! threads concurrently.

pub mod metrics;

pub use metrics::{KindCounts, MetricsSnapshot, MsgKind, PerProcess, TraceEvent};

use crate::typesys::ElemKind;
use crate::value::Value;
use metrics::Metrics;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use thiserror::Error;

pub type Pid = usize;

/// Free-running contexts proceed at their own pace, but one more than this
/// many fabric operations ahead of the slowest runnable context waits for it
/// to catch up. Without the window, oversubscribed OS scheduling can starve a
/// thread for whole quanta at a time, producing progress skews (and halo
/// staleness) far beyond anything a rate-matched machine shows.
const FREE_RUN_WINDOW: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    /// Draw the next runner uniformly from the seeded generator.
    Seeded,
    /// Always prefer one pid when it is runnable (scripted schedules for
    /// staleness tests); others are drawn from the generator.
    Favor(Pid),
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub procs: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub policy: SchedulePolicy,
    pub debug_tags: bool,
    pub collect_trace: bool,
}

impl FabricConfig {
    pub fn deterministic(procs: usize, seed: u64) -> Self {
        FabricConfig {
            procs,
            seed,
            deterministic: true,
            policy: SchedulePolicy::Seeded,
            debug_tags: false,
            collect_trace: false,
        }
    }

    pub fn free_running(procs: usize, seed: u64) -> Self {
        FabricConfig {
            deterministic: false,
            ..Self::deterministic(procs, seed)
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FabricError {
    #[error("process count must be ≥ 1")]
    NoProcesses,
    #[error("process {0} out of range (P={1})")]
    InvalidPid(usize, usize),
    #[error("unknown window slot `{0}`")]
    UnknownSlot(String),
    #[error("window slot `{0}` is read-only")]
    ReadOnlySlot(String),
    #[error("channel endpoints must differ (pid {0})")]
    SelfChannel(usize),
    #[error("reduction {0} called with mismatched modes")]
    MismatchedMode(u64),
    #[error("deadlock detected: {0}")]
    DeadlockDetected(String),
    #[error("run aborted")]
    Aborted,
}

/// What a blocked context is waiting for.
#[derive(Debug, Clone, PartialEq)]
enum Wait {
    Barrier { gen: u64 },
    ChanSend { dst: Pid },
    ChanRecv { src: Pid },
    Reduce { ordinal: u64 },
    Face { key: FaceKey, want: i64 },
}

impl fmt::Display for Wait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Wait::Barrier { .. } => write!(f, "barrier"),
            Wait::ChanSend { dst } => write!(f, "channel send to {dst}"),
            Wait::ChanRecv { src } => write!(f, "channel receive from {src}"),
            Wait::Reduce { ordinal } => write!(f, "reduction {ordinal}"),
            Wait::Face { key, want } => {
                write!(f, "halo face {}/{}{} version {want}", key.array, key.axis, key.dir())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CtxState {
    Idle,
    Runnable,
    Blocked(Wait),
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
enum Poison {
    Deadlock(String),
    Abort,
}

impl Poison {
    fn to_error(&self) -> FabricError {
        match self {
            Poison::Deadlock(m) => FabricError::DeadlockDetected(m.clone()),
            Poison::Abort => FabricError::Aborted,
        }
    }
}

#[derive(Debug)]
struct SlotState {
    name: String,
    owner: Pid,
    value: Value,
    readonly: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum ChanCell {
    Empty,
    SenderValue(Value),
    Delivered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RedMode {
    Blocking,
    NonBlocking,
}

#[derive(Debug)]
struct RedInstance {
    mode: RedMode,
    contrib: Vec<Option<f64>>,
    result: Option<f64>,
}

/// One direction of one block face of one array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaceKey {
    pub array: u32,
    pub block: u32,
    pub axis: u8,
    pub positive: bool,
}

impl FaceKey {
    pub fn dir(&self) -> char {
        if self.positive {
            '+'
        } else {
            '-'
        }
    }
}

#[derive(Debug)]
struct FaceSlot {
    from: Pid,
    to: Pid,
    version: i64,
    data: Vec<u64>,
    bytes_per_elem: u64,
    tag: String,
}

/// A locally owned dense block, remotely readable through the window.
#[derive(Debug)]
pub struct BlockStore {
    pub owner: Pid,
    pub kind: ElemKind,
    pub name: String,
    data: Vec<AtomicU64>,
}

impl BlockStore {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn load(&self, idx: usize) -> u64 {
        self.data[idx].load(Ordering::Acquire)
    }

    pub fn store(&self, idx: usize, bits: u64) {
        self.data[idx].store(bits, Ordering::Release);
    }
}

/// Shared single-buffered face for racy halo mode: element-granular atomic
/// publication, no version fencing of the payload.
#[derive(Debug)]
pub struct RacyFace {
    pub elems: Vec<AtomicU64>,
    pub version: AtomicI64,
}

/// Per-element history of published bit patterns, for the out-of-thin-air
/// soundness check.
#[derive(Debug, Default)]
struct TagStore {
    history: Mutex<HashMap<FaceKey, Vec<HashSet<u64>>>>,
    violations: AtomicU64,
}

struct Inner {
    states: Vec<CtxState>,
    started: usize,
    /// Fabric operations performed per context; drives the free-running
    /// progress window.
    ops: Vec<u64>,
    /// Contexts currently waiting for the progress window to open.
    throttled: usize,
    current: Option<Pid>,
    rng: ChaCha8Rng,
    poison: Option<Poison>,
    slots: HashMap<usize, SlotState>,
    chans: HashMap<(Pid, Pid), ChanCell>,
    barrier_gen: u64,
    barrier_count: usize,
    red_instances: Vec<RedInstance>,
    red_calls: Vec<u64>,
    faces: HashMap<FaceKey, FaceSlot>,
    mail: Vec<VecDeque<i64>>,
    metrics: Metrics,
    trace: Vec<TraceEvent>,
    seq: u64,
}

pub struct Fabric {
    config: FabricConfig,
    inner: Mutex<Inner>,
    cv: Condvar,
    blocks: Vec<Arc<BlockStore>>,
    racy_faces: HashMap<FaceKey, Arc<RacyFace>>,
    tags: Option<TagStore>,
}

pub type BlockId = usize;

impl Fabric {
    pub fn new(config: FabricConfig) -> Result<Fabric, FabricError> {
        if config.procs < 1 {
            return Err(FabricError::NoProcesses);
        }
        let p = config.procs;
        let inner = Inner {
            states: vec![CtxState::Idle; p],
            started: 0,
            ops: vec![0; p],
            throttled: 0,
            current: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            poison: None,
            slots: HashMap::new(),
            chans: HashMap::new(),
            barrier_gen: 0,
            barrier_count: 0,
            red_instances: Vec::new(),
            red_calls: vec![0; p],
            faces: HashMap::new(),
            mail: vec![VecDeque::new(); p],
            metrics: Metrics::new(p),
            trace: Vec::new(),
            seq: 0,
        };
        let tags = config.debug_tags.then(TagStore::default);
        Ok(Fabric {
            config,
            inner: Mutex::new(inner),
            cv: Condvar::new(),
            blocks: Vec::new(),
            racy_faces: HashMap::new(),
            tags,
        })
    }

    pub fn procs(&self) -> usize {
        self.config.procs
    }

    pub fn is_deterministic(&self) -> bool {
        self.config.deterministic
    }

    pub fn debug_tags_enabled(&self) -> bool {
        self.tags.is_some()
    }

    fn check_pid(&self, pid: Pid) -> Result<(), FabricError> {
        if pid >= self.config.procs {
            return Err(FabricError::InvalidPid(pid, self.config.procs));
        }
        Ok(())
    }

    // ---- registration (before contexts start) ----

    pub fn define_scalar_slot(
        &mut self,
        slot: usize,
        name: &str,
        owner: Pid,
        init: Value,
        readonly: bool,
    ) -> Result<(), FabricError> {
        self.check_pid(owner)?;
        let g = self.inner.get_mut().unwrap();
        g.slots.insert(
            slot,
            SlotState {
                name: name.to_string(),
                owner,
                value: init,
                readonly,
            },
        );
        Ok(())
    }

    pub fn register_block(
        &mut self,
        owner: Pid,
        len: usize,
        kind: ElemKind,
        name: &str,
    ) -> Result<BlockId, FabricError> {
        self.check_pid(owner)?;
        let id = self.blocks.len();
        self.blocks.push(Arc::new(BlockStore {
            owner,
            kind,
            name: name.to_string(),
            data: (0..len).map(|_| AtomicU64::new(0)).collect(),
        }));
        Ok(id)
    }

    pub fn block(&self, id: BlockId) -> Arc<BlockStore> {
        Arc::clone(&self.blocks[id])
    }

    pub fn register_face(
        &mut self,
        key: FaceKey,
        from: Pid,
        to: Pid,
        len: usize,
        bytes_per_elem: u64,
        tag: &str,
        racy: bool,
    ) -> Result<(), FabricError> {
        self.check_pid(from)?;
        self.check_pid(to)?;
        let g = self.inner.get_mut().unwrap();
        g.faces.insert(
            key,
            FaceSlot {
                from,
                to,
                version: -1,
                data: vec![0; len],
                bytes_per_elem,
                tag: tag.to_string(),
            },
        );
        if racy {
            self.racy_faces.insert(
                key,
                Arc::new(RacyFace {
                    elems: (0..len).map(|_| AtomicU64::new(0)).collect(),
                    version: AtomicI64::new(-1),
                }),
            );
        }
        if let Some(tags) = &self.tags {
            tags.history
                .lock()
                .unwrap()
                .insert(key, vec![HashSet::new(); len]);
        }
        Ok(())
    }

    pub fn racy_face(&self, key: FaceKey) -> Arc<RacyFace> {
        Arc::clone(&self.racy_faces[&key])
    }

    // ---- scheduling ----

    fn runnable_pids(g: &Inner) -> Vec<Pid> {
        (0..g.states.len())
            .filter(|&p| g.states[p] == CtxState::Runnable)
            .collect()
    }

    fn pass_baton(&self, g: &mut Inner) {
        if !self.config.deterministic {
            return;
        }
        let runnable = Self::runnable_pids(g);
        if runnable.is_empty() {
            g.current = None;
            Self::detect_deadlock(g);
        } else {
            let pick = match self.config.policy {
                SchedulePolicy::Favor(p) if runnable.contains(&p) => p,
                _ => runnable[g.rng.gen_range(0..runnable.len())],
            };
            g.current = Some(pick);
        }
        self.cv.notify_all();
    }

    /// All non-finished contexts blocked with nothing in flight: poison.
    fn detect_deadlock(g: &mut Inner) {
        let idle = g.states.iter().any(|s| matches!(s, CtxState::Idle));
        let runnable = g.states.iter().any(|s| matches!(s, CtxState::Runnable));
        let blocked: Vec<(usize, &Wait)> = g
            .states
            .iter()
            .enumerate()
            .filter_map(|(p, s)| match s {
                CtxState::Blocked(w) => Some((p, w)),
                _ => None,
            })
            .collect();
        if idle || runnable || blocked.is_empty() || g.poison.is_some() {
            return;
        }
        let desc = blocked
            .iter()
            .map(|(p, w)| format!("pid {p} waiting on {w}"))
            .collect::<Vec<_>>()
            .join("; ");
        g.poison = Some(Poison::Deadlock(desc));
    }

    /// Re-evaluates every blocked context's wake condition.
    fn refresh(g: &mut Inner) {
        for p in 0..g.states.len() {
            let ready = match &g.states[p] {
                CtxState::Blocked(w) => match w {
                    Wait::Barrier { gen } => g.barrier_gen > *gen,
                    Wait::ChanSend { dst } => {
                        g.chans.get(&(p, *dst)) == Some(&ChanCell::Delivered)
                    }
                    Wait::ChanRecv { src } => matches!(
                        g.chans.get(&(*src, p)),
                        Some(ChanCell::SenderValue(_))
                    ),
                    Wait::Reduce { ordinal } => {
                        g.red_instances[*ordinal as usize].result.is_some()
                    }
                    Wait::Face { key, want } => g.faces[key].version >= *want,
                },
                _ => false,
            };
            if ready {
                g.states[p] = CtxState::Runnable;
            }
        }
    }

    /// Blocks the caller until its wake condition holds (and, in
    /// deterministic mode, the baton returns).
    fn block_on<'a>(
        &self,
        mut g: MutexGuard<'a, Inner>,
        me: Pid,
        wait: Wait,
    ) -> Result<MutexGuard<'a, Inner>, FabricError> {
        g.states[me] = CtxState::Blocked(wait);
        // The condition may already hold (e.g. the value arrived before we
        // marked ourselves blocked); the self-refresh avoids a lost wakeup.
        Self::refresh(&mut g);
        if g.states[me] != CtxState::Runnable && self.config.deterministic {
            self.pass_baton(&mut g);
        }
        if !self.config.deterministic {
            // Unconditional: the refresh may have woken someone even when
            // this context gets to continue.
            Self::detect_deadlock(&mut g);
            self.cv.notify_all();
        }
        loop {
            if let Some(p) = &g.poison {
                return Err(p.to_error());
            }
            let mine = g.states[me] == CtxState::Runnable
                && (!self.config.deterministic || g.current == Some(me));
            if mine {
                return Ok(g);
            }
            g = self.cv.wait(g).unwrap();
        }
    }

    /// Smallest op count among contexts that can still advance on their own.
    /// Blocked and finished contexts are excluded so the progress window
    /// never makes anyone wait on a context that is itself waiting.
    fn min_runnable_ops(g: &Inner) -> u64 {
        g.states
            .iter()
            .zip(&g.ops)
            .filter(|(s, _)| matches!(s, CtxState::Idle | CtxState::Runnable))
            .map(|(_, o)| *o)
            .min()
            .unwrap_or(u64::MAX)
    }

    /// Cooperative yield at a fabric operation. Deterministic mode hands the
    /// baton to the next scheduled context and waits for it to come back.
    /// Free-running mode counts the operation against the progress window
    /// and waits while too far ahead; the slowest runnable context is never
    /// throttled, so the window cannot deadlock.
    fn yield_baton(&self, mut g: MutexGuard<'_, Inner>, me: Pid) -> Result<(), FabricError> {
        if !self.config.deterministic {
            g.ops[me] += 1;
            // The operation that led here may have refreshed other contexts
            // to Runnable; they sleep on this condvar, so wake the world
            // before possibly going to sleep ourselves.
            self.cv.notify_all();
            loop {
                if let Some(p) = &g.poison {
                    return Err(p.to_error());
                }
                if g.ops[me] <= Self::min_runnable_ops(&g) + FREE_RUN_WINDOW {
                    break;
                }
                g.throttled += 1;
                g = self.cv.wait(g).unwrap();
                g.throttled -= 1;
            }
            drop(g);
            std::thread::yield_now();
            return Ok(());
        }
        self.pass_baton(&mut g);
        loop {
            if let Some(p) = &g.poison {
                return Err(p.to_error());
            }
            if g.current == Some(me) {
                return Ok(());
            }
            g = self.cv.wait(g).unwrap();
        }
    }

    pub fn context_started(&self, me: Pid) {
        let mut g = self.inner.lock().unwrap();
        g.states[me] = CtxState::Runnable;
        g.started += 1;
        if !self.config.deterministic {
            self.cv.notify_all();
            return;
        }
        if g.started == self.config.procs {
            self.pass_baton(&mut g);
        }
        while g.poison.is_none() && g.current != Some(me) {
            g = self.cv.wait(g).unwrap();
        }
    }

    pub fn context_finished(&self, me: Pid) {
        let mut g = self.inner.lock().unwrap();
        g.states[me] = CtxState::Finished;
        if self.config.deterministic {
            if g.current == Some(me) {
                self.pass_baton(&mut g);
            }
        } else {
            Self::detect_deadlock(&mut g);
        }
        self.cv.notify_all();
    }

    /// Poisons the fabric so every blocked context exits with `Aborted`;
    /// used when one context hits a runtime error.
    pub fn abort(&self) {
        let mut g = self.inner.lock().unwrap();
        if g.poison.is_none() {
            g.poison = Some(Poison::Abort);
        }
        self.cv.notify_all();
    }

    /// Runs one closure per process on scoped threads.
    pub fn run_contexts<T, F>(&self, f: F) -> Vec<T>
    where
        F: Fn(Pid) -> T + Sync,
        T: Send,
    {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.config.procs)
                .map(|p| {
                    let f = &f;
                    s.spawn(move || {
                        self.context_started(p);
                        let out = f(p);
                        self.context_finished(p);
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    // ---- message accounting ----

    fn count(
        &self,
        g: &mut Inner,
        kind: MsgKind,
        src: Pid,
        dst: Pid,
        bytes: u64,
        tag: &str,
    ) {
        g.metrics.count(kind, src, dst, bytes);
        if self.config.collect_trace {
            let seq = g.seq;
            g.trace.push(TraceEvent {
                seq,
                src,
                dst,
                kind,
                bytes,
                tag: tag.to_string(),
            });
        }
        g.seq += 1;
    }

    // ---- one-sided window ----

    pub fn one_sided_get(&self, caller: Pid, slot: usize) -> Result<Value, FabricError> {
        self.check_pid(caller)?;
        let mut g = self.inner.lock().unwrap();
        let (v, owner, tag) = match g.slots.get(&slot) {
            Some(s) => (s.value, s.owner, format!("get:{}", s.name)),
            None => return Err(FabricError::UnknownSlot(format!("#{slot}"))),
        };
        if caller != owner {
            self.count(&mut g, MsgKind::OneSided, owner, caller, v.byte_size(), &tag);
        }
        self.yield_baton(g, caller)?;
        Ok(v)
    }

    pub fn one_sided_put(&self, caller: Pid, slot: usize, v: Value) -> Result<(), FabricError> {
        self.put_impl(caller, slot, v, false)
    }

    /// Declaration-time initialization: allowed even on read-only slots.
    pub fn slot_init(&self, caller: Pid, slot: usize, v: Value) -> Result<(), FabricError> {
        self.put_impl(caller, slot, v, true)
    }

    fn put_impl(
        &self,
        caller: Pid,
        slot: usize,
        v: Value,
        init: bool,
    ) -> Result<(), FabricError> {
        self.check_pid(caller)?;
        let mut g = self.inner.lock().unwrap();
        let (owner, tag) = match g.slots.get_mut(&slot) {
            Some(s) => {
                if s.readonly && !init {
                    return Err(FabricError::ReadOnlySlot(s.name.clone()));
                }
                s.value = v;
                (s.owner, format!("put:{}", s.name))
            }
            None => return Err(FabricError::UnknownSlot(format!("#{slot}"))),
        };
        if caller != owner {
            self.count(&mut g, MsgKind::OneSided, caller, owner, v.byte_size(), &tag);
        }
        self.yield_baton(g, caller)?;
        Ok(())
    }

    pub fn one_sided_get_block(
        &self,
        caller: Pid,
        block: BlockId,
        idx: usize,
    ) -> Result<u64, FabricError> {
        self.check_pid(caller)?;
        let b = &self.blocks[block];
        let mut g = self.inner.lock().unwrap();
        let bits = b.load(idx);
        if caller != b.owner {
            let tag = format!("get:{}", b.name);
            self.count(
                &mut g,
                MsgKind::OneSided,
                b.owner,
                caller,
                b.kind.byte_size(),
                &tag,
            );
        }
        self.yield_baton(g, caller)?;
        Ok(bits)
    }

    pub fn one_sided_put_block(
        &self,
        caller: Pid,
        block: BlockId,
        idx: usize,
        bits: u64,
    ) -> Result<(), FabricError> {
        self.check_pid(caller)?;
        let b = &self.blocks[block];
        let mut g = self.inner.lock().unwrap();
        b.store(idx, bits);
        if caller != b.owner {
            let tag = format!("put:{}", b.name);
            self.count(
                &mut g,
                MsgKind::OneSided,
                caller,
                b.owner,
                b.kind.byte_size(),
                &tag,
            );
        }
        self.yield_baton(g, caller)?;
        Ok(())
    }

    // ---- rendezvous channels ----

    pub fn channel_send(&self, me: Pid, dst: Pid, v: Value) -> Result<(), FabricError> {
        self.check_pid(me)?;
        self.check_pid(dst)?;
        if me == dst {
            return Err(FabricError::SelfChannel(me));
        }
        let mut g = self.inner.lock().unwrap();
        let cell = g.chans.entry((me, dst)).or_insert(ChanCell::Empty);
        debug_assert_eq!(*cell, ChanCell::Empty);
        *cell = ChanCell::SenderValue(v);
        Self::refresh(&mut g);
        let mut g = self.block_on(g, me, Wait::ChanSend { dst })?;
        // Receiver took the value; reset for the next transfer on this pair.
        g.chans.insert((me, dst), ChanCell::Empty);
        self.yield_baton(g, me)?;
        Ok(())
    }

    pub fn channel_recv(&self, me: Pid, src: Pid) -> Result<Value, FabricError> {
        self.check_pid(me)?;
        self.check_pid(src)?;
        if me == src {
            return Err(FabricError::SelfChannel(me));
        }
        let mut g = self.inner.lock().unwrap();
        let cell = g.chans.entry((src, me)).or_insert(ChanCell::Empty);
        if !matches!(*cell, ChanCell::SenderValue(_)) {
            // Empty, or still Delivered from the previous round trip.
            g = self.block_on(g, me, Wait::ChanRecv { src })?;
        }
        let v = match g.chans.get_mut(&(src, me)) {
            Some(ChanCell::SenderValue(v)) => *v,
            other => unreachable!("woke receiver without a value: {other:?}"),
        };
        g.chans.insert((src, me), ChanCell::Delivered);
        self.count(&mut g, MsgKind::Channel, src, me, v.byte_size(), "chan");
        Self::refresh(&mut g);
        self.yield_baton(g, me)?;
        Ok(v)
    }

    // ---- barrier ----

    pub fn barrier(&self, me: Pid) -> Result<(), FabricError> {
        self.barrier_mark(me, None)
    }

    /// Barrier that, at the instant it completes, records a metric mark —
    /// an exact cut point for attributing messages to iterations.
    pub fn barrier_mark(&self, me: Pid, mark: Option<u64>) -> Result<(), FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        g.barrier_count += 1;
        if g.barrier_count == self.config.procs {
            g.barrier_count = 0;
            g.barrier_gen += 1;
            if let Some(index) = mark {
                g.metrics.mark(index);
            }
            Self::refresh(&mut g);
            self.yield_baton(g, me)?;
        } else {
            let gen = g.barrier_gen;
            drop(self.block_on(g, me, Wait::Barrier { gen })?);
        }
        Ok(())
    }

    // ---- reductions ----

    fn red_instance<'a>(
        g: &'a mut Inner,
        ordinal: u64,
        mode: RedMode,
        procs: usize,
    ) -> Result<&'a mut RedInstance, FabricError> {
        let ix = ordinal as usize;
        while g.red_instances.len() <= ix {
            g.red_instances.push(RedInstance {
                mode,
                contrib: vec![None; procs],
                result: None,
            });
        }
        let inst = &mut g.red_instances[ix];
        if inst.contrib.iter().all(|c| c.is_none()) {
            inst.mode = mode; // first contributor fixes the mode
        }
        if inst.mode != mode {
            return Err(FabricError::MismatchedMode(ordinal));
        }
        Ok(inst)
    }

    fn contribute(
        &self,
        g: &mut Inner,
        me: Pid,
        v: f64,
        mode: RedMode,
    ) -> Result<(u64, bool), FabricError> {
        let ordinal = g.red_calls[me];
        g.red_calls[me] += 1;
        let procs = self.config.procs;
        let inst = Self::red_instance(g, ordinal, mode, procs)?;
        inst.contrib[me] = Some(v);
        let complete = inst.contrib.iter().all(|c| c.is_some());
        if complete {
            // Deterministic pid-order summation.
            inst.result = Some(inst.contrib.iter().map(|c| c.unwrap()).sum());
        }
        if me != 0 {
            let tag = format!("red:{ordinal}");
            self.count(g, MsgKind::ReductionMsg, me, 0, 8, &tag);
        }
        Ok((ordinal, complete))
    }

    pub fn reduce_blocking(&self, me: Pid, v: f64) -> Result<f64, FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        let (ordinal, complete) = self.contribute(&mut g, me, v, RedMode::Blocking)?;
        let g = if complete {
            // Root broadcast to everyone else.
            for p in 1..self.config.procs {
                let tag = format!("red:{ordinal}");
                self.count(&mut g, MsgKind::ReductionMsg, 0, p, 8, &tag);
            }
            Self::refresh(&mut g);
            g
        } else {
            self.block_on(g, me, Wait::Reduce { ordinal })?
        };
        let sum = g.red_instances[ordinal as usize].result.unwrap();
        self.yield_baton(g, me)?;
        Ok(sum)
    }

    /// Non-blocking contribution; the returned handle can be polled. No
    /// broadcast: only polls observe the sum.
    pub fn reduce_nonblocking(&self, me: Pid, v: f64) -> Result<u64, FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        // Nobody blocks on a non-blocking instance, so no refresh is needed.
        let (ordinal, _) = self.contribute(&mut g, me, v, RedMode::NonBlocking)?;
        self.yield_baton(g, me)?;
        Ok(ordinal)
    }

    pub fn reduce_poll(&self, me: Pid, handle: u64) -> Result<Option<f64>, FabricError> {
        self.check_pid(me)?;
        let g = self.inner.lock().unwrap();
        let r = g
            .red_instances
            .get(handle as usize)
            .and_then(|i| i.result);
        self.yield_baton(g, me)?;
        Ok(r)
    }

    /// Newest completed non-blocking reduction, if any.
    pub fn reduce_poll_newest(&self, me: Pid) -> Result<Option<(u64, f64)>, FabricError> {
        self.check_pid(me)?;
        let g = self.inner.lock().unwrap();
        let newest = g
            .red_instances
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, inst)| match (inst.mode, inst.result) {
                (RedMode::NonBlocking, Some(r)) => Some((i as u64, r)),
                _ => None,
            });
        self.yield_baton(g, me)?;
        Ok(newest)
    }

    // ---- halo faces ----

    pub fn publish_face(
        &self,
        me: Pid,
        key: FaceKey,
        data: &[u64],
        version: i64,
    ) -> Result<(), FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        let (to, bytes, tag) = {
            let slot = g.faces.get_mut(&key).expect("face registered");
            debug_assert_eq!(slot.from, me);
            slot.data.copy_from_slice(data);
            slot.version = version;
            (
                slot.to,
                slot.bytes_per_elem * data.len() as u64,
                slot.tag.clone(),
            )
        };
        if to != me {
            self.count(&mut g, MsgKind::HaloFace, me, to, bytes, &tag);
        }
        Self::refresh(&mut g);
        self.yield_baton(g, me)?;
        Ok(())
    }

    /// Blocks until the face reaches `want` (synchronous exchange).
    pub fn adopt_face_wait(
        &self,
        me: Pid,
        key: FaceKey,
        want: i64,
    ) -> Result<Vec<u64>, FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        if g.faces[&key].version < want {
            g = self.block_on(g, me, Wait::Face { key, want })?;
        }
        let data = g.faces[&key].data.clone();
        self.yield_baton(g, me)?;
        Ok(data)
    }

    /// Returns the newest complete face without blocking (async-safe).
    pub fn adopt_face_newest(
        &self,
        me: Pid,
        key: FaceKey,
    ) -> Result<(i64, Vec<u64>), FabricError> {
        self.check_pid(me)?;
        let g = self.inner.lock().unwrap();
        let slot = &g.faces[&key];
        let out = (slot.version, slot.data.clone());
        self.yield_baton(g, me)?;
        Ok(out)
    }

    /// Metric/trace accounting for a racy publish whose payload moved
    /// through the shared atomic buffer outside the lock.
    pub fn count_face_message(&self, me: Pid, key: FaceKey) -> Result<(), FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        let (to, bytes, tag) = {
            let slot = &g.faces[&key];
            (
                slot.to,
                slot.bytes_per_elem * slot.data.len() as u64,
                slot.tag.clone(),
            )
        };
        if to != me {
            self.count(&mut g, MsgKind::HaloFace, me, to, bytes, &tag);
        }
        self.yield_baton(g, me)?;
        Ok(())
    }

    pub fn record_staleness(&self, lag: i64) {
        self.inner.lock().unwrap().metrics.record_staleness(lag);
    }

    // ---- mailboxes (stop tokens) ----

    pub fn mailbox_send(&self, me: Pid, dst: Pid, token: i64) -> Result<(), FabricError> {
        self.check_pid(me)?;
        self.check_pid(dst)?;
        let mut g = self.inner.lock().unwrap();
        g.mail[dst].push_back(token);
        self.count(&mut g, MsgKind::ReductionMsg, me, dst, 4, "stop");
        self.yield_baton(g, me)?;
        Ok(())
    }

    pub fn mailbox_try_recv(&self, me: Pid) -> Result<Option<i64>, FabricError> {
        self.check_pid(me)?;
        let mut g = self.inner.lock().unwrap();
        let t = g.mail[me].pop_front();
        self.yield_baton(g, me)?;
        Ok(t)
    }

    // ---- debug tags ----

    pub fn tags_record(&self, key: FaceKey, idx: usize, bits: u64) {
        if let Some(tags) = &self.tags {
            let mut h = tags.history.lock().unwrap();
            h.get_mut(&key).expect("face registered")[idx].insert(bits);
        }
    }

    /// Checks a consumed value against the publish history; counts a
    /// violation when the value was never published for that element.
    pub fn tags_check(&self, key: FaceKey, idx: usize, bits: u64) {
        if let Some(tags) = &self.tags {
            let h = tags.history.lock().unwrap();
            if !h[&key][idx].contains(&bits) {
                tags.violations.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn tag_violations(&self) -> u64 {
        self.tags
            .as_ref()
            .map_or(0, |t| t.violations.load(Ordering::Relaxed))
    }

    // ---- observation ----

    pub fn mark(&self, index: u64) {
        self.inner.lock().unwrap().metrics.mark(index);
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.inner.lock().unwrap().metrics.snapshot()
    }

    pub fn trace_lines(&self) -> Vec<String> {
        let g = self.inner.lock().unwrap();
        g.trace.iter().map(|e| e.line()).collect()
    }

    /// Final value of every scalar slot, in slot-id order.
    pub fn slot_snapshot(&self) -> Vec<(String, Value)> {
        let g = self.inner.lock().unwrap();
        let mut slots: Vec<_> = g.slots.iter().collect();
        slots.sort_by_key(|(id, _)| **id);
        slots
            .into_iter()
            .map(|(_, s)| (s.name.clone(), s.value))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use metrics::KindCounts;

    fn det(p: usize, seed: u64) -> Fabric {
        Fabric::new(FabricConfig {
            collect_trace: true,
            ..FabricConfig::deterministic(p, seed)
        })
        .unwrap()
    }

    #[test]
    fn spawn_validates_process_count() {
        assert!(matches!(
            Fabric::new(FabricConfig::deterministic(0, 0)).err(),
            Some(FabricError::NoProcesses)
        ));
        let f = det(8, 42);
        assert_eq!(f.metrics().total_messages(), 0);
    }

    #[test]
    fn one_sided_slot_semantics() {
        let mut f = det(4, 1);
        f.define_scalar_slot(0, "b", 3, Value::Int(7), false).unwrap();
        f.define_scalar_slot(1, "c", 3, Value::Int(0), true).unwrap();
        let results = f.run_contexts(|p| {
            if p == 1 {
                let v = f.one_sided_get(1, 0).unwrap();
                assert_eq!(v, Value::Int(7));
                assert!(matches!(
                    f.one_sided_put(1, 1, Value::Int(9)),
                    Err(FabricError::ReadOnlySlot(_))
                ));
                assert!(matches!(
                    f.one_sided_get(1, 99),
                    Err(FabricError::UnknownSlot(_))
                ));
            }
            if p == 3 {
                // Owner access is message-free.
                assert_eq!(f.one_sided_get(3, 0).unwrap(), Value::Int(7));
            }
            p
        });
        assert_eq!(results, vec![0, 1, 2, 3]);
        let m = f.metrics();
        assert_eq!(m.kind(MsgKind::OneSided), KindCounts { messages: 1, bytes: 4 });
    }

    #[test]
    fn slot_init_bypasses_readonly() {
        let mut f = det(1, 0);
        f.define_scalar_slot(0, "c", 0, Value::Int(0), true).unwrap();
        f.run_contexts(|p| {
            f.slot_init(p, 0, Value::Int(5)).unwrap();
            assert_eq!(f.one_sided_get(p, 0).unwrap(), Value::Int(5));
        });
    }

    #[test]
    fn channel_rendezvous_delivers_and_counts() {
        let f = det(4, 7);
        f.run_contexts(|p| {
            if p == 3 {
                f.channel_send(3, 1, Value::Int(42)).unwrap();
            }
            if p == 1 {
                assert_eq!(f.channel_recv(1, 3).unwrap(), Value::Int(42));
            }
        });
        let m = f.metrics();
        assert_eq!(m.kind(MsgKind::Channel), KindCounts { messages: 1, bytes: 4 });
        assert_eq!(m.kind(MsgKind::OneSided).messages, 0);
        assert_eq!(m.per_process[3].sends, 1);
        assert_eq!(m.per_process[1].receives, 1);
    }

    #[test]
    fn channel_repeated_transfers_are_fifo() {
        let f = det(2, 3);
        let out = f.run_contexts(|p| {
            let mut got = Vec::new();
            for i in 0..10 {
                if p == 0 {
                    f.channel_send(0, 1, Value::Int(i)).unwrap();
                } else {
                    got.push(f.channel_recv(1, 0).unwrap().as_int().unwrap());
                }
            }
            got
        });
        assert_eq!(out[1], (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cross_wait_deadlocks_with_named_contexts() {
        let f = det(2, 5);
        let results = f.run_contexts(|p| {
            let dst = 1 - p;
            f.channel_send(p, dst, Value::Int(p as i64))
        });
        for r in &results {
            match r {
                Err(FabricError::DeadlockDetected(msg)) => {
                    assert!(msg.contains("pid 0"));
                    assert!(msg.contains("pid 1"));
                    assert!(msg.contains("channel send"));
                }
                other => panic!("expected deadlock, got {other:?}"),
            }
        }
    }

    #[test]
    fn missing_barrier_participant_deadlocks() {
        let f = det(2, 11);
        let results = f.run_contexts(|p| if p == 0 { f.barrier(0) } else { Ok(()) });
        assert!(matches!(results[0], Err(FabricError::DeadlockDetected(_))));
    }

    #[test]
    fn self_channel_rejected() {
        let f = det(2, 0);
        f.run_contexts(|p| {
            if p == 0 {
                assert!(matches!(
                    f.channel_send(0, 0, Value::Int(1)),
                    Err(FabricError::SelfChannel(0))
                ));
            }
        });
    }

    #[test]
    fn blocking_reduction_sums_in_pid_order() {
        let f = det(4, 9);
        let sums = f.run_contexts(|p| f.reduce_blocking(p, p as f64).unwrap());
        assert!(sums.iter().all(|&s| s == 6.0));
        let m = f.metrics();
        // Gather P-1 plus broadcast P-1.
        assert_eq!(m.kind(MsgKind::ReductionMsg).messages, 6);
        assert_eq!(m.kind(MsgKind::ReductionMsg).bytes, 48);
    }

    #[test]
    fn single_process_reduction_is_free() {
        let f = det(1, 0);
        let sums = f.run_contexts(|p| f.reduce_blocking(p, 5.5).unwrap());
        assert_eq!(sums, vec![5.5]);
        assert_eq!(f.metrics().total_messages(), 0);
    }

    #[test]
    fn nonblocking_reduction_polls_to_completion() {
        let f = det(2, 13);
        let out = f.run_contexts(|p| {
            let h = f.reduce_nonblocking(p, (p + 1) as f64).unwrap();
            if p == 0 {
                loop {
                    if let Some(sum) = f.reduce_poll(0, h).unwrap() {
                        return sum;
                    }
                }
            }
            0.0
        });
        assert_eq!(out[0], 3.0);
        // Gather only: P-1 messages, no broadcast.
        assert_eq!(f.metrics().kind(MsgKind::ReductionMsg).messages, 1);
    }

    #[test]
    fn mismatched_reduction_modes_error() {
        let f = det(2, 17);
        let results = f.run_contexts(|p| {
            if p == 0 {
                f.reduce_blocking(0, 1.0).map(|_| ())
            } else {
                f.reduce_nonblocking(1, 2.0).map(|_| ())
            }
        });
        assert!(results
            .iter()
            .any(|r| matches!(r, Err(FabricError::MismatchedMode(0)))));
    }

    #[test]
    fn face_publish_then_wait_adopt() {
        let key = FaceKey {
            array: 0,
            block: 0,
            axis: 0,
            positive: true,
        };
        let mut f = det(2, 21);
        f.register_face(key, 0, 1, 4, 8, "face:d:0:x+", false).unwrap();
        let out = f.run_contexts(|p| {
            if p == 0 {
                let data: Vec<u64> = (1..=4u64).collect();
                f.publish_face(0, key, &data, 0).unwrap();
                Vec::new()
            } else {
                f.adopt_face_wait(1, key, 0).unwrap()
            }
        });
        assert_eq!(out[1], vec![1, 2, 3, 4]);
        let m = f.metrics();
        assert_eq!(m.kind(MsgKind::HaloFace), KindCounts { messages: 1, bytes: 32 });
    }

    #[test]
    fn newest_face_adoption_never_blocks() {
        let key = FaceKey {
            array: 0,
            block: 1,
            axis: 0,
            positive: false,
        };
        let mut f = det(2, 23);
        f.register_face(key, 1, 0, 2, 8, "face:d:1:x-", false).unwrap();
        let out = f.run_contexts(|p| {
            if p == 0 {
                // Whatever is there, including the never-exchanged initial state.
                let (v, data) = f.adopt_face_newest(0, key).unwrap();
                assert!(v >= -1);
                data
            } else {
                f.publish_face(1, key, &[9, 9], 3).unwrap();
                Vec::new()
            }
        });
        assert!(out[0] == vec![0, 0] || out[0] == vec![9, 9]);
    }

    #[test]
    fn mailboxes_are_fifo_per_pair() {
        let f = det(2, 29);
        let got = f.run_contexts(|p| {
            let mut got = Vec::new();
            if p == 0 {
                for i in 0..5 {
                    f.mailbox_send(0, 1, i).unwrap();
                }
            } else {
                while got.len() < 5 {
                    if let Some(t) = f.mailbox_try_recv(1).unwrap() {
                        got.push(t);
                    }
                }
            }
            got
        });
        assert_eq!(got[1], vec![0, 1, 2, 3, 4]);
        assert_eq!(f.metrics().kind(MsgKind::ReductionMsg).messages, 5);
    }

    #[test]
    fn equal_seeds_equal_traces() {
        fn trace_of(seed: u64) -> Vec<String> {
            let mut f = det(4, seed);
            f.define_scalar_slot(0, "s", 0, Value::Int(0), false).unwrap();
            f.run_contexts(|p| {
                for i in 0..3 {
                    f.one_sided_put(p, 0, Value::Int((p * 10 + i) as i64)).unwrap();
                    f.barrier(p).unwrap();
                }
            });
            f.trace_lines()
        }
        let a = trace_of(99);
        let b = trace_of(99);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn block_window_roundtrip_and_counting() {
        let mut f = det(2, 31);
        let b0 = f.register_block(0, 8, ElemKind::Double, "d").unwrap();
        f.run_contexts(|p| {
            if p == 0 {
                let store = f.block(b0);
                store.store(3, 2.5f64.to_bits());
                f.barrier(0).unwrap();
                f.barrier(0).unwrap();
            } else {
                f.barrier(1).unwrap();
                let bits = f.one_sided_get_block(1, b0, 3).unwrap();
                assert_eq!(f64::from_bits(bits), 2.5);
                f.one_sided_put_block(1, b0, 4, 7.0f64.to_bits()).unwrap();
                f.barrier(1).unwrap();
            }
        });
        assert_eq!(f.block(b0).load(4), 7.0f64.to_bits());
        let m = f.metrics();
        assert_eq!(m.kind(MsgKind::OneSided), KindCounts { messages: 2, bytes: 16 });
    }

    #[test]
    fn free_running_mode_completes() {
        let mut f = Fabric::new(FabricConfig::free_running(4, 3)).unwrap();
        f.define_scalar_slot(0, "s", 0, Value::Int(0), false).unwrap();
        let sums = f.run_contexts(|p| {
            f.barrier(p).unwrap();
            let v = f.reduce_blocking(p, p as f64).unwrap();
            f.barrier(p).unwrap();
            v
        });
        assert!(sums.iter().all(|&s| s == 6.0));
    }

    #[test]
    fn debug_tags_flag_records_and_checks() {
        let key = FaceKey {
            array: 0,
            block: 0,
            axis: 1,
            positive: true,
        };
        let mut f = Fabric::new(FabricConfig {
            debug_tags: true,
            ..FabricConfig::deterministic(1, 0)
        })
        .unwrap();
        f.register_face(key, 0, 0, 2, 8, "t", false).unwrap();
        f.tags_record(key, 0, 11);
        f.tags_check(key, 0, 11);
        assert_eq!(f.tag_violations(), 0);
        f.tags_check(key, 0, 12);
        assert_eq!(f.tag_violations(), 1);
    }
}
