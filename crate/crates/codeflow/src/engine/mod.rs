//! Deterministic interpreter for validated modules: one shared linear memory
//! (all threads alias the same bytes, so coherence holds by construction),
//! sequentially consistent atomics at instruction granularity, WASI-style
//! host functions, thread spawn/join, and per-access cost accounting against
//! the topology's cost matrix.
//!
//! Time is virtual: each thread accumulates nanoseconds (compute, memory
//! stall, compile charges) on its own clock, and nothing here reads the wall
//! clock. Given the same module, topology, placement, host environment and
//! quantum, two runs are bit-identical.

mod flat;

use crate::cft::{ConstValue, IntBinOp, IntCmpOp, Module, ValType};
use crate::host_api::{self, HostFuncKind};
use crate::topology::{AccessKind, CostMatrix, Topology, PLACEMENT_PAGE_SIZE};
use flat::{FlatModule, FlatOp, LoadKind, StoreKind};
use serde::Serialize;
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

pub use crate::cft::WASM_PAGE_SIZE;

const MAX_CALL_DEPTH: usize = 1000;
const MAX_VALUE_STACK: usize = 1 << 16;
/// Placement pages per linear-memory page.
const PLACEMENT_PAGES_PER_WASM_PAGE: u64 = WASM_PAGE_SIZE as u64 / PLACEMENT_PAGE_SIZE;

pub type Tid = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapKind {
    OobMemory,
    DivByZero,
    Unreachable,
    StackExhausted,
    BadHostArgs,
}

/// Untyped-at-rest runtime value; unsigned bit patterns, signed ops cast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    I32(u32),
    I64(u64),
}

impl Value {
    fn zero(ty: ValType) -> Value {
        match ty {
            ValType::I32 => Value::I32(0),
            ValType::I64 => Value::I64(0),
        }
    }

    /// Stack discipline violations are impossible in validated modules; for
    /// anything else they trap instead of panicking.
    fn u32(self) -> Result<u32, TrapKind> {
        match self {
            Value::I32(v) => Ok(v),
            Value::I64(_) => Err(TrapKind::StackExhausted),
        }
    }

    fn u64(self) -> Result<u64, TrapKind> {
        match self {
            Value::I64(v) => Ok(v),
            Value::I32(_) => Err(TrapKind::StackExhausted),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadStatus {
    Runnable,
    BlockedJoin(Tid),
    Finished(i32),
}

/// Per-thread virtual clock, broken down by what accrued it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClockNs {
    pub compute_ns: f64,
    pub memory_stall_ns: f64,
    pub compile_ns: f64,
}

impl ClockNs {
    pub fn total(&self) -> f64 {
        self.compute_ns + self.memory_stall_ns + self.compile_ns
    }
}

#[derive(Debug)]
struct Frame {
    func: u32,
    ip: usize,
    /// Value-stack height at frame entry (after arguments were consumed).
    base: usize,
    locals: Vec<Value>,
}

#[derive(Debug)]
pub struct ThreadState {
    pub tid: Tid,
    pub status: ThreadStatus,
    pub entry_func: u32,
    /// Device index in the topology.
    pub device: u32,
    pub executed: u64,
    pub clock: ClockNs,
    stack: Vec<Value>,
    frames: Vec<Frame>,
}

impl ThreadState {
    fn parked(tid: Tid) -> ThreadState {
        ThreadState {
            tid,
            status: ThreadStatus::Runnable,
            entry_func: 0,
            device: 0,
            executed: 0,
            clock: ClockNs::default(),
            stack: Vec::new(),
            frames: Vec::new(),
        }
    }

    fn push(&mut self, value: Value) -> Result<(), TrapKind> {
        if self.stack.len() >= MAX_VALUE_STACK {
            return Err(TrapKind::StackExhausted);
        }
        self.stack.push(value);
        Ok(())
    }

    fn pop(&mut self) -> Result<Value, TrapKind> {
        let base = self.frames.last().map_or(0, |f| f.base);
        if self.stack.len() <= base {
            return Err(TrapKind::StackExhausted);
        }
        Ok(self.stack.pop().expect("height checked"))
    }

    fn pop_u32(&mut self) -> Result<u32, TrapKind> {
        self.pop()?.u32()
    }

    fn pop_u64(&mut self) -> Result<u64, TrapKind> {
        self.pop()?.u64()
    }

    pub fn result(&self) -> Option<i32> {
        match self.status {
            ThreadStatus::Finished(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepState {
    Yielded,
    Blocked,
    Finished,
    Trapped(TrapKind),
}

#[derive(Debug, Clone, Copy)]
pub struct SpawnEvent {
    pub spawner: Tid,
    pub func: u32,
    pub new_tid: Tid,
}

#[derive(Debug)]
pub struct StepOutcome {
    pub executed: u64,
    pub state: StepState,
    pub compute_ns: f64,
    pub memory_stall_ns: f64,
    /// Threads created during this step, for the runtime's compile-cost model.
    pub spawned: Vec<SpawnEvent>,
}

impl StepOutcome {
    fn new(state: StepState) -> StepOutcome {
        StepOutcome { executed: 0, state, compute_ns: 0.0, memory_stall_ns: 0.0, spawned: Vec::new() }
    }
}

/// Per-epoch access counters: (placement page, device index) -> accesses.
#[derive(Debug, Clone, Default)]
pub struct AccessStats {
    counts: BTreeMap<(u32, u32), u64>,
}

impl AccessStats {
    pub fn record(&mut self, page: u32, device: u32) {
        *self.counts.entry((page, device)).or_insert(0) += 1;
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, u64)> + '_ {
        self.counts.iter().map(|(&(page, device), &count)| (page, device, count))
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// One memory access as charged, for the accounting-conservation oracle.
#[derive(Debug, Clone, Copy)]
pub struct AccessRecord {
    pub tid: Tid,
    pub device: u32,
    pub region: u32,
    pub page: u32,
    pub kind: AccessKind,
    pub bytes: u32,
    pub cost_ns: f64,
}

/// Page-granular mapping of linear memory to topology regions, with
/// capacity bookkeeping.
#[derive(Debug, Clone)]
pub struct Placement {
    pages: Vec<u32>,
    used_pages: Vec<u64>,
    capacity_pages: Vec<u64>,
}

impl Placement {
    /// All `num_pages` pages in one region; `None` if the region cannot hold
    /// them.
    pub fn uniform(num_pages: u64, region: u32, capacity_pages: Vec<u64>) -> Option<Placement> {
        let cap = *capacity_pages.get(region as usize)?;
        if num_pages > cap {
            return None;
        }
        let mut used_pages = vec![0; capacity_pages.len()];
        used_pages[region as usize] = num_pages;
        Some(Placement { pages: vec![region; num_pages as usize], used_pages, capacity_pages })
    }

    pub fn num_pages(&self) -> u64 {
        self.pages.len() as u64
    }

    pub fn region_of(&self, page: u32) -> u32 {
        self.pages[page as usize]
    }

    pub fn free_pages(&self, region: u32) -> u64 {
        self.capacity_pages[region as usize] - self.used_pages[region as usize]
    }

    pub fn used_pages(&self, region: u32) -> u64 {
        self.used_pages[region as usize]
    }

    /// Move one page; capacity-checked, false means no capacity (no change).
    pub fn move_page(&mut self, page: u32, to: u32) -> bool {
        let from = self.pages[page as usize];
        if from == to {
            return true;
        }
        if self.free_pages(to) == 0 {
            return false;
        }
        self.used_pages[from as usize] -= 1;
        self.used_pages[to as usize] += 1;
        self.pages[page as usize] = to;
        true
    }

    /// Append `extra` pages in `region`; all-or-nothing.
    fn extend(&mut self, extra: u64, region: u32) -> bool {
        if self.free_pages(region) < extra {
            return false;
        }
        self.used_pages[region as usize] += extra;
        self.pages.extend(std::iter::repeat(region).take(extra as usize));
        true
    }
}

/// In-memory host world: virtual files and a single loopback byte FIFO.
#[derive(Debug, Clone, Default)]
pub struct VirtualFile {
    pub data: Vec<u8>,
    pub read_pos: usize,
}

#[derive(Debug, Clone, Default)]
pub struct HostEnv {
    pub files: BTreeMap<u32, VirtualFile>,
    pub socket: VecDeque<u8>,
}

impl HostEnv {
    pub fn new() -> HostEnv {
        HostEnv::default()
    }

    pub fn with_file(mut self, fd: u32, data: Vec<u8>) -> HostEnv {
        self.files.insert(fd, VirtualFile { data, read_pos: 0 });
        self
    }
}

/// WASI errno for "bad file descriptor".
const ERRNO_BADF: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum InstantiateError {
    #[error("import {namespace}.{name} is not satisfied: {reason}")]
    ImportNotSatisfied { namespace: String, name: String, reason: String },
    #[error("placement incomplete: memory needs {expected} pages, placement covers {got}")]
    PlacementIncomplete { expected: u64, got: u64 },
    #[error("module failed validation with {0} finding(s)")]
    ValidationFailed(usize),
    #[error("no device assigned for function {func}")]
    MissingDeviceAssignment { func: u32 },
    #[error("device index {device} is not schedulable")]
    UnschedulableDevice { device: u32 },
    #[error("region index {region} does not exist")]
    UnknownRegion { region: u32 },
}

#[derive(Debug)]
pub struct Instance {
    module: Arc<Module>,
    flat: Arc<FlatModule>,
    import_kinds: Vec<HostFuncKind>,
    device_of_func: BTreeMap<u32, u32>,
    device_compute_ns: Vec<f64>,
    cost: CostMatrix,
    memory: Vec<u8>,
    current_pages: u32,
    max_pages: u32,
    globals: Vec<Value>,
    threads: Vec<ThreadState>,
    placement: Placement,
    default_region: u32,
    stats: AccessStats,
    host: HostEnv,
    trap: Option<TrapKind>,
    exit_code: Option<i32>,
    access_log: Option<Vec<AccessRecord>>,
}

/// Build an instance: memory zeroed at `min_pages`, globals at their inits,
/// thread 0 running "main" with argument 0, clocks at zero.
pub fn instantiate(
    module: Arc<Module>,
    topology: &Topology,
    device_of_func: BTreeMap<u32, u32>,
    placement: Placement,
    default_region: u32,
    env: HostEnv,
) -> Result<Instance, InstantiateError> {
    let mut import_kinds = Vec::with_capacity(module.imports.len());
    for imp in &module.imports {
        match host_api::lookup(&imp.namespace, &imp.name) {
            Some(host) if host.signature() == imp.sig => import_kinds.push(host.kind),
            Some(_) => {
                return Err(InstantiateError::ImportNotSatisfied {
                    namespace: imp.namespace.clone(),
                    name: imp.name.clone(),
                    reason: "signature mismatch".into(),
                })
            }
            None => {
                return Err(InstantiateError::ImportNotSatisfied {
                    namespace: imp.namespace.clone(),
                    name: imp.name.clone(),
                    reason: "not registered".into(),
                })
            }
        }
    }

    let report = crate::cft::validate_module(&module);
    if report.has_errors() {
        return Err(InstantiateError::ValidationFailed(report.findings.len()));
    }

    let memory_decl = module.memories[0];
    let needed_pages = memory_decl.min_pages as u64 * PLACEMENT_PAGES_PER_WASM_PAGE;
    if placement.num_pages() != needed_pages {
        return Err(InstantiateError::PlacementIncomplete {
            expected: needed_pages,
            got: placement.num_pages(),
        });
    }
    if default_region as usize >= topology.regions.len() {
        return Err(InstantiateError::UnknownRegion { region: default_region });
    }

    let main = module.main_func().expect("validated");
    let mut planned: Vec<u32> = module.threads.clone();
    planned.push(main);
    for func in planned {
        let Some(&device) = device_of_func.get(&func) else {
            return Err(InstantiateError::MissingDeviceAssignment { func });
        };
        match topology.devices.get(device as usize) {
            Some(d) if d.is_schedulable() => {}
            _ => return Err(InstantiateError::UnschedulableDevice { device }),
        }
    }

    let device_compute_ns = topology
        .devices
        .iter()
        .map(|d| d.compute_ns_per_instr.unwrap_or(0.0))
        .collect();

    let flat = Arc::new(FlatModule::compile(&module));
    let globals = module
        .globals
        .iter()
        .map(|g| match g.init {
            ConstValue::I32(v) => Value::I32(v as u32),
            ConstValue::I64(v) => Value::I64(v as u64),
        })
        .collect();

    let mut inst = Instance {
        import_kinds,
        device_of_func,
        device_compute_ns,
        cost: topology.cost_matrix(),
        memory: vec![0; memory_decl.min_pages as usize * WASM_PAGE_SIZE as usize],
        current_pages: memory_decl.min_pages,
        max_pages: memory_decl.max_pages,
        globals,
        threads: Vec::new(),
        placement,
        default_region,
        stats: AccessStats::default(),
        host: env,
        trap: None,
        exit_code: None,
        access_log: None,
        flat,
        module,
    };
    let main_device = inst.device_of_func[&main];
    inst.threads.push(inst.make_thread(0, main, 0, main_device));
    Ok(inst)
}

enum Ctl {
    Next,
    Finished(i32),
    Blocked,
}

impl Instance {
    fn make_thread(&self, tid: Tid, func: u32, arg: i32, device: u32) -> ThreadState {
        let ff = self.flat.func(func);
        let mut locals = Vec::with_capacity(ff.local_types.len());
        locals.push(Value::I32(arg as u32)); // entry signature is (param i32)
        for &ty in &ff.local_types[ff.num_params as usize..] {
            locals.push(Value::zero(ty));
        }
        ThreadState {
            tid,
            status: ThreadStatus::Runnable,
            entry_func: func,
            device,
            executed: 0,
            clock: ClockNs::default(),
            stack: Vec::new(),
            frames: vec![Frame { func, ip: 0, base: 0, locals }],
        }
    }

    pub fn module(&self) -> &Arc<Module> {
        &self.module
    }

    pub fn thread_count(&self) -> u32 {
        self.threads.len() as u32
    }

    pub fn thread(&self, tid: Tid) -> &ThreadState {
        &self.threads[tid as usize]
    }

    pub fn threads(&self) -> &[ThreadState] {
        &self.threads
    }

    pub fn memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn placement_mut(&mut self) -> &mut Placement {
        &mut self.placement
    }

    pub fn trap(&self) -> Option<TrapKind> {
        self.trap
    }

    pub fn exit_code(&self) -> Option<i32> {
        self.exit_code
    }

    pub fn add_compile_ns(&mut self, tid: Tid, ns: f64) {
        self.threads[tid as usize].clock.compile_ns += ns;
    }

    pub fn stats(&self) -> &AccessStats {
        &self.stats
    }

    pub fn take_epoch_stats(&mut self) -> AccessStats {
        std::mem::take(&mut self.stats)
    }

    pub fn enable_access_log(&mut self) {
        self.access_log = Some(Vec::new());
    }

    pub fn take_access_log(&mut self) -> Vec<AccessRecord> {
        self.access_log.take().unwrap_or_default()
    }

    pub fn all_finished(&self) -> bool {
        self.threads.iter().all(|t| matches!(t.status, ThreadStatus::Finished(_)))
    }

    /// Wake a thread blocked on join if its target has finished; pushes the
    /// target's result. Returns true if the thread became runnable.
    pub fn try_unblock(&mut self, tid: Tid) -> bool {
        let ThreadStatus::BlockedJoin(target) = self.threads[tid as usize].status else {
            return false;
        };
        let ThreadStatus::Finished(value) = self.threads[target as usize].status else {
            return false;
        };
        let th = &mut self.threads[tid as usize];
        th.status = ThreadStatus::Runnable;
        if th.push(Value::I32(value as u32)).is_err() {
            self.trap = Some(TrapKind::StackExhausted);
        }
        true
    }

    /// Run up to `quantum` instructions of one thread.
    pub fn step_thread(&mut self, tid: Tid, quantum: u64) -> StepOutcome {
        if let Some(kind) = self.trap {
            return StepOutcome::new(StepState::Trapped(kind));
        }
        match self.threads[tid as usize].status {
            ThreadStatus::Runnable => {}
            ThreadStatus::BlockedJoin(_) => return StepOutcome::new(StepState::Blocked),
            ThreadStatus::Finished(_) => return StepOutcome::new(StepState::Finished),
        }

        let flat = Arc::clone(&self.flat);
        let mut th = std::mem::replace(&mut self.threads[tid as usize], ThreadState::parked(tid));
        let compute_per_instr = self.device_compute_ns[th.device as usize];
        let mut out = StepOutcome::new(StepState::Yielded);
        let mut trapped: Option<TrapKind> = None;

        while out.executed < quantum {
            let Some(frame) = th.frames.last_mut() else {
                break; // defensive; threads finish via Return
            };
            let code = &flat.func(frame.func).code;
            let op = match code.get(frame.ip) {
                Some(&op) => op,
                None => FlatOp::Return { counted: false },
            };
            frame.ip += 1;
            if op.counted() {
                out.executed += 1;
                out.compute_ns += compute_per_instr;
            }
            match self.exec_op(&mut th, op, &flat, &mut out) {
                Ok(Ctl::Next) => {}
                Ok(Ctl::Finished(value)) => {
                    th.status = ThreadStatus::Finished(value);
                    out.state = StepState::Finished;
                    break;
                }
                Ok(Ctl::Blocked) => {
                    out.state = StepState::Blocked;
                    break;
                }
                Err(kind) => {
                    trapped = Some(kind);
                    out.state = StepState::Trapped(kind);
                    break;
                }
            }
        }

        th.executed += out.executed;
        th.clock.compute_ns += out.compute_ns;
        th.clock.memory_stall_ns += out.memory_stall_ns;
        if self.exit_code.is_some() && !matches!(th.status, ThreadStatus::Finished(_)) {
            // proc_exit fired during this step from this thread's host call
            th.status = ThreadStatus::Finished(self.exit_code.unwrap());
        }
        self.threads[tid as usize] = th;
        if let Some(kind) = trapped {
            self.trap = Some(kind);
        }
        out
    }

    fn exec_op(
        &mut self,
        th: &mut ThreadState,
        op: FlatOp,
        flat: &FlatModule,
        out: &mut StepOutcome,
    ) -> Result<Ctl, TrapKind> {
        use FlatOp as O;
        match op {
            O::I32Const(v) => th.push(Value::I32(v as u32))?,
            O::I64Const(v) => th.push(Value::I64(v as u64))?,
            O::I32Bin(binop) => {
                let b = th.pop_u32()?;
                let a = th.pop_u32()?;
                th.push(Value::I32(i32_bin(binop, a, b)?))?;
            }
            O::I64Bin(binop) => {
                let b = th.pop_u64()?;
                let a = th.pop_u64()?;
                th.push(Value::I64(i64_bin(binop, a, b)?))?;
            }
            O::I32Eqz => {
                let a = th.pop_u32()?;
                th.push(Value::I32((a == 0) as u32))?;
            }
            O::I32Cmp(cmp) => {
                let b = th.pop_u32()?;
                let a = th.pop_u32()?;
                th.push(Value::I32(i32_cmp(cmp, a, b) as u32))?;
            }
            O::I64ExtendI32U => {
                let a = th.pop_u32()?;
                th.push(Value::I64(a as u64))?;
            }
            O::I32WrapI64 => {
                let a = th.pop_u64()?;
                th.push(Value::I32(a as u32))?;
            }
            O::LocalGet(idx) => {
                let frame = th.frames.last().ok_or(TrapKind::StackExhausted)?;
                let v = *frame.locals.get(idx as usize).ok_or(TrapKind::StackExhausted)?;
                th.push(v)?;
            }
            O::LocalSet(idx) => {
                let v = th.pop()?;
                let frame = th.frames.last_mut().ok_or(TrapKind::StackExhausted)?;
                let slot = frame.locals.get_mut(idx as usize).ok_or(TrapKind::StackExhausted)?;
                *slot = v;
            }
            O::LocalTee(idx) => {
                let v = th.pop()?;
                let frame = th.frames.last_mut().ok_or(TrapKind::StackExhausted)?;
                let slot = frame.locals.get_mut(idx as usize).ok_or(TrapKind::StackExhausted)?;
                *slot = v;
                th.push(v)?;
            }
            O::GlobalGet(idx) => {
                let v = *self.globals.get(idx as usize).ok_or(TrapKind::StackExhausted)?;
                th.push(v)?;
            }
            O::GlobalSet(idx) => {
                let v = th.pop()?;
                let slot = self.globals.get_mut(idx as usize).ok_or(TrapKind::StackExhausted)?;
                *slot = v;
            }
            O::Load { kind, offset } => {
                let addr = th.pop_u32()?;
                let width = kind.width();
                let ea = self.checked_extent(addr, offset, width)?;
                self.charge_access(th, ea, width, AccessKind::Read, out);
                let v = match kind {
                    LoadKind::I32 => Value::I32(self.read_u32(ea)),
                    LoadKind::I64 => Value::I64(self.read_u64(ea)),
                    LoadKind::I32_8U => Value::I32(self.memory[ea] as u32),
                };
                th.push(v)?;
            }
            O::Store { kind, offset } => {
                let v = th.pop()?;
                let addr = th.pop_u32()?;
                let width = kind.width();
                let ea = self.checked_extent(addr, offset, width)?;
                self.charge_access(th, ea, width, AccessKind::Write, out);
                match kind {
                    StoreKind::I32 => self.write_u32(ea, v.u32()?),
                    StoreKind::I64 => self.write_u64(ea, v.u64()?),
                    StoreKind::I32_8 => self.memory[ea] = v.u32()? as u8,
                }
            }
            O::AtomicLoad { offset } => {
                let addr = th.pop_u32()?;
                let ea = self.checked_extent(addr, offset, 4)?;
                self.charge_access(th, ea, 4, AccessKind::Read, out);
                let v = self.read_u32(ea);
                th.push(Value::I32(v))?;
            }
            O::AtomicStore { offset } => {
                let v = th.pop_u32()?;
                let addr = th.pop_u32()?;
                let ea = self.checked_extent(addr, offset, 4)?;
                self.charge_access(th, ea, 4, AccessKind::Write, out);
                self.write_u32(ea, v);
            }
            O::AtomicRmwAdd { offset } => {
                let v = th.pop_u32()?;
                let addr = th.pop_u32()?;
                let ea = self.checked_extent(addr, offset, 4)?;
                // RMW counts as a single write-kind access
                self.charge_access(th, ea, 4, AccessKind::Write, out);
                let old = self.read_u32(ea);
                self.write_u32(ea, old.wrapping_add(v));
                th.push(Value::I32(old))?;
            }
            O::AtomicRmwCmpxchg { offset } => {
                let replacement = th.pop_u32()?;
                let expected = th.pop_u32()?;
                let addr = th.pop_u32()?;
                let ea = self.checked_extent(addr, offset, 4)?;
                self.charge_access(th, ea, 4, AccessKind::Write, out);
                let old = self.read_u32(ea);
                if old == expected {
                    self.write_u32(ea, replacement);
                }
                th.push(Value::I32(old))?;
            }
            O::MemorySize => th.push(Value::I32(self.current_pages))?,
            O::MemoryGrow => {
                let delta = th.pop_u32()?;
                th.push(Value::I32(self.grow_memory(delta)))?;
            }
            O::Br { target, height } => {
                branch(th, target, height);
            }
            O::BrIf { target, height } => {
                let cond = th.pop_u32()?;
                if cond != 0 {
                    branch(th, target, height);
                }
            }
            O::BrIfZero { target, height } => {
                let cond = th.pop_u32()?;
                if cond == 0 {
                    branch(th, target, height);
                }
            }
            O::Jump { target } => {
                let frame = th.frames.last_mut().ok_or(TrapKind::StackExhausted)?;
                frame.ip = target as usize;
            }
            O::Return { .. } => return self.do_return(th, flat),
            O::Call(func) => {
                if self.module.is_import(func) {
                    return self.host_call(th, func, out);
                }
                if th.frames.len() >= MAX_CALL_DEPTH {
                    return Err(TrapKind::StackExhausted);
                }
                let ff = flat.func(func);
                let mut locals = vec![Value::I32(0); ff.local_types.len()];
                for i in (0..ff.num_params as usize).rev() {
                    locals[i] = th.pop()?;
                }
                for (i, &ty) in ff.local_types.iter().enumerate().skip(ff.num_params as usize) {
                    locals[i] = Value::zero(ty);
                }
                let base = th.stack.len();
                th.frames.push(Frame { func, ip: 0, base, locals });
            }
            O::Drop => {
                th.pop()?;
            }
            O::Select => {
                let cond = th.pop_u32()?;
                let val2 = th.pop()?;
                let val1 = th.pop()?;
                th.push(if cond != 0 { val1 } else { val2 })?;
            }
            O::Nop => {}
            O::Unreachable => return Err(TrapKind::Unreachable),
        }
        Ok(Ctl::Next)
    }

    fn do_return(&mut self, th: &mut ThreadState, flat: &FlatModule) -> Result<Ctl, TrapKind> {
        let frame = th.frames.pop().ok_or(TrapKind::StackExhausted)?;
        let ff = flat.func(frame.func);
        let result = match ff.result {
            Some(_) => {
                if th.stack.len() <= frame.base {
                    return Err(TrapKind::StackExhausted);
                }
                Some(th.stack.pop().expect("height checked"))
            }
            None => None,
        };
        th.stack.truncate(frame.base);
        if th.frames.is_empty() {
            let code = match result {
                Some(Value::I32(v)) => v as i32,
                Some(Value::I64(v)) => v as u32 as i32,
                None => 0,
            };
            return Ok(Ctl::Finished(code));
        }
        if let Some(v) = result {
            th.push(v)?;
        }
        Ok(Ctl::Next)
    }

    // -- memory ------------------------------------------------------------

    fn checked_extent(&self, addr: u32, offset: u32, width: u32) -> Result<usize, TrapKind> {
        let ea = addr as u64 + offset as u64;
        if ea + width as u64 > self.memory.len() as u64 {
            return Err(TrapKind::OobMemory);
        }
        Ok(ea as usize)
    }

    /// Cost accounting and stats for one instruction-level access. Accesses
    /// spanning a page boundary are attributed to their starting page.
    fn charge_access(
        &mut self,
        th: &ThreadState,
        ea: usize,
        width: u32,
        kind: AccessKind,
        out: &mut StepOutcome,
    ) {
        let page = (ea as u64 / PLACEMENT_PAGE_SIZE) as u32;
        let region = self.placement.region_of(page);
        let cost = self.cost.cost_ns(th.device as usize, region as usize, kind, width as u64);
        out.memory_stall_ns += cost;
        self.stats.record(page, th.device);
        if let Some(log) = &mut self.access_log {
            log.push(AccessRecord {
                tid: th.tid,
                device: th.device,
                region,
                page,
                kind,
                bytes: width,
                cost_ns: cost,
            });
        }
    }

    fn read_u32(&self, ea: usize) -> u32 {
        u32::from_le_bytes(self.memory[ea..ea + 4].try_into().expect("bounds checked"))
    }

    fn read_u64(&self, ea: usize) -> u64 {
        u64::from_le_bytes(self.memory[ea..ea + 8].try_into().expect("bounds checked"))
    }

    fn write_u32(&mut self, ea: usize, v: u32) {
        self.memory[ea..ea + 4].copy_from_slice(&v.to_le_bytes());
    }

    fn write_u64(&mut self, ea: usize, v: u64) {
        self.memory[ea..ea + 8].copy_from_slice(&v.to_le_bytes());
    }

    /// memory.grow semantics: returns the old page count, or -1 (as u32) if
    /// the limit or the default region's capacity would be exceeded.
    fn grow_memory(&mut self, delta: u32) -> u32 {
        let old = self.current_pages;
        let new = old as u64 + delta as u64;
        if new > self.max_pages as u64 {
            return u32::MAX;
        }
        if !self.placement.extend(delta as u64 * PLACEMENT_PAGES_PER_WASM_PAGE, self.default_region)
        {
            return u32::MAX;
        }
        self.memory.resize(new as usize * WASM_PAGE_SIZE as usize, 0);
        self.current_pages = new as u32;
        old
    }

    // -- host calls ----------------------------------------------------------

    fn host_call(
        &mut self,
        th: &mut ThreadState,
        func: u32,
        out: &mut StepOutcome,
    ) -> Result<Ctl, TrapKind> {
        match self.import_kinds[func as usize] {
            HostFuncKind::FdRead => {
                let nread_ptr = th.pop_u32()?;
                let len = th.pop_u32()?;
                let ptr = th.pop_u32()?;
                let fd = th.pop_u32()?;
                self.checked_host_range(ptr, len)?;
                self.checked_host_range(nread_ptr, 4)?;
                let mut staged = Vec::new();
                let errno = match self.host.files.get_mut(&fd) {
                    Some(file) => {
                        let avail = file.data.len().saturating_sub(file.read_pos);
                        let n = avail.min(len as usize);
                        staged.extend_from_slice(&file.data[file.read_pos..file.read_pos + n]);
                        file.read_pos += n;
                        0
                    }
                    None => ERRNO_BADF,
                };
                self.memory[ptr as usize..ptr as usize + staged.len()].copy_from_slice(&staged);
                self.write_u32(nread_ptr as usize, staged.len() as u32);
                th.push(Value::I32(errno))?;
            }
            HostFuncKind::FdWrite => {
                let nwritten_ptr = th.pop_u32()?;
                let len = th.pop_u32()?;
                let ptr = th.pop_u32()?;
                let fd = th.pop_u32()?;
                self.checked_host_range(ptr, len)?;
                self.checked_host_range(nwritten_ptr, 4)?;
                let bytes = &self.memory[ptr as usize..(ptr + len) as usize];
                let file = self.host.files.entry(fd).or_default();
                file.data.extend_from_slice(bytes);
                self.write_u32(nwritten_ptr as usize, len);
                th.push(Value::I32(0))?;
            }
            HostFuncKind::SockSend => {
                let len = th.pop_u32()?;
                let ptr = th.pop_u32()?;
                self.checked_host_range(ptr, len)?;
                self.host.socket.extend(&self.memory[ptr as usize..(ptr + len) as usize]);
                th.push(Value::I32(len))?;
            }
            HostFuncKind::SockRecv => {
                let len = th.pop_u32()?;
                let ptr = th.pop_u32()?;
                self.checked_host_range(ptr, len)?;
                let n = (len as usize).min(self.host.socket.len());
                for i in 0..n {
                    self.memory[ptr as usize + i] = self.host.socket.pop_front().expect("n bounded");
                }
                th.push(Value::I32(n as u32))?;
            }
            HostFuncKind::ClockTimeGet => {
                let ptr = th.pop_u32()?;
                self.checked_host_range(ptr, 8)?;
                let now = th.clock.total() + out.compute_ns + out.memory_stall_ns;
                self.write_u64(ptr as usize, now as u64);
                th.push(Value::I32(0))?;
            }
            HostFuncKind::ProcExit => {
                let code = th.pop_u32()? as i32;
                for other in &mut self.threads {
                    if !matches!(other.status, ThreadStatus::Finished(_)) {
                        other.status = ThreadStatus::Finished(code);
                    }
                }
                self.exit_code = Some(code);
                return Ok(Ctl::Finished(code));
            }
            HostFuncKind::Spawn => {
                let arg = th.pop_u32()? as i32;
                let index = th.pop_u32()?;
                let Some(&func) = self.module.threads.get(index as usize) else {
                    return Err(TrapKind::BadHostArgs);
                };
                let device = *self.device_of_func.get(&func).ok_or(TrapKind::BadHostArgs)?;
                let new_tid = self.threads.len() as Tid;
                let thread = self.make_thread(new_tid, func, arg, device);
                self.threads.push(thread);
                out.spawned.push(SpawnEvent { spawner: th.tid, func, new_tid });
                th.push(Value::I32(new_tid))?;
            }
            HostFuncKind::Join => {
                let target = th.pop_u32()?;
                if target as usize >= self.threads.len() {
                    return Err(TrapKind::BadHostArgs);
                }
                if target != th.tid {
                    if let ThreadStatus::Finished(value) = self.threads[target as usize].status {
                        th.push(Value::I32(value as u32))?;
                        return Ok(Ctl::Next);
                    }
                }
                th.status = ThreadStatus::BlockedJoin(target);
                return Ok(Ctl::Blocked);
            }
        }
        Ok(Ctl::Next)
    }

    /// Host buffers must lie inside linear memory; anything else is a
    /// bad_host_args trap.
    fn checked_host_range(&self, ptr: u32, len: u32) -> Result<(), TrapKind> {
        if ptr as u64 + len as u64 > self.memory.len() as u64 {
            return Err(TrapKind::BadHostArgs);
        }
        Ok(())
    }
}

fn branch(th: &mut ThreadState, target: u32, height: u32) {
    if let Some(frame) = th.frames.last_mut() {
        frame.ip = target as usize;
        let floor = frame.base + height as usize;
        if th.stack.len() > floor {
            th.stack.truncate(floor);
        }
    }
}

fn i32_bin(op: IntBinOp, a: u32, b: u32) -> Result<u32, TrapKind> {
    Ok(match op {
        IntBinOp::Add => a.wrapping_add(b),
        IntBinOp::Sub => a.wrapping_sub(b),
        IntBinOp::Mul => a.wrapping_mul(b),
        IntBinOp::DivU => a.checked_div(b).ok_or(TrapKind::DivByZero)?,
        IntBinOp::RemU => a.checked_rem(b).ok_or(TrapKind::DivByZero)?,
        IntBinOp::And => a & b,
        IntBinOp::Or => a | b,
        IntBinOp::Xor => a ^ b,
        IntBinOp::Shl => a.wrapping_shl(b),
        IntBinOp::ShrU => a.wrapping_shr(b),
    })
}

fn i64_bin(op: IntBinOp, a: u64, b: u64) -> Result<u64, TrapKind> {
    Ok(match op {
        IntBinOp::Add => a.wrapping_add(b),
        IntBinOp::Sub => a.wrapping_sub(b),
        IntBinOp::Mul => a.wrapping_mul(b),
        IntBinOp::DivU => a.checked_div(b).ok_or(TrapKind::DivByZero)?,
        IntBinOp::RemU => a.checked_rem(b).ok_or(TrapKind::DivByZero)?,
        IntBinOp::And => a & b,
        IntBinOp::Or => a | b,
        IntBinOp::Xor => a ^ b,
        IntBinOp::Shl => a.wrapping_shl(b as u32),
        IntBinOp::ShrU => a.wrapping_shr(b as u32),
    })
}

fn i32_cmp(op: IntCmpOp, a: u32, b: u32) -> bool {
    match op {
        IntCmpOp::Eq => a == b,
        IntCmpOp::Ne => a != b,
        IntCmpOp::LtU => a < b,
        IntCmpOp::LtS => (a as i32) < (b as i32),
        IntCmpOp::GtU => a > b,
        IntCmpOp::GeU => a >= b,
    }
}
