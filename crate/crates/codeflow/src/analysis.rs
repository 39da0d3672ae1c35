//! Static profiling of spawnable functions and device-affinity detection.
//!
//! Profiles are computed over the *static transitive closure* of a function:
//! every reachable body is counted exactly once (a visited-set fixpoint), so
//! recursion terminates and multiple call sites do not multiply counts.

use crate::cft::{Instruction, Module};
use crate::device::DeviceClass;
use crate::host_api::{self, HostFuncKind};
use serde::Serialize;
use std::collections::{BTreeSet, VecDeque};

/// Call graph over the unified function index space. Host imports appear as
/// leaf nodes (no outgoing edges).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    adjacency: Vec<BTreeSet<u32>>,
}

impl CallGraph {
    pub fn callees(&self, func: u32) -> &BTreeSet<u32> {
        &self.adjacency[func as usize]
    }

    pub fn num_funcs(&self) -> u32 {
        self.adjacency.len() as u32
    }
}

pub fn build_call_graph(module: &Module) -> CallGraph {
    let mut adjacency = vec![BTreeSet::new(); module.num_funcs() as usize];
    for (i, func) in module.functions.iter().enumerate() {
        let idx = module.imports.len() + i;
        collect_calls(&func.body, &mut adjacency[idx]);
    }
    CallGraph { adjacency }
}

fn collect_calls(body: &[Instruction], out: &mut BTreeSet<u32>) {
    for instr in body {
        match instr {
            Instruction::Call(target) => {
                out.insert(*target);
            }
            Instruction::Block(inner) | Instruction::Loop(inner) => collect_calls(inner, out),
            Instruction::If { then_body, else_body } => {
                collect_calls(then_body, out);
                collect_calls(else_body, out);
            }
            _ => {}
        }
    }
}

/// Static capability counts over a function's transitive closure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CapabilityProfile {
    /// Call sites reaching wasi.fd_read / wasi.fd_write.
    pub file_ops: u64,
    /// Call sites reaching wasi.sock_send / wasi.sock_recv.
    pub net_ops: u64,
    pub atomic_ops: u64,
    /// Non-atomic loads + stores.
    pub mem_ops: u64,
    /// Arithmetic/compare opcodes.
    pub arith_ops: u64,
    /// Max static loop nesting over any single body in the closure.
    pub max_loop_depth: u32,
    /// Total static instructions in the closure.
    pub instr_count: u64,
}

/// Profile `func` over its static transitive closure (each reachable body
/// counted once, recursion handled by the visited set).
pub fn profile_function(module: &Module, func: u32, graph: &CallGraph) -> CapabilityProfile {
    let mut visited = BTreeSet::new();
    let mut queue = VecDeque::from([func]);
    let mut profile = CapabilityProfile::default();
    while let Some(current) = queue.pop_front() {
        if !visited.insert(current) {
            continue;
        }
        if let Some(def) = module.defined(current) {
            count_body(module, &def.body, 0, &mut profile);
        }
        for &callee in graph.callees(current) {
            if !visited.contains(&callee) {
                queue.push_back(callee);
            }
        }
    }
    profile
}

fn count_body(module: &Module, body: &[Instruction], loop_depth: u32, p: &mut CapabilityProfile) {
    for instr in body {
        p.instr_count += 1;
        match instr {
            Instruction::Block(inner) => count_body(module, inner, loop_depth, p),
            Instruction::Loop(inner) => {
                let depth = loop_depth + 1;
                p.max_loop_depth = p.max_loop_depth.max(depth);
                count_body(module, inner, depth, p);
            }
            Instruction::If { then_body, else_body } => {
                count_body(module, then_body, loop_depth, p);
                count_body(module, else_body, loop_depth, p);
            }
            Instruction::Call(target) => match import_kind(module, *target) {
                Some(HostFuncKind::FdRead | HostFuncKind::FdWrite) => p.file_ops += 1,
                Some(HostFuncKind::SockSend | HostFuncKind::SockRecv) => p.net_ops += 1,
                _ => {}
            },
            other => {
                if other.is_arith_op() {
                    p.arith_ops += 1;
                } else if other.is_plain_memory_op() {
                    p.mem_ops += 1;
                } else if other.is_atomic_op() {
                    p.atomic_ops += 1;
                }
            }
        }
    }
}

fn import_kind(module: &Module, func: u32) -> Option<HostFuncKind> {
    let imp = module.import(func)?;
    host_api::lookup(&imp.namespace, &imp.name).map(|h| h.kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Annotation,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AffinityDecision {
    pub device_class: DeviceClass,
    pub source: DecisionSource,
    /// Rule id that produced the decision.
    pub rationale: &'static str,
}

pub const DEFAULT_RATIO_THRESHOLD: f64 = 2.0;

/// Decide the device class for a profile. First match wins:
///
/// 1. an annotation fixes the decision;
/// 2. file I/O (and at least as much of it as network I/O) goes to a
///    storage processor;
/// 3. any remaining network I/O goes to a network processor;
/// 4. looped, memory-touching code whose arith/mem ratio clears
///    `ratio_threshold` goes to a parallel accelerator;
/// 5. everything else runs on the CPU.
pub fn detect_affinity(
    profile: &CapabilityProfile,
    hint: Option<DeviceClass>,
    ratio_threshold: f64,
) -> AffinityDecision {
    if let Some(device_class) = hint {
        return AffinityDecision {
            device_class,
            source: DecisionSource::Annotation,
            rationale: "ANNOTATION",
        };
    }
    let rule = |device_class, rationale| AffinityDecision {
        device_class,
        source: DecisionSource::Rule,
        rationale,
    };
    if profile.file_ops > 0 && profile.file_ops >= profile.net_ops {
        return rule(DeviceClass::StorageProcessor, "FILE_AFFINITY");
    }
    if profile.net_ops > 0 {
        return rule(DeviceClass::NetworkProcessor, "NET_AFFINITY");
    }
    if profile.max_loop_depth >= 1
        && profile.mem_ops > 0
        && profile.arith_ops as f64 / profile.mem_ops as f64 >= ratio_threshold
        && profile.file_ops == 0
        && profile.net_ops == 0
    {
        return rule(DeviceClass::ParallelAccelerator, "COMPUTE_INTENSITY");
    }
    rule(DeviceClass::Cpu, "DEFAULT_CPU")
}

/// One row of the `analyze` output.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionAnalysis {
    pub function: String,
    pub profile: CapabilityProfile,
    pub decision: DeviceClass,
    pub source: DecisionSource,
    pub rationale: &'static str,
}

/// Profile and decide every defined function.
pub fn analyze_module(module: &Module, ratio_threshold: f64) -> Vec<FunctionAnalysis> {
    let graph = build_call_graph(module);
    module
        .functions
        .iter()
        .enumerate()
        .map(|(i, def)| {
            let idx = module.imports.len() as u32 + i as u32;
            let profile = profile_function(module, idx, &graph);
            let decision = detect_affinity(&profile, def.hint, ratio_threshold);
            FunctionAnalysis {
                function: module.func_display_name(idx),
                profile,
                decision: decision.device_class,
                source: decision.source,
                rationale: decision.rationale,
            }
        })
        .collect()
}
