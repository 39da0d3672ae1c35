//! Runtime toolkit for multithreaded CFT programs on a modeled heterogeneous,
//! CXL-interconnected device topology.
//!
//! The pipeline, front to back:
//!
//! * [`cft`] parses the CodeFlow Text format (a restricted S-expression
//!   dialect of the WebAssembly text format) into a validated [`cft::Module`].
//! * [`analysis`] statically profiles each spawnable function and detects the
//!   device class it should run on, honoring `(thread <class>)` annotations.
//! * [`topology`] models devices (CPUs, CXL Type 2/3 accelerators) and tiered
//!   memory regions, and resolves the device x region access-cost matrix.
//! * [`engine`] deterministically interprets a module against a topology:
//!   shared linear memory, sequentially consistent atomics, WASI-style host
//!   calls, thread spawn/join, and per-access cost accounting.
//! * [`runtime`] orchestrates a full run: scheduling, the JIT/AOT compile-cost
//!   model, round-robin stepping, epoch-based page migration, and the
//!   machine-readable [`runtime::RunReport`].
//! * [`hostbench`] measures the *host* machine: pointer-chasing load latency
//!   over a working-set ladder and streaming-read bandwidth.

pub mod analysis;
pub mod cft;
pub mod device;
pub mod engine;
pub mod host_api;
pub mod hostbench;
pub mod runtime;
pub mod topology;
