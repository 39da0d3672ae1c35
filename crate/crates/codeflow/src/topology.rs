//! Model of the heterogeneous system: devices, tiered memory regions, and
//! the resolved device x region access-cost matrix. Topologies load from a
//! JSON document (schema below) and are immutable after load.
//!
//! ```json
//! {
//!   "devices": [{"id", "class", "cxl_type", "compute_ns_per_instr",
//!                "jit_ns_per_instr", "local_region"}],
//!   "regions": [{"id", "kind", "read_latency_ns", "write_latency_ns",
//!                "bandwidth_gbps", "capacity_bytes"}],
//!   "access_overrides": [{"device", "region", "read_latency_ns",
//!                         "write_latency_ns", "bandwidth_gbps"}]
//! }
//! ```

use crate::device::DeviceClass;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Placement granularity in bytes (the OS-page unit of migration, distinct
/// from the 64 KiB linear-memory page).
pub const PLACEMENT_PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    DramLocal,
    DramRemote,
    CxlLocal,
    CxlRemote,
    DeviceLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CxlType {
    None,
    Type2,
    Type3MemoryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRegion {
    pub id: String,
    pub kind: RegionKind,
    pub read_latency_ns: f64,
    pub write_latency_ns: f64,
    pub bandwidth_gbps: f64,
    pub capacity_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: String,
    #[serde(rename = "class")]
    pub device_class: DeviceClass,
    pub cxl_type: CxlType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_ns_per_instr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jit_ns_per_instr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_region: Option<String>,
}

impl Device {
    /// Type 3 devices are memory-only and may never be scheduled.
    pub fn is_schedulable(&self) -> bool {
        self.cxl_type != CxlType::Type3MemoryOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessOverride {
    pub device: String,
    pub region: String,
    pub read_latency_ns: f64,
    pub write_latency_ns: f64,
    pub bandwidth_gbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub devices: Vec<Device>,
    pub regions: Vec<MemoryRegion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub access_overrides: Vec<AccessOverride>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("schema error at {field}: {reason}")]
    Schema { field: String, reason: String },
    #[error("dangling reference '{id}'")]
    DanglingReference { id: String },
    #[error("unknown device '{id}'")]
    UnknownDevice { id: String },
    #[error("unknown region '{id}'")]
    UnknownRegion { id: String },
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> TopologyError {
    TopologyError::Schema { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// Resolved cost numbers for one (device, region) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEntry {
    pub read_latency_ns: f64,
    pub write_latency_ns: f64,
    pub bandwidth_gbps: f64,
}

impl CostEntry {
    /// latency + transfer time: `bytes / bandwidth_gbps` is already in ns,
    /// since 1 GB/s moves one byte per nanosecond.
    pub fn cost_ns(&self, kind: AccessKind, bytes: u64) -> f64 {
        assert!(bytes > 0, "zero-byte accesses are disallowed");
        let latency = match kind {
            AccessKind::Read => self.read_latency_ns,
            AccessKind::Write => self.write_latency_ns,
        };
        latency + bytes as f64 / self.bandwidth_gbps
    }
}

/// The derived access-cost model: a total function over schedulable devices
/// and regions. Defaults come from each region; overrides replace per pair.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    num_regions: usize,
    entries: Vec<CostEntry>, // [device * num_regions + region]
}

impl CostMatrix {
    pub fn entry(&self, device: usize, region: usize) -> &CostEntry {
        &self.entries[device * self.num_regions + region]
    }

    pub fn cost_ns(&self, device: usize, region: usize, kind: AccessKind, bytes: u64) -> f64 {
        self.entry(device, region).cost_ns(kind, bytes)
    }
}

impl Topology {
    pub fn device_index(&self, id: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.id == id)
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.id == id)
    }

    /// Capacity of each region, in placement pages.
    pub fn region_capacity_pages(&self) -> Vec<u64> {
        self.regions.iter().map(|r| r.capacity_bytes / PLACEMENT_PAGE_SIZE).collect()
    }

    pub fn cost_matrix(&self) -> CostMatrix {
        let num_regions = self.regions.len();
        let mut entries = Vec::with_capacity(self.devices.len() * num_regions);
        for device in &self.devices {
            for region in &self.regions {
                let mut entry = CostEntry {
                    read_latency_ns: region.read_latency_ns,
                    write_latency_ns: region.write_latency_ns,
                    bandwidth_gbps: region.bandwidth_gbps,
                };
                if let Some(ov) = self
                    .access_overrides
                    .iter()
                    .find(|o| o.device == device.id && o.region == region.id)
                {
                    entry = CostEntry {
                        read_latency_ns: ov.read_latency_ns,
                        write_latency_ns: ov.write_latency_ns,
                        bandwidth_gbps: ov.bandwidth_gbps,
                    };
                }
                entries.push(entry);
            }
        }
        CostMatrix { num_regions, entries }
    }

    /// Cost of one access in nanoseconds, by device and region id.
    pub fn access_cost(
        &self,
        device: &str,
        region: &str,
        kind: AccessKind,
        bytes: u64,
    ) -> Result<f64, TopologyError> {
        let d = self
            .device_index(device)
            .ok_or_else(|| TopologyError::UnknownDevice { id: device.to_string() })?;
        let r = self
            .region_index(region)
            .ok_or_else(|| TopologyError::UnknownRegion { id: region.to_string() })?;
        Ok(self.cost_matrix().cost_ns(d, r, kind, bytes))
    }
}

/// Parse and structurally validate a topology document.
pub fn load_topology(text: &str) -> Result<Topology, TopologyError> {
    let topo: Topology =
        serde_json::from_str(text).map_err(|e| schema("document", e.to_string()))?;
    check_structure(&topo)?;
    Ok(topo)
}

fn check_structure(topo: &Topology) -> Result<(), TopologyError> {
    let mut region_ids = HashSet::new();
    for (i, region) in topo.regions.iter().enumerate() {
        let at = |f: &str| format!("regions[{i}].{f}");
        if !region_ids.insert(region.id.clone()) {
            return Err(schema(at("id"), format!("duplicate region id '{}'", region.id)));
        }
        if !(region.read_latency_ns > 0.0) || !region.read_latency_ns.is_finite() {
            return Err(schema(at("read_latency_ns"), "must be finite and > 0"));
        }
        if !(region.write_latency_ns > 0.0) || !region.write_latency_ns.is_finite() {
            return Err(schema(at("write_latency_ns"), "must be finite and > 0"));
        }
        if !(region.bandwidth_gbps > 0.0) || !region.bandwidth_gbps.is_finite() {
            return Err(schema(at("bandwidth_gbps"), "must be finite and > 0"));
        }
        if region.capacity_bytes == 0 || region.capacity_bytes % PLACEMENT_PAGE_SIZE != 0 {
            return Err(schema(
                at("capacity_bytes"),
                format!("must be a positive multiple of {PLACEMENT_PAGE_SIZE}"),
            ));
        }
    }

    let mut device_ids = HashSet::new();
    for (i, device) in topo.devices.iter().enumerate() {
        let at = |f: &str| format!("devices[{i}].{f}");
        if !device_ids.insert(device.id.clone()) {
            return Err(schema(at("id"), format!("duplicate device id '{}'", device.id)));
        }
        if device.is_schedulable() {
            match device.compute_ns_per_instr {
                Some(v) if v >= 0.0 && v.is_finite() => {}
                Some(_) => return Err(schema(at("compute_ns_per_instr"), "must be finite and >= 0")),
                None => {
                    return Err(schema(
                        at("compute_ns_per_instr"),
                        "required for schedulable devices",
                    ))
                }
            }
            match device.jit_ns_per_instr {
                Some(v) if v >= 0.0 && v.is_finite() => {}
                Some(_) => return Err(schema(at("jit_ns_per_instr"), "must be finite and >= 0")),
                None => {
                    return Err(schema(at("jit_ns_per_instr"), "required for schedulable devices"))
                }
            }
        }
        if device.cxl_type == CxlType::Type2 && device.local_region.is_none() {
            return Err(TopologyError::DanglingReference {
                id: format!("{}.local_region", device.id),
            });
        }
        if let Some(region) = &device.local_region {
            if !region_ids.contains(region) {
                return Err(TopologyError::DanglingReference { id: region.clone() });
            }
        }
    }

    let mut seen_pairs = HashSet::new();
    for (i, ov) in topo.access_overrides.iter().enumerate() {
        let at = |f: &str| format!("access_overrides[{i}].{f}");
        if !device_ids.contains(&ov.device) {
            return Err(TopologyError::DanglingReference { id: ov.device.clone() });
        }
        if !region_ids.contains(&ov.region) {
            return Err(TopologyError::DanglingReference { id: ov.region.clone() });
        }
        if !seen_pairs.insert((ov.device.clone(), ov.region.clone())) {
            return Err(schema(at("device"), "duplicate override for this (device, region) pair"));
        }
        for (f, v) in [
            ("read_latency_ns", ov.read_latency_ns),
            ("write_latency_ns", ov.write_latency_ns),
            ("bandwidth_gbps", ov.bandwidth_gbps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(schema(at(f), "must be finite and > 0"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LintRule {
    #[serde(rename = "PAPER_ORDER_LATENCY")]
    PaperOrderLatency,
    #[serde(rename = "PAPER_ORDER_BANDWIDTH")]
    PaperOrderBandwidth,
    #[serde(rename = "STRUCTURE")]
    Structure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LintSeverity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Serialize)]
pub struct LintFinding {
    pub rule: LintRule,
    pub severity: LintSeverity,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LintReport {
    pub findings: Vec<LintFinding>,
}

impl LintReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == LintSeverity::Error)
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_rule(&self, rule: LintRule) -> bool {
        self.findings.iter().any(|f| f.rule == rule)
    }
}

/// Check a loaded topology. Structural violations are errors; the CXL
/// performance-ordering checks (enabled by `paper_ordering`) are warnings:
/// reference hardware puts local CXL latency above local DRAM and below
/// remote CXL, and CXL bandwidth below remote-socket DRAM bandwidth.
pub fn validate_topology(topo: &Topology, paper_ordering: bool) -> LintReport {
    let mut report = LintReport::default();
    if let Err(err) = check_structure(topo) {
        report.findings.push(LintFinding {
            rule: LintRule::Structure,
            severity: LintSeverity::Error,
            message: err.to_string(),
        });
    }
    if !paper_ordering {
        return report;
    }

    let read_of = |kind: RegionKind| -> Vec<f64> {
        topo.regions.iter().filter(|r| r.kind == kind).map(|r| r.read_latency_ns).collect()
    };
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);

    let dram_local = read_of(RegionKind::DramLocal);
    let cxl_local = read_of(RegionKind::CxlLocal);
    let cxl_remote = read_of(RegionKind::CxlRemote);

    let mut warn = |rule: LintRule, message: String| {
        report.findings.push(LintFinding { rule, severity: LintSeverity::Warning, message });
    };

    if !dram_local.is_empty() && !cxl_local.is_empty() && max(&dram_local) >= min(&cxl_local) {
        warn(
            LintRule::PaperOrderLatency,
            format!(
                "local CXL read latency (min {} ns) must exceed local DRAM read latency (max {} ns)",
                min(&cxl_local),
                max(&dram_local)
            ),
        );
    }
    if !cxl_local.is_empty() && !cxl_remote.is_empty() && min(&cxl_local) >= min(&cxl_remote) {
        warn(
            LintRule::PaperOrderLatency,
            format!(
                "remote CXL read latency (min {} ns) must exceed local CXL read latency (min {} ns)",
                min(&cxl_remote),
                min(&cxl_local)
            ),
        );
    }

    let bw_of = |kinds: &[RegionKind]| -> Vec<f64> {
        topo.regions
            .iter()
            .filter(|r| kinds.contains(&r.kind))
            .map(|r| r.bandwidth_gbps)
            .collect()
    };
    let cxl_bw = bw_of(&[RegionKind::CxlLocal, RegionKind::CxlRemote]);
    let dram_remote_bw = bw_of(&[RegionKind::DramRemote]);
    if !cxl_bw.is_empty() && !dram_remote_bw.is_empty() && max(&cxl_bw) >= min(&dram_remote_bw) {
        warn(
            LintRule::PaperOrderBandwidth,
            format!(
                "CXL bandwidth (max {} GB/s) must stay below remote DRAM bandwidth (min {} GB/s)",
                max(&cxl_bw),
                min(&dram_remote_bw)
            ),
        );
    }
    report
}
