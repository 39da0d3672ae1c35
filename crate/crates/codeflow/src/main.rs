//! `codeflow` command-line interface: static analysis, execution, host
//! microbenchmarks, and topology validation.
//!
//! Machine output goes to stdout, diagnostics to stderr. Exit codes:
//! 0 clean, 1 run trap / strict lint findings, 2 usage or config errors.

use clap::{Parser, Subcommand, ValueEnum};
use codeflow::engine::HostEnv;
use codeflow::hostbench;
use codeflow::runtime::{self, InitialPlacement, MigrationPolicy, Mode, RunConfig};
use codeflow::topology;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "codeflow", version, about = "Heterogeneous runtime toolkit for CFT programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Jit,
    Aot,
}

#[derive(Subcommand)]
enum Cmd {
    /// Statically profile a program and print per-function device decisions
    Analyze {
        /// CFT program (.cft)
        module: PathBuf,
        /// Compute-intensity ratio threshold for accelerator detection
        #[arg(long, default_value_t = 2.0)]
        r_threshold: f64,
    },
    /// Execute a program against a topology and emit a run report
    Run {
        /// CFT program (.cft)
        module: PathBuf,
        /// Topology JSON document
        #[arg(long)]
        topology: PathBuf,
        #[arg(long, value_enum, default_value = "jit")]
        mode: ModeArg,
        /// Instructions per scheduling quantum
        #[arg(long, default_value_t = 1000)]
        quantum: u64,
        /// Reserved; fixed-seed runs are reproducible
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Enable epoch-based page migration
        #[arg(long)]
        migrate: bool,
        /// Epoch length in executed instructions (with --migrate)
        #[arg(long, requires = "migrate")]
        epoch: Option<u64>,
        /// Page hotness threshold per epoch (with --migrate)
        #[arg(long, requires = "migrate")]
        hot_threshold: Option<u64>,
        /// Region id for the initial placement (default: first region)
        #[arg(long)]
        placement: Option<String>,
        /// Preload a virtual file, e.g. --file 3=input.bin (repeatable)
        #[arg(long = "file", value_name = "FD=PATH")]
        files: Vec<String>,
        /// Write the JSON report here ('-' or omitted: stdout)
        #[arg(long)]
        report: Option<String>,
    },
    /// Pointer-chasing load-latency sweep over a working-set ladder
    BenchChase {
        /// Smallest working-set size (suffixes KiB/MiB/GiB)
        #[arg(long, value_parser = parse_size, default_value = "16KiB")]
        min: u64,
        /// Largest working-set size
        #[arg(long, value_parser = parse_size, default_value = "256MiB")]
        max: u64,
        /// Geometric ladder factor
        #[arg(long, default_value_t = 2.0)]
        factor: f64,
        /// Stride between participating slots
        #[arg(long, value_parser = parse_size, default_value = "64")]
        stride: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dependent loads per timed pass (raised to the chain length)
        #[arg(long, default_value_t = 1 << 20)]
        loads: u64,
        #[arg(long, default_value_t = 5)]
        repeats: u32,
        /// Write CSV here instead of stdout
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write a JSON mirror of the rows
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Streaming-read bandwidth of one working set
    BenchBandwidth {
        /// Working-set size (suffixes KiB/MiB/GiB); sizes below ~1 MiB
        /// measure the cache, not memory
        #[arg(long, value_parser = parse_size, default_value = "256MiB")]
        size: u64,
        #[arg(long, default_value_t = 5)]
        repeats: u32,
    },
    /// Check a topology document; optionally lint the CXL performance ordering
    TopologyValidate {
        /// Topology JSON document
        topology: PathBuf,
        /// Lint the reference latency/bandwidth ordering
        #[arg(long)]
        paper_ordering: bool,
        /// Exit 1 on any finding, warnings included
        #[arg(long)]
        strict: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Errors bubbling out of here are config/usage problems (exit 2); run traps
/// and strict lint findings return exit 1 directly.
fn dispatch(cmd: Cmd) -> Result<ExitCode, String> {
    match cmd {
        Cmd::Analyze { module, r_threshold } => {
            let module = load_module(&module)?;
            let analyses = codeflow::analysis::analyze_module(&module, r_threshold);
            println!("{}", serde_json::to_string_pretty(&analyses).expect("serializable"));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run {
            module,
            topology,
            mode,
            quantum,
            seed,
            migrate,
            epoch,
            hot_threshold,
            placement,
            files,
            report,
        } => {
            let module = Arc::new(load_module(&module)?);
            let topo = load_topology(&topology)?;
            let mut env = HostEnv::new();
            for spec in &files {
                let (fd, path) = spec
                    .split_once('=')
                    .ok_or_else(|| format!("--file expects FD=PATH, got '{spec}'"))?;
                let fd: u32 = fd.parse().map_err(|_| format!("bad fd in --file '{spec}'"))?;
                let data = std::fs::read(path)
                    .map_err(|e| format!("cannot read virtual file '{path}': {e}"))?;
                env = env.with_file(fd, data);
            }
            let migration = migrate.then(|| {
                let mut policy = MigrationPolicy::default();
                if let Some(epoch) = epoch {
                    policy.epoch_instructions = epoch;
                }
                if let Some(hot) = hot_threshold {
                    policy.hot_threshold = hot;
                }
                policy
            });
            let cfg = RunConfig {
                mode: match mode {
                    ModeArg::Jit => Mode::Jit,
                    ModeArg::Aot => Mode::Aot,
                },
                quantum,
                seed,
                migration,
                initial_placement: match placement {
                    Some(region) => InitialPlacement::Region(region),
                    None => InitialPlacement::FirstRegion,
                },
                collect_access_log: false,
            };
            let output = runtime::run(&module, &topo, &cfg, env).map_err(|e| e.to_string())?;
            let json = output.report.to_json();
            match report.as_deref() {
                None | Some("-") => print!("{json}"),
                Some(path) => std::fs::write(path, &json)
                    .map_err(|e| format!("cannot write report '{path}': {e}"))?,
            }
            if output.report.trapped() {
                eprintln!("run ended abnormally: {:?}", output.report.exit);
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::BenchChase { min, max, factor, stride, seed, loads, repeats, csv, json } => {
            let rows = hostbench::sweep(min, max, factor, stride, seed, loads, repeats)
                .map_err(|e| e.to_string())?;
            let csv_text = hostbench::rows_to_csv(&rows);
            match csv {
                None => print!("{csv_text}"),
                Some(path) => std::fs::write(&path, &csv_text)
                    .map_err(|e| format!("cannot write CSV '{}': {e}", path.display()))?,
            }
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&rows).expect("serializable");
                std::fs::write(&path, text)
                    .map_err(|e| format!("cannot write JSON '{}': {e}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::BenchBandwidth { size, repeats } => {
            if size < 8 || size % 8 != 0 {
                return Err(format!("size must be a positive multiple of 8, got {size}"));
            }
            let row = hostbench::measure_bandwidth(size, repeats);
            println!("{}", serde_json::to_string_pretty(&row).expect("serializable"));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TopologyValidate { topology, paper_ordering, strict } => {
            let topo = load_topology(&topology)?;
            let report = topology::validate_topology(&topo, paper_ordering);
            println!(
                "{}",
                serde_json::to_string_pretty(&report.findings).expect("serializable")
            );
            if report.has_errors() || (strict && !report.is_empty()) {
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_module(path: &Path) -> Result<codeflow::cft::Module, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read module '{}': {e}", path.display()))?;
    codeflow::cft::parse_module(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_topology(path: &Path) -> Result<topology::Topology, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read topology '{}': {e}", path.display()))?;
    topology::load_topology(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Sizes accept binary suffixes KiB/MiB/GiB (case-insensitive) or raw bytes.
fn parse_size(text: &str) -> Result<u64, String> {
    let lower = text.trim().to_ascii_lowercase();
    let (digits, multiplier) = if let Some(d) = lower.strip_suffix("kib") {
        (d, 1024u64)
    } else if let Some(d) = lower.strip_suffix("mib") {
        (d, 1024 * 1024)
    } else if let Some(d) = lower.strip_suffix("gib") {
        (d, 1024 * 1024 * 1024)
    } else {
        (lower.as_str(), 1)
    };
    let value: u64 = digits
        .trim()
        .parse()
        .map_err(|_| format!("invalid size '{text}' (expected bytes or KiB/MiB/GiB)"))?;
    value
        .checked_mul(multiplier)
        .ok_or_else(|| format!("size '{text}' overflows"))
}
