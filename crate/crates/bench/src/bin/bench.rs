//! Benchmark CLI. `run` executes one workload, `sweep-sampling` re-runs a
//! workload across cache-sampling rates, `replay` feeds a CSV op trace
//! through the runner. Omit `--target` to run host and target in one
//! process; pass it (plus `--backing`, pointing at the same image file the
//! target serves) to drive a remote `target` daemon over TCP.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pushdown_bench::metrics::{render_sweep_table, Report};
use pushdown_bench::runner::{self, BenchConfig, Deployment, SystemKind};
use pushdown_bench::workload::{parse_trace, Mix, WorkloadSpec};
use pushdown_kv::Mode;

#[derive(Parser)]
#[command(name = "bench", version, about = "Benchmark the pushdown storage stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload and emit a report.
    Run(RunArgs),
    /// Re-run one workload at several sampling rates (pushdown mode).
    SweepSampling(SweepArgs),
    /// Replay a CSV op trace (`op,key[,value_size]` per line).
    Replay(ReplayArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Storage system under test (lsmkv | btree).
    #[arg(long, default_value = "lsmkv", value_parser = parse_system)]
    system: SystemKind,
    /// Workload mix (ycsb_a..ycsb_f, uniform_read, uniform_5050).
    #[arg(long, default_value = "ycsb_c", value_parser = parse_mix)]
    workload: Mix,
    /// Key-space size; these rows are loaded before measurement.
    #[arg(long, default_value_t = 100_000)]
    keys: u64,
    /// Measured operations.
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    /// Block-cache budget in MiB (fractions allowed; 0 disables caching).
    #[arg(long, default_value_t = 8.0)]
    cache_mb: f64,
    /// Seed for workload generation and cache sampling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Value size in bytes (the B⁺-tree store always stores 64).
    #[arg(long, default_value_t = 100)]
    value_size: usize,
    /// Worker threads replaying the op stream.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Data-path TCP connections (remote runs only).
    #[arg(long, default_value_t = 1)]
    connections: usize,
    /// Ship extent-map updates from a background thread; realistic, but
    /// introduces version-mismatch retries.
    #[arg(long)]
    background_sync: bool,
    /// B⁺-tree node levels (default: smallest feasible height).
    #[arg(long)]
    levels: Option<u32>,
    /// Probability of splitting an allocation across extents (in-process
    /// runs only).
    #[arg(long, default_value_t = 0.0)]
    fragment: f64,
    /// Remote target data address (host:port); omit to run in-process.
    #[arg(long)]
    target: Option<String>,
    /// Remote target extent-sync address (default: data port + 1).
    #[arg(long)]
    sync_target: Option<String>,
    /// Backing image file shared with the remote target.
    #[arg(long)]
    backing: Option<PathBuf>,
    /// Block size of the remote target's device.
    #[arg(long, default_value_t = 512)]
    block_size: u32,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Suppress the human-readable table.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Execution mode (baseline | pushdown).
    #[arg(long, default_value = "pushdown", value_parser = parse_mode)]
    mode: Mode,
    /// Cache-sampling rate in [0, 1].
    #[arg(long, default_value_t = 0.01)]
    sampling: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sampling rates to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.01,0.1,1.0")]
    rates: Vec<f64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Execution mode (baseline | pushdown).
    #[arg(long, default_value = "pushdown", value_parser = parse_mode)]
    mode: Mode,
    /// Cache-sampling rate in [0, 1].
    #[arg(long, default_value_t = 0.01)]
    sampling: f64,
    /// Trace file to replay.
    #[arg(long)]
    trace: PathBuf,
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    SystemKind::parse(s).ok_or_else(|| format!("unknown system {s:?} (expected lsmkv or btree)"))
}

fn parse_mix(s: &str) -> Result<Mix, String> {
    Mix::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mix::all().iter().map(|m| m.name()).collect();
        format!("unknown workload {s:?} (expected one of {})", names.join(", "))
    })
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "baseline" => Ok(Mode::Baseline),
        "pushdown" => Ok(Mode::Pushdown),
        _ => Err(format!("unknown mode {s:?} (expected baseline or pushdown)")),
    }
}

/// `host:port` -> `host:port+1`, the conventional sync port.
fn bump_port(addr: &str) -> Result<String, String> {
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| format!("address {addr:?} is not host:port"))?;
    let port: u16 = port.parse().map_err(|_| format!("bad port in {addr:?}"))?;
    let next = port
        .checked_add(1)
        .ok_or_else(|| format!("no room above port {port} for the sync port"))?;
    Ok(format!("{host}:{next}"))
}

fn config_from(common: &CommonArgs, mode: Mode, sampling: f64) -> Result<BenchConfig, String> {
    let spec = WorkloadSpec::new(common.workload, common.keys, common.ops, common.value_size, common.seed);
    let mut cfg = BenchConfig::new(spec, common.system, mode);
    cfg.cache_bytes = (common.cache_mb * (1u64 << 20) as f64) as u64;
    cfg.sampling_rate = sampling;
    cfg.threads = common.threads;
    cfg.connections = common.connections;
    cfg.background_sync = common.background_sync;
    cfg.tree_levels = common.levels;
    cfg.deployment = match &common.target {
        None => Deployment::InProc { fragment_probability: common.fragment },
        Some(data_addr) => {
            let backing = common
                .backing
                .clone()
                .ok_or("--backing is required with --target (the shared image file)")?;
            let sync_addr = match &common.sync_target {
                Some(s) => s.clone(),
                None => bump_port(data_addr)?,
            };
            Deployment::Tcp {
                data_addr: data_addr.clone(),
                sync_addr,
                backing,
                block_size: common.block_size,
            }
        }
    };
    Ok(cfg)
}

fn finish(common: &CommonArgs, report: &Report) -> Result<(), Box<dyn std::error::Error>> {
    if !common.quiet {
        println!("{}", report.render());
    }
    if let Some(path) = &common.report {
        report.write_json(path)?;
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Run(a) => {
            let cfg = config_from(&a.common, a.mode, a.sampling)?;
            let report = runner::run(&cfg)?;
            finish(&a.common, &report)
        }
        Cmd::SweepSampling(a) => {
            if a.rates.is_empty() {
                return Err("--rates needs at least one value".into());
            }
            let cfg = config_from(&a.common, Mode::Pushdown, 0.0)?;
            let reports = runner::sweep_sampling(&cfg, &a.rates)?;
            if !a.common.quiet {
                println!("{}", render_sweep_table(&reports));
            }
            if let Some(path) = &a.common.report {
                let mut json = serde_json::to_string_pretty(&reports)?;
                json.push('\n');
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Cmd::Replay(a) => {
            let text = std::fs::read_to_string(&a.trace)?;
            let ops = parse_trace(&text)
                .map_err(|e| format!("{}:{}: {}", a.trace.display(), e.line, e.msg))?;
            let mut cfg = config_from(&a.common, a.mode, a.sampling)?;
            cfg.spec.n_ops = ops.len() as u64;
            let stem = a.trace.file_name().map(|s| s.to_string_lossy().into_owned());
            cfg.workload_label = Some(format!("trace:{}", stem.unwrap_or_default()));
            let report = runner::run_ops(&cfg, &ops)?;
            finish(&a.common, &report)
        }
    }
}

fn main() {
    if let Err(e) = real_main(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
