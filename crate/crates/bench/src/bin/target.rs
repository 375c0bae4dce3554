//! Storage-target daemon. Serves block reads and pushdown capsules on the
//! data port and extent-map synchronization on the sync port, backed by an
//! image file that clients on the same machine may open directly for
//! writes.
//!
//! Prints `listening data=ADDR sync=ADDR` once both sockets are bound
//! (pass port 0 to let the OS pick), then reads admin commands from stdin:
//! `stats` dumps the request counters, `quit` exits. On stdin EOF the
//! daemon parks and serves until killed.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use pushdown_core::block::BlockDevice;
use pushdown_core::functions::{FN_BTREE_LOOKUP, FN_BTREE_RANGE, FN_SST_CHAIN};
use pushdown_core::net::TargetServer;
use pushdown_core::sync::ReplicaStore;
use pushdown_core::target::{ExecutionLimits, TargetEngine};

#[derive(Parser)]
#[command(name = "target", version, about = "Pushdown storage target")]
struct Cli {
    /// Data-path listen address (0 port = OS-assigned).
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Extent-sync listen address.
    #[arg(long, default_value = "127.0.0.1:7071")]
    sync_listen: String,
    /// Backing image file; created and sized if missing.
    #[arg(long)]
    backing: PathBuf,
    /// Device block size in bytes.
    #[arg(long, default_value_t = 512)]
    block_size: u32,
    /// Device capacity in blocks.
    #[arg(long, default_value_t = 1 << 16)]
    capacity_blocks: u64,
}

fn fn_name(id: u32) -> &'static str {
    match id {
        FN_BTREE_LOOKUP => "btree_lookup",
        FN_BTREE_RANGE => "btree_range",
        FN_SST_CHAIN => "sst_chain",
        _ => "unknown",
    }
}

fn print_stats(engine: &TargetEngine) {
    let s = engine.stats();
    println!(
        "plain_reads={} plain_bytes={} pushdowns={} version_mismatches={} io_errors={} limit_exceeded={}",
        s.plain_reads, s.plain_bytes, s.pushdowns, s.version_mismatches, s.io_errors, s.limit_exceeded
    );
    for (id, f) in &s.per_fn {
        println!(
            "fn {id} ({}): calls={} completed={} resubmissions={} device_reads={} fallbacks={} errors={}",
            fn_name(*id), f.calls, f.completed, f.resubmissions, f.device_reads, f.fallbacks, f.errors
        );
    }
}

fn serve(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let device = Arc::new(BlockDevice::file(&cli.backing, cli.block_size, cli.capacity_blocks)?);
    let replicas = ReplicaStore::new();
    let engine = TargetEngine::with_standard_functions(
        device,
        replicas.clone(),
        ExecutionLimits::default(),
    );
    let server = TargetServer::start(
        engine.clone(),
        replicas,
        &cli.listen,
        &cli.sync_listen,
        cli.block_size,
    )?;
    println!("listening data={} sync={}", server.data_addr(), server.sync_addr());
    std::io::stdout().flush()?;

    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        match line?.trim() {
            "stats" => print_stats(&engine),
            "quit" | "exit" => return Ok(()),
            "" => {}
            other => eprintln!("unknown command {other:?} (try: stats, quit)"),
        }
        std::io::stdout().flush()?;
    }
    // Stdin closed: run as a daemon until killed.
    loop {
        std::thread::park();
    }
}

fn main() {
    if let Err(e) = serve(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
