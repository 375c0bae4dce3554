//! Run metrics: latency summaries, the order-independent result digest, and
//! the JSON report emitted by every benchmark run.
//!
//! The digest folds each op's observed result into one XOR accumulator, so
//! partitioning the stream across worker threads cannot change it; two runs
//! over the same op stream that observe the same values always agree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fnv1a;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_us: u64,
    pub p99_us: u64,
    pub mean_us: f64,
    pub max_us: u64,
}

/// Nearest-rank percentile over a sorted slice.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize_latencies(mut samples_us: Vec<u64>) -> LatencySummary {
    if samples_us.is_empty() {
        return LatencySummary::default();
    }
    samples_us.sort_unstable();
    let sum: u64 = samples_us.iter().sum();
    LatencySummary {
        p50_us: percentile(&samples_us, 50.0),
        p99_us: percentile(&samples_us, 99.0),
        mean_us: sum as f64 / samples_us.len() as f64,
        max_us: *samples_us.last().unwrap(),
    }
}

/// XOR-of-hashes digest over per-op results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Digest(u64);

impl Digest {
    pub fn fold_read(&mut self, op_index: u64, key: u64, value: Option<&[u8]>) {
        let mut buf = Vec::with_capacity(17 + value.map_or(0, <[u8]>::len));
        buf.extend_from_slice(&op_index.to_le_bytes());
        buf.extend_from_slice(&key.to_le_bytes());
        match value {
            Some(v) => {
                buf.push(1);
                buf.extend_from_slice(v);
            }
            None => buf.push(0),
        }
        self.0 ^= fnv1a(&buf);
    }

    pub fn fold_write(&mut self, op_index: u64, key: u64) {
        let mut buf = [0u8; 17];
        buf[..8].copy_from_slice(&op_index.to_le_bytes());
        buf[8..16].copy_from_slice(&key.to_le_bytes());
        buf[16] = 2;
        self.0 ^= fnv1a(&buf);
    }

    pub fn merge(&mut self, other: Digest) {
        self.0 ^= other.0;
    }

    pub fn hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

/// One run's results. Field names are the report schema; they are stable
/// and documented in the repository README.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub system: String,
    pub mode: String,
    pub workload: String,
    pub distribution: String,
    pub n_keys: u64,
    pub n_ops: u64,
    pub value_size: u32,
    pub seed: u64,
    pub cache_bytes: u64,
    pub sampling_rate: f64,
    pub threads: usize,
    pub connections: usize,
    pub elapsed_s: f64,
    pub throughput_ops_per_s: f64,
    pub latency_us: LatencySummary,
    pub reads: u64,
    pub read_absent: u64,
    pub writes: u64,
    pub round_trips: u64,
    pub resubmissions: u64,
    pub device_reads: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub sampled_count: u64,
    pub mismatch_count: u64,
    pub fallback_count: u64,
    pub local_answers: u64,
    pub memtable_hits: u64,
    pub row_cache_hits: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hit_rate: f64,
    pub result_digest: String,
}

impl Report {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        text.push('\n');
        std::fs::write(path, text)
    }

    /// Human-readable two-column table.
    pub fn render(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("system", self.system.clone()),
            ("mode", self.mode.clone()),
            ("workload", format!("{} ({})", self.workload, self.distribution)),
            ("keys / ops", format!("{} / {}", self.n_keys, self.n_ops)),
            ("cache bytes", self.cache_bytes.to_string()),
            ("sampling rate", format!("{}", self.sampling_rate)),
            ("elapsed", format!("{:.3} s", self.elapsed_s)),
            ("throughput", format!("{:.0} ops/s", self.throughput_ops_per_s)),
            (
                "latency p50/p99",
                format!("{} / {} µs", self.latency_us.p50_us, self.latency_us.p99_us),
            ),
            ("reads (absent)", format!("{} ({})", self.reads, self.read_absent)),
            ("writes", self.writes.to_string()),
            ("round trips", self.round_trips.to_string()),
            ("resubmissions", self.resubmissions.to_string()),
            ("device reads", self.device_reads.to_string()),
            (
                "bytes sent/received",
                format!("{} / {}", self.bytes_sent, self.bytes_received),
            ),
            ("sampled reads", self.sampled_count.to_string()),
            ("version mismatches", self.mismatch_count.to_string()),
            ("fallbacks", self.fallback_count.to_string()),
            ("local answers", self.local_answers.to_string()),
            (
                "cache hits/misses",
                format!(
                    "{} / {} ({:.1}%)",
                    self.cache_hits,
                    self.cache_misses,
                    self.cache_hit_rate * 100.0
                ),
            ),
            ("result digest", self.result_digest.clone()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("  {k:width$}  {v}\n"));
        }
        out
    }
}

/// Compact per-rate table for sampling sweeps.
pub fn render_sweep_table(reports: &[Report]) -> String {
    let mut out = String::from(
        "  rate      ops/s         hit%   bytes_recv/op   sampled\n",
    );
    for r in reports {
        let per_op = if r.n_ops == 0 { 0.0 } else { r.bytes_received as f64 / r.n_ops as f64 };
        out.push_str(&format!(
            "  {:<8} {:>12.0} {:>7.1} {:>15.1} {:>9}\n",
            r.sampling_rate,
            r.throughput_ops_per_s,
            r.cache_hit_rate * 100.0,
            per_op,
            r.sampled_count,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_match_nearest_rank_oracle() {
        let s = summarize_latencies((1..=100).collect());
        assert_eq!(s.p50_us, 50);
        assert_eq!(s.p99_us, 99);
        assert_eq!(s.max_us, 100);
        assert!((s.mean_us - 50.5).abs() < 1e-9);

        let one = summarize_latencies(vec![7]);
        assert_eq!((one.p50_us, one.p99_us, one.max_us), (7, 7, 7));
        assert_eq!(summarize_latencies(vec![]), LatencySummary::default());
    }

    #[test]
    fn digest_is_order_independent_and_marker_sensitive() {
        let mut a = Digest::default();
        a.fold_read(0, 5, Some(b"xy"));
        a.fold_write(1, 9);
        let mut b = Digest::default();
        b.fold_write(1, 9);
        b.fold_read(0, 5, Some(b"xy"));
        assert_eq!(a, b);

        let mut absent = Digest::default();
        absent.fold_read(0, 5, None);
        let mut empty = Digest::default();
        empty.fold_read(0, 5, Some(b""));
        assert_ne!(absent, empty);

        let mut merged = Digest::default();
        let mut half = Digest::default();
        half.fold_read(0, 5, Some(b"xy"));
        merged.fold_write(1, 9);
        merged.merge(half);
        assert_eq!(merged, a);
        assert_eq!(a.hex().len(), 16);
    }

    #[test]
    fn report_json_round_trips() {
        let r = Report {
            schema_version: 1,
            system: "lsmkv".into(),
            mode: "pushdown".into(),
            workload: "ycsb_b".into(),
            distribution: "zipfian".into(),
            n_keys: 10,
            n_ops: 20,
            value_size: 100,
            seed: 42,
            cache_bytes: 1 << 20,
            sampling_rate: 0.01,
            threads: 1,
            connections: 1,
            elapsed_s: 0.5,
            throughput_ops_per_s: 40.0,
            latency_us: LatencySummary { p50_us: 10, p99_us: 20, mean_us: 11.0, max_us: 25 },
            reads: 15,
            read_absent: 1,
            writes: 5,
            round_trips: 7,
            resubmissions: 3,
            device_reads: 9,
            bytes_sent: 100,
            bytes_received: 200,
            sampled_count: 1,
            mismatch_count: 0,
            fallback_count: 0,
            local_answers: 2,
            memtable_hits: 3,
            row_cache_hits: 4,
            cache_hits: 5,
            cache_misses: 6,
            cache_hit_rate: 5.0 / 11.0,
            result_digest: "00ff".into(),
        };
        let text = r.to_json().unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back.result_digest, r.result_digest);
        assert_eq!(back.latency_us, r.latency_us);
        assert!(!r.render().is_empty());
        assert!(render_sweep_table(&[r]).lines().count() == 2);
    }
}
