//! Deterministic operation streams for the benchmark runner.
//!
//! A [`WorkloadSpec`] names one of the stock YCSB-style mixes, a key
//! distribution, and sizing; [`generate`] expands it into a concrete op
//! stream. All randomness flows from one seeded ChaCha8 stream, so the same
//! spec always yields byte-identical ops — paired baseline/pushdown runs
//! replay exactly the same work.
//!
//! The Zipfian generator is the standard rejection-free construction
//! (precomputed zeta, closed-form inverse); ranks are scrambled across the
//! keyspace with FNV so popularity is independent of key order. The
//! `latest` distribution draws a Zipfian rank over insertion recency:
//! rank 0 is the newest key, and the generator's item count grows as the
//! stream inserts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fnv1a;

/// Skew used by every Zipfian-flavoured mix.
pub const ZIPF_THETA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mix {
    /// 50% read / 50% update.
    YcsbA,
    /// 95% read / 5% update.
    YcsbB,
    /// 100% read.
    YcsbC,
    /// 95% read / 5% insert, reads skewed toward recent inserts.
    YcsbD,
    /// 50% read / 50% read-modify-write.
    YcsbF,
    /// 100% read, uniform keys.
    UniformRead,
    /// 50% read / 50% update, uniform keys.
    Uniform5050,
}

impl Mix {
    pub fn parse(s: &str) -> Option<Mix> {
        Some(match s {
            "ycsb_a" => Mix::YcsbA,
            "ycsb_b" => Mix::YcsbB,
            "ycsb_c" => Mix::YcsbC,
            "ycsb_d" => Mix::YcsbD,
            "ycsb_f" => Mix::YcsbF,
            "uniform_read" => Mix::UniformRead,
            "uniform_5050" => Mix::Uniform5050,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mix::YcsbA => "ycsb_a",
            Mix::YcsbB => "ycsb_b",
            Mix::YcsbC => "ycsb_c",
            Mix::YcsbD => "ycsb_d",
            Mix::YcsbF => "ycsb_f",
            Mix::UniformRead => "uniform_read",
            Mix::Uniform5050 => "uniform_5050",
        }
    }

    pub fn all() -> [Mix; 7] {
        [
            Mix::YcsbA,
            Mix::YcsbB,
            Mix::YcsbC,
            Mix::YcsbD,
            Mix::YcsbF,
            Mix::UniformRead,
            Mix::Uniform5050,
        ]
    }

    fn read_fraction(self) -> f64 {
        match self {
            Mix::YcsbA | Mix::YcsbF | Mix::Uniform5050 => 0.5,
            Mix::YcsbB | Mix::YcsbD => 0.95,
            Mix::YcsbC | Mix::UniformRead => 1.0,
        }
    }

    fn write_kind(self) -> OpKind {
        match self {
            Mix::YcsbD => OpKind::Insert,
            Mix::YcsbF => OpKind::ReadModifyWrite,
            _ => OpKind::Update,
        }
    }

    pub fn default_distribution(self) -> Distribution {
        match self {
            Mix::YcsbD => Distribution::Latest,
            Mix::UniformRead | Mix::Uniform5050 => Distribution::Uniform,
            _ => Distribution::Zipfian { theta: ZIPF_THETA },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Zipfian { theta: f64 },
    Uniform,
    /// Zipfian over insertion recency; rank 0 is the newest key.
    Latest,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::Zipfian { .. } => "zipfian",
            Distribution::Uniform => "uniform",
            Distribution::Latest => "latest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub mix: Mix,
    pub distribution: Distribution,
    /// Keys preloaded before the measured phase, named 0..n_keys.
    pub n_keys: u64,
    pub n_ops: u64,
    pub value_size: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(mix: Mix, n_keys: u64, n_ops: u64, value_size: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            mix,
            distribution: mix.default_distribution(),
            n_keys,
            n_ops,
            value_size,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Update,
    /// Write of a brand-new key (one past the current population).
    Insert,
    /// Read followed by an update of the same key.
    ReadModifyWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub kind: OpKind,
    pub key: u64,
    /// 0 means "use the runner's configured value size".
    pub value_size: u32,
}

/// Rejection-free Zipfian over ranks `0..items` (rank 0 most popular).
///
/// `extend` grows the rank space incrementally — the zeta sum is extended
/// rather than recomputed, so per-insert cost in `latest` streams is O(1).
pub struct Zipfian {
    items: u64,
    theta: f64,
    alpha: f64,
    zetan: f64,
    zeta2: f64,
    eta: f64,
}

fn zeta_span(from: u64, to: u64, theta: f64) -> f64 {
    (from + 1..=to).map(|i| 1.0 / (i as f64).powf(theta)).sum()
}

impl Zipfian {
    pub fn new(items: u64, theta: f64) -> Zipfian {
        assert!(items >= 1, "zipfian needs at least one item");
        assert!(theta > 0.0 && theta < 1.0, "theta must be in (0, 1)");
        let mut z = Zipfian {
            items,
            theta,
            alpha: 1.0 / (1.0 - theta),
            zetan: zeta_span(0, items, theta),
            zeta2: zeta_span(0, 2, theta),
            eta: 0.0,
        };
        z.eta = z.compute_eta();
        z
    }

    fn compute_eta(&self) -> f64 {
        (1.0 - (2.0 / self.items as f64).powf(1.0 - self.theta))
            / (1.0 - self.zeta2 / self.zetan)
    }

    pub fn items(&self) -> u64 {
        self.items
    }

    pub fn extend(&mut self, items: u64) {
        if items <= self.items {
            return;
        }
        self.zetan += zeta_span(self.items, items, self.theta);
        self.items = items;
        self.eta = self.compute_eta();
    }

    pub fn next_rank<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let uz = u * self.zetan;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + 0.5f64.powf(self.theta) {
            return 1;
        }
        let rank = (self.items as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        rank.min(self.items - 1)
    }
}

/// Expand a spec into its op stream. Same spec ⇒ identical stream.
pub fn generate(spec: &WorkloadSpec) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_keys.max(1);
    let mut zipf = match spec.distribution {
        Distribution::Zipfian { theta } => Some(Zipfian::new(n, theta)),
        Distribution::Latest => Some(Zipfian::new(n, ZIPF_THETA)),
        Distribution::Uniform => None,
    };
    let mut population = n;
    let mut ops = Vec::with_capacity(spec.n_ops as usize);
    for _ in 0..spec.n_ops {
        let kind = if rng.random::<f64>() < spec.mix.read_fraction() {
            OpKind::Read
        } else {
            spec.mix.write_kind()
        };
        let key = if kind == OpKind::Insert {
            let k = population;
            population += 1;
            if matches!(spec.distribution, Distribution::Latest) {
                zipf.as_mut().unwrap().extend(population);
            }
            k
        } else {
            match spec.distribution {
                Distribution::Uniform => rng.random_range(0..population),
                Distribution::Zipfian { .. } => {
                    let rank = zipf.as_ref().unwrap().next_rank(&mut rng);
                    fnv1a(&rank.to_le_bytes()) % n
                }
                Distribution::Latest => {
                    let rank = zipf.as_ref().unwrap().next_rank(&mut rng);
                    population - 1 - rank
                }
            }
        };
        ops.push(Op { kind, key, value_size: spec.value_size as u32 });
    }
    ops
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic value payload for a (key, write-tag) pair. The load phase
/// uses tag 0; op `i` of the measured stream writes tag `i + 1`, so every
/// version a run can observe is reconstructible.
pub fn value_bytes(key: u64, tag: u64, len: usize) -> Vec<u8> {
    let mut state = key
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut v = Vec::with_capacity(len + 8);
    while v.len() < len {
        v.extend_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    v.truncate(len);
    v
}

#[derive(Debug, thiserror::Error)]
#[error("trace line {line}: {msg}")]
pub struct TraceError {
    pub line: usize,
    pub msg: String,
}

/// Parse a replay trace: one op per line, `op,key,value_size`, where `op`
/// is read | update | insert | rmw. Blank lines, `#` comments, and an
/// `op,key,value_size` header are skipped. A missing or empty size means
/// "use the runner's default".
pub fn parse_trace(text: &str) -> Result<Vec<Op>, TraceError> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| TraceError { line: idx + 1, msg };
        let mut fields = line.split(',').map(str::trim);
        let op = fields.next().unwrap_or("");
        if op.eq_ignore_ascii_case("op") {
            continue; // header row
        }
        let kind = match op {
            "read" => OpKind::Read,
            "update" => OpKind::Update,
            "insert" => OpKind::Insert,
            "rmw" | "read_modify_write" => OpKind::ReadModifyWrite,
            other => return Err(err(format!("unknown op {other:?}"))),
        };
        let key = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| err("missing key".into()))?
            .parse::<u64>()
            .map_err(|e| err(format!("bad key: {e}")))?;
        let value_size = match fields.next() {
            Some("") | None => 0,
            Some(s) => s.parse::<u32>().map_err(|e| err(format!("bad value_size: {e}")))?,
        };
        if fields.next().is_some() {
            return Err(err("expected at most 3 fields".into()));
        }
        ops.push(Op { kind, key, value_size });
    }
    Ok(ops)
}
