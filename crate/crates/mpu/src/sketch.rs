//! The multiplexed min-value sketch: counter array, streaming update,
//! pairwise estimate, merge, and the binary on-disk format.
//!
//! The structure is an array of `p x m x s` counters `C_k[r][l]` with
//! `p + 2` hashes: `h_k` picks one row per block for a flow, `g` picks a
//! column per time slot, and `phi` assigns each slot a value in
//! `{1..w}`. A counter holds the minimum `phi` value of every item
//! hashed into it, with `w + 1` as the untouched sentinel, so the final
//! state is a pure function of the set of distinct (flow, slot) pairs.

use std::io::{Read, Write};

use crate::hashing::{digest_key, mix64, HashSeed, PairwiseHash, PRIME};
use crate::{Error, Result, DEFAULT_MEMORY_CAP};

const MAGIC: &[u8; 4] = b"MPUS";
const FORMAT_VERSION: u16 = 1;

/// Sketch dimensions: `p` blocks, `m` rows per block, `s` columns per
/// row, and the value-hash range `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MpuParams {
    pub p: u64,
    pub m: u64,
    pub s: u64,
    pub w: u64,
}

impl MpuParams {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.m == 0 || self.s == 0 || self.w == 0 {
            return Err(Error::InvalidParams(format!("zero dimension in {self:?}")));
        }
        if self.w == u64::MAX {
            return Err(Error::InvalidParams("w + 1 must fit in 64 bits".into()));
        }
        if self.w >= PRIME {
            return Err(Error::InvalidParams("w must be below the hash modulus".into()));
        }
        Ok(())
    }

    pub fn counter_count(&self) -> u128 {
        self.p as u128 * self.m as u128 * self.s as u128
    }

    /// Smallest power-of-two counter width holding `w + 1`.
    pub fn counter_width(&self) -> CounterWidth {
        CounterWidth::for_max_value(self.w + 1)
    }

    /// Exact counter memory in bytes at the chosen width.
    pub fn memory_bytes(&self) -> u128 {
        self.counter_count() * (self.counter_width().bits() as u128 / 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterWidth {
    W8,
    W16,
    W32,
    W64,
}

impl CounterWidth {
    pub fn for_max_value(v: u64) -> Self {
        if v <= u8::MAX as u64 {
            CounterWidth::W8
        } else if v <= u16::MAX as u64 {
            CounterWidth::W16
        } else if v <= u32::MAX as u64 {
            CounterWidth::W32
        } else {
            CounterWidth::W64
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            CounterWidth::W8 => 8,
            CounterWidth::W16 => 16,
            CounterWidth::W32 => 32,
            CounterWidth::W64 => 64,
        }
    }

    fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            8 => Ok(CounterWidth::W8),
            16 => Ok(CounterWidth::W16),
            32 => Ok(CounterWidth::W32),
            64 => Ok(CounterWidth::W64),
            other => Err(Error::Format(format!("bad counter width {other}"))),
        }
    }
}

/// Counter storage at the width chosen for `w + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Counters {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl Counters {
    fn filled(width: CounterWidth, len: usize, value: u64) -> Self {
        match width {
            CounterWidth::W8 => Counters::U8(vec![value as u8; len]),
            CounterWidth::W16 => Counters::U16(vec![value as u16; len]),
            CounterWidth::W32 => Counters::U32(vec![value as u32; len]),
            CounterWidth::W64 => Counters::U64(vec![value; len]),
        }
    }

    #[inline]
    fn get(&self, idx: usize) -> u64 {
        match self {
            Counters::U8(v) => v[idx] as u64,
            Counters::U16(v) => v[idx] as u64,
            Counters::U32(v) => v[idx] as u64,
            Counters::U64(v) => v[idx],
        }
    }

    #[inline]
    fn min_assign(&mut self, idx: usize, value: u64) {
        match self {
            Counters::U8(v) => v[idx] = v[idx].min(value as u8),
            Counters::U16(v) => v[idx] = v[idx].min(value as u16),
            Counters::U32(v) => v[idx] = v[idx].min(value as u32),
            Counters::U64(v) => v[idx] = v[idx].min(value),
        }
    }

    fn len(&self) -> usize {
        match self {
            Counters::U8(v) => v.len(),
            Counters::U16(v) => v.len(),
            Counters::U32(v) => v.len(),
            Counters::U64(v) => v.len(),
        }
    }

    fn merge_min(&mut self, other: &Counters) {
        match (self, other) {
            (Counters::U8(a), Counters::U8(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = (*x).min(*y))
            }
            (Counters::U16(a), Counters::U16(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = (*x).min(*y))
            }
            (Counters::U32(a), Counters::U32(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = (*x).min(*y))
            }
            (Counters::U64(a), Counters::U64(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = (*x).min(*y))
            }
            _ => unreachable!("width is a function of params"),
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            Counters::U8(v) => out.extend_from_slice(v),
            Counters::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Counters::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Counters::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// How column agreement is counted in the estimate.
///
/// `Literal` counts a column whenever all `2p` counters are equal,
/// including columns no key touched. `Strict` additionally requires the
/// shared minimum to be a real value (`<= w`). `Literal` is the default;
/// the two differ only through untouched columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgreementRule {
    #[default]
    Literal,
    Strict,
}

/// The accumulators of the pairwise estimate, exposed for testing and
/// reporting: `a` agreeing columns, `b` columns with a real minimum,
/// `c` the sum of column minima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct EstimateBreakdown {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    /// Value-hash range of the sketch that produced this breakdown.
    pub w: u64,
}

impl EstimateBreakdown {
    /// The correlation estimate as an exact fraction.
    ///
    /// Counters live on the discrete grid `{1..w+1}`; dividing by `w + 1`
    /// maps them onto the unit interval where the `a * b / c` estimator
    /// is calibrated, so the returned fraction is
    /// `a * b * (w + 1) / c`. Defined as 0 when `b == 0` (no column
    /// carries a real value) or `c == 0`.
    pub fn fraction(&self) -> (u128, u128) {
        if self.b == 0 || self.c == 0 {
            return (0, 1);
        }
        (
            self.a as u128 * self.b as u128 * (self.w as u128 + 1),
            self.c as u128,
        )
    }

    pub fn value(&self) -> f64 {
        let (num, den) = self.fraction();
        num as f64 / den as f64
    }

    /// Exact fraction comparison without overflow (continued-fraction
    /// descent), used for median selection.
    pub fn cmp_value(&self, other: &Self) -> std::cmp::Ordering {
        let (n1, d1) = self.fraction();
        let (n2, d2) = other.fraction();
        cmp_frac(n1, d1, n2, d2)
    }
}

fn cmp_frac(mut n1: u128, mut d1: u128, mut n2: u128, mut d2: u128) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    loop {
        let (q1, r1) = (n1 / d1, n1 % d1);
        let (q2, r2) = (n2 / d2, n2 % d2);
        match q1.cmp(&q2) {
            Ordering::Equal => {}
            other => return other,
        }
        match (r1 == 0, r2 == 0) {
            (true, true) => return Ordering::Equal,
            (true, false) => return Ordering::Less,
            (false, true) => return Ordering::Greater,
            (false, false) => {}
        }
        // q parts equal: compare fractional parts r/d, i.e. d/r inverted.
        (n1, d1, n2, d2) = (d2, r2, d1, r1);
    }
}

/// The multiplexed min-value sketch.
///
/// Single writer at a time; estimates must run against a quiescent
/// sketch. Distinct sketches may be updated fully in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct MpuSketch {
    params: MpuParams,
    epoch_len: u64,
    master_seed: HashSeed,
    row_hashes: Vec<PairwiseHash>,
    col_hash: PairwiseHash,
    value_hash: PairwiseHash,
    counters: Counters,
}

impl MpuSketch {
    /// Builds a fresh sketch with every counter at `w + 1`. The `p + 2`
    /// hashes are derived from the seed with fixed indices: `h_k` at
    /// `k - 1`, `g` at `p`, `phi` at `p + 1`.
    ///
    /// The sketch itself has no epoch bound; wrap with
    /// [`MpuSketch::with_epoch_len`] to reject out-of-epoch slots.
    pub fn new(params: MpuParams, master_seed: HashSeed) -> Result<Self> {
        Self::with_memory_cap(params, master_seed, DEFAULT_MEMORY_CAP)
    }

    pub fn with_memory_cap(params: MpuParams, master_seed: HashSeed, cap: u64) -> Result<Self> {
        params.validate()?;
        let bytes = params.memory_bytes();
        if bytes > cap as u128 {
            return Err(Error::MemoryCap {
                needed: bytes.min(u64::MAX as u128) as u64,
                cap,
            });
        }
        let count = usize::try_from(params.counter_count())
            .map_err(|_| Error::InvalidParams("counter count exceeds address space".into()))?;
        let row_hashes = (0..params.p)
            .map(|k| PairwiseHash::new(master_seed, k, params.m))
            .collect::<Result<Vec<_>>>()?;
        let col_hash = PairwiseHash::new(master_seed, params.p, params.s)?;
        let value_hash = PairwiseHash::new(master_seed, params.p + 1, params.w)?;
        Ok(Self {
            params,
            epoch_len: u64::MAX,
            master_seed,
            row_hashes,
            col_hash,
            value_hash,
            counters: Counters::filled(params.counter_width(), count, params.w + 1),
        })
    }

    /// Sets the epoch bound enforced by [`MpuSketch::update`].
    pub fn with_epoch_len(mut self, epoch_len: u64) -> Self {
        self.epoch_len = epoch_len;
        self
    }

    pub fn params(&self) -> &MpuParams {
        &self.params
    }

    pub fn master_seed(&self) -> HashSeed {
        self.master_seed
    }

    pub fn epoch_len(&self) -> u64 {
        self.epoch_len
    }

    pub fn row_hashes(&self) -> &[PairwiseHash] {
        &self.row_hashes
    }

    pub fn col_hash(&self) -> &PairwiseHash {
        &self.col_hash
    }

    pub fn value_hash(&self) -> &PairwiseHash {
        &self.value_hash
    }

    pub fn counter(&self, block: u64, row: u64, col: u64) -> u64 {
        self.counters.get(self.index(block, row, col))
    }

    pub fn memory_bytes(&self) -> u64 {
        self.params.memory_bytes() as u64
    }

    #[inline]
    fn index(&self, block: u64, row: u64, col: u64) -> usize {
        ((block * self.params.m + row) * self.params.s + col) as usize
    }

    /// One streaming step: for each block `k`, the counter
    /// `C_k[h_k(key)][g(slot)]` drops to `min(current, phi(slot))`.
    /// Touches exactly `p` counters; idempotent per (key, slot).
    #[inline]
    pub fn update(&mut self, key: u64, slot: u64) -> Result<()> {
        if slot >= self.epoch_len {
            return Err(Error::SlotOutOfRange {
                slot,
                epoch_len: self.epoch_len,
            });
        }
        self.apply(key, slot);
        Ok(())
    }

    /// Update with an arbitrary item type in place of the time slot:
    /// `g` and `phi` are evaluated on `type_key`. No epoch bound.
    #[inline]
    pub fn update_typed(&mut self, key: u64, type_key: u64) {
        self.apply(key, type_key);
    }

    #[inline]
    fn apply(&mut self, key: u64, item: u64) {
        // Spread the item through the mixer first: affine hashes applied
        // directly to small sequential slot values inherit their lattice
        // structure (column/value collisions come in difference classes),
        // which measurably inflates estimator variance. Composing with a
        // fixed bijection preserves pairwise independence.
        let item = mix64(item);
        let col = self.col_hash.eval(item) - 1;
        let value = self.value_hash.eval(item);
        for k in 0..self.params.p {
            let row = self.row_hashes[k as usize].eval(key) - 1;
            let idx = self.index(k, row, col);
            self.counters.min_assign(idx, value);
        }
    }

    /// Pairwise estimate: per column, `mn`/`mx` over the `2p` counters
    /// the two keys hash to; `a` counts `mn == mx` columns, `b` counts
    /// `mn <= w` columns, `c` sums the minima.
    pub fn estimate(&self, key_i: u64, key_j: u64) -> EstimateBreakdown {
        self.estimate_with(key_i, key_j, AgreementRule::Literal)
    }

    pub fn estimate_with(&self, key_i: u64, key_j: u64, rule: AgreementRule) -> EstimateBreakdown {
        let p = self.params.p as usize;
        let s = self.params.s;
        let mut bases = Vec::with_capacity(2 * p);
        for k in 0..self.params.p {
            let row_i = self.row_hashes[k as usize].eval(key_i) - 1;
            let row_j = self.row_hashes[k as usize].eval(key_j) - 1;
            bases.push(self.index(k, row_i, 0));
            bases.push(self.index(k, row_j, 0));
        }
        let (mut a, mut b, mut c) = (0u64, 0u64, 0u64);
        for col in 0..s as usize {
            let mut mn = u64::MAX;
            let mut mx = 0u64;
            for &base in &bases {
                let v = self.counters.get(base + col);
                mn = mn.min(v);
                mx = mx.max(v);
            }
            if mn == mx && (rule == AgreementRule::Literal || mn <= self.params.w) {
                a += 1;
            }
            if mn <= self.params.w {
                b += 1;
            }
            c += mn;
        }
        EstimateBreakdown {
            a,
            b,
            c,
            w: self.params.w,
        }
    }

    /// Counter-wise minimum; the result equals sketching the
    /// concatenated streams. Requires identical params and seed-derived
    /// hash state.
    pub fn merge(&mut self, other: &MpuSketch) -> Result<()> {
        if self.params != other.params {
            return Err(Error::IncompatibleSketch(format!(
                "params {:?} vs {:?}",
                self.params, other.params
            )));
        }
        if self.master_seed != other.master_seed
            || self.row_hashes != other.row_hashes
            || self.col_hash != other.col_hash
            || self.value_hash != other.value_hash
        {
            return Err(Error::IncompatibleSketch("hash state differs".into()));
        }
        self.counters.merge_min(&other.counters);
        Ok(())
    }

    /// Serializes to the versioned little-endian format:
    /// magic `MPUS`, version u16, counter-width u8, reserved u8,
    /// `p m s w` u64, master seed u64, `p + 2` hash `(a, b)` pairs as
    /// u64 each (`h_1..h_p`, `g`, `phi`), counters row-major (block
    /// outer, row middle, column inner) at the declared width, then a
    /// u64 checksum of all preceding bytes under the crate mixer.
    pub fn save<W: Write>(&self, sink: &mut W) -> Result<()> {
        let bytes = self.to_bytes();
        sink.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.params.counter_width().bits() as u8);
        out.push(0);
        for v in [self.params.p, self.params.m, self.params.s, self.params.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.master_seed.0.to_le_bytes());
        for h in self
            .row_hashes
            .iter()
            .chain([&self.col_hash, &self.value_hash])
        {
            out.extend_from_slice(&h.a().to_le_bytes());
            out.extend_from_slice(&h.b().to_le_bytes());
        }
        self.counters.write_to(&mut out);
        let checksum = digest_key(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn serialized_len(&self) -> usize {
        48 + (self.params.p as usize + 2) * 16
            + self.counters.len() * (self.params.counter_width().bits() as usize / 8)
            + 8
    }

    /// Reads exactly one sketch block from the stream. Loaded sketches
    /// carry no epoch bound.
    pub fn load<R: Read>(source: &mut R) -> Result<Self> {
        let mut header = [0u8; 48];
        read_exact(source, &mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let width = CounterWidth::from_bits(header[6])?;
        if header[7] != 0 {
            return Err(Error::Format("nonzero reserved byte".into()));
        }
        let u = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().unwrap());
        let params = MpuParams {
            p: u(8),
            m: u(16),
            s: u(24),
            w: u(32),
        };
        params.validate().map_err(|e| Error::Format(e.to_string()))?;
        if width != params.counter_width() {
            return Err(Error::Format("counter width does not match w".into()));
        }
        let master_seed = HashSeed(u(40));

        let mut buf = header.to_vec();
        let mut pairs = vec![0u8; (params.p as usize + 2) * 16];
        read_exact(source, &mut pairs)?;
        buf.extend_from_slice(&pairs);
        let mut hashes = Vec::with_capacity(params.p as usize + 2);
        for chunk in pairs.chunks(16) {
            let a = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
            let b = u64::from_le_bytes(chunk[8..16].try_into().unwrap());
            hashes.push((a, b));
        }

        let count = usize::try_from(params.counter_count())
            .map_err(|_| Error::Format("counter count exceeds address space".into()))?;
        let step = width.bits() as usize / 8;
        let mut raw = vec![0u8; count * step];
        read_exact(source, &mut raw)?;
        buf.extend_from_slice(&raw);

        let mut checksum_bytes = [0u8; 8];
        read_exact(source, &mut checksum_bytes)?;
        if u64::from_le_bytes(checksum_bytes) != digest_key(&buf) {
            return Err(Error::Format("checksum mismatch".into()));
        }

        let counters = decode_counters(&raw, width);
        let sentinel = params.w + 1;
        for i in 0..count {
            let v = counters.get(i);
            if v == 0 || v > sentinel {
                return Err(Error::Format(format!("counter value {v} out of range")));
            }
        }

        let row_hashes = hashes[..params.p as usize]
            .iter()
            .map(|&(a, b)| PairwiseHash::from_parts(a, b, params.m))
            .collect::<Result<Vec<_>>>()?;
        let col_hash = {
            let (a, b) = hashes[params.p as usize];
            PairwiseHash::from_parts(a, b, params.s)?
        };
        let value_hash = {
            let (a, b) = hashes[params.p as usize + 1];
            PairwiseHash::from_parts(a, b, params.w)?
        };

        Ok(Self {
            params,
            epoch_len: u64::MAX,
            master_seed,
            row_hashes,
            col_hash,
            value_hash,
            counters,
        })
    }
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<()> {
    source
        .read_exact(buf)
        .map_err(|_| Error::Format("truncated stream".into()))
}

fn decode_counters(raw: &[u8], width: CounterWidth) -> Counters {
    match width {
        CounterWidth::W8 => Counters::U8(raw.to_vec()),
        CounterWidth::W16 => Counters::U16(
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        CounterWidth::W32 => Counters::U32(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        CounterWidth::W64 => Counters::U64(
            raw.chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}
