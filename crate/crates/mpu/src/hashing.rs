//! Seedable pairwise-independent hashing over the prime field
//! `P = 2^61 - 1`, plus the key-digesting mixer shared by every other
//! module.
//!
//! All randomness in the crate flows through two primitives defined here:
//!
//! * `mix64` — the splitmix64 finalizer (constants `0xBF58476D1CE4E5B9`,
//!   `0x94D049BB133111EB`, shifts 30/27/31). It is the seed-derivation
//!   mixer, the byte-stream digest, and the serialization checksum.
//! * `PairwiseHash` — `y = (a*x + b) mod P` mapped onto `{1..M}` by
//!   fixed-point scaling `floor(y * M / P) + 1`.
//!
//! The scaled mapping (instead of a second `mod M`) keeps the family
//! order-preserving in `y`: a hash with range `M` is a coarsening of a
//! hash with a larger range built from the same `(a, b)`. The discrete
//! value hash of a sketch is therefore a quantization of a near-continuous
//! reference hash, which the accuracy harness relies on.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mersenne prime modulus for the pairwise-independent family.
pub const PRIME: u64 = (1 << 61) - 1;

/// splitmix64 increment (golden ratio conjugate).
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Master seed for deriving hash parameters and sub-seeds.
///
/// Derivation index `i` yields the `i`-th output of a splitmix64 stream
/// started at the seed, so distinct indices give independent-looking
/// values and the whole structure is reproducible from one `u64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HashSeed(pub u64);

impl HashSeed {
    /// The `index`-th value of the splitmix64 stream seeded here.
    #[inline]
    pub fn derive(self, index: u64) -> u64 {
        mix64(self.0.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1))))
    }
}

/// Reduce a 122-bit product modulo `2^61 - 1`.
#[inline]
fn mod_p(v: u128) -> u64 {
    const P: u128 = PRIME as u128;
    let mut r = (v & P) + (v >> 61);
    r = (r & P) + (r >> 61);
    if r >= P {
        r -= P;
    }
    r as u64
}

/// One member of the pairwise-independent family `h(x) -> {1..M}`.
///
/// Immutable after construction; evaluation is a pure function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseHash {
    a: u64,
    b: u64,
    range: u64,
}

impl PairwiseHash {
    /// Derives `(a, b)` from `(seed, derivation_index)`: two consecutive
    /// mixer outputs at stream positions `2*index` and `2*index + 1`,
    /// reduced into the field. `a == 0` is remapped to 1.
    pub fn new(seed: HashSeed, derivation_index: u64, range: u64) -> Result<Self> {
        if range == 0 || range > PRIME {
            return Err(Error::InvalidParams(format!(
                "hash range must be in [1, 2^61 - 1], got {range}"
            )));
        }
        let mut a = seed.derive(2 * derivation_index) % PRIME;
        if a == 0 {
            a = 1;
        }
        let b = seed.derive(2 * derivation_index + 1) % PRIME;
        Ok(Self { a, b, range })
    }

    /// Rebuilds a hash from serialized coefficients.
    pub fn from_parts(a: u64, b: u64, range: u64) -> Result<Self> {
        if a == 0 || a >= PRIME || b >= PRIME {
            return Err(Error::Format(format!("hash pair ({a}, {b}) outside field")));
        }
        if range == 0 || range > PRIME {
            return Err(Error::Format(format!("hash range {range} invalid")));
        }
        Ok(Self { a, b, range })
    }

    pub fn a(&self) -> u64 {
        self.a
    }

    pub fn b(&self) -> u64 {
        self.b
    }

    pub fn range(&self) -> u64 {
        self.range
    }

    /// Maps a 64-bit key to `{1..M}`.
    #[inline]
    pub fn eval(&self, key: u64) -> u64 {
        let y = self.field_value(key);
        // floor(y * M / P): bucket i receives y in [i*P/M, (i+1)*P/M).
        ((y as u128 * self.range as u128) / PRIME as u128) as u64 + 1
    }

    /// The intermediate field value `(a*x + b) mod P` with `x = key mod P`.
    #[inline]
    pub fn field_value(&self, key: u64) -> u64 {
        let x = key % PRIME;
        mod_p(self.a as u128 * x as u128 + self.b as u128)
    }
}

/// Digests an arbitrary byte string to a stable 64-bit key.
///
/// The input is consumed in 8-byte little-endian chunks (final chunk
/// zero-padded), each folded through `mix64`, with the length folded in
/// last. The mapping is fixed; changing it would invalidate every stored
/// sketch.
pub fn digest_key(raw: &[u8]) -> u64 {
    let mut h = GOLDEN;
    for chunk in raw.chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(buf));
    }
    mix64(h ^ raw.len() as u64)
}
