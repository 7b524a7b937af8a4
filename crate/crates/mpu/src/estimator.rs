//! Independent sketch copies with median combining, and the planner
//! that turns an accuracy target `(epsilon, delta)` into sketch
//! dimensions.
//!
//! Per-copy estimates have bounded variance but only constant success
//! probability; the median of an odd number of independent copies drives
//! the failure probability below `delta`. The planner's constants are
//! engineering choices: `s = ceil(1 / eps^2)`, `w = ceil(5 |T|^2 / s)`
//! (so the discretization-collision probability `|T|^2 / (2 w s)` stays
//! at or below 1/10), `m = ceil((2 |F|)^(2/p))` bumped until
//! `m^p >= 4 |F|^2` (row-collision probability at most 1/8), and
//! `copies` the smallest odd integer at least `8 ln(1 / delta)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::hashing::HashSeed;
use crate::sketch::{EstimateBreakdown, MpuParams, MpuSketch};
use crate::{Error, Result, DEFAULT_MEMORY_CAP};

/// Accuracy target and problem size fed to the planner.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlanInput {
    pub epsilon: f64,
    pub delta: f64,
    /// Epoch length `|T|` in slots.
    pub epoch_len: u64,
    /// Number of flows (or groups) `|F|` expected to share the sketch pool.
    pub flow_count: u64,
    /// Blocks per sketch; small integers (3..5) in software.
    pub p: u64,
}

impl PlanInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParams(format!(
                "epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParams(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if self.epoch_len == 0 || self.flow_count == 0 || self.p == 0 {
            return Err(Error::InvalidParams(
                "epoch_len, flow_count, and p must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Planned sketch dimensions plus the copy count and epoch bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub p: u64,
    pub m: u64,
    pub s: u64,
    pub w: u64,
    /// Independent sketch copies; always odd.
    pub copies: u64,
    pub epoch_len: u64,
}

impl Plan {
    pub fn params(&self) -> MpuParams {
        MpuParams {
            p: self.p,
            m: self.m,
            s: self.s,
            w: self.w,
        }
    }

    /// Exact ensemble counter memory in bytes.
    pub fn memory_bytes(&self) -> u128 {
        self.copies as u128 * self.params().memory_bytes()
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if self.copies == 0 || self.copies % 2 == 0 {
            return Err(Error::InvalidParams(format!(
                "copies must be odd and positive, got {}",
                self.copies
            )));
        }
        if self.epoch_len == 0 {
            return Err(Error::InvalidParams("epoch_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Computes sketch dimensions for an `(epsilon, delta)` target.
pub fn plan(input: PlanInput) -> Result<Plan> {
    plan_with_cap(input, DEFAULT_MEMORY_CAP)
}

pub fn plan_with_cap(input: PlanInput, cap: u64) -> Result<Plan> {
    input.validate()?;
    let s = (1.0 / (input.epsilon * input.epsilon)).ceil() as u64;
    let t = input.epoch_len as u128;
    let w = (5 * t * t).div_ceil(s as u128);
    let w = u64::try_from(w)
        .map_err(|_| Error::InvalidParams("epoch too long for 64-bit counters".into()))?;
    let mut m = ((2.0 * input.flow_count as f64).powf(2.0 / input.p as f64)).ceil() as u64;
    // Float rounding can land one short of m^p >= 4 |F|^2; fix up exactly.
    let target = 4u128 * input.flow_count as u128 * input.flow_count as u128;
    while pow_saturating(m, input.p) < target {
        m += 1;
    }
    let copies = {
        let c = (8.0 * (1.0 / input.delta).ln()).ceil() as u64;
        let c = c.max(1);
        if c % 2 == 0 {
            c + 1
        } else {
            c
        }
    };
    let plan = Plan {
        p: input.p,
        m,
        s,
        w,
        copies,
        epoch_len: input.epoch_len,
    };
    let bytes = plan.memory_bytes();
    if bytes > cap as u128 {
        return Err(Error::MemoryCap {
            needed: bytes.min(u64::MAX as u128) as u64,
            cap,
        });
    }
    Ok(plan)
}

fn pow_saturating(base: u64, exp: u64) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..exp {
        acc = acc.saturating_mul(base as u128);
    }
    acc
}

/// `copies` independent sketches sharing one plan, combined by median.
///
/// Copies are independent state: they may be updated in parallel when
/// partitioned copy-wise; estimates require all copies quiescent.
#[derive(Debug, Clone, PartialEq)]
pub struct MpuEnsemble {
    plan: Plan,
    master_seed: HashSeed,
    sketches: Vec<MpuSketch>,
}

impl MpuEnsemble {
    /// Builds `copies` sketches with per-copy seeds derived from
    /// `(master_seed, copy index)`.
    pub fn new(plan: Plan, master_seed: HashSeed) -> Result<Self> {
        plan.validate()?;
        let params = plan.params();
        let sketches = (0..plan.copies)
            .map(|c| {
                MpuSketch::new(params, HashSeed(master_seed.derive(c)))
                    .map(|sk| sk.with_epoch_len(plan.epoch_len))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan,
            master_seed,
            sketches,
        })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn master_seed(&self) -> HashSeed {
        self.master_seed
    }

    pub fn sketches(&self) -> &[MpuSketch] {
        &self.sketches
    }

    pub fn sketches_mut(&mut self) -> &mut [MpuSketch] {
        &mut self.sketches
    }

    pub fn memory_bytes(&self) -> u64 {
        self.plan.memory_bytes() as u64
    }

    /// Applies the sketch update to every copy. The slot is validated
    /// once, before any copy mutates.
    pub fn update(&mut self, key: u64, slot: u64) -> Result<()> {
        if slot >= self.plan.epoch_len {
            return Err(Error::SlotOutOfRange {
                slot,
                epoch_len: self.plan.epoch_len,
            });
        }
        for sk in &mut self.sketches {
            sk.update(key, slot)?;
        }
        Ok(())
    }

    /// Typed update on every copy (`g`/`phi` evaluated on `type_key`).
    pub fn update_typed(&mut self, key: u64, type_key: u64) {
        for sk in &mut self.sketches {
            sk.update_typed(key, type_key);
        }
    }

    /// Per-copy estimates in copy order.
    pub fn estimates(&self, key_i: u64, key_j: u64) -> Vec<EstimateBreakdown> {
        self.sketches
            .iter()
            .map(|sk| sk.estimate(key_i, key_j))
            .collect()
    }

    /// The middle order statistic of the per-copy estimates (copies is
    /// odd, so the median is an actual copy's breakdown).
    pub fn estimate_median(&self, key_i: u64, key_j: u64) -> EstimateBreakdown {
        let mut all = self.estimates(key_i, key_j);
        let mid = all.len() / 2;
        all.sort_by(|x, y| x.cmp_value(y));
        all[mid]
    }

    /// Ensemble file: u32 copy count, the per-sketch binary blocks, then
    /// the plan echoed as six u64 fields (`p m s w copies epoch_len`),
    /// all little-endian.
    pub fn save<W: Write>(&self, sink: &mut W) -> Result<()> {
        sink.write_all(&(self.plan.copies as u32).to_le_bytes())?;
        for sk in &self.sketches {
            sk.save(sink)?;
        }
        for v in [
            self.plan.p,
            self.plan.m,
            self.plan.s,
            self.plan.w,
            self.plan.copies,
            self.plan.epoch_len,
        ] {
            sink.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(&mut out).expect("vec write");
        out
    }

    pub fn load<R: Read>(source: &mut R) -> Result<Self> {
        let mut count_bytes = [0u8; 4];
        source
            .read_exact(&mut count_bytes)
            .map_err(|_| Error::Format("truncated ensemble".into()))?;
        let copies = u32::from_le_bytes(count_bytes) as u64;
        if copies == 0 || copies % 2 == 0 {
            return Err(Error::Format(format!("bad copy count {copies}")));
        }
        let mut sketches = Vec::with_capacity(copies as usize);
        for _ in 0..copies {
            sketches.push(MpuSketch::load(source)?);
        }
        let mut tail = [0u8; 48];
        source
            .read_exact(&mut tail)
            .map_err(|_| Error::Format("truncated ensemble plan".into()))?;
        let u = |i: usize| u64::from_le_bytes(tail[i..i + 8].try_into().unwrap());
        let plan = Plan {
            p: u(0),
            m: u(8),
            s: u(16),
            w: u(24),
            copies: u(32),
            epoch_len: u(40),
        };
        plan.validate().map_err(|e| Error::Format(e.to_string()))?;
        if plan.copies != copies {
            return Err(Error::Format("copy count disagrees with plan".into()));
        }
        let params = plan.params();
        for sk in &mut sketches {
            if *sk.params() != params {
                return Err(Error::Format("sketch params disagree with plan".into()));
            }
            *sk = sk.clone().with_epoch_len(plan.epoch_len);
        }
        // The ensemble master seed is not part of the format; the copies'
        // own seeds are authoritative, and estimation and merge only
        // depend on per-sketch state.
        let master_seed = sketches[0].master_seed();
        Ok(Self {
            plan,
            master_seed,
            sketches,
        })
    }
}
