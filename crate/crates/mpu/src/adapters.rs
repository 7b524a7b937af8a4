//! Maps group-level, tuple-type, and lagged correlation problems onto
//! plain sketch updates.
//!
//! Groups: update with the group key instead of the flow key; the
//! sketch's distinct-item semantics turn multiple member flows active in
//! one slot into a single effective update (indicator semantics).
//!
//! Lagged correlation `Cor^tau(i, j)`: flow `j` is shadowed by a virtual
//! key whose activity at slot `t - omega` is driven by `j`'s activity at
//! `t`, for lags `omega` in `0..=tau`; estimating against the virtual
//! key then targets the lagged correlation.
//!
//! Related-service tracking: the item type is the tuple (source key,
//! slot), so two services correlate when the same client touches both in
//! the same slot.

use std::collections::HashMap;
use std::io::BufRead;

use serde::Deserialize;

use crate::estimator::MpuEnsemble;
use crate::hashing::digest_key;
use crate::{Error, Result};

/// Many-to-one flow-to-group assignment.
///
/// Unmapped flows pass through as their own groups by default; strict
/// mode turns them into errors instead.
#[derive(Debug, Clone, Default)]
pub struct GroupMap {
    assignment: HashMap<String, String>,
    strict: bool,
}

#[derive(Deserialize)]
struct GroupLine {
    flow: String,
    group: String,
}

impl GroupMap {
    pub fn new(assignment: HashMap<String, String>, strict: bool) -> Self {
        Self { assignment, strict }
    }

    /// Reads NDJSON lines of the form `{"flow": ..., "group": ...}`.
    pub fn from_ndjson<R: BufRead>(reader: R, strict: bool) -> Result<Self> {
        let mut assignment = HashMap::new();
        for (no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: GroupLine = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("group map line {}: {e}", no + 1)))?;
            assignment.insert(parsed.flow, parsed.group);
        }
        Ok(Self { assignment, strict })
    }

    pub fn resolve<'a>(&'a self, flow: &'a str) -> Result<&'a str> {
        match self.assignment.get(flow) {
            Some(group) => Ok(group.as_str()),
            None if self.strict => Err(Error::UnmappedFlow(flow.to_string())),
            None => Ok(flow),
        }
    }

    /// Digest of the group the flow belongs to.
    pub fn resolve_digest(&self, flow: &str) -> Result<u64> {
        Ok(digest_key(self.resolve(flow)?.as_bytes()))
    }
}

/// Lag bound and the namespaced virtual key standing in for the target
/// flow.
#[derive(Debug, Clone, Copy)]
pub struct LagConfig {
    pub tau: u64,
    pub virtual_key: u64,
}

impl LagConfig {
    pub fn for_flow(flow_digest: u64, tau: u64) -> Self {
        Self {
            tau,
            virtual_key: virtual_key_for(flow_digest, tau),
        }
    }
}

/// Deterministic digest of ("lag", flow, tau). The namespace prefix
/// keeps virtual keys out of the raw flow digest space.
pub fn virtual_key_for(flow_digest: u64, tau: u64) -> u64 {
    let mut buf = Vec::with_capacity(7 + 16);
    buf.extend_from_slice(b"mpu:lag");
    buf.extend_from_slice(&flow_digest.to_le_bytes());
    buf.extend_from_slice(&tau.to_le_bytes());
    digest_key(&buf)
}

/// Deterministic digest of ("tuple", source, slot), the item type for
/// related-service tracking.
pub fn tuple_key(src_digest: u64, slot: u64) -> u64 {
    let mut buf = Vec::with_capacity(9 + 16);
    buf.extend_from_slice(b"mpu:tuple");
    buf.extend_from_slice(&src_digest.to_le_bytes());
    buf.extend_from_slice(&slot.to_le_bytes());
    digest_key(&buf)
}

/// Group-level update: the ensemble sees the group key of the flow.
pub fn update_group(
    ensemble: &mut MpuEnsemble,
    group_map: &GroupMap,
    flow: &str,
    slot: u64,
) -> Result<()> {
    let key = group_map.resolve_digest(flow)?;
    ensemble.update(key, slot)
}

/// Lagged update: seeing the shadowed flow at slot `t` activates the
/// virtual key at `t - omega` for every lag in `0..=tau`; lags that
/// would cross the epoch start are skipped.
pub fn update_lagged(ensemble: &mut MpuEnsemble, lag: &LagConfig, slot: u64) -> Result<()> {
    if slot >= ensemble.plan().epoch_len {
        return Err(Error::SlotOutOfRange {
            slot,
            epoch_len: ensemble.plan().epoch_len,
        });
    }
    for omega in 0..=lag.tau {
        let Some(target) = slot.checked_sub(omega) else {
            break;
        };
        ensemble.update(lag.virtual_key, target)?;
    }
    Ok(())
}

/// Related-service update: item type is the (source, slot) tuple.
pub fn update_related(ensemble: &mut MpuEnsemble, service_key: u64, src_key: u64, slot: u64) {
    ensemble.update_typed(service_key, tuple_key(src_key, slot));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::Plan;
    use crate::hashing::HashSeed;

    fn ensemble() -> MpuEnsemble {
        let plan = Plan {
            p: 2,
            m: 32,
            s: 64,
            w: 4096,
            copies: 3,
            epoch_len: 400,
        };
        MpuEnsemble::new(plan, HashSeed(5)).unwrap()
    }

    #[test]
    fn group_map_pass_through_and_strict() {
        let mut map = HashMap::new();
        map.insert("a".to_string(), "g1".to_string());
        let gm = GroupMap::new(map.clone(), false);
        assert_eq!(gm.resolve("a").unwrap(), "g1");
        assert_eq!(gm.resolve("b").unwrap(), "b");

        let strict = GroupMap::new(map, true);
        assert!(strict.resolve("b").is_err());
    }

    #[test]
    fn group_map_ndjson_roundtrip() {
        let src = "{\"flow\":\"a\",\"group\":\"g1\"}\n\n{\"flow\":\"b\",\"group\":\"g1\"}\n";
        let gm = GroupMap::from_ndjson(src.as_bytes(), false).unwrap();
        assert_eq!(gm.resolve("a").unwrap(), "g1");
        assert_eq!(gm.resolve("b").unwrap(), "g1");
        assert!(GroupMap::from_ndjson("not json\n".as_bytes(), false).is_err());
    }

    #[test]
    fn same_group_flows_collapse_to_one_update() {
        let mut map = HashMap::new();
        map.insert("a".to_string(), "g".to_string());
        map.insert("b".to_string(), "g".to_string());
        let gm = GroupMap::new(map, false);

        let mut two = ensemble();
        update_group(&mut two, &gm, "a", 7).unwrap();
        update_group(&mut two, &gm, "b", 7).unwrap();

        let mut one = ensemble();
        one.update(digest_key(b"g"), 7).unwrap();
        assert_eq!(two.to_bytes(), one.to_bytes());
    }

    #[test]
    fn singleton_groups_match_raw_updates() {
        let gm = GroupMap::default();
        let mut grouped = ensemble();
        let mut raw = ensemble();
        for t in 0..100 {
            update_group(&mut grouped, &gm, "flow-x", t).unwrap();
            raw.update(digest_key(b"flow-x"), t).unwrap();
        }
        assert_eq!(grouped.to_bytes(), raw.to_bytes());
    }

    #[test]
    fn lag_zero_is_one_plain_update() {
        let lc = LagConfig::for_flow(digest_key(b"j"), 0);
        let mut lagged = ensemble();
        update_lagged(&mut lagged, &lc, 9).unwrap();
        let mut plain = ensemble();
        plain.update(lc.virtual_key, 9).unwrap();
        assert_eq!(lagged.to_bytes(), plain.to_bytes());
    }

    #[test]
    fn lag_clamps_at_epoch_start() {
        let lc = LagConfig::for_flow(digest_key(b"j"), 3);
        let mut lagged = ensemble();
        update_lagged(&mut lagged, &lc, 1).unwrap();
        let mut manual = ensemble();
        manual.update(lc.virtual_key, 1).unwrap();
        manual.update(lc.virtual_key, 0).unwrap();
        assert_eq!(lagged.to_bytes(), manual.to_bytes());
    }

    #[test]
    fn related_update_is_idempotent() {
        let mut a = ensemble();
        update_related(&mut a, 1, 2, 3);
        let mut b = a.clone();
        update_related(&mut b, 1, 2, 3);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn virtual_keys_are_namespaced_and_collision_free() {
        let j = digest_key(b"j");
        assert_eq!(virtual_key_for(j, 0), virtual_key_for(j, 0));
        assert_ne!(virtual_key_for(j, 0), j);
        assert_ne!(virtual_key_for(j, 0), virtual_key_for(j, 1));

        let mut seen = std::collections::HashSet::new();
        let st = HashSeed(3);
        for i in 0..100_000u64 {
            let flow = st.derive(i);
            let tau = i % 8;
            assert!(seen.insert(virtual_key_for(flow, tau)));
        }
    }
}
