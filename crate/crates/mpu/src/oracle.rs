//! Exact brute-force ground truth for every correlation notion the
//! sketches estimate. Deliberately the O(total activity) baseline.

use std::collections::{BTreeSet, HashMap};

use crate::{Error, Result};

/// Per-key sets of activated slots; the exact counterpart of the sketch
/// pipeline. Keys the tracker has never seen behave as empty sets.
#[derive(Debug, Clone, Default)]
pub struct ExactTracker {
    activity: HashMap<u64, BTreeSet<u64>>,
    epoch_len: u64,
}

impl ExactTracker {
    /// Tracker enforcing `slot < epoch_len` on record.
    pub fn new(epoch_len: u64) -> Self {
        Self {
            activity: HashMap::new(),
            epoch_len,
        }
    }

    /// Tracker over an unbounded item domain (used for tuple types).
    pub fn unbounded() -> Self {
        Self::new(u64::MAX)
    }

    pub fn epoch_len(&self) -> u64 {
        self.epoch_len
    }

    /// Adds `slot` to the key's activity set; idempotent.
    pub fn record(&mut self, key: u64, slot: u64) -> Result<()> {
        if slot >= self.epoch_len {
            return Err(Error::SlotOutOfRange {
                slot,
                epoch_len: self.epoch_len,
            });
        }
        self.activity.entry(key).or_default().insert(slot);
        Ok(())
    }

    pub fn activity(&self, key: u64) -> Option<&BTreeSet<u64>> {
        self.activity.get(&key)
    }

    pub fn activity_count(&self, key: u64) -> u64 {
        self.activity.get(&key).map_or(0, |s| s.len() as u64)
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.activity.keys().copied()
    }

    /// Exact `|F_i ∩ F_j|`.
    pub fn cor(&self, key_i: u64, key_j: u64) -> u64 {
        match (self.activity.get(&key_i), self.activity.get(&key_j)) {
            (Some(a), Some(b)) => a.intersection(b).count() as u64,
            _ => 0,
        }
    }

    /// Group correlation under indicator semantics:
    /// `|(∪_{i∈A} F_i) ∩ (∪_{j∈B} F_j)|`.
    pub fn gcor_any(&self, group_a: &[u64], group_b: &[u64]) -> u64 {
        let union = |keys: &[u64]| {
            let mut set = BTreeSet::new();
            for k in keys {
                if let Some(a) = self.activity.get(k) {
                    set.extend(a.iter().copied());
                }
            }
            set
        };
        union(group_a).intersection(&union(group_b)).count() as u64
    }

    /// Lagged correlation: sum over lags `0..=tau` of co-activity where
    /// flow `j` trails flow `i`. Slots past the epoch end count as
    /// inactive.
    pub fn cor_tau(&self, key_i: u64, key_j: u64, tau: u64) -> u64 {
        let (Some(fi), Some(fj)) = (self.activity.get(&key_i), self.activity.get(&key_j)) else {
            return 0;
        };
        let mut total = 0u64;
        for &t in fi {
            for omega in 0..=tau {
                match t.checked_add(omega) {
                    Some(tt) if tt < self.epoch_len && fj.contains(&tt) => total += 1,
                    _ => {}
                }
            }
        }
        total
    }
}

/// Exact multiplicity per item type and distinct count over a sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreqStats {
    pub freq: HashMap<u64, u64>,
    pub distinct: u64,
}

impl FreqStats {
    pub fn freq_of(&self, item: u64) -> u64 {
        self.freq.get(&item).copied().unwrap_or(0)
    }
}

pub fn freq_stats(items: &[u64]) -> FreqStats {
    let mut freq = HashMap::new();
    for &item in items {
        *freq.entry(item).or_insert(0u64) += 1;
    }
    FreqStats {
        distinct: freq.len() as u64,
        freq,
    }
}

/// Exact join size: sum over types of the product of per-sequence
/// frequencies.
pub fn join_size(x: &[u64], y: &[u64]) -> u64 {
    let fx = freq_stats(x);
    let fy = freq_stats(y);
    fx.freq
        .iter()
        .map(|(item, &cx)| cx * fy.freq_of(*item))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::HashSeed;
    use std::collections::BTreeSet;

    #[test]
    fn record_is_idempotent_and_bounded() {
        let mut tr = ExactTracker::new(10);
        tr.record(1, 6).unwrap();
        tr.record(1, 6).unwrap();
        assert_eq!(tr.activity_count(1), 1);
        assert!(tr.record(1, 10).is_err());
    }

    #[test]
    fn activity_example() {
        let mut tr = ExactTracker::new(10);
        for slot in [1, 2, 6] {
            tr.record(7, slot).unwrap();
        }
        let f: Vec<u64> = tr.activity(7).unwrap().iter().copied().collect();
        assert_eq!(f, vec![1, 2, 6]);
        assert_eq!(tr.cor(7, 7), 3);
    }

    #[test]
    fn random_records_match_sorted_dedup() {
        let st = HashSeed(5);
        let mut tr = ExactTracker::new(1000);
        let mut raw: Vec<(u64, u64)> = Vec::new();
        for i in 0..1000u64 {
            let key = st.derive(2 * i) % 8;
            let slot = st.derive(2 * i + 1) % 1000;
            raw.push((key, slot));
            tr.record(key, slot).unwrap();
        }
        for key in 0..8u64 {
            let mut slots: Vec<u64> = raw
                .iter()
                .filter(|(k, _)| *k == key)
                .map(|(_, s)| *s)
                .collect();
            slots.sort_unstable();
            slots.dedup();
            assert_eq!(tr.activity_count(key), slots.len() as u64);
        }
    }

    #[test]
    fn cor_basics() {
        let mut tr = ExactTracker::new(20);
        for s in [1, 2, 6] {
            tr.record(1, s).unwrap();
        }
        for s in [2, 6, 9] {
            tr.record(2, s).unwrap();
        }
        for s in [11, 12] {
            tr.record(3, s).unwrap();
        }
        assert_eq!(tr.cor(1, 2), 2);
        assert_eq!(tr.cor(2, 1), 2);
        assert_eq!(tr.cor(1, 3), 0);
        assert_eq!(tr.cor(1, 1), 3);
        assert_eq!(tr.cor(1, 99), 0, "missing keys are empty sets");
    }

    #[test]
    fn freq_stats_preliminaries_example() {
        // X = (1, 2, 1, 3, 3, 1): Freq(1) = 3, Freq(4) = 0, |X| = 3.
        let stats = freq_stats(&[1, 2, 1, 3, 3, 1]);
        assert_eq!(stats.freq_of(1), 3);
        assert_eq!(stats.freq_of(4), 0);
        assert_eq!(stats.distinct, 3);

        let empty = freq_stats(&[]);
        assert_eq!(empty.distinct, 0);
        assert_eq!(empty.freq_of(1), 0);
    }

    #[test]
    fn freq_stats_matches_sort_and_count() {
        let st = HashSeed(8);
        let items: Vec<u64> = (0..1000).map(|i| st.derive(i) % 50).collect();
        let stats = freq_stats(&items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(stats.distinct, sorted.len() as u64);
        for &v in &sorted {
            assert_eq!(stats.freq_of(v), items.iter().filter(|&&x| x == v).count() as u64);
        }
    }

    #[test]
    fn join_size_examples() {
        // X = (1,2,1,3,3,1), Y = (1,4): 3*1 = 3.
        assert_eq!(join_size(&[1, 2, 1, 3, 3, 1], &[1, 4]), 3);
        // Degenerate X joined with itself is its distinct count.
        let x = [1u64, 2, 3, 9];
        assert_eq!(join_size(&x, &x), 4);
    }

    #[test]
    fn join_size_equals_cor_on_degenerate_sequences() {
        let st = HashSeed(13);
        for trial in 0..100u64 {
            let mut tr = ExactTracker::new(100);
            let mut fi: Vec<u64> = Vec::new();
            let mut fj: Vec<u64> = Vec::new();
            for i in 0..40u64 {
                let a = st.derive(trial * 1000 + 2 * i) % 100;
                let b = st.derive(trial * 1000 + 2 * i + 1) % 100;
                if !fi.contains(&a) {
                    fi.push(a);
                    tr.record(1, a).unwrap();
                }
                if !fj.contains(&b) {
                    fj.push(b);
                    tr.record(2, b).unwrap();
                }
            }
            assert_eq!(join_size(&fi, &fj), tr.cor(1, 2));
        }
    }

    #[test]
    fn gcor_any_reduces_to_cor_for_singletons() {
        let mut tr = ExactTracker::new(50);
        for s in [1, 5, 9] {
            tr.record(1, s).unwrap();
        }
        for s in [5, 9, 20] {
            tr.record(2, s).unwrap();
        }
        assert_eq!(tr.gcor_any(&[1], &[2]), tr.cor(1, 2));
        assert_eq!(tr.gcor_any(&[1, 2], &[1, 2]), 4, "A = B gives the union size");
    }

    #[test]
    fn gcor_any_matches_brute_force_on_random_groups() {
        let st = HashSeed(21);
        for trial in 0..50u64 {
            let mut tr = ExactTracker::new(100);
            let mut sets: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); 6];
            for f in 0..6u64 {
                for i in 0..30u64 {
                    let s = st.derive(trial * 999 + f * 31 + i) % 100;
                    tr.record(f, s).unwrap();
                    sets[f as usize].insert(s);
                }
            }
            let a: BTreeSet<u64> = sets[0].union(&sets[1]).copied().collect();
            let a: BTreeSet<u64> = a.union(&sets[2]).copied().collect();
            let b: BTreeSet<u64> = sets[3].union(&sets[4]).copied().collect();
            let b: BTreeSet<u64> = b.union(&sets[5]).copied().collect();
            assert_eq!(
                tr.gcor_any(&[0, 1, 2], &[3, 4, 5]),
                a.intersection(&b).count() as u64
            );
        }
    }

    #[test]
    fn cor_tau_basics() {
        let mut tr = ExactTracker::new(10);
        tr.record(1, 5).unwrap();
        for s in [5, 6, 7] {
            tr.record(2, s).unwrap();
        }
        assert_eq!(tr.cor_tau(1, 2, 0), tr.cor(1, 2));
        assert_eq!(tr.cor_tau(1, 2, 2), 3);
        // Monotone in tau.
        assert!(tr.cor_tau(1, 2, 1) <= tr.cor_tau(1, 2, 2));
    }

    #[test]
    fn cor_tau_matches_triple_loop() {
        let st = HashSeed(30);
        for trial in 0..100u64 {
            let epoch = 60u64;
            let mut tr = ExactTracker::new(epoch);
            let mut fi = vec![false; epoch as usize];
            let mut fj = vec![false; epoch as usize];
            for i in 0..25u64 {
                let a = st.derive(trial * 771 + 2 * i) % epoch;
                let b = st.derive(trial * 771 + 2 * i + 1) % epoch;
                tr.record(1, a).unwrap();
                tr.record(2, b).unwrap();
                fi[a as usize] = true;
                fj[b as usize] = true;
            }
            for tau in 0..5u64 {
                let mut expect = 0u64;
                for omega in 0..=tau {
                    for t in 0..epoch {
                        if fi[t as usize]
                            && t + omega < epoch
                            && fj[(t + omega) as usize]
                        {
                            expect += 1;
                        }
                    }
                }
                assert_eq!(tr.cor_tau(1, 2, tau), expect, "tau={tau}");
            }
        }
    }
}
