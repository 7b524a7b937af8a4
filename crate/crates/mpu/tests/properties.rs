//! Randomized invariants over the whole parameter space.

use proptest::prelude::*;

use mpu::hashing::{digest_key, HashSeed, PairwiseHash};
use mpu::ingest::SlotConfig;
use mpu::sketch::{MpuParams, MpuSketch};

proptest! {
    #[test]
    fn hash_is_pure_and_in_range(seed: u64, idx in 0u64..1000, range in 1u64..1_000_000, key: u64) {
        let h = PairwiseHash::new(HashSeed(seed), idx, range).unwrap();
        let v = h.eval(key);
        prop_assert_eq!(v, h.eval(key));
        prop_assert!((1..=range).contains(&v));
    }

    #[test]
    fn coarse_range_quantizes_fine(seed: u64, key: u64, shift in 1u32..12) {
        // Same coefficients, coarse range dividing the fine one.
        let fine = PairwiseHash::new(HashSeed(seed), 0, 1 << 24).unwrap();
        let coarse = PairwiseHash::from_parts(fine.a(), fine.b(), 1 << (24 - shift)).unwrap();
        let k = 1u64 << shift;
        prop_assert_eq!(coarse.eval(key) - 1, (fine.eval(key) - 1) / k);
    }

    #[test]
    fn digest_distinguishes_suffixes(base: Vec<u8>, extra in 1usize..16) {
        let mut longer = base.clone();
        longer.extend(std::iter::repeat(0).take(extra));
        prop_assert_ne!(digest_key(&base), digest_key(&longer));
    }

    #[test]
    fn slotting_is_floor(width in 1u64..1000, start in 0u64..1_000_000, epoch in 1u64..10_000, offset in 0u64..1_000_000) {
        let cfg = SlotConfig::new(width, start, epoch).unwrap();
        let ts = start + offset;
        let expect = offset / width;
        prop_assert_eq!(cfg.slot_of_ts(ts), (expect < epoch).then_some(expect));
        if start > 0 {
            prop_assert_eq!(cfg.slot_of_ts(start - 1), None);
        }
    }

    #[test]
    fn stream_permutation_and_merge_invariance(
        seed: u64,
        events in proptest::collection::vec((0u64..32, 0u64..256), 1..120),
        split in 0usize..120,
    ) {
        let params = MpuParams { p: 2, m: 16, s: 16, w: 500 };
        let mut forward = MpuSketch::new(params, HashSeed(seed)).unwrap();
        for &(k, t) in &events {
            forward.update(k, t).unwrap();
        }

        let mut reversed = MpuSketch::new(params, HashSeed(seed)).unwrap();
        for &(k, t) in events.iter().rev() {
            reversed.update(k, t).unwrap();
        }
        prop_assert_eq!(forward.to_bytes(), reversed.to_bytes());

        let cut = split.min(events.len());
        let mut left = MpuSketch::new(params, HashSeed(seed)).unwrap();
        let mut right = MpuSketch::new(params, HashSeed(seed)).unwrap();
        for &(k, t) in &events[..cut] {
            left.update(k, t).unwrap();
        }
        for &(k, t) in &events[cut..] {
            right.update(k, t).unwrap();
        }
        left.merge(&right).unwrap();
        prop_assert_eq!(left.to_bytes(), forward.to_bytes());
    }

    #[test]
    fn serialization_round_trips(seed: u64, events in proptest::collection::vec((0u64..64, 0u64..512), 0..80)) {
        let params = MpuParams { p: 3, m: 8, s: 8, w: 70_000 };
        let mut sk = MpuSketch::new(params, HashSeed(seed)).unwrap();
        for &(k, t) in &events {
            sk.update(k, t).unwrap();
        }
        let bytes = sk.to_bytes();
        let loaded = MpuSketch::load(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(loaded.to_bytes(), bytes);
    }
}
