//! Monte-Carlo accuracy harness: seeded scenario runners whose rows feed
//! both the `bench` CLI subcommand and the acceptance suite.
//!
//! Every runner is deterministic under its master seed and every row
//! carries that seed, so any verdict can be reproduced offline. The
//! PASS/FAIL predicates are pure functions of the recorded numbers.
//!
//! Cells:
//! * pair scenario — plants a correlated flow pair in background traffic
//!   and measures bias, sample variance against the `Cor * |T| / s`
//!   variance bound, and the failure rate against the
//!   `eps * sqrt(Cor * |T|)` deviation threshold at target probability
//!   `delta`;
//! * row collision — empirical probability that two flows share all `p`
//!   rows, against `|F|^2 / (2 m^p)`;
//! * discretization — paired-seed comparison of a finite-`w` sketch
//!   against a near-continuous reference (`w = 2^32 - 1`) sharing the
//!   same hash coefficients, against `|T|^2 / (2 w s)`.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;

use crate::estimator::{MpuEnsemble, Plan, PlanInput};
use crate::hashing::{HashSeed, PairwiseHash};
use crate::ingest::{sample_distinct, Rng};
use crate::sketch::{MpuParams, MpuSketch};
use crate::{Error, Result};

/// Fewer trials than this is statistically meaningless; runners reject it.
pub const MIN_TRIALS: u64 = 30;

/// Standard error of a binomial proportion at its nominal rate.
pub fn binomial_se(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

fn check_trials(trials: u64) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidParams(format!(
            "{trials} trials below the minimum of {MIN_TRIALS}"
        )));
    }
    Ok(())
}

/// Data seed for a trial, offset far from the stream positions the
/// ensemble uses for its per-copy hash seeds.
fn data_rng(trial_seed: u64) -> Rng {
    Rng::new(HashSeed(HashSeed(trial_seed).derive(1 << 40)))
}

/// One planted-pair scenario: flows 0 and 1 share `cor` designated
/// slots, every flow (pair included) gets `background` extra active
/// slots, all sketched through a fresh ensemble per trial.
#[derive(Debug, Clone)]
pub struct PairScenario {
    pub plan: Plan,
    pub epsilon: f64,
    pub delta: f64,
    pub flow_count: u64,
    pub background: u64,
    pub cor: u64,
    pub trials: u64,
}

/// Aggregates of one pair-scenario run. `mean_true` is the realized
/// ground truth (planted slots plus background coincidences).
#[derive(Debug, Clone, Serialize)]
pub struct PairScenarioRow {
    pub seed: u64,
    pub trials: u64,
    pub cor_target: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub epoch_len: u64,
    pub s: u64,
    pub mean_true: f64,
    pub mean_est: f64,
    pub bias: f64,
    pub sample_var: f64,
    pub var_bound: f64,
    pub failure_rate: f64,
    pub deviation_pass: bool,
    pub bias_pass: bool,
    pub variance_pass: bool,
}

/// Deviation verdict: failure rate within `delta + 3 SE`.
pub fn deviation_pass(failure_rate: f64, delta: f64, trials: u64) -> bool {
    failure_rate <= delta + 3.0 * binomial_se(delta, trials)
}

/// Bias verdict: mean within 4 standard errors of the truth.
pub fn bias_pass(bias: f64, sample_var: f64, trials: u64) -> bool {
    bias.abs() <= 4.0 * (sample_var / trials as f64).sqrt()
}

/// Variance verdict: sample variance within 1.5x the bound (slack covers
/// discretization and estimation noise on top of the hashing variance).
pub fn variance_pass(sample_var: f64, var_bound: f64) -> bool {
    sample_var <= 1.5 * var_bound
}

pub fn run_pair_scenario(cfg: &PairScenario, master_seed: u64) -> Result<PairScenarioRow> {
    check_trials(cfg.trials)?;
    if cfg.flow_count < 2 {
        return Err(Error::InvalidParams("need at least the flow pair".into()));
    }
    let epoch = cfg.plan.epoch_len;
    let master = HashSeed(master_seed);

    let mut sum_est = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut sum_true = 0.0f64;
    let mut failures = 0u64;

    for trial in 0..cfg.trials {
        let trial_seed = master.derive(trial);
        let mut ens = MpuEnsemble::new(cfg.plan.clone(), HashSeed(trial_seed))?;
        let mut rng = data_rng(trial_seed);

        let shared = sample_distinct(&mut rng, epoch, cfg.cor);
        let mut f0: BTreeSet<u64> = shared.clone();
        f0.extend(sample_distinct(&mut rng, epoch, cfg.background));
        let mut f1: BTreeSet<u64> = shared;
        f1.extend(sample_distinct(&mut rng, epoch, cfg.background));

        for &t in &f0 {
            ens.update(0, t)?;
        }
        for &t in &f1 {
            ens.update(1, t)?;
        }
        for key in 2..cfg.flow_count {
            for t in sample_distinct(&mut rng, epoch, cfg.background) {
                ens.update(key, t)?;
            }
        }

        let true_cor = f0.intersection(&f1).count() as f64;
        let est = ens.estimate_median(0, 1).value();
        let threshold = cfg.epsilon * (true_cor * epoch as f64).sqrt();
        if (est - true_cor).abs() >= threshold {
            failures += 1;
        }
        sum_est += est;
        sum_sq += est * est;
        sum_true += true_cor;
    }

    let n = cfg.trials as f64;
    let mean_est = sum_est / n;
    let mean_true = sum_true / n;
    let sample_var = (sum_sq - n * mean_est * mean_est) / (n - 1.0);
    let var_bound = cfg.cor as f64 * epoch as f64 / cfg.plan.s as f64;
    let failure_rate = failures as f64 / n;
    Ok(PairScenarioRow {
        seed: master_seed,
        trials: cfg.trials,
        cor_target: cfg.cor,
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        epoch_len: epoch,
        s: cfg.plan.s,
        mean_true,
        mean_est,
        bias: mean_est - mean_true,
        sample_var,
        var_bound,
        failure_rate,
        deviation_pass: deviation_pass(failure_rate, cfg.delta, cfg.trials),
        bias_pass: bias_pass(mean_est - mean_true, sample_var, cfg.trials),
        variance_pass: variance_pass(sample_var, var_bound),
    })
}

/// The (eps, delta) deviation cell at its default scale: planner output
/// for eps=0.2, delta=0.1, |T|=2000, |F|=100, p=3; planted correlations
/// 50 / 300 / 1000; 300 trials each.
pub fn theorem_cells(master_seed: u64, trials: u64) -> Result<Vec<PairScenarioRow>> {
    let plan = crate::estimator::plan(PlanInput {
        epsilon: 0.2,
        delta: 0.1,
        epoch_len: 2000,
        flow_count: 100,
        p: 3,
    })?;
    let mut rows = Vec::new();
    for (idx, cor) in [50u64, 300, 1000].into_iter().enumerate() {
        let cfg = PairScenario {
            plan: plan.clone(),
            epsilon: 0.2,
            delta: 0.1,
            flow_count: 100,
            background: 50,
            cor,
            trials,
        };
        rows.push(run_pair_scenario(
            &cfg,
            HashSeed(master_seed).derive(idx as u64),
        )?);
    }
    Ok(rows)
}

/// The bias/variance cell: no-collision regime (row-collision bound
/// 1e-3 at |F|=2), identical planted flows so the estimator is unbiased
/// at any density, `w * s >= 5 |T|^2`.
pub fn variance_cell(master_seed: u64, trials: u64) -> Result<PairScenarioRow> {
    let cfg = PairScenario {
        plan: Plan {
            p: 2,
            m: 64,
            s: 1024,
            w: 122_071,
            copies: 1,
            epoch_len: 5000,
        },
        epsilon: 0.2,
        delta: 0.1,
        flow_count: 2,
        background: 0,
        cor: 500,
        trials,
    };
    run_pair_scenario(&cfg, master_seed)
}

/// One row-collision cell: empirical probability that some flow pair
/// lands on identical rows in all `p` blocks.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionRow {
    pub seed: u64,
    pub trials: u64,
    pub flow_count: u64,
    pub p: u64,
    pub m: u64,
    pub collision_rate: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn run_collision_cell(
    flow_count: u64,
    p: u64,
    m: u64,
    trials: u64,
    master_seed: u64,
) -> Result<CollisionRow> {
    check_trials(trials)?;
    let master = HashSeed(master_seed);
    let mut collisions = 0u64;
    for trial in 0..trials {
        let trial_seed = master.derive(trial);
        let seed = HashSeed(trial_seed);
        let hashes: Vec<PairwiseHash> = (0..p)
            .map(|k| PairwiseHash::new(seed, k, m))
            .collect::<Result<_>>()?;
        // Random 64-bit flow keys: sequential keys form an arithmetic
        // progression under the affine family, which makes whole
        // difference-classes collide together and is unrepresentative
        // of real flow identifiers (which arrive pre-digested).
        let mut rng = data_rng(trial_seed);
        let mut keys = HashSet::with_capacity(flow_count as usize);
        while keys.len() < flow_count as usize {
            keys.insert(rng.next());
        }
        let mut seen = HashSet::with_capacity(flow_count as usize);
        let mut hit = false;
        for &flow in &keys {
            let rows: Vec<u64> = hashes.iter().map(|h| h.eval(flow)).collect();
            if !seen.insert(rows) {
                hit = true;
                break;
            }
        }
        collisions += hit as u64;
    }
    let rate = collisions as f64 / trials as f64;
    let bound = (flow_count as f64).powi(2) / (2.0 * (m as f64).powi(p as i32));
    Ok(CollisionRow {
        seed: master_seed,
        trials,
        flow_count,
        p,
        m,
        collision_rate: rate,
        bound,
        pass: rate <= bound + 4.0 * binomial_se(bound, trials),
    })
}

/// Default row-collision sweep: |F|=64, p=2, m in {64, 128, 256}.
pub fn collision_cells(master_seed: u64, trials: u64) -> Result<Vec<CollisionRow>> {
    [64u64, 128, 256]
        .into_iter()
        .enumerate()
        .map(|(idx, m)| {
            run_collision_cell(64, 2, m, trials, HashSeed(master_seed).derive(idx as u64))
        })
        .collect()
}

/// Cross-row property of the sweep: empirical rate strictly decreasing
/// in m.
pub fn collision_sweep_decreasing(rows: &[CollisionRow]) -> bool {
    rows.windows(2).all(|w| w[1].collision_rate < w[0].collision_rate)
}

/// One discretization cell: a finite-`w` sketch against a paired
/// reference run with `w = 2^32 - 1` and identical seeds.
#[derive(Debug, Clone, Serialize)]
pub struct DiscretizationRow {
    pub seed: u64,
    pub trials: u64,
    pub w: u64,
    pub s: u64,
    pub epoch_len: u64,
    pub bound: f64,
    /// Fraction of pairs where the discrete absolute error strictly
    /// exceeds the reference error, regardless of cause.
    pub raw_exceed_rate: f64,
    /// Same, but gated on the discretization actually changing the
    /// column-agreement count `a` — the event the bound speaks to.
    /// The raw rate also pays for sub-counter jitter in `c`, which is a
    /// near-fair coin at every `w` and is reported for transparency.
    pub gated_exceed_rate: f64,
    pub pass: bool,
}

const REFERENCE_W: u64 = (1 << 32) - 1;

pub fn run_discretization_cell(
    w: u64,
    s: u64,
    epoch_len: u64,
    shared_slots: u64,
    extra_slots: u64,
    trials: u64,
    master_seed: u64,
) -> Result<DiscretizationRow> {
    check_trials(trials)?;
    let master = HashSeed(master_seed);
    let base = MpuParams {
        p: 2,
        m: 64,
        s,
        w,
    };
    let reference = MpuParams { w: REFERENCE_W, ..base };

    let mut raw_exceeds = 0u64;
    let mut gated_exceeds = 0u64;
    for trial in 0..trials {
        let trial_seed = master.derive(trial);
        // Same seed, params differing only in w: the discrete value hash
        // is a quantization of the reference one (shared coefficients).
        let mut sk_d = MpuSketch::new(base, HashSeed(trial_seed))?;
        let mut sk_r = MpuSketch::new(reference, HashSeed(trial_seed))?;
        let mut rng = data_rng(trial_seed);
        // Overlapping but distinct flows: identical flows would always
        // agree column-wise regardless of w, leaving nothing for the
        // discretization to perturb.
        let shared = sample_distinct(&mut rng, epoch_len, shared_slots);
        let mut f0: BTreeSet<u64> = shared.clone();
        f0.extend(sample_distinct(&mut rng, epoch_len, extra_slots));
        let mut f1: BTreeSet<u64> = shared;
        f1.extend(sample_distinct(&mut rng, epoch_len, extra_slots));
        for &t in &f0 {
            sk_d.update(0, t)?;
            sk_r.update(0, t)?;
        }
        for &t in &f1 {
            sk_d.update(1, t)?;
            sk_r.update(1, t)?;
        }
        let truth = f0.intersection(&f1).count() as f64;
        let bd = sk_d.estimate(0, 1);
        let br = sk_r.estimate(0, 1);
        let err_d = (bd.value() - truth).abs();
        let err_r = (br.value() - truth).abs();
        if err_d > err_r {
            raw_exceeds += 1;
            if bd.a != br.a {
                gated_exceeds += 1;
            }
        }
    }
    let raw = raw_exceeds as f64 / trials as f64;
    let gated = gated_exceeds as f64 / trials as f64;
    let bound = (epoch_len as f64).powi(2) / (2.0 * w as f64 * s as f64);
    Ok(DiscretizationRow {
        seed: master_seed,
        trials,
        w,
        s,
        epoch_len,
        bound,
        raw_exceed_rate: raw,
        gated_exceed_rate: gated,
        pass: gated <= bound + 3.0 * binomial_se(bound, trials),
    })
}

/// Default discretization sweep: s=256, |T|=1024, flows sharing 400
/// slots with 300 private ones each, w chosen so the bound sweeps
/// {0.5, 0.1, 0.02}.
pub fn discretization_cells(master_seed: u64, trials: u64) -> Result<Vec<DiscretizationRow>> {
    [4096u64, 20_480, 102_400]
        .into_iter()
        .enumerate()
        .map(|(idx, w)| {
            run_discretization_cell(
                w,
                256,
                1024,
                400,
                300,
                trials,
                HashSeed(master_seed).derive(idx as u64),
            )
        })
        .collect()
}

/// Full harness output; `pass` is the conjunction of every cell verdict.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub deviation: Vec<PairScenarioRow>,
    pub bias_variance: PairScenarioRow,
    pub collision: Vec<CollisionRow>,
    pub collision_decreasing: bool,
    pub discretization: Vec<DiscretizationRow>,
    pub pass: bool,
}

/// Scales every default cell by one trial count and runs them all.
pub fn run_full(master_seed: u64, trials: u64) -> Result<BenchReport> {
    let root = HashSeed(master_seed);
    let deviation = theorem_cells(root.derive(0), trials)?;
    let bias_variance = variance_cell(root.derive(1), trials)?;
    let collision = collision_cells(root.derive(2), trials)?;
    let collision_decreasing = collision_sweep_decreasing(&collision);
    let discretization = discretization_cells(root.derive(3), trials)?;
    let pass = deviation.iter().all(|r| r.deviation_pass)
        && bias_variance.bias_pass
        && bias_variance.variance_pass
        && collision.iter().all(|r| r.pass)
        && collision_decreasing
        && discretization.iter().all(|r| r.pass);
    Ok(BenchReport {
        seed: master_seed,
        deviation,
        bias_variance,
        collision,
        collision_decreasing,
        discretization,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_meaningless_trial_counts() {
        assert!(run_collision_cell(64, 2, 64, 29, 1).is_err());
        assert!(run_discretization_cell(4096, 256, 1024, 400, 300, 10, 1).is_err());
        let cfg = PairScenario {
            plan: Plan {
                p: 2,
                m: 64,
                s: 256,
                w: 4096,
                copies: 1,
                epoch_len: 1000,
            },
            epsilon: 0.2,
            delta: 0.1,
            flow_count: 2,
            background: 0,
            cor: 100,
            trials: 10,
        };
        assert!(run_pair_scenario(&cfg, 1).is_err());
    }

    #[test]
    fn pair_scenario_is_deterministic_and_roughly_unbiased() {
        let cfg = PairScenario {
            plan: Plan {
                p: 2,
                m: 64,
                s: 256,
                w: 20_480,
                copies: 3,
                epoch_len: 1000,
            },
            epsilon: 0.2,
            delta: 0.1,
            flow_count: 2,
            background: 0,
            cor: 200,
            trials: 40,
        };
        let row = run_pair_scenario(&cfg, 77).unwrap();
        let again = run_pair_scenario(&cfg, 77).unwrap();
        assert_eq!(row.mean_est, again.mean_est);
        assert_eq!(row.failure_rate, again.failure_rate);
        assert_eq!(row.mean_true, 200.0, "identical flows, no background");
        // SD is about sqrt(200 * 1000 / 256) ~ 28; 40 trials of a median
        // of 3 put the mean well inside +-20.
        assert!(
            (row.mean_est - 200.0).abs() < 20.0,
            "mean {} far from 200",
            row.mean_est
        );
        assert!(row.sample_var >= 0.0);
    }

    #[test]
    fn collision_cell_tracks_the_birthday_rate() {
        // |F|=64, p=2, m=64: bound 0.5; true birthday rate about 0.39.
        let row = run_collision_cell(64, 2, 64, 300, 5).unwrap();
        assert!(row.collision_rate > 0.2, "rate {}", row.collision_rate);
        assert!(row.pass, "rate {} vs bound {}", row.collision_rate, row.bound);
        assert_eq!(row.bound, 0.5);
    }

    #[test]
    fn collision_sweep_ordering() {
        let mk = |m, rate| CollisionRow {
            seed: 0,
            trials: 100,
            flow_count: 64,
            p: 2,
            m,
            collision_rate: rate,
            bound: 0.5,
            pass: true,
        };
        assert!(collision_sweep_decreasing(&[mk(64, 0.4), mk(128, 0.1), mk(256, 0.05)]));
        assert!(!collision_sweep_decreasing(&[mk(64, 0.1), mk(128, 0.1)]));
    }

    #[test]
    fn discretization_cell_smoke() {
        let row = run_discretization_cell(4096, 256, 1024, 400, 300, 60, 9).unwrap();
        assert_eq!(row.bound, 0.5);
        assert!(row.gated_exceed_rate <= row.raw_exceed_rate);
        assert!((0.0..=1.0).contains(&row.raw_exceed_rate));
        let again = run_discretization_cell(4096, 256, 1024, 400, 300, 60, 9).unwrap();
        assert_eq!(row.gated_exceed_rate, again.gated_exceed_rate);
    }
}
