//! Replay evaluation against a direct-simulation oracle, plus the
//! duplication property and the known-arm rule wrapper.

use dtr_bandit::env::{
    sample_context, step_stage1, step_stage2, ProblemInstance, RoundRecord,
};
use dtr_bandit::policies::{GreedyPolicy, KnownArmEffects, KnownArmPolicy, Policy, PolicyError};
use dtr_bandit::replay::{bootstrap_uniformize, generate_uniform_log, replay};
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Deterministic context-threshold policy used as the evaluation target.
struct ThresholdPolicy {
    pending: Option<(usize, Option<usize>)>,
    t: usize,
}

impl ThresholdPolicy {
    fn new() -> Self {
        Self {
            pending: None,
            t: 0,
        }
    }

    fn rule_stage1(x: &[f64]) -> usize {
        if x[0] >= 0.0 {
            1
        } else {
            2
        }
    }

    fn rule_stage2(x: &[f64]) -> usize {
        if x[0] >= 0.0 {
            2
        } else {
            1
        }
    }
}

impl Policy for ThresholdPolicy {
    fn choose_stage1(&mut self, x1: &[f64]) -> usize {
        let a = Self::rule_stage1(x1);
        self.pending = Some((a, None));
        a
    }

    fn choose_stage2(&mut self, x2: &[f64]) -> usize {
        let a = Self::rule_stage2(x2);
        self.pending.as_mut().unwrap().1 = Some(a);
        a
    }

    fn finish_round(&mut self, _rec: &RoundRecord) -> Result<(), PolicyError> {
        self.pending = None;
        self.t += 1;
        Ok(())
    }

    fn abandon_round(&mut self) {
        self.pending = None;
    }

    fn round(&self) -> usize {
        self.t
    }

    fn state_digest(&self) -> u64 {
        self.t as u64
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Direct simulation of the threshold policy's average reward.
fn direct_value(inst: &ProblemInstance, rounds: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rewards: Vec<f64> = (0..rounds)
        .map(|_| {
            let x1 = sample_context(inst, &mut rng);
            let a1 = ThresholdPolicy::rule_stage1(&x1);
            let (y1, x2) = step_stage1(inst, &x1, a1, &mut rng).unwrap();
            let a2 = ThresholdPolicy::rule_stage2(&x2);
            let y2 = step_stage2(inst, &x2, a2, &mut rng).unwrap();
            y1 + y2
        })
        .collect();
    mean_se(&rewards)
}

#[test]
fn replay_estimate_matches_direct_simulation() {
    let inst = ProblemInstance::synthetic_1d();
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let dataset = generate_uniform_log(&inst, 2000, &mut rng);

    let reps = 20;
    let mut estimates = Vec::with_capacity(reps);
    for rep in 0..reps as u64 {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(900 + rep);
        let stream = bootstrap_uniformize(&dataset, &mut shuffle_rng).unwrap();
        let mut policy = ThresholdPolicy::new();
        let out = replay(&mut policy, &stream, 400).unwrap();
        assert_eq!(out.matched, 400);
        estimates.push(out.average_reward);
    }
    let (replay_mean, replay_se) = mean_se(&estimates);

    // The replications all draw from one finite log, so the dataset-level
    // sampling error of the matching records is part of the estimator's
    // variance against the population value.
    let matching: Vec<f64> = dataset
        .records
        .iter()
        .filter(|r| {
            r.a1 == ThresholdPolicy::rule_stage1(&r.x1)
                && r.a2 == ThresholdPolicy::rule_stage2(&r.x2)
        })
        .map(|r| r.total_reward())
        .collect();
    assert!(matching.len() > 200, "matching pool {}", matching.len());
    let (_, data_se) = mean_se(&matching);

    let (direct_mean, direct_se) = direct_value(&inst, 200_000, 777);

    let combined = (replay_se.powi(2) + data_se.powi(2) + direct_se.powi(2)).sqrt();
    assert!(
        (replay_mean - direct_mean).abs() <= 3.0 * combined,
        "replay {replay_mean:.4} vs direct {direct_mean:.4} (3se = {:.4})",
        3.0 * combined
    );
}

proptest! {
    /// Every record is duplicated exactly floor(1/p) times.
    #[test]
    fn duplication_is_reciprocal_floor(
        ps in prop::collection::vec(0.011f64..1.0, 1..40),
        seed in 0u64..500,
    ) {
        let inst = ProblemInstance::synthetic_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dataset = generate_uniform_log(&inst, ps.len(), &mut rng);
        for (i, (r, p)) in dataset.records.iter_mut().zip(&ps).enumerate() {
            r.propensity = Some(*p);
            // Tag each record through a field replay never alters.
            r.y2 = i as f64;
        }
        let stream = bootstrap_uniformize(&dataset, &mut rng).unwrap();
        for (i, p) in ps.iter().enumerate() {
            let copies = stream.iter().filter(|r| r.y2 == i as f64).count();
            prop_assert_eq!(copies, (1.0 / p).floor() as usize);
        }
    }
}

#[test]
fn known_arm_rule_overrides_stage_two() {
    // Outer problem: k2 = 3, arm 3 carries the known effect; the inner
    // greedy learner sees two second-stage arms.
    let inner = Box::new(GreedyPolicy::new(1, 2, 2));
    let mut policy = KnownArmPolicy::new(
        inner,
        KnownArmEffects {
            arm: 3,
            pull_when_y1_at_least: 2.0,
        },
    );

    // Trigger: y1 above threshold forces the designated arm.
    let a1 = policy.choose_stage1(&[0.5]);
    policy.observe_stage1_outcome(5.0);
    let a2 = policy.choose_stage2(&[0.1]);
    assert_eq!(a2, 3);
    policy
        .finish_round(&RoundRecord {
            x1: vec![0.5],
            a1,
            y1: 5.0,
            x2: vec![0.1],
            a2: 3,
            y2: 5.0,
        })
        .unwrap();
    assert_eq!(policy.round(), 1);

    // No trigger: the inner learner chooses among the remaining arms.
    let a1 = policy.choose_stage1(&[0.5]);
    policy.observe_stage1_outcome(0.0);
    let a2 = policy.choose_stage2(&[0.1]);
    assert!(a2 == 1 || a2 == 2, "got {a2}");
    policy
        .finish_round(&RoundRecord {
            x1: vec![0.5],
            a1,
            y1: 0.0,
            x2: vec![0.1],
            a2,
            y2: 0.3,
        })
        .unwrap();
    assert_eq!(policy.round(), 2);
}

#[test]
fn known_arm_remaps_inner_arm_indices() {
    // Designated arm in the middle: inner arm 2 must surface as outer 3.
    let inner = Box::new(GreedyPolicy::new(1, 2, 2));
    let mut policy = KnownArmPolicy::new(
        inner,
        KnownArmEffects {
            arm: 2,
            pull_when_y1_at_least: f64::INFINITY,
        },
    );
    for t in 0..4 {
        let a1 = policy.choose_stage1(&[0.5]);
        policy.observe_stage1_outcome(0.0);
        let a2 = policy.choose_stage2(&[0.4]);
        assert_ne!(a2, 2, "designated arm must not be explored");
        assert!(a2 == 1 || a2 == 3);
        policy
            .finish_round(&RoundRecord {
                x1: vec![0.5],
                a1,
                y1: 0.0,
                x2: vec![0.4],
                a2,
                y2: 0.1,
            })
            .unwrap();
        let _ = t;
    }
}
