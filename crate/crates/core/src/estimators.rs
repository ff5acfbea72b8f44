//! Per-arm, per-stage forced-sample and all-sample OLS states, residual
//! stores, and the restricted index set behind the four Q-estimators.
//!
//! For each first-stage arm the bank keeps two regressions (reward on
//! context, next context on context) in forced-sample and all-sample
//! flavors, plus three stores of raw `(x1, x2)` pairs:
//!
//! - `forced`: pairs from forced-pull rounds, averaged by the forced-pull
//!   estimator `q_tilde`;
//! - `restricted`: non-forced pairs recorded under a clear forced-estimator
//!   margin, averaged by the all-samples estimator `q_hat`;
//! - `all`: every pair, averaged by the greedy variant `q_hat_greedy`.
//!
//! Residuals `x2 - Bᵀ x1` are recomputed against the current transition
//! estimate at query time, never frozen at record time. A clear-margin
//! condition at exactly the threshold (`= h1/2`) does not count as
//! exceeding it.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::env::{RoundRecord, Stage};
use crate::linalg::{dot, LinalgError, OlsState};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("estimator unavailable: {0}")]
    Unavailable(String),

    #[error("arm {arm} out of range 1..={max}")]
    ArmOutOfRange { arm: usize, max: usize },

    #[error("record does not match the scheduled pull: expected arms ({expected_a1}, {expected_a2}), got ({got_a1}, {got_a2})")]
    ScheduleMismatch {
        expected_a1: usize,
        expected_a2: usize,
        got_a1: usize,
        got_a2: usize,
    },

    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// All-samples first-stage Q-estimate. `Unsampled` is the sentinel used
/// when the restricted set is empty; it outranks every finite value in an
/// argmax so that unsampled arms get explored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QHatValue {
    Finite(f64),
    Unsampled,
}

impl QHatValue {
    pub fn is_unsampled(&self) -> bool {
        matches!(self, QHatValue::Unsampled)
    }
}

/// Flat store of (x1, x2) pairs of one arm.
#[derive(Debug, Clone, Default)]
struct PairStore {
    d: usize,
    x1: Vec<f64>,
    x2: Vec<f64>,
}

impl PairStore {
    fn new(d: usize) -> Self {
        Self {
            d,
            x1: Vec::new(),
            x2: Vec::new(),
        }
    }

    fn push(&mut self, x1: &[f64], x2: &[f64]) {
        debug_assert_eq!(x1.len(), self.d);
        debug_assert_eq!(x2.len(), self.d);
        self.x1.extend_from_slice(x1);
        self.x2.extend_from_slice(x2);
    }

    fn len(&self) -> usize {
        self.x1.len() / self.d
    }

    fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }
}

/// An OLS state plus its eagerly refreshed solution (None while singular).
#[derive(Debug, Clone)]
struct CachedOls {
    state: OlsState,
    solved: Option<DMatrix<f64>>,
}

impl CachedOls {
    fn new(d: usize, k: usize) -> Self {
        Self {
            state: OlsState::new(d, k),
            solved: None,
        }
    }

    fn update(&mut self, x: &[f64], y: &[f64]) -> Result<(), LinalgError> {
        self.state.update(x, y)?;
        self.solved = self.state.solve().ok();
        Ok(())
    }

    fn solution(&self, what: &str) -> Result<&DMatrix<f64>, EstimatorError> {
        self.solved
            .as_ref()
            .ok_or_else(|| EstimatorError::Unavailable(format!("{what} has no invertible design")))
    }
}

#[derive(Debug, Clone)]
struct ArmStage1 {
    forced_reward: CachedOls,
    forced_trans: CachedOls,
    all_reward: CachedOls,
    all_trans: CachedOls,
    forced_pairs: PairStore,
    restricted_pairs: PairStore,
    all_pairs: PairStore,
}

#[derive(Debug, Clone)]
struct ArmStage2 {
    forced: CachedOls,
    all: CachedOls,
}

/// Estimator bank of one policy run. Holds every OLS state and pair store
/// the four Q-estimators need. The margin parameters are carried for
/// reference; threshold decisions are made by the policy layer.
#[derive(Debug, Clone)]
pub struct EstimatorBank {
    d: usize,
    k1: usize,
    k2: usize,
    h1: f64,
    h2: f64,
    t: usize,
    stage1: Vec<ArmStage1>,
    stage2: Vec<ArmStage2>,
}

impl EstimatorBank {
    pub fn new(d: usize, k1: usize, k2: usize, h1: f64, h2: f64) -> Self {
        assert!(d >= 1 && k1 >= 2 && k2 >= 2);
        let stage1 = (0..k1)
            .map(|_| ArmStage1 {
                forced_reward: CachedOls::new(d, 1),
                forced_trans: CachedOls::new(d, d),
                all_reward: CachedOls::new(d, 1),
                all_trans: CachedOls::new(d, d),
                forced_pairs: PairStore::new(d),
                restricted_pairs: PairStore::new(d),
                all_pairs: PairStore::new(d),
            })
            .collect();
        let stage2 = (0..k2)
            .map(|_| ArmStage2 {
                forced: CachedOls::new(d, 1),
                all: CachedOls::new(d, 1),
            })
            .collect();
        Self {
            d,
            k1,
            k2,
            h1,
            h2,
            t: 0,
            stage1,
            stage2,
        }
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn margins(&self) -> (f64, f64) {
        (self.h1, self.h2)
    }

    fn check_arm(&self, arm: usize, stage: Stage) -> Result<(), EstimatorError> {
        let max = match stage {
            Stage::One => self.k1,
            Stage::Two => self.k2,
        };
        if arm == 0 || arm > max {
            return Err(EstimatorError::ArmOutOfRange { arm, max });
        }
        Ok(())
    }

    /// Record a forced-pull round. Both forced and all-sample states of the
    /// pulled arms are updated in both stages; the `(x1, x2)` pair joins
    /// the forced and all stores of the first-stage arm.
    pub fn record_forced(
        &mut self,
        t: usize,
        expected_a1: usize,
        expected_a2: usize,
        rec: &RoundRecord,
    ) -> Result<(), EstimatorError> {
        if rec.a1 != expected_a1 || rec.a2 != expected_a2 {
            return Err(EstimatorError::ScheduleMismatch {
                expected_a1,
                expected_a2,
                got_a1: rec.a1,
                got_a2: rec.a2,
            });
        }
        self.check_arm(rec.a1, Stage::One)?;
        self.check_arm(rec.a2, Stage::Two)?;
        let arm1 = &mut self.stage1[rec.a1 - 1];
        arm1.forced_reward.update(&rec.x1, &[rec.y1])?;
        arm1.forced_trans.update(&rec.x1, &rec.x2)?;
        arm1.all_reward.update(&rec.x1, &[rec.y1])?;
        arm1.all_trans.update(&rec.x1, &rec.x2)?;
        arm1.forced_pairs.push(&rec.x1, &rec.x2);
        arm1.all_pairs.push(&rec.x1, &rec.x2);
        let arm2 = &mut self.stage2[rec.a2 - 1];
        arm2.forced.update(&rec.x2, &[rec.y2])?;
        arm2.all.update(&rec.x2, &[rec.y2])?;
        self.t = t;
        Ok(())
    }

    /// Record a non-forced round. Only all-sample states are updated; the
    /// pair joins the restricted store iff the forced-estimator margin
    /// condition held at decision time.
    pub fn record_regular(
        &mut self,
        t: usize,
        rec: &RoundRecord,
        stage1_gap_flag: bool,
    ) -> Result<(), EstimatorError> {
        self.check_arm(rec.a1, Stage::One)?;
        self.check_arm(rec.a2, Stage::Two)?;
        let arm1 = &mut self.stage1[rec.a1 - 1];
        arm1.all_reward.update(&rec.x1, &[rec.y1])?;
        arm1.all_trans.update(&rec.x1, &rec.x2)?;
        arm1.all_pairs.push(&rec.x1, &rec.x2);
        if stage1_gap_flag {
            arm1.restricted_pairs.push(&rec.x1, &rec.x2);
        }
        self.stage2[rec.a2 - 1].all.update(&rec.x2, &[rec.y2])?;
        self.t = t;
        Ok(())
    }

    /// Forced-pull Q-estimator.
    pub fn q_tilde(&self, stage: Stage, x: &[f64], a: usize) -> Result<f64, EstimatorError> {
        self.check_arm(a, stage)?;
        match stage {
            Stage::Two => {
                let beta = self.stage2[a - 1].forced.solution("forced beta2")?;
                Ok(dot(beta.as_slice(), x))
            }
            Stage::One => {
                let arm = &self.stage1[a - 1];
                if arm.forced_pairs.is_empty() {
                    return Err(EstimatorError::Unavailable(
                        "no forced pairs recorded for arm".into(),
                    ));
                }
                let beta1 = arm.forced_reward.solution("forced beta1")?;
                let bmat = arm.forced_trans.solution("forced transition")?;
                let beta2: Vec<&DMatrix<f64>> = self
                    .stage2
                    .iter()
                    .map(|s| s.forced.solution("forced beta2"))
                    .collect::<Result<_, _>>()?;
                Ok(self.stage1_value(x, beta1, bmat, &beta2, &arm.forced_pairs))
            }
        }
    }

    /// All-samples Q-estimator. In stage 1 an empty restricted store yields
    /// the `Unsampled` sentinel instead of a value.
    pub fn q_hat(&self, stage: Stage, x: &[f64], a: usize) -> Result<QHatValue, EstimatorError> {
        self.check_arm(a, stage)?;
        match stage {
            Stage::Two => {
                let beta = self.stage2[a - 1].all.solution("all-sample beta2")?;
                Ok(QHatValue::Finite(dot(beta.as_slice(), x)))
            }
            Stage::One => {
                let arm = &self.stage1[a - 1];
                if arm.restricted_pairs.is_empty() {
                    return Ok(QHatValue::Unsampled);
                }
                let beta1 = arm.all_reward.solution("all-sample beta1")?;
                let bmat = arm.all_trans.solution("all-sample transition")?;
                let beta2: Vec<&DMatrix<f64>> = self
                    .stage2
                    .iter()
                    .map(|s| s.all.solution("all-sample beta2"))
                    .collect::<Result<_, _>>()?;
                Ok(QHatValue::Finite(self.stage1_value(
                    x,
                    beta1,
                    bmat,
                    &beta2,
                    &arm.restricted_pairs,
                )))
            }
        }
    }

    /// Greedy all-samples first-stage estimator: identical arithmetic to
    /// the stage-1 `q_hat` but averaging over every recorded pair.
    pub fn q_hat_greedy(&self, x: &[f64], a: usize) -> Result<f64, EstimatorError> {
        self.check_arm(a, Stage::One)?;
        let arm = &self.stage1[a - 1];
        if arm.all_pairs.is_empty() {
            return Err(EstimatorError::Unavailable(
                "no samples recorded for arm".into(),
            ));
        }
        let beta1 = arm.all_reward.solution("all-sample beta1")?;
        let bmat = arm.all_trans.solution("all-sample transition")?;
        let beta2: Vec<&DMatrix<f64>> = self
            .stage2
            .iter()
            .map(|s| s.all.solution("all-sample beta2"))
            .collect::<Result<_, _>>()?;
        Ok(self.stage1_value(x, beta1, bmat, &beta2, &arm.all_pairs))
    }

    /// `beta1ᵀx + mean_j max_a2 beta2[a2]ᵀ(Bᵀx + x2_j - Bᵀx1_j)`, with the
    /// residual terms rearranged so the pair loop runs on flat slices:
    /// `beta2ᵀ(Bᵀx) + beta2ᵀx2_j - (B·beta2)ᵀx1_j`.
    fn stage1_value(
        &self,
        x: &[f64],
        beta1: &DMatrix<f64>,
        bmat: &DMatrix<f64>,
        beta2: &[&DMatrix<f64>],
        pairs: &PairStore,
    ) -> f64 {
        let d = self.d;
        let bx = bmat.transpose() * DVector::from_column_slice(x);
        let consts: Vec<f64> = beta2.iter().map(|b| dot(b.as_slice(), bx.as_slice())).collect();
        let proj: Vec<DVector<f64>> = beta2
            .iter()
            .map(|b| bmat * DVector::from_column_slice(b.as_slice()))
            .collect();
        let n = pairs.len();
        let mut sum = 0.0;
        for j in 0..n {
            let x1 = &pairs.x1[j * d..(j + 1) * d];
            let x2 = &pairs.x2[j * d..(j + 1) * d];
            let mut best = f64::NEG_INFINITY;
            for (a2, b) in beta2.iter().enumerate() {
                let v = consts[a2] + dot(b.as_slice(), x2) - dot(proj[a2].as_slice(), x1);
                if v > best {
                    best = v;
                }
            }
            sum += best;
        }
        dot(beta1.as_slice(), x) + sum / n as f64
    }

    pub fn forced_pair_count(&self, a: usize) -> usize {
        self.stage1[a - 1].forced_pairs.len()
    }

    pub fn restricted_pair_count(&self, a: usize) -> usize {
        self.stage1[a - 1].restricted_pairs.len()
    }

    pub fn all_pair_count(&self, a: usize) -> usize {
        self.stage1[a - 1].all_pairs.len()
    }

    /// Current parameter estimates, for diagnostics and consistency checks.
    pub fn estimates(&self, a: usize, stage: Stage, forced: bool) -> Option<DMatrix<f64>> {
        match stage {
            Stage::One => {
                let arm = &self.stage1[a - 1];
                let c = if forced { &arm.forced_reward } else { &arm.all_reward };
                c.solved.clone()
            }
            Stage::Two => {
                let arm = &self.stage2[a - 1];
                let c = if forced { &arm.forced } else { &arm.all };
                c.solved.clone()
            }
        }
    }

    /// Current transition estimate for a first-stage arm.
    pub fn transition_estimate(&self, a: usize, forced: bool) -> Option<DMatrix<f64>> {
        let arm = &self.stage1[a - 1];
        let c = if forced { &arm.forced_trans } else { &arm.all_trans };
        c.solved.clone()
    }

    /// Order-sensitive fingerprint of the learning state, for replay and
    /// determinism probes.
    pub fn digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.t.hash(&mut h);
        fn feed(h: &mut std::collections::hash_map::DefaultHasher, s: &OlsState) {
            s.len().hash(h);
            for v in s.sigma().iter().chain(s.cross().iter()) {
                v.to_bits().hash(h);
            }
        }
        for arm in &self.stage1 {
            feed(&mut h, &arm.forced_reward.state);
            feed(&mut h, &arm.forced_trans.state);
            feed(&mut h, &arm.all_reward.state);
            feed(&mut h, &arm.all_trans.state);
            for store in [&arm.forced_pairs, &arm.restricted_pairs, &arm.all_pairs] {
                store.x1.len().hash(&mut h);
                for v in store.x1.iter().chain(store.x2.iter()) {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        for arm in &self.stage2 {
            feed(&mut h, &arm.forced.state);
            feed(&mut h, &arm.all.state);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rec(x1: f64, a1: usize, y1: f64, x2: f64, a2: usize, y2: f64) -> RoundRecord {
        RoundRecord {
            x1: vec![x1],
            a1,
            y1,
            x2: vec![x2],
            a2,
            y2,
        }
    }

    #[test]
    fn forced_record_single_sample_solves() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        bank.record_forced(1, 1, 1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7))
            .unwrap();
        let beta = bank.estimates(1, Stage::One, true).unwrap();
        assert_abs_diff_eq!(beta[(0, 0)], 5.0, epsilon = 1e-12);
        let b = bank.transition_estimate(1, true).unwrap();
        assert_abs_diff_eq!(b[(0, 0)], 1.4, epsilon = 1e-12);
        assert_eq!(bank.forced_pair_count(1), 1);
        assert_eq!(bank.all_pair_count(1), 1);
    }

    #[test]
    fn empty_bank_is_unavailable() {
        let bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        assert!(bank.q_tilde(Stage::One, &[0.5], 1).is_err());
        assert!(bank.q_tilde(Stage::Two, &[0.5], 1).is_err());
        assert!(bank.q_hat_greedy(&[0.5], 1).is_err());
        // Stage-1 q_hat sentinels on the empty restricted store only after
        // the solves exist; with nothing recorded it is an error.
        assert!(bank.q_hat(Stage::Two, &[0.5], 1).is_err());
    }

    #[test]
    fn duplicate_records_leave_estimates_unchanged() {
        let mut a = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        a.record_forced(1, 1, 1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7))
            .unwrap();
        let mut b = a.clone();
        b.record_forced(2, 1, 1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7))
            .unwrap();
        let ea = a.estimates(1, Stage::One, true).unwrap();
        let eb = b.estimates(1, Stage::One, true).unwrap();
        assert_abs_diff_eq!(ea[(0, 0)], eb[(0, 0)], epsilon = 1e-12);
        let ta = a.transition_estimate(1, true).unwrap();
        let tb = b.transition_estimate(1, true).unwrap();
        assert_abs_diff_eq!(ta[(0, 0)], tb[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let r = rec(0.5, 2, 0.0, 0.7, 2, 0.0);
        assert!(matches!(
            bank.record_forced(1, 1, 1, &r),
            Err(EstimatorError::ScheduleMismatch { .. })
        ));
    }

    #[test]
    fn regular_record_grows_sets_by_flag() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        bank.record_regular(1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7), false)
            .unwrap();
        assert_eq!(bank.restricted_pair_count(1), 0);
        assert_eq!(bank.all_pair_count(1), 1);
        bank.record_regular(2, &rec(0.4, 1, 2.0, 0.6, 1, 0.6), true)
            .unwrap();
        assert_eq!(bank.restricted_pair_count(1), 1);
        assert_eq!(bank.all_pair_count(1), 2);
        assert!(bank.restricted_pair_count(1) <= bank.all_pair_count(1));
    }

    #[test]
    fn q_tilde_stage2_inner_product() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        // One forced record per slot; arm-1 stage-2 coefficient becomes 3.
        bank.record_forced(1, 1, 1, &rec(1.0, 1, 1.0, 2.0, 1, 6.0))
            .unwrap();
        assert_abs_diff_eq!(
            bank.q_tilde(Stage::Two, &[0.5], 1).unwrap(),
            1.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn q_tilde_stage1_hand_example() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        bank.record_forced(1, 1, 1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7))
            .unwrap();
        bank.record_forced(2, 2, 2, &rec(1.0, 2, 0.0, 1.0, 2, 5.0))
            .unwrap();
        // beta1 = 5, B = 1.4, beta2 = (1, 5), single pair with zero
        // residual: 5 + max(1.4, 7) = 12.
        let q = bank.q_tilde(Stage::One, &[1.0], 1).unwrap();
        assert_abs_diff_eq!(q, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn q_tilde_degenerate_transition_reduces_to_reward_term() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        // Stage-2 estimates come from arm-2 pulls with nonzero x2.
        bank.record_forced(1, 2, 1, &rec(0.5, 2, 0.0, 2.0, 1, 6.0))
            .unwrap();
        bank.record_forced(2, 2, 2, &rec(0.5, 2, 0.0, 1.0, 2, 5.0))
            .unwrap();
        // Arm-1 transition data: x2 = 0 for both pulls, so B = 0 and all
        // residuals vanish (the zero x2 contributes nothing to stage-2
        // designs).
        bank.record_forced(3, 1, 1, &rec(1.0, 1, 7.0, 0.0, 1, 0.0))
            .unwrap();
        bank.record_forced(4, 1, 2, &rec(-1.0, 1, -7.0, 0.0, 2, 0.0))
            .unwrap();
        let b = bank.transition_estimate(1, true).unwrap();
        assert_abs_diff_eq!(b[(0, 0)], 0.0, epsilon = 1e-12);
        let q = bank.q_tilde(Stage::One, &[0.3], 1).unwrap();
        assert_abs_diff_eq!(q, 7.0 * 0.3, epsilon = 1e-12);
    }

    #[test]
    fn q_hat_sentinel_on_empty_restricted_set() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        bank.record_forced(1, 1, 1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7))
            .unwrap();
        bank.record_forced(2, 2, 2, &rec(1.0, 2, 0.0, 1.0, 2, 5.0))
            .unwrap();
        assert_eq!(
            bank.q_hat(Stage::One, &[1.0], 1).unwrap(),
            QHatValue::Unsampled
        );
        // Stage 2 mirrors q_tilde arithmetic with the all-sample states.
        let qh = bank.q_hat(Stage::Two, &[0.5], 2).unwrap();
        assert_eq!(qh, QHatValue::Finite(2.5));
    }

    #[test]
    fn hat_equals_tilde_on_identical_data() {
        // Feed the same records once as forced pulls and once as regular
        // clear-margin pulls; the estimators must then agree everywhere.
        let mut tilde_bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let mut hat_bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for t in 1..=40 {
            let a = if t % 2 == 0 { 2 } else { 1 };
            let x1 = rng.gen_range(-1.0..1.0);
            let x2 = rng.gen_range(-1.0..1.0);
            let y1 = 2.0 * x1 + rng.gen_range(-0.1..0.1);
            let y2 = -1.5 * x2 + rng.gen_range(-0.1..0.1);
            let r = rec(x1, a, y1, x2, a, y2);
            tilde_bank.record_forced(t, a, a, &r).unwrap();
            hat_bank.record_regular(t, &r, true).unwrap();
        }
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0)];
            for a in 1..=2 {
                let qt = tilde_bank.q_tilde(Stage::One, &x, a).unwrap();
                match hat_bank.q_hat(Stage::One, &x, a).unwrap() {
                    QHatValue::Finite(qh) => assert!((qt - qh).abs() < 1e-9),
                    QHatValue::Unsampled => panic!("restricted set unexpectedly empty"),
                }
                let qt2 = tilde_bank.q_tilde(Stage::Two, &x, a).unwrap();
                match hat_bank.q_hat(Stage::Two, &x, a).unwrap() {
                    QHatValue::Finite(qh2) => assert!((qt2 - qh2).abs() < 1e-9),
                    QHatValue::Unsampled => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn greedy_equals_hat_when_stores_coincide() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for t in 1..=30 {
            let a = if t % 2 == 0 { 2 } else { 1 };
            let x1 = rng.gen_range(-1.0..1.0);
            let x2 = rng.gen_range(-1.0..1.0);
            let r = rec(x1, a, 2.0 * x1, x2, a, -x2);
            // Every regular record carries the clear-margin flag, so the
            // restricted and all stores stay identical.
            bank.record_regular(t, &r, true).unwrap();
        }
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0)];
            for a in 1..=2 {
                let g = bank.q_hat_greedy(&x, a).unwrap();
                match bank.q_hat(Stage::One, &x, a).unwrap() {
                    QHatValue::Finite(h) => assert_abs_diff_eq!(g, h, epsilon = 1e-12),
                    QHatValue::Unsampled => panic!("restricted set empty"),
                }
            }
        }
    }

    #[test]
    fn greedy_single_pair_hand_arithmetic() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        bank.record_regular(1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7), false)
            .unwrap();
        bank.record_regular(2, &rec(1.0, 2, 0.0, 1.0, 2, 5.0), false)
            .unwrap();
        let g = bank.q_hat_greedy(&[1.0], 1).unwrap();
        assert_abs_diff_eq!(g, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn stage1_value_shifts_linearly_with_beta1() {
        // Two banks that differ only in the arm-1 reward data, by a known
        // coefficient offset; q_tilde must shift by exactly delta * x.
        let mut base = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let mut shifted = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let delta = 0.25;
        base.record_forced(1, 1, 1, &rec(1.0, 1, 5.0, 0.7, 1, 0.7))
            .unwrap();
        shifted
            .record_forced(1, 1, 1, &rec(1.0, 1, 5.0 + delta, 0.7, 1, 0.7))
            .unwrap();
        for bank in [&mut base, &mut shifted] {
            bank.record_forced(2, 2, 2, &rec(1.0, 2, 0.0, 1.0, 2, 5.0))
                .unwrap();
        }
        for x in [-0.8, -0.3, 0.0, 0.4, 0.9] {
            let q0 = base.q_tilde(Stage::One, &[x], 1).unwrap();
            let q1 = shifted.q_tilde(Stage::One, &[x], 1).unwrap();
            assert_abs_diff_eq!(q1 - q0, delta * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn digest_changes_with_state() {
        let mut bank = EstimatorBank::new(1, 2, 2, 0.5, 0.5);
        let d0 = bank.digest();
        bank.record_regular(1, &rec(0.5, 1, 2.5, 0.7, 1, 0.7), false)
            .unwrap();
        let d1 = bank.digest();
        assert_ne!(d0, d1);
        assert_eq!(d1, bank.digest());
    }
}
