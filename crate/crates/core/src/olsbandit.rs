//! One-stage linear-response bandit with forced sampling and dual
//! estimators, used by the Static (composite-arm) and Recourse baselines.
//!
//! The decision rule mirrors the two-stage algorithm with `Q ≡ βᵀx`: on
//! forced rounds pull the scheduled slot; otherwise keep the arms whose
//! forced-sample score is within `h/2` of the best and pick the highest
//! all-sample score among them. With two arms this reduces to "use the
//! forced estimate when it separates the arms by more than h/2, else the
//! all-sample estimate".

use nalgebra::DVector;

use crate::linalg::{dot, OlsState};
use crate::schedule::ForcedSchedule;

#[derive(Debug, Clone)]
struct BanditArm {
    forced: OlsState,
    forced_coef: Option<DVector<f64>>,
    all: OlsState,
    all_coef: Option<DVector<f64>>,
}

/// Outcome of a choice: the arm and whether it came from a forced pull.
#[derive(Debug, Clone, Copy)]
pub struct BanditChoice {
    pub arm: usize,
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct OlsBandit {
    d: usize,
    h: f64,
    schedule: ForcedSchedule,
    arms: Vec<BanditArm>,
}

impl OlsBandit {
    pub fn new(d: usize, arms: usize, q: usize, h: f64) -> Self {
        let schedule = if arms == 2 {
            ForcedSchedule::two_arm(q)
        } else {
            ForcedSchedule::k_arm(q, arms)
        };
        Self {
            d,
            h,
            schedule,
            arms: (0..arms)
                .map(|_| BanditArm {
                    forced: OlsState::new(d, 1),
                    forced_coef: None,
                    all: OlsState::new(d, 1),
                    all_coef: None,
                })
                .collect(),
        }
    }

    pub fn arm_count(&self) -> usize {
        self.arms.len()
    }

    pub fn schedule(&self) -> &ForcedSchedule {
        &self.schedule
    }

    /// Choose an arm for round `t` at context `x`.
    pub fn choose(&self, t: usize, x: &[f64]) -> BanditChoice {
        if let Some(slot) = self.schedule.forced_arm_at(t) {
            return BanditChoice {
                arm: slot,
                forced: true,
            };
        }
        let k = self.arms.len();
        let forced_scores: Option<Vec<f64>> = self
            .arms
            .iter()
            .map(|a| a.forced_coef.as_ref().map(|c| dot(c.as_slice(), x)))
            .collect();
        let arm = match forced_scores {
            // Cold start before every arm has an invertible forced design:
            // rotate deterministically.
            None => (t - 1) % k + 1,
            Some(scores) => {
                let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let keep: Vec<usize> = (0..k)
                    .filter(|&i| best - scores[i] <= self.h / 2.0)
                    .collect();
                if keep.len() == 1 {
                    keep[0] + 1
                } else {
                    let mut chosen = keep[0];
                    let mut chosen_score = f64::NEG_INFINITY;
                    for &i in &keep {
                        // All-sample designs dominate forced designs, so
                        // these coefficients exist whenever the forced ones
                        // do.
                        let s = self.arms[i]
                            .all_coef
                            .as_ref()
                            .map(|c| dot(c.as_slice(), x))
                            .unwrap_or(f64::NEG_INFINITY);
                        if s > chosen_score {
                            chosen_score = s;
                            chosen = i;
                        }
                    }
                    chosen + 1
                }
            }
        };
        BanditChoice { arm, forced: false }
    }

    /// Record the observed outcome of round `t`. Forced rounds for the
    /// scheduled arm update both estimators, everything else only the
    /// all-sample one.
    pub fn update(&mut self, t: usize, arm: usize, x: &[f64], y: f64) {
        assert!(
            (1..=self.arms.len()).contains(&arm),
            "arm {arm} out of range"
        );
        assert_eq!(x.len(), self.d, "context dimension mismatch");
        let forced_here = self.schedule.forced_arm_at(t) == Some(arm);
        let state = &mut self.arms[arm - 1];
        if forced_here {
            state.forced.update(x, &[y]).expect("dims checked");
            state.forced_coef = state.forced.solve_vector().ok();
        }
        state.all.update(x, &[y]).expect("dims checked");
        state.all_coef = state.all.solve_vector().ok();
    }

    pub fn digest_into(&self, h: &mut impl std::hash::Hasher) {
        use std::hash::Hash;
        for arm in &self.arms {
            for s in [&arm.forced, &arm.all] {
                s.len().hash(h);
                for v in s.sigma().iter().chain(s.cross().iter()) {
                    v.to_bits().hash(h);
                }
            }
        }
    }
}
