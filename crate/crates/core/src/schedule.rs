//! Deterministic forced-sampling schedules.
//!
//! Rounds are laid out in doubling epochs. Epoch `n` occupies the block of
//! rounds `((2^n - 1)·k·q, 2^n·k·q]`, split into `k` consecutive runs of
//! `q` rounds, one per schedule slot. With `k = 2` this reproduces the
//! two-arm schedule `{(2^(n+1) - 2)q + j : j = q(a-1)+1, ..., qa}`; with
//! `k = K₁ ∨ K₂` it is the K-armed schedule `{(2^n - 1)(K₁∨K₂)q + j}`.
//! Between blocks the schedule claims nothing, so forced rounds thin out
//! logarithmically.

/// Which algorithm family the schedule serves. The arithmetic is identical;
/// the variant only fixes how slots map to stage arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleVariant {
    TwoArm,
    KArm,
}

/// A deterministic forced-pull schedule with `slots` arms and runs of
/// length `q`.
#[derive(Debug, Clone)]
pub struct ForcedSchedule {
    q: u64,
    slots: u64,
    variant: ScheduleVariant,
}

impl ForcedSchedule {
    /// Two-slot schedule for the two-armed algorithm.
    pub fn two_arm(q: usize) -> Self {
        Self::with_variant(q, 2, ScheduleVariant::TwoArm)
    }

    /// `slots`-slot schedule for the K-armed algorithm (`slots = K₁ ∨ K₂`)
    /// or for a composite-arm one-stage bandit.
    pub fn k_arm(q: usize, slots: usize) -> Self {
        Self::with_variant(q, slots, ScheduleVariant::KArm)
    }

    fn with_variant(q: usize, slots: usize, variant: ScheduleVariant) -> Self {
        assert!(q >= 1, "schedule parameter q must be at least 1");
        assert!(slots >= 2, "schedule needs at least two slots");
        Self {
            q: q as u64,
            slots: slots as u64,
            variant,
        }
    }

    pub fn q(&self) -> usize {
        self.q as usize
    }

    pub fn slots(&self) -> usize {
        self.slots as usize
    }

    pub fn variant(&self) -> ScheduleVariant {
        self.variant
    }

    /// Block size `k·q` of one epoch.
    fn block(&self) -> u64 {
        self.slots * self.q
    }

    /// Start offset `(2^n - 1)·k·q` of epoch `n`, saturating on overflow.
    fn epoch_start(&self, n: u32) -> u64 {
        match 1u64.checked_shl(n) {
            Some(p) => (p - 1).saturating_mul(self.block()),
            None => u64::MAX,
        }
    }

    /// The slot forced at round `t` (1-based), if any.
    pub fn forced_arm_at(&self, t: usize) -> Option<usize> {
        if t == 0 {
            return None;
        }
        let t = t as u64;
        let block = self.block();
        // Smallest n with 2^n ≥ ceil(t / block); the candidate epoch is the
        // only one whose block can contain t.
        let m = t.div_ceil(block);
        let n = if m <= 1 { 0 } else { 64 - (m - 1).leading_zeros() };
        let start = self.epoch_start(n);
        if t <= start {
            return None;
        }
        let offset = t - start;
        debug_assert!(offset <= block);
        Some(((offset - 1) / self.q) as usize + 1)
    }

    /// `|T_a ∩ [t]|`: how many rounds up to and including `t` force slot
    /// `a`.
    pub fn forced_count(&self, slot: usize, t: usize) -> usize {
        assert!(
            (1..=self.slots as usize).contains(&slot),
            "slot {slot} out of range 1..={}",
            self.slots
        );
        let t = t as u64;
        let run_start = (slot as u64 - 1) * self.q;
        let mut count = 0u64;
        for n in 0.. {
            let start = self.epoch_start(n);
            if start >= t {
                break;
            }
            let into_run = t.saturating_sub(start + run_start);
            count += into_run.min(self.q);
        }
        count as usize
    }

    /// Stage arms pulled when slot `a` fires: `A₁ = ((a-1) mod K₁) + 1`,
    /// `A₂ = ((a-1) mod K₂) + 1`. For the two-arm variant both equal `a`.
    pub fn stage_arms(&self, slot: usize, k1: usize, k2: usize) -> (usize, usize) {
        debug_assert!((1..=self.slots as usize).contains(&slot));
        ((slot - 1) % k1 + 1, (slot - 1) % k2 + 1)
    }
}
