//! Synthetic two-stage linear environment.
//!
//! A round proceeds as: draw `x1`, pull `a1`, observe
//! `y1 = beta1[a1]·x1 + eta` and `x2 = B[a1]ᵀ x1 + eps`, pull `a2`, observe
//! `y2 = beta2[a2]·x2 + eta`. The module also evaluates the oracle
//! Q-functions
//!
//! ```text
//! Q2(x2, a) = beta2[a]·x2
//! Q1(x1, a) = beta1[a]·x1 + E_eps[ max_a2 beta2[a2]·(B[a]ᵀ x1 + eps) ]
//! ```
//!
//! and the per-step regret decomposition
//! `[Q1(x1, a1*) - Q1(x1, a1)] + [Q2(x2, a2*) - Q2(x2, a2)]`, where the
//! stage-2 oracle arm is taken at the realized `x2`.
//!
//! The expectation over `eps` is computed numerically: exact summation for
//! finite-support noise, adaptive Simpson quadrature for one-dimensional
//! uniform noise, and Halton-sequence quasi-Monte-Carlo with a reported
//! standard error otherwise. Every oracle value carries its numerical error
//! estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, mat_t_vec};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("arm {arm} out of range 1..={max}")]
    ArmOutOfRange { arm: usize, max: usize },

    #[error("context has dimension {got}, instance expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),
}

/// A point mass of a finite-support distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atom {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// Bounded distribution on R^d: a centered uniform box or a finite mixture
/// of point masses. Used for both the context distribution and the per-arm
/// transition noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundedDist {
    /// Uniform on `[-halfwidth, halfwidth]^d`.
    UniformBox { halfwidth: f64 },
    /// Finite support with the given weights (normalized on load).
    Finite { atoms: Vec<Atom> },
}

impl BoundedDist {
    /// Degenerate distribution at a single point.
    pub fn point_mass(point: Vec<f64>) -> Self {
        BoundedDist::Finite {
            atoms: vec![Atom { point, weight: 1.0 }],
        }
    }

    fn validate(&self, d: usize, what: &str) -> Result<(), EnvError> {
        match self {
            BoundedDist::UniformBox { halfwidth } => {
                if !halfwidth.is_finite() || *halfwidth < 0.0 {
                    return Err(EnvError::InvalidInstance(format!(
                        "{what}: uniform box halfwidth must be finite and >= 0"
                    )));
                }
            }
            BoundedDist::Finite { atoms } => {
                if atoms.is_empty() {
                    return Err(EnvError::InvalidInstance(format!(
                        "{what}: finite distribution needs at least one atom"
                    )));
                }
                let mut total = 0.0;
                for a in atoms {
                    if a.point.len() != d {
                        return Err(EnvError::InvalidInstance(format!(
                            "{what}: atom has dimension {}, expected {d}",
                            a.point.len()
                        )));
                    }
                    if !a.weight.is_finite() || a.weight <= 0.0 {
                        return Err(EnvError::InvalidInstance(format!(
                            "{what}: atom weights must be positive"
                        )));
                    }
                    total += a.weight;
                }
                if !(total.is_finite() && total > 0.0) {
                    return Err(EnvError::InvalidInstance(format!(
                        "{what}: atom weights must sum to a positive value"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<f64> {
        match self {
            BoundedDist::UniformBox { halfwidth } => {
                let c = *halfwidth;
                if c == 0.0 {
                    return vec![0.0; d];
                }
                (0..d).map(|_| rng.gen_range(-c..c)).collect()
            }
            BoundedDist::Finite { atoms } => {
                let total: f64 = atoms.iter().map(|a| a.weight).sum();
                let mut u = rng.gen::<f64>() * total;
                for a in atoms {
                    if u < a.weight {
                        return a.point.clone();
                    }
                    u -= a.weight;
                }
                atoms.last().expect("validated non-empty").point.clone()
            }
        }
    }
}

/// Full generative model of a two-stage instance: per-arm reward vectors,
/// transition matrices (stored row-major), reward-noise scale, per-arm
/// transition-noise distributions, and the context distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
    /// First-stage reward coefficients, one d-vector per first-stage arm.
    pub beta1: Vec<Vec<f64>>,
    /// Second-stage reward coefficients, one d-vector per second-stage arm.
    pub beta2: Vec<Vec<f64>>,
    /// Transition matrices, one row-major d×d matrix per first-stage arm.
    #[serde(rename = "B")]
    pub bmat: Vec<Vec<f64>>,
    /// Standard deviation of the Gaussian reward noise in both stages.
    pub eta_sigma: f64,
    /// Transition-noise distribution per first-stage arm.
    pub eps: Vec<BoundedDist>,
    /// Context distribution.
    pub x_dist: BoundedDist,
}

impl ProblemInstance {
    /// The bundled one-dimensional two-arm benchmark instance:
    /// `beta1 = (5, 0)`, `beta2 = (1, 5)`, `B = (1, 2)`, `eta_sigma = 0.1`,
    /// with both transition noises and the context uniform on `(-1, 1)`.
    ///
    /// Designed so that a policy ignoring downstream effects picks the
    /// wrong first-stage arm on a positive-measure context region. Also
    /// shipped as `configs/synthetic1d.json`.
    pub fn synthetic_1d() -> Self {
        ProblemInstance {
            d: 1,
            k1: 2,
            k2: 2,
            beta1: vec![vec![5.0], vec![0.0]],
            beta2: vec![vec![1.0], vec![5.0]],
            bmat: vec![vec![1.0], vec![2.0]],
            eta_sigma: 0.1,
            eps: vec![
                BoundedDist::UniformBox { halfwidth: 1.0 },
                BoundedDist::UniformBox { halfwidth: 1.0 },
            ],
            x_dist: BoundedDist::UniformBox { halfwidth: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let d = self.d;
        if d == 0 {
            return Err(EnvError::InvalidInstance("d must be positive".into()));
        }
        if self.k1 < 2 || self.k2 < 2 {
            return Err(EnvError::InvalidInstance(
                "k1 and k2 must each be at least 2".into(),
            ));
        }
        if self.beta1.len() != self.k1 {
            return Err(EnvError::InvalidInstance(format!(
                "beta1 has {} entries, expected k1 = {}",
                self.beta1.len(),
                self.k1
            )));
        }
        if self.beta2.len() != self.k2 {
            return Err(EnvError::InvalidInstance(format!(
                "beta2 has {} entries, expected k2 = {}",
                self.beta2.len(),
                self.k2
            )));
        }
        if self.bmat.len() != self.k1 {
            return Err(EnvError::InvalidInstance(format!(
                "B has {} entries, expected k1 = {}",
                self.bmat.len(),
                self.k1
            )));
        }
        if self.eps.len() != self.k1 {
            return Err(EnvError::InvalidInstance(format!(
                "eps has {} entries, expected k1 = {}",
                self.eps.len(),
                self.k1
            )));
        }
        for (i, b) in self.beta1.iter().enumerate() {
            if b.len() != d {
                return Err(EnvError::InvalidInstance(format!(
                    "beta1[{i}] has dimension {}, expected {d}",
                    b.len()
                )));
            }
        }
        for (i, b) in self.beta2.iter().enumerate() {
            if b.len() != d {
                return Err(EnvError::InvalidInstance(format!(
                    "beta2[{i}] has dimension {}, expected {d}",
                    b.len()
                )));
            }
        }
        for (i, m) in self.bmat.iter().enumerate() {
            if m.len() != d * d {
                return Err(EnvError::InvalidInstance(format!(
                    "B[{i}] has {} entries, expected d*d = {}",
                    m.len(),
                    d * d
                )));
            }
        }
        if !(self.eta_sigma.is_finite() && self.eta_sigma >= 0.0) {
            return Err(EnvError::InvalidInstance(
                "eta_sigma must be finite and >= 0".into(),
            ));
        }
        for (i, e) in self.eps.iter().enumerate() {
            e.validate(d, &format!("eps[{i}]"))?;
        }
        self.x_dist.validate(d, "x_dist")?;
        Ok(())
    }

    fn check_arm(&self, arm: usize, stage: Stage) -> Result<(), EnvError> {
        let max = match stage {
            Stage::One => self.k1,
            Stage::Two => self.k2,
        };
        if arm == 0 || arm > max {
            return Err(EnvError::ArmOutOfRange { arm, max });
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), EnvError> {
        if x.len() != self.d {
            return Err(EnvError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Decision stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// One unit's trajectory. Arms are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub x1: Vec<f64>,
    pub a1: usize,
    pub y1: f64,
    pub x2: Vec<f64>,
    pub a2: usize,
    pub y2: f64,
}

/// Draw a first-stage context.
pub fn sample_context<R: Rng + ?Sized>(inst: &ProblemInstance, rng: &mut R) -> Vec<f64> {
    inst.x_dist.sample(inst.d, rng)
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        // Keep the draw so the stream stays aligned across noise settings.
        let _ = rng.gen::<f64>();
        return 0.0;
    }
    rand_distr::Distribution::sample(&rand_distr::Normal::new(0.0, sigma).unwrap(), rng)
}

/// Play `a1` at `x1`: returns the first-stage reward and the second-stage
/// context.
pub fn step_stage1<R: Rng + ?Sized>(
    inst: &ProblemInstance,
    x1: &[f64],
    a1: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), EnvError> {
    inst.check_arm(a1, Stage::One)?;
    inst.check_dim(x1)?;
    let y1 = dot(&inst.beta1[a1 - 1], x1) + gaussian(inst.eta_sigma, rng);
    let mut x2 = mat_t_vec(&inst.bmat[a1 - 1], inst.d, x1);
    let eps = inst.eps[a1 - 1].sample(inst.d, rng);
    for (xi, ei) in x2.iter_mut().zip(eps.iter()) {
        *xi += ei;
    }
    Ok((y1, x2))
}

/// Play `a2` at `x2`: returns the second-stage reward.
pub fn step_stage2<R: Rng + ?Sized>(
    inst: &ProblemInstance,
    x2: &[f64],
    a2: usize,
    rng: &mut R,
) -> Result<f64, EnvError> {
    inst.check_arm(a2, Stage::Two)?;
    inst.check_dim(x2)?;
    Ok(dot(&inst.beta2[a2 - 1], x2) + gaussian(inst.eta_sigma, rng))
}

/// Exact second-stage Q-function `beta2[a]·x2`.
pub fn oracle_q2(inst: &ProblemInstance, x2: &[f64], a: usize) -> Result<f64, EnvError> {
    inst.check_arm(a, Stage::Two)?;
    inst.check_dim(x2)?;
    Ok(dot(&inst.beta2[a - 1], x2))
}

/// A numerically computed oracle value together with its error estimate.
/// When the requested precision could not be certified within budget the
/// error estimate exceeds the precision; the caller may reject.
#[derive(Debug, Clone, Copy)]
pub struct OracleValue {
    pub value: f64,
    pub error: f64,
}

/// First-stage Q-function. The expectation over the transition noise is
/// computed to (approximately) the requested absolute precision.
pub fn oracle_q1(
    inst: &ProblemInstance,
    x1: &[f64],
    a: usize,
    precision: f64,
) -> Result<OracleValue, EnvError> {
    inst.check_arm(a, Stage::One)?;
    inst.check_dim(x1)?;
    let z = mat_t_vec(&inst.bmat[a - 1], inst.d, x1);
    let best_of = |v: &[f64]| -> f64 {
        inst.beta2
            .iter()
            .map(|b| dot(b, v))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (expectation, error) = match &inst.eps[a - 1] {
        BoundedDist::Finite { atoms } => {
            let total: f64 = atoms.iter().map(|at| at.weight).sum();
            let mut acc = 0.0;
            let mut shifted = vec![0.0; inst.d];
            for at in atoms {
                for i in 0..inst.d {
                    shifted[i] = z[i] + at.point[i];
                }
                acc += at.weight * best_of(&shifted);
            }
            (acc / total, 0.0)
        }
        BoundedDist::UniformBox { halfwidth } => {
            let c = *halfwidth;
            if c == 0.0 {
                (best_of(&z), 0.0)
            } else if inst.d == 1 {
                let f = |e: f64| best_of(&[z[0] + e]);
                let (integral, err) = adaptive_simpson(&f, -c, c, precision * 2.0 * c);
                (integral / (2.0 * c), err / (2.0 * c))
            } else {
                qmc_box_mean(&z, c, inst.d, &best_of, precision)
            }
        }
    };
    Ok(OracleValue {
        value: dot(&inst.beta1[a - 1], x1) + expectation,
        error,
    })
}

/// Outcome of an oracle argmax: the chosen arm and whether the winning gap
/// fell below the combined numerical error estimate.
#[derive(Debug, Clone, Copy)]
pub struct OracleDecision {
    pub arm: usize,
    pub near_tie: bool,
}

/// Oracle action at a context: argmax of the stage's Q-function, ties
/// broken toward the lowest arm index.
pub fn oracle_action(
    inst: &ProblemInstance,
    stage: Stage,
    x: &[f64],
    precision: f64,
) -> Result<OracleDecision, EnvError> {
    let values: Vec<OracleValue> = match stage {
        Stage::One => (1..=inst.k1)
            .map(|a| oracle_q1(inst, x, a, precision))
            .collect::<Result<_, _>>()?,
        Stage::Two => (1..=inst.k2)
            .map(|a| {
                oracle_q2(inst, x, a).map(|v| OracleValue {
                    value: v,
                    error: 0.0,
                })
            })
            .collect::<Result<_, _>>()?,
    };
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if v.value > values[best].value {
            best = i;
        }
    }
    let mut near_tie = false;
    for (i, v) in values.iter().enumerate() {
        if i != best {
            let gap = values[best].value - v.value;
            if gap <= values[best].error + v.error {
                near_tie = true;
            }
        }
    }
    Ok(OracleDecision {
        arm: best + 1,
        near_tie,
    })
}

/// Per-step regret of a realized round, decomposed as a first-stage Q-gap
/// at `x1` plus a second-stage Q-gap at the realized `x2`.
pub fn per_step_regret(
    inst: &ProblemInstance,
    rec: &RoundRecord,
    precision: f64,
) -> Result<OracleValue, EnvError> {
    inst.check_arm(rec.a1, Stage::One)?;
    inst.check_arm(rec.a2, Stage::Two)?;
    let q1: Vec<OracleValue> = (1..=inst.k1)
        .map(|a| oracle_q1(inst, &rec.x1, a, precision))
        .collect::<Result<_, _>>()?;
    let mut best1 = 0usize;
    for (i, v) in q1.iter().enumerate() {
        if v.value > q1[best1].value {
            best1 = i;
        }
    }
    let gap1 = q1[best1].value - q1[rec.a1 - 1].value;
    let err1 = q1[best1].error + q1[rec.a1 - 1].error;

    let q2: Vec<f64> = (1..=inst.k2)
        .map(|a| oracle_q2(inst, &rec.x2, a))
        .collect::<Result<_, _>>()?;
    let best2 = q2.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let gap2 = best2 - q2[rec.a2 - 1];

    Ok(OracleValue {
        value: gap1 + gap2,
        error: err1,
    })
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` targeting the given
/// absolute tolerance on the integral. Returns the integral and an error
/// estimate (the accumulated |S_fine - S_coarse| / 15 of accepted panels).
///
/// Panels where the integrand is linear are integrated exactly and accepted
/// immediately, so piecewise-linear integrands cost only a few bisections
/// around each kink.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut acc = (0.0, 0.0);
    simpson_rec(
        f,
        a,
        fa,
        m,
        fm,
        b,
        fb,
        whole,
        tol.max(f64::MIN_POSITIVE),
        52,
        &mut acc,
    );
    acc
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    fa: f64,
    m: f64,
    fm: f64,
    b: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    acc: &mut (f64, f64),
) {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if diff.abs() <= 15.0 * tol || depth == 0 || lm <= a || rm >= b {
        acc.0 += left + right + diff / 15.0;
        acc.1 += diff.abs() / 15.0;
        return;
    }
    simpson_rec(f, a, fa, lm, flm, m, fm, left, tol / 2.0, depth - 1, acc);
    simpson_rec(f, m, fm, rm, frm, b, fb, right, tol / 2.0, depth - 1, acc);
}

/// Mean of `f` over the uniform box `z + [-c, c]^d` via Halton-sequence
/// quasi-Monte-Carlo, doubling the point budget until the batch-based
/// standard error drops below the precision or the budget cap is hit.
fn qmc_box_mean<F: Fn(&[f64]) -> f64>(
    z: &[f64],
    c: f64,
    d: usize,
    f: &F,
    precision: f64,
) -> (f64, f64) {
    const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    const BATCHES: usize = 16;
    let mut n = 4096usize;
    let mut point = vec![0.0; d];
    loop {
        let per_batch = n / BATCHES;
        let mut batch_means = [0.0f64; BATCHES];
        for (bi, bm) in batch_means.iter_mut().enumerate() {
            let mut sum = 0.0;
            for i in 0..per_batch {
                let idx = (bi * per_batch + i + 1) as u64;
                for (j, p) in point.iter_mut().enumerate() {
                    let u = halton(idx, PRIMES[j % PRIMES.len()]);
                    *p = z[j] + (2.0 * u - 1.0) * c;
                }
                sum += f(&point);
            }
            *bm = sum / per_batch as f64;
        }
        let mean = batch_means.iter().sum::<f64>() / BATCHES as f64;
        let var = batch_means
            .iter()
            .map(|m| (m - mean).powi(2))
            .sum::<f64>()
            / (BATCHES as f64 - 1.0);
        let se = (var / BATCHES as f64).sqrt();
        if se <= precision || n >= 1 << 21 {
            return (mean, se);
        }
        n *= 2;
    }
}

fn halton(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut frac = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * frac;
        index /= base;
        frac /= base as f64;
    }
    result
}
