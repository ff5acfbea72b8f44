//! Off-policy evaluation of two-stage policies on logged data.
//!
//! The evaluator streams logged records past a live policy and accepts a
//! record only when the policy reproduces both logged actions; accepted
//! records update the policy and contribute their total reward. On data
//! logged under uniform randomization this estimates the policy's average
//! reward unbiasedly. Non-uniform logs are first uniformized by estimating
//! each record's propensity (a product of three logistic components),
//! duplicating the record `floor(1/p)` times, and shuffling.
//!
//! CSV schema (header required): `x1_0..x1_{d-1}, a1, y1, x2_0..x2_{d-1},
//! a2, y2[, p]`, arms 1-based, decimal point `.`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{sample_context, step_stage1, step_stage2, ProblemInstance, RoundRecord};
use crate::linalg::{logistic_fit, LogisticFit};
use crate::policies::{Policy, PolicyError};

/// Smallest propensity admitted before duplication; caps the duplication
/// factor at `1/floor` copies.
pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("record {row} has no propensity; fit or supply propensities first")]
    MissingPropensity { row: usize },

    #[error("record {row} has non-positive propensity {value}")]
    InvalidPropensity { row: usize, value: f64 },

    #[error("replay horizon must be at least 1")]
    InvalidHorizon,

    #[error("stream exhausted with zero matched records")]
    EvaluationFailed,

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error("propensity fit failed: {0}")]
    Fit(String),
}

/// One logged unit: trajectory plus (optionally) the logging policy's
/// propensity for the observed action pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggedRecord {
    pub x1: Vec<f64>,
    pub a1: usize,
    pub y1: f64,
    pub x2: Vec<f64>,
    pub a2: usize,
    pub y2: f64,
    pub propensity: Option<f64>,
}

impl LoggedRecord {
    pub fn total_reward(&self) -> f64 {
        self.y1 + self.y2
    }
}

/// Shape the loader validates rows against.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplaySchema {
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
}

/// Logged records plus shape metadata.
#[derive(Debug, Clone)]
pub struct ReplayDataset {
    pub records: Vec<LoggedRecord>,
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
}

impl ReplayDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_propensities(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.propensity.is_some())
    }
}

/// Load a dataset from CSV. Returns the dataset and any non-fatal
/// warnings (header-only file, ignored columns).
pub fn load_dataset(
    path: &Path,
    schema: &ReplaySchema,
) -> Result<(ReplayDataset, Vec<String>), ReplayError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => ReplayError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => ReplayError::Schema(e.to_string()),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| ReplayError::Schema(e.to_string()))?
        .clone();
    let mut warnings = Vec::new();

    let find = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };
    let require = |name: &str| -> Result<usize, ReplayError> {
        find(name).ok_or_else(|| ReplayError::Schema(format!("missing column `{name}`")))
    };

    // Context columns must match the declared dimension exactly.
    for prefix in ["x1", "x2"] {
        let count = headers
            .iter()
            .filter(|h| {
                h.strip_prefix(&format!("{prefix}_"))
                    .is_some_and(|s| s.parse::<usize>().is_ok())
            })
            .count();
        if count != schema.d {
            return Err(ReplayError::Schema(format!(
                "found {count} `{prefix}_*` columns, schema expects d = {}",
                schema.d
            )));
        }
    }

    let x1_cols: Vec<usize> = (0..schema.d)
        .map(|i| require(&format!("x1_{i}")))
        .collect::<Result<_, _>>()?;
    let x2_cols: Vec<usize> = (0..schema.d)
        .map(|i| require(&format!("x2_{i}")))
        .collect::<Result<_, _>>()?;
    let a1_col = require("a1")?;
    let y1_col = require("y1")?;
    let a2_col = require("a2")?;
    let y2_col = require("y2")?;
    let p_col = find("p");

    let known: BTreeSet<usize> = x1_cols
        .iter()
        .chain(x2_cols.iter())
        .copied()
        .chain([a1_col, y1_col, a2_col, y2_col])
        .chain(p_col)
        .collect();
    for (i, h) in headers.iter().enumerate() {
        if !known.contains(&i) {
            warnings.push(format!("ignoring unrecognized column `{h}`"));
        }
    }

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let rownum = idx + 1;
        let row = row.map_err(|e| ReplayError::Parse {
            row: rownum,
            column: "<row>".into(),
            message: e.to_string(),
        })?;
        let field = |col: usize, name: &str| -> Result<&str, ReplayError> {
            row.get(col).ok_or_else(|| ReplayError::Parse {
                row: rownum,
                column: name.into(),
                message: "missing field".into(),
            })
        };
        let parse_f64 = |col: usize, name: &str| -> Result<f64, ReplayError> {
            let s = field(col, name)?;
            s.parse::<f64>().map_err(|_| ReplayError::Parse {
                row: rownum,
                column: name.into(),
                message: format!("`{s}` is not a number"),
            })
        };
        let parse_arm = |col: usize, name: &str, max: usize| -> Result<usize, ReplayError> {
            let s = field(col, name)?;
            let a = s.parse::<usize>().map_err(|_| ReplayError::Parse {
                row: rownum,
                column: name.into(),
                message: format!("`{s}` is not an arm index"),
            })?;
            if a == 0 || a > max {
                return Err(ReplayError::Parse {
                    row: rownum,
                    column: name.into(),
                    message: format!("arm {a} out of range 1..={max}"),
                });
            }
            Ok(a)
        };

        let x1: Vec<f64> = x1_cols
            .iter()
            .enumerate()
            .map(|(i, &c)| parse_f64(c, &format!("x1_{i}")))
            .collect::<Result<_, _>>()?;
        let x2: Vec<f64> = x2_cols
            .iter()
            .enumerate()
            .map(|(i, &c)| parse_f64(c, &format!("x2_{i}")))
            .collect::<Result<_, _>>()?;
        let a1 = parse_arm(a1_col, "a1", schema.k1)?;
        let a2 = parse_arm(a2_col, "a2", schema.k2)?;
        let y1 = parse_f64(y1_col, "y1")?;
        let y2 = parse_f64(y2_col, "y2")?;
        let propensity = match p_col {
            None => None,
            Some(c) => {
                let s = field(c, "p")?;
                if s.is_empty() {
                    None
                } else {
                    let p = parse_f64(c, "p")?;
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(ReplayError::Parse {
                            row: rownum,
                            column: "p".into(),
                            message: format!("propensity {p} outside (0, 1]"),
                        });
                    }
                    Some(p)
                }
            }
        };
        records.push(LoggedRecord {
            x1,
            a1,
            y1,
            x2,
            a2,
            y2,
            propensity,
        });
    }

    if records.is_empty() {
        warnings.push("dataset has a header but no rows".into());
    }

    Ok((
        ReplayDataset {
            records,
            d: schema.d,
            k1: schema.k1,
            k2: schema.k2,
        },
        warnings,
    ))
}

/// Write a dataset in the documented CSV schema.
pub fn write_dataset(path: &Path, dataset: &ReplayDataset) -> Result<(), ReplayError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ReplayError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut header = Vec::new();
    for i in 0..dataset.d {
        header.push(format!("x1_{i}"));
    }
    header.extend(["a1".to_string(), "y1".to_string()]);
    for i in 0..dataset.d {
        header.push(format!("x2_{i}"));
    }
    header.extend(["a2".to_string(), "y2".to_string(), "p".to_string()]);
    let io_err = |e: csv::Error| ReplayError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    w.write_record(&header).map_err(io_err)?;
    for r in &dataset.records {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.extend(r.x1.iter().map(|v| v.to_string()));
        row.push(r.a1.to_string());
        row.push(r.y1.to_string());
        row.extend(r.x2.iter().map(|v| v.to_string()));
        row.push(r.a2.to_string());
        row.push(r.y2.to_string());
        row.push(r.propensity.map(|p| p.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| ReplayError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Propensity estimation
// ---------------------------------------------------------------------------

/// A record field usable as a logistic predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRef {
    X1(usize),
    A1,
    Y1,
    X2(usize),
    Y2,
}

impl FieldRef {
    fn value(&self, r: &LoggedRecord) -> f64 {
        match self {
            FieldRef::X1(i) => r.x1[*i],
            FieldRef::A1 => r.a1 as f64,
            FieldRef::Y1 => r.y1,
            FieldRef::X2(i) => r.x2[*i],
            FieldRef::Y2 => r.y2,
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "a1" => return Ok(FieldRef::A1),
            "y1" => return Ok(FieldRef::Y1),
            "y2" => return Ok(FieldRef::Y2),
            _ => {}
        }
        if let Some(i) = s.strip_prefix("x1_").and_then(|v| v.parse().ok()) {
            return Ok(FieldRef::X1(i));
        }
        if let Some(i) = s.strip_prefix("x2_").and_then(|v| v.parse().ok()) {
            return Ok(FieldRef::X2(i));
        }
        Err(format!("unknown field `{s}`"))
    }
}

impl std::fmt::Display for FieldRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FieldRef::X1(i) => write!(f, "x1_{i}"),
            FieldRef::A1 => write!(f, "a1"),
            FieldRef::Y1 => write!(f, "y1"),
            FieldRef::X2(i) => write!(f, "x2_{i}"),
            FieldRef::Y2 => write!(f, "y2"),
        }
    }
}

impl Serialize for FieldRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FieldRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        FieldRef::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Predictors of one logistic component: named fields plus optional
/// pairwise interaction products, with an implicit intercept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub fields: Vec<FieldRef>,
    #[serde(default)]
    pub interactions: Vec<(FieldRef, FieldRef)>,
}

impl ComponentSpec {
    fn features(&self, r: &LoggedRecord) -> Vec<f64> {
        let mut f = Vec::with_capacity(1 + self.fields.len() + self.interactions.len());
        f.push(1.0);
        for field in &self.fields {
            f.push(field.value(r));
        }
        for (a, b) in &self.interactions {
            f.push(a.value(r) * b.value(r));
        }
        f
    }

    fn width(&self) -> usize {
        1 + self.fields.len() + self.interactions.len()
    }
}

/// Declarative three-component propensity model: stage-1 treatment,
/// stay/drop-out (when a designated no-treatment arm exists), and stage-2
/// treatment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub stage1: ComponentSpec,
    #[serde(default)]
    pub stay: Option<ComponentSpec>,
    pub stage2: ComponentSpec,
    /// Second-stage arm meaning "did not enter stage 2". Rows pulling it
    /// are excluded from the stage-2 treatment model, and the stay model
    /// predicts avoiding it.
    #[serde(default)]
    pub stay_arm: Option<usize>,
}

impl PredictorSpec {
    /// Default recipe: stage-1 treatment from `x1`; stay/drop-out from
    /// `x1`, `a1`, `x1·a1`, `y1`; stage-2 treatment from those plus `x2`.
    pub fn default_for_dim(d: usize, stay_arm: Option<usize>) -> Self {
        let x1: Vec<FieldRef> = (0..d).map(FieldRef::X1).collect();
        let x1_a1: Vec<(FieldRef, FieldRef)> =
            (0..d).map(|i| (FieldRef::X1(i), FieldRef::A1)).collect();
        let mut stage2_fields = x1.clone();
        stage2_fields.push(FieldRef::A1);
        stage2_fields.push(FieldRef::Y1);
        stage2_fields.extend((0..d).map(FieldRef::X2));
        PredictorSpec {
            stage1: ComponentSpec {
                fields: x1.clone(),
                interactions: vec![],
            },
            stay: stay_arm.map(|_| ComponentSpec {
                fields: {
                    let mut f = x1.clone();
                    f.push(FieldRef::A1);
                    f.push(FieldRef::Y1);
                    f
                },
                interactions: x1_a1.clone(),
            }),
            stage2: ComponentSpec {
                fields: stage2_fields,
                interactions: x1_a1,
            },
            stay_arm,
        }
    }
}

/// Diagnostics of a propensity fit.
#[derive(Debug, Clone, Default)]
pub struct PropensityFitReport {
    pub warnings: Vec<String>,
    pub stage1_converged: bool,
    pub stay_converged: Option<bool>,
    pub stage2_converged: bool,
    pub separation_flagged: bool,
}

struct FittedComponent {
    fit: Option<LogisticFit>,
    /// Label convention: probability returned is for `a == high_arm`.
    high_arm: usize,
}

fn fit_binary_component(
    rows: &[&LoggedRecord],
    spec: &ComponentSpec,
    labels: &[f64],
    what: &str,
    report: &mut PropensityFitReport,
) -> Result<Option<LogisticFit>, ReplayError> {
    if rows.len() < spec.width() {
        report.warnings.push(format!(
            "{what}: only {} rows for {} predictors; component contributes factor 1",
            rows.len(),
            spec.width()
        ));
        return Ok(None);
    }
    let mut flat = Vec::with_capacity(rows.len() * spec.width());
    for r in rows {
        flat.extend(spec.features(r));
    }
    let x = DMatrix::from_row_slice(rows.len(), spec.width(), &flat);
    let fit = logistic_fit(&x, labels, 100, 1e-8).map_err(|e| ReplayError::Fit(e.to_string()))?;
    if fit.separation {
        report.separation_flagged = true;
        report
            .warnings
            .push(format!("{what}: separation detected, coefficients clamped"));
    }
    Ok(Some(fit))
}

/// Fit the three-component propensity model and fill every record's
/// propensity (clamped below at `floor`). Overwrites any propensities
/// already present.
pub fn fit_propensities(
    dataset: &mut ReplayDataset,
    spec: &PredictorSpec,
    floor: f64,
) -> Result<PropensityFitReport, ReplayError> {
    let mut report = PropensityFitReport::default();
    if dataset.records.is_empty() {
        report.warnings.push("empty dataset, nothing to fit".into());
        return Ok(report);
    }

    let all: Vec<&LoggedRecord> = dataset.records.iter().collect();

    // Stage-1 treatment model (binary).
    let stage1 = if dataset.k1 == 2 {
        let labels: Vec<f64> = all.iter().map(|r| (r.a1 == 2) as u8 as f64).collect();
        let fit = fit_binary_component(&all, &spec.stage1, &labels, "stage-1 model", &mut report)?;
        report.stage1_converged = fit.as_ref().is_some_and(|f| f.converged);
        FittedComponent { fit, high_arm: 2 }
    } else {
        report.warnings.push(format!(
            "stage-1 model needs k1 = 2 (got {}); component contributes factor 1",
            dataset.k1
        ));
        FittedComponent {
            fit: None,
            high_arm: 2,
        }
    };

    // Stay/drop-out model: probability of entering stage 2 (not pulling
    // the designated no-treatment arm).
    let stay = match (&spec.stay, spec.stay_arm) {
        (Some(cs), Some(stay_arm)) => {
            let labels: Vec<f64> = all.iter().map(|r| (r.a2 != stay_arm) as u8 as f64).collect();
            let fit = fit_binary_component(&all, cs, &labels, "stay model", &mut report)?;
            report.stay_converged = fit.as_ref().map(|f| f.converged);
            Some((fit, stay_arm))
        }
        _ => {
            report
                .warnings
                .push("no stay/drop-out arm configured; component contributes factor 1".into());
            None
        }
    };

    // Stage-2 treatment model among rows that entered stage 2.
    let stage2_rows: Vec<&LoggedRecord> = match spec.stay_arm {
        Some(s) => all.iter().filter(|r| r.a2 != s).copied().collect(),
        None => all.clone(),
    };
    let stage2 = {
        let arms: BTreeSet<usize> = stage2_rows.iter().map(|r| r.a2).collect();
        if stage2_rows.is_empty() {
            report
                .warnings
                .push("no stage-2 rows; component contributes factor 1".into());
            FittedComponent {
                fit: None,
                high_arm: 0,
            }
        } else if arms.len() > 2 {
            report.warnings.push(format!(
                "stage-2 model needs at most 2 treatment arms (got {:?}); component contributes factor 1",
                arms
            ));
            FittedComponent {
                fit: None,
                high_arm: 0,
            }
        } else {
            let high_arm = *arms.iter().max().unwrap();
            let labels: Vec<f64> = stage2_rows
                .iter()
                .map(|r| (r.a2 == high_arm) as u8 as f64)
                .collect();
            let fit =
                fit_binary_component(&stage2_rows, &spec.stage2, &labels, "stage-2 model", &mut report)?;
            report.stage2_converged = fit.as_ref().is_some_and(|f| f.converged);
            FittedComponent { fit, high_arm }
        }
    };

    for r in dataset.records.iter_mut() {
        let p1 = match &stage1.fit {
            None => 1.0,
            Some(fit) => {
                let prob_high = fit.prob(&spec.stage1.features(r));
                if r.a1 == stage1.high_arm {
                    prob_high
                } else {
                    1.0 - prob_high
                }
            }
        };
        let p_stay = match &stay {
            None => 1.0,
            Some((None, _)) => 1.0,
            Some((Some(fit), stay_arm)) => {
                let spec_stay = spec.stay.as_ref().expect("stay spec present");
                let prob_stay = fit.prob(&spec_stay.features(r));
                if r.a2 != *stay_arm {
                    prob_stay
                } else {
                    1.0 - prob_stay
                }
            }
        };
        let in_stage2 = spec.stay_arm != Some(r.a2);
        let p2 = match (&stage2.fit, in_stage2) {
            (Some(fit), true) => {
                let prob_high = fit.prob(&spec.stage2.features(r));
                if r.a2 == stage2.high_arm {
                    prob_high
                } else {
                    1.0 - prob_high
                }
            }
            _ => 1.0,
        };
        r.propensity = Some((p1 * p_stay * p2).clamp(floor, 1.0));
    }

    Ok(report)
}

// ---------------------------------------------------------------------------
// Uniformization and replay
// ---------------------------------------------------------------------------

/// Duplicate each record `floor(1/p)` times and shuffle, producing a
/// stream that mimics uniform randomization.
pub fn bootstrap_uniformize<R: Rng + ?Sized>(
    dataset: &ReplayDataset,
    rng: &mut R,
) -> Result<Vec<LoggedRecord>, ReplayError> {
    let mut stream = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        let p = r.propensity.ok_or(ReplayError::MissingPropensity { row: i + 1 })?;
        if !p.is_finite() || p <= 0.0 {
            return Err(ReplayError::InvalidPropensity {
                row: i + 1,
                value: p,
            });
        }
        let copies = (1.0 / p).floor() as usize;
        for _ in 0..copies {
            stream.push(r.clone());
        }
    }
    stream.shuffle(rng);
    Ok(stream)
}

/// Result of one replay pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplayOutcome {
    /// Mean total reward over matched records (`G / matched`).
    pub average_reward: f64,
    pub matched: usize,
    pub consumed: usize,
    /// The stream ran out before reaching the requested horizon; the
    /// average is over the matched prefix only.
    pub partial: bool,
}

/// Stream records past a policy, accepting only rounds where the policy
/// reproduces both logged actions. A record whose first-stage action
/// mismatches is skipped without revealing its outcomes or second-stage
/// context.
pub fn replay(
    policy: &mut dyn Policy,
    stream: &[LoggedRecord],
    horizon: usize,
) -> Result<ReplayOutcome, ReplayError> {
    if horizon == 0 {
        return Err(ReplayError::InvalidHorizon);
    }
    let mut total = 0.0;
    let mut matched = 0usize;
    let mut consumed = 0usize;
    for r in stream {
        consumed += 1;
        let a1 = policy.choose_stage1(&r.x1);
        if a1 != r.a1 {
            policy.abandon_round();
            continue;
        }
        policy.observe_stage1_outcome(r.y1);
        let a2 = policy.choose_stage2(&r.x2);
        if a2 != r.a2 {
            policy.abandon_round();
            continue;
        }
        policy.finish_round(&RoundRecord {
            x1: r.x1.clone(),
            a1: r.a1,
            y1: r.y1,
            x2: r.x2.clone(),
            a2: r.a2,
            y2: r.y2,
        })?;
        total += r.total_reward();
        matched += 1;
        if matched == horizon {
            break;
        }
    }
    if matched == 0 {
        return Err(ReplayError::EvaluationFailed);
    }
    Ok(ReplayOutcome {
        average_reward: total / matched as f64,
        matched,
        consumed,
        partial: matched < horizon,
    })
}

/// Simulate a uniformly randomized logging policy on an instance. Every
/// record carries the exact propensity `1 / (k1 · k2)`.
pub fn generate_uniform_log<R: Rng + ?Sized>(
    inst: &ProblemInstance,
    rounds: usize,
    rng: &mut R,
) -> ReplayDataset {
    let p = 1.0 / (inst.k1 * inst.k2) as f64;
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let x1 = sample_context(inst, rng);
        let a1 = rng.gen_range(1..=inst.k1);
        let (y1, x2) = step_stage1(inst, &x1, a1, rng).expect("valid arm");
        let a2 = rng.gen_range(1..=inst.k2);
        let y2 = step_stage2(inst, &x2, a2, rng).expect("valid arm");
        records.push(LoggedRecord {
            x1,
            a1,
            y1,
            x2,
            a2,
            y2,
            propensity: Some(p),
        });
    }
    ReplayDataset {
        records,
        d: inst.d,
        k1: inst.k1,
        k2: inst.k2,
    }
}
