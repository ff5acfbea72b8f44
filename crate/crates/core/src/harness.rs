//! Experiment orchestration: many independent simulation paths per policy,
//! cumulative-regret aggregation, parameter sweeps, and replay evaluation,
//! all behind file-based JSON configuration with CSV outputs.
//!
//! Reproducibility contract: path `i` always uses the RNG stream seeded by
//! `base_seed + i` (and a policy stream derived from it by a fixed XOR
//! constant), and aggregation reduces over path index order, so outputs are
//! byte-identical for any worker-thread count.

use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    oracle_action, per_step_regret, sample_context, step_stage1, step_stage2, BoundedDist,
    EnvError, ProblemInstance, RoundRecord, Stage,
};
use crate::policies::{build_policy, KnownArmEffects, KnownArmPolicy, Policy, PolicyConfig};
use crate::replay::{
    bootstrap_uniformize, fit_propensities, load_dataset, replay, PredictorSpec, ReplayError,
    ReplayOutcome, ReplaySchema, DEFAULT_PROPENSITY_FLOOR,
};

/// Seeds for policy-internal randomness are derived from the path seed by
/// this XOR constant so they never collide with the environment stream.
pub const POLICY_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Env(#[from] EnvError),

    #[error(transparent)]
    Replay(#[from] ReplayError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn default_precision() -> f64 {
    1e-6
}

fn default_record_every() -> usize {
    50
}

/// Simulation experiment configuration (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the instance JSON, resolved relative to the config file.
    pub instance: PathBuf,
    pub policies: Vec<PolicyConfig>,
    /// Rounds per path.
    pub horizon: usize,
    /// Independent paths per policy.
    pub paths: usize,
    /// Path `i` is seeded with `base_seed + i`.
    pub base_seed: u64,
    #[serde(default = "default_precision")]
    pub regret_precision: f64,
    pub output_dir: PathBuf,
    /// Thinning stride of the output curves (the final round is always
    /// recorded).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.horizon < 1 {
            return Err(HarnessError::Config("horizon must be at least 1".into()));
        }
        if self.paths < 1 {
            return Err(HarnessError::Config("paths must be at least 1".into()));
        }
        if self.record_every < 1 {
            return Err(HarnessError::Config("record_every must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(HarnessError::Config("policies must not be empty".into()));
        }
        if !self.regret_precision.is_finite() || self.regret_precision <= 0.0 {
            return Err(HarnessError::Config(
                "regret_precision must be positive".into(),
            ));
        }
        for p in &self.policies {
            p.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Parameter-sweep configuration: the policy list is re-run for every
/// `(q, h)` cell with `q` and `h1 = h2 = h` overridden.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub instance: PathBuf,
    pub policies: Vec<PolicyConfig>,
    pub horizon: usize,
    pub paths: usize,
    pub base_seed: u64,
    #[serde(default = "default_precision")]
    pub regret_precision: f64,
    pub output_dir: PathBuf,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    pub q_values: Vec<usize>,
    pub h_values: Vec<f64>,
}

/// Replay-evaluation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub dataset: PathBuf,
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
    pub policy: PolicyConfig,
    /// Target number of matched rounds per replication.
    pub horizon: usize,
    pub bootstrap_reps: usize,
    pub base_seed: u64,
    /// Instance JSON; only needed when evaluating the oracle policy.
    #[serde(default)]
    pub instance: Option<PathBuf>,
    #[serde(default)]
    pub propensity: PropensitySettings,
    /// Designated known-effect second-stage arm (disabled by default).
    #[serde(default)]
    pub known_arm_effects: Option<KnownArmEffects>,
    #[serde(default = "default_precision")]
    pub regret_precision: f64,
    pub output_dir: PathBuf,
}

fn default_floor() -> f64 {
    DEFAULT_PROPENSITY_FLOOR
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensitySettings {
    /// Refit even when the dataset supplies a propensity column.
    #[serde(default)]
    pub refit: bool,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub stay_arm: Option<usize>,
    /// Custom predictor layout; defaults to the three-model recipe on the
    /// dataset's columns.
    #[serde(default)]
    pub predictors: Option<PredictorSpec>,
}

impl Default for PropensitySettings {
    fn default() -> Self {
        Self {
            refit: false,
            floor: default_floor(),
            stay_arm: None,
            predictors: None,
        }
    }
}

/// Execution options supplied by the CLI.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    pub dump_paths: bool,
}

// ---------------------------------------------------------------------------
// Config / instance loading
// ---------------------------------------------------------------------------

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        HarnessError::Config(format!("{}: {} (at `{}`)", path.display(), e, e.path()))
    })
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg: ExperimentConfig = load_json(path)?;
    cfg.instance = resolve_relative(path, &cfg.instance);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_sweep_config(path: &Path) -> Result<SweepConfig, HarnessError> {
    let mut cfg: SweepConfig = load_json(path)?;
    cfg.instance = resolve_relative(path, &cfg.instance);
    if cfg.q_values.is_empty() || cfg.h_values.is_empty() {
        return Err(HarnessError::Config(
            "sweep grid must have at least one q and one h value".into(),
        ));
    }
    Ok(cfg)
}

pub fn load_replay_config(path: &Path) -> Result<ReplayConfig, HarnessError> {
    let mut cfg: ReplayConfig = load_json(path)?;
    cfg.dataset = resolve_relative(path, &cfg.dataset);
    cfg.instance = cfg.instance.map(|p| resolve_relative(path, &p));
    if cfg.bootstrap_reps == 0 {
        return Err(HarnessError::Config(
            "bootstrap_reps must be at least 1".into(),
        ));
    }
    if cfg.horizon == 0 {
        return Err(HarnessError::Config("horizon must be at least 1".into()));
    }
    cfg.policy
        .validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(cfg)
}

fn resolve_relative(config_path: &Path, target: &Path) -> PathBuf {
    if target.is_absolute() {
        target.to_path_buf()
    } else {
        config_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(target)
    }
}

pub fn load_instance(path: &Path) -> Result<ProblemInstance, HarnessError> {
    let inst: ProblemInstance = load_json(path)?;
    inst.validate()?;
    Ok(inst)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// One recorded point of a policy's aggregated regret curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub t: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Aggregated cumulative-regret curve of one policy.
#[derive(Debug, Clone, Serialize)]
pub struct RegretCurve {
    pub policy: String,
    pub rows: Vec<CurveRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyRunSummary {
    pub name: String,
    pub final_t: usize,
    pub final_mean_regret: f64,
    pub final_stderr: f64,
    pub failed_paths: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub curves: Vec<RegretCurve>,
    pub summaries: Vec<PolicyRunSummary>,
    pub failed_paths_total: usize,
}

/// Per-policy dump payload: (policy label, per-path grid values).
type DumpRows = Vec<(String, Vec<(usize, Vec<f64>)>)>;

struct PathOutcome {
    /// Cumulative regret at each grid round.
    grid: Vec<f64>,
}

/// Grid of recorded rounds: every `record_every`-th round plus the final
/// one.
pub fn record_grid(horizon: usize, record_every: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=horizon / record_every)
        .map(|i| i * record_every)
        .collect();
    if ts.last() != Some(&horizon) {
        ts.push(horizon);
    }
    ts
}

fn simulate_path(
    inst: &ProblemInstance,
    policy_cfg: &PolicyConfig,
    horizon: usize,
    precision: f64,
    path_seed: u64,
    grid: &[usize],
) -> Result<PathOutcome, String> {
    let mut env_rng = ChaCha8Rng::seed_from_u64(path_seed);
    let mut policy = build_policy(policy_cfg, inst, precision, path_seed ^ POLICY_SEED_XOR)
        .map_err(|e| e.to_string())?;
    let mut cum = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    let mut next_grid = 0usize;
    for t in 1..=horizon {
        let x1 = sample_context(inst, &mut env_rng);
        let a1 = policy.choose_stage1(&x1);
        let (y1, x2) = step_stage1(inst, &x1, a1, &mut env_rng).map_err(|e| e.to_string())?;
        policy.observe_stage1_outcome(y1);
        let a2 = policy.choose_stage2(&x2);
        let y2 = step_stage2(inst, &x2, a2, &mut env_rng).map_err(|e| e.to_string())?;
        let rec = RoundRecord {
            x1,
            a1,
            y1,
            x2,
            a2,
            y2,
        };
        let r = per_step_regret(inst, &rec, precision).map_err(|e| e.to_string())?;
        cum += r.value;
        policy.finish_round(&rec).map_err(|e| e.to_string())?;
        if next_grid < grid.len() && grid[next_grid] == t {
            out.push(cum);
            next_grid += 1;
        }
    }
    Ok(PathOutcome { grid: out })
}

fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
    }
}

/// Mean and standard error of the mean (sample sd / sqrt(n)).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Run every configured policy over `paths` independent simulation paths,
/// writing per-policy regret curves, optional per-path dumps, and a
/// summary JSON into the output directory.
pub fn run_simulation(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<SimulationReport, HarnessError> {
    cfg.validate()?;
    let inst = load_instance(&cfg.instance)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let grid = record_grid(cfg.horizon, cfg.record_every);

    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    let mut failed_total = 0usize;
    let mut dump_rows: DumpRows = Vec::new();

    for policy_cfg in &cfg.policies {
        let name = policy_cfg.label();
        let outcomes: Vec<Result<PathOutcome, String>> = with_pool(opts.threads, || {
            (0..cfg.paths)
                .into_par_iter()
                .map(|i| {
                    let seed = cfg.base_seed.wrapping_add(i as u64);
                    std::panic::catch_unwind(AssertUnwindSafe(|| {
                        simulate_path(
                            &inst,
                            policy_cfg,
                            cfg.horizon,
                            cfg.regret_precision,
                            seed,
                            &grid,
                        )
                    }))
                    .unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| p.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "panic".into());
                        Err(format!("path panicked: {msg}"))
                    })
                })
                .collect()
        });

        let mut failed = 0usize;
        let mut ok_paths: Vec<(usize, &PathOutcome)> = Vec::new();
        for (i, o) in outcomes.iter().enumerate() {
            match o {
                Ok(p) => ok_paths.push((i, p)),
                Err(msg) => {
                    failed += 1;
                    eprintln!("[{name}] path {i} failed: {msg}");
                }
            }
        }
        failed_total += failed;
        if ok_paths.is_empty() {
            return Err(HarnessError::Config(format!(
                "every path of policy `{name}` failed"
            )));
        }

        let rows: Vec<CurveRow> = grid
            .iter()
            .enumerate()
            .map(|(gi, &t)| {
                let vals: Vec<f64> = ok_paths.iter().map(|(_, p)| p.grid[gi]).collect();
                let (mean, stderr) = mean_stderr(&vals);
                CurveRow { t, mean, stderr }
            })
            .collect();

        if opts.dump_paths {
            dump_rows.push((
                name.clone(),
                ok_paths
                    .iter()
                    .map(|(i, p)| (*i, p.grid.clone()))
                    .collect(),
            ));
        }

        let last = rows.last().expect("non-empty grid");
        summaries.push(PolicyRunSummary {
            name: name.clone(),
            final_t: last.t,
            final_mean_regret: last.mean,
            final_stderr: last.stderr,
            failed_paths: failed,
        });
        curves.push(RegretCurve { policy: name, rows });
    }

    write_outputs(cfg, &inst, &grid, &curves, &summaries, &dump_rows)?;

    Ok(SimulationReport {
        curves,
        summaries,
        failed_paths_total: failed_total,
    })
}

fn write_outputs(
    cfg: &ExperimentConfig,
    inst: &ProblemInstance,
    grid: &[usize],
    curves: &[RegretCurve],
    summaries: &[PolicyRunSummary],
    dumps: &DumpRows,
) -> Result<(), HarnessError> {
    for curve in curves {
        let path = cfg.output_dir.join(format!("{}_regret.csv", curve.policy));
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(f, "t,mean_regret,stderr").map_err(io_err(&path))?;
        for row in &curve.rows {
            writeln!(f, "{},{},{}", row.t, row.mean, row.stderr).map_err(io_err(&path))?;
        }
    }
    for (name, paths) in dumps {
        let path = cfg.output_dir.join(format!("{name}_paths.csv"));
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(f, "path,t,cum_regret").map_err(io_err(&path))?;
        for (i, vals) in paths {
            for (gi, v) in vals.iter().enumerate() {
                writeln!(f, "{},{},{}", i, grid[gi], v).map_err(io_err(&path))?;
            }
        }
    }

    let boundary = if inst.d == 1 {
        stage1_oracle_rule(inst, cfg.regret_precision).ok()
    } else {
        None
    };
    let summary = serde_json::json!({
        "horizon": cfg.horizon,
        "paths": cfg.paths,
        "base_seed": cfg.base_seed,
        "record_every": cfg.record_every,
        "policies": summaries,
        "stage1_oracle_rule": boundary,
    });
    let path = cfg.output_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap() + "\n")
        .map_err(io_err(&path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracle decision-rule report
// ---------------------------------------------------------------------------

/// A maximal context interval on which one first-stage arm is oracle-optimal.
#[derive(Debug, Clone, Serialize)]
pub struct OracleRuleSegment {
    pub from: f64,
    pub to: f64,
    pub arm: usize,
}

/// Computed stage-1 decision rule of a one-dimensional instance: scans the
/// context support and refines each boundary by bisection. The rule is
/// derived from the numerical Q-functions, not from any closed-form
/// shortcut.
pub fn stage1_oracle_rule(
    inst: &ProblemInstance,
    precision: f64,
) -> Result<Vec<OracleRuleSegment>, EnvError> {
    assert_eq!(inst.d, 1, "rule report is for d = 1 instances");
    let (lo, hi) = match &inst.x_dist {
        BoundedDist::UniformBox { halfwidth } => (-halfwidth, *halfwidth),
        BoundedDist::Finite { atoms } => {
            let lo = atoms.iter().map(|a| a.point[0]).fold(f64::INFINITY, f64::min);
            let hi = atoms
                .iter()
                .map(|a| a.point[0])
                .fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    if hi <= lo {
        let arm = oracle_action(inst, Stage::One, &[lo], precision)?.arm;
        return Ok(vec![OracleRuleSegment {
            from: lo,
            to: hi,
            arm,
        }]);
    }
    let arm_at = |x: f64| -> Result<usize, EnvError> {
        Ok(oracle_action(inst, Stage::One, &[x], precision)?.arm)
    };
    let n = 1024usize;
    let mut segments: Vec<OracleRuleSegment> = Vec::new();
    let mut seg_start = lo;
    let mut seg_arm = arm_at(lo)?;
    let mut prev_x = lo;
    for i in 1..=n {
        let x = lo + (hi - lo) * i as f64 / n as f64;
        let arm = arm_at(x)?;
        if arm != seg_arm {
            // Bisect for the boundary between prev_x and x.
            let (mut a, mut b) = (prev_x, x);
            for _ in 0..50 {
                let m = 0.5 * (a + b);
                if arm_at(m)? == seg_arm {
                    a = m;
                } else {
                    b = m;
                }
            }
            let boundary = 0.5 * (a + b);
            segments.push(OracleRuleSegment {
                from: seg_start,
                to: boundary,
                arm: seg_arm,
            });
            seg_start = boundary;
            seg_arm = arm;
        }
        prev_x = x;
    }
    segments.push(OracleRuleSegment {
        from: seg_start,
        to: hi,
        arm: seg_arm,
    });
    Ok(segments)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepCellReport {
    pub q: usize,
    pub h: f64,
    pub dir: String,
    pub policies: Vec<PolicyRunSummary>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<SweepCellReport>,
    pub failed_paths_total: usize,
}

/// Run the policy list once per `(q, h)` grid cell with `h1 = h2 = h`,
/// writing each cell into its own subdirectory plus an index file.
pub fn sweep(cfg: &SweepConfig, opts: &RunOptions) -> Result<SweepReport, HarnessError> {
    if cfg.q_values.is_empty() || cfg.h_values.is_empty() {
        return Err(HarnessError::Config(
            "sweep grid must have at least one q and one h value".into(),
        ));
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let mut cells = Vec::new();
    let mut failed_total = 0usize;
    for &q in &cfg.q_values {
        for &h in &cfg.h_values {
            let dir_name = format!("q{q}_h{h}");
            let policies: Vec<PolicyConfig> = cfg
                .policies
                .iter()
                .map(|p| {
                    let mut p = p.clone();
                    p.q = q;
                    p.h1 = h;
                    p.h2 = h;
                    p
                })
                .collect();
            let cell_cfg = ExperimentConfig {
                instance: cfg.instance.clone(),
                policies,
                horizon: cfg.horizon,
                paths: cfg.paths,
                base_seed: cfg.base_seed,
                regret_precision: cfg.regret_precision,
                output_dir: cfg.output_dir.join(&dir_name),
                record_every: cfg.record_every,
            };
            let report = run_simulation(&cell_cfg, opts)?;
            failed_total += report.failed_paths_total;
            cells.push(SweepCellReport {
                q,
                h,
                dir: dir_name,
                policies: report.summaries,
            });
        }
    }
    let index_path = cfg.output_dir.join("index.json");
    std::fs::write(
        &index_path,
        serde_json::to_string_pretty(&cells).unwrap() + "\n",
    )
    .map_err(io_err(&index_path))?;
    Ok(SweepReport {
        cells,
        failed_paths_total: failed_total,
    })
}

// ---------------------------------------------------------------------------
// Replay evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ReplayRepReport {
    pub rep: usize,
    pub outcome: Option<ReplayOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub policy: String,
    pub horizon: usize,
    pub reps: Vec<ReplayRepReport>,
    pub mean_reward: f64,
    pub stderr_reward: f64,
    pub mean_matched: f64,
    pub mean_consumed: f64,
    pub failed_reps: usize,
    pub fit_warnings: Vec<String>,
}

/// Evaluate a policy on logged data: fit propensities when the dataset
/// does not supply them, then run independent uniformize-and-replay
/// replications and aggregate.
pub fn run_replay(cfg: &ReplayConfig, opts: &RunOptions) -> Result<ReplayReport, HarnessError> {
    let schema = ReplaySchema {
        d: cfg.d,
        k1: cfg.k1,
        k2: cfg.k2,
    };
    let (mut dataset, mut warnings) = load_dataset(&cfg.dataset, &schema)?;
    if dataset.is_empty() {
        return Err(HarnessError::Config("dataset has no rows".into()));
    }

    if !dataset.has_propensities() || cfg.propensity.refit {
        let spec = cfg
            .propensity
            .predictors
            .clone()
            .unwrap_or_else(|| PredictorSpec::default_for_dim(cfg.d, cfg.propensity.stay_arm));
        let report = fit_propensities(&mut dataset, &spec, cfg.propensity.floor)?;
        warnings.extend(report.warnings);
    }

    if let Some(effects) = &cfg.known_arm_effects {
        if effects.arm == 0 || effects.arm > cfg.k2 {
            return Err(HarnessError::Config(format!(
                "known_arm_effects.arm {} out of range 1..={}",
                effects.arm, cfg.k2
            )));
        }
        if cfg.k2 < 3 {
            return Err(HarnessError::Config(
                "known_arm_effects needs at least two remaining second-stage arms".into(),
            ));
        }
        if matches!(cfg.policy.variant, crate::policies::PolicyVariant::Oracle) {
            return Err(HarnessError::Config(
                "oracle policy cannot be combined with known_arm_effects".into(),
            ));
        }
    }

    let oracle_inst = match cfg.instance.as_ref() {
        Some(p) => Some(load_instance(p)?),
        None => None,
    };
    // The inner learner of a known-arm run sees one fewer second-stage arm.
    let inner_k2 = match &cfg.known_arm_effects {
        Some(_) => cfg.k2 - 1,
        None => cfg.k2,
    };
    let shape_inst = match (&cfg.known_arm_effects, oracle_inst) {
        (None, Some(inst)) => inst,
        _ => fake_shape_instance(cfg, inner_k2),
    };

    let reps: Vec<ReplayRepReport> = with_pool(opts.threads, || {
        (0..cfg.bootstrap_reps)
            .into_par_iter()
            .map(|rep| {
                let seed = cfg.base_seed.wrapping_add(rep as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut run = || -> Result<ReplayOutcome, String> {
                    let stream =
                        bootstrap_uniformize(&dataset, &mut rng).map_err(|e| e.to_string())?;
                    let inner = build_policy(
                        &cfg.policy,
                        &shape_inst,
                        cfg.regret_precision,
                        seed ^ POLICY_SEED_XOR,
                    )
                    .map_err(|e| e.to_string())?;
                    let mut policy: Box<dyn Policy> = match &cfg.known_arm_effects {
                        None => inner,
                        Some(effects) => {
                            Box::new(KnownArmPolicy::new(inner, effects.clone()))
                        }
                    };
                    replay(policy.as_mut(), &stream, cfg.horizon).map_err(|e| e.to_string())
                };
                match run() {
                    Ok(outcome) => ReplayRepReport {
                        rep,
                        outcome: Some(outcome),
                        error: None,
                    },
                    Err(e) => ReplayRepReport {
                        rep,
                        outcome: None,
                        error: Some(e),
                    },
                }
            })
            .collect()
    });

    let ok: Vec<&ReplayOutcome> = reps.iter().filter_map(|r| r.outcome.as_ref()).collect();
    if ok.is_empty() {
        return Err(HarnessError::Replay(ReplayError::EvaluationFailed));
    }
    let rewards: Vec<f64> = ok.iter().map(|o| o.average_reward).collect();
    let (mean_reward, stderr_reward) = mean_stderr(&rewards);
    let mean_matched = ok.iter().map(|o| o.matched as f64).sum::<f64>() / ok.len() as f64;
    let mean_consumed = ok.iter().map(|o| o.consumed as f64).sum::<f64>() / ok.len() as f64;

    let report = ReplayReport {
        policy: cfg.policy.label(),
        horizon: cfg.horizon,
        failed_reps: reps.iter().filter(|r| r.error.is_some()).count(),
        reps,
        mean_reward,
        stderr_reward,
        mean_matched,
        mean_consumed,
        fit_warnings: warnings,
    };

    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let path = cfg.output_dir.join("replay_report.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).unwrap() + "\n",
    )
    .map_err(io_err(&path))?;
    Ok(report)
}

/// Policies built for replay only need the problem shape; the dynamics of
/// this placeholder are never sampled.
fn fake_shape_instance(cfg: &ReplayConfig, k2: usize) -> ProblemInstance {
    ProblemInstance {
        d: cfg.d,
        k1: cfg.k1,
        k2,
        beta1: vec![vec![0.0; cfg.d]; cfg.k1],
        beta2: vec![vec![0.0; cfg.d]; k2],
        bmat: vec![vec![0.0; cfg.d * cfg.d]; cfg.k1],
        eta_sigma: 0.0,
        eps: vec![BoundedDist::point_mass(vec![0.0; cfg.d]); cfg.k1],
        x_dist: BoundedDist::point_mass(vec![0.0; cfg.d]),
    }
}
