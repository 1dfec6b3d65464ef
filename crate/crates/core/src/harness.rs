//! Batch experiments driven by a flat JSON configuration. Each run becomes
//! one JSON line; each (method, dimension) pair becomes one summary row.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{derive_seed, estimate, repeat_with, smc_with_sample, EstimateReport, Method, RunConfig, Summary};
use crate::expectations::{gibbs_truncated_sampler, original_mean, ChainConfig, OriginalScale};
use crate::moves::{MoveConfig, MoveKind, RepeatPolicy};
use crate::problem::{gen_ar1_problem, gen_cauchy_problem, gen_probit_panel, gen_thurstonian, random_item_means, Ar1Spec, OrthantProblem, ProbitPanelSpec};
use crate::student::{estimate_student, StudentOptions, StudentOrthantProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Ar1Toy,
    Thurstone,
    Ordering,
    CompareMoves,
    Highdim,
    Student,
    Probit,
    Expectation,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ar1Toy => "ar1-toy",
            ExperimentKind::Thurstone => "thurstone",
            ExperimentKind::Ordering => "ordering",
            ExperimentKind::CompareMoves => "compare-moves",
            ExperimentKind::Highdim => "highdim",
            ExperimentKind::Student => "student",
            ExperimentKind::Probit => "probit",
            ExperimentKind::Expectation => "expectation",
        }
    }

    fn default_dimensions(self) -> Vec<usize> {
        match self {
            ExperimentKind::Ar1Toy => vec![100, 125, 150, 175, 200],
            ExperimentKind::Thurstone => vec![10],
            ExperimentKind::Ordering => vec![50, 60],
            ExperimentKind::CompareMoves => vec![20, 30, 40, 50],
            ExperimentKind::Highdim => vec![130, 180],
            ExperimentKind::Student => vec![30, 50],
            ExperimentKind::Probit => vec![10, 15],
            ExperimentKind::Expectation => vec![10],
        }
    }

    fn default_methods(self) -> Vec<MethodSpec> {
        let parse = |list: &[&str]| list.iter().map(|s| s.parse().expect("built-in method")).collect();
        match self {
            ExperimentKind::Ar1Toy | ExperimentKind::Thurstone => parse(&["ghk", "pf"]),
            ExperimentKind::Ordering => parse(&["ghk"]),
            ExperimentKind::CompareMoves => parse(&["ghk", "smc:gibbs", "smc:overrelax", "smc:block:5"]),
            ExperimentKind::Highdim => parse(&["smc:gibbs", "smc:overrelax", "smc:block:5", "ghk"]),
            ExperimentKind::Student | ExperimentKind::Probit => parse(&["ghk", "smc:gibbs"]),
            ExperimentKind::Expectation => parse(&["smc:gibbs"]),
        }
    }
}

/// An estimator plus its move kernel, written `ghk`, `pf`, `smc` or
/// `smc:<kernel>` (for example `smc:block:5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub kernel: Option<MoveKind>,
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kernel {
            Some(k) => write!(f, "{}:{}", self.method, k),
            None => write!(f, "{}", self.method),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, tail) = match s.split_once(':') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        let method: Method = head.parse()?;
        let kernel = match (method, tail) {
            (Method::Smc, None) => Some(MoveKind::Gibbs),
            (Method::Smc, Some(k)) => Some(k.parse()?),
            (_, None) => None,
            (_, Some(_)) => {
                return Err(Error::InvalidParameter(format!("method {head} takes no move kernel (got {s:?})")));
            }
        };
        Ok(Self { method, kernel })
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

macro_rules! default_fn {
    ($name:ident, $ty:ty, $value:expr) => {
        fn $name() -> $ty {
            $value
        }
    };
}

default_fn!(default_replications, usize, 1);
default_fn!(default_particles, usize, 1000);
default_fn!(default_threshold, f64, 0.5);
default_fn!(default_true, bool, true);
default_fn!(default_tol, f64, 0.01);
default_fn!(default_rounds, usize, 50);
default_fn!(default_rho, f64, 0.7);
default_fn!(default_upper, f64, 15.0);
default_fn!(default_nu, f64, 3.0);
default_fn!(default_one, f64, 1.0);
default_fn!(default_observations, usize, 1);
default_fn!(default_alternatives, usize, 10);
default_fn!(default_multiplier, f64, 100.0);
default_fn!(default_thin, usize, 1);
default_fn!(default_min_pilot, f64, 0.2);

/// Flat experiment description. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Problem sizes; their meaning depends on the experiment (horizon,
    /// number of ranked items, dimension, number of panel periods).
    #[serde(default)]
    pub dimensions: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    /// Particle count for every method not listed in `particles_per_method`.
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub particles_per_method: BTreeMap<String, usize>,
    #[serde(default = "default_threshold")]
    pub ess_threshold: f64,
    /// Hardest-first reordering; on by default except for `ar1-toy`.
    #[serde(default)]
    pub ordering: Option<bool>,
    /// Rescale particle counts so every method takes the wall time of the
    /// first one.
    #[serde(default)]
    pub equal_compute: bool,
    /// Minimum accumulated pilot time per method during calibration.
    #[serde(default = "default_min_pilot")]
    pub pilot_seconds: f64,
    #[serde(default)]
    pub seed: u64,
    /// Directory receiving `runs.jsonl` and `summary.csv`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub record_timing: bool,
    #[serde(default = "default_tol")]
    pub stability_tol: f64,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_one")]
    pub sigma: f64,
    /// Item means for `thurstone`; drawn from the seed when absent.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default = "default_observations")]
    pub observations: usize,
    #[serde(default = "default_alternatives")]
    pub alternatives: usize,
    /// Benchmark chain budget as a multiple of the SMC wall time.
    #[serde(default = "default_multiplier")]
    pub gibbs_multiplier: f64,
    /// Fixed chain length; overrides `gibbs_multiplier`.
    #[serde(default)]
    pub chain_iterations: Option<usize>,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "experiment": experiment })).expect("defaults are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter("field `replications` must be >= 1".into()));
        }
        if self.particles < 2 || self.particles_per_method.values().any(|&m| m < 2) {
            return Err(Error::InvalidParameter("particle counts must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::InvalidParameter("field `ess_threshold` must be in [0, 1]".into()));
        }
        if self.dimensions.contains(&0) {
            return Err(Error::InvalidParameter("field `dimensions` entries must be >= 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("field `thin` must be >= 1".into()));
        }
        for key in self.particles_per_method.keys() {
            let spec: MethodSpec = key.parse()?;
            if !self.methods().contains(&spec) {
                return Err(Error::InvalidParameter(format!("`particles_per_method` names unused method {key:?}")));
            }
        }
        Ok(())
    }

    pub fn dimensions(&self) -> Vec<usize> {
        if self.dimensions.is_empty() {
            self.experiment.default_dimensions()
        } else {
            self.dimensions.clone()
        }
    }

    pub fn methods(&self) -> Vec<MethodSpec> {
        if self.methods.is_empty() {
            self.experiment.default_methods()
        } else {
            self.methods.clone()
        }
    }

    pub fn ordering(&self) -> bool {
        self.ordering.unwrap_or(self.experiment != ExperimentKind::Ar1Toy)
    }

    fn particles_for(&self, spec: &MethodSpec) -> usize {
        self.particles_per_method
            .get(&spec.to_string())
            .copied()
            .unwrap_or(self.particles)
    }

    fn run_config(&self, spec: &MethodSpec, particles: usize, seed: u64, ordering: bool) -> RunConfig {
        let moves = spec.kernel.map(|k| {
            MoveConfig::new(k).with_repeat(RepeatPolicy::Adaptive {
                tol: self.stability_tol,
                max_rounds: self.max_rounds,
            })
        });
        RunConfig {
            particles,
            ess_threshold: self.ess_threshold,
            moves,
            ordering,
            seed,
            record_timing: self.record_timing,
        }
    }
}

/// One JSON line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub label: String,
    pub dimension: usize,
    pub replication: usize,
    #[serde(flatten)]
    pub report: EstimateReport,
    /// Weighted mean of the original variable (`expectation` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectation: Option<Vec<f64>>,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub dimension: usize,
    pub particles: usize,
    pub replications: usize,
    pub failures: usize,
    pub mean_log_prob: f64,
    pub variance: f64,
    pub skewness: f64,
    pub wall_seconds: f64,
}

impl SummaryRow {
    pub const HEADER: &'static str = "method,dimension,particles,replications,failures,mean_log_prob,variance,skewness,wall_seconds";

    fn from_reports(method: &str, dimension: usize, particles: usize, reports: &[EstimateReport]) -> Self {
        let s = Summary::from_reports(reports);
        SummaryRow {
            method: method.to_string(),
            dimension,
            particles,
            replications: s.replications,
            failures: s.failures,
            mean_log_prob: s.mean,
            variance: s.variance,
            skewness: s.skewness,
            wall_seconds: reports.iter().map(|r| r.wall_seconds).sum(),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.dimension,
            self.particles,
            self.replications,
            self.failures,
            self.mean_log_prob,
            self.variance,
            self.skewness,
            self.wall_seconds
        )
    }
}

/// Particle counts chosen by the equal-compute calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub dimension: usize,
    pub method: String,
    pub pilot_particles: usize,
    pub pilot_seconds: f64,
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub calibration: Vec<Calibration>,
}

impl ExperimentOutcome {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut runs = fs::File::create(dir.join("runs.jsonl"))?;
        for r in &self.records {
            writeln!(runs, "{}", serde_json::to_string(r)?)?;
        }
        let mut csv = fs::File::create(dir.join("summary.csv"))?;
        writeln!(csv, "{}", SummaryRow::HEADER)?;
        for row in &self.summary {
            writeln!(csv, "{}", row.csv_line())?;
        }
        if !self.calibration.is_empty() {
            let mut cal = fs::File::create(dir.join("calibration.jsonl"))?;
            for c in &self.calibration {
                writeln!(cal, "{}", serde_json::to_string(c)?)?;
            }
        }
        Ok(())
    }
}

/// Average wall time of `run`, repeated until at least `min_seconds` have
/// accumulated.
pub fn pilot_seconds<F>(min_seconds: f64, mut run: F) -> Result<f64>
where
    F: FnMut(u64) -> Result<()>,
{
    let start = Instant::now();
    let mut count = 0u64;
    loop {
        run(count)?;
        count += 1;
        let spent = start.elapsed().as_secs_f64();
        if spent >= min_seconds || count >= 1000 {
            return Ok(spent / count as f64);
        }
    }
}

/// Scales `base[i]` by `time[0] / time[i]` so every method matches the
/// first one's wall time.
pub fn equal_compute_particles(base: &[usize], seconds: &[f64]) -> Vec<usize> {
    let reference = seconds[0];
    base.iter()
        .zip(seconds)
        .enumerate()
        .map(|(i, (&m, &t))| {
            if i == 0 || t <= 0.0 {
                m
            } else {
                ((m as f64 * reference / t).round() as usize).max(2)
            }
        })
        .collect()
}

enum Target {
    Gaussian(Vec<OrthantProblem>),
    Student(StudentOrthantProblem),
}

impl Target {
    fn run(&self, spec: &MethodSpec, cfg: &RunConfig) -> Result<EstimateReport> {
        match self {
            Target::Gaussian(parts) => {
                let mut total: Option<EstimateReport> = None;
                for (k, p) in parts.iter().enumerate() {
                    let sub = cfg.clone().with_seed(derive_seed(cfg.seed, k as u64));
                    let sub = if parts.len() == 1 { cfg.clone() } else { sub };
                    let r = estimate(p, spec.method, &sub)?;
                    total = Some(match total {
                        None => r,
                        Some(mut acc) => {
                            acc.log_prob += r.log_prob;
                            acc.failed |= r.failed;
                            acc.wall_seconds += r.wall_seconds;
                            acc.d += r.d;
                            acc
                        }
                    });
                }
                let mut r = total.expect("at least one observation");
                r.seed = cfg.seed;
                if r.failed {
                    r.log_prob = f64::NEG_INFINITY;
                }
                r.method = spec.to_string();
                Ok(r)
            }
            Target::Student(sp) => {
                let mut r = estimate_student(sp, spec.method, cfg, StudentOptions::default())?;
                r.method = spec.to_string();
                Ok(r)
            }
        }
    }
}

fn build_target(cfg: &ExperimentConfig, dim: usize) -> Result<Target> {
    let seed = cfg.seed;
    Ok(match cfg.experiment {
        ExperimentKind::Ar1Toy => {
            let mut spec = Ar1Spec::new(dim, cfg.rho, cfg.lower, cfg.upper);
            spec.sigma = cfg.sigma;
            Target::Gaussian(vec![gen_ar1_problem(&spec)?])
        }
        ExperimentKind::Thurstone => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let beta = match &cfg.beta {
                Some(b) if b.len() == dim => b.clone(),
                Some(b) => return Err(Error::DimensionMismatch { expected: dim, found: b.len() }),
                None => random_item_means(dim, seed),
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
            // Each observation ranks the items in a random order.
            let mut parts = Vec::with_capacity(cfg.observations);
            for k in 0..cfg.observations.max(1) {
                let mut order: Vec<usize> = (0..dim).collect();
                if k > 0 {
                    order.shuffle(&mut rng);
                }
                let ranked: Vec<f64> = order.iter().map(|&i| beta[i]).collect();
                parts.push(gen_thurstonian(&ranked, cfg.sigma)?);
            }
            Target::Gaussian(parts)
        }
        ExperimentKind::Ordering | ExperimentKind::CompareMoves | ExperimentKind::Highdim | ExperimentKind::Expectation => {
            Target::Gaussian(vec![gen_cauchy_problem(dim, seed)?])
        }
        ExperimentKind::Student => Target::Student(StudentOrthantProblem::new(gen_cauchy_problem(dim, seed)?, cfg.nu)?),
        ExperimentKind::Probit => {
            let spec = ProbitPanelSpec::new(cfg.alternatives, dim);
            Target::Gaussian(vec![gen_probit_panel(&spec, seed)?])
        }
    })
}

/// Runs the configured experiment and writes its files when `output` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut outcome = ExperimentOutcome::default();
    let dims = cfg.dimensions();
    let methods = cfg.methods();
    let variants: Vec<(MethodSpec, bool, String)> = if cfg.experiment == ExperimentKind::Ordering {
        methods
            .iter()
            .flat_map(|m| [(*m, false, m.to_string()), (*m, true, format!("{m}+ordering"))])
            .collect()
    } else {
        methods.iter().map(|m| (*m, cfg.ordering(), m.to_string())).collect()
    };

    for (di, &dim) in dims.iter().enumerate() {
        let target = build_target(cfg, dim)?;
        let base: Vec<usize> = variants.iter().map(|(m, _, _)| cfg.particles_for(m)).collect();
        let particles = if cfg.equal_compute {
            let mut seconds = Vec::with_capacity(variants.len());
            for (vi, (spec, ordering, _)) in variants.iter().enumerate() {
                let t = pilot_seconds(cfg.pilot_seconds, |k| {
                    let pilot_seed = derive_seed(cfg.seed ^ 0x5eed, (di * 1000 + vi) as u64 * 1000 + k);
                    target.run(spec, &cfg.run_config(spec, base[vi], pilot_seed, *ordering)).map(|_| ())
                })?;
                seconds.push(t);
            }
            let scaled = equal_compute_particles(&base, &seconds);
            for (vi, (_, _, label)) in variants.iter().enumerate() {
                outcome.calibration.push(Calibration {
                    dimension: dim,
                    method: label.clone(),
                    pilot_particles: base[vi],
                    pilot_seconds: seconds[vi],
                    particles: scaled[vi],
                });
            }
            scaled
        } else {
            base
        };

        for (vi, (spec, ordering, label)) in variants.iter().enumerate() {
            let master = derive_seed(cfg.seed, (di * 1000 + vi) as u64);
            let run_cfg = cfg.run_config(spec, particles[vi], master, *ordering);
            let mut expectations = Vec::new();
            let (reports, _) = repeat_with(cfg.replications, &run_cfg, |c| {
                if cfg.experiment == ExperimentKind::Expectation && spec.method != Method::Ghk {
                    let Target::Gaussian(parts) = &target else { unreachable!() };
                    let out = smc_with_sample(&parts[0], c)?;
                    expectations.push(if out.report.failed { None } else { Some(original_mean(&out)?) });
                    let mut r = out.report;
                    r.method = spec.to_string();
                    Ok(r)
                } else {
                    target.run(spec, c)
                }
            })?;
            for (rep, report) in reports.iter().enumerate() {
                outcome.records.push(RunRecord {
                    experiment: cfg.experiment.name().to_string(),
                    label: label.clone(),
                    dimension: dim,
                    replication: rep,
                    report: report.clone(),
                    expectation: expectations.get(rep).cloned().flatten(),
                });
            }
            outcome
                .summary
                .push(SummaryRow::from_reports(label, dim, particles[vi], &reports));

            if cfg.experiment == ExperimentKind::Expectation {
                let budget: f64 = reports.iter().map(|r| r.wall_seconds).sum::<f64>() / reports.len() as f64;
                let Target::Gaussian(parts) = &target else { unreachable!() };
                let chain = benchmark_chain(cfg, &parts[0], budget, master)?;
                outcome.records.push(chain);
            }
        }
    }
    if let Some(dir) = &cfg.output {
        outcome.write(dir)?;
    }
    Ok(outcome)
}

/// Gibbs benchmark for the `expectation` experiment, reported as a record
/// whose `expectation` is the chain mean of the original variable.
fn benchmark_chain(cfg: &ExperimentConfig, problem: &OrthantProblem, smc_seconds: f64, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let pilot_len = 200;
    let iterations = match cfg.chain_iterations {
        Some(n) => n,
        None => {
            let t0 = Instant::now();
            gibbs_truncated_sampler(problem, None, &ChainConfig {
                iterations: pilot_len,
                seed,
                ..ChainConfig::default()
            })?;
            let per_iter = t0.elapsed().as_secs_f64() / pilot_len as f64;
            ((cfg.gibbs_multiplier * smc_seconds / per_iter.max(1e-9)) as usize).max(cfg.thin)
        }
    };
    let chain = gibbs_truncated_sampler(problem, None, &ChainConfig {
        iterations,
        thin: cfg.thin,
        seed,
        ..ChainConfig::default()
    })?;
    let std = problem.standardize();
    let order = crate::linalg::Permutation::identity(problem.dim());
    let scale = OriginalScale::new(&std, &order, problem.mean(), None)?;
    let n = chain.draws.len() as f64;
    let mut mean = vec![0.0; problem.dim()];
    for draw in &chain.draws {
        for (m, y) in mean.iter_mut().zip(scale.map(draw, None)) {
            *m += y / n;
        }
    }
    Ok(RunRecord {
        experiment: cfg.experiment.name().to_string(),
        label: "gibbs-benchmark".into(),
        dimension: problem.dim(),
        replication: 0,
        report: EstimateReport {
            method: "gibbs".into(),
            d: problem.dim(),
            log_prob: f64::NEG_INFINITY,
            failed: false,
            ess_trace: Vec::new(),
            resample_events: Vec::new(),
            move_stats: Vec::new(),
            particles: chain.draws.len(),
            seed,
            wall_seconds: if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 },
        },
        expectation: Some(mean),
    })
}
