//! Sequential estimators of orthant probabilities: GHK (importance
//! sampling only), the particle filter (adds resampling) and the SMC
//! sampler (adds a move step after each resampling event).
//!
//! Every particle slot `m` owns its own ChaCha8 stream `(seed, m)`, and
//! resampling draws from a dedicated stream, so a run is reproducible from
//! `(seed, M)` whatever the number of worker threads.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectations::WeightedSample;
use crate::gaussian::{chunked_log_sum, log_interval_mass, sample_truncated_std_normal, LogSum, REDUCE_CHUNK};
use crate::linalg::Permutation;
use crate::moves::{apply_kernel, move_until_stable, ConstraintSystem, MoveConfig};
use crate::problem::OrthantProblem;

/// Stream index reserved for the resampling uniforms.
const RESAMPLE_STREAM: u64 = u64::MAX;

pub const DEFAULT_PARTICLES: usize = 1000;
pub const DEFAULT_ESS_FRACTION: f64 = 0.5;

pub(crate) fn particle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `(Σw)² / Σw²` from log-weights, in `[1, M]`.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::EmptyInput);
    }
    let s1 = chunked_log_sum(log_weights);
    if s1.ln() == f64::NEG_INFINITY {
        return Err(Error::ParticleSystemDied);
    }
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    Ok(ess_from_sums(s1, chunked_log_sum(&doubled), log_weights.len()))
}

fn ess_from_sums(s1: LogSum, s2: LogSum, n: usize) -> f64 {
    // The largest doubled weight is exactly twice the largest weight, so
    // equal weights give exactly `n`.
    let ratio = s1.scaled * s1.scaled / s2.scaled * (2.0 * s1.max - s2.max).exp();
    ratio.clamp(1.0, n as f64)
}

/// Systematic resampling with a freshly drawn offset `U ∈ (0, 1]`.
pub fn systematic_resample<R: Rng + ?Sized>(log_weights: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let u = 1.0 - rng.random::<f64>();
    systematic_resample_with_offset(log_weights, n, u)
}

/// Systematic resampling at positions `U, U+1, …, U+n−1` on the cumulated
/// weights scaled to total `n`. Returns 0-based ancestor indices.
pub fn systematic_resample_with_offset(log_weights: &[f64], n: usize, offset: f64) -> Result<Vec<usize>> {
    if log_weights.is_empty() || n == 0 {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&offset) {
        return Err(Error::InvalidParameter(format!("offset must be in [0, 1], got {offset}")));
    }
    let total = chunked_log_sum(log_weights).ln();
    if total == f64::NEG_INFINITY {
        return Err(Error::ParticleSystemDied);
    }
    let scaled: Vec<f64> = log_weights.iter().map(|w| n as f64 * (w - total).exp()).collect();
    let last = scaled.iter().rposition(|&v| v > 0.0).ok_or(Error::ParticleSystemDied)?;
    let mut out = Vec::with_capacity(n);
    let (mut j, mut c, mut u) = (0, scaled[0], offset);
    for _ in 0..n {
        while (c < u || scaled[j] == 0.0) && j < last {
            j += 1;
            c += scaled[j];
        }
        out.push(j);
        u += 1.0;
    }
    Ok(out)
}

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ghk,
    /// Resampling without a move step.
    Pf,
    /// Resampling followed by the configured move kernel.
    Smc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ghk => "ghk",
            Method::Pf => "pf",
            Method::Smc => "smc",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ghk" => Ok(Method::Ghk),
            "pf" => Ok(Method::Pf),
            "smc" => Ok(Method::Smc),
            _ => Err(Error::InvalidParameter(format!("unknown method {s:?} (expected ghk, pf or smc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub particles: usize,
    /// Resample when ESS < `ess_threshold · M`; 0 disables resampling.
    pub ess_threshold: f64,
    /// `None` gives the particle filter.
    pub moves: Option<MoveConfig>,
    /// Reorder coordinates hardest-first before running.
    pub ordering: bool,
    pub seed: u64,
    /// Store measured wall time in reports (otherwise 0, which makes
    /// reports byte-for-byte reproducible).
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            particles: DEFAULT_PARTICLES,
            ess_threshold: DEFAULT_ESS_FRACTION,
            moves: Some(MoveConfig::default()),
            ordering: false,
            seed: 0,
            record_timing: true,
        }
    }
}

impl RunConfig {
    pub fn new(particles: usize, seed: u64) -> Self {
        Self {
            particles,
            seed,
            ..Self::default()
        }
    }

    pub fn with_moves(mut self, moves: Option<MoveConfig>) -> Self {
        self.moves = moves;
        self
    }

    pub fn with_threshold(mut self, ess_threshold: f64) -> Self {
        self.ess_threshold = ess_threshold;
        self
    }

    pub fn with_ordering(mut self, ordering: bool) -> Self {
        self.ordering = ordering;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_timing(mut self, record_timing: bool) -> Self {
        self.record_timing = record_timing;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::InvalidParameter("at least 2 particles are required".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::InvalidParameter(format!(
                "ESS threshold fraction must be in [0, 1], got {}",
                self.ess_threshold
            )));
        }
        Ok(())
    }
}

/// Move-step diagnostics for one resampling event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveStat {
    pub t: usize,
    pub kind: String,
    pub rounds: usize,
    pub acceptance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_acceptance: Option<f64>,
    #[serde(default)]
    pub bounces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: String,
    pub d: usize,
    #[serde(with = "crate::problem::ext_real")]
    pub log_prob: f64,
    pub failed: bool,
    /// `(t, ESS)` after weighting coordinate `t` (1-based), before any resampling.
    pub ess_trace: Vec<(usize, f64)>,
    pub resample_events: Vec<usize>,
    #[serde(default)]
    pub move_stats: Vec<MoveStat>,
    #[serde(rename = "M")]
    pub particles: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl EstimateReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn probability(&self) -> f64 {
        self.log_prob.exp()
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.ess_trace.iter().map(|&(_, e)| e).reduce(f64::min)
    }

    pub fn terminal_ess(&self) -> Option<f64> {
        self.ess_trace.last().map(|&(_, e)| e)
    }
}

/// Standardizes and optionally applies the hardest-first ordering.
pub fn prepare(problem: &OrthantProblem, ordering: bool) -> Result<(OrthantProblem, Permutation)> {
    if ordering {
        problem.ordered()
    } else {
        Ok((problem.standardize(), Permutation::identity(problem.dim())))
    }
}

/// Scale-mixture parameters carried by the Student extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Mixing {
    pub nu: f64,
    pub step: f64,
    pub refresh_each_step: bool,
}

impl Mixing {
    fn scale(&self, u: f64) -> f64 {
        if u == self.nu {
            1.0
        } else {
            (u / self.nu).sqrt()
        }
    }
}

struct Slot {
    path: Vec<f64>,
    log_weight: f64,
    mix: f64,
    rng: ChaCha8Rng,
}

/// Everything the engine produces: the report, the terminal weighted
/// sample and the prepared problem the sample lives on.
#[derive(Debug, Clone)]
pub struct EngineOutput {
    pub report: EstimateReport,
    pub sample: WeightedSample,
    /// Zero-mean, possibly reordered problem the paths refer to.
    pub problem: OrthantProblem,
    /// Position `j` of `problem` is coordinate `order[j]` of the input.
    pub order: Permutation,
    /// Mean of the input problem, in input coordinates.
    pub offset: Vec<f64>,
}

fn elapsed(start: Instant, record: bool) -> f64 {
    if record {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// GHK simulator. Particles are processed depth-first in blocks, so memory
/// is O(block · d) regardless of `M`; the result is identical to
/// [`smc`] with resampling disabled under the same seed.
pub fn ghk(problem: &OrthantProblem, config: &RunConfig) -> Result<EstimateReport> {
    config.validate()?;
    let start = Instant::now();
    let (prepared, _) = prepare(problem, config.ordering)?;
    let d = prepared.dim();
    let m_total = config.particles;
    let mut first = vec![LogSum::EMPTY; d];
    let mut second = vec![LogSum::EMPTY; d];
    let mut trajectory = Vec::new();
    let mut block_start = 0;
    while block_start < m_total {
        let block_end = (block_start + REDUCE_CHUNK).min(m_total);
        (block_start..block_end)
            .into_par_iter()
            .map(|m| ghk_particle(&prepared, config.seed, m))
            .collect_into_vec(&mut trajectory);
        let mut column = vec![0.0; block_end - block_start];
        for t in 0..d {
            for (c, traj) in column.iter_mut().zip(&trajectory) {
                *c = traj[t];
            }
            first[t] = first[t].merge(LogSum::of_slice(&column));
            column.iter_mut().for_each(|w| *w *= 2.0);
            second[t] = second[t].merge(LogSum::of_slice(&column));
        }
        block_start = block_end;
    }
    let mut ess_trace = Vec::with_capacity(d);
    for t in 0..d {
        if first[t].ln() == f64::NEG_INFINITY {
            break;
        }
        ess_trace.push((t + 1, ess_from_sums(first[t], second[t], m_total)));
    }
    let failed = ess_trace.len() < d;
    let log_prob = if failed {
        f64::NEG_INFINITY
    } else {
        0.0 + first[d - 1].ln_mean(m_total)
    };
    Ok(EstimateReport {
        method: Method::Ghk.to_string(),
        d,
        log_prob,
        failed,
        ess_trace,
        resample_events: Vec::new(),
        move_stats: Vec::new(),
        particles: m_total,
        seed: config.seed,
        wall_seconds: elapsed(start, config.record_timing),
    })
}

/// Cumulative log-weights of one GHK particle after each coordinate.
fn ghk_particle(problem: &OrthantProblem, seed: u64, m: usize) -> Vec<f64> {
    let d = problem.dim();
    let mut rng = particle_rng(seed, m as u64);
    let mut path = vec![0.0; d];
    let mut lw = 0.0;
    let mut out = Vec::with_capacity(d);
    for t in 0..d {
        let iv = problem.scaled_bound_interval(t, &path, 1.0);
        lw += log_interval_mass(iv).value();
        path[t] = sample_truncated_std_normal(iv, &mut rng).expect("bound intervals are never empty");
        out.push(lw);
    }
    out
}

/// Particle filter (`moves = None`) or SMC sampler.
pub fn smc(problem: &OrthantProblem, config: &RunConfig) -> Result<EstimateReport> {
    smc_with_sample(problem, config).map(|o| o.report)
}

/// [`smc`] returning the terminal weighted sample as well.
pub fn smc_with_sample(problem: &OrthantProblem, config: &RunConfig) -> Result<EngineOutput> {
    let method = if config.moves.is_some() { Method::Smc } else { Method::Pf };
    run_engine(problem, config, None, &method.to_string())
}

/// Runs `method`, forcing `moves` off for the particle filter and on
/// (defaulting to Gibbs) for SMC.
pub fn estimate(problem: &OrthantProblem, method: Method, config: &RunConfig) -> Result<EstimateReport> {
    match method {
        Method::Ghk => ghk(problem, config),
        Method::Pf => smc(problem, &config.clone().with_moves(None)),
        Method::Smc => {
            let moves = config.moves.or(Some(MoveConfig::default()));
            smc(problem, &config.clone().with_moves(moves))
        }
    }
}

pub(crate) fn run_engine(
    problem: &OrthantProblem,
    config: &RunConfig,
    mixing: Option<Mixing>,
    method: &str,
) -> Result<EngineOutput> {
    config.validate()?;
    let start = Instant::now();
    let (prepared, order) = prepare(problem, config.ordering)?;
    let d = prepared.dim();
    let m_total = config.particles;
    let chi2 = match mixing {
        Some(mix) => Some(ChiSquared::new(mix.nu).map_err(|e| Error::InvalidParameter(format!("nu: {e}")))?),
        None => None,
    };
    let mut slots: Vec<Slot> = (0..m_total)
        .map(|m| {
            let mut rng = particle_rng(config.seed, m as u64);
            let mix = match &chi2 {
                Some(dist) => dist.sample(&mut rng),
                None => 1.0,
            };
            Slot {
                path: vec![0.0; d],
                log_weight: 0.0,
                mix,
                rng,
            }
        })
        .collect();
    let mut resample_rng = particle_rng(config.seed, RESAMPLE_STREAM);
    let scale_of = |u: f64| mixing.map_or(1.0, |mix| mix.scale(u));

    let mut log_z = 0.0;
    let mut ess_trace = Vec::with_capacity(d);
    let mut resample_events = Vec::new();
    let mut move_stats = Vec::new();
    let mut failed = false;
    let mut weights = vec![0.0; m_total];
    let mut last_sum = LogSum::EMPTY;

    for t in 0..d {
        if let Some(mix) = mixing.filter(|mix| mix.refresh_each_step && t > 0) {
            let cs = ConstraintSystem::new(&prepared, t)?;
            slots
                .par_iter_mut()
                .try_for_each(|s| crate::student::mh_update_u(&mut s.path, &mut s.mix, &cs, mix.nu, mix.step, &mut s.rng).map(|_| ()))?;
        }
        slots.par_iter_mut().try_for_each(|s| -> Result<()> {
            let iv = prepared.scaled_bound_interval(t, &s.path, scale_of(s.mix));
            s.log_weight += log_interval_mass(iv).value();
            s.path[t] = sample_truncated_std_normal(iv, &mut s.rng)?;
            Ok(())
        })?;
        for (w, s) in weights.iter_mut().zip(&slots) {
            *w = s.log_weight;
        }
        last_sum = chunked_log_sum(&weights);
        if last_sum.ln() == f64::NEG_INFINITY {
            failed = true;
            break;
        }
        let doubled: Vec<f64> = weights.iter().map(|w| 2.0 * w).collect();
        let current_ess = ess_from_sums(last_sum, chunked_log_sum(&doubled), m_total);
        ess_trace.push((t + 1, current_ess));

        if t + 1 == d || current_ess >= config.ess_threshold * m_total as f64 {
            continue;
        }
        log_z += last_sum.ln_mean(m_total);
        let ancestors = systematic_resample(&weights, m_total, &mut resample_rng)?;
        let parents: Vec<(Vec<f64>, f64)> = slots.iter().map(|s| (s.path[..=t].to_vec(), s.mix)).collect();
        for (s, &a) in slots.iter_mut().zip(&ancestors) {
            s.path[..=t].copy_from_slice(&parents[a].0);
            s.mix = parents[a].1;
            s.log_weight = 0.0;
        }
        resample_events.push(t + 1);

        if let Some(moves) = &config.moves {
            let cs = ConstraintSystem::new(&prepared, t + 1)?;
            let (mut accepted, mut attempts, mut mix_accepted, mut bounces) = (0usize, 0usize, 0usize, 0usize);
            let rounds = move_until_stable(moves.repeat, || {
                let outcomes: Vec<(f64, bool, bool, usize)> = slots
                    .par_iter_mut()
                    .map(|s| -> Result<(f64, bool, bool, usize)> {
                        let before = s.path[..=t].to_vec();
                        let mix_ok = match mixing {
                            Some(mix) => crate::student::mh_update_u(&mut s.path, &mut s.mix, &cs, mix.nu, mix.step, &mut s.rng)?,
                            None => false,
                        };
                        let scaled = cs.with_scale(scale_of(s.mix));
                        let out = apply_kernel(&scaled, moves, &mut s.path[..=t], &mut s.rng)?;
                        debug_assert!(scaled.check_feasible(&s.path[..=t]).is_ok());
                        let moved: f64 = before.iter().zip(&s.path).map(|(x, y)| (x - y).abs()).sum();
                        Ok((moved, out.accepted, mix_ok, out.bounces))
                    })
                    .collect::<Result<_>>()?;
                let mut displacement = 0.0;
                for (moved, ok, mix_ok, b) in outcomes {
                    displacement += moved;
                    accepted += ok as usize;
                    mix_accepted += mix_ok as usize;
                    bounces += b;
                    attempts += 1;
                }
                Ok(displacement)
            })?;
            move_stats.push(MoveStat {
                t: t + 1,
                kind: moves.kind.to_string(),
                rounds,
                acceptance: accepted as f64 / attempts.max(1) as f64,
                mixing_acceptance: mixing.map(|_| mix_accepted as f64 / attempts.max(1) as f64),
                bounces,
            });
        }
    }

    let log_prob = if failed {
        f64::NEG_INFINITY
    } else {
        log_z + last_sum.ln_mean(m_total)
    };
    let report = EstimateReport {
        method: method.to_string(),
        d,
        log_prob,
        failed,
        ess_trace,
        resample_events,
        move_stats,
        particles: m_total,
        seed: config.seed,
        wall_seconds: elapsed(start, config.record_timing),
    };
    let sample = WeightedSample {
        paths: slots.iter().map(|s| s.path.clone()).collect(),
        log_weights: slots.iter().map(|s| s.log_weight).collect(),
        mixing: mixing.map(|_| slots.iter().map(|s| s.mix).collect()),
        nu: mixing.map(|mix| mix.nu),
    };
    Ok(EngineOutput {
        report,
        sample,
        problem: prepared,
        order,
        offset: problem.mean().to_vec(),
    })
}

/// Mean, variance and skewness of the non-failed replicate log-estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub replications: usize,
    pub failures: usize,
    pub mean: f64,
    /// Unbiased (n − 1) sample variance; 0 for fewer than two values.
    pub variance: f64,
    /// Moment skewness `m₃ / m₂^{3/2}`; 0 when the values are constant.
    pub skewness: f64,
}

impl Summary {
    pub fn from_reports(reports: &[EstimateReport]) -> Summary {
        let values: Vec<f64> = reports.iter().filter(|r| !r.failed).map(|r| r.log_prob).collect();
        let mut s = Summary::of(&values);
        s.replications = reports.len();
        s.failures = reports.len() - values.len();
        s
    }

    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                replications: 0,
                failures: 0,
                mean: f64::NAN,
                variance: f64::NAN,
                skewness: f64::NAN,
            };
        }
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m3 = values.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
        Summary {
            replications: n,
            failures: 0,
            mean,
            variance: if n > 1 { m2 * nf / (nf - 1.0) } else { 0.0 },
            skewness: if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 },
        }
    }
}

/// SplitMix64 finalizer applied to `master + index·φ`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `replications` independent runs with seeds derived from `config.seed`.
pub fn repeat_estimate(
    problem: &OrthantProblem,
    method: Method,
    config: &RunConfig,
    replications: usize,
) -> Result<(Vec<EstimateReport>, Summary)> {
    repeat_with(replications, config, |cfg| estimate(problem, method, cfg))
}

pub(crate) fn repeat_with<F>(replications: usize, config: &RunConfig, mut run: F) -> Result<(Vec<EstimateReport>, Summary)>
where
    F: FnMut(&RunConfig) -> Result<EstimateReport>,
{
    if replications == 0 {
        return Err(Error::InvalidParameter("replications must be >= 1".into()));
    }
    let reports = (0..replications)
        .map(|r| run(&config.clone().with_seed(derive_seed(config.seed, r as u64))))
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_reports(&reports);
    Ok((reports, summary))
}
