//! Expectations under the truncated law, from the weighted SMC output or
//! from a long single-chain Gibbs benchmark.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};

use crate::error::{Error, Result};
use crate::estimators::EngineOutput;
use crate::gaussian::sample_truncated_std_normal;
use crate::linalg::Permutation;
use crate::moves::{apply_kernel, ConstraintSystem, MoveConfig, MoveKind};
use crate::problem::OrthantProblem;
use crate::student::{bound_scale, mh_update_u, DEFAULT_MIXING_STEP};

/// Terminal particle system: whitened paths with their log-weights and,
/// for the Student extension, mixing variables.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub paths: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub mixing: Option<Vec<f64>>,
    pub nu: Option<f64>,
}

impl WeightedSample {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn mixing_at(&self, m: usize) -> Option<f64> {
        self.mixing.as_ref().map(|u| u[m])
    }
}

/// Self-normalized `Σ_m w_m h(η_m, u_m) / Σ_m w_m`. `h` receives the path
/// and the particle's mixing variable (`None` for Gaussian targets).
pub fn weighted_expectation<F>(sample: &WeightedSample, h: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], Option<f64>) -> Vec<f64>,
{
    if sample.is_empty() {
        return Err(Error::EmptyInput);
    }
    let top = sample.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(Error::ParticleSystemDied);
    }
    let mut total = 0.0;
    let mut acc: Vec<f64> = Vec::new();
    for (m, (path, &lw)) in sample.paths.iter().zip(&sample.log_weights).enumerate() {
        let w = (lw - top).exp();
        if w == 0.0 {
            continue;
        }
        let value = h(path, sample.mixing_at(m));
        if acc.is_empty() {
            acc = vec![0.0; value.len()];
        } else if value.len() != acc.len() {
            return Err(Error::DimensionMismatch {
                expected: acc.len(),
                found: value.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&value) {
            *a += w * v;
        }
        total += w;
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Maps whitened draws back to the original variable:
/// `y = Γη·√(ν/u) + mean`, undoing any coordinate reordering.
#[derive(Debug, Clone)]
pub struct OriginalScale<'a> {
    problem: &'a OrthantProblem,
    order: &'a Permutation,
    offset: &'a [f64],
    nu: Option<f64>,
}

impl<'a> OriginalScale<'a> {
    /// `problem` is the zero-mean problem the draws live on, `order` maps
    /// its positions to input coordinates and `offset` is the input mean.
    pub fn new(problem: &'a OrthantProblem, order: &'a Permutation, offset: &'a [f64], nu: Option<f64>) -> Result<Self> {
        let d = problem.dim();
        if order.len() != d || offset.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: order.len().min(offset.len()),
            });
        }
        Ok(Self {
            problem,
            order,
            offset,
            nu,
        })
    }

    pub fn of_output(output: &'a EngineOutput) -> Result<Self> {
        Self::new(&output.problem, &output.order, &output.offset, output.sample.nu)
    }

    pub fn map(&self, eta: &[f64], u: Option<f64>) -> Vec<f64> {
        let gamma = self.problem.chol().mul_prefix(eta);
        let stretch = match (self.nu, u) {
            (Some(nu), Some(u)) => 1.0 / bound_scale(u, nu),
            _ => 1.0,
        };
        let mut y = vec![0.0; gamma.len()];
        for (j, g) in gamma.iter().enumerate() {
            let k = self.order.order()[j];
            y[k] = g * stretch + self.offset[k];
        }
        y
    }
}

/// Weighted mean of the original variable.
pub fn original_mean(output: &EngineOutput) -> Result<Vec<f64>> {
    let scale = OriginalScale::of_output(output)?;
    weighted_expectation(&output.sample, |eta, u| scale.map(eta, u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Kernel applications after burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    /// Keep one state every `thin` applications.
    pub thin: usize,
    /// Autocorrelations are reported at lags `1..=max_lag` of the thinned draws.
    pub max_lag: usize,
    pub kernel: MoveConfig,
    /// Log-scale random-walk step for the mixing variable.
    pub mixing_step: f64,
    /// Attempts at drawing a feasible starting point.
    pub start_attempts: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 0,
            thin: 1,
            max_lag: 10,
            kernel: MoveConfig::new(MoveKind::Gibbs),
            mixing_step: DEFAULT_MIXING_STEP,
            start_attempts: 100,
            seed: 0,
        }
    }
}

/// Thinned draws of the whitened chain with per-coordinate diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub mixing: Option<Vec<f64>>,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    /// `autocorrelation[i][k − 1]` is the lag-`k` autocorrelation of coordinate `i`.
    pub autocorrelation: Vec<Vec<f64>>,
    pub acceptance: f64,
}

impl ChainOutput {
    /// CSV with header `eta_1,…,eta_d[,u]` and one row per kept draw.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.draws.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (1..=d).map(|i| format!("eta_{i}")).collect();
        if self.mixing.is_some() {
            header.push("u".into());
        }
        writeln!(out, "{}", header.join(","))?;
        for (k, draw) in self.draws.iter().enumerate() {
            let mut row: Vec<String> = draw.iter().map(|x| x.to_string()).collect();
            if let Some(u) = &self.mixing {
                row.push(u[k].to_string());
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Lag-`k` sample autocorrelation; 0 for a constant series.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    if lag >= n {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let denom: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = xs.windows(lag + 1).map(|w| (w[0] - mean) * (w[lag] - mean)).sum();
    num / denom
}

/// Benchmark MCMC on the whitened truncated law (with the mixing variable
/// for Student targets), started from one sequential GHK draw.
pub fn gibbs_truncated_sampler(problem: &OrthantProblem, nu: Option<f64>, config: &ChainConfig) -> Result<ChainOutput> {
    if config.thin == 0 || config.iterations < config.thin {
        return Err(Error::InvalidParameter("need thin >= 1 and iterations >= thin".into()));
    }
    let prepared = problem.standardize();
    let d = prepared.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chi2 = match nu {
        Some(nu) => Some(ChiSquared::new(nu).map_err(|e| Error::InvalidParameter(format!("nu: {e}")))?),
        None => None,
    };
    let cs = ConstraintSystem::new(&prepared, d)?;

    let mut start = None;
    for _ in 0..config.start_attempts.max(1) {
        let u = chi2.as_ref().map(|c| c.sample(&mut rng));
        let scale = match (nu, u) {
            (Some(nu), Some(u)) => bound_scale(u, nu),
            _ => 1.0,
        };
        let mut eta = vec![0.0; d];
        for i in 0..d {
            let iv = prepared.scaled_bound_interval(i, &eta, scale);
            eta[i] = sample_truncated_std_normal(iv, &mut rng)?;
        }
        if cs.with_scale(scale).check_feasible(&eta).is_ok() {
            start = Some((eta, u));
            break;
        }
    }
    let (mut eta, mut u) = start.ok_or_else(|| Error::InvalidParameter("no feasible starting point found".into()))?;

    let kept = config.iterations / config.thin;
    let mut draws = Vec::with_capacity(kept);
    let mut mixing = nu.map(|_| Vec::with_capacity(kept));
    let mut accepted = 0usize;
    for k in 0..config.burn_in + config.iterations {
        let scale = match (nu, u.as_mut()) {
            (Some(nu), Some(u)) => {
                mh_update_u(&eta, u, &cs, nu, config.mixing_step, &mut rng)?;
                bound_scale(*u, nu)
            }
            _ => 1.0,
        };
        let out = apply_kernel(&cs.with_scale(scale), &config.kernel, &mut eta, &mut rng)?;
        accepted += out.accepted as usize;
        if k >= config.burn_in && (k - config.burn_in + 1) % config.thin == 0 {
            draws.push(eta.clone());
            if let (Some(m), Some(u)) = (mixing.as_mut(), u) {
                m.push(u);
            }
        }
    }

    let n = draws.len() as f64;
    let column = |i: usize| draws.iter().map(|x| x[i]).collect::<Vec<_>>();
    let mut means = Vec::with_capacity(d);
    let mut std_devs = Vec::with_capacity(d);
    let mut acf = Vec::with_capacity(d);
    for i in 0..d {
        let xs = column(i);
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        means.push(mean);
        std_devs.push(var.sqrt());
        acf.push((1..=config.max_lag).map(|lag| autocorrelation(&xs, lag)).collect());
    }
    Ok(ChainOutput {
        draws,
        mixing,
        means,
        std_devs,
        autocorrelation: acf,
        acceptance: accepted as f64 / (config.burn_in + config.iterations) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{smc_with_sample, RunConfig};
    use crate::gaussian::{truncated_mean, Interval};
    use crate::linalg::SymMatrix;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn constant_function_has_expectation_one() {
        let sample = WeightedSample {
            paths: (0..7).map(|k| vec![k as f64]).collect(),
            log_weights: vec![-3.1, 0.2, -700.0, 5.5, -1e-3, 2.0, f64::NEG_INFINITY],
            mixing: None,
            nu: None,
        };
        assert_eq!(weighted_expectation(&sample, |_, _| vec![1.0]).unwrap(), vec![1.0]);
        let mean = weighted_expectation(&sample, |p, _| p.to_vec()).unwrap()[0];
        assert!((0.0..=6.0).contains(&mean));
        let dead = WeightedSample {
            log_weights: vec![f64::NEG_INFINITY; 7],
            ..sample
        };
        assert!(weighted_expectation(&dead, |_, _| vec![1.0]).is_err());
    }

    #[test]
    fn original_scale_undoes_ordering_and_shift() {
        let p = OrthantProblem::new(vec![3.0, -1.0], vec![INF, INF], SymMatrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 1.0]]).unwrap())
            .unwrap()
            .with_mean(vec![1.0, -2.0])
            .unwrap();
        let cfg = RunConfig::new(64, 3).with_ordering(true).with_timing(false);
        let out = smc_with_sample(&p, &cfg).unwrap();
        let scale = OriginalScale::of_output(&out).unwrap();
        for (path, _) in out.sample.paths.iter().zip(0..10) {
            let y = scale.map(path, None);
            assert!(y[0] >= 3.0 - 1e-9 && y[1] >= -1.0 - 1e-9, "{y:?}");
        }
    }

    #[test]
    fn diagonal_chain_is_uncorrelated() {
        let p = OrthantProblem::new(vec![0.0, -1.0], vec![INF, 0.5], SymMatrix::diagonal(&[1.0, 2.0])).unwrap();
        let cfg = ChainConfig {
            iterations: 20_000,
            max_lag: 3,
            seed: 2,
            ..ChainConfig::default()
        };
        let out = gibbs_truncated_sampler(&p, None, &cfg).unwrap();
        for row in &out.autocorrelation {
            assert!(row[0].abs() < 0.02, "{row:?}");
        }
        let tm = truncated_mean(Interval::new(0.0, INF)).unwrap();
        assert!((out.means[0] - tm).abs() < 4.0 * out.std_devs[0] / (20_000f64).sqrt());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let p = OrthantProblem::new(vec![0.0, 0.0], vec![INF, INF], SymMatrix::identity(2)).unwrap();
        let cfg = ChainConfig {
            iterations: 10,
            thin: 5,
            ..ChainConfig::default()
        };
        let out = gibbs_truncated_sampler(&p, Some(3.0), &cfg).unwrap();
        let mut buf = Vec::new();
        out.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "eta_1,eta_2,u");
        assert_eq!(lines.len(), 3);
        assert!(gibbs_truncated_sampler(&p, None, &ChainConfig { thin: 0, ..cfg }).is_err());
    }

    #[test]
    fn autocorrelation_examples() {
        assert_eq!(autocorrelation(&[1.0; 5], 1), 0.0);
        let alt: Vec<f64> = (0..100).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((autocorrelation(&alt, 1) + 0.99).abs() < 1e-12);
    }
}
