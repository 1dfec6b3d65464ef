//! Student orthant probabilities through the scale mixture
//! `X = Z·√(ν/u)`, `Z ~ N(0, Σ)`, `u ~ χ²_ν`. Each particle carries its own
//! `u`; the box constraint on `X` becomes the Gaussian one with both
//! bounds multiplied by `√(u/ν)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::{run_engine, EngineOutput, EstimateReport, Method, Mixing, RunConfig};
use crate::gaussian::Interval;
use crate::moves::{ConstraintSystem, MoveConfig};
use crate::problem::OrthantProblem;

pub const DEFAULT_MIXING_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOrthantProblem {
    pub base: OrthantProblem,
    nu: f64,
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("degrees of freedom must be finite and > 0, got {nu}")))
    }
}

impl StudentOrthantProblem {
    pub fn new(base: OrthantProblem, nu: f64) -> Result<Self> {
        check_nu(nu)?;
        Ok(Self { base, nu })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// The problem document with an added `"nu"` field.
    pub fn to_json(&self) -> Result<String> {
        let mut doc = self.base.to_document();
        doc.nu = Some(self.nu);
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: crate::problem::ProblemDocument = serde_json::from_str(text)?;
        let nu = doc
            .nu
            .ok_or_else(|| Error::InvalidParameter("Student problem needs a \"nu\" field".into()))?;
        Self::new(OrthantProblem::from_document(&doc)?, nu)
    }
}

/// `√(u/ν)`, exactly 1 at `u = ν`.
pub fn bound_scale(u: f64, nu: f64) -> f64 {
    if u == nu {
        1.0
    } else {
        (u / nu).sqrt()
    }
}

/// `B_i` of the zero-mean problem with both bounds scaled by `√(u/ν)`.
pub fn student_bounds(problem: &OrthantProblem, u: f64, nu: f64, i: usize, prefix: &[f64]) -> Result<Interval> {
    check_nu(nu)?;
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::InvalidParameter(format!("mixing variable must be finite and > 0, got {u}")));
    }
    problem.bound_interval(i, prefix)?;
    Ok(problem.scaled_bound_interval(i, prefix, bound_scale(u, nu)))
}

/// A whitened path together with its mixing variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedParticle {
    pub path: Vec<f64>,
    pub u: f64,
}

impl ExtendedParticle {
    /// See [`mh_update_u`].
    pub fn update_mixing<R: Rng + ?Sized>(&mut self, cs: &ConstraintSystem, nu: f64, step: f64, rng: &mut R) -> Result<bool> {
        mh_update_u(&self.path, &mut self.u, cs, nu, step, rng)
    }
}

/// Random-walk Metropolis on `log u` targeting `χ²_ν(u)` restricted to the
/// values of `u` for which `path` is feasible. `cs` carries the unscaled
/// bounds. Returns whether the proposal was accepted.
pub fn mh_update_u<R: Rng + ?Sized>(
    path: &[f64],
    u: &mut f64,
    cs: &ConstraintSystem,
    nu: f64,
    step: f64,
    rng: &mut R,
) -> Result<bool> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("mixing step must be > 0, got {step}")));
    }
    let z: f64 = StandardNormal.sample(rng);
    let log_proposal = u.ln() + step * z;
    let proposal = log_proposal.exp();
    // χ²_ν density ratio times the Jacobian u'/u of the log-scale walk.
    let log_ratio = 0.5 * nu * (log_proposal - u.ln()) - 0.5 * (proposal - *u);
    let log_uniform = (1.0 - rng.random::<f64>()).ln();
    if !(proposal > 0.0 && proposal.is_finite()) || log_uniform >= log_ratio {
        return Ok(false);
    }
    if !cs.with_scale(bound_scale(proposal, nu)).contains(path) {
        return Ok(false);
    }
    *u = proposal;
    Ok(true)
}

/// Options specific to the Student extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentOptions {
    /// Standard deviation of the log-scale random walk on `u`.
    pub step: f64,
    /// Also update `u` once before every extension, not only after resampling.
    pub refresh_each_step: bool,
}

impl Default for StudentOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_MIXING_STEP,
            refresh_each_step: false,
        }
    }
}

/// SMC on the extended target `(η, u)`; `config.moves = None` gives the
/// particle filter. The move step updates `u` first, then the coordinates.
pub fn smc_student(problem: &StudentOrthantProblem, config: &RunConfig, options: StudentOptions) -> Result<EngineOutput> {
    let mixing = Mixing {
        nu: problem.nu,
        step: options.step,
        refresh_each_step: options.refresh_each_step,
    };
    let method = if config.ess_threshold == 0.0 {
        Method::Ghk
    } else if config.moves.is_some() {
        Method::Smc
    } else {
        Method::Pf
    };
    run_engine(&problem.base, config, Some(mixing), &method.to_string())
}

/// Student counterpart of [`crate::estimators::estimate`]. GHK is the
/// engine with resampling disabled.
pub fn estimate_student(
    problem: &StudentOrthantProblem,
    method: Method,
    config: &RunConfig,
    options: StudentOptions,
) -> Result<EstimateReport> {
    let cfg = match method {
        Method::Ghk => config.clone().with_threshold(0.0).with_moves(None),
        Method::Pf => config.clone().with_moves(None),
        Method::Smc => {
            let moves = config.moves.or(Some(MoveConfig::default()));
            config.clone().with_moves(moves)
        }
    };
    smc_student(problem, &cfg, options).map(|o| o.report)
}
