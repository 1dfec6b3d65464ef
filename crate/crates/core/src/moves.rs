//! MCMC kernels that leave the truncated whitened target invariant.
//!
//! A point `η` (length `t`) is feasible when every row `j < t` satisfies
//! `s·a_j <= Σ_k γ_jk η_k <= s·b_j`, where `s` is the bound scale (1 for
//! the Gaussian target, `√(u/ν)` for the Student extension).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sample_truncated_std_normal, Interval};
use crate::linalg::LowerTriangular;
use crate::problem::OrthantProblem;

/// Slack (relative to the size of a row product) tolerated when checking
/// that a point produced by a kernel is still feasible.
const FEASIBILITY_SLACK: f64 = 1e-9;

/// Roots closer than this to the current time are the wall just left.
const HIT_GUARD: f64 = 1e-12;

pub const DEFAULT_BOUNCE_CAP: usize = 10_000;
pub const DEFAULT_STABILITY_TOL: f64 = 0.01;
pub const DEFAULT_MAX_ROUNDS: usize = 50;

/// The first `t` rows of the whitened constraint set.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintSystem<'a> {
    chol: &'a LowerTriangular,
    lower: &'a [f64],
    upper: &'a [f64],
    t: usize,
    scale: f64,
}

impl<'a> ConstraintSystem<'a> {
    /// Constraints of a zero-mean problem restricted to its first `t` rows.
    pub fn new(problem: &'a OrthantProblem, t: usize) -> Result<Self> {
        if !problem.is_standardized() {
            return Err(Error::InvalidParameter(
                "constraint system needs a zero-mean problem; call standardize first".into(),
            ));
        }
        Self::from_parts(problem.chol(), problem.lower(), problem.upper(), t)
    }

    pub fn from_parts(chol: &'a LowerTriangular, lower: &'a [f64], upper: &'a [f64], t: usize) -> Result<Self> {
        let d = chol.dim();
        if t == 0 || t > d {
            return Err(Error::IndexOutOfRange { index: t, dim: d });
        }
        if lower.len() != d || upper.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: lower.len().min(upper.len()),
            });
        }
        Ok(Self {
            chol,
            lower,
            upper,
            t,
            scale: 1.0,
        })
    }

    /// Multiplies every bound by `scale` (> 0).
    pub fn with_scale(mut self, scale: f64) -> Self {
        debug_assert!(scale > 0.0);
        self.scale = scale;
        self
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn chol(&self) -> &LowerTriangular {
        self.chol
    }

    /// Scaled bounds of row `j`.
    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.lower[j] * self.scale, self.upper[j] * self.scale)
    }

    /// Unscaled bounds of row `j`.
    pub fn raw_bounds(&self, j: usize) -> (f64, f64) {
        (self.lower[j], self.upper[j])
    }

    /// `Σ_k γ_jk η_k`.
    pub fn row_value(&self, j: usize, eta: &[f64]) -> f64 {
        self.chol.row(j).iter().zip(eta).map(|(g, x)| g * x).sum()
    }

    fn row_sums(&self, eta: &[f64], from: usize) -> Vec<f64> {
        (0..self.t)
            .map(|j| if j < from { 0.0 } else { self.row_value(j, eta) })
            .collect()
    }

    /// Exact membership test (no slack).
    pub fn contains(&self, eta: &[f64]) -> bool {
        (0..self.t).all(|j| {
            let r = self.row_value(j, eta);
            let (lo, hi) = self.bounds(j);
            lo <= r && r <= hi
        })
    }

    /// Membership up to rounding; reports the first violated row.
    pub fn check_feasible(&self, eta: &[f64]) -> Result<()> {
        for j in 0..self.t {
            let row = self.chol.row(j);
            let (r, mag) = row
                .iter()
                .zip(eta)
                .fold((0.0, 0.0), |(s, m), (g, x)| (s + g * x, m + (g * x).abs()));
            let slack = FEASIBILITY_SLACK * (1.0 + mag);
            let (lo, hi) = self.bounds(j);
            if r < lo - slack || r > hi + slack {
                return Err(Error::InfeasiblePoint {
                    coordinate: j + 1,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(())
    }

    /// Interval for `η_i` given `r_j = Σ_k γ_jk η_k` for rows `j >= i`.
    fn interval_from_sums(&self, i: usize, eta_i: f64, sums: &[f64]) -> Result<Interval> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (j, &sum) in sums.iter().enumerate().take(self.t).skip(i) {
            let g = self.chol.get(j, i);
            if g == 0.0 {
                continue;
            }
            let rest = sum - g * eta_i;
            let (a, b) = self.bounds(j);
            let (l, u) = if g > 0.0 {
                ((a - rest) / g, (b - rest) / g)
            } else {
                ((b - rest) / g, (a - rest) / g)
            };
            lo = lo.max(l);
            hi = hi.min(u);
        }
        let slack = 1e-8 * (1.0 + eta_i.abs());
        if lo > eta_i + slack || hi < eta_i - slack || lo.is_nan() || hi.is_nan() {
            return Err(Error::InfeasiblePoint {
                coordinate: i + 1,
                lower: lo,
                upper: hi,
            });
        }
        // Rounding may leave the current value a hair outside.
        Ok(Interval::new(lo.min(eta_i), hi.max(eta_i)))
    }
}

/// Full conditional support of `η_i` (0-based) given the other coordinates.
pub fn conditional_interval(cs: &ConstraintSystem, i: usize, eta: &[f64]) -> Result<Interval> {
    if i >= cs.t {
        return Err(Error::IndexOutOfRange { index: i, dim: cs.t });
    }
    if eta.len() < cs.t {
        return Err(Error::DimensionMismatch {
            expected: cs.t,
            found: eta.len(),
        });
    }
    let sums = cs.row_sums(eta, i);
    cs.interval_from_sums(i, eta[i], &sums)
}

fn gibbs_from<R: Rng + ?Sized>(cs: &ConstraintSystem, eta: &mut [f64], start: usize, rng: &mut R) -> Result<()> {
    let t = cs.t;
    let mut sums = cs.row_sums(eta, start);
    for i in start..t {
        let old = eta[i];
        let iv = cs.interval_from_sums(i, old, &sums)?;
        let new = if iv.lower < iv.upper {
            sample_truncated_std_normal(iv, rng)?
        } else {
            old
        };
        let delta = new - old;
        if delta != 0.0 {
            for (j, s) in sums.iter_mut().enumerate().skip(i) {
                *s += cs.chol.get(j, i) * delta;
            }
        }
        eta[i] = new;
    }
    Ok(())
}

/// One systematic-scan Gibbs sweep over coordinates `0..t`. O(t²).
pub fn gibbs_sweep<R: Rng + ?Sized>(cs: &ConstraintSystem, eta: &mut [f64], rng: &mut R) -> Result<()> {
    gibbs_from(cs, eta, 0, rng)
}

/// Gibbs sweep over the last `window` coordinates only. O(window·t).
pub fn block_gibbs_sweep<R: Rng + ?Sized>(
    cs: &ConstraintSystem,
    eta: &mut [f64],
    window: usize,
    rng: &mut R,
) -> Result<()> {
    if window == 0 {
        return Err(Error::InvalidParameter("block window must be >= 1".into()));
    }
    gibbs_from(cs, eta, cs.t.saturating_sub(window), rng)
}

/// Proposes `αη + √(1−α²)z` and keeps it when feasible. Returns whether
/// the proposal was accepted.
pub fn overrelax_step<R: Rng + ?Sized>(cs: &ConstraintSystem, eta: &mut [f64], alpha: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("overrelaxation alpha must be in [0, 1), got {alpha}")));
    }
    let c = (1.0 - alpha * alpha).sqrt();
    let proposal: Vec<f64> = eta[..cs.t]
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            alpha * x + c * z
        })
        .collect();
    if cs.contains(&proposal) {
        eta[..cs.t].copy_from_slice(&proposal);
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Integration time of one HMC step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HmcHorizon {
    /// Uniform on `[0, π]`.
    UniformHalfPeriod,
    Fixed(f64),
}

/// Diagnostics of one exact-HMC trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcOutcome {
    pub bounces: usize,
    /// Largest `|‖η‖² + ‖p‖² − E₀|` seen at the bounce points and the end.
    pub max_energy_drift: f64,
}

/// Exact Hamiltonian dynamics for a standard Gaussian, `η(s) = η cos s +
/// p sin s`, with elastic reflection on every constraint row.
pub fn hmc_step<R: Rng + ?Sized>(
    cs: &ConstraintSystem,
    eta: &mut [f64],
    horizon: HmcHorizon,
    bounce_cap: usize,
    rng: &mut R,
) -> Result<HmcOutcome> {
    let t = cs.t;
    let mut x = eta[..t].to_vec();
    let mut v: Vec<f64> = (0..t).map(|_| StandardNormal.sample(rng)).collect();
    let mut remaining = match horizon {
        HmcHorizon::UniformHalfPeriod => rng.random::<f64>() * PI,
        HmcHorizon::Fixed(tau) => {
            if !(tau >= 0.0) || !tau.is_finite() {
                return Err(Error::InvalidParameter(format!("HMC horizon must be finite and >= 0, got {tau}")));
            }
            tau
        }
    };
    let energy = |x: &[f64], v: &[f64]| x.iter().chain(v).map(|z| z * z).sum::<f64>();
    let e0 = energy(&x, &v);
    let mut outcome = HmcOutcome {
        bounces: 0,
        max_energy_drift: 0.0,
    };

    loop {
        let mut first: Option<(f64, usize)> = None;
        for j in 0..t {
            let row = cs.chol.row(j);
            let a: f64 = row.iter().zip(&x).map(|(g, z)| g * z).sum();
            let b: f64 = row.iter().zip(&v).map(|(g, z)| g * z).sum();
            let amp = a.hypot(b);
            if amp == 0.0 {
                continue;
            }
            let phase = b.atan2(a);
            let (lo, hi) = cs.bounds(j);
            // Lower walls are hit moving down, upper walls moving up.
            for (wall, outward) in [(lo, -1.0), (hi, 1.0)] {
                if !wall.is_finite() || wall.abs() > amp {
                    continue;
                }
                let spread = (wall / amp).clamp(-1.0, 1.0).acos();
                for root in [phase - spread, phase + spread] {
                    let s = root.rem_euclid(2.0 * PI);
                    if s <= HIT_GUARD || s > remaining || first.is_some_and(|(best, _)| s >= best) {
                        continue;
                    }
                    let speed = -a * s.sin() + b * s.cos();
                    if speed * outward > 0.0 {
                        first = Some((s, j));
                    }
                }
            }
        }
        let step = first.map_or(remaining, |(s, _)| s);
        let (cos, sin) = (step.cos(), step.sin());
        for (xi, vi) in x.iter_mut().zip(v.iter_mut()) {
            let (x0, v0) = (*xi, *vi);
            *xi = x0 * cos + v0 * sin;
            *vi = -x0 * sin + v0 * cos;
        }
        outcome.max_energy_drift = outcome.max_energy_drift.max((energy(&x, &v) - e0).abs());
        let Some((s, j)) = first else { break };
        remaining -= s;
        outcome.bounces += 1;
        if outcome.bounces > bounce_cap {
            return Err(Error::BounceCapExceeded { cap: bounce_cap });
        }
        let row = cs.chol.row(j);
        let gv: f64 = row.iter().zip(&v).map(|(g, z)| g * z).sum();
        let gg: f64 = row.iter().map(|g| g * g).sum();
        let k = 2.0 * gv / gg;
        for (vi, g) in v.iter_mut().zip(row) {
            *vi -= k * g;
        }
    }
    cs.check_feasible(&x)?;
    eta[..t].copy_from_slice(&x);
    Ok(outcome)
}

/// How the overrelaxation coefficient is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverrelaxAlpha {
    /// `1 − 0.5·t^(−1/3)`.
    Auto,
    /// `0.004·(1 − t^(−1/3))`, the small constant sometimes quoted for this
    /// scheme; close to a fresh draw rather than a persistent move.
    Small,
    Fixed(f64),
}

impl OverrelaxAlpha {
    pub fn value(self, t: usize) -> f64 {
        let root = (t as f64).powf(-1.0 / 3.0);
        match self {
            OverrelaxAlpha::Auto => 1.0 - 0.5 * root,
            OverrelaxAlpha::Small => 0.004 * (1.0 - root),
            OverrelaxAlpha::Fixed(a) => a,
        }
    }
}

/// Move kernel applied to every particle after resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MoveKind {
    Gibbs,
    Overrelax(OverrelaxAlpha),
    Hmc(HmcHorizon),
    BlockGibbs(usize),
}

impl fmt::Display for MoveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MoveKind::Gibbs => write!(f, "gibbs"),
            MoveKind::Overrelax(OverrelaxAlpha::Auto) => write!(f, "overrelax"),
            MoveKind::Overrelax(OverrelaxAlpha::Small) => write!(f, "overrelax:small"),
            MoveKind::Overrelax(OverrelaxAlpha::Fixed(a)) => write!(f, "overrelax:{a}"),
            MoveKind::Hmc(HmcHorizon::UniformHalfPeriod) => write!(f, "hmc"),
            MoveKind::Hmc(HmcHorizon::Fixed(tau)) => write!(f, "hmc:{tau}"),
            MoveKind::BlockGibbs(l) => write!(f, "block:{l}"),
        }
    }
}

impl FromStr for MoveKind {
    type Err = Error;

    /// `gibbs`, `overrelax[:auto|:small|:ALPHA]`, `hmc[:TIME]`, `block:L`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown move kernel {s:?}"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let kind = match (name, arg) {
            ("gibbs", None) => MoveKind::Gibbs,
            ("overrelax", None | Some("auto")) => MoveKind::Overrelax(OverrelaxAlpha::Auto),
            ("overrelax", Some("small")) => MoveKind::Overrelax(OverrelaxAlpha::Small),
            ("overrelax", Some(a)) => {
                let a: f64 = a.parse().map_err(|_| bad())?;
                if !(0.0..1.0).contains(&a) {
                    return Err(Error::InvalidParameter(format!("overrelaxation alpha must be in [0, 1), got {a}")));
                }
                MoveKind::Overrelax(OverrelaxAlpha::Fixed(a))
            }
            ("hmc", None) => MoveKind::Hmc(HmcHorizon::UniformHalfPeriod),
            ("hmc", Some(tau)) => {
                let tau: f64 = tau.parse().map_err(|_| bad())?;
                if !(tau >= 0.0) || !tau.is_finite() {
                    return Err(bad());
                }
                MoveKind::Hmc(HmcHorizon::Fixed(tau))
            }
            ("block", Some(l)) => {
                let l: usize = l.parse().map_err(|_| bad())?;
                if l == 0 {
                    return Err(Error::InvalidParameter("block window must be >= 1".into()));
                }
                MoveKind::BlockGibbs(l)
            }
            _ => return Err(bad()),
        };
        Ok(kind)
    }
}

impl Serialize for MoveKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MoveKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How many kernel rounds follow each resampling event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatPolicy {
    Fixed(usize),
    /// Repeat until the total displacement stabilizes.
    Adaptive { tol: f64, max_rounds: usize },
}

impl Default for RepeatPolicy {
    fn default() -> Self {
        RepeatPolicy::Adaptive {
            tol: DEFAULT_STABILITY_TOL,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveConfig {
    pub kind: MoveKind,
    #[serde(default)]
    pub repeat: RepeatPolicy,
    #[serde(default = "default_bounce_cap")]
    pub bounce_cap: usize,
}

fn default_bounce_cap() -> usize {
    DEFAULT_BOUNCE_CAP
}

impl MoveConfig {
    pub fn new(kind: MoveKind) -> Self {
        Self {
            kind,
            repeat: RepeatPolicy::default(),
            bounce_cap: DEFAULT_BOUNCE_CAP,
        }
    }

    pub fn with_repeat(mut self, repeat: RepeatPolicy) -> Self {
        self.repeat = repeat;
        self
    }
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self::new(MoveKind::Gibbs)
    }
}

/// Per-application result of [`apply_kernel`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KernelOutcome {
    pub accepted: bool,
    pub bounces: usize,
}

/// One application of the configured kernel to one point.
pub fn apply_kernel<R: Rng + ?Sized>(
    cs: &ConstraintSystem,
    config: &MoveConfig,
    eta: &mut [f64],
    rng: &mut R,
) -> Result<KernelOutcome> {
    match config.kind {
        MoveKind::Gibbs => gibbs_sweep(cs, eta, rng).map(|_| KernelOutcome {
            accepted: true,
            bounces: 0,
        }),
        MoveKind::BlockGibbs(l) => block_gibbs_sweep(cs, eta, l, rng).map(|_| KernelOutcome {
            accepted: true,
            bounces: 0,
        }),
        MoveKind::Overrelax(alpha) => overrelax_step(cs, eta, alpha.value(cs.t), rng).map(|accepted| KernelOutcome {
            accepted,
            bounces: 0,
        }),
        MoveKind::Hmc(horizon) => hmc_step(cs, eta, horizon, config.bounce_cap, rng).map(|o| KernelOutcome {
            accepted: true,
            bounces: o.bounces,
        }),
    }
}

/// Runs `round` (one kernel application to every particle, returning the
/// summed absolute displacement `D_k`) until `|D_k − D_{k−1}| <= tol·D_{k−1}`
/// (at least two rounds) or the round cap. Returns the number of rounds.
pub fn move_until_stable<F>(policy: RepeatPolicy, mut round: F) -> Result<usize>
where
    F: FnMut() -> Result<f64>,
{
    match policy {
        RepeatPolicy::Fixed(n) => {
            for _ in 0..n {
                round()?;
            }
            Ok(n)
        }
        RepeatPolicy::Adaptive { tol, max_rounds } => {
            if !(tol > 0.0) || max_rounds == 0 {
                return Err(Error::InvalidParameter("adaptive repeat needs tol > 0 and max_rounds >= 1".into()));
            }
            let mut previous = round()?;
            let mut rounds = 1;
            while rounds < max_rounds {
                let current = round()?;
                rounds += 1;
                if (current - previous).abs() <= tol * previous {
                    break;
                }
                previous = current;
            }
            Ok(rounds)
        }
    }
}
