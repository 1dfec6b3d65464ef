//! Scalar standard-normal primitives.
//!
//! Everything that ends up multiplied into an orthant probability is kept in
//! log space. Bounds are ordinary `f64` values and `±∞` is a legal bound.
//! Beyond `|x| > TAIL_SWITCH` masses are computed from the Mills ratio and
//! sampling switches from cdf inversion to exponential-proposal rejection.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(sqrt(2π))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Bound magnitude above which tail-specific formulas are used.
pub const TAIL_SWITCH: f64 = 8.0;

/// A closed interval of the real line with possibly infinite ends.
///
/// `lower >= upper` is treated as empty: it carries no Gaussian mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn full() -> Self {
        Self::new(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn is_empty(&self) -> bool {
        !(self.lower < self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// The mirror image `[-upper, -lower]`.
    pub fn reflect(&self) -> Self {
        Self::new(-self.upper, -self.lower)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    fn clamp(&self, x: f64) -> f64 {
        x.max(self.lower).min(self.upper)
    }
}

/// Log of a probability; `-∞` encodes zero.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogProb(pub f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn log_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// ln Φ(x), finite for every finite `x`.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x > 0.0 {
        (-std_normal_cdf(-x)).ln_1p()
    } else if x > -TAIL_SWITCH {
        std_normal_cdf(x).ln()
    } else {
        log_std_normal_pdf(x) + mills_ratio(-x).ln()
    }
}

/// Mills ratio `R(x) = (1 - Φ(x)) / φ(x)` for large positive `x`, by its
/// continued fraction `1/(x+1/(x+2/(x+3/(x+…))))` evaluated bottom-up.
fn mills_ratio(x: f64) -> f64 {
    debug_assert!(x >= TAIL_SWITCH);
    if x.is_infinite() {
        return 0.0;
    }
    let mut tail = x;
    for k in (1..=64).rev() {
        tail = x + k as f64 / tail;
    }
    1.0 / tail
}

// 8-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// ln ∫_l^u φ for a short interval with `l < u <= 0`, relative to φ(u).
fn log_short_mass(l: f64, u: f64) -> f64 {
    let half = 0.5 * (u - l);
    let mid = 0.5 * (u + l);
    let mut acc = 0.0;
    for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
        for x in [mid - half * node, mid + half * node] {
            acc += weight * (-0.5 * (x - u) * (x + u)).exp();
        }
    }
    log_std_normal_pdf(u) + (half * acc).ln()
}

/// ln(Φ(upper) − Φ(lower)), free of cancellation in both tails.
pub fn log_interval_mass(iv: Interval) -> LogProb {
    if iv.is_empty() {
        return LogProb::ZERO;
    }
    // Orient the interval so that it is either straddling zero or entirely
    // in the lower half-line, where Φ carries relative precision.
    let iv = if iv.lower >= 0.0 { iv.reflect() } else { iv };
    let (l, u) = (iv.lower, iv.upper);
    if u > 0.0 {
        let outside = std_normal_cdf(l) + std_normal_cdf(-u);
        if outside < 0.5 {
            LogProb((-outside).ln_1p())
        } else {
            let diff = libm::erf(u * FRAC_1_SQRT_2) - libm::erf(l * FRAC_1_SQRT_2);
            LogProb((0.5 * diff).ln())
        }
    } else if (u - l) * u.abs().max(1.0) < 1e-2 {
        LogProb(log_short_mass(l, u))
    } else {
        let log_u = log_std_normal_cdf(u);
        let log_l = log_std_normal_cdf(l);
        LogProb(log_u + (-(log_l - log_u).exp()).ln_1p())
    }
}

/// Inverse of Φ on (0, 1) (Wichura's AS241, PPND16), refined with one
/// Newton step against the `erfc`-based cdf.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    let x = if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        q * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
            + 67265.770_927_008_7)
            * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_3)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5)
            / (((((((5226.495_278_852_545 * r + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0)
    } else {
        let tail_p = if q < 0.0 { p } else { 1.0 - p };
        let mut r = (-tail_p.ln()).sqrt();
        let val = if r <= 5.0 {
            r -= 1.6;
            (((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
                + 0.241_780_725_177_450_6)
                * r
                + 1.270_458_252_452_368_4)
                * r
                + 3.647_848_324_763_204_5)
                * r
                + 5.769_497_221_460_691)
                * r
                + 4.630_337_846_156_546)
                * r
                + 1.423_437_110_749_683_5)
                / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4)
                    * r
                    + 0.015_198_666_563_616_457)
                    * r
                    + 0.148_103_976_427_480_08)
                    * r
                    + 0.689_767_334_985_1)
                    * r
                    + 1.676_384_830_183_803_8)
                    * r
                    + 2.053_191_626_637_759)
                    * r
                    + 1.0)
        } else {
            r -= 5.0;
            (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
                + 0.001_242_660_947_388_078_4)
                * r
                + 0.026_532_189_526_576_124)
                * r
                + 0.296_560_571_828_504_9)
                * r
                + 1.784_826_539_917_291_3)
                * r
                + 5.463_784_911_164_114)
                * r
                + 6.657_904_643_501_103)
                / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7)
                    * r
                    + 1.846_318_317_510_054_8e-5)
                    * r
                    + 7.868_691_311_456_133e-4)
                    * r
                    + 0.014_875_361_290_850_615)
                    * r
                    + 0.136_929_880_922_735_8)
                    * r
                    + 0.599_832_206_555_888)
                    * r
                    + 1.0)
        };
        if q < 0.0 {
            -val
        } else {
            val
        }
    };
    // Newton refinement on the side of the distribution that carries
    // relative precision.
    if x.is_finite() {
        let dens = std_normal_pdf(x);
        if dens > 0.0 {
            let err = if x < 0.0 {
                std_normal_cdf(x) - p
            } else {
                (1.0 - p) - std_normal_cdf(-x)
            };
            let step = if x < 0.0 { err / dens } else { -err / dens };
            return x - step;
        }
    }
    x
}

/// One exact draw from φ(· | iv).
pub fn sample_truncated_std_normal<R: Rng + ?Sized>(iv: Interval, rng: &mut R) -> Result<f64> {
    if iv.is_empty() || iv.lower.is_nan() || iv.upper.is_nan() {
        return Err(Error::EmptyTruncation {
            lower: iv.lower,
            upper: iv.upper,
        });
    }
    let x = if iv.upper <= 0.0 {
        -sample_upper_oriented(iv.reflect(), rng)
    } else {
        sample_upper_oriented(iv, rng)
    };
    Ok(iv.clamp(x))
}

// Precondition: upper > 0.
fn sample_upper_oriented<R: Rng + ?Sized>(iv: Interval, rng: &mut R) -> f64 {
    let (l, u) = (iv.lower, iv.upper);
    if l >= TAIL_SWITCH {
        return sample_tail(l, u, rng);
    }
    let uniform: f64 = rng.random();
    if l >= 0.0 {
        // Invert the upper tail Q(x) = Φ(−x) on [Q(u), Q(l)].
        let q_l = std_normal_cdf(-l);
        let q_u = std_normal_cdf(-u);
        let q = q_u + uniform * (q_l - q_u);
        return -std_normal_quantile(q);
    }
    let lo = std_normal_cdf(l);
    let hi_tail = std_normal_cdf(-u);
    let mass = log_interval_mass(iv).prob();
    let p = lo + uniform * mass;
    if p < 0.5 {
        std_normal_quantile(p)
    } else {
        let q = hi_tail + (1.0 - uniform) * mass;
        -std_normal_quantile(q)
    }
}

/// Rejection sampler for `[l, u]` with `l >= TAIL_SWITCH`: truncated
/// exponential proposal at the optimal rate, accepted with probability
/// `exp(-(z - rate)^2 / 2)`.
fn sample_tail<R: Rng + ?Sized>(l: f64, u: f64, rng: &mut R) -> f64 {
    let rate = if l > 1e150 {
        l
    } else {
        0.5 * (l + (l * l + 4.0).sqrt())
    };
    // Mass of the exponential proposal that lands inside [l, u].
    let inside = -(-rate * (u - l)).exp_m1();
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = l - (-u1 * inside).ln_1p() / rate;
        let dz = z - rate;
        if u2 <= (-0.5 * dz * dz).exp() {
            return z.min(u);
        }
    }
}

/// Mean of φ(· | iv): `(φ(l) − φ(u)) / (Φ(u) − Φ(l))`.
pub fn truncated_mean(iv: Interval) -> Result<f64> {
    if iv.is_empty() {
        return Err(Error::EmptyTruncation {
            lower: iv.lower,
            upper: iv.upper,
        });
    }
    if iv.lower == f64::NEG_INFINITY && iv.upper == f64::INFINITY {
        return Ok(0.0);
    }
    if iv.lower + iv.upper < 0.0 {
        return truncated_mean(iv.reflect()).map(|m| -m);
    }
    let log_mass = log_interval_mass(iv).value();
    let ratio = |x: f64| {
        if x.is_finite() {
            (log_std_normal_pdf(x) - log_mass).exp()
        } else {
            0.0
        }
    };
    Ok(iv.clamp(ratio(iv.lower) - ratio(iv.upper)))
}

/// Running `Σ exp(x)` stored as `exp(max) · scaled`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogSum {
    pub(crate) max: f64,
    pub(crate) scaled: f64,
}

impl LogSum {
    pub(crate) const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        scaled: 0.0,
    };

    pub(crate) fn of_slice(xs: &[f64]) -> LogSum {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return LogSum::EMPTY;
        }
        let scaled = xs.iter().map(|x| (x - max).exp()).sum();
        LogSum { max, scaled }
    }

    pub(crate) fn merge(self, other: LogSum) -> LogSum {
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        let max = self.max.max(other.max);
        let scaled = self.scaled * (self.max - max).exp() + other.scaled * (other.max - max).exp();
        LogSum { max, scaled }
    }

    pub(crate) fn ln(self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }

    /// `ln(Σ exp(x) / n)`.
    pub(crate) fn ln_mean(self, n: usize) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + (self.scaled / n as f64).ln()
        }
    }
}

/// Reduction block for log-domain sums. Fixed so that every caller folds
/// in the same order whatever the thread count.
pub(crate) const REDUCE_CHUNK: usize = 4096;

pub(crate) fn chunked_log_sum(xs: &[f64]) -> LogSum {
    xs.chunks(REDUCE_CHUNK)
        .map(LogSum::of_slice)
        .fold(LogSum::EMPTY, LogSum::merge)
}

/// `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(chunked_log_sum(xs).ln())
}

/// `ln((1/n) Σ exp(x_i))`; exact when all inputs are equal.
pub fn log_mean_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(chunked_log_sum(xs).ln_mean(xs.len()))
}

/// `ln(1/2)`.
pub const LOG_HALF: f64 = -LN_2;
