//! Box probabilities `P(a <= Y <= b)` for `Y ~ N(m, Σ)` and the problem
//! generators used by the experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gaussian::Interval;
use crate::linalg::{cholesky, gibson_ordering, permute_problem, LowerTriangular, Permutation, SymMatrix};

/// Orthant (box) problem with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthantProblem {
    a: Vec<f64>,
    b: Vec<f64>,
    sigma: SymMatrix,
    chol: LowerTriangular,
    mean: Vec<f64>,
    pub meta: Map<String, Value>,
}

fn check_bounds(a: &[f64], b: &[f64], d: usize) -> Result<()> {
    for len in [a.len(), b.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, found: len });
        }
    }
    for (i, (&lo, &hi)) in a.iter().zip(b).enumerate() {
        if lo.is_nan() || hi.is_nan() || !(lo < hi) || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(Error::InvalidParameter(format!(
                "bounds of coordinate {} must satisfy a < b, got [{lo}, {hi}]",
                i + 1
            )));
        }
    }
    Ok(())
}

impl OrthantProblem {
    /// Zero-mean problem; factorizes `sigma`.
    pub fn new(a: Vec<f64>, b: Vec<f64>, sigma: SymMatrix) -> Result<Self> {
        let d = sigma.dim();
        check_bounds(&a, &b, d)?;
        let chol = cholesky(&sigma)?;
        Ok(Self {
            a,
            b,
            sigma,
            chol,
            mean: vec![0.0; d],
            meta: Map::new(),
        })
    }

    /// Zero-mean problem from a known factor `Γ`; `Σ` is set to `ΓΓᵗ`.
    pub fn from_factor(a: Vec<f64>, b: Vec<f64>, chol: LowerTriangular) -> Result<Self> {
        let d = chol.dim();
        check_bounds(&a, &b, d)?;
        Ok(Self {
            a,
            b,
            sigma: chol.gram(),
            chol,
            mean: vec![0.0; d],
            meta: Map::new(),
        })
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mean.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("mean must be finite".into()));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.a
    }

    pub fn upper(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma(&self) -> &SymMatrix {
        &self.sigma
    }

    pub fn chol(&self) -> &LowerTriangular {
        &self.chol
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn is_standardized(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0)
    }

    /// Moves the mean into the bounds: `a - m`, `b - m`, mean zero.
    pub fn standardize(&self) -> OrthantProblem {
        let shift = |v: &[f64]| v.iter().zip(&self.mean).map(|(x, m)| x - m).collect::<Vec<_>>();
        OrthantProblem {
            a: shift(&self.a),
            b: shift(&self.b),
            sigma: self.sigma.clone(),
            chol: self.chol.clone(),
            mean: vec![0.0; self.dim()],
            meta: self.meta.clone(),
        }
    }

    /// `B_i(η_{<i})` for the zero-mean problem; `i` is 0-based and
    /// `prefix.len()` must equal `i`.
    pub fn bound_interval(&self, i: usize, prefix: &[f64]) -> Result<Interval> {
        if i >= self.dim() {
            return Err(Error::IndexOutOfRange { index: i, dim: self.dim() });
        }
        if prefix.len() != i {
            return Err(Error::DimensionMismatch {
                expected: i,
                found: prefix.len(),
            });
        }
        Ok(self.scaled_bound_interval(i, prefix, 1.0))
    }

    /// `B_i` with both bounds multiplied by `scale`. Only the first `i`
    /// entries of `path` are read.
    pub(crate) fn scaled_bound_interval(&self, i: usize, path: &[f64], scale: f64) -> Interval {
        let row = self.chol.row(i);
        let shift: f64 = row[..i].iter().zip(&path[..i]).map(|(g, x)| g * x).sum();
        let diag = row[i];
        Interval::new(
            (self.a[i] * scale - shift) / diag,
            (self.b[i] * scale - shift) / diag,
        )
    }

    /// Relabels coordinates; position `j` takes original coordinate `p[j]`.
    pub fn permuted(&self, p: &Permutation) -> Result<OrthantProblem> {
        let (sigma, a, b) = permute_problem(&self.sigma, &self.a, &self.b, p)?;
        let mut out = OrthantProblem::new(a, b, sigma)?.with_mean(p.apply(&self.mean))?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Applies the greedy hardest-first ordering to the standardized problem.
    pub fn ordered(&self) -> Result<(OrthantProblem, Permutation)> {
        let std = self.standardize();
        let p = gibson_ordering(&std.sigma, &std.a, &std.b)?;
        Ok((std.permuted(&p)?, p))
    }

    /// Problem restricted to the first `k` coordinates.
    pub fn leading(&self, k: usize) -> Result<OrthantProblem> {
        if k == 0 || k > self.dim() {
            return Err(Error::IndexOutOfRange { index: k, dim: self.dim() });
        }
        let mut out = OrthantProblem {
            a: self.a[..k].to_vec(),
            b: self.b[..k].to_vec(),
            sigma: self.sigma.leading_block(k),
            chol: self.chol.leading_block(k),
            mean: self.mean[..k].to_vec(),
            meta: self.meta.clone(),
        };
        out.meta.insert("leading".into(), Value::from(k));
        Ok(out)
    }

    pub fn to_document(&self) -> ProblemDocument {
        ProblemDocument {
            d: self.dim(),
            a: self.a.clone(),
            b: self.b.clone(),
            sigma: self.sigma.rows(),
            mean: self.mean.clone(),
            meta: self.meta.clone(),
            nu: None,
        }
    }

    pub fn from_document(doc: &ProblemDocument) -> Result<Self> {
        if doc.sigma.len() != doc.d {
            return Err(Error::DimensionMismatch {
                expected: doc.d,
                found: doc.sigma.len(),
            });
        }
        let sigma = SymMatrix::from_rows(&doc.sigma)?;
        let mean = if doc.mean.is_empty() { vec![0.0; doc.d] } else { doc.mean.clone() };
        let mut p = OrthantProblem::new(doc.a.clone(), doc.b.clone(), sigma)?.with_mean(mean)?;
        p.meta = doc.meta.clone();
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

/// Serialized problem: `{"d", "a", "b", "sigma", "mean", "meta"}` with
/// infinite bounds written as the strings `"-inf"` / `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub d: usize,
    #[serde(with = "ext_real_vec")]
    pub a: Vec<f64>,
    #[serde(with = "ext_real_vec")]
    pub b: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default)]
    pub meta: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

/// Extended reals as JSON: finite numbers, `"inf"`, `"-inf"`.
pub mod ext_real {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn to_value(x: f64) -> Value {
        if x == f64::INFINITY {
            Value::from("inf")
        } else if x == f64::NEG_INFINITY {
            Value::from("-inf")
        } else {
            Value::from(x)
        }
    }

    pub fn from_value(v: &Value) -> Result<f64, String> {
        match v {
            Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad number {n}")),
            Value::String(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(format!("expected number, \"inf\" or \"-inf\", got {other:?}")),
            },
            other => Err(format!("expected number, got {other}")),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&to_value(*x), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_value(&Value::deserialize(d)?).map_err(D::Error::custom)
    }
}

pub mod ext_real_vec {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let vals: Vec<Value> = xs.iter().map(|&x| super::ext_real::to_value(x)).collect();
        serde::Serialize::serialize(&vals, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Value>::deserialize(d)?
            .iter()
            .map(super::ext_real::from_value)
            .collect::<Result<_, _>>()
            .map_err(D::Error::custom)
    }
}

/// Number of rows of the Cauchy design matrix for `d <= CAUCHY_ROWS`.
pub const CAUCHY_ROWS: usize = 200;

/// Heavy-tailed test problem: `X_ij ~ C(0, 0.01)`, `Σ = XᵗX`,
/// `a_i ~ C(0, 0.01)`, `b = +∞`.
///
/// `X` has `max(d, CAUCHY_ROWS)` rows and is filled column by column from a
/// seeded stream, so for the same seed the problem of dimension `d' < d`
/// is the leading block of the dimension-`d` problem (up to `CAUCHY_ROWS`).
pub fn gen_cauchy_problem(d: usize, seed: u64) -> Result<OrthantProblem> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be >= 1".into()));
    }
    let rows = d.max(CAUCHY_ROWS);
    let cauchy = Cauchy::new(0.0, 0.01).expect("valid scale");
    let mut x_rng = ChaCha8Rng::seed_from_u64(seed);
    x_rng.set_stream(0);
    let mut a_rng = ChaCha8Rng::seed_from_u64(seed);
    a_rng.set_stream(1);
    let x: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..rows).map(|_| cauchy.sample(&mut x_rng)).collect())
        .collect();
    let a: Vec<f64> = (0..d).map(|_| cauchy.sample(&mut a_rng)).collect();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(p, q)| p * q).sum();
            data[i * d + j] = v;
            data[j * d + i] = v;
        }
    }
    let mut sigma = SymMatrix::from_row_major(d, data)?;
    let mut meta = Map::new();
    meta.insert("generator".into(), Value::from("cauchy"));
    meta.insert("seed".into(), Value::from(seed));
    let mut jitter = 1e-10 * sigma.trace() / d as f64;
    let mut attempts = 0;
    while cholesky(&sigma).is_err() {
        if attempts == 8 {
            return Err(Error::InvalidParameter("Cauchy covariance could not be regularized".into()));
        }
        sigma.shift_diagonal(jitter);
        jitter *= 10.0;
        attempts += 1;
        meta.insert("regularized".into(), Value::from(true));
    }
    let mut p = OrthantProblem::new(a, vec![f64::INFINITY; d], sigma)?;
    p.meta = meta;
    Ok(p)
}

/// AR(1) path `x_t = ρ x_{t−1} + σ ε_t` constrained to `[lower, upper]` at
/// every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar1Spec {
    pub horizon: usize,
    pub rho: f64,
    pub upper: f64,
    #[serde(default)]
    pub lower: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    /// Draw `x_1` from the stationary law `N(0, σ²/(1−ρ²))` instead of `N(0, σ²)`.
    #[serde(default)]
    pub stationary_start: bool,
}

fn one() -> f64 {
    1.0
}

impl Ar1Spec {
    pub fn new(horizon: usize, rho: f64, lower: f64, upper: f64) -> Self {
        Self {
            horizon,
            rho,
            upper,
            lower,
            sigma: 1.0,
            stationary_start: false,
        }
    }
}

/// The factor is the exact moving-average map `γ_ts = σ ρ^{t−s}`, so the
/// sequential intervals are `[(a − ρ x_{t−1})/σ, (b − ρ x_{t−1})/σ]`.
pub fn gen_ar1_problem(spec: &Ar1Spec) -> Result<OrthantProblem> {
    let n = spec.horizon;
    if n < 1 {
        return Err(Error::InvalidParameter("AR(1) horizon must be >= 1".into()));
    }
    if !(spec.sigma > 0.0) || !spec.rho.is_finite() {
        return Err(Error::InvalidParameter("AR(1) needs sigma > 0 and finite rho".into()));
    }
    if spec.stationary_start && spec.rho.abs() >= 1.0 {
        return Err(Error::InvalidParameter("stationary start requires |rho| < 1".into()));
    }
    let first_scale = if spec.stationary_start {
        1.0 / (1.0 - spec.rho * spec.rho).sqrt()
    } else {
        1.0
    };
    let mut data = vec![0.0; n * n];
    for t in 0..n {
        for s in 0..=t {
            let mut v = spec.sigma * spec.rho.powi((t - s) as i32);
            if s == 0 {
                v *= first_scale;
            }
            data[t * n + s] = v;
        }
    }
    let chol = LowerTriangular::from_row_major(n, data)?;
    let mut p = OrthantProblem::from_factor(vec![spec.lower; n], vec![spec.upper; n], chol)?;
    p.meta.insert("generator".into(), Value::from("ar1"));
    p.meta.insert("rho".into(), Value::from(spec.rho));
    Ok(p)
}

/// Ranking probability `P(X_p > … > X_1)` for independent
/// `X_j ~ N(β_j, σ²)`, as an orthant problem on the `p − 1` successive
/// differences `D_i = X_{i+1} − X_i` (mean `β_{i+1} − β_i`, covariance
/// `σ²` times the `(2, −1)` tridiagonal matrix). Returned standardized.
pub fn gen_thurstonian(beta: &[f64], sigma: f64) -> Result<OrthantProblem> {
    let p = beta.len();
    if p < 2 {
        return Err(Error::InvalidParameter("Thurstonian model needs p >= 2".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be > 0".into()));
    }
    let d = p - 1;
    let s2 = sigma * sigma;
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[i * d + i] = 2.0 * s2;
        if i + 1 < d {
            data[i * d + i + 1] = -s2;
            data[(i + 1) * d + i] = -s2;
        }
    }
    let mean: Vec<f64> = beta.windows(2).map(|w| w[1] - w[0]).collect();
    let raw = OrthantProblem::new(vec![0.0; d], vec![f64::INFINITY; d], SymMatrix::from_row_major(d, data)?)?
        .with_mean(mean)?;
    let mut out = raw.standardize();
    out.meta.insert("generator".into(), Value::from("thurstonian"));
    out.meta.insert("beta".into(), Value::from(beta.to_vec()));
    Ok(out)
}

/// `p` iid standard normal item means drawn from `seed`.
pub fn random_item_means(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Panel multinomial probit with random effects `α` correlated across
/// alternatives and AR(1)-in-time shocks with choice-correlated
/// innovations: `u_{kt} = α_k + η_{kt}`, `η_{kt} = ρ η_{k,t−1} + ν_{kt}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitPanelSpec {
    pub alternatives: usize,
    pub periods: usize,
    /// Chosen alternative per period (0-based). Drawn uniformly from the
    /// seed when absent.
    #[serde(default)]
    pub choices: Option<Vec<usize>>,
    #[serde(default = "default_alpha_var")]
    pub alpha_var: f64,
    #[serde(default = "default_corr")]
    pub alpha_corr: f64,
    #[serde(default = "one")]
    pub nu_var: f64,
    #[serde(default = "default_corr")]
    pub nu_corr: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_regressors")]
    pub regressors: usize,
    /// Regression coefficients; drawn `N(0, 1)` from the seed when absent.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
}

fn default_alpha_var() -> f64 {
    0.5
}
fn default_corr() -> f64 {
    0.3
}
fn default_rho() -> f64 {
    0.5
}
fn default_regressors() -> usize {
    2
}

impl ProbitPanelSpec {
    pub fn new(alternatives: usize, periods: usize) -> Self {
        Self {
            alternatives,
            periods,
            choices: None,
            alpha_var: default_alpha_var(),
            alpha_corr: default_corr(),
            nu_var: 1.0,
            nu_corr: default_corr(),
            rho: default_rho(),
            regressors: default_regressors(),
            beta: None,
        }
    }
}

/// Builds the `T(J−1)` problem for the utility differences
/// `u_{kt} − u_{j_t t}`, `k ≠ j_t`; the choice is observed iff every
/// difference lies below `V_{j_t t} − V_{kt}` with `V = Xβ`.
pub fn gen_probit_panel(spec: &ProbitPanelSpec, seed: u64) -> Result<OrthantProblem> {
    let (jn, tn) = (spec.alternatives, spec.periods);
    if jn < 2 || tn < 1 {
        return Err(Error::InvalidParameter("probit panel needs J >= 2 and T >= 1".into()));
    }
    let corr_floor = -1.0 / (jn as f64 - 1.0);
    for (name, c) in [("alpha_corr", spec.alpha_corr), ("nu_corr", spec.nu_corr)] {
        if !(c > corr_floor && c < 1.0) {
            return Err(Error::InvalidParameter(format!("{name} must lie in ({corr_floor}, 1)")));
        }
    }
    if !(spec.alpha_var >= 0.0) || !(spec.nu_var > 0.0) || !spec.rho.is_finite() {
        return Err(Error::InvalidParameter("need alpha_var >= 0, nu_var > 0, finite rho".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choices = match &spec.choices {
        Some(c) => {
            if c.len() != tn {
                return Err(Error::DimensionMismatch { expected: tn, found: c.len() });
            }
            if let Some(&bad) = c.iter().find(|&&j| j >= jn) {
                return Err(Error::InvalidParameter(format!(
                    "choice index {bad} out of range for {jn} alternatives"
                )));
            }
            c.clone()
        }
        None => (0..tn).map(|_| rand::Rng::random_range(&mut rng, 0..jn)).collect(),
    };
    let beta = match &spec.beta {
        Some(b) => {
            if b.len() != spec.regressors {
                return Err(Error::DimensionMismatch {
                    expected: spec.regressors,
                    found: b.len(),
                });
            }
            b.clone()
        }
        None => (0..spec.regressors).map(|_| StandardNormal.sample(&mut rng)).collect(),
    };
    // Systematic utilities V_{kt} = Σ_r X_{ktr} β_r.
    let mut v = vec![0.0; tn * jn];
    for t in 0..tn {
        for k in 0..jn {
            v[t * jn + k] = beta
                .iter()
                .map(|bv| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    bv * x
                })
                .sum::<f64>();
        }
    }

    let choice_cov = |var: f64, corr: f64, k: usize, l: usize| if k == l { var } else { var * corr };
    // Cov(η_{kt}, η_{ls}) with η_{k0} = ν_{k0}.
    let eta_time = |t: usize, s: usize| -> f64 {
        (0..=t.min(s))
            .map(|r| spec.rho.powi((t - r) as i32) * spec.rho.powi((s - r) as i32))
            .sum()
    };
    let cov_u = |k: usize, t: usize, l: usize, s: usize| -> f64 {
        choice_cov(spec.alpha_var, spec.alpha_corr, k, l)
            + choice_cov(spec.nu_var, spec.nu_corr, k, l) * eta_time(t, s)
    };

    let chosen = &choices;
    let index: Vec<(usize, usize)> = (0..tn)
        .flat_map(|t| (0..jn).filter(move |&k| k != chosen[t]).map(move |k| (t, k)))
        .collect();
    let d = index.len();
    let mut data = vec![0.0; d * d];
    for (r, &(t, k)) in index.iter().enumerate() {
        let jt = choices[t];
        for (c, &(s, l)) in index.iter().enumerate() {
            let js = choices[s];
            data[r * d + c] = cov_u(k, t, l, s) - cov_u(k, t, js, s) - cov_u(jt, t, l, s) + cov_u(jt, t, js, s);
        }
    }
    let b: Vec<f64> = index
        .iter()
        .map(|&(t, k)| v[t * jn + choices[t]] - v[t * jn + k])
        .collect();
    let sigma = SymMatrix::from_row_major(d, data)?;
    let mut p = OrthantProblem::new(vec![f64::NEG_INFINITY; d], b, sigma)?;
    p.meta.insert("generator".into(), Value::from("probit-panel"));
    p.meta.insert("choices".into(), Value::from(choices));
    p.meta.insert("beta".into(), Value::from(beta));
    p.meta.insert("seed".into(), Value::from(seed));
    Ok(p)
}
