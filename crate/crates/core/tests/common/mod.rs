//! Reference values computed without the library: normal cdf from `libm`,
//! box probabilities and truncated means by nested Gauss-Legendre
//! quadrature, and a plain rejection sampler.
#![allow(dead_code)]

use orthant_core::linalg::SymMatrix;
use orthant_core::moves::{apply_kernel, hmc_step, ConstraintSystem, MoveConfig, MoveKind};
use orthant_core::problem::OrthantProblem;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const INF: f64 = f64::INFINITY;

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `P(lo < N(m, s²) < hi)` and `E[N(m, s²); lo < · < hi]`.
fn normal_piece(m: f64, s: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (al, be) = ((lo - m) / s, (hi - m) / s);
    let mass = if al > 0.0 { cdf(-al) - cdf(-be) } else { cdf(be) - cdf(al) };
    let dens = |z: f64| if z.is_finite() { phi(z) } else { 0.0 };
    (mass.max(0.0), m * mass + s * (dens(al) - dens(be)))
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = n as f64 * (z * q1 - q0) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dq * dq);
                break;
            }
        }
    }
    (x, w)
}

/// Composite rule on `[lo, hi]` with `panels` panels of `order` nodes.
pub fn composite_nodes(lo: f64, hi: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (gx, gw) = gauss_legendre(order);
    let h = (hi - lo) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let c = lo + (p as f64 + 0.5) * h;
        for (x, w) in gx.iter().zip(&gw) {
            out.push((c + 0.5 * h * x, 0.5 * h * w));
        }
    }
    out
}

pub fn integrate<F: Fn(f64) -> f64>(lo: f64, hi: f64, panels: usize, f: F) -> f64 {
    composite_nodes(lo, hi, panels, 20).iter().map(|&(x, w)| w * f(x)).sum()
}

fn clip(m: f64, s: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let (l, h) = (lo.max(m - 12.0 * s), hi.min(m + 12.0 * s));
    (l < h).then_some((l, h))
}

/// Box probability and conditional mean of `N(mean, Σ)`, `d ∈ {1, 2, 3}`,
/// by nested quadrature over the leading coordinates and the closed-form
/// normal piece for the last one.
pub fn box_moments(a: &[f64], b: &[f64], sigma: &[Vec<f64>], mean: &[f64]) -> (f64, Vec<f64>) {
    let d = a.len();
    let panels = if d == 3 { 40 } else { 200 };
    match d {
        1 => {
            let (p, m) = normal_piece(mean[0], sigma[0][0].sqrt(), a[0], b[0]);
            (p, vec![m / p])
        }
        2 => {
            let s1 = sigma[0][0].sqrt();
            let beta = sigma[0][1] / sigma[0][0];
            let s2 = (sigma[1][1] - beta * sigma[0][1]).sqrt();
            let Some((l, h)) = clip(mean[0], s1, a[0], b[0]) else { return (0.0, vec![0.0; 2]) };
            let (mut p, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for (x, w) in composite_nodes(l, h, panels, 20) {
                let dens = phi((x - mean[0]) / s1) / s1;
                let (q, e) = normal_piece(mean[1] + beta * (x - mean[0]), s2, a[1], b[1]);
                p += w * dens * q;
                m1 += w * dens * q * x;
                m2 += w * dens * e;
            }
            (p, vec![m1 / p, m2 / p])
        }
        3 => {
            let s11 = sigma[0][0];
            let s1 = s11.sqrt();
            let b21 = sigma[0][1] / s11;
            let s2 = (sigma[1][1] - b21 * sigma[0][1]).sqrt();
            // Regression of x3 on (x1, x2).
            let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[0][1];
            let inv = [[sigma[1][1] / det, -sigma[0][1] / det], [-sigma[0][1] / det, sigma[0][0] / det]];
            let c = [sigma[2][0], sigma[2][1]];
            let r = [c[0] * inv[0][0] + c[1] * inv[1][0], c[0] * inv[0][1] + c[1] * inv[1][1]];
            let s3 = (sigma[2][2] - r[0] * c[0] - r[1] * c[1]).sqrt();
            let Some((l1, h1)) = clip(mean[0], s1, a[0], b[0]) else { return (0.0, vec![0.0; 3]) };
            let (mut p, mut m) = (0.0, [0.0; 3]);
            for (x1, w1) in composite_nodes(l1, h1, panels, 20) {
                let d1 = phi((x1 - mean[0]) / s1) / s1;
                let cm2 = mean[1] + b21 * (x1 - mean[0]);
                let Some((l2, h2)) = clip(cm2, s2, a[1], b[1]) else { continue };
                for (x2, w2) in composite_nodes(l2, h2, panels, 20) {
                    let dens = d1 * phi((x2 - cm2) / s2) / s2 * w1 * w2;
                    let cm3 = mean[2] + r[0] * (x1 - mean[0]) + r[1] * (x2 - mean[1]);
                    let (q, e) = normal_piece(cm3, s3, a[2], b[2]);
                    p += dens * q;
                    m[0] += dens * q * x1;
                    m[1] += dens * q * x2;
                    m[2] += dens * e;
                }
            }
            (p, m.iter().map(|v| v / p).collect())
        }
        _ => panic!("quadrature oracle supports d <= 3"),
    }
}

pub fn box_probability(a: &[f64], b: &[f64], sigma: &[Vec<f64>]) -> f64 {
    box_moments(a, b, sigma, &vec![0.0; a.len()]).0
}

/// Accepted draws of `N(0, Σ)` restricted to the box, by plain rejection
/// through a hand-rolled Cholesky factor.
pub fn rejection_draws(a: &[f64], b: &[f64], sigma: &[Vec<f64>], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = a.len();
    let l = lower_factor(sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..d).map(|i| (0..=i).map(|k| l[i][k] * z[k]).sum()).collect();
        if y.iter().zip(a.iter().zip(b)).all(|(v, (lo, hi))| lo <= v && v <= hi) {
            out.push(y);
        }
    }
    out
}

pub fn lower_factor(sigma: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = sigma.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (sigma[i][i] - s).sqrt() } else { (sigma[i][j] - s) / l[j][j] };
        }
    }
    l
}

/// Starts `n` independent chains from exact draws of the truncated law on
/// the 3-D box, applies `steps` kernel moves to each and returns the
/// largest |z| over the coordinate means (against quadrature) and second
/// moments (against a fresh rejection sample), plus the largest HMC energy
/// drift seen.
pub fn kernel_invariance(kind: MoveKind, n: usize, steps: usize, seed: u64) -> (f64, f64) {
    let (a, b, s) = box3();
    let p = problem(&a, &b, &s);
    let cs = ConstraintSystem::new(&p, 3).unwrap();
    let l = lower_factor(&s);
    let start = rejection_draws(&a, &b, &s, n, seed);
    let config = MoveConfig::new(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut drift = 0.0f64;
    let moved: Vec<Vec<f64>> = start
        .iter()
        .map(|y| {
            let mut eta = vec![0.0; 3];
            for i in 0..3 {
                let acc: f64 = (0..i).map(|k| l[i][k] * eta[k]).sum();
                eta[i] = (y[i] - acc) / l[i][i];
            }
            for _ in 0..steps {
                match kind {
                    MoveKind::Hmc(h) => {
                        let out = hmc_step(&cs, &mut eta, h, 10_000, &mut rng).unwrap();
                        drift = drift.max(out.max_energy_drift);
                    }
                    _ => {
                        apply_kernel(&cs, &config, &mut eta, &mut rng).unwrap();
                    }
                }
            }
            (0..3).map(|i| (0..=i).map(|k| l[i][k] * eta[k]).sum()).collect()
        })
        .collect();
    let reference = rejection_draws(&a, &b, &s, n, seed.wrapping_add(1));
    let (_, truth) = box_moments(&a, &b, &s, &[0.0; 3]);
    let mut worst = 0.0f64;
    for i in 0..3 {
        let xs: Vec<f64> = moved.iter().map(|y| y[i]).collect();
        let (m, se) = mean_and_se(&xs);
        worst = worst.max(((m - truth[i]) / se).abs());
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let rsq: Vec<f64> = reference.iter().map(|y| y[i] * y[i]).collect();
        let ((m2, se2), (r2, rse2)) = (mean_and_se(&sq), mean_and_se(&rsq));
        worst = worst.max(((m2 - r2) / (se2 * se2 + rse2 * rse2).sqrt()).abs());
    }
    (worst, drift)
}

pub fn problem(a: &[f64], b: &[f64], sigma: &[Vec<f64>]) -> OrthantProblem {
    OrthantProblem::new(a.to_vec(), b.to_vec(), SymMatrix::from_rows(sigma).unwrap()).unwrap()
}

/// Correlated 3-D box used across the suites.
pub fn box3() -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    (
        vec![-0.5, 0.0, -INF],
        vec![1.5, INF, 0.8],
        vec![vec![1.0, 0.5, 0.3], vec![0.5, 1.5, -0.4], vec![0.3, -0.4, 0.8]],
    )
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}
