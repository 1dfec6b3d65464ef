mod common;

use common::{box_probability, integrate, mean_and_se, problem, INF};
use orthant_core::estimators::{derive_seed, Method, RunConfig};
use orthant_core::student::{estimate_student, smc_student, StudentOptions, StudentOrthantProblem};

fn chi2_density(u: f64, nu: f64) -> f64 {
    let h = 0.5 * nu;
    ((h - 1.0) * u.ln() - 0.5 * u - h * std::f64::consts::LN_2 - libm::lgamma(h)).exp()
}

/// Student probability of a box by integrating the Gaussian box
/// probability (bounds scaled by `√(u/ν)`) against the χ²_ν law of `u`.
fn student_box(a: &[f64], b: &[f64], s: &[Vec<f64>], nu: f64) -> f64 {
    let hi = nu + 40.0 * (2.0 * nu).sqrt() + 60.0;
    // Substitute u = v² to tame the u^{ν/2 - 1} behaviour at the origin.
    integrate(0.0, hi.sqrt(), 200, |v| {
        if v <= 0.0 {
            return 0.0;
        }
        let u = v * v;
        let c = (u / nu).sqrt();
        let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
        2.0 * v * chi2_density(u, nu) * box_probability(&sa, &sb, s)
    })
}

fn replicate(sp: &StudentOrthantProblem, method: Method, particles: usize, reps: usize) -> (f64, f64) {
    let est: Vec<f64> = (0..reps)
        .map(|r| {
            let cfg = RunConfig::new(particles, derive_seed(23, r as u64)).with_timing(false);
            estimate_student(sp, method, &cfg, StudentOptions::default()).unwrap().probability()
        })
        .collect();
    mean_and_se(&est)
}

#[test]
fn quadrature_oracle_matches_closed_form_cdf() {
    // ν = 3: F(t) = 1/2 + (1/π)[t / (√3 (1 + t²/3)) + atan(t/√3)].
    let t: f64 = 1.0;
    let closed = 0.5 - (t / (3f64.sqrt() * (1.0 + t * t / 3.0)) + (t / 3f64.sqrt()).atan()) / std::f64::consts::PI;
    assert!((closed - 0.19550110947788532).abs() < 1e-15);
    let q = student_box(&[1.0], &[INF], &[vec![1.0]], 3.0);
    assert!((q - closed).abs() < 1e-9, "{q} vs {closed}");
}

#[test]
fn univariate_tail_matches_student_cdf() {
    let truth = 0.19550110947788532;
    let sp = StudentOrthantProblem::new(problem(&[1.0], &[INF], &[vec![1.0]]), 3.0).unwrap();
    for method in [Method::Ghk, Method::Pf, Method::Smc] {
        let (m, se) = replicate(&sp, method, 500, 400);
        assert!((m - truth).abs() < 3.0 * se, "{method}: {m} ± {se}");
    }
}

#[test]
fn large_nu_recovers_the_gaussian_quadrant() {
    let sp = StudentOrthantProblem::new(problem(&[0.0, 0.0], &[INF, INF], &[vec![1.0, 0.5], vec![0.5, 1.0]]), 1e6).unwrap();
    let (m, se) = replicate(&sp, Method::Smc, 2000, 40);
    assert!((m - 1.0 / 3.0).abs() < 3.0 * se.max(1e-12), "{m} ± {se}");
}

#[test]
fn bivariate_box_matches_mixture_quadrature() {
    let (a, b) = ([-0.5, 0.3], [1.0, INF]);
    let s = vec![vec![1.0, -0.3], vec![-0.3, 2.0]];
    let nu = 4.0;
    let truth = student_box(&a, &b, &s, nu);
    let sp = StudentOrthantProblem::new(problem(&a, &b, &s), nu).unwrap();
    for method in [Method::Ghk, Method::Smc] {
        let (m, se) = replicate(&sp, method, 400, 200);
        assert!((m - truth).abs() < 4.0 * se, "{method}: {m} ± {se} vs {truth}");
    }
}

#[test]
fn mixing_variable_follows_its_posterior() {
    // Given X > 1 with ν = 3, u has density ∝ χ²_3(u) · Φ̄(√(u/3)).
    let nu = 3.0;
    let tail = |u: f64| 0.5 * libm::erfc((u / nu).sqrt() / std::f64::consts::SQRT_2);
    let z = integrate(0.0, 80.0, 400, |u| chi2_density(u, nu) * tail(u));
    let mean_u = integrate(0.0, 80.0, 400, |u| u * chi2_density(u, nu) * tail(u)) / z;
    let sp = StudentOrthantProblem::new(problem(&[1.0], &[INF], &[vec![1.0]]), nu).unwrap();
    let means: Vec<f64> = (0..100)
        .map(|r| {
            let cfg = RunConfig::new(2000, derive_seed(5, r)).with_timing(false);
            let out = smc_student(&sp, &cfg, StudentOptions::default()).unwrap();
            let s = &out.sample;
            let mix = s.mixing.as_ref().unwrap();
            let top = s.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.log_weights.iter().map(|l| (l - top).exp()).collect();
            w.iter().zip(mix).map(|(w, u)| w * u).sum::<f64>() / w.iter().sum::<f64>()
        })
        .collect();
    let (m, se) = mean_and_se(&means);
    assert!((m - mean_u).abs() < 4.0 * se + 1e-3, "{m} ± {se} vs {mean_u}");
}
