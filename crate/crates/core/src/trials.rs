//! Seeded randomized trials of the comparison checks and certificates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volterra::{
    build_exponential_certificate, check_comparison_convolution, check_comparison_discrete, march_convolution,
    march_delayed, CertificateConstants, CertificateKind, ConvolutionVolterraProblem, DelayedVolterraProblem, Side,
    SupersolutionCertificate, Tabulated,
};

/// Counts from a batch of comparison trials. A violation is a candidate that
/// passed the check on one side but is not ordered against the solution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTrialReport {
    pub problems: usize,
    pub candidates: usize,
    pub upper_passed: usize,
    pub lower_passed: usize,
    pub violations: usize,
}

impl ComparisonTrialReport {
    fn record(&mut self, side: Side, passed: bool, ordered: bool) {
        self.candidates += 1;
        if passed {
            match side {
                Side::Upper => self.upper_passed += 1,
                Side::Lower => self.lower_passed += 1,
            }
            if !ordered {
                self.violations += 1;
            }
        }
    }
}

fn ordered(side: Side, candidate: &[f64], solution: &[f64]) -> bool {
    candidate.iter().zip(solution).all(|(v, u)| match side {
        Side::Upper => v >= u,
        Side::Lower => v <= u,
    })
}

/// Smooth random signal `a0 + a1 sin(w t + p) + a2 e^{-b t}`.
fn random_signal(rng: &mut ChaCha8Rng, scale: f64) -> impl Fn(f64) -> f64 {
    let a0 = rng.gen_range(-scale..scale);
    let a1 = rng.gen_range(0.0..scale);
    let w = rng.gen_range(0.1..5.0);
    let p = rng.gen_range(0.0..std::f64::consts::TAU);
    let a2 = rng.gen_range(-scale..scale);
    let b = rng.gen_range(0.0..2.0);
    move |t| a0 + a1 * (w * t + p).sin() + a2 * (-b * t).exp()
}

/// Nonnegative perturbation: zero, constant, sparse spikes or dense noise.
fn perturbation(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let size = 10f64.powf(rng.gen_range(-12.0..0.0));
    match rng.gen_range(0..4) {
        0 => vec![0.0; len],
        1 => vec![size; len],
        2 => (0..len)
            .map(|_| if rng.gen_bool(0.05) { rng.gen_range(0.0..size) } else { 0.0 })
            .collect(),
        _ => (0..len).map(|_| rng.gen_range(0.0..size)).collect(),
    }
}

fn shifted(values: &[f64], delta: &[f64], side: Side) -> Vec<f64> {
    values
        .iter()
        .zip(delta)
        .map(|(v, d)| match side {
            Side::Upper => v + d,
            Side::Lower => v - d,
        })
        .collect()
}

fn random_delayed_problem(rng: &mut ChaCha8Rng) -> Result<DelayedVolterraProblem> {
    let dt = [0.01, 0.02, 0.05][rng.gen_range(0..3)];
    let m = rng.gen_range(2..60);
    let d = m as f64 * dt;
    let t_end = rng.gen_range(1.0..8.0);
    DelayedVolterraProblem::from_fns(
        rng.gen_range(0.0..0.95),
        rng.gen_range(0.0..3.0),
        d,
        rng.gen_range(0.05..3.0),
        dt,
        t_end,
        random_signal(rng, 2.0),
        random_signal(rng, 2.0),
    )
}

/// Random delayed problems; candidates are solutions of problems with
/// shifted data plus random one-sided perturbations.
pub fn delayed_comparison_trials(seed: u64, problems: usize, candidates_per_side: usize) -> Result<ComparisonTrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ComparisonTrialReport::default();
    for _ in 0..problems {
        let problem = random_delayed_problem(&mut rng)?;
        let solution = march_delayed(&problem)?;
        report.problems += 1;
        for side in [Side::Upper, Side::Lower] {
            for _ in 0..candidates_per_side {
                let mut moved = problem.clone();
                let df = perturbation(&mut rng, moved.f.len());
                let du = perturbation(&mut rng, moved.u0.len());
                moved.f = shifted(&moved.f, &df, side);
                moved.u0 = shifted(&moved.u0, &du, side);
                let base = march_delayed(&moved)?;
                let extra = perturbation(&mut rng, base.len());
                let candidate = Tabulated::new(base.start, base.dt, shifted(&base.values, &extra, side))?;
                let check = check_comparison_discrete(&problem, &candidate, side)?;
                report.record(side, check.passed, ordered(side, &candidate.values, &solution.values));
            }
        }
    }
    Ok(report)
}

fn random_convolution_problem(rng: &mut ChaCha8Rng) -> Result<ConvolutionVolterraProblem> {
    let dt = [0.01, 0.02, 0.05][rng.gen_range(0..3)];
    let t_end = rng.gen_range(1.0..8.0);
    let a = rng.gen_range(0.0..3.0);
    let b = rng.gen_range(0.0..3.0);
    let c = rng.gen_range(0.0..2.0);
    let p = rng.gen_range(1.1..4.0);
    let w = rng.gen_range(0.0..6.0);
    let kernel = move |s: f64| a * (-b * s).exp() + c * (1.0 + s).powf(-p) * (0.5 + 0.5 * (w * s).cos());
    ConvolutionVolterraProblem::from_fns(kernel, random_signal(rng, 2.0), dt, t_end)
}

/// Random convolution problems with nonnegative kernels.
pub fn convolution_comparison_trials(
    seed: u64,
    problems: usize,
    candidates_per_side: usize,
) -> Result<ComparisonTrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ComparisonTrialReport::default();
    for _ in 0..problems {
        let problem = random_convolution_problem(&mut rng)?;
        let solution = march_convolution(&problem)?;
        report.problems += 1;
        for side in [Side::Upper, Side::Lower] {
            for _ in 0..candidates_per_side {
                let mut moved = problem.clone();
                let df = perturbation(&mut rng, moved.f.len());
                moved.f = shifted(&moved.f, &df, side);
                let base = march_convolution(&moved)?;
                let extra = perturbation(&mut rng, base.len());
                let candidate = Tabulated::new(0.0, base.dt, shifted(&base.values, &extra, side))?;
                let check = check_comparison_convolution(&problem, &candidate, side)?;
                report.record(side, check.passed, ordered(side, &candidate.values, &solution.values));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateTrial {
    pub certificate: SupersolutionCertificate,
    /// Result of the discrete upper-solution check, when admissible.
    pub check_passed: Option<bool>,
    pub check_margin: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateTrialReport {
    pub admissible: usize,
    pub passed: usize,
    pub min_margin: f64,
    pub inadmissible: Vec<CertificateConstants>,
    pub trials: Vec<CertificateTrial>,
}

/// Draws discrete-delay constants until `admissible` admissible certificates
/// have been checked on their matching delayed problem
/// (`c1 = ell`, `c2 = C1 ell`, `f = C2 e^{-lambda t}`, `u0 = C3`). About one
/// draw in ten lands above the `ell` bound and is reported as inadmissible.
pub fn exponential_certificate_trials(seed: u64, admissible: usize, t_end: f64) -> Result<CertificateTrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CertificateTrialReport {
        min_margin: f64::INFINITY,
        ..Default::default()
    };
    while report.admissible < admissible {
        let d: f64 = rng.gen_range(0.2..3.0);
        let lambda: f64 = rng.gen_range(0.2..2.0);
        let c1: f64 = rng.gen_range(0.1..5.0);
        let mu = if d <= 1.0 { 0.5 * lambda } else { lambda / (d + 1.0) };
        let bound = (lambda - mu) / ((mu * d).exp() * (lambda - mu + c1));
        let constants = CertificateConstants {
            ell: rng.gen_range(0.0..1.1) * bound,
            lambda,
            c1,
            c2: rng.gen_range(0.01..2.0),
            c3: rng.gen_range(0.01..2.0),
            d: Some(d),
            ..Default::default()
        };
        let certificate = build_exponential_certificate(CertificateKind::DiscreteDelay, &constants)?;
        if !certificate.admissible {
            report.inadmissible.push(constants);
            report.trials.push(CertificateTrial {
                certificate,
                check_passed: None,
                check_margin: None,
            });
            continue;
        }
        // a step that divides d, close to 1e-3
        let steps = (d / 1e-3).round().max(1.0);
        let dt = d / steps;
        let c = constants;
        let problem = DelayedVolterraProblem::from_fns(
            c.ell,
            c.c1 * c.ell,
            d,
            lambda,
            dt,
            t_end,
            |t| c.c2 * (-lambda * t).exp(),
            |_| c.c3,
        )?;
        let len = problem.delay_steps() + problem.n_steps() + 1;
        let a = certificate.amplitude().expect("admissible certificates carry A");
        let mu = certificate.mu();
        let candidate = Tabulated::from_fn(-d, dt, len, |t| a * (-mu * t).exp())?;
        let check = check_comparison_discrete(&problem, &candidate, Side::Upper)?;
        report.admissible += 1;
        if check.passed {
            report.passed += 1;
        }
        report.min_margin = report.min_margin.min(check.margin);
        report.trials.push(CertificateTrial {
            certificate,
            check_passed: Some(check.passed),
            check_margin: Some(check.margin),
        });
    }
    Ok(report)
}
