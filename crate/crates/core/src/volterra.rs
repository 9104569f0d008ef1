//! Delayed and convolution Volterra equations, their comparison checks,
//! super-solution certificates and the decay-of-convolutions measurement.
//!
//! The checks recompute the right-hand side from the candidate with exactly
//! the operations used by the marching schemes. Every coefficient is
//! nonnegative and IEEE rounding is monotone, so a passing upper candidate
//! dominates the marched solution bit for bit, not just up to round-off.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::model::DelayKernel;
use crate::quad;

/// Samples `values[i] = u(start + i dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    pub start: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Tabulated {
    pub fn new(start: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        ensure_finite("start", start)?;
        ensure_finite("dt", dt)?;
        if dt <= 0.0 {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tabulated value {v}")));
        }
        Ok(Self { start, dt, values })
    }

    /// Samples `f` at `start + i dt`, `i = 0..len`.
    pub fn from_fn<F: Fn(f64) -> f64>(start: f64, dt: f64, len: usize, f: F) -> Result<Self> {
        Self::new(start, dt, (0..len).map(|i| f(start + i as f64 * dt)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start + i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.time(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Upper,
    Lower,
}

/// `u(t) = c1 u(t - d) + c2 \int_0^t e^{-lambda (t - s)} u(s - d) ds + f(t)`
/// for `t >= 0`, `u = u0` on `[-d, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayedVolterraProblem {
    pub c1: f64,
    pub c2: f64,
    pub d: f64,
    pub lambda: f64,
    pub dt: f64,
    /// `f(k dt)`, `k = 0..=N`.
    pub f: Vec<f64>,
    /// `u0(-d + j dt)`, `j = 0..m` with `m = d / dt`.
    pub u0: Vec<f64>,
}

impl DelayedVolterraProblem {
    /// Samples `f` on `[0, t_end]` and `u0` on `[-d, 0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fns<F: Fn(f64) -> f64, U: Fn(f64) -> f64>(
        c1: f64,
        c2: f64,
        d: f64,
        lambda: f64,
        dt: f64,
        t_end: f64,
        f: F,
        u0: U,
    ) -> Result<Self> {
        ensure_finite("dt", dt)?;
        ensure_finite("t_end", t_end)?;
        if dt <= 0.0 || t_end < 0.0 {
            return Err(Error::InvalidParameter("dt must be positive and t_end nonnegative".into()));
        }
        let m = delay_steps(d, dt)?;
        let n = (t_end / dt).round() as usize;
        let problem = Self {
            c1,
            c2,
            d,
            lambda,
            dt,
            f: (0..=n).map(|k| f(k as f64 * dt)).collect(),
            u0: (0..m).map(|j| u0(-d + j as f64 * dt)).collect(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("lambda", self.lambda)] {
            ensure_finite(name, v)?;
            if v < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.lambda <= 0.0 {
            return Err(Error::InvalidParameter("lambda must be positive".into()));
        }
        let m = delay_steps(self.d, self.dt)?;
        if self.u0.len() != m {
            return Err(Error::InvalidParameter(format!(
                "u0 needs {m} samples on [-d, 0), got {}",
                self.u0.len()
            )));
        }
        if self.f.is_empty() {
            return Err(Error::InvalidParameter("f needs at least one sample".into()));
        }
        if self.f.iter().chain(&self.u0).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("f or u0".into()));
        }
        Ok(())
    }

    pub fn delay_steps(&self) -> usize {
        self.u0.len()
    }

    pub fn n_steps(&self) -> usize {
        self.f.len() - 1
    }

    /// Right-hand side at every `k >= 0` evaluated on `u`, which holds the
    /// samples on `[-d, T]`. Shared by the marching scheme and the check.
    fn rhs_at(&self, decay: f64, memory: &mut f64, u: &[f64], k: usize) -> f64 {
        // u starts at -d, so u[k] is the sample at t_k - d; the memory
        // integral over [t_{k-1}, t_k] uses its left endpoint
        if k > 0 {
            *memory = decay * (*memory + self.dt * u[k - 1]);
        }
        self.c1 * u[k] + self.c2 * *memory + self.f[k]
    }
}

fn delay_steps(d: f64, dt: f64) -> Result<usize> {
    ensure_finite("d", d)?;
    if d <= 0.0 {
        return Err(Error::InvalidParameter(format!("delay must be positive, got {d}")));
    }
    let ratio = d / dt;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio {
        return Err(Error::InvalidParameter(format!("dt = {dt} does not divide d = {d}")));
    }
    Ok(m as usize)
}

/// Forward marching of a [`DelayedVolterraProblem`]; the result starts at `-d`.
pub fn march_delayed(problem: &DelayedVolterraProblem) -> Result<Tabulated> {
    problem.validate()?;
    let m = problem.delay_steps();
    let n = problem.n_steps();
    let decay = (-problem.lambda * problem.dt).exp();
    let mut u = Vec::with_capacity(m + n + 1);
    u.extend_from_slice(&problem.u0);
    let mut memory = 0.0;
    for k in 0..=n {
        let value = problem.rhs_at(decay, &mut memory, &u, k);
        u.push(value);
    }
    Tabulated::new(-problem.d, problem.dt, u)
}

/// Outcome of a comparison check. `margin` is the smallest slack, positive
/// on the passing side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCheck {
    pub passed: bool,
    pub margin: f64,
}

fn signed_slack(side: Side, candidate: f64, rhs: f64) -> f64 {
    match side {
        Side::Upper => candidate - rhs,
        Side::Lower => rhs - candidate,
    }
}

/// Tests the defining inequalities of an upper or lower solution of the
/// delayed problem at every grid time. `candidate` covers `[-d, T]`.
pub fn check_comparison_discrete(
    problem: &DelayedVolterraProblem,
    candidate: &Tabulated,
    side: Side,
) -> Result<ComparisonCheck> {
    problem.validate()?;
    let m = problem.delay_steps();
    let n = problem.n_steps();
    if candidate.len() != m + n + 1 || (candidate.dt - problem.dt).abs() > 1e-12 * problem.dt {
        return Err(Error::GridMismatch(format!(
            "candidate needs {} samples at spacing {}",
            m + n + 1,
            problem.dt
        )));
    }
    let v = &candidate.values;
    let mut margin = f64::INFINITY;
    for j in 0..m {
        margin = margin.min(signed_slack(side, v[j], problem.u0[j]));
    }
    let decay = (-problem.lambda * problem.dt).exp();
    let mut memory = 0.0;
    for k in 0..=n {
        let rhs = problem.rhs_at(decay, &mut memory, v, k);
        margin = margin.min(signed_slack(side, v[m + k], rhs));
    }
    Ok(ComparisonCheck {
        passed: margin >= 0.0,
        margin,
    })
}

/// `u = k * u + f` on `[0, T]` with samples `k(j dt)` and `f(j dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionVolterraProblem {
    pub k: Vec<f64>,
    pub f: Vec<f64>,
    pub dt: f64,
}

impl ConvolutionVolterraProblem {
    pub fn from_fns<K: Fn(f64) -> f64, F: Fn(f64) -> f64>(k: K, f: F, dt: f64, t_end: f64) -> Result<Self> {
        ensure_finite("dt", dt)?;
        if dt <= 0.0 || !(t_end >= 0.0) {
            return Err(Error::InvalidParameter("dt must be positive and t_end nonnegative".into()));
        }
        let n = (t_end / dt).round() as usize;
        let problem = Self {
            k: (0..=n).map(|j| k(j as f64 * dt)).collect(),
            f: (0..=n).map(|j| f(j as f64 * dt)).collect(),
            dt,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.len() != self.f.len() || self.k.is_empty() {
            return Err(Error::InvalidParameter(
                "kernel and forcing need the same nonzero number of samples".into(),
            ));
        }
        if self.k.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("kernel must be finite and nonnegative".into()));
        }
        if self.f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forcing".into()));
        }
        let sup = self.k.iter().copied().fold(0.0, f64::max);
        if self.dt * sup >= 1.0 {
            return Err(Error::Precondition(format!(
                "dt * sup k = {} must be below 1",
                self.dt * sup
            )));
        }
        Ok(())
    }

    /// `f_n + sum_{j < n} w_j k_{n-j} u_j` and the diagonal factor
    /// `1 - w_n k_0`, in a fixed operation order.
    fn parts_at(&self, u: &[f64], n: usize) -> (f64, f64) {
        if n == 0 {
            return (self.f[0], 1.0);
        }
        let half = 0.5 * self.dt;
        let mut acc = half * self.k[n] * u[0];
        for j in 1..n {
            acc += self.dt * self.k[n - j] * u[j];
        }
        (self.f[n] + acc, 1.0 - half * self.k[0])
    }
}

/// Trapezoid marching, implicit only in the diagonal term.
pub fn march_convolution(problem: &ConvolutionVolterraProblem) -> Result<Tabulated> {
    problem.validate()?;
    let mut u = Vec::with_capacity(problem.f.len());
    for n in 0..problem.f.len() {
        let (num, den) = problem.parts_at(&u, n);
        u.push(num / den);
    }
    Tabulated::new(0.0, problem.dt, u)
}

/// Comparison check for the convolution equation; `candidate` covers `[0, T]`.
pub fn check_comparison_convolution(
    problem: &ConvolutionVolterraProblem,
    candidate: &Tabulated,
    side: Side,
) -> Result<ComparisonCheck> {
    problem.validate()?;
    if candidate.len() != problem.f.len() || (candidate.dt - problem.dt).abs() > 1e-12 * problem.dt {
        return Err(Error::GridMismatch(format!(
            "candidate needs {} samples at spacing {}",
            problem.f.len(),
            problem.dt
        )));
    }
    let v = &candidate.values;
    let mut margin = f64::INFINITY;
    for n in 0..v.len() {
        let (num, den) = problem.parts_at(v, n);
        margin = margin.min(signed_slack(side, v[n], num / den));
    }
    Ok(ComparisonCheck {
        passed: margin >= 0.0,
        margin,
    })
}

/// Slack multiplier applied to the lower bound on `A`.
pub const AMPLITUDE_SLACK: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    DiscreteDelay,
    DistributedExp,
}

/// Constants entering the super-solution inequalities. `mu` overrides the
/// default rate choice when set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateConstants {
    pub ell: f64,
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

impl CertificateConstants {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ell", self.ell),
            ("lambda", self.lambda),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
        ] {
            ensure_finite(name, v)?;
            if v < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.lambda <= 0.0 {
            return Err(Error::InvalidParameter("lambda must be positive".into()));
        }
        for (name, v) in [("d", self.d), ("c_alpha", self.c_alpha), ("beta", self.beta), ("mu", self.mu)] {
            if let Some(v) = v {
                ensure_finite(name, v)?;
                if v <= 0.0 {
                    return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn require(value: Option<f64>, name: &str) -> Result<f64> {
        value.ok_or_else(|| Error::InvalidParameter(format!("certificate needs `{name}`")))
    }
}

/// `v(t) = A e^{-mu t}` or `v(t) = A / (1 + t^mu)`. `a` is absent when the
/// constants are inadmissible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertificateForm {
    Exponential { a: Option<f64>, mu: f64 },
    Algebraic { a: Option<f64>, mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupersolutionCertificate {
    pub form: CertificateForm,
    pub constants_used: CertificateConstants,
    pub admissible: bool,
    /// Largest `ell` the sufficient conditions allow.
    pub ell_bound: f64,
    /// Smallest slack of the defining inequalities over the time net, or
    /// `ell_bound - ell` when inadmissible.
    pub margin: f64,
    /// Numerically computed sup constant of the algebraic construction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c4: Option<f64>,
}

impl SupersolutionCertificate {
    pub fn amplitude(&self) -> Option<f64> {
        match self.form {
            CertificateForm::Exponential { a, .. } | CertificateForm::Algebraic { a, .. } => a,
        }
    }

    pub fn mu(&self) -> f64 {
        match self.form {
            CertificateForm::Exponential { mu, .. } | CertificateForm::Algebraic { mu, .. } => mu,
        }
    }

    /// `v(t)`; `None` when inadmissible.
    pub fn evaluate(&self, t: f64) -> Option<f64> {
        match self.form {
            CertificateForm::Exponential { a, mu } => a.map(|a| a * (-mu * t).exp()),
            CertificateForm::Algebraic { a, mu } => a.map(|a| a / (1.0 + t.max(0.0).powf(mu))),
        }
    }
}

const NET_POINTS: usize = 2000;

/// Exponential super-solution from the discrete-delay or exponential-kernel
/// construction.
pub fn build_exponential_certificate(
    kind: CertificateKind,
    constants: &CertificateConstants,
) -> Result<SupersolutionCertificate> {
    constants.validate()?;
    let CertificateConstants {
        ell,
        lambda,
        c1,
        c2,
        c3,
        ..
    } = *constants;
    let mut used = *constants;
    match kind {
        CertificateKind::DiscreteDelay => {
            let d = CertificateConstants::require(constants.d, "d")?;
            let mu = constants.mu.unwrap_or(if d <= 1.0 { 0.5 * lambda } else { lambda / (d + 1.0) });
            if mu >= lambda {
                return Err(Error::InvalidParameter(format!("mu = {mu} must be below lambda = {lambda}")));
            }
            used.mu = Some(mu);
            let gap = lambda - mu;
            let grow = (mu * d).exp();
            let ell_bound = gap / (grow * (gap + c1));
            if ell >= ell_bound {
                return Ok(inadmissible(CertificateForm::Exponential { a: None, mu }, used, ell_bound));
            }
            let denom = gap - ell * grow * (gap + c1);
            let a = AMPLITUDE_SLACK * c3.max(c2 * gap / denom);
            // A (1 - ell e^{mu d} - C1 ell e^{mu d} (1 - e^{-gap t}) / gap) - C2 e^{-gap t}
            let slack = |decay: f64| {
                a * (1.0 - ell * grow - c1 * ell * grow * (1.0 - decay) / gap) - c2 * decay
            };
            let horizon = 40.0 / gap;
            let mut margin = slack(0.0).min(a - c3);
            for i in 0..=NET_POINTS {
                let t = horizon * i as f64 / NET_POINTS as f64;
                margin = margin.min(slack((-gap * t).exp()));
            }
            Ok(SupersolutionCertificate {
                form: CertificateForm::Exponential { a: Some(a), mu },
                constants_used: used,
                admissible: true,
                ell_bound,
                margin,
                c4: None,
            })
        }
        CertificateKind::DistributedExp => {
            let c_alpha = CertificateConstants::require(constants.c_alpha, "c_alpha")?;
            let beta = CertificateConstants::require(constants.beta, "beta")?;
            if (beta - lambda).abs() <= 1e-12 * beta.max(lambda) {
                return Err(Error::DegenerateConstants(format!(
                    "beta = lambda = {beta} makes the amplitude bound singular"
                )));
            }
            let mu = constants.mu.unwrap_or(0.5 * lambda.min(beta));
            if mu >= lambda.min(beta) {
                return Err(Error::InvalidParameter(format!(
                    "mu = {mu} must be below min(lambda, beta) = {}",
                    lambda.min(beta)
                )));
            }
            used.mu = Some(mu);
            let gl = lambda - mu;
            let gb = beta - mu;
            let ell_bound = gb / c_alpha * gl / (gl + c1);
            if ell >= ell_bound {
                return Ok(inadmissible(CertificateForm::Exponential { a: None, mu }, used, ell_bound));
            }
            let a = AMPLITUDE_SLACK
                * c_alpha
                * (c3 / beta + c2 / (lambda - beta).abs())
                * (gb * gl / (gb * gl - ell * c_alpha * (gl + c1)));
            // closed forms for alpha(s) = C_alpha e^{-beta s}
            let slack = |t: f64| {
                let eb = (-gb * t).exp();
                let el = (-gl * t).exp();
                let g_scaled = c3 * c_alpha / beta * eb + c2 * c_alpha * (el - eb) / (beta - lambda);
                let j1 = c_alpha * (1.0 - eb) / gb;
                let j2 = j1 - c_alpha * (eb - el) / (lambda - beta);
                a - g_scaled - ell * a * j1 - ell * a * c1 / gl * j2
            };
            let horizon = 40.0 / gl.min(gb);
            let mut margin = f64::INFINITY;
            for i in 0..=NET_POINTS {
                margin = margin.min(slack(horizon * i as f64 / NET_POINTS as f64));
            }
            // t -> infinity
            margin = margin.min(a - ell * a * c_alpha / gb * (1.0 + c1 / gl));
            Ok(SupersolutionCertificate {
                form: CertificateForm::Exponential { a: Some(a), mu },
                constants_used: used,
                admissible: true,
                ell_bound,
                margin,
                c4: None,
            })
        }
    }
}

fn inadmissible(form: CertificateForm, used: CertificateConstants, ell_bound: f64) -> SupersolutionCertificate {
    SupersolutionCertificate {
        form,
        constants_used: used,
        admissible: false,
        ell_bound,
        margin: ell_bound - used.ell,
        c4: None,
    }
}

/// Resolution knobs of the algebraic construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicOptions {
    /// Upper end of the time net.
    pub t_max: f64,
    /// Net points on `[0, 20]` and again, log-spaced, on `[20, t_max]`.
    pub net_points: usize,
    /// Panels per half of each convolution integral.
    pub panels: usize,
    /// Step of the table used for the inner exponential convolution.
    pub inner_step: f64,
}

impl Default for AlgebraicOptions {
    fn default() -> Self {
        Self {
            t_max: 1000.0,
            net_points: 400,
            panels: 64,
            inner_step: 0.01,
        }
    }
}

/// The four scaled quantities of the algebraic construction at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicTerms {
    pub t: f64,
    /// `(1 + t^mu) \int_t^\infty alpha`
    pub tail: f64,
    /// `(1 + t^mu) \int_0^t alpha(t - s) e^{-lambda s} ds`
    pub forcing: f64,
    /// `\int_0^t (1 + t^mu) / (1 + (t - s)^mu) alpha(s) ds`
    pub direct: f64,
    /// `(1 + t^mu) \int_0^t alpha(t - s) \int_0^s e^{-lambda (s - s')} / (1 + s'^mu) ds' ds`
    pub nested: f64,
}

impl AlgebraicTerms {
    fn sup(&self) -> f64 {
        self.tail.max(self.forcing).max(self.direct).max(self.nested)
    }
}

/// `\int_0^t h(s) ds` split at `t / 2`, each half integrated in the
/// logarithmic lag variable measured from its nearer endpoint.
fn split_convolution<A: Fn(f64) -> f64, B: Fn(f64) -> f64>(head: A, tail_from_end: B, t: f64, panels: usize) -> f64 {
    let half = 0.5 * t;
    quad::lag_integral(head, 0.0, half, panels) + quad::lag_integral(tail_from_end, 0.0, half, panels)
}

/// Evaluates the algebraic construction terms on the time net.
pub fn algebraic_terms(
    kernel: &DelayKernel,
    lambda: f64,
    mu: f64,
    options: &AlgebraicOptions,
) -> Result<Vec<AlgebraicTerms>> {
    let alpha = kernel
        .density()
        .ok_or_else(|| Error::InvalidParameter("the algebraic construction needs a kernel density".into()))?
        .clone();
    if !(options.t_max > 20.0) || options.net_points < 2 || options.panels == 0 || !(options.inner_step > 0.0) {
        return Err(Error::InvalidParameter(format!("bad algebraic options {options:?}")));
    }
    let weight = |t: f64| 1.0 + t.powf(mu);

    // J(s) = \int_0^s e^{-lambda (s - s')} / (1 + s'^mu) ds' on a uniform table
    let h = options.inner_step;
    let steps = (options.t_max / h).ceil() as usize;
    let decay = (-lambda * h).exp();
    let mut table = Vec::with_capacity(steps + 1);
    table.push(0.0);
    for i in 0..steps {
        let lo = i as f64 * h;
        let hi = lo + h;
        let fresh = quad::gauss4(|s| (-lambda * (hi - s)).exp() / weight(s), lo, hi);
        let prev = table[i];
        table.push(decay * prev + fresh);
    }
    let inner = |s: f64| {
        let x = (s / h).clamp(0.0, steps as f64);
        let i = (x.floor() as usize).min(steps - 1);
        let frac = x - i as f64;
        table[i] * (1.0 - frac) + table[i + 1] * frac
    };

    let mut net: Vec<f64> = (0..options.net_points)
        .map(|i| 20.0 * i as f64 / options.net_points as f64)
        .collect();
    let ratio = (options.t_max / 20.0).ln();
    net.extend((0..=options.net_points).map(|i| 20.0 * (ratio * i as f64 / options.net_points as f64).exp()));

    let far = 1e12f64.max(10.0 * kernel.horizon());
    let panels = options.panels;
    Ok(net
        .into_iter()
        .map(|t| {
            let w = weight(t);
            let tail = w * quad::lag_integral(|s| alpha(s), t, far, 4 * panels);
            let forcing = w * split_convolution(
                |s| alpha(t - s) * (-lambda * s).exp(),
                |x| alpha(x) * (-lambda * (t - x)).exp(),
                t,
                panels,
            );
            let direct = split_convolution(
                |s| w / weight(t - s) * alpha(s),
                |x| w / weight(x) * alpha(t - x),
                t,
                panels,
            );
            let nested = w * split_convolution(|s| alpha(t - s) * inner(s), |x| alpha(x) * inner(t - x), t, panels);
            AlgebraicTerms {
                t,
                tail,
                forcing,
                direct,
                nested,
            }
        })
        .collect())
}

/// Algebraic super-solution `A / (1 + t^{beta - 1})` for a kernel with
/// `alpha(s) <= C_alpha (1 + s)^{-beta}`.
pub fn build_algebraic_certificate(
    constants: &CertificateConstants,
    kernel: &DelayKernel,
    options: &AlgebraicOptions,
) -> Result<SupersolutionCertificate> {
    constants.validate()?;
    let beta = match (constants.beta, kernel.tail_constants()) {
        (Some(b), _) => b,
        (None, Some((_, b))) => b,
        (None, None) => return Err(Error::InvalidParameter("certificate needs `beta`".into())),
    };
    if beta <= 1.0 {
        return Err(Error::DegenerateConstants(format!("beta = {beta} must exceed 1")));
    }
    let mu = beta - 1.0;
    let mut used = *constants;
    used.beta = Some(beta);
    used.mu = Some(mu);
    if used.c_alpha.is_none() {
        used.c_alpha = kernel.tail_constants().map(|c| c.0);
    }
    let terms = algebraic_terms(kernel, constants.lambda, mu, options)?;
    let c4 = terms.iter().map(AlgebraicTerms::sup).fold(0.0, f64::max);
    let CertificateConstants { ell, c1, c2, c3, .. } = *constants;
    let ell_bound = 1.0 / (c4 * (1.0 + c1));
    if ell >= ell_bound {
        let mut cert = inadmissible(CertificateForm::Algebraic { a: None, mu }, used, ell_bound);
        cert.c4 = Some(c4);
        return Ok(cert);
    }
    let a = AMPLITUDE_SLACK * c4 * (c2 + c3) / (1.0 - ell * c4 * (1.0 + c1));
    let margin = terms
        .iter()
        .map(|e| a - c3 * e.tail - c2 * e.forcing - ell * a * e.direct - ell * a * c1 * e.nested)
        .fold(f64::INFINITY, f64::min);
    Ok(SupersolutionCertificate {
        form: CertificateForm::Algebraic { a: Some(a), mu },
        constants_used: used,
        admissible: true,
        ell_bound,
        margin,
        c4: Some(c4),
    })
}

/// Fitted power `p` in `(f * g)(t) ~ t^{-p}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayExponent {
    pub exponent: f64,
    pub r_squared: f64,
    /// False when the log-log fit is too poor to trust (`r^2 < 0.99`).
    pub accepted: bool,
}

/// Trapezoid convolution `h = f * g` fitted on `[T/10, T]` in log-log
/// coordinates. Both inputs start at 0 with a common spacing.
pub fn convolution_decay_exponent(f: &Tabulated, g: &Tabulated, t_end: f64) -> Result<DecayExponent> {
    if f.start != 0.0 || g.start != 0.0 || (f.dt - g.dt).abs() > 1e-12 * f.dt {
        return Err(Error::GridMismatch("f and g need a common grid starting at 0".into()));
    }
    if t_end < 1000.0 {
        return Err(Error::Precondition(format!("t_end = {t_end} must be at least 1000")));
    }
    let dt = f.dt;
    let n_end = (t_end / dt).round() as usize;
    if f.len() <= n_end || g.len() <= n_end {
        return Err(Error::Precondition(format!("samples must cover [0, {t_end}]")));
    }
    let n_lo = ((0.1 * t_end) / dt).round() as usize;
    let samples = 200usize;
    let ratio = (n_end as f64 / n_lo as f64).ln();
    let mut indices: Vec<usize> = (0..=samples)
        .map(|i| (n_lo as f64 * (ratio * i as f64 / samples as f64).exp()).round() as usize)
        .map(|i| i.clamp(n_lo, n_end))
        .collect();
    indices.dedup();

    let mut xs = Vec::with_capacity(indices.len());
    let mut ys = Vec::with_capacity(indices.len());
    for &n in &indices {
        let fv = &f.values;
        let gv = &g.values;
        let mut acc = 0.5 * (fv[n] * gv[0] + fv[0] * gv[n]);
        for j in 1..n {
            acc += fv[n - j] * gv[j];
        }
        let h = acc * dt;
        if !(h > 0.0) {
            return Err(Error::Precondition(format!("convolution is not positive at t = {}", n as f64 * dt)));
        }
        xs.push((n as f64 * dt).ln());
        ys.push(h.ln());
    }
    let line = crate::analysis::linear_regression(&xs, &ys)?;
    Ok(DecayExponent {
        exponent: -line.slope,
        r_squared: line.r_squared,
        accepted: line.r_squared >= 0.99,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delayed(c1: f64, c2: f64, lambda: f64, dt: f64, t_end: f64, f: f64, u0: f64) -> DelayedVolterraProblem {
        DelayedVolterraProblem::from_fns(c1, c2, 1.0, lambda, dt, t_end, |_| f, |_| u0).unwrap()
    }

    #[test]
    fn memoryless_march_returns_forcing() {
        let p = DelayedVolterraProblem::from_fns(0.0, 0.0, 0.5, 1.0, 0.01, 3.0, |t| t.sin(), |_| 4.0).unwrap();
        let u = march_delayed(&p).unwrap();
        assert_eq!(&u.values[50..], &p.f[..]);
    }

    #[test]
    fn pure_delay_recursion() {
        let p = delayed(0.5, 0.0, 1.0, 0.01, 3.0, 1.0, 0.0);
        let u = march_delayed(&p).unwrap();
        for (i, t) in u.times().enumerate() {
            let expected = if t < -1e-9 {
                0.0
            } else if t < 1.0 - 1e-9 {
                1.0
            } else if t < 2.0 - 1e-9 {
                1.5
            } else if t < 3.0 - 1e-9 {
                1.75
            } else {
                1.875
            };
            assert!((u.values[i] - expected).abs() < 1e-14, "t = {t}");
        }
    }

    #[test]
    fn memory_on_first_interval() {
        let dt = 1e-3;
        let p = delayed(0.0, 1.0, 1.0, dt, 1.0, 0.0, 1.0);
        let u = march_delayed(&p).unwrap();
        for (i, t) in u.times().enumerate().skip(1000) {
            assert!((u.values[i] - (1.0 - (-t).exp())).abs() <= 2.0 * dt, "t = {t}");
        }
    }

    #[test]
    fn rejects_delay_off_grid() {
        assert!(DelayedVolterraProblem::from_fns(0.1, 0.1, 1.0, 1.0, 0.3, 2.0, |_| 1.0, |_| 1.0).is_err());
    }

    #[test]
    fn exact_solution_is_both_upper_and_lower() {
        let p = DelayedVolterraProblem::from_fns(0.3, 0.7, 0.8, 1.3, 0.01, 6.0, |t| (-t).exp(), |t| 1.0 + t).unwrap();
        let u = march_delayed(&p).unwrap();
        for side in [Side::Upper, Side::Lower] {
            let c = check_comparison_discrete(&p, &u, side).unwrap();
            assert!(c.passed);
            assert_eq!(c.margin, 0.0);
        }
    }

    #[test]
    fn shifted_solution_without_memory() {
        let p = delayed(0.0, 0.0, 1.0, 0.01, 2.0, 0.3, 0.1);
        let mut v = march_delayed(&p).unwrap();
        v.values.iter_mut().for_each(|x| *x += 0.1);
        assert!(check_comparison_discrete(&p, &v, Side::Upper).unwrap().passed);
        assert!(!check_comparison_discrete(&p, &v, Side::Lower).unwrap().passed);
    }

    #[test]
    fn convolution_with_zero_kernel() {
        let p = ConvolutionVolterraProblem::from_fns(|_| 0.0, |t| t.cos(), 0.01, 2.0).unwrap();
        let u = march_convolution(&p).unwrap();
        assert_eq!(u.values, p.f);
    }

    #[test]
    fn convolution_growth_oracle_and_order() {
        let err = |dt: f64| {
            let p = ConvolutionVolterraProblem::from_fns(|_| 1.0, |_| 1.0, dt, 2.0).unwrap();
            let u = march_convolution(&p).unwrap();
            u.times()
                .zip(&u.values)
                .map(|(t, v)| ((v - t.exp()) / t.exp()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(0.02), err(0.01), err(0.005));
        assert!(e1 < 1e-3);
        let order = ((e1 / e2).log2() + (e2 / e3).log2()) / 2.0;
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn convolution_with_exponential_kernel() {
        let p = ConvolutionVolterraProblem::from_fns(|s| (-s).exp(), |_| 1.0, 0.01, 5.0).unwrap();
        let u = march_convolution(&p).unwrap();
        for (t, v) in u.times().zip(&u.values) {
            assert!((v - (1.0 + t)).abs() < 1e-3, "t = {t}");
        }
    }

    #[test]
    fn convolution_rejects_large_kernel() {
        assert!(matches!(
            ConvolutionVolterraProblem::from_fns(|_| 200.0, |_| 1.0, 0.01, 1.0),
            Err(Error::Precondition(_))
        ));
    }

    fn delay_constants(ell: f64, d: f64, lambda: f64, c1: f64) -> CertificateConstants {
        CertificateConstants {
            ell,
            lambda,
            c1,
            c2: 0.4,
            c3: 0.3,
            d: Some(d),
            ..Default::default()
        }
    }

    #[test]
    fn uncoupled_certificate() {
        let cert = build_exponential_certificate(CertificateKind::DiscreteDelay, &delay_constants(0.0, 2.0, 1.5, 3.0))
            .unwrap();
        assert!(cert.admissible);
        assert!((cert.amplitude().unwrap() - 1.01 * 0.4).abs() < 1e-15);
        assert!(cert.margin >= 0.0);
        assert!((cert.mu() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn delay_bound_matches_formula() {
        let cert = build_exponential_certificate(CertificateKind::DiscreteDelay, &delay_constants(0.05, 1.0, 1.0, 2.0))
            .unwrap();
        let expected = (-0.5f64).exp() * 0.5 / 2.5;
        assert!((cert.ell_bound - expected).abs() < 1e-14);
        assert!((cert.ell_bound - 0.1213).abs() < 1e-4);
        let bad = build_exponential_certificate(CertificateKind::DiscreteDelay, &delay_constants(0.2, 1.0, 1.0, 2.0))
            .unwrap();
        assert!(!bad.admissible);
        assert!(bad.margin < 0.0);
        assert!(bad.amplitude().is_none());
    }

    #[test]
    fn certificate_passes_discrete_check() {
        let k = delay_constants(0.1, 1.0, 1.0, 2.0);
        let cert = build_exponential_certificate(CertificateKind::DiscreteDelay, &k).unwrap();
        assert!(cert.admissible);
        let dt = 1e-3;
        let p = DelayedVolterraProblem::from_fns(k.ell, k.c1 * k.ell, 1.0, k.lambda, dt, 30.0, |t| k.c2 * (-k.lambda * t).exp(), |_| k.c3)
            .unwrap();
        let v = Tabulated::from_fn(-1.0, dt, p.delay_steps() + p.n_steps() + 1, |t| cert.evaluate(t).unwrap()).unwrap();
        let check = check_comparison_discrete(&p, &v, Side::Upper).unwrap();
        assert!(check.passed, "{check:?}");
    }

    #[test]
    fn distributed_certificate_rejects_equal_rates() {
        let k = CertificateConstants {
            ell: 0.01,
            lambda: 1.0,
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            c_alpha: Some(1.0),
            beta: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            build_exponential_certificate(CertificateKind::DistributedExp, &k),
            Err(Error::DegenerateConstants(_))
        ));
    }

    #[test]
    fn distributed_certificate_is_an_upper_solution() {
        let (lambda, beta, c_alpha, c1) = (0.8, 1.5, 1.5, 1.0);
        let k = CertificateConstants {
            ell: 0.1,
            lambda,
            c1,
            c2: 0.5,
            c3: 0.2,
            c_alpha: Some(c_alpha),
            beta: Some(beta),
            ..Default::default()
        };
        let cert = build_exponential_certificate(CertificateKind::DistributedExp, &k).unwrap();
        assert!(cert.admissible && cert.margin >= 0.0, "{cert:?}");
        let ell = k.ell;
        let kernel = move |s: f64| {
            let alpha = c_alpha * (-beta * s).exp();
            let smoothed = c_alpha * ((-lambda * s).exp() - (-beta * s).exp()) / (beta - lambda);
            ell * alpha + c1 * ell * smoothed
        };
        let forcing = move |t: f64| {
            0.2 * c_alpha / beta * (-beta * t).exp()
                + 0.5 * c_alpha * ((-lambda * t).exp() - (-beta * t).exp()) / (beta - lambda)
        };
        let p = ConvolutionVolterraProblem::from_fns(kernel, forcing, 0.01, 30.0).unwrap();
        let v = Tabulated::from_fn(0.0, 0.01, p.f.len(), |t| cert.evaluate(t).unwrap()).unwrap();
        assert!(check_comparison_convolution(&p, &v, Side::Upper).unwrap().passed);
    }

    fn algebraic_kernel() -> DelayKernel {
        DelayKernel::algebraic(3.0, 1e-12).unwrap()
    }

    #[test]
    fn algebraic_certificate_without_coupling() {
        let k = CertificateConstants {
            ell: 0.0,
            lambda: 0.5,
            c1: 1.0,
            c2: 0.3,
            c3: 0.2,
            ..Default::default()
        };
        let cert = build_algebraic_certificate(&k, &algebraic_kernel(), &AlgebraicOptions::default()).unwrap();
        let c4 = cert.c4.unwrap();
        assert!(cert.admissible);
        assert!((cert.amplitude().unwrap() - 1.01 * c4 * 0.5).abs() < 1e-12);
        assert!((cert.mu() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn algebraic_sup_constant_is_refinement_stable() {
        let coarse = AlgebraicOptions::default();
        let fine = AlgebraicOptions {
            net_points: 800,
            panels: 128,
            inner_step: 0.005,
            ..coarse
        };
        let sup = |o: &AlgebraicOptions| {
            algebraic_terms(&algebraic_kernel(), 0.5, 2.0, o)
                .unwrap()
                .iter()
                .map(AlgebraicTerms::sup)
                .fold(0.0, f64::max)
        };
        let (a, b) = (sup(&coarse), sup(&fine));
        assert!(((a - b) / b).abs() < 0.01, "{a} {b}");
    }

    #[test]
    fn algebraic_terms_match_closed_forms() {
        // tail: (1 + t^2) / (1 + t)^2 for alpha = 2 (1 + s)^{-3}
        let terms = algebraic_terms(&algebraic_kernel(), 0.5, 2.0, &AlgebraicOptions::default()).unwrap();
        for e in terms.iter().step_by(37) {
            let expected = (1.0 + e.t * e.t) / (1.0 + e.t).powi(2);
            assert!((e.tail - expected).abs() < 1e-8 * expected.max(1.0), "t = {}", e.t);
        }
        assert_eq!(terms[0].direct, 0.0);
    }

    #[test]
    fn algebraic_certificate_is_an_upper_solution() {
        let kernel = algebraic_kernel();
        let alpha = |s: f64| 2.0 / (1.0 + s).powi(3);
        let (lambda, c1, c2, c3) = (0.5, 1.0, 0.3, 0.2);
        let k = CertificateConstants {
            ell: 0.05,
            lambda,
            c1,
            c2,
            c3,
            ..Default::default()
        };
        let cert = build_algebraic_certificate(&k, &kernel, &AlgebraicOptions::default()).unwrap();
        assert!(cert.admissible && cert.margin >= 0.0, "{cert:?}");
        let dt = 0.02;
        let t_end = 60.0;
        // kernel ell alpha + C1 ell (alpha * e^{-lambda .}) and forcing g, by fine quadrature
        let smoothed = |s: f64| quad::composite_gauss4(|x| alpha(x) * (-lambda * (s - x)).exp(), 0.0, s, 200);
        let p = ConvolutionVolterraProblem::from_fns(
            |s| k.ell * alpha(s) + c1 * k.ell * smoothed(s),
            |t| c3 / (1.0 + t).powi(2) + c2 * smoothed(t),
            dt,
            t_end,
        )
        .unwrap();
        let v = Tabulated::from_fn(0.0, dt, p.f.len(), |t| cert.evaluate(t).unwrap()).unwrap();
        let check = check_comparison_convolution(&p, &v, Side::Upper).unwrap();
        assert!(check.passed, "{check:?}");
    }

    #[test]
    fn algebraic_certificate_needs_integrable_tail() {
        let k = CertificateConstants {
            ell: 0.0,
            lambda: 0.5,
            c1: 1.0,
            c2: 0.3,
            c3: 0.2,
            beta: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            build_algebraic_certificate(&k, &algebraic_kernel(), &AlgebraicOptions::default()),
            Err(Error::DegenerateConstants(_))
        ));
    }

    /// Exact `(f * f)(t)` for `f = (1 + t)^{-2}` by partial fractions.
    fn self_convolution_oracle(t: f64) -> f64 {
        let a = 2.0 + t;
        (2.0 * (1.0 - 1.0 / (a - 1.0)) + 4.0 / a * (a - 1.0).ln()) / (a * a)
    }

    fn power(p: f64) -> impl Fn(f64) -> f64 {
        move |t| (1.0 + t).powf(-p)
    }

    #[test]
    fn decay_exponent_of_self_convolution_matches_oracle() {
        let dt = 0.01;
        let n = 100_001;
        let f = Tabulated::from_fn(0.0, dt, n, power(2.0)).unwrap();
        let fit = convolution_decay_exponent(&f, &f, 1000.0).unwrap();
        let xs: Vec<f64> = (0..=200).map(|i| (100.0f64 * 10f64.powf(i as f64 / 200.0)).ln()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| self_convolution_oracle(x.exp()).ln()).collect();
        let oracle = crate::analysis::linear_regression(&xs, &ys).unwrap();
        assert!((fit.exponent + oracle.slope).abs() < 0.01, "{} vs {}", fit.exponent, -oracle.slope);
        assert!(fit.accepted);
    }

    #[test]
    fn decay_exponent_respects_the_convolution_bound() {
        let dt = 0.01;
        let n = 100_001;
        let cases: [(Box<dyn Fn(f64) -> f64>, Box<dyn Fn(f64) -> f64>, f64); 3] = [
            (Box::new(power(2.0)), Box::new(power(2.0)), 1.0),
            (Box::new(power(1.5)), Box::new(power(3.0)), 1.5),
            (Box::new(|t: f64| (-t).exp()), Box::new(power(2.0)), 1.0),
        ];
        for (f, g, bound) in cases {
            let f = Tabulated::from_fn(0.0, dt, n, f).unwrap();
            let g = Tabulated::from_fn(0.0, dt, n, g).unwrap();
            let fit = convolution_decay_exponent(&f, &g, 1000.0).unwrap();
            assert!(fit.accepted);
            assert!(fit.exponent >= bound - 0.15, "{} < {bound}", fit.exponent);
        }
    }

    #[test]
    fn decay_exponent_needs_long_window() {
        let f = Tabulated::from_fn(0.0, 0.1, 1001, power(2.0)).unwrap();
        assert!(convolution_decay_exponent(&f, &f, 100.0).is_err());
    }
}
