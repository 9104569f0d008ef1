//! Time stepping for the delayed elapsed-time equation.
//!
//! The step size always equals the age cell width, so transport is an exact
//! shift by one cell. Within a step the firing coefficient is frozen at the
//! current activity and treated as piecewise constant per cell; the loss
//! factors are chosen so that mass is conserved and the discrete stationary
//! profile of the frozen coefficient is reproduced exactly.

use serde::{Deserialize, Serialize};

use crate::analysis::tv_distance;
use crate::error::{Error, Result};
use crate::model::{AgeDensity, AgeGrid, DelayKernel, Equilibrium, FiringCoefficient, HistoryFunction};
use crate::quad::{self, phi1, KahanSum};

/// Residual tolerance of the instantaneous-coupling fixed point.
pub const RATE_TOL: f64 = 1e-12;
/// Iteration cap of the instantaneous-coupling fixed point.
pub const RATE_MAX_ITER: usize = 10_000;
/// Panels used for the prescribed-past part of a distributed activity.
pub const PAST_PANELS: usize = 64;

const ACTIVITY_TOL: f64 = 1e-14;
const ACTIVITY_MAX_ITER: usize = 100;

/// How the activity `X` is formed from the firing-rate history.
#[derive(Debug, Clone)]
pub enum Variant {
    /// `X(t) = r(t)`.
    Instantaneous,
    /// `X(t) = r(t - d)`.
    DiscreteDelay { d: f64 },
    /// `X(t) = \int_0^\infty alpha(s) r(t - s) ds`.
    DistributedDelay { kernel: DelayKernel },
    /// `X` frozen at `r_bar`: the linear equation.
    LinearFrozen { r_bar: f64 },
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub variant: Variant,
    pub grid: AgeGrid,
    pub t_end: f64,
    pub record_every: usize,
    /// Reference state for the `tv` column, if any.
    pub reference: Option<Equilibrium>,
}

impl SimulationConfig {
    pub fn new(variant: Variant, grid: AgeGrid, t_end: f64, record_every: usize) -> Result<Self> {
        let cfg = Self {
            variant,
            grid,
            t_end,
            record_every,
            reference: None,
        };
        cfg.n_steps()?;
        Ok(cfg)
    }

    pub fn with_reference(mut self, reference: Equilibrium) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn dt(&self) -> f64 {
        self.grid.delta()
    }

    /// Number of steps `t_end / dt`, which must be an integer.
    pub fn n_steps(&self) -> Result<usize> {
        if !self.t_end.is_finite() || self.t_end <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "t_end must be positive and finite, got {}",
                self.t_end
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        let ratio = self.t_end / self.dt();
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 * ratio.max(1.0) || n < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "t_end = {} is not a multiple of dt = {}",
                self.t_end,
                self.dt()
            )));
        }
        Ok(n as usize)
    }
}

/// Recorded time series of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub r_series: Vec<f64>,
    pub x_series: Vec<f64>,
    pub mass_series: Vec<f64>,
    pub tv_series: Option<Vec<f64>>,
    pub final_density: AgeDensity,
    pub warnings: Vec<String>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-step loss factors of the transport scheme, cached between steps while
/// the activity is unchanged.
#[derive(Debug, Default, Clone)]
struct TransportFactors {
    keep: Vec<f64>,
    loss: Vec<f64>,
}

impl TransportFactors {
    fn fill(&mut self, profile: &[f64], delta: f64) {
        let n = profile.len();
        self.keep.clear();
        self.loss.clear();
        let mut cached: Option<(f64, f64, f64, f64)> = None;
        for i in 0..n {
            // factor applied to cell i as it moves to i + 1 (or stays, for the last cell)
            let (a, b) = if i + 1 < n {
                (profile[i], profile[i + 1])
            } else {
                (profile[i], profile[i])
            };
            let (keep, loss) = match cached {
                Some((ca, cb, k, l)) if ca == a && cb == b => (k, l),
                _ => {
                    let ln_k = if a == b {
                        -a * delta
                    } else {
                        -a * delta + phi1(b * delta).ln() - phi1(a * delta).ln()
                    };
                    let pair = (ln_k.exp(), -ln_k.exp_m1());
                    cached = Some((a, b, pair.0, pair.1));
                    pair
                }
            };
            self.keep.push(keep);
            self.loss.push(loss);
        }
    }
}

fn transport_with(cells: &[f64], factors: &TransportFactors, delta: f64, out: &mut Vec<f64>) -> f64 {
    let n = cells.len();
    out.clear();
    out.resize(n, 0.0);
    let mut fired = KahanSum::default();
    for i in 0..n {
        fired.add(cells[i] * delta * factors.loss[i]);
    }
    for i in 0..n - 1 {
        out[i + 1] = cells[i] * factors.keep[i];
    }
    out[n - 1] += cells[n - 1] * factors.keep[n - 1];
    let fired = fired.total();
    out[0] += fired / delta;
    fired
}

/// Advances the density by one step of size `dt` (which must equal the cell
/// width) with the coefficient frozen at activity `x`. Returns the new density
/// and the mass that fired during the step.
pub fn step_transport(
    n: &AgeDensity,
    s: &FiringCoefficient,
    x: f64,
    dt: f64,
) -> Result<(AgeDensity, f64)> {
    let grid = *n.grid();
    if (dt - grid.delta()).abs() > 1e-12 * grid.delta() {
        return Err(Error::InvalidParameter(format!(
            "step size {dt} must equal the cell width {}",
            grid.delta()
        )));
    }
    let profile = s.frozen_profile(&grid, x);
    let mut factors = TransportFactors::default();
    factors.fill(&profile, grid.delta());
    let mut out = Vec::with_capacity(grid.n_cells());
    let fired = transport_with(n.cells(), &factors, grid.delta(), &mut out);
    if out.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("density after transport".into()));
    }
    Ok((AgeDensity::new(grid, out)?, fired))
}

fn rate_of_profile(cells: &[f64], profile: &[f64], delta: f64) -> f64 {
    cells
        .iter()
        .zip(profile)
        .map(|(c, s)| c * s * delta)
        .collect::<KahanSum>()
        .total()
}

/// Instantaneous firing rate `\int S(a, x) n(a) da`.
pub fn firing_rate(n: &AgeDensity, s: &FiringCoefficient, x: f64) -> f64 {
    let profile = s.frozen_profile(n.grid(), x);
    rate_of_profile(n.cells(), &profile, n.grid().delta())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSolution {
    pub rate: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `r = \int S(a, r) n(a) da` by damped fixed-point iteration.
pub fn solve_instantaneous_rate(n: &AgeDensity, s: &FiringCoefficient, guess: f64) -> Result<RateSolution> {
    let mut profile = Vec::with_capacity(n.grid().n_cells());
    solve_rate_with(n.cells(), n.grid(), s, guess, &mut profile)
}

fn solve_rate_with(
    cells: &[f64],
    grid: &AgeGrid,
    s: &FiringCoefficient,
    guess: f64,
    profile: &mut Vec<f64>,
) -> Result<RateSolution> {
    let delta = grid.delta();
    let mut f = |x: f64| {
        s.frozen_profile_into(grid, x, profile);
        rate_of_profile(cells, profile, delta)
    };
    if s.lipschitz_ell() == 0.0 {
        return Ok(RateSolution {
            rate: f(guess),
            iterations: 1,
            residual: 0.0,
        });
    }
    let mut r = guess.max(0.0);
    let mut residual = f64::INFINITY;
    for it in 1..=RATE_MAX_ITER {
        let fr = f(r);
        if !fr.is_finite() {
            return Err(Error::NonFinite("firing rate".into()));
        }
        residual = (fr - r).abs();
        if residual <= RATE_TOL {
            return Ok(RateSolution {
                rate: r,
                iterations: it,
                residual,
            });
        }
        r = 0.5 * r + 0.5 * fr;
    }
    Err(Error::NonConvergence {
        iterations: RATE_MAX_ITER,
        residual,
    })
}

/// Discretized convolution `X(k dt) = \int_0^H alpha(s) r(k dt - s) ds` with
/// `r` piecewise linear between lattice samples.
///
/// Each lag interval `[j dt, (j+1) dt]` carries the exact kernel moments, so
/// the weights sum to the kernel mass up to quadrature error only.
#[derive(Debug, Clone)]
pub struct ActivityIntegrator {
    kernel: DelayKernel,
    dt: f64,
    /// combined weight of `r(t - j dt)` for `1 <= j`, interior lags
    weights: Vec<f64>,
    /// first moment weight of each lag interval (endpoint weight when truncated)
    m1: Vec<f64>,
    w0: f64,
    full_intervals: usize,
}

impl ActivityIntegrator {
    /// Prepares weights for at most `max_steps` computed lags.
    pub fn new(kernel: &DelayKernel, dt: f64, max_steps: usize) -> Result<Self> {
        let density = kernel.density().ok_or_else(|| {
            Error::InvalidParameter("a point-mass kernel has no density to integrate".into())
        })?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let h = kernel.horizon();
        let full_intervals = (h / dt).ceil() as usize;
        let k = full_intervals.min(max_steps.max(1));
        let mut m0 = Vec::with_capacity(k);
        let mut m1 = Vec::with_capacity(k);
        for j in 0..k {
            let lo = j as f64 * dt;
            let hi = ((j + 1) as f64 * dt).min(h);
            if hi <= lo {
                m0.push(0.0);
                m1.push(0.0);
                continue;
            }
            m0.push(quad::gauss4(|s| density(s), lo, hi));
            m1.push(quad::gauss4(|s| density(s) * (s - lo) / dt, lo, hi));
        }
        let mut weights = vec![0.0; k];
        for j in 1..k {
            weights[j] = (m0[j] - m1[j]) + m1[j - 1];
        }
        Ok(Self {
            kernel: kernel.clone(),
            dt,
            w0: m0[0] - m1[0],
            weights,
            m1,
            full_intervals,
        })
    }

    /// Weight of the current, not yet known, rate `r(t)` at step `k >= 1`.
    pub fn current_weight(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.w0
        }
    }

    /// Everything in `X(k dt)` except the current-rate term. `computed` must
    /// hold `r(0), ..., r((k-1) dt)`.
    pub fn known_part(&self, k: usize, history: &HistoryFunction) -> Result<f64> {
        let computed = history.computed();
        if computed.len() < k {
            return Err(Error::HistoryGap(format!(
                "activity at step {k} needs {k} stored rates, have {}",
                computed.len()
            )));
        }
        let covered = k.min(self.full_intervals);
        if covered > self.m1.len() {
            return Err(Error::Precondition(format!(
                "integrator prepared for {} lags, step {k} needs {covered}",
                self.m1.len()
            )));
        }
        let mut total = 0.0;
        if covered >= 1 {
            // r(t - j dt) = computed[k - j], j = 1 .. covered - 1, plus the far endpoint
            let interior = &self.weights[1..covered];
            let samples = &computed[k + 1 - covered..k];
            total += interior
                .iter()
                .zip(samples.iter().rev())
                .map(|(w, r)| w * r)
                .sum::<f64>();
            total += self.m1[covered - 1] * computed[k - covered];
        }
        let t = k as f64 * self.dt;
        if covered == k && t < self.kernel.horizon() {
            total += self.past_part(t, history)?;
        }
        Ok(total)
    }

    /// `\int_t^H alpha(s) r(t - s) ds` over the prescribed past.
    fn past_part(&self, t: f64, history: &HistoryFunction) -> Result<f64> {
        let density = self.kernel.density().expect("checked at construction");
        let past = history.past();
        Ok(quad::lag_integral(
            |s| density(s) * past.evaluate(t - s),
            t,
            self.kernel.horizon(),
            PAST_PANELS,
        ))
    }
}

/// `X(t)` for a distributed kernel, with `t` on the history lattice and the
/// history covering `[0, t]`.
pub fn activity_distributed(history: &HistoryFunction, kernel: &DelayKernel, t: f64) -> Result<f64> {
    if let Some(d) = kernel.point_mass_delay() {
        return history.rate_at(t - d);
    }
    let dt = history.dt();
    let kf = (t / dt).round();
    if t < 0.0 || (kf * dt - t).abs() > 1e-9 * dt.max(t) {
        return Err(Error::HistoryGap(format!("t = {t} is not a nonnegative lattice time")));
    }
    let k = kf as usize;
    if history.computed().len() <= k {
        return Err(Error::HistoryGap(format!(
            "activity at t = {t} needs the rate at t, history ends at {:?}",
            history.covered_until()
        )));
    }
    let integrator = ActivityIntegrator::new(kernel, dt, k.max(1))?;
    let rest = integrator.known_part(k, history)?;
    Ok(rest + integrator.current_weight(k) * history.computed()[k])
}

enum Coupling {
    Instantaneous,
    Delay { steps: i64 },
    Distributed(ActivityIntegrator),
    Frozen(f64),
}

/// Runs the scheme from `n0` to `t_end`. `history` supplies the past rate and
/// receives every computed `r(k dt)`.
pub fn simulate(
    config: &SimulationConfig,
    s: &FiringCoefficient,
    n0: &AgeDensity,
    history: &mut HistoryFunction,
) -> Result<SimulationTrace> {
    let grid = config.grid;
    let dt = grid.delta();
    let n_steps = config.n_steps()?;
    if n0.grid() != &grid {
        return Err(Error::GridMismatch("initial density is on a different grid".into()));
    }
    let m0 = n0.mass();
    if (m0 - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("initial mass must be 1, got {m0}")));
    }
    grid.check_tail(s)?;
    if (history.dt() - dt).abs() > 1e-12 * dt {
        return Err(Error::InvalidParameter(format!(
            "history spacing {} differs from dt = {dt}",
            history.dt()
        )));
    }
    if !history.computed().is_empty() {
        return Err(Error::Precondition("history already holds computed rates".into()));
    }
    if let Some(reference) = &config.reference {
        if reference.density.grid() != &grid {
            return Err(Error::GridMismatch("reference density is on a different grid".into()));
        }
    }

    let mut warnings = Vec::new();
    let delay_coupling = |d: f64, warnings: &mut Vec<String>| -> Result<Coupling> {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::InvalidParameter(format!("delay must be nonnegative, got {d}")));
        }
        let steps = (d / dt).round();
        if (steps * dt - d).abs() > 1e-9 * d.max(dt) {
            warnings.push(format!(
                "delay {d} is not a multiple of dt = {dt}; rounded to {}",
                steps * dt
            ));
        }
        Ok(Coupling::Delay { steps: steps as i64 })
    };
    let coupling = match &config.variant {
        Variant::Instantaneous => Coupling::Instantaneous,
        Variant::DiscreteDelay { d } => delay_coupling(*d, &mut warnings)?,
        Variant::DistributedDelay { kernel } => match kernel.point_mass_delay() {
            Some(d) => delay_coupling(d, &mut warnings)?,
            None => Coupling::Distributed(ActivityIntegrator::new(kernel, dt, n_steps.max(1))?),
        },
        Variant::LinearFrozen { r_bar } => {
            if !r_bar.is_finite() || *r_bar < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "frozen activity must be nonnegative, got {r_bar}"
                )));
            }
            Coupling::Frozen(*r_bar)
        }
    };

    let capacity = n_steps / config.record_every + 1;
    let mut times = Vec::with_capacity(capacity);
    let mut r_series = Vec::with_capacity(capacity);
    let mut x_series = Vec::with_capacity(capacity);
    let mut mass_series = Vec::with_capacity(capacity);
    let mut tv_series = config.reference.as_ref().map(|_| Vec::with_capacity(capacity));

    let mut state = n0.clone();
    let mut scratch = Vec::with_capacity(grid.n_cells());
    let mut profile = Vec::with_capacity(grid.n_cells());
    let mut factors = TransportFactors::default();
    let mut factors_x = f64::NAN;
    let mut prev_r: Option<f64> = None;
    let mut prev_x: Option<f64> = None;

    for k in 0..=n_steps {
        let cells = state.cells();
        let rate_at = |x: f64, profile: &mut Vec<f64>| {
            s.frozen_profile_into(&grid, x, profile);
            rate_of_profile(cells, profile, dt)
        };
        let (x, r) = match &coupling {
            Coupling::Frozen(x) => (*x, rate_at(*x, &mut profile)),
            Coupling::Delay { steps } => {
                let x = history.rate_at_index(k as i64 - steps)?;
                (x, rate_at(x, &mut profile))
            }
            Coupling::Instantaneous => {
                let guess = match prev_r {
                    Some(r) => r,
                    None => rate_at(0.0, &mut profile),
                };
                let sol = solve_rate_with(cells, &grid, s, guess, &mut profile)?;
                let x = sol.rate;
                (x, rate_at(x, &mut profile))
            }
            Coupling::Distributed(integrator) => {
                let rest = integrator.known_part(k, history)?;
                let w0 = integrator.current_weight(k);
                let x = if w0 == 0.0 {
                    rest
                } else {
                    let mut x = prev_x.unwrap_or(rest);
                    let mut converged = false;
                    let mut residual = f64::INFINITY;
                    for _ in 0..ACTIVITY_MAX_ITER {
                        let next = rest + w0 * rate_at(x, &mut profile);
                        residual = (next - x).abs();
                        x = next;
                        if residual <= ACTIVITY_TOL * x.abs().max(1.0) {
                            converged = true;
                            break;
                        }
                    }
                    if !converged {
                        return Err(Error::NonConvergence {
                            iterations: ACTIVITY_MAX_ITER,
                            residual,
                        });
                    }
                    x
                };
                (x, rate_at(x, &mut profile))
            }
        };
        if !r.is_finite() || !x.is_finite() {
            return Err(Error::NonFinite(format!("rate or activity at step {k}")));
        }
        history.push(r);
        prev_r = Some(r);
        prev_x = Some(x);

        if k % config.record_every == 0 {
            times.push(k as f64 * dt);
            r_series.push(r);
            x_series.push(x);
            mass_series.push(state.mass());
            if let (Some(tv), Some(reference)) = (tv_series.as_mut(), config.reference.as_ref()) {
                tv.push(tv_distance(&state, &reference.density)?);
            }
        }
        if k == n_steps {
            break;
        }

        if x != factors_x {
            factors.fill(&profile, dt);
            factors_x = x;
        }
        transport_with(state.cells(), &factors, dt, &mut scratch);
        if scratch.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("density after step {k}")));
        }
        std::mem::swap(state.cells_vec_mut(), &mut scratch);
    }

    Ok(SimulationTrace {
        times,
        r_series,
        x_series,
        mass_series,
        tv_series,
        final_density: state,
        warnings,
    })
}
