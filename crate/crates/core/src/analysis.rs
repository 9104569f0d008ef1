//! Distances, decay fits and measured spectral gaps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgeDensity, AgeGrid, FiringCoefficient, HistoryFunction};
use crate::quad::KahanSum;
use crate::simulate::{simulate, SimulationConfig, Variant};
use crate::steady::linear_equilibrium;

/// Values below this are treated as round-off and skipped by fits.
pub const NOISE_FLOOR: f64 = 1e-14;
/// Minimum number of points a fit accepts.
pub const MIN_FIT_POINTS: usize = 10;

/// Total variation distance `sum |p_i - q_i| delta`. Disjoint probability
/// densities are at distance 2.
pub fn tv_distance(p: &AgeDensity, q: &AgeDensity) -> Result<f64> {
    if p.grid() != q.grid() {
        return Err(Error::GridMismatch(format!(
            "densities live on different grids: {:?} vs {:?}",
            p.grid(),
            q.grid()
        )));
    }
    let d = p.grid().delta();
    Ok(p.cells()
        .iter()
        .zip(q.cells())
        .map(|(a, b)| (a - b).abs() * d)
        .collect::<KahanSum>()
        .total())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// `v ~ A e^{-rate t}`.
    Exponential,
    /// `v ~ A (1 + t)^{-rate}`.
    Algebraic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub kind: DecayKind,
    pub rate: f64,
    pub amplitude: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
}

/// Least-squares fit of `ln v` against `t` (exponential) or `ln(1 + t)`
/// (algebraic) over the points with `t` in `window` and `v >= NOISE_FLOOR`.
pub fn fit_decay(times: &[f64], values: &[f64], kind: DecayKind, window: (f64, f64)) -> Result<RateFit> {
    if times.len() != values.len() {
        return Err(Error::InvalidParameter(format!(
            "{} times but {} values",
            times.len(),
            values.len()
        )));
    }
    if !(window.0 < window.1) {
        return Err(Error::InvalidParameter(format!("empty fit window {window:?}")));
    }
    let points: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= window.0 && **t <= window.1 && v.is_finite() && **v >= NOISE_FLOOR)
        .map(|(&t, &v)| {
            let x = match kind {
                DecayKind::Exponential => t,
                DecayKind::Algebraic => t.ln_1p(),
            };
            (x, v.ln())
        })
        .collect();
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            usable: points.len(),
            required: MIN_FIT_POINTS,
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
    let line = linear_regression(&xs, &ys)?;
    Ok(RateFit {
        kind,
        rate: -line.slope,
        amplitude: line.intercept.exp(),
        window,
        r_squared: line.r_squared,
    })
}

/// Ordinary least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_regression(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InsufficientData {
            usable: xs.len().min(ys.len()),
            required: 2,
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::InsufficientData {
            usable: 1,
            required: 2,
        });
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Running maximum from the right, `e_k = max_{j >= k} |v_j|`. Oscillating
/// decays become monotone while keeping the same exponential envelope.
pub fn forward_envelope(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut running = 0.0f64;
    for (o, v) in out.iter_mut().zip(values).rev() {
        running = running.max(v.abs());
        *o = running;
    }
    out
}

/// `[t_lo, t]` where `t` is the last sample before `values` first drops below
/// `floor` after `t_lo`, capped at `t_hi`.
pub fn window_above_floor(times: &[f64], values: &[f64], t_lo: f64, t_hi: f64, floor: f64) -> (f64, f64) {
    let mut end = t_lo;
    for (&t, &v) in times.iter().zip(values) {
        if t < t_lo {
            continue;
        }
        if t > t_hi || !(v >= floor) {
            break;
        }
        end = t;
    }
    (t_lo, end)
}

/// Fits the forward envelope of `|values|` from `t_lo` until the envelope
/// falls below `floor` (or `t_hi`).
pub fn fit_envelope(
    times: &[f64],
    values: &[f64],
    kind: DecayKind,
    t_lo: f64,
    t_hi: f64,
    floor: f64,
) -> Result<RateFit> {
    let envelope = forward_envelope(values);
    let window = window_above_floor(times, &envelope, t_lo, t_hi, floor);
    fit_decay(times, &envelope, kind, window)
}

/// Knobs of [`measure_linear_gap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapOptions {
    pub probes: usize,
    pub seed: u64,
    /// Fit window; defaults to `[t_end / 10, t_end]`.
    pub window: Option<(f64, f64)>,
    pub record_every: usize,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self {
            probes: 8,
            seed: 0,
            window: None,
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub index: usize,
    pub tv0: f64,
    /// `None` when the probe was excluded.
    pub fit: Option<RateFit>,
    /// `max_t tv(t) e^{lambda_hat t} / tv(0)` for this probe.
    pub amplitude_ratio: Option<f64>,
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lambda_hat: f64,
    pub c0_hat: f64,
    pub r_bar: f64,
    pub r_star: f64,
    pub probes: Vec<ProbeResult>,
}

/// Random probability density made of a few uniform bumps.
pub fn random_probe(grid: &AgeGrid, rng: &mut impl Rng) -> Result<AgeDensity> {
    let span = grid.a_max().min(10.0);
    let n = grid.n_cells();
    let mut cells = vec![0.0; n];
    let bumps = rng.gen_range(1..=3);
    for _ in 0..bumps {
        let width = rng.gen_range(0.05..0.5) * span;
        let start = rng.gen_range(0.0..(span - width).max(grid.delta()));
        let weight: f64 = rng.gen_range(0.2..1.0);
        let lo = ((start / grid.delta()) as usize).min(n - 1);
        let hi = (((start + width) / grid.delta()).ceil() as usize).clamp(lo + 1, n);
        let level = weight / ((hi - lo) as f64);
        cells[lo..hi].iter_mut().for_each(|c| *c += level);
    }
    AgeDensity::new(*grid, cells)?.normalized()
}

/// Measures the decay rate of the linear equation with activity frozen at
/// `r_bar`, starting from `options.probes` seeded random initial densities.
pub fn measure_linear_gap(
    s: &FiringCoefficient,
    r_bar: f64,
    grid: &AgeGrid,
    t_end: f64,
    options: &GapOptions,
) -> Result<GapReport> {
    if options.probes < 3 {
        return Err(Error::InvalidParameter(format!(
            "at least 3 probes are needed, got {}",
            options.probes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let probes = (0..options.probes)
        .map(|_| random_probe(grid, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    measure_linear_gap_with_probes(s, r_bar, grid, t_end, &probes, options)
}

/// As [`measure_linear_gap`] with explicit initial densities.
pub fn measure_linear_gap_with_probes(
    s: &FiringCoefficient,
    r_bar: f64,
    grid: &AgeGrid,
    t_end: f64,
    probes: &[AgeDensity],
    options: &GapOptions,
) -> Result<GapReport> {
    let reference = linear_equilibrium(s, r_bar, grid)?;
    let config = SimulationConfig::new(Variant::LinearFrozen { r_bar }, *grid, t_end, options.record_every)?
        .with_reference(reference.clone());
    let window = options.window.unwrap_or((0.1 * t_end, t_end));

    let runs: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = probes
        .par_iter()
        .map(|n0| {
            let mut history = HistoryFunction::constant(r_bar, grid.delta())?;
            let trace = simulate(&config, s, n0, &mut history)?;
            let tv = trace.tv_series.unwrap_or_default();
            Ok((tv.first().copied().unwrap_or(0.0), trace.times, tv))
        })
        .collect();

    let mut results = Vec::with_capacity(probes.len());
    let mut series = Vec::with_capacity(probes.len());
    for (index, run) in runs.into_iter().enumerate() {
        let (tv0, times, tv) = run?;
        if tv0 < NOISE_FLOOR {
            results.push(ProbeResult {
                index,
                tv0,
                fit: None,
                amplitude_ratio: None,
                excluded: Some("initial distance at noise floor".into()),
            });
            series.push(None);
            continue;
        }
        let fit = fit_decay(&times, &tv, DecayKind::Exponential, window)?;
        results.push(ProbeResult {
            index,
            tv0,
            fit: Some(fit),
            amplitude_ratio: None,
            excluded: None,
        });
        series.push(Some((times, tv)));
    }

    let lambda_hat = results
        .iter()
        .filter_map(|p| p.fit.map(|f| f.rate))
        .fold(f64::INFINITY, f64::min);
    if !lambda_hat.is_finite() {
        return Err(Error::InsufficientData {
            usable: 0,
            required: 1,
        });
    }
    let mut c0_hat: f64 = 0.0;
    for (probe, data) in results.iter_mut().zip(&series) {
        if let Some((times, tv)) = data {
            let ratio = times
                .iter()
                .zip(tv)
                .filter(|(_, v)| **v >= NOISE_FLOOR)
                .map(|(t, v)| v * (lambda_hat * t).exp() / probe.tv0)
                .fold(0.0, f64::max);
            probe.amplitude_ratio = Some(ratio);
            c0_hat = c0_hat.max(ratio);
        }
    }
    Ok(GapReport {
        lambda_hat,
        c0_hat,
        r_bar,
        r_star: reference.r_star,
        probes: results,
    })
}
