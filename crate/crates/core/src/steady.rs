//! Survival integral, equilibrium firing rates and equilibrium densities.
//!
//! `S(., X)` is sampled at cell midpoints and treated as constant on each
//! cell, so both the inner integral `\int_0^a S` and the outer integral of
//! the survival function are evaluated exactly for that piecewise-constant
//! profile. The last cell represents the tail beyond `a_max - delta`, where
//! `S` is held at its last value. This is the same closure the transport
//! step uses, so the equilibrium built here is an exact fixed point of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgeDensity, AgeGrid, Equilibrium, FiringCoefficient};
use crate::quad::{phi1, KahanSum};

/// Number of log-spaced points in the root scan.
pub const DEFAULT_SCAN_POINTS: usize = 512;
/// Residual target for reported roots.
pub const ROOT_RESIDUAL_TOL: f64 = 1e-10;

/// Survival integral `I(r)` for activity `r`.
pub fn survival_integral(s: &FiringCoefficient, r: f64, grid: &AgeGrid) -> Result<f64> {
    grid.check_tail(s)?;
    let profile = s.frozen_profile(grid, r);
    survival_of_profile(&profile, grid.delta())
}

/// `\int_0^\infty exp(-\int_0^a S)` for a cellwise-constant `S`, with the
/// last cell extended to infinity.
pub(crate) fn survival_of_profile(profile: &[f64], delta: f64) -> Result<f64> {
    let n = profile.len();
    let tail_rate = profile[n - 1];
    if !(tail_rate > 0.0) {
        return Err(Error::Precondition(format!(
            "firing coefficient vanishes in the last age cell (S = {tail_rate}); the tail is not controlled"
        )));
    }
    let mut acc = KahanSum::default();
    let mut survival = 1.0;
    let mut i = 0;
    // runs of equal S have geometric closed forms
    while i + 1 < n {
        let rate = profile[i];
        let mut j = i + 1;
        while j + 1 < n && profile[j] == rate {
            j += 1;
        }
        let len = (j - i) as f64;
        if rate > 0.0 {
            let decay = -(-rate * delta * len).exp_m1();
            acc.add(survival * decay / rate);
            survival *= (-rate * delta * len).exp();
        } else {
            acc.add(survival * delta * len);
        }
        i = j;
    }
    acc.add(survival / tail_rate);
    let total = acc.total();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("survival integral evaluated to {total}")));
    }
    Ok(total)
}

/// Cell averages `exp(-\int_0^a S)` (unnormalized stationary profile).
pub(crate) fn stationary_cells(profile: &[f64], delta: f64) -> Vec<f64> {
    let n = profile.len();
    let mut out = Vec::with_capacity(n);
    let mut survival = 1.0;
    let mut last_rate = f64::NAN;
    let mut step = 1.0;
    let mut avg = 1.0;
    for (i, &rate) in profile.iter().enumerate() {
        if rate != last_rate {
            step = (-rate * delta).exp();
            avg = phi1(rate * delta);
            last_rate = rate;
        }
        if i + 1 < n {
            out.push(survival * avg);
            survival *= step;
        } else {
            out.push(survival / (rate * delta));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanBracket {
    pub r_lo: f64,
    pub r_hi: f64,
    pub sign_change: bool,
}

/// All equilibria found by the bracket scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootReport {
    pub roots: Vec<f64>,
    pub residuals: Vec<f64>,
    pub bracket_scan: Vec<ScanBracket>,
}

/// Scans `g(r) = r I(r) - 1` on a log-spaced net over `(0, r_max_scan]`
/// and bisects every sign change.
pub fn solve_steady_state(s: &FiringCoefficient, grid: &AgeGrid, r_max_scan: f64) -> Result<RootReport> {
    solve_steady_state_with(s, grid, r_max_scan, DEFAULT_SCAN_POINTS)
}

pub fn solve_steady_state_with(
    s: &FiringCoefficient,
    grid: &AgeGrid,
    r_max_scan: f64,
    scan_points: usize,
) -> Result<RootReport> {
    if !(r_max_scan > 0.0) || !r_max_scan.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "r_max_scan must be positive, got {r_max_scan}"
        )));
    }
    if r_max_scan < s.sup_norm() {
        return Err(Error::Precondition(format!(
            "r_max_scan = {r_max_scan} is below sup S = {}",
            s.sup_norm()
        )));
    }
    if scan_points < 2 {
        return Err(Error::InvalidParameter("scan needs at least two points".into()));
    }
    grid.check_tail(s)?;

    let g = |r: f64| -> Result<f64> { Ok(r * survival_integral(s, r, grid)? - 1.0) };

    let lo = r_max_scan * 1e-9;
    let ratio = (r_max_scan / lo).ln();
    let net: Vec<f64> = (0..scan_points)
        .map(|j| {
            if j + 1 == scan_points {
                r_max_scan
            } else {
                lo * (ratio * j as f64 / (scan_points - 1) as f64).exp()
            }
        })
        .collect();
    let values = net.iter().map(|&r| g(r)).collect::<Result<Vec<_>>>()?;

    let mut roots = Vec::new();
    let mut bracket_scan = Vec::with_capacity(scan_points - 1);
    if values[0] == 0.0 {
        roots.push(net[0]);
    }
    for j in 0..scan_points - 1 {
        let (a, b) = (net[j], net[j + 1]);
        let (ga, gb) = (values[j], values[j + 1]);
        let sign_change = (ga < 0.0 && gb > 0.0) || (ga > 0.0 && gb < 0.0) || (gb == 0.0 && ga != 0.0);
        bracket_scan.push(ScanBracket {
            r_lo: a,
            r_hi: b,
            sign_change,
        });
        if !sign_change {
            continue;
        }
        if gb == 0.0 {
            roots.push(b);
        } else {
            roots.push(bisect(&g, a, b, ga)?);
        }
    }

    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|x, y| (*x - *y).abs() <= 1e-8);
    let residuals = roots
        .iter()
        .map(|&r| g(r).map(f64::abs))
        .collect::<Result<Vec<_>>>()?;
    Ok(RootReport {
        roots,
        residuals,
        bracket_scan,
    })
}

fn bisect<G: Fn(f64) -> Result<f64>>(g: &G, mut a: f64, mut b: f64, mut ga: f64) -> Result<f64> {
    let mut best = (f64::INFINITY, a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let gm = g(m)?;
        if gm.abs() < best.0 {
            best = (gm.abs(), m);
        }
        if gm == 0.0 {
            return Ok(m);
        }
        if (gm < 0.0) == (ga < 0.0) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    Ok(best.1)
}

/// Stationary state of the linear equation with activity frozen at `x`:
/// the density has unit mass and `r_star = 1 / I(x)`.
pub fn linear_equilibrium(s: &FiringCoefficient, x: f64, grid: &AgeGrid) -> Result<Equilibrium> {
    grid.check_tail(s)?;
    let profile = s.frozen_profile(grid, x);
    let integral = survival_of_profile(&profile, grid.delta())?;
    let rate = 1.0 / integral;
    let cells: Vec<f64> = stationary_cells(&profile, grid.delta())
        .into_iter()
        .map(|c| rate * c)
        .collect();
    Ok(Equilibrium {
        r_star: rate,
        x_star: x,
        density: AgeDensity::new(*grid, cells)?,
    })
}

/// Equilibrium density `n*(a) = r* exp(-\int_0^a S(., r*))` for a root `r*`
/// of `r I(r) = 1`.
pub fn equilibrium_density(s: &FiringCoefficient, r_star: f64, grid: &AgeGrid) -> Result<Equilibrium> {
    grid.check_tail(s)?;
    let profile = s.frozen_profile(grid, r_star);
    let integral = survival_of_profile(&profile, grid.delta())?;
    let residual = (r_star * integral - 1.0).abs();
    if residual > 1e-8 {
        return Err(Error::Precondition(format!(
            "r* = {r_star} is not an equilibrium: |r I(r) - 1| = {residual:e}"
        )));
    }
    let raw: Vec<f64> = stationary_cells(&profile, grid.delta())
        .into_iter()
        .map(|c| r_star * c)
        .collect();
    let density = AgeDensity::new(*grid, raw)?;
    let m = density.mass();
    if (m - 1.0).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "equilibrium mass {m} drifts from 1 by more than 1e-6"
        )));
    }
    Ok(Equilibrium {
        r_star,
        x_star: r_star,
        density: density.normalized()?,
    })
}
