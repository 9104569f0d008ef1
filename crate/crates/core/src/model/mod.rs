//! Domain types shared by all solvers.

mod coefficient;
mod kernel;

pub use coefficient::{make_builtin_coefficient, CoefficientConstants, CoefficientSpec, FiringCoefficient};
pub use kernel::{
    algebraic_horizon, exponential_horizon, DelayKernel, Density, KernelKind, KernelSpec,
    DEFAULT_TAIL_TOL,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::quad::KahanSum;

/// Tail mass allowed beyond `a_max` by [`AgeGrid::for_coefficient`].
pub const AGE_TAIL_TOL: f64 = 1e-12;

/// Uniform age grid `[0, a_max]` split into `n_cells` cells of width `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeGrid {
    delta: f64,
    n_cells: usize,
}

impl AgeGrid {
    pub fn new(delta: f64, n_cells: usize) -> Result<Self> {
        ensure_finite("delta", delta)?;
        if delta <= 0.0 {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
        }
        if n_cells == 0 {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        Ok(Self { delta, n_cells })
    }

    /// Grid covering `[0, a_max]`; `a_max` must be a multiple of `delta`.
    pub fn with_a_max(delta: f64, a_max: f64) -> Result<Self> {
        ensure_finite("a_max", a_max)?;
        ensure_finite("delta", delta)?;
        if a_max <= 0.0 || delta <= 0.0 {
            return Err(Error::InvalidParameter("a_max and delta must be positive".into()));
        }
        let ratio = a_max / delta;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 * ratio.max(1.0) || n < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "a_max = {a_max} is not an integer multiple of delta = {delta}"
            )));
        }
        Self::new(delta, n as usize)
    }

    /// Smallest grid whose truncation leaves an equilibrium tail mass of at
    /// most `exp(-s0 (a_max - sigma)) <= tail_tol`.
    pub fn for_coefficient_with_tol(s: &FiringCoefficient, delta: f64, tail_tol: f64) -> Result<Self> {
        let need = s.sigma() + (1.0 / tail_tol).ln() / s.s0();
        let n = (need / delta).ceil().max(1.0) as usize;
        let grid = Self::new(delta, n)?;
        if grid.a_max() <= s.sigma() {
            return Self::new(delta, n + 1);
        }
        Ok(grid)
    }

    pub fn for_coefficient(s: &FiringCoefficient, delta: f64) -> Result<Self> {
        Self::for_coefficient_with_tol(s, delta, AGE_TAIL_TOL)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn a_max(&self) -> f64 {
        self.n_cells as f64 * self.delta
    }

    #[inline]
    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.delta
    }

    pub fn midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_cells).map(move |i| self.midpoint(i))
    }

    /// Fails unless `a_max > sigma`, which the tail control relies on.
    pub fn check_tail(&self, s: &FiringCoefficient) -> Result<()> {
        if self.a_max() <= s.sigma() {
            return Err(Error::TailNotControlled {
                a_max: self.a_max(),
                sigma: s.sigma(),
            });
        }
        Ok(())
    }
}

/// Cell-averaged age density. The last cell stands for the whole tail
/// `[a_max - delta, infinity)` and stores its mass divided by `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeDensity {
    grid: AgeGrid,
    cells: Vec<f64>,
}

impl AgeDensity {
    pub fn new(grid: AgeGrid, cells: Vec<f64>) -> Result<Self> {
        if cells.len() != grid.n_cells() {
            return Err(Error::InvalidParameter(format!(
                "expected {} cells, got {}",
                grid.n_cells(),
                cells.len()
            )));
        }
        for (i, &c) in cells.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "cell {i} must be finite and nonnegative, got {c}"
                )));
            }
        }
        Ok(Self { grid, cells })
    }


    pub fn zeros(grid: AgeGrid) -> Self {
        Self {
            grid,
            cells: vec![0.0; grid.n_cells()],
        }
    }

    /// Unit mass spread uniformly over `[0, width]` (rounded to whole cells).
    pub fn uniform(grid: AgeGrid, width: f64) -> Result<Self> {
        let k = ((width / grid.delta()).round() as usize).clamp(1, grid.n_cells());
        let level = 1.0 / (k as f64 * grid.delta());
        let mut cells = vec![0.0; grid.n_cells()];
        cells[..k].iter_mut().for_each(|c| *c = level);
        Self::new(grid, cells)
    }

    /// Samples `f` at the cell midpoints.
    pub fn from_fn<F: Fn(f64) -> f64>(grid: AgeGrid, f: F) -> Result<Self> {
        let cells = grid.midpoints().map(f).collect();
        Self::new(grid, cells)
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub(crate) fn cells_vec_mut(&mut self) -> &mut Vec<f64> {
        &mut self.cells
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }

    /// Total mass `sum cells[i] * delta`, compensated.
    pub fn mass(&self) -> f64 {
        mass(self)
    }

    /// Rescaled copy with unit mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::InvalidParameter("cannot normalize a zero density".into()));
        }
        Ok(Self {
            grid: self.grid,
            cells: self.cells.iter().map(|c| c / m).collect(),
        })
    }

    pub fn has_non_finite(&self) -> bool {
        self.cells.iter().any(|c| !c.is_finite())
    }
}

/// Total mass of a density.
pub fn mass(density: &AgeDensity) -> f64 {
    let d = density.grid.delta();
    density.cells.iter().map(|c| c * d).collect::<KahanSum>().total()
}

/// Firing rate prescribed for negative times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PastRate {
    Constant { value: f64 },
    /// `(t, r)` pairs with `t < 0`, linearly interpolated and held constant
    /// outside the table.
    Tabulated { points: Vec<(f64, f64)> },
}

impl PastRate {
    pub fn evaluate(&self, t: f64) -> f64 {
        match self {
            PastRate::Constant { value } => *value,
            PastRate::Tabulated { points } => {
                let idx = points.partition_point(|p| p.0 <= t);
                if idx == 0 {
                    points[0].1
                } else if idx >= points.len() {
                    points[points.len() - 1].1
                } else {
                    let (t0, r0) = points[idx - 1];
                    let (t1, r1) = points[idx];
                    r0 + (r1 - r0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    pub fn sup_bound(&self) -> f64 {
        match self {
            PastRate::Constant { value } => *value,
            PastRate::Tabulated { points } => points.iter().map(|p| p.1).fold(0.0, f64::max),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PastRate::Constant { value } => {
                ensure_finite("past rate", *value)?;
                if *value < 0.0 {
                    return Err(Error::InvalidParameter("past rate must be nonnegative".into()));
                }
            }
            PastRate::Tabulated { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidParameter("empty past-rate table".into()));
                }
                for w in points.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::InvalidParameter(
                            "past-rate times must be strictly increasing".into(),
                        ));
                    }
                }
                for &(t, r) in points {
                    ensure_finite("past time", t)?;
                    ensure_finite("past rate", r)?;
                    if t > 0.0 || r < 0.0 {
                        return Err(Error::InvalidParameter(
                            "past-rate table needs t <= 0 and r >= 0".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Prescribed past firing rate plus the append-only trace of computed rates
/// `r(k dt)`, `k = 0, 1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryFunction {
    past: PastRate,
    dt: f64,
    computed: Vec<f64>,
}

impl HistoryFunction {
    pub fn new(past: PastRate, dt: f64) -> Result<Self> {
        past.validate()?;
        ensure_finite("dt", dt)?;
        if dt <= 0.0 {
            return Err(Error::InvalidParameter("history spacing must be positive".into()));
        }
        Ok(Self {
            past,
            dt,
            computed: Vec::new(),
        })
    }

    pub fn constant(value: f64, dt: f64) -> Result<Self> {
        Self::new(PastRate::Constant { value }, dt)
    }

    pub fn past(&self) -> &PastRate {
        &self.past
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn computed(&self) -> &[f64] {
        &self.computed
    }

    pub fn sup_bound(&self) -> f64 {
        self.past.sup_bound()
    }

    pub fn push(&mut self, r: f64) {
        self.computed.push(r);
    }

    /// Latest time covered by the computed trace.
    pub fn covered_until(&self) -> Option<f64> {
        self.computed.len().checked_sub(1).map(|k| k as f64 * self.dt)
    }

    /// `r(t)` on the step lattice: the past function for `t < 0`, the stored
    /// sample otherwise.
    pub fn rate_at(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Ok(self.past.evaluate(t));
        }
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * self.dt.max(t.abs()) {
            return Err(Error::HistoryGap(format!(
                "t = {t} is not on the step lattice of spacing {}",
                self.dt
            )));
        }
        self.computed.get(k as usize).copied().ok_or_else(|| {
            Error::HistoryGap(format!(
                "t = {t} requested but history ends at {:?}",
                self.covered_until()
            ))
        })
    }

    /// `r` at lattice index `k`, which may be negative.
    pub fn rate_at_index(&self, k: i64) -> Result<f64> {
        if k < 0 {
            Ok(self.past.evaluate(k as f64 * self.dt))
        } else {
            self.computed.get(k as usize).copied().ok_or_else(|| {
                Error::HistoryGap(format!("index {k} beyond {} stored samples", self.computed.len()))
            })
        }
    }
}

/// A stationary state `(n*, r*, X*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub r_star: f64,
    pub x_star: f64,
    pub density: AgeDensity,
}
