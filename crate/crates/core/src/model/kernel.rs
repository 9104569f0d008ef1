use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::quad;

/// Default truncation tolerance for kernel tails.
pub const DEFAULT_TAIL_TOL: f64 = 1e-6;

fn default_tail_tol() -> f64 {
    DEFAULT_TAIL_TOL
}

/// Configuration-level description of a delay kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Single discrete delay `d`.
    PointMass { d: f64 },
    /// `alpha(s) = beta e^{-beta s}`.
    Exponential {
        beta: f64,
        #[serde(default = "default_tail_tol")]
        tail_tol: f64,
    },
    /// `alpha(s) = (beta - 1) / (1 + s)^beta`, `beta > 1`.
    Algebraic {
        beta: f64,
        #[serde(default = "default_tail_tol")]
        tail_tol: f64,
    },
    /// Piecewise-linear density through `(lag, value)` points, zero past the
    /// last point.
    Tabulated { points: Vec<(f64, f64)> },
}

pub type Density = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum KernelKind {
    PointMass { d: f64 },
    Exponential { c_alpha: f64, beta: f64, density: Density },
    Algebraic { c_alpha: f64, beta: f64, density: Density },
    Tabulated { density: Density },
}

impl fmt::Debug for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::PointMass { d } => write!(f, "PointMass {{ d: {d} }}"),
            KernelKind::Exponential { c_alpha, beta, .. } => {
                write!(f, "Exponential {{ c_alpha: {c_alpha}, beta: {beta} }}")
            }
            KernelKind::Algebraic { c_alpha, beta, .. } => {
                write!(f, "Algebraic {{ c_alpha: {c_alpha}, beta: {beta} }}")
            }
            KernelKind::Tabulated { .. } => write!(f, "Tabulated"),
        }
    }
}

/// A delay kernel `alpha` with its truncation horizon.
#[derive(Debug, Clone)]
pub struct DelayKernel {
    kind: KernelKind,
    horizon: f64,
    tail_tol: f64,
}

fn check_positive(name: &str, v: f64) -> Result<f64> {
    ensure_finite(name, v)?;
    if v <= 0.0 {
        return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
    }
    Ok(v)
}

/// Horizon beyond which `c_alpha e^{-beta s}` carries at most `tail_tol` mass.
pub fn exponential_horizon(c_alpha: f64, beta: f64, tail_tol: f64) -> f64 {
    ((c_alpha / (beta * tail_tol)).ln() / beta).max(0.0)
}

/// Horizon `h` solving `c_alpha / ((beta - 1) h^{beta - 1}) = tail_tol`.
pub fn algebraic_horizon(c_alpha: f64, beta: f64, tail_tol: f64) -> f64 {
    (c_alpha / ((beta - 1.0) * tail_tol)).powf(1.0 / (beta - 1.0))
}

impl DelayKernel {
    pub fn from_spec(spec: &KernelSpec) -> Result<Self> {
        match spec {
            KernelSpec::PointMass { d } => Self::point_mass(*d),
            KernelSpec::Exponential { beta, tail_tol } => Self::exponential(*beta, *tail_tol),
            KernelSpec::Algebraic { beta, tail_tol } => Self::algebraic(*beta, *tail_tol),
            KernelSpec::Tabulated { points } => Self::tabulated(points.clone()),
        }
    }

    pub fn point_mass(d: f64) -> Result<Self> {
        check_positive("d", d)?;
        Ok(Self {
            kind: KernelKind::PointMass { d },
            horizon: d,
            tail_tol: 0.0,
        })
    }

    /// Normalized exponential kernel `beta e^{-beta s}` (so `C_alpha = beta`).
    pub fn exponential(beta: f64, tail_tol: f64) -> Result<Self> {
        check_positive("beta", beta)?;
        Self::exponential_custom(beta, beta, move |s| beta * (-beta * s).exp(), tail_tol)
    }

    /// Exponential-tail kernel with a caller-supplied density bounded by
    /// `c_alpha e^{-beta s}`.
    pub fn exponential_custom<F>(c_alpha: f64, beta: f64, density: F, tail_tol: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        check_positive("c_alpha", c_alpha)?;
        check_positive("beta", beta)?;
        check_positive("tail_tol", tail_tol)?;
        Ok(Self {
            kind: KernelKind::Exponential {
                c_alpha,
                beta,
                density: Arc::new(density),
            },
            horizon: exponential_horizon(c_alpha, beta, tail_tol),
            tail_tol,
        })
    }

    /// Normalized algebraic kernel `(beta - 1)/(1 + s)^beta`, bounded by
    /// `(beta - 1)/(1 + s^beta)`.
    pub fn algebraic(beta: f64, tail_tol: f64) -> Result<Self> {
        ensure_finite("beta", beta)?;
        if beta <= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "algebraic kernel needs beta > 1, got {beta}"
            )));
        }
        let c = beta - 1.0;
        Self::algebraic_custom(c, beta, move |s| c * (1.0 + s).powf(-beta), tail_tol)
    }

    pub fn algebraic_custom<F>(c_alpha: f64, beta: f64, density: F, tail_tol: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        check_positive("c_alpha", c_alpha)?;
        ensure_finite("beta", beta)?;
        if beta <= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "algebraic kernel needs beta > 1, got {beta}"
            )));
        }
        check_positive("tail_tol", tail_tol)?;
        Ok(Self {
            kind: KernelKind::Algebraic {
                c_alpha,
                beta,
                density: Arc::new(density),
            },
            horizon: algebraic_horizon(c_alpha, beta, tail_tol),
            tail_tol,
        })
    }

    pub fn tabulated(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter(
                "tabulated kernel needs at least two points".into(),
            ));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidParameter(
                    "tabulated kernel lags must be strictly increasing".into(),
                ));
            }
        }
        for &(s, v) in &points {
            ensure_finite("kernel lag", s)?;
            ensure_finite("kernel value", v)?;
            if s < 0.0 || v < 0.0 {
                return Err(Error::InvalidParameter(
                    "tabulated kernel lags and values must be nonnegative".into(),
                ));
            }
        }
        let horizon = points.last().map(|p| p.0).unwrap_or(0.0);
        let table = points;
        let density = move |s: f64| interp_table(&table, s);
        Ok(Self {
            kind: KernelKind::Tabulated {
                density: Arc::new(density),
            },
            horizon,
            tail_tol: DEFAULT_TAIL_TOL,
        })
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    pub fn point_mass_delay(&self) -> Option<f64> {
        match self.kind {
            KernelKind::PointMass { d } => Some(d),
            _ => None,
        }
    }

    /// Tail-bound constants `(C_alpha, beta)` for the exponential and
    /// algebraic kinds.
    pub fn tail_constants(&self) -> Option<(f64, f64)> {
        match self.kind {
            KernelKind::Exponential { c_alpha, beta, .. }
            | KernelKind::Algebraic { c_alpha, beta, .. } => Some((c_alpha, beta)),
            _ => None,
        }
    }

    /// `alpha(s)`; `None` for a point mass, which has no density.
    pub fn density_at(&self, s: f64) -> Option<f64> {
        self.density().map(|f| if s > self.horizon { 0.0 } else { f(s) })
    }

    /// The untruncated density function.
    pub fn density(&self) -> Option<&Density> {
        match &self.kind {
            KernelKind::PointMass { .. } => None,
            KernelKind::Exponential { density, .. }
            | KernelKind::Algebraic { density, .. }
            | KernelKind::Tabulated { density } => Some(density),
        }
    }

    /// `\int_0^{horizon} alpha`. A point mass integrates to one.
    pub fn integral_to_horizon(&self) -> f64 {
        match &self.kind {
            KernelKind::PointMass { .. } => 1.0,
            KernelKind::Tabulated { density } => {
                // breakpoints are arbitrary, so integrate densely
                let f = density.clone();
                quad::composite_gauss4(|s| f(s), 0.0, self.horizon, 20_000)
            }
            KernelKind::Exponential { density, .. } | KernelKind::Algebraic { density, .. } => {
                let f = density.clone();
                quad::lag_integral(|s| f(s), 0.0, self.horizon, 4_000)
            }
        }
    }

    /// `|\int_0^{horizon} alpha - 1|`.
    pub fn normalization_defect(&self) -> f64 {
        (self.integral_to_horizon() - 1.0).abs()
    }

    /// Normalization invariant: defect within `tail_tol` (with a small
    /// allowance for the quadrature itself).
    pub fn check_normalization(&self) -> Result<()> {
        let defect = self.normalization_defect();
        let allowed = self.tail_tol + 1e-12;
        if defect <= allowed {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "kernel is not normalized: |int alpha - 1| = {defect:e} > {allowed:e}"
            )))
        }
    }
}

fn interp_table(table: &[(f64, f64)], s: f64) -> f64 {
    if s < table[0].0 || s > table[table.len() - 1].0 {
        return 0.0;
    }
    let idx = table.partition_point(|p| p.0 <= s);
    if idx == 0 {
        return table[0].1;
    }
    if idx >= table.len() {
        return table[table.len() - 1].1;
    }
    let (s0, v0) = table[idx - 1];
    let (s1, v1) = table[idx];
    v0 + (v1 - v0) * (s - s0) / (s1 - s0)
}
