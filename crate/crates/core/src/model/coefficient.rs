use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::AgeGrid;
use crate::error::{ensure_finite, Error, Result};

/// Named firing coefficients that can be built from a configuration file.
///
/// All families have the form `S(a, X) = phi(X) 1{a > sigma}` (the constant
/// family has `sigma = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientSpec {
    /// `S = 1{a > sigma}`.
    Step { sigma: f64 },
    /// `S = (base + ell_scale * X / (1 + X)) 1{a > sigma}`; a negative
    /// `ell_scale` gives an inhibitory network.
    StepTimesSigmoid { sigma: f64, base: f64, ell_scale: f64 },
    /// `S = s0`.
    Constant { s0: f64 },
    /// `S = (base + slope * min(X, cap)) 1{a > sigma}`.
    LinearCapped {
        sigma: f64,
        base: f64,
        slope: f64,
        cap: f64,
    },
}

/// Structural constants of a firing coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientConstants {
    pub lipschitz_ell: f64,
    pub sup_norm: f64,
    pub s0: f64,
    pub sigma: f64,
}

type RateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Shape {
    Builtin(CoefficientSpec),
    Custom(RateFn),
}

/// The firing coefficient `S(a, X)` together with its structural constants.
#[derive(Clone)]
pub struct FiringCoefficient {
    shape: Shape,
    constants: CoefficientConstants,
}

impl fmt::Debug for FiringCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = match &self.shape {
            Shape::Builtin(spec) => format!("{spec:?}"),
            Shape::Custom(_) => "Custom".to_string(),
        };
        f.debug_struct("FiringCoefficient")
            .field("shape", &shape)
            .field("constants", &self.constants)
            .finish()
    }
}

/// Builds one of the catalogue coefficients, deriving its structural constants.
pub fn make_builtin_coefficient(spec: &CoefficientSpec) -> Result<FiringCoefficient> {
    let constants = match *spec {
        CoefficientSpec::Step { sigma } => {
            check_sigma(sigma)?;
            CoefficientConstants {
                lipschitz_ell: 0.0,
                sup_norm: 1.0,
                s0: 1.0,
                sigma,
            }
        }
        CoefficientSpec::StepTimesSigmoid {
            sigma,
            base,
            ell_scale,
        } => {
            check_sigma(sigma)?;
            ensure_finite("base", base)?;
            ensure_finite("ell_scale", ell_scale)?;
            // X/(1+X) ranges over [0, 1) and its derivative peaks at X = 0.
            let low = base + ell_scale.min(0.0);
            let high = base + ell_scale.max(0.0);
            positive_floor(low)?;
            CoefficientConstants {
                lipschitz_ell: ell_scale.abs(),
                sup_norm: high,
                s0: low,
                sigma,
            }
        }
        CoefficientSpec::Constant { s0 } => {
            ensure_finite("s0", s0)?;
            positive_floor(s0)?;
            CoefficientConstants {
                lipschitz_ell: 0.0,
                sup_norm: s0,
                s0,
                sigma: 0.0,
            }
        }
        CoefficientSpec::LinearCapped {
            sigma,
            base,
            slope,
            cap,
        } => {
            check_sigma(sigma)?;
            ensure_finite("base", base)?;
            ensure_finite("slope", slope)?;
            ensure_finite("cap", cap)?;
            if cap <= 0.0 {
                return Err(Error::InvalidParameter(format!("cap must be positive, got {cap}")));
            }
            let top = base + slope * cap;
            positive_floor(base.min(top))?;
            CoefficientConstants {
                lipschitz_ell: slope.abs(),
                sup_norm: base.max(top),
                s0: base.min(top),
                sigma,
            }
        }
    };
    Ok(FiringCoefficient {
        shape: Shape::Builtin(spec.clone()),
        constants,
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    ensure_finite("sigma", sigma)?;
    if sigma < 0.0 {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

fn positive_floor(s0: f64) -> Result<()> {
    if s0 <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "firing coefficient lower bound s0 must be positive, got {s0}"
        )));
    }
    Ok(())
}

impl FiringCoefficient {
    /// Wraps an arbitrary rate function. The caller vouches for the
    /// constants; only their signs and finiteness are validated.
    pub fn custom<F>(f: F, constants: CoefficientConstants) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        ensure_finite("lipschitz_ell", constants.lipschitz_ell)?;
        ensure_finite("sup_norm", constants.sup_norm)?;
        ensure_finite("s0", constants.s0)?;
        check_sigma(constants.sigma)?;
        if constants.lipschitz_ell < 0.0 || constants.sup_norm < 0.0 {
            return Err(Error::InvalidParameter(
                "lipschitz_ell and sup_norm must be nonnegative".into(),
            ));
        }
        positive_floor(constants.s0)?;
        Ok(Self {
            shape: Shape::Custom(Arc::new(f)),
            constants,
        })
    }

    #[inline]
    pub fn evaluate(&self, a: f64, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.shape {
            Shape::Builtin(spec) => match *spec {
                CoefficientSpec::Step { sigma } => {
                    if a > sigma {
                        1.0
                    } else {
                        0.0
                    }
                }
                CoefficientSpec::StepTimesSigmoid {
                    sigma,
                    base,
                    ell_scale,
                } => {
                    if a > sigma {
                        base + ell_scale * x / (1.0 + x)
                    } else {
                        0.0
                    }
                }
                CoefficientSpec::Constant { s0 } => s0,
                CoefficientSpec::LinearCapped {
                    sigma,
                    base,
                    slope,
                    cap,
                } => {
                    if a > sigma {
                        base + slope * x.min(cap)
                    } else {
                        0.0
                    }
                }
            },
            Shape::Custom(f) => f(a, x),
        }
    }

    pub fn spec(&self) -> Option<&CoefficientSpec> {
        match &self.shape {
            Shape::Builtin(spec) => Some(spec),
            Shape::Custom(_) => None,
        }
    }

    pub fn constants(&self) -> CoefficientConstants {
        self.constants
    }

    pub fn lipschitz_ell(&self) -> f64 {
        self.constants.lipschitz_ell
    }

    pub fn sup_norm(&self) -> f64 {
        self.constants.sup_norm
    }

    pub fn s0(&self) -> f64 {
        self.constants.s0
    }

    pub fn sigma(&self) -> f64 {
        self.constants.sigma
    }

    /// `S(a_i, x)` at every cell midpoint of `grid`.
    pub fn frozen_profile(&self, grid: &AgeGrid, x: f64) -> Vec<f64> {
        (0..grid.n_cells())
            .map(|i| self.evaluate(grid.midpoint(i), x))
            .collect()
    }

    /// Same as [`frozen_profile`](Self::frozen_profile) but reuses `out`.
    pub fn frozen_profile_into(&self, grid: &AgeGrid, x: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..grid.n_cells()).map(|i| self.evaluate(grid.midpoint(i), x)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn catalogue() -> Vec<CoefficientSpec> {
        vec![
            CoefficientSpec::Step { sigma: 1.0 },
            CoefficientSpec::Step { sigma: 0.0 },
            CoefficientSpec::StepTimesSigmoid {
                sigma: 0.5,
                base: 0.5,
                ell_scale: 0.05,
            },
            CoefficientSpec::StepTimesSigmoid {
                sigma: 0.2,
                base: 1.0,
                ell_scale: -0.4,
            },
            CoefficientSpec::Constant { s0: 2.0 },
            CoefficientSpec::LinearCapped {
                sigma: 0.0,
                base: 1.0,
                slope: 0.1,
                cap: 20.0,
            },
        ]
    }

    #[test]
    fn constant_is_flat() {
        let s = make_builtin_coefficient(&CoefficientSpec::Constant { s0: 1.0 }).unwrap();
        for &(a, x) in &[(0.0, 0.0), (3.0, 10.0), (100.0, 0.5)] {
            assert_eq!(s.evaluate(a, x), 1.0);
        }
        assert_eq!(s.lipschitz_ell(), 0.0);
    }

    #[test]
    fn step_has_refractory_window() {
        let s = make_builtin_coefficient(&CoefficientSpec::Step { sigma: 1.0 }).unwrap();
        assert_eq!(s.evaluate(0.5, 3.0), 0.0);
        assert_eq!(s.evaluate(1.5, 3.0), 1.0);
        assert_eq!(s.lipschitz_ell(), 0.0);
    }

    #[test]
    fn sigmoid_constants() {
        let s = make_builtin_coefficient(&CoefficientSpec::StepTimesSigmoid {
            sigma: 0.0,
            base: 0.5,
            ell_scale: 0.05,
        })
        .unwrap();
        assert!((s.lipschitz_ell() - 0.05).abs() < 1e-15);
        assert!((s.sup_norm() - 0.55).abs() < 1e-15);
        assert!((s.s0() - 0.5).abs() < 1e-15);
        // finite-difference slope at X = 0 approaches ell
        let h = 1e-7;
        let slope = (s.evaluate(1.0, h) - s.evaluate(1.0, 0.0)) / h;
        assert!((slope - 0.05).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_builtin_coefficient(&CoefficientSpec::Step { sigma: -1.0 }).is_err());
        assert!(make_builtin_coefficient(&CoefficientSpec::Constant { s0: 0.0 }).is_err());
        assert!(make_builtin_coefficient(&CoefficientSpec::Constant { s0: f64::NAN }).is_err());
        assert!(make_builtin_coefficient(&CoefficientSpec::StepTimesSigmoid {
            sigma: 0.0,
            base: 0.1,
            ell_scale: -0.2
        })
        .is_err());
        assert!(make_builtin_coefficient(&CoefficientSpec::StepTimesSigmoid {
            sigma: f64::INFINITY,
            base: 0.5,
            ell_scale: 0.1
        })
        .is_err());
    }

    #[test]
    fn hypotheses_hold_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in catalogue() {
            let s = make_builtin_coefficient(&spec).unwrap();
            let c = s.constants();
            for _ in 0..10_000 {
                let a: f64 = rng.gen_range(0.0..10.0);
                let x: f64 = rng.gen_range(0.0..30.0);
                let y: f64 = rng.gen_range(0.0..30.0);
                let sx = s.evaluate(a, x);
                let sy = s.evaluate(a, y);
                assert!(sx >= 0.0, "{spec:?}");
                assert!(sx <= c.sup_norm, "{spec:?}");
                if a > c.sigma {
                    assert!(sx >= c.s0, "{spec:?}");
                }
                assert!(
                    (sx - sy).abs() <= c.lipschitz_ell * (x - y).abs() + 1e-15,
                    "{spec:?}"
                );
            }
        }
    }
}
