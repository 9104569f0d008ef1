//! Small quadrature toolbox shared by the solvers.

const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_85,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_85,
];

/// Four-point Gauss-Legendre rule on `[lo, hi]`.
pub fn gauss4<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> f64 {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    GL4_NODES
        .iter()
        .zip(GL4_WEIGHTS.iter())
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// Composite four-point Gauss-Legendre with `panels` equal panels.
pub fn composite_gauss4<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, panels: usize) -> f64 {
    if hi <= lo || panels == 0 {
        return 0.0;
    }
    let h = (hi - lo) / panels as f64;
    let mut acc = KahanSum::default();
    for p in 0..panels {
        let a = lo + h * p as f64;
        acc.add(gauss4(&f, a, a + h));
    }
    acc.total()
}

/// Integrates `f(s)` over a lag interval `[lo, hi]` (lo >= 0) in the variable
/// `u = ln(1 + s)`. Heavy algebraic tails become smooth exponentials in `u`,
/// so a modest number of panels covers horizons spanning many decades.
pub fn lag_integral<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, panels: usize) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let u_lo = lo.ln_1p();
    let u_hi = hi.ln_1p();
    composite_gauss4(
        |u| {
            let e = u.exp();
            f(e - 1.0) * e
        },
        u_lo,
        u_hi,
        panels,
    )
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::default();
        for x in iter {
            k.add(x);
        }
        k
    }
}

/// `(1 - e^{-x}) / x`, continuous at zero.
pub fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - 0.5 * x
    } else {
        -(-x).exp_m1() / x
    }
}
