//! Scenario files: TOML schema, validation and model construction.

use std::fmt;
use std::path::{Path, PathBuf};

use elapsed_core::model::{
    make_builtin_coefficient, AgeDensity, AgeGrid, CoefficientSpec, DelayKernel, FiringCoefficient, KernelSpec,
    PastRate, AGE_TAIL_TOL,
};
use elapsed_core::volterra::CertificateConstants;
use serde::{Deserialize, Serialize};

/// Failure of a scenario run, split by exit status.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    /// Bad configuration or unmet precondition (exit 2).
    Validation(String),
    /// Non-convergence or non-finite values (exit 3).
    Numerical(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 2,
            RunError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Validation(m) => write!(f, "validation error: {m}"),
            RunError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<elapsed_core::Error> for RunError {
    fn from(e: elapsed_core::Error) -> Self {
        if e.is_numerical() {
            RunError::Numerical(e.to_string())
        } else {
            RunError::Validation(e.to_string())
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> RunError {
    RunError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Steady,
    Simulate,
    LinearGap,
    RateFit,
    Certificate,
    VolterraCheck,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Steady => "steady",
            Task::Simulate => "simulate",
            Task::LinearGap => "linear-gap",
            Task::RateFit => "rate-fit",
            Task::Certificate => "certificate",
            Task::VolterraCheck => "volterra-check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub model: ModelConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub steady: SteadyOptions,
    #[serde(default)]
    pub linear_gap: LinearGapOptions,
    #[serde(default)]
    pub rate_fit: RateFitOptions,
    #[serde(default)]
    pub certificate: Option<CertificateOptions>,
    #[serde(default)]
    pub volterra_check: VolterraCheckOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub coefficient: CoefficientSpec,
    #[serde(default)]
    pub interaction: Interaction,
    pub grid: GridConfig,
    /// Time step; must equal `grid.delta` when given.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_end: f64,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Interaction {
    #[default]
    Instantaneous,
    DiscreteDelay {
        d: f64,
    },
    Distributed {
        kernel: KernelSpec,
    },
    LinearFrozen {
        r_bar: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub delta: f64,
    /// Defaults to the smallest truncation with tail mass below `tail_tol`.
    #[serde(default)]
    pub a_max: Option<f64>,
    #[serde(default)]
    pub tail_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub density: DensityInit,
    #[serde(default)]
    pub history: HistoryInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityInit {
    /// Uniform on `[0, width]`.
    Uniform { width: f64 },
    /// `n*(a) (1 + amplitude cos(2 pi a / period))`, renormalized.
    EquilibriumPerturbed {
        #[serde(default)]
        amplitude: f64,
        #[serde(default = "default_period")]
        period: f64,
    },
    /// Piecewise-linear through `(age, value)` points, renormalized.
    Tabulated { points: Vec<(f64, f64)> },
    /// Two-column CSV `age,value` (header optional), renormalized.
    File { path: PathBuf },
}

fn default_period() -> f64 {
    2.0
}

impl Default for DensityInit {
    fn default() -> Self {
        DensityInit::EquilibriumPerturbed {
            amplitude: 0.0,
            period: default_period(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HistoryInit {
    Constant { value: f64 },
    Tabulated { points: Vec<(f64, f64)> },
    /// Constant `factor * r*`.
    EquilibriumScaled { factor: f64 },
}

impl Default for HistoryInit {
    fn default() -> Self {
        HistoryInit::EquilibriumScaled { factor: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyOptions {
    /// Upper end of the root scan; defaults to `4 sup S`.
    #[serde(default)]
    pub r_max_scan: Option<f64>,
    /// Which root (in increasing order) serves as the reference equilibrium.
    #[serde(default)]
    pub root: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGapOptions {
    /// Frozen activity; defaults to the reference equilibrium rate.
    #[serde(default)]
    pub r_bar: Option<f64>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Defaults to `model.t_end`.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub window: Option<(f64, f64)>,
}

fn default_probes() -> usize {
    8
}

impl Default for LinearGapOptions {
    fn default() -> Self {
        Self {
            r_bar: None,
            probes: default_probes(),
            t_end: None,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    Tv,
    R,
    X,
}

impl Series {
    pub fn name(self) -> &'static str {
        match self {
            Series::Tv => "tv",
            Series::R => "r",
            Series::X => "x",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFitOptions {
    #[serde(default = "default_fit_kind")]
    pub kind: elapsed_core::analysis::DecayKind,
    #[serde(default = "default_series")]
    pub series: Vec<Series>,
    #[serde(default = "default_t_lo")]
    pub t_lo: f64,
    /// Defaults to `model.t_end`.
    #[serde(default)]
    pub t_hi: Option<f64>,
    /// The window ends where the forward envelope first drops below this.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_fit_kind() -> elapsed_core::analysis::DecayKind {
    elapsed_core::analysis::DecayKind::Exponential
}

fn default_series() -> Vec<Series> {
    vec![Series::Tv, Series::R, Series::X]
}

fn default_t_lo() -> f64 {
    2.0
}

fn default_floor() -> f64 {
    1e-11
}

impl Default for RateFitOptions {
    fn default() -> Self {
        Self {
            kind: default_fit_kind(),
            series: default_series(),
            t_lo: default_t_lo(),
            t_hi: None,
            floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateChoice {
    DiscreteDelay,
    DistributedExp,
    Algebraic,
}

/// Unset constants are taken from the model (`ell`, `d`, kernel tail
/// constants) or from an earlier linear-gap task (`lambda`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateOptions {
    pub kind: CertificateChoice,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    #[serde(default)]
    pub ell: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub d: Option<f64>,
    #[serde(default)]
    pub c_alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolterraCheckOptions {
    #[serde(default = "default_problems")]
    pub delayed_problems: usize,
    #[serde(default = "default_problems")]
    pub convolution_problems: usize,
    #[serde(default = "default_candidates")]
    pub candidates_per_side: usize,
    #[serde(default = "default_certificates")]
    pub certificates: usize,
    #[serde(default = "default_certificate_t_end")]
    pub certificate_t_end: f64,
}

fn default_problems() -> usize {
    100
}

fn default_candidates() -> usize {
    4
}

fn default_certificates() -> usize {
    50
}

fn default_certificate_t_end() -> f64 {
    30.0
}

impl Default for VolterraCheckOptions {
    fn default() -> Self {
        Self {
            delayed_problems: default_problems(),
            convolution_problems: default_problems(),
            candidates_per_side: default_candidates(),
            certificates: default_certificates(),
            certificate_t_end: default_certificate_t_end(),
        }
    }
}

/// Reads a scenario file. Parse failures are validation errors.
pub fn load(path: &Path) -> Result<(Scenario, Vec<u8>), RunError> {
    let bytes = std::fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let scenario = toml::from_str(text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((scenario, bytes))
}

/// A validated scenario with its model objects built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub output_dir: PathBuf,
    pub coefficient: FiringCoefficient,
    pub grid: AgeGrid,
    pub kernel: Option<DelayKernel>,
    pub n_steps: usize,
    /// Initial density when it does not depend on the equilibrium.
    pub explicit_density: Option<AgeDensity>,
}

fn check_positive(name: &str, v: f64) -> Result<(), RunError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_points(name: &str, points: &[(f64, f64)]) -> Result<(), RunError> {
    if points.is_empty() {
        return Err(invalid(format!("{name}: no points")));
    }
    if points.iter().any(|(a, v)| !a.is_finite() || !v.is_finite()) {
        return Err(invalid(format!("{name}: non-finite point")));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(invalid(format!("{name}: abscissae must increase strictly")));
    }
    Ok(())
}

/// Linear interpolation through `points`, zero outside their range.
pub(crate) fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let (first, last) = (points[0], points[points.len() - 1]);
    if x < first.0 || x > last.0 {
        return 0.0;
    }
    if points.len() == 1 {
        return first.1;
    }
    let j = points.partition_point(|p| p.0 <= x).clamp(1, points.len() - 1);
    let (p, q) = (points[j - 1], points[j]);
    p.1 + (q.1 - p.1) * (x - p.0) / (q.0 - p.0)
}

fn read_density_csv(path: &Path) -> Result<Vec<(f64, f64)>, RunError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [a, v] => a.parse::<f64>().ok().zip(v.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => points.push(p),
            None if i == 0 => {}
            None => return Err(invalid(format!("{}:{}: expected `age,value`", path.display(), i + 1))),
        }
    }
    Ok(points)
}

fn density_from_points(grid: AgeGrid, points: &[(f64, f64)], name: &str) -> Result<AgeDensity, RunError> {
    check_points(name, points)?;
    if points.iter().any(|p| p.1 < 0.0) {
        return Err(invalid(format!("{name}: negative density value")));
    }
    let n = AgeDensity::from_fn(grid, |a| interpolate(points, a))?;
    if !(n.mass() > 0.0) {
        return Err(invalid(format!("{name}: density has zero mass on the grid")));
    }
    Ok(n.normalized()?)
}

/// Validates a scenario and builds its model objects. `base_dir` anchors
/// relative paths.
pub fn prepare(scenario: Scenario, base_dir: &Path) -> Result<Prepared, RunError> {
    if scenario.name.trim().is_empty() {
        return Err(invalid("name must not be empty"));
    }
    if scenario.tasks.is_empty() {
        return Err(invalid("tasks must not be empty"));
    }
    let m = &scenario.model;
    check_positive("model.grid.delta", m.grid.delta)?;
    if let Some(dt) = m.dt {
        check_positive("model.dt", dt)?;
        if (dt - m.grid.delta).abs() > 1e-12 * dt {
            return Err(invalid(format!(
                "model.dt = {dt} must equal model.grid.delta = {}",
                m.grid.delta
            )));
        }
    }
    check_positive("model.t_end", m.t_end)?;
    if m.record_every == 0 {
        return Err(invalid("model.record_every must be at least 1"));
    }

    let coefficient = make_builtin_coefficient(&m.coefficient)?;
    let tail_tol = m.grid.tail_tol.unwrap_or(AGE_TAIL_TOL);
    check_positive("model.grid.tail_tol", tail_tol)?;
    let grid = match m.grid.a_max {
        Some(a_max) => {
            check_positive("model.grid.a_max", a_max)?;
            let g = AgeGrid::with_a_max(m.grid.delta, a_max)?;
            g.check_tail(&coefficient)?;
            g
        }
        None => AgeGrid::for_coefficient_with_tol(&coefficient, m.grid.delta, tail_tol)?,
    };

    let ratio = m.t_end / m.grid.delta;
    let n_steps = ratio.round();
    if (ratio - n_steps).abs() > 1e-6 * ratio.max(1.0) || n_steps < 1.0 {
        return Err(invalid(format!(
            "model.t_end = {} is not a multiple of dt = {}",
            m.t_end, m.grid.delta
        )));
    }
    let n_steps = n_steps as usize;
    if !n_steps.is_multiple_of(m.record_every) {
        return Err(invalid(format!(
            "model.record_every = {} does not divide the {n_steps} steps",
            m.record_every
        )));
    }

    let kernel = match &m.interaction {
        Interaction::Instantaneous => None,
        Interaction::DiscreteDelay { d } => {
            check_positive("model.interaction.d", *d)?;
            None
        }
        Interaction::Distributed { kernel } => Some(DelayKernel::from_spec(kernel)?),
        Interaction::LinearFrozen { r_bar } => {
            if !(r_bar.is_finite() && *r_bar >= 0.0) {
                return Err(invalid(format!("model.interaction.r_bar must be nonnegative, got {r_bar}")));
            }
            None
        }
    };

    let explicit_density = match &scenario.initial.density {
        DensityInit::Uniform { width } => {
            check_positive("initial.density.width", *width)?;
            Some(AgeDensity::uniform(grid, *width)?)
        }
        DensityInit::EquilibriumPerturbed { amplitude, period } => {
            if !(amplitude.is_finite() && (0.0..1.0).contains(amplitude)) {
                return Err(invalid(format!(
                    "initial.density.amplitude must lie in [0, 1), got {amplitude}"
                )));
            }
            check_positive("initial.density.period", *period)?;
            None
        }
        DensityInit::Tabulated { points } => Some(density_from_points(grid, points, "initial.density.points")?),
        DensityInit::File { path } => {
            let path = base_dir.join(path);
            let points = read_density_csv(&path)?;
            Some(density_from_points(grid, &points, &path.display().to_string())?)
        }
    };

    match &scenario.initial.history {
        HistoryInit::Constant { value } if !(value.is_finite() && *value >= 0.0) => {
            return Err(invalid(format!("initial.history.value must be nonnegative, got {value}")));
        }
        HistoryInit::Tabulated { points } => {
            check_points("initial.history.points", points)?;
            if points.iter().any(|p| p.1 < 0.0) {
                return Err(invalid("initial.history.points: negative rate"));
            }
        }
        HistoryInit::EquilibriumScaled { factor } if !(factor.is_finite() && *factor >= 0.0) => {
            return Err(invalid(format!("initial.history.factor must be nonnegative, got {factor}")));
        }
        _ => {}
    }

    if let Some(r) = scenario.steady.r_max_scan {
        check_positive("steady.r_max_scan", r)?;
    }

    let position = |t: Task| scenario.tasks.iter().position(|&x| x == t);
    if let Some(i) = position(Task::RateFit) {
        if !scenario.tasks[..i].contains(&Task::Simulate) {
            return Err(invalid("rate-fit needs an earlier simulate task"));
        }
        let o = &scenario.rate_fit;
        if o.series.is_empty() {
            return Err(invalid("rate_fit.series must not be empty"));
        }
        if !(o.t_lo.is_finite() && o.t_lo >= 0.0) {
            return Err(invalid("rate_fit.t_lo must be nonnegative"));
        }
        check_positive("rate_fit.floor", o.floor)?;
    }
    if position(Task::LinearGap).is_some() {
        let o = &scenario.linear_gap;
        if o.probes < 3 {
            return Err(invalid("linear_gap.probes must be at least 3"));
        }
        if let Some(t) = o.t_end {
            check_positive("linear_gap.t_end", t)?;
        }
    }
    if let Some(i) = position(Task::Certificate) {
        let c = scenario
            .certificate
            .as_ref()
            .ok_or_else(|| invalid("certificate task needs a [certificate] table"))?;
        if c.lambda.is_none() && !scenario.tasks[..i].contains(&Task::LinearGap) {
            return Err(invalid("certificate.lambda is unset and no earlier linear-gap task measures it"));
        }
        if c.kind == CertificateChoice::Algebraic && kernel.is_none() {
            return Err(invalid("algebraic certificates need a distributed kernel"));
        }
    }
    if position(Task::VolterraCheck).is_some() {
        check_positive("volterra_check.certificate_t_end", scenario.volterra_check.certificate_t_end)?;
    }

    let output_dir = base_dir.join(&scenario.output_dir);
    Ok(Prepared {
        scenario,
        output_dir,
        coefficient,
        grid,
        kernel,
        n_steps,
        explicit_density,
    })
}

impl Prepared {
    /// History of the rate before time zero, given the reference rate.
    pub fn past_rate(&self, r_star: f64) -> PastRate {
        match &self.scenario.initial.history {
            HistoryInit::Constant { value } => PastRate::Constant { value: *value },
            HistoryInit::Tabulated { points } => PastRate::Tabulated { points: points.clone() },
            HistoryInit::EquilibriumScaled { factor } => PastRate::Constant {
                value: factor * r_star,
            },
        }
    }

    /// Certificate constants with model defaults filled in.
    pub fn certificate_constants(&self, lambda_hat: Option<f64>) -> Result<CertificateConstants, RunError> {
        let c = self
            .scenario
            .certificate
            .as_ref()
            .ok_or_else(|| invalid("missing [certificate] table"))?;
        let tail = self.kernel.as_ref().and_then(|k| k.tail_constants());
        let d = c.d.or(match self.scenario.model.interaction {
            Interaction::DiscreteDelay { d } => Some(d),
            _ => None,
        });
        Ok(CertificateConstants {
            ell: c.ell.unwrap_or_else(|| self.coefficient.lipschitz_ell()),
            lambda: c
                .lambda
                .or(lambda_hat)
                .ok_or_else(|| invalid("certificate.lambda is unset"))?,
            c1: c.c1,
            c2: c.c2,
            c3: c.c3,
            d,
            c_alpha: c.c_alpha.or(tail.map(|t| t.0)),
            beta: c.beta.or(tail.map(|t| t.1)),
            mu: c.mu,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Scenario {
        toml::from_str(text).unwrap()
    }

    const MINIMAL: &str = r#"
        name = "t"
        output_dir = "out"
        tasks = ["steady"]
        [model]
        t_end = 1.0
        coefficient = { kind = "step", sigma = 1.0 }
        grid = { delta = 0.01 }
    "#;

    #[test]
    fn minimal_scenario_prepares() {
        let p = prepare(parse(MINIMAL), Path::new("/tmp")).unwrap();
        assert_eq!(p.n_steps, 100);
        assert_eq!(p.output_dir, Path::new("/tmp/out"));
        assert!(p.kernel.is_none());
    }

    #[test]
    fn negative_dt_is_rejected() {
        let text = MINIMAL.replace("t_end = 1.0", "t_end = 1.0\ndt = -0.01");
        let err = prepare(parse(&text), Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn record_every_must_divide_steps() {
        let text = MINIMAL.replace("t_end = 1.0", "t_end = 1.0\nrecord_every = 7");
        assert!(prepare(parse(&text), Path::new(".")).is_err());
    }

    #[test]
    fn rate_fit_needs_simulate_first() {
        let text = MINIMAL.replace(r#"tasks = ["steady"]"#, r#"tasks = ["rate-fit", "simulate"]"#);
        assert!(prepare(parse(&text), Path::new(".")).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seed", "sede").replace("name = \"t\"", "name = \"t\"\nsede = 1");
        assert!(toml::from_str::<Scenario>(&text).is_err());
    }

    #[test]
    fn interpolation_is_piecewise_linear() {
        let pts = [(0.0, 1.0), (1.0, 3.0), (2.0, 3.0)];
        assert_eq!(interpolate(&pts, 0.5), 2.0);
        assert_eq!(interpolate(&pts, 1.5), 3.0);
        assert_eq!(interpolate(&pts, 2.5), 0.0);
    }

    #[test]
    fn distributed_kernel_parses() {
        let text = MINIMAL.replace(
            "grid = { delta = 0.01 }",
            "grid = { delta = 0.01 }\ninteraction = { kind = \"distributed\", kernel = { kind = \"exponential\", beta = 1.0 } }",
        );
        let p = prepare(parse(&text), Path::new(".")).unwrap();
        assert!(p.kernel.is_some());
    }
}
