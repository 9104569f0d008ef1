//! Executes a prepared scenario and writes its artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use elapsed_core::analysis::{fit_envelope, measure_linear_gap, GapOptions, GapReport, RateFit};
use elapsed_core::model::{AgeDensity, Equilibrium, HistoryFunction};
use elapsed_core::simulate::{simulate, SimulationConfig, SimulationTrace, Variant};
use elapsed_core::steady::{equilibrium_density, linear_equilibrium, solve_steady_state, RootReport};
use elapsed_core::trials::{convolution_comparison_trials, delayed_comparison_trials, exponential_certificate_trials};
use elapsed_core::volterra::{
    build_algebraic_certificate, build_exponential_certificate, AlgebraicOptions, CertificateKind,
};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{self, invalid, CertificateChoice, DensityInit, Interaction, Prepared, RunError, Series, Task};

pub const ERRORS_LOG: &str = "errors.log";
pub const MANIFEST: &str = "manifest.json";

/// Every file a run may write; stale copies are removed before a run.
pub const ARTIFACTS: &[&str] = &[
    "steady.json",
    "steady_density.csv",
    "trace.csv",
    "final_density.csv",
    "simulate.json",
    "linear_gap.json",
    "rate_fit.json",
    "certificate.json",
    "volterra_check.json",
    MANIFEST,
    ERRORS_LOG,
];

/// Outcome of one scenario.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub exit_code: i32,
    pub error: Option<RunError>,
}

/// Serializes with sorted keys, pretty-printed, newline-terminated.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String, RunError> {
    let v = serde_json::to_value(value).map_err(|e| invalid(format!("serialization: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| invalid(format!("serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), RunError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), RunError> {
    write_file(dir, name, &to_sorted_json(value)?)
}

fn density_csv(n: &AgeDensity) -> String {
    let mut out = String::from("a_mid,n\n");
    for (a, v) in n.grid().midpoints().zip(n.cells()) {
        let _ = writeln!(out, "{a:.16e},{v:.16e}");
    }
    out
}

fn trace_csv(trace: &SimulationTrace) -> String {
    let mut out = String::from("t,r,X,mass,tv\n");
    for i in 0..trace.len() {
        let tv = trace.tv_series.as_ref().map_or(f64::NAN, |s| s[i]);
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            trace.times[i], trace.r_series[i], trace.x_series[i], trace.mass_series[i], tv
        );
    }
    out
}

/// State shared by the tasks of one scenario.
struct Context<'a> {
    prepared: &'a Prepared,
    dir: PathBuf,
    roots: Option<RootReport>,
    equilibrium: Option<Equilibrium>,
    trace: Option<SimulationTrace>,
    gap: Option<GapReport>,
}

impl Context<'_> {
    fn r_max_scan(&self) -> f64 {
        self.prepared
            .scenario
            .steady
            .r_max_scan
            .unwrap_or(4.0 * self.prepared.coefficient.sup_norm())
    }

    fn roots(&mut self) -> Result<&RootReport, RunError> {
        if self.roots.is_none() {
            let p = self.prepared;
            self.roots = Some(solve_steady_state(&p.coefficient, &p.grid, self.r_max_scan())?);
        }
        Ok(self.roots.as_ref().expect("set above"))
    }

    /// Reference equilibrium: the frozen-activity stationary state for the
    /// linear variant, else the selected root of the steady-state equation.
    fn equilibrium(&mut self) -> Result<Equilibrium, RunError> {
        if let Some(eq) = &self.equilibrium {
            return Ok(eq.clone());
        }
        let p = self.prepared;
        let eq = match p.scenario.model.interaction {
            Interaction::LinearFrozen { r_bar } => linear_equilibrium(&p.coefficient, r_bar, &p.grid)?,
            _ => {
                let index = p.scenario.steady.root;
                let roots = self.roots()?;
                let r_star = *roots.roots.get(index).ok_or_else(|| {
                    invalid(format!(
                        "steady.root = {index} but only {} equilibria were found",
                        roots.roots.len()
                    ))
                })?;
                equilibrium_density(&p.coefficient, r_star, &p.grid)?
            }
        };
        self.equilibrium = Some(eq.clone());
        Ok(eq)
    }

    fn run_task(&mut self, task: Task) -> Result<Vec<&'static str>, RunError> {
        match task {
            Task::Steady => self.steady(),
            Task::Simulate => self.simulate(),
            Task::LinearGap => self.linear_gap(),
            Task::RateFit => self.rate_fit(),
            Task::Certificate => self.certificate(),
            Task::VolterraCheck => self.volterra_check(),
        }
    }

    fn steady(&mut self) -> Result<Vec<&'static str>, RunError> {
        let r_max_scan = self.r_max_scan();
        let roots = self.roots()?.clone();
        let eq = self.equilibrium()?;
        let body = json!({
            "roots": roots.roots,
            "residuals": roots.residuals,
            "r_max_scan": r_max_scan,
            "scan_points": roots.bracket_scan.len(),
            "reference": { "r_star": eq.r_star, "x_star": eq.x_star },
        });
        write_json(&self.dir, "steady.json", &body)?;
        write_file(&self.dir, "steady_density.csv", &density_csv(&eq.density))?;
        Ok(vec!["steady.json", "steady_density.csv"])
    }

    fn initial_density(&mut self, eq: &Equilibrium) -> Result<AgeDensity, RunError> {
        if let Some(n) = &self.prepared.explicit_density {
            return Ok(n.clone());
        }
        match self.prepared.scenario.initial.density {
            DensityInit::EquilibriumPerturbed { amplitude, period } => {
                let grid = *eq.density.grid();
                let cells = grid
                    .midpoints()
                    .zip(eq.density.cells())
                    .map(|(a, n)| n * (1.0 + amplitude * (std::f64::consts::TAU * a / period).cos()))
                    .collect();
                Ok(AgeDensity::new(grid, cells)?.normalized()?)
            }
            _ => unreachable!("explicit densities are built during validation"),
        }
    }

    fn simulate(&mut self) -> Result<Vec<&'static str>, RunError> {
        let p = self.prepared;
        let m = &p.scenario.model;
        let eq = self.equilibrium()?;
        let variant = match &m.interaction {
            Interaction::Instantaneous => Variant::Instantaneous,
            Interaction::DiscreteDelay { d } => Variant::DiscreteDelay { d: *d },
            Interaction::Distributed { .. } => Variant::DistributedDelay {
                kernel: p.kernel.clone().expect("kernel built during validation"),
            },
            Interaction::LinearFrozen { r_bar } => Variant::LinearFrozen { r_bar: *r_bar },
        };
        let n0 = self.initial_density(&eq)?;
        let mut history = HistoryFunction::new(p.past_rate(eq.r_star), p.grid.delta())?;
        let config = SimulationConfig::new(variant, p.grid, m.t_end, m.record_every)?.with_reference(eq.clone());
        let trace = simulate(&config, &p.coefficient, &n0, &mut history)?;
        let max_mass_defect = trace.mass_series.iter().fold(0.0f64, |acc, m| acc.max((m - 1.0).abs()));
        write_file(&self.dir, "trace.csv", &trace_csv(&trace))?;
        write_file(&self.dir, "final_density.csv", &density_csv(&trace.final_density))?;
        let body = json!({
            "records": trace.len(),
            "max_mass_defect": max_mass_defect,
            "reference": { "r_star": eq.r_star, "x_star": eq.x_star },
            "warnings": trace.warnings,
        });
        write_json(&self.dir, "simulate.json", &body)?;
        self.trace = Some(trace);
        Ok(vec!["trace.csv", "final_density.csv", "simulate.json"])
    }

    fn linear_gap(&mut self) -> Result<Vec<&'static str>, RunError> {
        let p = self.prepared;
        let o = &p.scenario.linear_gap;
        let r_bar = match o.r_bar {
            Some(r) => r,
            None => self.equilibrium()?.r_star,
        };
        let options = GapOptions {
            probes: o.probes,
            seed: p.scenario.seed,
            window: o.window,
            record_every: p.scenario.model.record_every,
        };
        let t_end = o.t_end.unwrap_or(p.scenario.model.t_end);
        let report = measure_linear_gap(&p.coefficient, r_bar, &p.grid, t_end, &options)?;
        write_json(&self.dir, "linear_gap.json", &report)?;
        self.gap = Some(report);
        Ok(vec!["linear_gap.json"])
    }

    fn rate_fit(&mut self) -> Result<Vec<&'static str>, RunError> {
        let p = self.prepared;
        let o = &p.scenario.rate_fit;
        let eq = self.equilibrium()?;
        let trace = self.trace.as_ref().expect("validation orders simulate first");
        let t_hi = o.t_hi.unwrap_or(p.scenario.model.t_end);
        let mut fits: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
        for &series in &o.series {
            let values: Vec<f64> = match series {
                Series::Tv => match &trace.tv_series {
                    Some(tv) => tv.clone(),
                    None => continue,
                },
                Series::R => trace.r_series.iter().map(|r| r - eq.r_star).collect(),
                Series::X => trace.x_series.iter().map(|x| x - eq.x_star).collect(),
            };
            let entry = match fit_envelope(&trace.times, &values, o.kind, o.t_lo, t_hi, o.floor) {
                Ok(fit) => fit_json(&fit),
                Err(e) if e.is_numerical() => return Err(e.into()),
                Err(e) => json!({ "error": e.to_string() }),
            };
            fits.insert(series.name(), entry);
        }
        write_json(&self.dir, "rate_fit.json", &fits)?;
        Ok(vec!["rate_fit.json"])
    }

    fn certificate(&mut self) -> Result<Vec<&'static str>, RunError> {
        let p = self.prepared;
        let lambda_hat = self.gap.as_ref().map(|g| g.lambda_hat);
        let constants = p.certificate_constants(lambda_hat)?;
        let choice = p.scenario.certificate.as_ref().expect("validated").kind;
        let certificate = match choice {
            CertificateChoice::DiscreteDelay => build_exponential_certificate(CertificateKind::DiscreteDelay, &constants)?,
            CertificateChoice::DistributedExp => {
                build_exponential_certificate(CertificateKind::DistributedExp, &constants)?
            }
            CertificateChoice::Algebraic => build_algebraic_certificate(
                &constants,
                p.kernel.as_ref().expect("validated"),
                &AlgebraicOptions::default(),
            )?,
        };
        write_json(&self.dir, "certificate.json", &certificate)?;
        Ok(vec!["certificate.json"])
    }

    fn volterra_check(&mut self) -> Result<Vec<&'static str>, RunError> {
        let p = self.prepared;
        let o = &p.scenario.volterra_check;
        let seed = p.scenario.seed;
        let delayed = delayed_comparison_trials(seed, o.delayed_problems, o.candidates_per_side)?;
        let convolution =
            convolution_comparison_trials(seed.wrapping_add(1), o.convolution_problems, o.candidates_per_side)?;
        let certificates = if o.certificates > 0 {
            Some(exponential_certificate_trials(
                seed.wrapping_add(2),
                o.certificates,
                o.certificate_t_end,
            )?)
        } else {
            None
        };
        let body = json!({
            "delayed": delayed,
            "convolution": convolution,
            "certificates": certificates,
        });
        write_json(&self.dir, "volterra_check.json", &body)?;
        Ok(vec!["volterra_check.json"])
    }
}

fn fit_json(fit: &RateFit) -> serde_json::Value {
    serde_json::to_value(fit).unwrap_or(serde_json::Value::Null)
}

fn clear_artifacts(dir: &Path) {
    for name in ARTIFACTS {
        let _ = fs::remove_file(dir.join(name));
    }
}

fn write_error_log(dir: &Path, error: &RunError) {
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(dir.join(ERRORS_LOG), format!("{error}\n"));
    }
}

/// Best-effort output directory of a config that failed to parse.
fn fallback_output_dir(path: &Path, base: &Path) -> Option<PathBuf> {
    let text = fs::read_to_string(path).ok()?;
    let value: toml::Table = text.parse().ok()?;
    value.get("output_dir")?.as_str().map(|d| base.join(d))
}

/// Parses and validates a config without running anything.
pub fn validate(path: &Path) -> Result<Prepared, RunError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let (scenario, _) = config::load(path)?;
    config::prepare(scenario, base)
}

/// Runs one scenario file end to end.
pub fn run(path: &Path) -> RunReport {
    let started = Instant::now();
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let fail = |output_dir: Option<PathBuf>, error: RunError| {
        if let Some(dir) = &output_dir {
            clear_artifacts(dir);
            write_error_log(dir, &error);
        }
        RunReport {
            config: path.to_path_buf(),
            output_dir,
            exit_code: error.exit_code(),
            error: Some(error),
        }
    };

    let (scenario, bytes) = match config::load(path) {
        Ok(v) => v,
        Err(e) => return fail(fallback_output_dir(path, &base), e),
    };
    let fallback_dir = base.join(&scenario.output_dir);
    let prepared = match config::prepare(scenario, &base) {
        Ok(p) => p,
        Err(e) => return fail(Some(fallback_dir), e),
    };
    let dir = prepared.output_dir.clone();
    if let Err(e) = fs::create_dir_all(&dir) {
        return fail(None, invalid(format!("cannot create {}: {e}", dir.display())));
    }
    clear_artifacts(&dir);

    let mut ctx = Context {
        prepared: &prepared,
        dir: dir.clone(),
        roots: None,
        equilibrium: None,
        trace: None,
        gap: None,
    };
    let mut tasks = Vec::new();
    let mut failure = None;
    for &task in &prepared.scenario.tasks {
        let t0 = Instant::now();
        match ctx.run_task(task) {
            Ok(artifacts) => tasks.push(json!({
                "task": task.name(),
                "artifacts": artifacts,
                "wall_clock_seconds": t0.elapsed().as_secs_f64(),
            })),
            Err(e) => {
                tasks.push(json!({
                    "task": task.name(),
                    "error": e.to_string(),
                    "wall_clock_seconds": t0.elapsed().as_secs_f64(),
                }));
                failure = Some(e);
                break;
            }
        }
    }

    let manifest = json!({
        "name": prepared.scenario.name,
        "config": path.display().to_string(),
        "config_sha256": format!("{:x}", Sha256::digest(&bytes)),
        "seed": prepared.scenario.seed,
        "versions": {
            "elapsed-cli": env!("CARGO_PKG_VERSION"),
            "elapsed-core": elapsed_core::VERSION,
        },
        "tasks": tasks,
        "status": failure.as_ref().map_or("ok".to_string(), |e| e.to_string()),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    });
    let mut error = failure;
    if let Err(e) = write_json(&dir, MANIFEST, &manifest) {
        error.get_or_insert(e);
    }
    if let Some(e) = &error {
        write_error_log(&dir, e);
    }
    RunReport {
        config: path.to_path_buf(),
        output_dir: Some(dir),
        exit_code: error.as_ref().map_or(0, RunError::exit_code),
        error,
    }
}
