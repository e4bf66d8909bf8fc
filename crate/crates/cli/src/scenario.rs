//! Scenario files: parsing, validation and construction of core objects.
//!
//! Parsing is strict (unknown fields are rejected) and every semantic check
//! runs before any simulation starts. Errors carry the path of the offending
//! field.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mesoed::fock::FieldState;
use mesoed::photodetection::CascadeSpec;
use mesoed::{
    CausalKernel, DeviceId, DeviceRef, GaussianDevice, ModeSpec, PoissonDetector, Strictness,
    TimeGrid, Trajectory,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// A scenario rejected before any computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ValidationError {}

type Checked<T> = std::result::Result<T, ValidationError>;

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    /// Label written to the `experiment` column; defaults to the experiment kind.
    #[serde(default)]
    pub name: Option<String>,
    pub experiment: Experiment,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub propagator: Option<PropagatorSpec>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub external_field: FieldSpec,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_reps() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default = "one")]
    pub n_modes: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropagatorSpec {
    /// One free mode per grid mode, `G(τ) = sin(ωτ)/ω`.
    Modes { modes: Vec<ModeParams> },
    /// Dense kernel over the flattened `(step, mode)` index, one CSV row per
    /// kernel row. Relative paths resolve against the scenario file.
    KernelFile { path: PathBuf },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModeParams {
    pub omega: f64,
    #[serde(default = "unit")]
    pub hbar: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceSpec {
    /// Affine Gaussian device acting in a single mode:
    /// `J = mean + dt Σ χ(t−t') A(t') + noise`, `χ(τ) = chi·exp(−chi_decay·τ)`.
    Gaussian {
        id: u64,
        #[serde(default)]
        mode: usize,
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        chi: f64,
        #[serde(default)]
        chi_decay: f64,
        /// Whether the current may respond to the field at the same step.
        #[serde(default = "yes")]
        same_time: bool,
        #[serde(default)]
        noise_variance: f64,
        /// Exponential noise correlation time; zero gives white noise.
        #[serde(default)]
        noise_correlation_time: f64,
    },
    PoissonDetector {
        id: u64,
        #[serde(default)]
        input_mode: usize,
        #[serde(default)]
        output_mode: usize,
        efficiency: f64,
        #[serde(default)]
        dark_rate: f64,
        #[serde(default = "unit")]
        charge: f64,
    },
}

fn yes() -> bool {
    true
}

impl DeviceSpec {
    pub fn id(&self) -> u64 {
        match self {
            DeviceSpec::Gaussian { id, .. } | DeviceSpec::PoissonDetector { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// `offset + amplitude·sin(omega·t + phase)` in `mode`, or in every mode
    /// when `mode` is absent.
    Sinusoid {
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        mode: Option<usize>,
    },
    /// CSV with one row per step and one column per mode.
    Samples {
        path: PathBuf,
    },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// The first device dressed by its own radiation.
    Dress,
    /// All devices coupled through the propagator.
    Compose {
        /// Also compare against the loop of two dressed devices.
        #[serde(default)]
        check_commutation: bool,
    },
    /// Source (first device) feeding a detector (second device) on a two-mode grid.
    Detect,
    /// Perturb the external field at each step and check earlier currents.
    AuditCausality {
        #[serde(default = "audit_reps")]
        audit_reps: usize,
    },
    /// Finite-difference susceptibility of the composed network. Without
    /// `responses`/`probes` the full first-order matrix is reported.
    Susceptibility {
        #[serde(default)]
        responses: Vec<[usize; 2]>,
        #[serde(default)]
        probes: Vec<[usize; 2]>,
        #[serde(default)]
        step: Option<f64>,
    },
    /// Monte Carlo network statistics against the Gaussian closed form.
    OracleCompare,
    /// Single-degree-of-freedom self-action densities.
    #[serde(rename = "appendix-a")]
    AppendixA {
        chi: f64,
        g: f64,
        #[serde(default = "unit")]
        j0: f64,
        #[serde(default)]
        a_e: f64,
        #[serde(default)]
        a_e_early: f64,
    },
    /// Time-normal moments of one free mode on a truncated Fock space.
    Timenormal { n_max: usize, state: StateSpec },
}

fn audit_reps() -> usize {
    4
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Vacuum,
    Coherent { re: f64, im: f64 },
    Thermal { mean_occupation: f64 },
}

impl StateSpec {
    pub fn field_state(self) -> FieldState {
        match self {
            StateSpec::Vacuum => FieldState::Vacuum,
            StateSpec::Coherent { re, im } => FieldState::Coherent(Complex64::new(re, im)),
            StateSpec::Thermal { mean_occupation } => FieldState::Thermal { mean_occupation },
        }
    }
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Dress => "dress",
            Experiment::Compose { .. } => "compose",
            Experiment::Detect => "detect",
            Experiment::AuditCausality { .. } => "audit-causality",
            Experiment::Susceptibility { .. } => "susceptibility",
            Experiment::OracleCompare => "oracle-compare",
            Experiment::AppendixA { .. } => "appendix-a",
            Experiment::Timenormal { .. } => "timenormal",
        }
    }
}

/// Experiment kinds with a one-line description each.
pub const EXPERIMENTS: [(&str, &str); 8] = [
    (
        "dress",
        "one device driven by the external field plus its own radiation",
    ),
    (
        "compose",
        "several devices coupled through the retarded propagator",
    ),
    (
        "detect",
        "source to photodetector cascade with photocount statistics",
    ),
    (
        "audit-causality",
        "bit-level check that no current reacts to a later field",
    ),
    (
        "susceptibility",
        "finite-difference functional derivatives of current moments",
    ),
    (
        "oracle-compare",
        "Monte Carlo network statistics against the Gaussian closed form",
    ),
    (
        "appendix-a",
        "normalisation of instantaneous versus causally regularised self-action",
    ),
    (
        "timenormal",
        "time-normal field moments of a free mode against its classical doppelganger",
    ),
];

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub n_reps: Option<usize>,
    pub seed: Option<u64>,
}

/// A scenario with every core object constructed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub label: String,
    pub grid: Option<TimeGrid>,
    pub modes: Vec<ModeSpec>,
    pub propagator: Option<CausalKernel>,
    pub devices: Vec<DeviceRef>,
    pub gaussians: Vec<Option<Arc<GaussianDevice>>>,
    pub external_field: Option<Trajectory>,
    pub n_reps: usize,
    pub seed: u64,
}

pub fn parse(text: &str) -> Checked<Scenario> {
    let scenario: Scenario =
        serde_json::from_str(text).map_err(|e| ValidationError::new("scenario", e))?;
    if scenario.schema_version != SCHEMA_VERSION {
        return Err(ValidationError::new(
            "schema_version",
            format!("expected {SCHEMA_VERSION}, got {}", scenario.schema_version),
        ));
    }
    Ok(scenario)
}

pub fn load(path: &Path) -> Checked<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ValidationError::new(path.display().to_string(), e))?;
    parse(&text)
}

fn finite(field: &str, value: f64) -> Checked<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ValidationError::new(
            field,
            format!("must be finite, got {value}"),
        ))
    }
}

fn read_matrix(path: &Path, field: &str) -> Checked<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ValidationError::new(field, format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ValidationError::new(field, e))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f64>()
                    .map_err(|e| ValidationError::new(field, format!("row {r}, column {c}: {e}")))
            })
            .collect::<Checked<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn build_grid(spec: &GridSpec) -> Checked<TimeGrid> {
    TimeGrid::new(spec.t0, spec.dt, spec.n_steps, spec.n_modes)
        .map_err(|e| ValidationError::new("grid", e))
}

fn build_modes(spec: &PropagatorSpec, grid: Option<TimeGrid>) -> Checked<Vec<ModeSpec>> {
    let PropagatorSpec::Modes { modes } = spec else {
        return Ok(Vec::new());
    };
    if let Some(grid) = grid {
        if modes.len() != grid.n_modes() {
            return Err(ValidationError::new(
                "propagator.modes",
                format!(
                    "{} modes given for a grid with {}",
                    modes.len(),
                    grid.n_modes()
                ),
            ));
        }
    }
    modes
        .iter()
        .enumerate()
        .map(|(i, m)| {
            ModeSpec::new(m.omega, m.hbar)
                .map_err(|e| ValidationError::new(format!("propagator.modes[{i}]"), e))
        })
        .collect()
}

fn build_propagator(
    spec: &PropagatorSpec,
    grid: TimeGrid,
    modes: &[ModeSpec],
    base: &Path,
) -> Checked<CausalKernel> {
    match spec {
        PropagatorSpec::Modes { .. } => mesoed::retarded_diagonal(&grid, modes)
            .map_err(|e| ValidationError::new("propagator.modes", e)),
        PropagatorSpec::KernelFile { path } => {
            let rows = read_matrix(&resolve(base, path), "propagator.path")?;
            let d = grid.dim();
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(ValidationError::new(
                    "propagator.path",
                    format!("expected a {d}x{d} matrix"),
                ));
            }
            let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
            CausalKernel::new(grid, m, Strictness::Strict)
                .map_err(|e| ValidationError::new("propagator.path", e))
        }
    }
}

fn check_mode(field: String, mode: usize, grid: &TimeGrid) -> Checked<()> {
    if mode < grid.n_modes() {
        Ok(())
    } else {
        Err(ValidationError::new(
            field,
            format!("mode {mode} outside a grid with {} modes", grid.n_modes()),
        ))
    }
}

fn build_device(
    index: usize,
    spec: &DeviceSpec,
    grid: TimeGrid,
) -> Checked<(DeviceRef, Option<Arc<GaussianDevice>>)> {
    let at = |name: &str| format!("devices[{index}].{name}");
    match *spec {
        DeviceSpec::Gaussian {
            id,
            mode,
            mean,
            chi,
            chi_decay,
            same_time,
            noise_variance,
            noise_correlation_time,
        } => {
            check_mode(at("mode"), mode, &grid)?;
            finite(&at("mean"), mean)?;
            finite(&at("chi"), chi)?;
            finite(&at("chi_decay"), chi_decay)?;
            if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
                return Err(ValidationError::new(
                    at("noise_variance"),
                    "must be finite and non-negative",
                ));
            }
            if !(noise_correlation_time >= 0.0 && noise_correlation_time.is_finite()) {
                return Err(ValidationError::new(
                    at("noise_correlation_time"),
                    "must be finite and non-negative",
                ));
            }
            let strictness = if same_time {
                Strictness::SameTimeAllowed
            } else {
                Strictness::Strict
            };
            let dt = grid.dt();
            let chi_kernel = CausalKernel::from_fn(grid, strictness, |n, k, m, kp| {
                if k == mode && kp == mode && strictness.allows(n, m) {
                    chi * (-chi_decay * (n - m) as f64 * dt).exp()
                } else {
                    0.0
                }
            })
            .map_err(|e| ValidationError::new(at("chi"), e))?;
            let mu = Trajectory::from_fn(grid, |_, k| if k == mode { mean } else { 0.0 });
            let d = grid.dim();
            let cov = DMatrix::from_fn(d, d, |i, j| {
                let ((n, k), (m, kp)) = (grid.split_index(i), grid.split_index(j));
                if k != mode || kp != mode {
                    0.0
                } else if n == m {
                    noise_variance
                } else if noise_correlation_time > 0.0 {
                    noise_variance * (-(n.abs_diff(m) as f64) * dt / noise_correlation_time).exp()
                } else {
                    0.0
                }
            });
            let device = Arc::new(
                GaussianDevice::new(DeviceId(id), mu, chi_kernel, cov)
                    .map_err(|e| ValidationError::new(format!("devices[{index}]"), e))?,
            );
            Ok((device.clone(), Some(device)))
        }
        DeviceSpec::PoissonDetector {
            id,
            input_mode,
            output_mode,
            efficiency,
            dark_rate,
            charge,
        } => {
            check_mode(at("input_mode"), input_mode, &grid)?;
            check_mode(at("output_mode"), output_mode, &grid)?;
            let device = PoissonDetector::new(
                DeviceId(id),
                grid,
                input_mode,
                output_mode,
                efficiency,
                dark_rate,
                charge,
            )
            .map_err(|e| ValidationError::new(format!("devices[{index}]"), e))?;
            Ok((Arc::new(device), None))
        }
    }
}

fn build_field(spec: &FieldSpec, grid: TimeGrid, base: &Path) -> Checked<Trajectory> {
    match spec {
        FieldSpec::Constant { value } => Ok(Trajectory::constant(
            grid,
            finite("external_field.value", *value)?,
        )),
        FieldSpec::Sinusoid {
            amplitude,
            omega,
            phase,
            offset,
            mode,
        } => {
            for (name, v) in [
                ("amplitude", amplitude),
                ("omega", omega),
                ("phase", phase),
                ("offset", offset),
            ] {
                finite(&format!("external_field.{name}"), *v)?;
            }
            if let Some(m) = mode {
                check_mode("external_field.mode".into(), *m, &grid)?;
            }
            Ok(Trajectory::from_fn(grid, |n, k| {
                if mode.is_none_or(|m| m == k) {
                    offset + amplitude * (omega * grid.time(n) + phase).sin()
                } else {
                    0.0
                }
            }))
        }
        FieldSpec::Samples { path } => {
            let rows = read_matrix(&resolve(base, path), "external_field.path")?;
            if rows.len() != grid.n_steps() || rows.iter().any(|r| r.len() != grid.n_modes()) {
                return Err(ValidationError::new(
                    "external_field.path",
                    format!(
                        "expected {} rows of {} values",
                        grid.n_steps(),
                        grid.n_modes()
                    ),
                ));
            }
            Trajectory::new(grid, rows.into_iter().flatten().collect())
                .map_err(|e| ValidationError::new("external_field.path", e))
        }
    }
}

fn require<T: Copy>(value: Option<T>, field: &str, kind: &str) -> Checked<T> {
    value.ok_or_else(|| ValidationError::new(field, format!("required for experiment {kind}")))
}

/// Validates a scenario and builds every object the experiment needs.
/// `base` is the directory against which relative file paths resolve.
pub fn prepare(scenario: Scenario, base: &Path, overrides: Overrides) -> Checked<Prepared> {
    let kind = scenario.experiment.kind();
    let n_reps = overrides.n_reps.unwrap_or(scenario.n_reps);
    let seed = overrides.seed.unwrap_or(scenario.seed);
    if n_reps == 0 {
        return Err(ValidationError::new("n_reps", "must be positive"));
    }
    let mut seen = HashSet::new();
    for (i, d) in scenario.devices.iter().enumerate() {
        if !seen.insert(d.id()) {
            return Err(ValidationError::new(
                format!("devices[{i}].id"),
                format!("duplicate device id {}", d.id()),
            ));
        }
    }

    let grid = scenario.grid.as_ref().map(build_grid).transpose()?;
    let modes = match &scenario.propagator {
        Some(p) => build_modes(p, grid)?,
        None => Vec::new(),
    };

    let needs_network = !matches!(
        scenario.experiment,
        Experiment::AppendixA { .. } | Experiment::Timenormal { .. }
    );
    let mut prepared = Prepared {
        label: scenario.name.clone().unwrap_or_else(|| kind.to_string()),
        grid,
        modes,
        propagator: None,
        devices: Vec::new(),
        gaussians: Vec::new(),
        external_field: None,
        n_reps,
        seed,
        scenario,
    };
    if needs_network {
        let grid = require(grid, "grid", kind)?;
        let propagator = prepared.scenario.propagator.as_ref().ok_or_else(|| {
            ValidationError::new("propagator", format!("required for experiment {kind}"))
        })?;
        prepared.propagator = Some(build_propagator(propagator, grid, &prepared.modes, base)?);
        if prepared.scenario.devices.is_empty() {
            return Err(ValidationError::new(
                "devices",
                format!("at least one device required for experiment {kind}"),
            ));
        }
        for (i, spec) in prepared.scenario.devices.iter().enumerate() {
            let (device, gaussian) = build_device(i, spec, grid)?;
            prepared.devices.push(device);
            prepared.gaussians.push(gaussian);
        }
        prepared.external_field = Some(build_field(&prepared.scenario.external_field, grid, base)?);
    }
    check_experiment(&prepared)?;
    Ok(prepared)
}

fn check_experiment(p: &Prepared) -> Checked<()> {
    let kind = p.scenario.experiment.kind();
    match &p.scenario.experiment {
        Experiment::Dress => {
            if p.devices.len() != 1 {
                return Err(ValidationError::new(
                    "devices",
                    format!("dress takes exactly one device, got {}", p.devices.len()),
                ));
            }
        }
        Experiment::Compose { check_commutation } => {
            if *check_commutation && p.devices.len() != 2 {
                return Err(ValidationError::new(
                    "experiment.check_commutation",
                    "needs exactly two devices",
                ));
            }
        }
        Experiment::Detect => {
            let grid = require(p.grid, "grid", kind)?;
            if grid.n_modes() != 2 {
                return Err(ValidationError::new(
                    "grid.n_modes",
                    "detect needs an input and an output mode",
                ));
            }
            if p.devices.len() != 2 {
                return Err(ValidationError::new(
                    "devices",
                    "detect takes a source and a detector",
                ));
            }
            if p.modes.len() != 2 {
                return Err(ValidationError::new(
                    "propagator",
                    "detect needs a two-mode propagator given as modes",
                ));
            }
            if p.n_reps < 2 {
                return Err(ValidationError::new(
                    "n_reps",
                    "detect needs at least two replications",
                ));
            }
            if p.scenario.external_field.is_nonzero() {
                return Err(ValidationError::new(
                    "external_field",
                    "detect runs without an external field",
                ));
            }
            p.cascade()?;
        }
        Experiment::AuditCausality { audit_reps } => {
            if *audit_reps == 0 {
                return Err(ValidationError::new(
                    "experiment.audit_reps",
                    "must be positive",
                ));
            }
        }
        Experiment::Susceptibility {
            responses,
            probes,
            step,
        } => {
            let grid = require(p.grid, "grid", kind)?;
            if responses.is_empty() != probes.is_empty() {
                return Err(ValidationError::new(
                    "experiment.probes",
                    "give both responses and probes, or neither",
                ));
            }
            for (name, points) in [("responses", responses), ("probes", probes)] {
                for (i, [n, k]) in points.iter().enumerate() {
                    if *n >= grid.n_steps() || *k >= grid.n_modes() {
                        return Err(ValidationError::new(
                            format!("experiment.{name}[{i}]"),
                            "outside the grid",
                        ));
                    }
                }
            }
            if probes.len() > 8 {
                return Err(ValidationError::new(
                    "experiment.probes",
                    "at most 8 probe points",
                ));
            }
            if let Some(h) = step {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(ValidationError::new("experiment.step", "must be positive"));
                }
            }
        }
        Experiment::OracleCompare => {
            if let Some(i) = p.gaussians.iter().position(Option::is_none) {
                return Err(ValidationError::new(
                    format!("devices[{i}].kind"),
                    "oracle-compare needs Gaussian devices",
                ));
            }
            if p.n_reps < 2 {
                return Err(ValidationError::new(
                    "n_reps",
                    "oracle-compare needs at least two replications",
                ));
            }
        }
        Experiment::AppendixA {
            chi,
            g,
            j0,
            a_e,
            a_e_early,
        } => {
            for (name, v) in [
                ("chi", chi),
                ("g", g),
                ("a_e", a_e),
                ("a_e_early", a_e_early),
            ] {
                finite(&format!("experiment.{name}"), *v)?;
            }
            if !(*j0 > 0.0 && j0.is_finite()) {
                return Err(ValidationError::new("experiment.j0", "must be positive"));
            }
            if (chi * g).abs() >= 1.0 {
                return Err(ValidationError::new(
                    "experiment.chi",
                    "|chi*g| must be below 1",
                ));
            }
        }
        Experiment::Timenormal { n_max, state } => {
            let grid = require(p.grid, "grid", kind)?;
            if grid.n_modes() != 1 {
                return Err(ValidationError::new(
                    "grid.n_modes",
                    "timenormal uses a single mode",
                ));
            }
            if p.modes.len() != 1 {
                return Err(ValidationError::new(
                    "propagator",
                    "timenormal needs one mode given as modes",
                ));
            }
            mesoed::timenormal::FockOracle::new(*n_max, p.modes[0], state.field_state())
                .map_err(|e| ValidationError::new("experiment", e))?;
        }
    }
    Ok(())
}

impl Prepared {
    /// The source/detector cascade of a detect experiment.
    pub fn cascade(&self) -> Checked<CascadeSpec> {
        let grid = require(self.grid, "grid", "detect")?
            .with_modes(1)
            .map_err(|e| ValidationError::new("grid", e))?;
        let kernel = |i: usize| {
            mesoed::retarded_single_mode(&grid, self.modes[i])
                .map_err(|e| ValidationError::new(format!("propagator.modes[{i}]"), e))
        };
        let charge = match self.scenario.devices.get(1) {
            Some(DeviceSpec::PoissonDetector { charge, .. }) => *charge,
            _ => 1.0,
        };
        CascadeSpec::new(
            self.devices[0].clone(),
            self.devices[1].clone(),
            kernel(0)?,
            kernel(1)?,
            charge,
        )
        .map_err(|e| ValidationError::new("devices", e))
    }
}

impl FieldSpec {
    fn is_nonzero(&self) -> bool {
        !matches!(self, FieldSpec::Constant { value } if *value == 0.0)
    }
}

/// JSON schema of the scenario format.
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(Scenario)).expect("schema serialises")
}

#[cfg(test)]
mod tests {
    use super::*;

    const NORMALIZATION: &str = r#"{"schema_version": 1, "experiment": {"kind": "appendix-a", "chi": 0.5, "g": 1.0, "a_e": 0.0, "a_e_early": 0.0}}"#;

    #[test]
    fn defaults_fill_in() {
        let s = parse(NORMALIZATION).unwrap();
        assert_eq!(s.n_reps, 1000);
        assert_eq!(s.experiment.kind(), "appendix-a");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err =
            parse(&NORMALIZATION.replace("\"schema_version\": 1", "\"schema_version\": 7")).unwrap_err();
        assert_eq!(err.field, "schema_version");
    }

    #[test]
    fn every_experiment_kind_is_listed() {
        let kinds: Vec<&str> = EXPERIMENTS.iter().map(|(k, _)| *k).collect();
        assert!(kinds.contains(&parse(NORMALIZATION).unwrap().experiment.kind()));
        assert_eq!(kinds.len(), 8);
    }
}
