//! Networks of devices coupled only through the shared retarded field.
//!
//! One replication is one forward time loop. At step `n` every device sees
//! the same local field `A_e[n] + (G_R Σₖ Jₖ)[n]`, which only involves
//! currents at earlier steps, and then draws its current for step `n`.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::devices::{radiate, sample_bare, BareDevice, DeviceRef, StepSampler, VectorMoments};
use crate::dressing::{dress, seed_accumulators, DressedDevice, Radiator};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{
    gaussian_compose, gaussian_compose_bare, marginal_total, AffineGaussianSpec,
};
use crate::numerics::ExactSum;
use crate::rng::{DeviceId, StreamKey};
use crate::timegrid::{CausalKernel, TimeGrid, Trajectory};

/// Independent devices seeing the same field, reporting the summed current.
#[derive(Clone)]
pub struct ComposedDevice {
    id: DeviceId,
    parts: Vec<DeviceRef>,
}

impl fmt::Debug for ComposedDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComposedDevice")
            .field("id", &self.id)
            .field("parts", &self.parts)
            .finish()
    }
}

/// Bare composition: each part is sampled independently given the same local
/// field and the currents are summed in the given order.
pub fn compose_bare(parts: Vec<DeviceRef>) -> Result<ComposedDevice> {
    let first = parts
        .first()
        .ok_or(invalid("parts", "need at least one device"))?;
    let grid = *first.grid();
    for p in &parts {
        grid.ensure_same(p.grid(), "compose_bare")?;
    }
    check_disjoint_streams(&parts)?;
    Ok(ComposedDevice {
        id: first.id(),
        parts,
    })
}

fn check_disjoint_streams(devices: &[DeviceRef]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in devices {
        for id in d.stream_ids() {
            if !seen.insert(id) {
                return Err(Error::DuplicateDevice(id.0));
            }
        }
    }
    Ok(())
}

impl ComposedDevice {
    pub fn parts(&self) -> &[DeviceRef] {
        &self.parts
    }
}

struct ComposedSampler<'a> {
    parts: Vec<Box<dyn StepSampler + 'a>>,
    scratch: Vec<f64>,
}

impl StepSampler for ComposedSampler<'_> {
    fn step(&mut self, step: usize, field: &[f64], current: &mut [f64]) {
        let mut parts = self.parts.iter_mut();
        if let Some(first) = parts.next() {
            first.step(step, field, current);
        }
        for p in parts {
            p.step(step, field, &mut self.scratch);
            for (c, s) in current.iter_mut().zip(&self.scratch) {
                *c += s;
            }
        }
    }
}

impl BareDevice for ComposedDevice {
    fn id(&self) -> DeviceId {
        self.id
    }

    fn grid(&self) -> &TimeGrid {
        self.parts[0].grid()
    }

    fn sampler(&self, key: StreamKey) -> Box<dyn StepSampler + '_> {
        Box::new(ComposedSampler {
            parts: self.parts.iter().map(|p| p.sampler(key)).collect(),
            scratch: vec![0.0; self.grid().n_modes()],
        })
    }

    fn is_field_insensitive(&self) -> bool {
        self.parts.iter().all(|p| p.is_field_insensitive())
    }

    fn has_same_time_response(&self) -> bool {
        self.parts.iter().any(|p| p.has_same_time_response())
    }

    fn emission_modes(&self) -> Vec<usize> {
        let mut modes: Vec<usize> = self.parts.iter().flat_map(|p| p.emission_modes()).collect();
        modes.sort_unstable();
        modes.dedup();
        modes
    }

    fn stream_ids(&self) -> Vec<DeviceId> {
        self.parts.iter().flat_map(|p| p.stream_ids()).collect()
    }
}

/// An `N`-device network experiment.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub devices: Vec<DeviceRef>,
    pub propagator: CausalKernel,
    pub external_field: Trajectory,
    pub n_reps: usize,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(
        devices: Vec<DeviceRef>,
        propagator: CausalKernel,
        external_field: Trajectory,
        n_reps: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            devices,
            propagator,
            external_field,
            n_reps,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(invalid("devices", "a network needs at least one device"));
        }
        if self.n_reps == 0 {
            return Err(invalid("n_reps", "must be positive"));
        }
        let grid = self.grid();
        grid.ensure_same(self.propagator.grid(), "network propagator")?;
        for d in &self.devices {
            grid.ensure_same(d.grid(), "network device")?;
        }
        if !self.propagator.is_strict() {
            return Err(Error::SameTimeSelfAction);
        }
        check_disjoint_streams(&self.devices)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.external_field.grid()
    }
}

/// One replication of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSample {
    pub device_currents: Vec<Trajectory>,
    pub total_current: Trajectory,
    /// `A_e + G_R J` as seen by the devices.
    pub local_field: Trajectory,
    /// `G_R J`, the field radiated by the total current.
    pub radiated_field: Trajectory,
}

impl NetworkSample {
    /// Per-device currents concatenated device-major.
    pub fn stacked_currents(&self) -> Vec<f64> {
        self.device_currents
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }
}

/// Runs one replication of the time loop.
pub fn run_network_loop(
    devices: &[DeviceRef],
    radiator: &Radiator,
    propagator: &CausalKernel,
    external_field: &Trajectory,
    key: StreamKey,
) -> Result<NetworkSample> {
    let grid = *external_field.grid();
    let modes = grid.n_modes();
    let dim = grid.dim();
    let mut samplers: Vec<_> = devices.iter().map(|d| d.sampler(key)).collect();
    let mut currents = vec![vec![0.0; dim]; devices.len()];
    let mut total = vec![0.0; dim];
    let mut local = vec![0.0; dim];
    let mut acc = vec![ExactSum::new(); modes];
    for n in 0..grid.n_steps() {
        seed_accumulators(&mut acc, external_field.row(n));
        for c in &currents {
            radiator.accumulate(n, c, &mut acc);
        }
        for (k, sum) in acc.iter().enumerate() {
            local[n * modes + k] = sum.value();
        }
        let row = n * modes..(n + 1) * modes;
        for (s, c) in samplers.iter_mut().zip(currents.iter_mut()) {
            s.step(n, &local[..row.end], &mut c[row.clone()]);
        }
        total[row.clone()].copy_from_slice(&currents[0][row.clone()]);
        for c in &currents[1..] {
            for i in row.clone() {
                total[i] += c[i];
            }
        }
    }
    let total_current = Trajectory::new(grid, total)?;
    let radiated_field = radiate(propagator, &total_current)?;
    Ok(NetworkSample {
        device_currents: currents
            .into_iter()
            .map(|c| Trajectory::new(grid, c))
            .collect::<Result<_>>()?,
        total_current,
        local_field: Trajectory::new(grid, local)?,
        radiated_field,
    })
}

/// Single replication `rep` of `spec`.
pub fn simulate_replication(spec: &NetworkSpec, rep: u64) -> Result<NetworkSample> {
    let radiator = Radiator::new(&spec.propagator)?;
    run_network_loop(
        &spec.devices,
        &radiator,
        &spec.propagator,
        &spec.external_field,
        StreamKey::new(spec.seed, rep),
    )
}

/// All replications, in replication order. Replications run in parallel on
/// the current rayon pool; the result does not depend on the thread count.
pub fn simulate_network(spec: &NetworkSpec) -> Result<Vec<NetworkSample>> {
    spec.validate()?;
    let radiator = Radiator::new(&spec.propagator)?;
    (0..spec.n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            run_network_loop(
                &spec.devices,
                &radiator,
                &spec.propagator,
                &spec.external_field,
                StreamKey::new(spec.seed, rep),
            )
        })
        .collect()
}

/// Two dressed devices, each fed the external field plus the other's
/// radiation, stepped in one loop.
pub fn simulate_dressed_pair(
    a: &DressedDevice,
    b: &DressedDevice,
    external_field: &Trajectory,
    key: StreamKey,
) -> Result<[Trajectory; 2]> {
    let grid = *external_field.grid();
    grid.ensure_same(a.grid(), "dressed pair")?;
    grid.ensure_same(b.grid(), "dressed pair")?;
    let radiator_a = Radiator::new(a.propagator())?;
    let radiator_b = Radiator::new(b.propagator())?;
    let modes = grid.n_modes();
    let dim = grid.dim();
    let mut sa = a.dressed_sampler(key);
    let mut sb = b.dressed_sampler(key);
    let mut ja = vec![0.0; dim];
    let mut jb = vec![0.0; dim];
    let mut acc = vec![ExactSum::new(); modes];
    for n in 0..grid.n_steps() {
        let row = n * modes..(n + 1) * modes;
        // Both devices see the partner's radiation from steps < n only, so
        // the order of the two updates within a step does not matter.
        seed_accumulators(&mut acc, external_field.row(n));
        radiator_b.accumulate(n, &jb, &mut acc);
        let mut next_a = vec![0.0; modes];
        sa.step_accumulated(n, &mut acc, &mut next_a);

        seed_accumulators(&mut acc, external_field.row(n));
        radiator_a.accumulate(n, &ja, &mut acc);
        sb.step_accumulated(n, &mut acc, &mut jb[row.clone()]);
        ja[row].copy_from_slice(&next_a);
    }
    Ok([Trajectory::new(grid, ja)?, Trajectory::new(grid, jb)?])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommutationReport {
    pub bit_identical: bool,
    pub max_deviation: f64,
    pub replications: usize,
}

/// Compares the bare-network loop with the loop of two dressed devices that
/// each see the other's radiation, under common random numbers.
pub fn compose_dressed_commutation(spec: &NetworkSpec) -> Result<CommutationReport> {
    spec.validate()?;
    if spec.devices.len() != 2 {
        return Err(invalid(
            "devices",
            format!(
                "commutation check needs exactly 2 devices, got {}",
                spec.devices.len()
            ),
        ));
    }
    let a = dress(spec.devices[0].clone(), &spec.propagator)?;
    let b = dress(spec.devices[1].clone(), &spec.propagator)?;
    let radiator = Radiator::new(&spec.propagator)?;
    let per_rep: Vec<(bool, f64)> = (0..spec.n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let key = StreamKey::new(spec.seed, rep);
            let net = run_network_loop(
                &spec.devices,
                &radiator,
                &spec.propagator,
                &spec.external_field,
                key,
            )?;
            let pair = simulate_dressed_pair(&a, &b, &spec.external_field, key)?;
            let same =
                net.device_currents[0].bit_eq(&pair[0]) && net.device_currents[1].bit_eq(&pair[1]);
            let dev = net.device_currents[0]
                .max_abs_diff(&pair[0])
                .max(net.device_currents[1].max_abs_diff(&pair[1]));
            Ok((same, dev))
        })
        .collect::<Result<_>>()?;
    Ok(CommutationReport {
        bit_identical: per_rep.iter().all(|r| r.0),
        max_deviation: per_rep.iter().fold(0.0, |m, r| m.max(r.1)),
        replications: per_rep.len(),
    })
}

/// Gaussian-engine associativity: total-current statistics of `{A, B, C}`
/// against `{A+B, C}` with `A+B` the bare composition.
pub fn associativity_check_gaussian(
    specs: &[AffineGaussianSpec; 3],
    g: &CausalKernel,
) -> Result<f64> {
    let flat = marginal_total(&gaussian_compose(specs, g)?)?;
    let ab = gaussian_compose_bare(&specs[..2])?;
    let nested = marginal_total(&gaussian_compose(&[ab, specs[2].clone()], g)?)?;
    Ok(flat.max_abs_diff(&nested))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssociativityReport {
    /// Max over entries of `|Δ mean| / SE`.
    pub max_mean_z: f64,
    /// Max over entries of `|Δ cov| / SE`.
    pub max_cov_z: f64,
    pub max_abs_deviation: f64,
}

/// Monte Carlo associativity: total-current moments of `{A, B, C}` against
/// `{compose_bare(A, B), C}` under aligned streams.
pub fn associativity_check_mc(
    devices: [DeviceRef; 3],
    propagator: &CausalKernel,
    external_field: &Trajectory,
    n_reps: usize,
    seed: u64,
) -> Result<AssociativityReport> {
    let [a, b, c] = devices;
    let flat = NetworkSpec::new(
        vec![a.clone(), b.clone(), c.clone()],
        propagator.clone(),
        external_field.clone(),
        n_reps,
        seed,
    )?;
    let ab: DeviceRef = Arc::new(compose_bare(vec![a, b])?);
    let nested = NetworkSpec::new(
        vec![ab, c],
        propagator.clone(),
        external_field.clone(),
        n_reps,
        seed,
    )?;
    let m1 = total_moments(&simulate_network(&flat)?)?;
    let m2 = total_moments(&simulate_network(&nested)?)?;
    let mut report = AssociativityReport {
        max_mean_z: 0.0,
        max_cov_z: 0.0,
        max_abs_deviation: 0.0,
    };
    for i in 0..m1.mean.len() {
        let d = (m1.mean[i] - m2.mean[i]).abs();
        report.max_abs_deviation = report.max_abs_deviation.max(d);
        report.max_mean_z = report.max_mean_z.max(z_score(d, m1.mean_std_err[i]));
    }
    for (idx, (x, y)) in m1.cov.iter().zip(m2.cov.iter()).enumerate() {
        let d = (x - y).abs();
        report.max_abs_deviation = report.max_abs_deviation.max(d);
        report.max_cov_z = report
            .max_cov_z
            .max(z_score(d, m1.cov_std_err.as_slice()[idx]));
    }
    Ok(report)
}

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff / se
    } else {
        f64::INFINITY
    }
}

/// Moments of the total current across replications.
pub fn total_moments(samples: &[NetworkSample]) -> Result<VectorMoments> {
    VectorMoments::estimate(samples.iter().map(|s| s.total_current.as_slice()))
}

/// Moments of the per-device currents stacked device-major.
pub fn stacked_moments(samples: &[NetworkSample]) -> Result<VectorMoments> {
    let stacked: Vec<Vec<f64>> = samples
        .iter()
        .map(NetworkSample::stacked_currents)
        .collect();
    VectorMoments::estimate(stacked.iter().map(Vec::as_slice))
}

/// Anything that maps an external field to a current, one replication at a
/// time. Audits and susceptibilities are defined against this interface.
pub trait ResponseSystem: Sync {
    fn grid(&self) -> &TimeGrid;

    fn respond(&self, external_field: &Trajectory, key: StreamKey) -> Result<Trajectory>;

    /// Whether the current at step `n` may react to the field at step `n`.
    fn has_same_time_response(&self) -> bool;
}

impl ResponseSystem for DeviceRef {
    fn grid(&self) -> &TimeGrid {
        BareDevice::grid(self.as_ref())
    }

    fn respond(&self, external_field: &Trajectory, key: StreamKey) -> Result<Trajectory> {
        sample_bare(self.as_ref(), external_field, key)
    }

    fn has_same_time_response(&self) -> bool {
        BareDevice::has_same_time_response(self.as_ref())
    }
}

/// A network driven by an arbitrary external field, reporting the total current.
#[derive(Clone, Debug)]
pub struct NetworkResponse {
    devices: Vec<DeviceRef>,
    propagator: CausalKernel,
    radiator: Radiator,
}

impl NetworkResponse {
    pub fn new(devices: Vec<DeviceRef>, propagator: CausalKernel) -> Result<Self> {
        let grid = *propagator.grid();
        NetworkSpec::new(
            devices.clone(),
            propagator.clone(),
            Trajectory::zeros(grid),
            1,
            0,
        )?;
        let radiator = Radiator::new(&propagator)?;
        Ok(Self {
            devices,
            propagator,
            radiator,
        })
    }
}

impl ResponseSystem for NetworkResponse {
    fn grid(&self) -> &TimeGrid {
        self.propagator.grid()
    }

    fn respond(&self, external_field: &Trajectory, key: StreamKey) -> Result<Trajectory> {
        self.grid()
            .ensure_same(external_field.grid(), "network response")?;
        Ok(run_network_loop(
            &self.devices,
            &self.radiator,
            &self.propagator,
            external_field,
            key,
        )?
        .total_current)
    }

    fn has_same_time_response(&self) -> bool {
        self.devices.iter().any(|d| d.has_same_time_response())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditVerdict {
    pub step: usize,
    pub passed: bool,
    /// First `(step, mode)` that changed before it was allowed to.
    pub first_violation: Option<(usize, usize)>,
}

/// Perturbation added to the external field at the audited step.
pub const AUDIT_PERTURBATION: f64 = 0.5;

/// Re-runs `system` with the external field perturbed only at `step` and
/// checks that the current before `step` (and at `step`, when there is no
/// same-time response) is bit-identical under common random numbers.
pub fn causality_audit(
    system: &dyn ResponseSystem,
    external_field: &Trajectory,
    step: usize,
    n_reps: usize,
    seed: u64,
) -> Result<AuditVerdict> {
    let grid = *system.grid();
    grid.ensure_same(external_field.grid(), "causality_audit")?;
    if step >= grid.n_steps() {
        return Err(invalid("step", format!("{step} is outside the grid")));
    }
    let mut perturbed = external_field.clone();
    for k in 0..grid.n_modes() {
        perturbed.set(step, k, external_field.get(step, k) + AUDIT_PERTURBATION);
    }
    let frozen = if system.has_same_time_response() {
        step
    } else {
        step + 1
    };
    for rep in 0..n_reps.max(1) as u64 {
        let key = StreamKey::new(seed, rep);
        let base = system.respond(external_field, key)?;
        let probe = system.respond(&perturbed, key)?;
        for n in 0..frozen {
            for k in 0..grid.n_modes() {
                if base.get(n, k).to_bits() != probe.get(n, k).to_bits() {
                    return Ok(AuditVerdict {
                        step,
                        passed: false,
                        first_violation: Some((n, k)),
                    });
                }
            }
        }
    }
    Ok(AuditVerdict {
        step,
        passed: true,
        first_violation: None,
    })
}

/// Runs [`causality_audit`] at every step of the grid.
pub fn causality_audit_all(
    system: &dyn ResponseSystem,
    external_field: &Trajectory,
    n_reps: usize,
    seed: u64,
) -> Result<Vec<AuditVerdict>> {
    (0..system.grid().n_steps())
        .map(|m| causality_audit(system, external_field, m, n_reps, seed))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SusceptibilityOptions {
    /// Finite-difference step; `None` picks `1e-4 · max(1, max|A_e|)`.
    pub step: Option<f64>,
    pub n_reps: usize,
    pub seed: u64,
}

impl Default for SusceptibilityOptions {
    fn default() -> Self {
        Self {
            step: None,
            n_reps: 1,
            seed: 0,
        }
    }
}

/// Relative and absolute thresholds on the Richardson disagreement above
/// which a finite-difference estimate is flagged as noise dominated.
pub const RICHARDSON_RTOL: f64 = 1e-3;
pub const RICHARDSON_ATOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SusceptibilityEstimate {
    /// Richardson-extrapolated derivative.
    pub value: f64,
    /// Central difference with step `h`.
    pub coarse: f64,
    /// Central difference with step `h/2`.
    pub fine: f64,
    pub noise_dominated: bool,
}

fn default_step(external_field: &Trajectory) -> f64 {
    let scale = external_field
        .as_slice()
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    1e-4 * scale
}

fn mixed_difference(
    system: &dyn ResponseSystem,
    external_field: &Trajectory,
    responses: &[(usize, usize)],
    probes: &[(usize, usize)],
    h: f64,
    opts: &SusceptibilityOptions,
) -> Result<(f64, f64)> {
    let order = probes.len();
    let mut total = 0.0;
    let mut largest = 0.0f64;
    for signs in 0..(1u32 << order) {
        let mut field = external_field.clone();
        let mut parity = 1.0;
        for (bit, &(n, k)) in probes.iter().enumerate() {
            let s = if signs & (1 << bit) == 0 { 1.0 } else { -1.0 };
            parity *= s;
            field.set(n, k, field.get(n, k) + s * h);
        }
        let mut moment = 0.0;
        for rep in 0..opts.n_reps as u64 {
            let j = system.respond(&field, StreamKey::new(opts.seed, rep))?;
            moment += responses.iter().map(|&(n, k)| j.get(n, k)).product::<f64>();
        }
        let moment = moment / opts.n_reps as f64;
        largest = largest.max(moment.abs());
        total += parity * moment;
    }
    let scale = ((2.0 * h) * system.grid().dt()).powi(order as i32);
    let roundoff = f64::EPSILON * largest * (1u64 << order) as f64 / scale;
    Ok((total / scale, roundoff))
}

/// Generalised susceptibility `δⁿ⟨J(t'₁)…J(t'ₘ)⟩ / δA_e(t₁)…δA_e(tₙ)` around
/// the given external field, by central differences under common random
/// numbers. The estimate is flagged as noise dominated when the `h` and
/// `h/2` differences disagree, or when cancellation in the moments alone
/// could account for that much error.
pub fn susceptibility(
    system: &dyn ResponseSystem,
    external_field: &Trajectory,
    responses: &[(usize, usize)],
    probes: &[(usize, usize)],
    opts: SusceptibilityOptions,
) -> Result<SusceptibilityEstimate> {
    system
        .grid()
        .ensure_same(external_field.grid(), "susceptibility")?;
    if probes.is_empty() || responses.is_empty() {
        return Err(invalid(
            "probes",
            "need at least one response and one probe point",
        ));
    }
    if opts.n_reps == 0 {
        return Err(invalid("n_reps", "must be positive"));
    }
    let h = opts.step.unwrap_or_else(|| default_step(external_field));
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("step", format!("must be positive, got {h}")));
    }
    let (coarse, _) = mixed_difference(system, external_field, responses, probes, h, &opts)?;
    let (fine, roundoff) =
        mixed_difference(system, external_field, responses, probes, 0.5 * h, &opts)?;
    let disagreement = (coarse - fine).abs().max(roundoff);
    Ok(SusceptibilityEstimate {
        value: fine + (fine - coarse) / 3.0,
        coarse,
        fine,
        noise_dominated: disagreement
            > RICHARDSON_RTOL * coarse.abs().max(fine.abs()) + RICHARDSON_ATOL,
    })
}

/// First-order susceptibility `δ⟨J(t')⟩/δA_e(t)` for every pair of flattened
/// grid indices (rows: response, columns: probe).
pub fn linear_response_matrix(
    system: &dyn ResponseSystem,
    external_field: &Trajectory,
    opts: SusceptibilityOptions,
) -> Result<DMatrix<f64>> {
    let grid = *system.grid();
    grid.ensure_same(external_field.grid(), "linear_response_matrix")?;
    let h = opts.step.unwrap_or_else(|| default_step(external_field));
    let dim = grid.dim();
    let mean_current = |field: &Trajectory| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; dim];
        for rep in 0..opts.n_reps.max(1) as u64 {
            let j = system.respond(field, StreamKey::new(opts.seed, rep))?;
            for (a, v) in acc.iter_mut().zip(j.as_slice()) {
                *a += v;
            }
        }
        Ok(acc
            .into_iter()
            .map(|v| v / opts.n_reps.max(1) as f64)
            .collect())
    };
    let mut out = DMatrix::zeros(dim, dim);
    for p in 0..dim {
        let (n, k) = grid.split_index(p);
        let mut plus = external_field.clone();
        plus.set(n, k, plus.get(n, k) + h);
        let mut minus = external_field.clone();
        minus.set(n, k, minus.get(n, k) - h);
        let up = mean_current(&plus)?;
        let down = mean_current(&minus)?;
        for r in 0..dim {
            out[(r, p)] = (up[r] - down[r]) / (2.0 * h) / grid.dt();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{GaussianDevice, PoissonDetector};
    use crate::propagators::{retarded_single_mode, ModeSpec};
    use crate::timegrid::{apply_kernel, Strictness};

    fn grid() -> TimeGrid {
        TimeGrid::uniform(0.25, 16).unwrap()
    }

    fn gaussian(id: u64, g: TimeGrid, chi: f64, var: f64, mean: f64) -> DeviceRef {
        let chi_k = CausalKernel::from_fn(g, Strictness::SameTimeAllowed, |n, _, m, _| {
            chi * (-0.5 * (n - m) as f64).exp()
        })
        .unwrap();
        Arc::new(
            GaussianDevice::white(DeviceId(id), Trajectory::constant(g, mean), chi_k, var).unwrap(),
        )
    }

    fn prop(g: TimeGrid) -> CausalKernel {
        retarded_single_mode(&g, ModeSpec::with_omega(2.0).unwrap()).unwrap()
    }

    #[test]
    fn single_part_composition_is_transparent() {
        let g = grid();
        let a = gaussian(1, g, 0.5, 1.0, 0.2);
        let c = compose_bare(vec![a.clone()]).unwrap();
        let field = Trajectory::from_fn(g, |n, _| (n as f64 * 0.4).sin());
        for r in 0..4 {
            let key = StreamKey::new(1, r);
            assert!(sample_bare(a.as_ref(), &field, key)
                .unwrap()
                .bit_eq(&sample_bare(&c, &field, key).unwrap()));
        }
    }

    #[test]
    fn nested_composition_flattens() {
        let g = grid();
        let (a, b, c) = (
            gaussian(1, g, 0.5, 1.0, 0.2),
            gaussian(2, g, -0.3, 0.4, 0.0),
            gaussian(3, g, 0.1, 2.0, 1.0),
        );
        let nested = compose_bare(vec![
            Arc::new(compose_bare(vec![a.clone(), b.clone()]).unwrap()),
            c.clone(),
        ])
        .unwrap();
        let flat = compose_bare(vec![a, b, c]).unwrap();
        let field = Trajectory::from_fn(g, |n, _| 0.1 * n as f64);
        for r in 0..4 {
            let key = StreamKey::new(9, r);
            assert!(sample_bare(&nested, &field, key)
                .unwrap()
                .bit_eq(&sample_bare(&flat, &field, key).unwrap()));
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let g = grid();
        let err = compose_bare(vec![
            gaussian(1, g, 0.5, 1.0, 0.2),
            gaussian(1, g, 0.5, 1.0, 0.2),
        ])
        .unwrap_err();
        assert_eq!(err, Error::DuplicateDevice(1));
    }

    #[test]
    fn summed_gaussian_covariance() {
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let zero_chi = CausalKernel::zeros(g, Strictness::SameTimeAllowed);
        let s1 = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 1.0]);
        let s2 = DMatrix::from_row_slice(3, 3, &[2.0, -0.3, 0.1, -0.3, 1.0, 0.0, 0.1, 0.0, 0.5]);
        let a: DeviceRef = Arc::new(
            GaussianDevice::new(
                DeviceId(1),
                Trajectory::zeros(g),
                zero_chi.clone(),
                s1.clone(),
            )
            .unwrap(),
        );
        let b: DeviceRef = Arc::new(
            GaussianDevice::new(DeviceId(2), Trajectory::zeros(g), zero_chi, s2.clone()).unwrap(),
        );
        let c = compose_bare(vec![a, b]).unwrap();
        let zero = Trajectory::zeros(g);
        let samples: Vec<Trajectory> = (0..100_000)
            .map(|r| sample_bare(&c, &zero, StreamKey::new(4, r)).unwrap())
            .collect();
        let m = crate::devices::estimate_moments(&samples).unwrap();
        let expected = s1 + s2;
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.cov[(i, j)] - expected[(i, j)]).abs() < 4.0 * m.cov_std_err[(i, j)]);
            }
        }
    }

    #[test]
    fn noiseless_uncoupled_network_sums_means() {
        let g = grid();
        let devices = vec![
            gaussian(1, g, 0.0, 0.0, 0.3),
            gaussian(2, g, 0.0, 0.0, -1.1),
        ];
        let spec = NetworkSpec::new(devices, prop(g), Trajectory::zeros(g), 3, 5).unwrap();
        for s in simulate_network(&spec).unwrap() {
            for n in 0..g.n_steps() {
                assert_eq!(s.total_current.get(n, 0), 0.3 + -1.1);
            }
        }
    }

    #[test]
    fn one_device_network_is_the_dressed_device() {
        let g = grid();
        let a = gaussian(1, g, 0.8, 1.0, 0.2);
        let field = Trajectory::from_fn(g, |n, _| (n as f64).cos());
        let spec = NetworkSpec::new(vec![a.clone()], prop(g), field.clone(), 20, 3).unwrap();
        let dressed = dress(a, &prop(g)).unwrap();
        for (r, s) in simulate_network(&spec).unwrap().iter().enumerate() {
            let d = sample_bare(&dressed, &field, StreamKey::new(3, r as u64)).unwrap();
            assert!(s.total_current.bit_eq(&d));
        }
    }

    #[test]
    fn total_is_sum_of_parts_and_field_is_linear_in_current() {
        let g = grid();
        let devices = vec![
            gaussian(1, g, 0.8, 1.0, 0.2),
            gaussian(2, g, -0.5, 0.3, 0.0),
            gaussian(3, g, 0.2, 0.1, 1.0),
        ];
        let spec = NetworkSpec::new(devices, prop(g), Trajectory::zeros(g), 50, 3).unwrap();
        let samples = simulate_network(&spec).unwrap();
        for s in &samples {
            for i in 0..g.dim() {
                let parts = s.device_currents[0].as_slice()[i]
                    + s.device_currents[1].as_slice()[i]
                    + s.device_currents[2].as_slice()[i];
                assert_eq!(parts.to_bits(), s.total_current.as_slice()[i].to_bits());
            }
            assert!(s
                .radiated_field
                .bit_eq(&apply_kernel(&spec.propagator, &s.total_current).unwrap()));
        }
        // ⟨𝒜⟩ = G_R ⟨J⟩ up to reassociation of the sums.
        let mean_j = total_moments(&samples).unwrap().mean;
        let mean_a = VectorMoments::estimate(samples.iter().map(|s| s.radiated_field.as_slice()))
            .unwrap()
            .mean;
        let pushed = apply_kernel(
            &spec.propagator,
            &Trajectory::from_vector(g, &mean_j).unwrap(),
        )
        .unwrap();
        assert!((pushed.to_vector() - mean_a).amax() < 1e-12);
    }

    #[test]
    fn commutation_gaussian_pair_and_detector() {
        let g = TimeGrid::new(0.0, 0.1, 32, 2).unwrap();
        let chi = CausalKernel::from_fn(g, Strictness::SameTimeAllowed, |n, k, m, kp| {
            if k == 0 && kp == 0 {
                0.6 * (-((n - m) as f64)).exp()
            } else {
                0.0
            }
        })
        .unwrap();
        let mu = Trajectory::from_fn(g, |n, k| if k == 0 { (0.3 * n as f64).sin() } else { 0.0 });
        let src: DeviceRef = Arc::new(
            GaussianDevice::new(
                DeviceId(10),
                mu,
                chi,
                DMatrix::from_fn(64, 64, |i, j| if i == j && i % 2 == 0 { 1.0 } else { 0.0 }),
            )
            .unwrap(),
        );
        let det: DeviceRef =
            Arc::new(PoissonDetector::new(DeviceId(11), g, 0, 1, 0.7, 5.0, 1.0).unwrap());
        let m0 = ModeSpec::with_omega(3.0).unwrap();
        let prop = crate::propagators::retarded_diagonal(&g, &[m0, m0]).unwrap();
        let spec = NetworkSpec::new(vec![src, det], prop, Trajectory::zeros(g), 40, 77).unwrap();
        let r = compose_dressed_commutation(&spec).unwrap();
        assert!(r.bit_identical, "max deviation {}", r.max_deviation);
    }

    #[test]
    fn gaussian_associativity_closed_form() {
        let g = grid();
        let d = g.dim();
        let spec = |c: f64, v: f64| {
            AffineGaussianSpec::new(
                g,
                nalgebra::DVector::from_element(d, c),
                DMatrix::from_fn(d, d, |i, j| if j <= i { c * 0.25 } else { 0.0 }),
                DMatrix::from_diagonal_element(d, d, v),
            )
            .unwrap()
        };
        let specs = [spec(0.5, 1.0), spec(-0.2, 0.3), spec(0.9, 2.0)];
        assert!(associativity_check_gaussian(&specs, &prop(g)).unwrap() < 1e-10);
    }

    #[test]
    fn audits_pass_for_shipped_models_and_fail_for_acausal_fixture() {
        let g = TimeGrid::new(0.0, 0.1, 12, 2).unwrap();
        let det: DeviceRef =
            Arc::new(PoissonDetector::new(DeviceId(2), g, 0, 1, 0.9, 3.0, 1.0).unwrap());
        let gauss = {
            let chi =
                CausalKernel::from_fn(g, Strictness::SameTimeAllowed, |_, _, _, _| 0.3).unwrap();
            let d: DeviceRef = Arc::new(
                GaussianDevice::white(DeviceId(1), Trajectory::zeros(g), chi, 1.0).unwrap(),
            );
            d
        };
        let m0 = ModeSpec::with_omega(1.0).unwrap();
        let net = NetworkResponse::new(
            vec![gauss.clone(), det.clone()],
            crate::propagators::retarded_diagonal(&g, &[m0, m0]).unwrap(),
        )
        .unwrap();
        let field = Trajectory::from_fn(g, |n, _| 0.2 * n as f64);
        for sys in [&gauss as &dyn ResponseSystem, &det, &net] {
            assert!(causality_audit_all(sys, &field, 3, 1)
                .unwrap()
                .iter()
                .all(|v| v.passed));
        }

        struct Acausal(CausalKernel);
        impl ResponseSystem for Acausal {
            fn grid(&self) -> &TimeGrid {
                self.0.grid()
            }
            fn respond(&self, a: &Trajectory, _: StreamKey) -> Result<Trajectory> {
                apply_kernel(&self.0, a)
            }
            fn has_same_time_response(&self) -> bool {
                true
            }
        }
        let g1 = TimeGrid::uniform(0.1, 6).unwrap();
        let mut m = DMatrix::zeros(6, 6);
        m[(1, 4)] = 1.0;
        let fixture = Acausal(CausalKernel::new_unchecked(
            g1,
            m,
            Strictness::SameTimeAllowed,
        ));
        let v = causality_audit(&fixture, &Trajectory::zeros(g1), 4, 1, 0).unwrap();
        assert!(!v.passed);
        assert_eq!(v.first_violation, Some((1, 0)));
    }

    #[test]
    fn susceptibility_of_dressed_gaussian_matches_closed_form() {
        let g = TimeGrid::uniform(0.5, 6).unwrap();
        let dev = gaussian(1, g, 0.7, 1.0, 0.1);
        let k = prop(g);
        let net = NetworkResponse::new(vec![dev.clone()], k.clone()).unwrap();
        let bare = AffineGaussianSpec::new(
            g,
            nalgebra::DVector::from_element(6, 0.1),
            DMatrix::from_fn(6, 6, |i, j| {
                if j <= i {
                    0.7 * (-0.5 * (i - j) as f64).exp() * 0.5
                } else {
                    0.0
                }
            }),
            DMatrix::identity(6, 6),
        )
        .unwrap();
        let dressed = crate::gaussian::gaussian_dress(&bare, &k).unwrap();
        let field = Trajectory::from_fn(g, |n, _| 0.3 * n as f64);
        let matrix =
            linear_response_matrix(&net, &field, SusceptibilityOptions::default()).unwrap();
        // (I − χG)⁻¹χ as a functional derivative: S'/dt.
        assert!((matrix - dressed.response() / g.dt()).amax() < 1e-6);

        let est = susceptibility(
            &net,
            &field,
            &[(4, 0)],
            &[(2, 0)],
            SusceptibilityOptions::default(),
        )
        .unwrap();
        assert!((est.value - dressed.response()[(4, 2)] / g.dt()).abs() < 1e-6);
        let later = susceptibility(
            &net,
            &field,
            &[(2, 0)],
            &[(4, 0)],
            SusceptibilityOptions::default(),
        )
        .unwrap();
        assert_eq!(later.value, 0.0);
        let second = susceptibility(
            &net,
            &field,
            &[(4, 0)],
            &[(1, 0), (3, 0)],
            SusceptibilityOptions {
                step: Some(1e-2),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(second.value.abs() < 1e-6);
    }

    #[test]
    fn tiny_step_is_flagged_as_noise_dominated() {
        let g = TimeGrid::uniform(0.5, 4).unwrap();
        let dev = gaussian(5, g, 0.37, 0.0, 1.0e3);
        let field = Trajectory::constant(g, 1.0);
        let sharp = susceptibility(
            &dev,
            &field,
            &[(2, 0)],
            &[(1, 0)],
            SusceptibilityOptions {
                step: Some(1e-12),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sharp.noise_dominated, "{sharp:?}");
        let sane = susceptibility(
            &dev,
            &field,
            &[(2, 0)],
            &[(1, 0)],
            SusceptibilityOptions::default(),
        )
        .unwrap();
        assert!(!sane.noise_dominated, "{sane:?}");
        assert!((sane.value - 0.37 * (-0.5f64).exp()).abs() < 1e-6);
    }
}
