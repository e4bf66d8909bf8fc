//! Electromagnetic self-action: turning a bare device into a dressed one.
//!
//! A dressed device samples `p[J | A_e] = p^I[J | A_e + G_R J]`. Because the
//! propagator is strictly retarded, the local field at step `n` only needs the
//! device's own current at steps `< n`, so the fixed point is reached by plain
//! forward time stepping. Same-time self-action is rejected at construction.

use std::f64::consts::PI;
use std::fmt;

use crate::devices::{BareDevice, DeviceRef, StepSampler};
use crate::error::{invalid, Error, Result};
use crate::numerics::{integrate, ExactSum};
use crate::rng::{DeviceId, StreamKey};
use crate::timegrid::{CausalKernel, TimeGrid};

/// Absolute tolerance of the adaptive quadratures below.
pub const QUADRATURE_TOL: f64 = 1e-8;
/// Half-width of the integration window in units of the distribution's width.
const WINDOW_WIDTHS: f64 = 12.0;

/// Strictly retarded propagator prepared for in-loop field evaluation.
///
/// The field contribution at step `n` is accumulated as the exact sum of the
/// terms `(dt·G[n][m])·J[m]`. Exact accumulation makes the local field
/// independent of how the terms are grouped (per device, per partner, own
/// current last), which is what lets differently organised loops agree bit
/// for bit.
#[derive(Clone, Debug)]
pub struct Radiator {
    grid: TimeGrid,
    weights: Vec<f64>,
}

impl Radiator {
    pub fn new(g: &CausalKernel) -> Result<Self> {
        if !g.is_strict() {
            return Err(Error::SameTimeSelfAction);
        }
        let dt = g.grid().dt();
        let weights = g
            .matrix()
            .transpose()
            .as_slice()
            .iter()
            .map(|v| dt * v)
            .collect();
        Ok(Self {
            grid: *g.grid(),
            weights,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Adds the field radiated at `step` by `source` (rows `< step` are read)
    /// into one accumulator per mode.
    pub fn accumulate(&self, step: usize, source: &[f64], acc: &mut [ExactSum]) {
        let modes = self.grid.n_modes();
        let dim = self.grid.dim();
        let past = step * modes;
        for (k, sum) in acc.iter_mut().enumerate() {
            let i = step * modes + k;
            let row = &self.weights[i * dim..i * dim + past];
            for (w, j) in row.iter().zip(&source[..past]) {
                if *w != 0.0 {
                    let term = w * j;
                    if term != 0.0 {
                        sum.add(term);
                    }
                }
            }
        }
    }
}

/// Seeds per-mode accumulators with the external field at `step`.
pub(crate) fn seed_accumulators(acc: &mut [ExactSum], row: &[f64]) {
    for (sum, &v) in acc.iter_mut().zip(row) {
        sum.clear();
        if v != 0.0 {
            sum.add(v);
        }
    }
}

/// A bare device with its own radiation fed back through `G_R`.
#[derive(Clone)]
pub struct DressedDevice {
    bare: DeviceRef,
    propagator: CausalKernel,
    radiator: Radiator,
}

impl fmt::Debug for DressedDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DressedDevice")
            .field("bare", &self.bare)
            .finish_non_exhaustive()
    }
}

/// Dresses `bare` with the strictly retarded propagator `g`.
pub fn dress(bare: DeviceRef, g: &CausalKernel) -> Result<DressedDevice> {
    bare.grid().ensure_same(g.grid(), "dress")?;
    let radiator = Radiator::new(g)?;
    Ok(DressedDevice {
        bare,
        propagator: g.clone(),
        radiator,
    })
}

impl DressedDevice {
    pub fn bare(&self) -> &DeviceRef {
        &self.bare
    }

    pub fn propagator(&self) -> &CausalKernel {
        &self.propagator
    }

    pub fn dressed_sampler(&self, key: StreamKey) -> DressedSampler<'_> {
        let grid = self.grid();
        DressedSampler {
            device: self,
            inner: self.bare.sampler(key),
            own: vec![0.0; grid.dim()],
            local: vec![0.0; grid.dim()],
            acc: vec![ExactSum::new(); grid.n_modes()],
        }
    }
}

/// Per-replication state of a [`DressedDevice`].
pub struct DressedSampler<'a> {
    device: &'a DressedDevice,
    inner: Box<dyn StepSampler + 'a>,
    own: Vec<f64>,
    local: Vec<f64>,
    acc: Vec<ExactSum>,
}

impl DressedSampler<'_> {
    /// Steps the device given the not-yet-rounded external field at `step`
    /// (one accumulator per mode). The device adds its own radiation, rounds
    /// once, and samples the bare device.
    pub fn step_accumulated(
        &mut self,
        step: usize,
        external: &mut [ExactSum],
        current: &mut [f64],
    ) {
        let modes = self.device.grid().n_modes();
        self.device.radiator.accumulate(step, &self.own, external);
        for (k, sum) in external.iter().enumerate() {
            self.local[step * modes + k] = sum.value();
        }
        self.inner
            .step(step, &self.local[..(step + 1) * modes], current);
        self.own[step * modes..(step + 1) * modes].copy_from_slice(current);
    }

    /// Local field seen so far, `A_e + G_R J`.
    pub fn local_field(&self) -> &[f64] {
        &self.local
    }
}

impl StepSampler for DressedSampler<'_> {
    fn step(&mut self, step: usize, field: &[f64], current: &mut [f64]) {
        let modes = self.device.grid().n_modes();
        let mut acc = std::mem::take(&mut self.acc);
        seed_accumulators(&mut acc, &field[step * modes..(step + 1) * modes]);
        self.step_accumulated(step, &mut acc, current);
        self.acc = acc;
    }
}

impl BareDevice for DressedDevice {
    fn id(&self) -> DeviceId {
        self.bare.id()
    }

    fn grid(&self) -> &TimeGrid {
        self.bare.grid()
    }

    fn sampler(&self, key: StreamKey) -> Box<dyn StepSampler + '_> {
        Box::new(self.dressed_sampler(key))
    }

    fn is_field_insensitive(&self) -> bool {
        self.bare.is_field_insensitive()
    }

    fn has_same_time_response(&self) -> bool {
        self.bare.has_same_time_response()
    }

    fn emission_modes(&self) -> Vec<usize> {
        self.bare.emission_modes()
    }

    fn stream_ids(&self) -> Vec<DeviceId> {
        self.bare.stream_ids()
    }
}

fn gaussian_density(x: f64, width: f64) -> f64 {
    (-0.5 * (x / width).powi(2)).exp() / ((2.0 * PI).sqrt() * width)
}

fn check_width(j0: f64) -> Result<()> {
    if j0 > 0.0 && j0.is_finite() {
        Ok(())
    } else {
        Err(invalid("j0", format!("must be positive, got {j0}")))
    }
}

/// Integral over `J` of the time-independent "dressed" density with
/// instantaneous self-action, `N(J − χgJ − χA_e; J0)`.
///
/// Analytically this is `1/(1 − χg)`, not 1: same-time self-action does not
/// produce a probability distribution.
pub fn normalization_probe_instantaneous(chi: f64, g: f64, j0: f64, a_e: f64) -> Result<f64> {
    check_width(j0)?;
    let loop_gain = chi * g;
    if loop_gain.is_nan() || loop_gain.abs() >= 1.0 {
        return Err(Error::Divergent(format!(
            "|chi*g| = {} >= 1, the density is not integrable",
            loop_gain.abs()
        )));
    }
    let slope = 1.0 - loop_gain;
    let centre = chi * a_e / slope;
    let half = WINDOW_WIDTHS * j0 / slope.abs();
    Ok(integrate(
        |j| gaussian_density(slope * j - chi * a_e, j0),
        centre - half,
        centre + half,
        QUADRATURE_TOL,
    ))
}

/// Two-time model: the earlier current `J'` sees `A_e'`, the later current
/// `J` sees `A_e + g J'`, with bare density `N(J − χA; J0)` at each time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoTimeModel {
    pub chi: f64,
    pub g: f64,
    pub j0: f64,
    pub a_e: f64,
    pub a_e_early: f64,
}

impl TwoTimeModel {
    pub fn new(chi: f64, g: f64, j0: f64, a_e: f64, a_e_early: f64) -> Result<Self> {
        check_width(j0)?;
        for (name, v) in [
            ("chi", chi),
            ("g", g),
            ("a_e", a_e),
            ("a_e_early", a_e_early),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        Ok(Self {
            chi,
            g,
            j0,
            a_e,
            a_e_early,
        })
    }

    /// Dressed joint density `p(J, J' | A_e, A_e')`.
    pub fn joint(&self, late: f64, early: f64) -> f64 {
        let r_late = late - self.chi * self.g * early - self.chi * self.a_e;
        let r_early = early - self.chi * self.a_e_early;
        (-(r_late * r_late + r_early * r_early) / (2.0 * self.j0 * self.j0)).exp()
            / (2.0 * PI * self.j0 * self.j0)
    }

    /// Later current conditional on the earlier one, `p(J | A_e, J')`.
    pub fn conditional_late(&self, late: f64, early: f64) -> f64 {
        gaussian_density(
            late - self.chi * self.g * early - self.chi * self.a_e,
            self.j0,
        )
    }

    /// Earlier current, `p'(J' | A_e')`.
    pub fn marginal_early(&self, early: f64) -> f64 {
        gaussian_density(early - self.chi * self.a_e_early, self.j0)
    }

    /// `∫dJ' ∫dJ f(J, J') p(J, J')`, inner integral over the later current.
    pub fn expectation(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let half = WINDOW_WIDTHS * self.j0;
        let early_centre = self.chi * self.a_e_early;
        integrate(
            |early| {
                let late_centre = self.chi * self.g * early + self.chi * self.a_e;
                integrate(
                    |late| f(late, early) * self.joint(late, early),
                    late_centre - half,
                    late_centre + half,
                    QUADRATURE_TOL * 1e-2,
                )
            },
            early_centre - half,
            early_centre + half,
            QUADRATURE_TOL,
        )
    }

    /// First and second moments by quadrature.
    pub fn moments(&self) -> TwoTimeMoments {
        let mean_late = self.expectation(|l, _| l);
        let mean_early = self.expectation(|_, e| e);
        TwoTimeMoments {
            mean_late,
            mean_early,
            var_late: self.expectation(|l, _| (l - mean_late).powi(2)),
            var_early: self.expectation(|_, e| (e - mean_early).powi(2)),
            cov: self.expectation(|l, e| (l - mean_late) * (e - mean_early)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoTimeMoments {
    pub mean_late: f64,
    pub mean_early: f64,
    pub var_late: f64,
    pub var_early: f64,
    pub cov: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoTimeCheck {
    /// `∫dJ' ∫dJ p(J, J')`.
    pub normalization: f64,
    /// Max over the probe grid of `|p(J,J') − p(J|J') p'(J')|`.
    pub factorization_residual: f64,
}

/// Probe points per axis for the factorisation residual.
pub const FACTORIZATION_GRID: usize = 50;

/// Normalisation and conditional factorisation of the causal two-time model.
pub fn two_time_causal_check(
    chi: f64,
    g: f64,
    j0: f64,
    a_e: f64,
    a_e_early: f64,
) -> Result<TwoTimeCheck> {
    let model = TwoTimeModel::new(chi, g, j0, a_e, a_e_early)?;
    let normalization = model.expectation(|_, _| 1.0);

    let early_centre = chi * a_e_early;
    let late_centre = chi * a_e + chi * g * early_centre;
    let late_width = j0 * (1.0 + (chi * g).powi(2)).sqrt();
    let n = FACTORIZATION_GRID;
    let node = |centre: f64, width: f64, i: usize| {
        centre + width * (-5.0 + 10.0 * i as f64 / (n - 1) as f64)
    };
    let mut residual = 0.0f64;
    for i in 0..n {
        let early = node(early_centre, j0, i);
        for j in 0..n {
            let late = node(late_centre, late_width, j);
            let lhs = model.joint(late, early);
            let rhs = model.conditional_late(late, early) * model.marginal_early(early);
            residual = residual.max((lhs - rhs).abs());
        }
    }
    Ok(TwoTimeCheck {
        normalization,
        factorization_residual: residual,
    })
}
