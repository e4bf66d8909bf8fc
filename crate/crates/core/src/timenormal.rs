//! Frequency parts and time-normal moments of a free field mode.
//!
//! The operator side works on a truncated Fock space. Since the free field
//! is `Â(t) = a·u(t) + a†·u*(t)` with `u(t) = √(ħ/2ω) e^{−iωt}`, filtering the
//! scalar series `u` and `u*` filters the operator series, and every two-point
//! correlation reduces to the four ladder moments `⟨aa⟩, ⟨aa†⟩, ⟨a†a⟩, ⟨a†a†⟩`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};
use crate::fock::{expectation, CMatrix, FieldState, FockSpace};
use crate::propagators::ModeSpec;
use crate::rng::{DeviceId, StreamKey};
use crate::timegrid::{TimeGrid, Trajectory};

/// Largest population allowed above the Fock cutoff.
pub const CUTOFF_TOLERANCE: f64 = 1e-8;

/// Minimum number of field periods in the analysis window.
pub const MIN_PERIODS: f64 = 8.0;

const MAX_WINDOW: usize = 1 << 22;

/// Complex-valued counterpart of [`Trajectory`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTrajectory {
    grid: TimeGrid,
    values: Vec<Complex64>,
}

impl ComplexTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.dim() {
            return Err(Error::Shape {
                expected: grid.dim(),
                got: values.len(),
            });
        }
        if let Some(i) = values
            .iter()
            .position(|z| !(z.re.is_finite() && z.im.is_finite()))
        {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn get(&self, step: usize, mode: usize) -> Complex64 {
        self.values[self.grid.index(step, mode)]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.values
    }

    pub fn conj(&self) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(Complex64::conj).collect(),
        }
    }

    pub fn re(&self) -> Trajectory {
        Trajectory::from_fn(self.grid, |n, k| self.get(n, k).re)
    }

    pub fn im(&self) -> Trajectory {
        Trajectory::from_fn(self.grid, |n, k| self.get(n, k).im)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.grid
            .ensure_same(&other.grid, "ComplexTrajectory::add")?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// Positive- and negative-frequency parts of a complex series of power-of-two
/// length. The positive part holds the `e^{−iωt}` components (DFT bins above
/// `N/2`); the zero and Nyquist bins are shared equally.
fn split_series(values: &[Complex64]) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let n = values.len();
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let mut spectrum = values.to_vec();
    forward.process(&mut spectrum);
    let mut plus = vec![Complex64::new(0.0, 0.0); n];
    let mut minus = vec![Complex64::new(0.0, 0.0); n];
    for (k, x) in spectrum.iter().enumerate() {
        let x = x / n as f64;
        if k == 0 || 2 * k == n {
            plus[k] = 0.5 * x;
            minus[k] = 0.5 * x;
        } else if 2 * k > n {
            plus[k] = x;
        } else {
            minus[k] = x;
        }
    }
    if n == 1 {
        // A single sample is all zero frequency.
        return Ok((vec![0.5 * values[0]], vec![0.5 * values[0]]));
    }
    inverse.process(&mut plus);
    inverse.process(&mut minus);
    Ok((plus, minus))
}

/// Splits a real trajectory into its frequency parts, mode by mode.
///
/// `f_minus` is the pointwise conjugate of `f_plus`, and the two add up to
/// `f` up to transform rounding.
pub fn freq_split(f: &Trajectory) -> Result<(ComplexTrajectory, ComplexTrajectory)> {
    let grid = *f.grid();
    let (steps, modes) = (grid.n_steps(), grid.n_modes());
    if !steps.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(steps));
    }
    let mut plus = vec![Complex64::new(0.0, 0.0); grid.dim()];
    for k in 0..modes {
        let series: Vec<Complex64> = (0..steps)
            .map(|n| Complex64::new(f.get(n, k), 0.0))
            .collect();
        let (p, _) = split_series(&series)?;
        for (n, z) in p.into_iter().enumerate() {
            plus[grid.index(n, k)] = z;
        }
    }
    let plus = ComplexTrajectory::new(grid, plus)?;
    let minus = plus.conj();
    Ok((plus, minus))
}

/// Positive-frequency part of a unit impulse placed mid-window, i.e. the
/// discrete kernel `δ⁺`. Its support before the impulse is the acausal tail
/// that an ordering built on frequency filtering alone carries.
pub fn positive_frequency_kernel(n_steps: usize) -> Result<Vec<Complex64>> {
    let mut impulse = vec![Complex64::new(0.0, 0.0); n_steps];
    if n_steps == 0 {
        return Err(Error::InvalidGrid("empty window".into()));
    }
    impulse[n_steps / 2] = Complex64::new(1.0, 0.0);
    Ok(split_series(&impulse)?.0)
}

/// Largest `|δ⁺|` strictly before the impulse of [`positive_frequency_kernel`].
pub fn acausal_tail(n_steps: usize) -> Result<f64> {
    let kernel = positive_frequency_kernel(n_steps)?;
    Ok(kernel[..n_steps / 2]
        .iter()
        .fold(0.0, |m, z| m.max(z.norm())))
}

/// One free mode in a Gaussian state, represented on a truncated Fock space.
#[derive(Clone, Debug)]
pub struct FockOracle {
    space: FockSpace,
    mode: ModeSpec,
    state: FieldState,
    rho: CMatrix,
    ladder: LadderMoments,
}

/// `⟨aa⟩, ⟨aa†⟩, ⟨a†a⟩, ⟨a†a†⟩` and `⟨a⟩` in the oracle state.
#[derive(Clone, Copy, Debug)]
struct LadderMoments {
    a: Complex64,
    aa: Complex64,
    a_ad: Complex64,
    ad_a: Complex64,
    ad_ad: Complex64,
}

impl FockOracle {
    pub fn new(n_max: usize, mode: ModeSpec, state: FieldState) -> Result<Self> {
        let space = FockSpace::new(n_max)?;
        mode.field_scale()?;
        let rho = state.density_matrix(space)?;
        let truncated = state.truncated_population(space);
        if truncated > CUTOFF_TOLERANCE {
            return Err(Error::CutoffInsufficient { n_max, truncated });
        }
        let a = space.annihilation();
        let ad = space.creation();
        let ladder = LadderMoments {
            a: expectation(&rho, &a),
            aa: expectation(&rho, &(&a * &a)),
            a_ad: expectation(&rho, &(&a * &ad)),
            ad_a: expectation(&rho, &(&ad * &a)),
            ad_ad: expectation(&rho, &(&ad * &ad)),
        };
        Ok(Self {
            space,
            mode,
            state,
            rho,
            ladder,
        })
    }

    pub fn n_max(&self) -> usize {
        self.space.n_max()
    }

    pub fn mode(&self) -> ModeSpec {
        self.mode
    }

    pub fn state(&self) -> FieldState {
        self.state
    }

    pub fn density_matrix(&self) -> &CMatrix {
        &self.rho
    }

    /// `⟨Â(t)⟩` on a single-mode grid.
    pub fn operator_mean(&self, grid: &TimeGrid) -> Result<Trajectory> {
        let (u, _) = self.amplitude_series(grid, grid.n_steps())?;
        Ok(Trajectory::from_fn(*grid, |n, _| {
            (self.ladder.a * u[n] + self.ladder.a.conj() * u[n].conj()).re
        }))
    }

    /// `⟨Â(t)Â(t')⟩` without any reordering.
    pub fn operator_correlation(&self, grid: &TimeGrid) -> Result<DMatrix<Complex64>> {
        let (u, _) = self.amplitude_series(grid, grid.n_steps())?;
        let v: Vec<Complex64> = u.iter().map(Complex64::conj).collect();
        let n = grid.n_steps();
        Ok(DMatrix::from_fn(n, n, |i, j| {
            self.pair(u[i], v[i], u[j], v[j])
        }))
    }

    /// `A_cl(t) = √(ħ/2ω)(α e^{−iωt} + c.c.)` for a coherent state, zero for
    /// vacuum and thermal states.
    pub fn classical_field(&self, grid: &TimeGrid) -> Result<Trajectory> {
        let alpha = match self.state {
            FieldState::Coherent(alpha) => alpha,
            _ => Complex64::new(0.0, 0.0),
        };
        let (u, _) = self.amplitude_series(grid, grid.n_steps())?;
        Ok(Trajectory::from_fn(*grid, |n, _| 2.0 * (alpha * u[n]).re))
    }

    /// `⟨(αa + βa†)(γa + δa†)⟩`.
    fn pair(
        &self,
        alpha: Complex64,
        beta: Complex64,
        gamma: Complex64,
        delta: Complex64,
    ) -> Complex64 {
        let l = &self.ladder;
        alpha * gamma * l.aa
            + alpha * delta * l.a_ad
            + beta * gamma * l.ad_a
            + beta * delta * l.ad_ad
    }

    /// `u(t) = √(ħ/2ω) e^{−iωt}` over the grid, extended to `window` samples.
    fn amplitude_series(&self, grid: &TimeGrid, window: usize) -> Result<(Vec<Complex64>, f64)> {
        if grid.n_modes() != 1 {
            return Err(invalid(
                "grid",
                format!(
                    "the oracle is single-mode, grid has {} modes",
                    grid.n_modes()
                ),
            ));
        }
        let scale = self.mode.field_scale()?;
        let omega = self.mode.omega();
        let u = (0..window)
            .map(|n| Complex64::from_polar(scale, -omega * (grid.t0() + n as f64 * grid.dt())))
            .collect();
        Ok((u, scale))
    }

    /// Length of the analysis window: a power of two covering the grid and
    /// at least [`MIN_PERIODS`] periods of the mode.
    fn analysis_window(&self, grid: &TimeGrid) -> Result<usize> {
        let period_steps = 2.0 * std::f64::consts::PI / (self.mode.omega().abs() * grid.dt());
        let needed = (MIN_PERIODS * period_steps)
            .ceil()
            .max(grid.n_steps() as f64);
        if needed > MAX_WINDOW as f64 {
            return Err(invalid(
                "omega",
                format!("{needed} samples needed to resolve {} periods", MIN_PERIODS),
            ));
        }
        Ok((needed as usize).next_power_of_two())
    }

    /// Frequency parts of the operator series as scalar coefficients of `a`
    /// and `a†`, plus the relative leakage of the split.
    fn split_operator(&self, grid: &TimeGrid) -> Result<SplitOperator> {
        let window = self.analysis_window(grid)?;
        let (u, scale) = self.amplitude_series(grid, window)?;
        let v: Vec<Complex64> = u.iter().map(Complex64::conj).collect();
        let (u_plus, u_minus) = split_series(&u)?;
        let (v_plus, v_minus) = split_series(&v)?;
        let n = grid.n_steps();
        let leakage = (0..n).fold(0.0f64, |m, i| {
            m.max(u_minus[i].norm()).max(v_plus[i].norm())
        }) / scale;
        Ok(SplitOperator {
            plus: (0..n).map(|i| (u_plus[i], v_plus[i])).collect(),
            minus: (0..n).map(|i| (u_minus[i], v_minus[i])).collect(),
            leakage,
        })
    }
}

struct SplitOperator {
    /// `Â⁺(t) = a·c₀ + a†·c₁`.
    plus: Vec<(Complex64, Complex64)>,
    minus: Vec<(Complex64, Complex64)>,
    leakage: f64,
}

/// A time-normal moment together with its numerical diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeNormalMoment {
    pub value: f64,
    /// `|Im|` of the complex expectation before taking the real part.
    pub imaginary_residue: f64,
    /// Wrong-sign frequency content left in the split series, relative to
    /// the field scale.
    pub leakage: f64,
}

/// All time-normal second moments on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeNormalMatrix {
    pub values: DMatrix<f64>,
    pub max_imaginary_residue: f64,
    pub leakage: f64,
}

fn time_normal_pair(oracle: &FockOracle, split: &SplitOperator, i: usize, j: usize) -> Complex64 {
    let (pi, pj) = (split.plus[i], split.plus[j]);
    let (mi, mj) = (split.minus[i], split.minus[j]);
    // Negative-frequency parts anti-time-ordered (earlier on the left),
    // positive-frequency parts time-ordered (later on the left).
    let (early, late) = if i <= j { (mi, mj) } else { (mj, mi) };
    let anti = oracle.pair(early.0, early.1, late.0, late.1);
    let (late, early) = if i >= j { (pi, pj) } else { (pj, pi) };
    let ordered = oracle.pair(late.0, late.1, early.0, early.1);
    let mixed = oracle.pair(mi.0, mi.1, pj.0, pj.1) + oracle.pair(mj.0, mj.1, pi.0, pi.1);
    anti + mixed + ordered
}

/// `⟨𝒯:Â(t)Â(t'):⟩` at grid steps `n` and `m`.
pub fn time_normal_second_moment(
    oracle: &FockOracle,
    grid: &TimeGrid,
    n: usize,
    m: usize,
) -> Result<TimeNormalMoment> {
    if n >= grid.n_steps() || m >= grid.n_steps() {
        return Err(invalid(
            "step",
            format!("({n}, {m}) outside a grid of {} steps", grid.n_steps()),
        ));
    }
    let split = oracle.split_operator(grid)?;
    let z = time_normal_pair(oracle, &split, n, m);
    Ok(TimeNormalMoment {
        value: z.re,
        imaginary_residue: z.im.abs(),
        leakage: split.leakage,
    })
}

/// [`time_normal_second_moment`] for every pair of steps.
pub fn time_normal_second_moments(
    oracle: &FockOracle,
    grid: &TimeGrid,
) -> Result<TimeNormalMatrix> {
    let split = oracle.split_operator(grid)?;
    let n = grid.n_steps();
    let mut residue = 0.0f64;
    let values = DMatrix::from_fn(n, n, |i, j| {
        let z = time_normal_pair(oracle, &split, i, j);
        residue = residue.max(z.im.abs());
        z.re
    });
    Ok(TimeNormalMatrix {
        values,
        max_imaginary_residue: residue,
        leakage: split.leakage,
    })
}

/// `⟨𝒯:Â(t):⟩ = ⟨Â⁺(t)⟩ + ⟨Â⁻(t)⟩`.
pub fn time_normal_first_moment(oracle: &FockOracle, grid: &TimeGrid) -> Result<Trajectory> {
    let split = oracle.split_operator(grid)?;
    let a = oracle.ladder.a;
    Ok(Trajectory::from_fn(*grid, |n, _| {
        let (p, m) = (split.plus[n], split.minus[n]);
        (a * (p.0 + m.0) + a.conj() * (p.1 + m.1)).re
    }))
}

/// Classical random field reproducing the time-normal moments of a
/// Gaussian state with nonnegative P-function:
/// `A(t) = √(ħ/2ω)(β e^{−iωt} + c.c.)` with `β` fixed at `α` for a coherent
/// state and circular complex Gaussian with `⟨|β|²⟩ = n̄` for a thermal one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassicalDoppelganger {
    pub mode: ModeSpec,
    pub state: FieldState,
    pub id: DeviceId,
}

impl ClassicalDoppelganger {
    pub fn for_oracle(oracle: &FockOracle, id: DeviceId) -> Self {
        Self {
            mode: oracle.mode(),
            state: oracle.state(),
            id,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.state, FieldState::Thermal { mean_occupation } if mean_occupation > 0.0)
    }

    fn amplitude(&self, key: StreamKey) -> Result<Complex64> {
        Ok(match self.state {
            FieldState::Vacuum => Complex64::new(0.0, 0.0),
            FieldState::Coherent(alpha) => alpha,
            FieldState::Thermal { mean_occupation } => {
                let sd = (0.5 * mean_occupation).sqrt();
                let normal =
                    Normal::new(0.0, sd).map_err(|e| invalid("mean_occupation", e.to_string()))?;
                let mut rng = key.step_rng(self.id, 0);
                let re = normal.sample(&mut rng);
                let im = normal.sample(&mut rng);
                Complex64::new(re, im)
            }
        })
    }

    pub fn sample(&self, grid: &TimeGrid, key: StreamKey) -> Result<Trajectory> {
        if grid.n_modes() != 1 {
            return Err(invalid("grid", "the doppelganger is single-mode"));
        }
        let beta = self.amplitude(key)?;
        let scale = self.mode.field_scale()?;
        let omega = self.mode.omega();
        Ok(Trajectory::from_fn(*grid, |n, _| {
            2.0 * (beta * Complex64::from_polar(scale, -omega * grid.time(n))).re
        }))
    }
}

/// Deviations between the time-normal moments of the oracle and the
/// classical averages of the doppelganger.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PFunctionalMatch {
    pub max_mean_deviation: f64,
    pub max_second_deviation: f64,
    /// Largest deviation in units of the Monte Carlo standard error; zero
    /// for deterministic doppelgangers.
    pub max_mean_z: f64,
    pub max_second_z: f64,
    pub n_samples: usize,
}

/// Compares first and second time-normal moments of `oracle` with the
/// classical moments of `doppelganger` estimated from `n_samples` draws.
pub fn pfunctional_match(
    oracle: &FockOracle,
    doppelganger: &ClassicalDoppelganger,
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<PFunctionalMatch> {
    let samples = if doppelganger.is_deterministic() {
        1
    } else {
        n_samples
    };
    if samples < 2 && !doppelganger.is_deterministic() {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples,
        });
    }
    let quantum_mean = time_normal_first_moment(oracle, grid)?;
    let quantum_second = time_normal_second_moments(oracle, grid)?.values;
    let n = grid.n_steps();
    let mut sum = DVector::<f64>::zeros(n);
    let mut sum_sq = DVector::<f64>::zeros(n);
    let mut prod = DMatrix::<f64>::zeros(n, n);
    let mut prod_sq = DMatrix::<f64>::zeros(n, n);
    for r in 0..samples as u64 {
        let x = doppelganger
            .sample(grid, StreamKey::new(seed, r))?
            .to_vector();
        sum += &x;
        sum_sq += x.component_mul(&x);
        let outer = &x * x.transpose();
        prod_sq += outer.component_mul(&outer);
        prod += outer;
    }
    let count = samples as f64;
    let std_err = |s: f64, s2: f64| {
        if samples < 2 {
            0.0
        } else {
            let mean = s / count;
            ((s2 / count - mean * mean).max(0.0) * count / (count - 1.0) / count).sqrt()
        }
    };
    let mut out = PFunctionalMatch {
        max_mean_deviation: 0.0,
        max_second_deviation: 0.0,
        max_mean_z: 0.0,
        max_second_z: 0.0,
        n_samples: samples,
    };
    for i in 0..n {
        let d = (sum[i] / count - quantum_mean.get(i, 0)).abs();
        out.max_mean_deviation = out.max_mean_deviation.max(d);
        let se = std_err(sum[i], sum_sq[i]);
        if se > 0.0 {
            out.max_mean_z = out.max_mean_z.max(d / se);
        }
        for j in 0..n {
            let d = (prod[(i, j)] / count - quantum_second[(i, j)]).abs();
            out.max_second_deviation = out.max_second_deviation.max(d);
            let se = std_err(prod[(i, j)], prod_sq[(i, j)]);
            if se > 0.0 {
                out.max_second_z = out.max_second_z.max(d / se);
            }
        }
    }
    Ok(out)
}
