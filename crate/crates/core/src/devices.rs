//! Devices: causal samplers of the current conditional on the local field.
//!
//! A device is characterised only by the statistics of the current it emits
//! given the field it sees. Sampling is organised as a time loop: at step `n`
//! the sampler is shown the field history `0..=n` and nothing later, which
//! makes causality a property of the interface rather than of each model.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::numerics::psd_cholesky;
use crate::rng::{DeviceId, StreamKey};
use crate::timegrid::{apply_kernel, CausalKernel, TimeGrid, Trajectory};

/// PSD tolerance for noise covariances.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Per-replication sampling state of a device.
pub trait StepSampler {
    /// Draws the current at `step` into `current` (one entry per mode).
    ///
    /// `field` holds the input field rows `0..=step`, flattened `[step][mode]`.
    fn step(&mut self, step: usize, field: &[f64], current: &mut [f64]);
}

/// A bare device, `p^I[J | A_loc]`, as a causal step sampler.
pub trait BareDevice: fmt::Debug + Send + Sync {
    /// Stable identity; keys the device's random streams.
    fn id(&self) -> DeviceId;

    fn grid(&self) -> &TimeGrid;

    /// Fresh sampler for one replication.
    fn sampler(&self, key: StreamKey) -> Box<dyn StepSampler + '_>;

    /// True when the current does not depend on the input field at all.
    fn is_field_insensitive(&self) -> bool {
        false
    }

    /// True when the current at step `n` may depend on the field at step `n`.
    fn has_same_time_response(&self) -> bool {
        true
    }

    /// Modes in which the current can be nonzero.
    fn emission_modes(&self) -> Vec<usize> {
        (0..self.grid().n_modes()).collect()
    }

    /// Ids of the random streams this device draws from.
    fn stream_ids(&self) -> Vec<DeviceId> {
        vec![self.id()]
    }
}

/// Runs a device through the whole grid for a given input field.
pub fn sample_bare(
    device: &dyn BareDevice,
    field: &Trajectory,
    key: StreamKey,
) -> Result<Trajectory> {
    device.grid().ensure_same(field.grid(), "sample_bare")?;
    let grid = *device.grid();
    let modes = grid.n_modes();
    let mut sampler = device.sampler(key);
    let mut out = Trajectory::zeros(grid);
    for n in 0..grid.n_steps() {
        let row = &mut out.values_mut()[n * modes..(n + 1) * modes];
        sampler.step(n, field.history(n), row);
    }
    // Samplers write finite values; re-validate to keep the type invariant.
    Trajectory::new(grid, out.into_values())
}

/// Field radiated by a current, `𝒜 = G_R J`.
pub fn radiate(g: &CausalKernel, current: &Trajectory) -> Result<Trajectory> {
    apply_kernel(g, current)
}

/// Gaussian device: `J = μ₀ + χ A_loc + ξ`, `ξ ~ N(0, Σ)`.
#[derive(Clone)]
pub struct GaussianDevice {
    id: DeviceId,
    mu0: Trajectory,
    chi: CausalKernel,
    noise_cov: DMatrix<f64>,
    // Row-major copies for the inner loops.
    chi_rows: Vec<f64>,
    noise_rows: Vec<f64>,
    noisy: bool,
}

impl fmt::Debug for GaussianDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianDevice")
            .field("id", &self.id)
            .field("grid", self.mu0.grid())
            .field("noisy", &self.noisy)
            .finish_non_exhaustive()
    }
}

impl GaussianDevice {
    pub fn new(
        id: DeviceId,
        mu0: Trajectory,
        chi: CausalKernel,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let grid = *mu0.grid();
        grid.ensure_same(chi.grid(), "gaussian device chi")?;
        let dim = grid.dim();
        if noise_cov.shape() != (dim, dim) {
            return Err(Error::Shape {
                expected: dim * dim,
                got: noise_cov.len(),
            });
        }
        let factor = psd_cholesky(&noise_cov, PSD_TOLERANCE)?;
        let noisy = factor.iter().any(|&v| v != 0.0);
        let chi_rows = chi.matrix().transpose().as_slice().to_vec();
        let noise_rows = factor.transpose().as_slice().to_vec();
        Ok(Self {
            id,
            mu0,
            chi,
            noise_cov,
            chi_rows,
            noise_rows,
            noisy,
        })
    }

    /// Independent noise of variance `variance` at every `(step, mode)`.
    pub fn white(id: DeviceId, mu0: Trajectory, chi: CausalKernel, variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(invalid("variance", format!("must be >= 0, got {variance}")));
        }
        let dim = mu0.grid().dim();
        Self::new(
            id,
            mu0,
            chi,
            DMatrix::from_diagonal_element(dim, dim, variance),
        )
    }

    pub fn mu0(&self) -> &Trajectory {
        &self.mu0
    }

    pub fn chi(&self) -> &CausalKernel {
        &self.chi
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }
}

struct GaussianSampler<'a> {
    device: &'a GaussianDevice,
    key: StreamKey,
    xi: Vec<f64>,
}

impl StepSampler for GaussianSampler<'_> {
    fn step(&mut self, step: usize, field: &[f64], current: &mut [f64]) {
        let d = self.device;
        let grid = d.mu0.grid();
        let modes = grid.n_modes();
        let dim = grid.dim();
        let dt = grid.dt();
        let seen = (step + 1) * modes;
        if d.noisy {
            let mut rng = self.key.step_rng(d.id, step);
            for k in 0..modes {
                self.xi[step * modes + k] = StandardNormal.sample(&mut rng);
            }
        }
        for (k, out) in current.iter_mut().enumerate() {
            let i = step * modes + k;
            let chi_row = &d.chi_rows[i * dim..i * dim + seen];
            let response: f64 = chi_row.iter().zip(&field[..seen]).map(|(c, a)| c * a).sum();
            let mut value = d.mu0.as_slice()[i] + dt * response;
            if d.noisy {
                let l_row = &d.noise_rows[i * dim..=i * dim + i];
                let noise: f64 = l_row.iter().zip(&self.xi[..=i]).map(|(l, x)| l * x).sum();
                value += noise;
            }
            *out = value;
        }
    }
}

impl BareDevice for GaussianDevice {
    fn id(&self) -> DeviceId {
        self.id
    }

    fn grid(&self) -> &TimeGrid {
        self.mu0.grid()
    }

    fn sampler(&self, key: StreamKey) -> Box<dyn StepSampler + '_> {
        Box::new(GaussianSampler {
            device: self,
            key,
            xi: vec![0.0; self.grid().dim()],
        })
    }

    fn is_field_insensitive(&self) -> bool {
        self.chi.is_zero()
    }

    fn has_same_time_response(&self) -> bool {
        self.chi.has_same_time_terms()
    }

    fn emission_modes(&self) -> Vec<usize> {
        let grid = self.grid();
        let dim = grid.dim();
        (0..grid.n_modes())
            .filter(|&k| {
                (0..grid.n_steps()).any(|n| {
                    let i = grid.index(n, k);
                    self.mu0.as_slice()[i] != 0.0
                        || self.noise_cov[(i, i)] != 0.0
                        || (0..dim).any(|j| self.chi.matrix()[(i, j)] != 0.0)
                })
            })
            .collect()
    }
}

/// Photodetector with shot noise and dark counts.
///
/// Counts in step `n` are Poisson with mean `λₙ dt`, where
/// `λₙ = dark_rate + η A_loc[n, input]²`; the output current is `q·counts/dt`
/// in the output mode and zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonDetector {
    id: DeviceId,
    grid: TimeGrid,
    input_mode: usize,
    output_mode: usize,
    efficiency: f64,
    dark_rate: f64,
    charge: f64,
}

impl PoissonDetector {
    pub fn new(
        id: DeviceId,
        grid: TimeGrid,
        input_mode: usize,
        output_mode: usize,
        efficiency: f64,
        dark_rate: f64,
        charge: f64,
    ) -> Result<Self> {
        if input_mode >= grid.n_modes() {
            return Err(invalid("input_mode", format!("{input_mode} out of range")));
        }
        if output_mode >= grid.n_modes() {
            return Err(invalid(
                "output_mode",
                format!("{output_mode} out of range"),
            ));
        }
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(invalid(
                "efficiency",
                format!("must lie in [0, 1], got {efficiency}"),
            ));
        }
        if !(dark_rate >= 0.0 && dark_rate.is_finite()) {
            return Err(invalid(
                "dark_rate",
                format!("must be >= 0, got {dark_rate}"),
            ));
        }
        if !charge.is_finite() {
            return Err(invalid("charge", "must be finite"));
        }
        Ok(Self {
            id,
            grid,
            input_mode,
            output_mode,
            efficiency,
            dark_rate,
            charge,
        })
    }

    pub fn input_mode(&self) -> usize {
        self.input_mode
    }

    pub fn output_mode(&self) -> usize {
        self.output_mode
    }

    pub fn efficiency(&self) -> f64 {
        self.efficiency
    }

    pub fn dark_rate(&self) -> f64 {
        self.dark_rate
    }

    pub fn charge(&self) -> f64 {
        self.charge
    }

    /// Count rate for a given input field amplitude.
    pub fn rate(&self, field: f64) -> f64 {
        self.dark_rate + self.efficiency * field * field
    }
}

struct PoissonSampler<'a> {
    device: &'a PoissonDetector,
    key: StreamKey,
}

impl StepSampler for PoissonSampler<'_> {
    fn step(&mut self, step: usize, field: &[f64], current: &mut [f64]) {
        let d = self.device;
        let modes = d.grid.n_modes();
        let dt = d.grid.dt();
        let mean = d.rate(field[step * modes + d.input_mode]) * dt;
        let counts = if mean > 0.0 {
            let mut rng = self.key.step_rng(d.id, step);
            // mean is finite and positive here
            Poisson::new(mean)
                .map(|p| p.sample(&mut rng))
                .unwrap_or(0.0)
        } else {
            0.0
        };
        current.fill(0.0);
        current[d.output_mode] = d.charge * counts / dt;
    }
}

impl BareDevice for PoissonDetector {
    fn id(&self) -> DeviceId {
        self.id
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn sampler(&self, key: StreamKey) -> Box<dyn StepSampler + '_> {
        Box::new(PoissonSampler { device: self, key })
    }

    fn is_field_insensitive(&self) -> bool {
        self.efficiency == 0.0
    }

    fn emission_modes(&self) -> Vec<usize> {
        vec![self.output_mode]
    }
}

/// Sample mean and unbiased covariance, with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorMoments {
    pub n_samples: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Standard error of each mean entry, `√(cov_ii / N)`.
    pub mean_std_err: DVector<f64>,
    /// Standard error of each covariance entry, from the sample variance of
    /// the centred products.
    pub cov_std_err: DMatrix<f64>,
}

impl VectorMoments {
    pub fn estimate<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: Clone,
    {
        let iter = samples.into_iter();
        let mut count = 0usize;
        let mut dim = None;
        let mut sum: Vec<f64> = Vec::new();
        for s in iter.clone() {
            match dim {
                None => {
                    dim = Some(s.len());
                    sum = vec![0.0; s.len()];
                }
                Some(d) if d != s.len() => {
                    return Err(Error::Shape {
                        expected: d,
                        got: s.len(),
                    })
                }
                _ => {}
            }
            for (acc, v) in sum.iter_mut().zip(s) {
                *acc += v;
            }
            count += 1;
        }
        if count < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: count,
            });
        }
        let dim = dim.unwrap_or(0);
        let nf = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();

        // Upper triangle, row-major, of Σ d_i d_j and Σ (d_i d_j)².
        let mut s1 = vec![0.0; dim * dim];
        let mut s2 = vec![0.0; dim * dim];
        let mut centred = vec![0.0; dim];
        for s in iter {
            for ((c, v), m) in centred.iter_mut().zip(s).zip(&mean) {
                *c = v - m;
            }
            for i in 0..dim {
                let di = centred[i];
                let base = i * dim;
                for j in i..dim {
                    let p = di * centred[j];
                    s1[base + j] += p;
                    s2[base + j] += p * p;
                }
            }
        }
        let mut cov = DMatrix::zeros(dim, dim);
        let mut cov_se = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let c = s1[i * dim + j] / (nf - 1.0);
                let mean_p = s1[i * dim + j] / nf;
                let var_p = ((s2[i * dim + j] / nf - mean_p * mean_p) * nf / (nf - 1.0)).max(0.0);
                let se = (var_p / nf).sqrt();
                cov[(i, j)] = c;
                cov[(j, i)] = c;
                cov_se[(i, j)] = se;
                cov_se[(j, i)] = se;
            }
        }
        let mean_std_err = DVector::from_iterator(dim, (0..dim).map(|i| (cov[(i, i)] / nf).sqrt()));
        Ok(Self {
            n_samples: count,
            mean: DVector::from_vec(mean),
            cov,
            mean_std_err,
            cov_std_err: cov_se,
        })
    }
}

/// Moments of trajectory samples on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub mean: Trajectory,
    /// Covariance over the flattened `(step, mode)` index.
    pub cov: DMatrix<f64>,
    pub mean_std_err: Trajectory,
    pub cov_std_err: DMatrix<f64>,
    pub n_samples: usize,
}

/// Unbiased sample mean and covariance of trajectories.
pub fn estimate_moments(samples: &[Trajectory]) -> Result<MomentReport> {
    let Some(first) = samples.first() else {
        return Err(Error::TooFewSamples { needed: 2, got: 0 });
    };
    let grid = *first.grid();
    for s in samples {
        grid.ensure_same(s.grid(), "estimate_moments")?;
    }
    let v = VectorMoments::estimate(samples.iter().map(Trajectory::as_slice))?;
    Ok(MomentReport {
        mean: Trajectory::from_vector(grid, &v.mean)?,
        cov: v.cov,
        mean_std_err: Trajectory::from_vector(grid, &v.mean_std_err)?,
        cov_std_err: v.cov_std_err,
        n_samples: v.n_samples,
    })
}

/// Convenience: shareable handle.
pub type DeviceRef = Arc<dyn BareDevice>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagators::{retarded_single_mode, ModeSpec};
    use crate::timegrid::Strictness;

    fn scalar_grid() -> TimeGrid {
        TimeGrid::uniform(1.0, 1).unwrap()
    }

    #[test]
    fn noiseless_gaussian_is_its_mean_response() {
        let g = TimeGrid::uniform(0.5, 6).unwrap();
        let mu0 = Trajectory::from_fn(g, |n, _| n as f64 - 2.0);
        let chi = CausalKernel::from_fn(g, Strictness::SameTimeAllowed, |n, _, m, _| {
            1.0 / (1.0 + (n - m) as f64)
        })
        .unwrap();
        let a = Trajectory::from_fn(g, |n, _| (n as f64).sin());
        let dev = GaussianDevice::new(DeviceId(1), mu0.clone(), chi.clone(), DMatrix::zeros(6, 6))
            .unwrap();
        let j = sample_bare(&dev, &a, StreamKey::new(3, 0)).unwrap();
        let expected = mu0.add(&apply_kernel(&chi, &a).unwrap()).unwrap();
        assert!(j.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn gaussian_rejects_indefinite_noise() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = GaussianDevice::new(
            DeviceId(0),
            Trajectory::zeros(g),
            CausalKernel::zeros(g, Strictness::SameTimeAllowed),
            cov,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositiveSemidefinite(_)));
    }

    #[test]
    fn scalar_gaussian_shifts_mean_by_chi_field() {
        // p^I(J|A) = N(χA, J0²) with μ0 = 0.3, χ = 0.7, J0 = 1.5, A = 2.
        let g = scalar_grid();
        let chi = CausalKernel::from_fn(g, Strictness::SameTimeAllowed, |_, _, _, _| 0.7).unwrap();
        let dev =
            GaussianDevice::white(DeviceId(9), Trajectory::constant(g, 0.3), chi, 2.25).unwrap();
        let field = Trajectory::constant(g, 2.0);
        let samples: Vec<Trajectory> = (0..100_000)
            .map(|r| sample_bare(&dev, &field, StreamKey::new(11, r)).unwrap())
            .collect();
        let m = estimate_moments(&samples).unwrap();
        let se = m.mean_std_err.get(0, 0);
        assert!((m.mean.get(0, 0) - (0.3 + 0.7 * 2.0)).abs() < 4.0 * se);
        assert!((m.cov[(0, 0)] - 2.25).abs() < 4.0 * m.cov_std_err[(0, 0)]);
    }

    #[test]
    fn dark_counts_only() {
        let g = TimeGrid::uniform(0.01, 100).unwrap();
        let det = PoissonDetector::new(DeviceId(4), g, 0, 0, 0.5, 20.0, 1.6).unwrap();
        let field = Trajectory::zeros(g);
        let charges: Vec<Trajectory> = (0..20_000)
            .map(|r| {
                let j = sample_bare(&det, &field, StreamKey::new(5, r)).unwrap();
                let q: f64 = j.as_slice().iter().sum::<f64>() * g.dt();
                Trajectory::constant(scalar_grid(), q)
            })
            .collect();
        let m = estimate_moments(&charges).unwrap();
        // q · dark_rate · T with T = n_steps · dt = 1
        let expected = 1.6 * 20.0 * 1.0;
        assert!((m.mean.get(0, 0) - expected).abs() < 4.0 * m.mean_std_err.get(0, 0));
    }

    #[test]
    fn detector_validates_parameters() {
        let g = TimeGrid::new(0.0, 0.1, 4, 2).unwrap();
        assert!(PoissonDetector::new(DeviceId(0), g, 2, 1, 0.5, 0.0, 1.0).is_err());
        assert!(PoissonDetector::new(DeviceId(0), g, 0, 1, 1.5, 0.0, 1.0).is_err());
        assert!(PoissonDetector::new(DeviceId(0), g, 0, 1, 0.5, -1.0, 1.0).is_err());
        let d = PoissonDetector::new(DeviceId(0), g, 0, 1, 0.5, 0.0, 1.0).unwrap();
        assert_eq!(d.emission_modes(), vec![1]);
    }

    #[test]
    fn radiate_examples() {
        let g = TimeGrid::uniform(0.1, 64).unwrap();
        let k = retarded_single_mode(&g, ModeSpec::with_omega(1.0).unwrap()).unwrap();
        assert_eq!(
            radiate(&k, &Trajectory::zeros(g)).unwrap(),
            Trajectory::zeros(g)
        );

        let imp = radiate(&k, &Trajectory::impulse(g, 7, 0)).unwrap();
        for n in 0..64 {
            assert_eq!(imp.get(n, 0), 0.1 * k.get(n, 0, 7, 0));
        }

        // Direct convolution oracle: 𝒜ₙ = dt Σ_{m<n} sin((n−m)dt) sin(m dt).
        let j = Trajectory::from_fn(g, |n, _| (n as f64 * 0.1).sin());
        let a = radiate(&k, &j).unwrap();
        for n in 0..64 {
            let oracle: f64 = (0..n)
                .map(|m| 0.1 * ((n - m) as f64 * 0.1).sin() * (m as f64 * 0.1).sin())
                .sum();
            assert!((a.get(n, 0) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_examples() {
        let g = scalar_grid();
        let same = vec![Trajectory::constant(g, 2.5); 4];
        assert_eq!(estimate_moments(&same).unwrap().cov[(0, 0)], 0.0);

        let pm = [Trajectory::constant(g, 1.0), Trajectory::constant(g, -1.0)];
        let m = estimate_moments(&pm).unwrap();
        assert_eq!(m.mean.get(0, 0), 0.0);
        assert_eq!(m.cov[(0, 0)], 2.0);

        assert!(matches!(
            estimate_moments(&pm[..1]),
            Err(Error::TooFewSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn unit_normal_mean_obeys_clt_bound() {
        let g = scalar_grid();
        let dev = GaussianDevice::white(
            DeviceId(77),
            Trajectory::zeros(g),
            CausalKernel::zeros(g, Strictness::SameTimeAllowed),
            1.0,
        )
        .unwrap();
        let zero = Trajectory::zeros(g);
        let samples: Vec<Trajectory> = (0..100_000)
            .map(|r| sample_bare(&dev, &zero, StreamKey::new(1, r)).unwrap())
            .collect();
        let m = estimate_moments(&samples).unwrap();
        assert!(m.mean.get(0, 0).abs() < 4.0 / (100_000f64).sqrt());
    }
}
