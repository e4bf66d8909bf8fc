//! Closed-form calculus for affine Gaussian devices.
//!
//! A device whose characteristic functional is
//! `Φ[ζ | A_e] = exp(i ζ·(μ₀ + S A_e) − ½ ζ·Σ ζ)` is fully described by the
//! triple `(μ₀, S, Σ)`. Dressing and composition act on that triple through
//! unit lower-triangular solves: the loop gain `S·dt·G` is strictly lower
//! triangular in time order, so `I − S·dt·G` inverts by forward substitution.
//!
//! Nothing in this module carries an action scale; only field operators in
//! [`crate::timenormal`] and [`crate::propagators`] know about `ħ`.

use nalgebra::{DMatrix, DVector};

use crate::devices::GaussianDevice;
use crate::error::{Error, Result};
use crate::numerics::{is_strictly_lower, solve_unit_lower_in_place};
use crate::propagators::dyson_absorb;
use crate::timegrid::{CausalKernel, TimeGrid};

/// Tolerance for symmetry and positive semidefiniteness of covariances.
pub const COVARIANCE_TOLERANCE: f64 = 1e-10;

/// `(μ₀, S, Σ)`: mean current at zero field, linear response of the mean to
/// the external field, and noise covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineGaussianSpec {
    grid: TimeGrid,
    mean0: DVector<f64>,
    response: DMatrix<f64>,
    cov: DMatrix<f64>,
}

impl AffineGaussianSpec {
    /// `response` maps a field over `grid` to a current of `mean0.len()`
    /// entries (a multiple of `grid.dim()` for joint specs).
    pub fn new(
        grid: TimeGrid,
        mean0: DVector<f64>,
        response: DMatrix<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = mean0.len();
        if response.shape() != (n, grid.dim()) {
            return Err(Error::Shape {
                expected: n * grid.dim(),
                got: response.len(),
            });
        }
        if cov.shape() != (n, n) {
            return Err(Error::Shape {
                expected: n * n,
                got: cov.len(),
            });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > COVARIANCE_TOLERANCE * scale {
            return Err(Error::InvalidParameter {
                name: "cov",
                reason: "covariance is not symmetric".into(),
            });
        }
        if n > 0 {
            let min = cov.clone().symmetric_eigen().eigenvalues.min();
            if min < -COVARIANCE_TOLERANCE * scale {
                return Err(Error::NotPositiveSemidefinite(min));
            }
        }
        Ok(Self {
            grid,
            mean0,
            response,
            cov,
        })
    }

    /// Bare spec of a Gaussian device: `S = dt·χ`.
    pub fn from_device(device: &GaussianDevice) -> Self {
        let grid = *device.mu0().grid();
        Self {
            grid,
            mean0: device.mu0().to_vector(),
            response: device.chi().matrix() * grid.dt(),
            cov: device.noise_cov().clone(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    pub fn mean0(&self) -> &DVector<f64> {
        &self.mean0
    }

    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Mean current under the external field `a_e`.
    pub fn mean(&self, a_e: &DVector<f64>) -> DVector<f64> {
        &self.mean0 + &self.response * a_e
    }

    /// Image under a fixed linear map of the current.
    pub fn linear_image(&self, map: &DMatrix<f64>) -> Result<Self> {
        if map.ncols() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: map.ncols(),
            });
        }
        let cov = map * &self.cov * map.transpose();
        Ok(Self {
            grid: self.grid,
            mean0: map * &self.mean0,
            response: map * &self.response,
            cov: symmetrize(cov),
        })
    }

    /// Largest entrywise difference over `(μ₀, S, Σ)`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.mean0.len() != other.mean0.len() || self.response.shape() != other.response.shape()
        {
            return f64::INFINITY;
        }
        (&self.mean0 - &other.mean0)
            .amax()
            .max((&self.response - &other.response).amax())
            .max((&self.cov - &other.cov).amax())
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_cov_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.cov.clone().symmetric_eigen().eigenvalues.min()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn check_propagator(grid: &TimeGrid, g: &CausalKernel) -> Result<()> {
    grid.ensure_same(g.grid(), "gaussian propagator")?;
    if g.is_strict() {
        Ok(())
    } else {
        Err(Error::SameTimeSelfAction)
    }
}

/// Solves `M X = B` for unit lower-triangular `M = I − loop_gain`, after
/// verifying the loop gain is strictly lower triangular.
fn causal_solve(loop_gain: &DMatrix<f64>, rhs: &mut DMatrix<f64>) -> Result<()> {
    if !is_strictly_lower(loop_gain) {
        return Err(Error::SameTimeSelfAction);
    }
    let m = DMatrix::identity(loop_gain.nrows(), loop_gain.ncols()) - loop_gain;
    solve_unit_lower_in_place(&m, rhs);
    Ok(())
}

/// Applies `M⁻¹` to `(μ₀, S, Σ)`, with `M = I − loop_gain`.
fn dressed_triple(
    grid: TimeGrid,
    loop_gain: &DMatrix<f64>,
    mean0: &DVector<f64>,
    response: &DMatrix<f64>,
    cov: &DMatrix<f64>,
) -> Result<AffineGaussianSpec> {
    let n = mean0.len();
    let fields = response.ncols();
    let mut rhs = DMatrix::zeros(n, 1 + fields + n);
    rhs.column_mut(0).copy_from(mean0);
    rhs.columns_mut(1, fields).copy_from(response);
    rhs.columns_mut(1 + fields, n).copy_from(cov);
    causal_solve(loop_gain, &mut rhs)?;
    // M⁻¹ Σ M⁻ᵀ = M⁻¹ (M⁻¹ Σ)ᵀ for symmetric Σ.
    let mut cov_out = rhs.columns(1 + fields, n).transpose();
    causal_solve(loop_gain, &mut cov_out)?;
    Ok(AffineGaussianSpec {
        grid,
        mean0: rhs.column(0).into_owned(),
        response: rhs.columns(1, fields).into_owned(),
        cov: symmetrize(cov_out),
    })
}

/// Dressing of a single-device spec:
/// `μ₀' = M⁻¹μ₀`, `S' = M⁻¹S`, `Σ' = M⁻¹ΣM⁻ᵀ` with `M = I − S·dt·G`.
pub fn gaussian_dress(bare: &AffineGaussianSpec, g: &CausalKernel) -> Result<AffineGaussianSpec> {
    check_propagator(&bare.grid, g)?;
    if bare.dim() != bare.grid.dim() {
        return Err(Error::Shape {
            expected: bare.grid.dim(),
            got: bare.dim(),
        });
    }
    let loop_gain = &bare.response * g.matrix() * bare.grid.dt();
    dressed_triple(
        bare.grid,
        &loop_gain,
        &bare.mean0,
        &bare.response,
        &bare.cov,
    )
}

/// Bare composition of independent devices: means, responses and noise add.
pub fn gaussian_compose_bare(specs: &[AffineGaussianSpec]) -> Result<AffineGaussianSpec> {
    let first = specs.first().ok_or(Error::InvalidParameter {
        name: "specs",
        reason: "need at least one device".into(),
    })?;
    let mut out = first.clone();
    for s in &specs[1..] {
        out.grid.ensure_same(&s.grid, "gaussian_compose_bare")?;
        if s.dim() != out.dim() {
            return Err(Error::Shape {
                expected: out.dim(),
                got: s.dim(),
            });
        }
        out.mean0 += &s.mean0;
        out.response += &s.response;
        out.cov += &s.cov;
    }
    Ok(out)
}

/// Joint statistics of the per-device currents of a coupled network, stored
/// device-major: block `k` holds device `k`'s `(step, mode)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGaussianSpec {
    n_devices: usize,
    spec: AffineGaussianSpec,
}

impl JointGaussianSpec {
    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn spec(&self) -> &AffineGaussianSpec {
        &self.spec
    }

    fn block_dim(&self) -> usize {
        self.spec.grid.dim()
    }

    /// Marginal statistics of device `k`'s current.
    pub fn block(&self, k: usize) -> Result<AffineGaussianSpec> {
        let d = self.block_dim();
        let mut select = DMatrix::zeros(d, self.spec.dim());
        for i in 0..d {
            select[(i, k * d + i)] = 1.0;
        }
        self.spec.linear_image(&select)
    }

    /// Cross-covariance block between devices `k` and `l`.
    pub fn cross_cov(&self, k: usize, l: usize) -> DMatrix<f64> {
        let d = self.block_dim();
        self.spec.cov.view((k * d, l * d), (d, d)).into_owned()
    }
}

/// Joint statistics of `J_k = μ₀ₖ + Sₖ(A_e + dt·G Σⱼ Jⱼ) + ξₖ`.
///
/// The stacked system is solved in time-major order, where it is unit lower
/// triangular, and returned device-major.
pub fn gaussian_compose(
    specs: &[AffineGaussianSpec],
    g: &CausalKernel,
) -> Result<JointGaussianSpec> {
    let first = specs.first().ok_or(Error::InvalidParameter {
        name: "specs",
        reason: "need at least one device".into(),
    })?;
    let grid = first.grid;
    check_propagator(&grid, g)?;
    let d = grid.dim();
    for s in specs {
        grid.ensure_same(&s.grid, "gaussian_compose")?;
        if s.dim() != d {
            return Err(Error::Shape {
                expected: d,
                got: s.dim(),
            });
        }
    }
    let k = specs.len();
    let n = k * d;
    let modes = grid.n_modes();
    // Device-major (device, step, mode) -> time-major (step, device, mode).
    let to_time_major = |idx: usize| {
        let (dev, i) = (idx / d, idx % d);
        let (step, mode) = (i / modes, i % modes);
        step * k * modes + dev * modes + mode
    };

    let dt_g = g.matrix() * grid.dt();
    let mut loop_gain = DMatrix::zeros(n, n);
    let mut mean0 = DVector::zeros(n);
    let mut response = DMatrix::zeros(n, d);
    let mut cov = DMatrix::zeros(n, n);
    for (a, s) in specs.iter().enumerate() {
        let gain = &s.response * &dt_g;
        for i in 0..d {
            let row = to_time_major(a * d + i);
            mean0[row] = s.mean0[i];
            response.row_mut(row).copy_from(&s.response.row(i));
            for b in 0..k {
                for j in 0..d {
                    loop_gain[(row, to_time_major(b * d + j))] = gain[(i, j)];
                }
            }
            for j in 0..d {
                cov[(row, to_time_major(a * d + j))] = s.cov[(i, j)];
            }
        }
    }
    let solved = dressed_triple(grid, &loop_gain, &mean0, &response, &cov)?;

    // Back to device-major.
    let mut out_mean = DVector::zeros(n);
    let mut out_resp = DMatrix::zeros(n, d);
    let mut out_cov = DMatrix::zeros(n, n);
    for a in 0..n {
        let ta = to_time_major(a);
        out_mean[a] = solved.mean0[ta];
        out_resp.row_mut(a).copy_from(&solved.response.row(ta));
        for b in 0..n {
            out_cov[(a, b)] = solved.cov[(ta, to_time_major(b))];
        }
    }
    Ok(JointGaussianSpec {
        n_devices: k,
        spec: AffineGaussianSpec {
            grid,
            mean0: out_mean,
            response: out_resp,
            cov: out_cov,
        },
    })
}

/// Statistics of the total current `J = Σₖ Jₖ`.
pub fn marginal_total(joint: &JointGaussianSpec) -> Result<AffineGaussianSpec> {
    let d = joint.block_dim();
    let mut sum = DMatrix::zeros(d, joint.spec.dim());
    for k in 0..joint.n_devices {
        for i in 0..d {
            sum[(i, k * d + i)] = 1.0;
        }
    }
    joint.spec.linear_image(&sum)
}

/// Statistics of the field radiated by a current with statistics `spec`,
/// `𝒜 = dt·G J`.
pub fn radiated_field(spec: &AffineGaussianSpec, g: &CausalKernel) -> Result<AffineGaussianSpec> {
    spec.grid.ensure_same(g.grid(), "radiated_field")?;
    spec.linear_image(&(g.matrix() * spec.grid.dt()))
}

/// A noiseless linear medium whose current is `J = dt·Π A_loc`.
pub fn passive_medium(pi: &CausalKernel) -> Result<AffineGaussianSpec> {
    let grid = *pi.grid();
    let d = grid.dim();
    AffineGaussianSpec::new(
        grid,
        DVector::zeros(d),
        pi.matrix() * grid.dt(),
        DMatrix::zeros(d, d),
    )
}

/// A device composed with a linear medium, computed two ways.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMediaComparison {
    /// Marginal of the device in the explicit two-device composition.
    pub explicit: AffineGaussianSpec,
    /// The device dressed by the medium-modified propagator, with the
    /// external field passed through the medium's transfer `I + g'p`.
    pub absorbed: AffineGaussianSpec,
    pub deviation: f64,
}

/// Compares composing `device` with the medium `Π` against dressing it
/// with `G' = dyson_absorb(G, Π)`.
pub fn linear_media_equivalence(
    device: &AffineGaussianSpec,
    pi: &CausalKernel,
    g: &CausalKernel,
) -> Result<LinearMediaComparison> {
    let explicit = gaussian_compose(&[device.clone(), passive_medium(pi)?], g)?.block(0)?;
    let g_medium = dyson_absorb(g, pi)?;
    let dressed = gaussian_dress(device, &g_medium)?;
    let dt = device.grid.dt();
    let d = device.dim();
    let transfer = DMatrix::identity(d, d) + g_medium.matrix() * pi.matrix() * (dt * dt);
    let absorbed = AffineGaussianSpec {
        response: &dressed.response * transfer,
        ..dressed
    };
    let deviation = explicit.max_abs_diff(&absorbed);
    Ok(LinearMediaComparison {
        explicit,
        absorbed,
        deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timegrid::Strictness;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::uniform(0.5, n).unwrap()
    }

    fn spec(g: TimeGrid, chi: f64, var: f64, shift: f64) -> AffineGaussianSpec {
        let d = g.dim();
        let response = DMatrix::from_fn(d, d, |i, j| {
            if j <= i {
                chi / (1.0 + (i - j) as f64)
            } else {
                0.0
            }
        });
        let mean0 = DVector::from_fn(d, |i, _| shift + 0.1 * i as f64);
        let cov = DMatrix::from_fn(d, d, |i, j| var * (-((i as f64 - j as f64).abs())).exp());
        AffineGaussianSpec::new(g, mean0, response * g.dt(), cov).unwrap()
    }

    fn prop(g: TimeGrid) -> CausalKernel {
        CausalKernel::stationary_diagonal(g, Strictness::Strict, |_, lag| (0.7 * lag as f64).sin())
            .unwrap()
    }

    /// Dense oracle: J = (I − S dtG)⁻¹(μ₀ + S A_e + ξ) via LU.
    fn dense_dress(s: &AffineGaussianSpec, g: &CausalKernel) -> AffineGaussianSpec {
        let d = s.dim();
        let m = DMatrix::identity(d, d) - s.response() * g.matrix() * g.grid().dt();
        let inv = m.try_inverse().unwrap();
        AffineGaussianSpec {
            grid: s.grid,
            mean0: &inv * s.mean0(),
            response: &inv * s.response(),
            cov: &inv * s.cov() * inv.transpose(),
        }
    }

    #[test]
    fn zero_response_is_unchanged_by_dressing() {
        let g = grid(6);
        let mut s = spec(g, 0.0, 1.0, 0.2);
        s.response.fill(0.0);
        let out = gaussian_dress(&s, &prop(g)).unwrap();
        assert_eq!(out.max_abs_diff(&s), 0.0);
    }

    #[test]
    fn dressing_matches_dense_inverse() {
        let g = grid(10);
        let s = spec(g, 0.8, 1.5, -0.4);
        let k = prop(g);
        assert!(
            gaussian_dress(&s, &k)
                .unwrap()
                .max_abs_diff(&dense_dress(&s, &k))
                < 1e-12
        );
    }

    #[test]
    fn loop_gain_is_nilpotent() {
        let g = grid(7);
        let s = spec(g, 1.3, 1.0, 0.0);
        let gain = s.response() * prop(g).matrix() * g.dt();
        let mut power = DMatrix::identity(7, 7);
        for _ in 0..7 {
            power = &power * &gain;
        }
        assert!(power.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_time_moments_match_closed_form() {
        // χ = 1 same-time, G_R = 1 single delayed entry, J0 = 1, dt = 1.
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let (chi, gr, j0) = (1.0, 1.0, 1.0);
        let s = AffineGaussianSpec::new(
            g,
            DVector::zeros(2),
            DMatrix::from_diagonal_element(2, 2, chi),
            DMatrix::from_diagonal_element(2, 2, j0 * j0),
        )
        .unwrap();
        let k = CausalKernel::from_fn(g, Strictness::Strict, |_, _, _, _| gr).unwrap();
        let out = gaussian_dress(&s, &k).unwrap();
        let q = crate::dressing::TwoTimeModel::new(chi, gr, j0, 0.0, 0.0)
            .unwrap()
            .moments();
        assert!((out.cov()[(1, 1)] - q.var_late).abs() < 1e-7);
        assert!((out.cov()[(1, 0)] - q.cov).abs() < 1e-7);
        assert_eq!(out.cov()[(1, 1)], j0 * j0 * (1.0 + chi * chi * gr * gr));
    }

    #[test]
    fn same_time_propagator_is_rejected() {
        let g = grid(3);
        let s = spec(g, 1.0, 1.0, 0.0);
        let k = CausalKernel::zeros(g, Strictness::SameTimeAllowed);
        assert_eq!(gaussian_dress(&s, &k), Err(Error::SameTimeSelfAction));
    }

    #[test]
    fn single_device_composition_is_dressing() {
        let g = grid(8);
        let s = spec(g, 0.6, 0.9, 0.3);
        let joint = gaussian_compose(std::slice::from_ref(&s), &prop(g)).unwrap();
        let dressed = gaussian_dress(&s, &prop(g)).unwrap();
        assert!(joint.spec().max_abs_diff(&dressed) < 1e-13);
    }

    #[test]
    fn uncoupled_composition_is_block_diagonal() {
        let g = grid(5);
        let zero = CausalKernel::zeros(g, Strictness::Strict);
        let joint =
            gaussian_compose(&[spec(g, 0.6, 0.9, 0.3), spec(g, -0.4, 2.0, 1.0)], &zero).unwrap();
        assert!(joint.cross_cov(0, 1).iter().all(|&v| v == 0.0));
        assert!(
            joint
                .block(1)
                .unwrap()
                .max_abs_diff(&spec(g, -0.4, 2.0, 1.0))
                < 1e-15
        );
    }

    #[test]
    fn two_device_composition_matches_dense_solve() {
        let g = grid(8);
        let specs = [spec(g, 0.7, 1.0, 0.2), spec(g, 0.7, 1.0, 0.2)];
        let k = prop(g);
        let joint = gaussian_compose(&specs, &k).unwrap();
        // Dense oracle in device-major order.
        let d = g.dim();
        let dt_g = k.matrix() * g.dt();
        let mut m = DMatrix::identity(2 * d, 2 * d);
        let mut s_stack = DMatrix::zeros(2 * d, d);
        let mut mu = DVector::zeros(2 * d);
        let mut cov = DMatrix::zeros(2 * d, 2 * d);
        for (a, s) in specs.iter().enumerate() {
            let gain = s.response() * &dt_g;
            for b in 0..2 {
                m.view_mut((a * d, b * d), (d, d)).copy_from(&(-&gain));
            }
            s_stack.view_mut((a * d, 0), (d, d)).copy_from(s.response());
            mu.rows_mut(a * d, d).copy_from(s.mean0());
            cov.view_mut((a * d, a * d), (d, d)).copy_from(s.cov());
        }
        for i in 0..2 * d {
            m[(i, i)] += 1.0;
        }
        let inv = m.try_inverse().unwrap();
        let spec = joint.spec();
        assert!((spec.mean0() - &inv * &mu).amax() < 1e-12);
        assert!((spec.response() - &inv * &s_stack).amax() < 1e-12);
        assert!((spec.cov() - &inv * &cov * inv.transpose()).amax() < 1e-12);
    }

    #[test]
    fn marginal_total_examples() {
        let g = grid(4);
        let zero = CausalKernel::zeros(g, Strictness::Strict);
        let s = spec(g, 0.3, 1.2, 0.5);
        let joint = gaussian_compose(&[s.clone(), s.clone(), s.clone()], &zero).unwrap();
        let total = marginal_total(&joint).unwrap();
        assert!((total.cov() - s.cov() * 3.0).amax() < 1e-14);
        assert!((total.mean0() - s.mean0() * 3.0).amax() < 1e-14);
    }

    #[test]
    fn composing_dressed_equals_dressing_composed() {
        let g = grid(9);
        let specs = [
            spec(g, 0.7, 1.0, 0.2),
            spec(g, -0.3, 0.5, 1.0),
            spec(g, 0.2, 2.0, 0.0),
        ];
        let k = prop(g);
        let total = marginal_total(&gaussian_compose(&specs, &k).unwrap()).unwrap();
        let summed = gaussian_dress(&gaussian_compose_bare(&specs).unwrap(), &k).unwrap();
        assert!(total.max_abs_diff(&summed) < 1e-10);
        assert!(total.min_cov_eigenvalue() > -1e-10);
    }

    #[test]
    fn spec_validation() {
        let g = grid(2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(AffineGaussianSpec::new(g, DVector::zeros(2), DMatrix::zeros(2, 2), asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(matches!(
            AffineGaussianSpec::new(g, DVector::zeros(2), DMatrix::zeros(2, 2), indef),
            Err(Error::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn medium_absorbs_into_propagator() {
        let g = grid(10);
        let k = CausalKernel::from_fn(g, Strictness::Strict, |n, _, m, _| {
            ((n - m) as f64 * 0.7).sin()
        })
        .unwrap();
        let pi = CausalKernel::from_fn(g, Strictness::Strict, |n, _, m, _| {
            -0.4 * (-0.5 * (n - m) as f64).exp()
        })
        .unwrap();
        let device = spec(g, 0.6, 1.3, 0.2);
        let c = linear_media_equivalence(&device, &pi, &k).unwrap();
        assert!(c.deviation < 1e-10, "{}", c.deviation);
        // Without the transfer of the external field the responses disagree.
        let plain = gaussian_dress(&device, &dyson_absorb(&k, &pi).unwrap()).unwrap();
        assert!((plain.response() - c.explicit.response()).amax() > 1e-3);
    }
}
