//! Retarded propagators of free field modes and their dressing by passive
//! linear media.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::fock::{expectation, FieldState, FockSpace};
use crate::numerics::solve_unit_lower_in_place;
use crate::timegrid::{CausalKernel, Strictness, TimeGrid};

/// A free field mode: angular frequency and action scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeSpec {
    omega: f64,
    hbar: f64,
}

impl ModeSpec {
    pub fn new(omega: f64, hbar: f64) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(invalid(
                "omega",
                format!("must be finite and >= 0, got {omega}"),
            ));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(invalid(
                "hbar",
                format!("must be finite and > 0, got {hbar}"),
            ));
        }
        Ok(Self { omega, hbar })
    }

    /// Mode with `ħ = 1`.
    pub fn with_omega(omega: f64) -> Result<Self> {
        Self::new(omega, 1.0)
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// `sin(ωτ)/ω`, continued to `τ` at `ω = 0`.
    pub fn response(&self, lag: f64) -> f64 {
        let x = self.omega * lag;
        if x.abs() < 1e-6 {
            lag * (1.0 - x * x / 6.0)
        } else {
            x.sin() / self.omega
        }
    }

    /// Field amplitude per quantum, `√(ħ/2ω)`.
    pub fn field_scale(&self) -> Result<f64> {
        if self.omega == 0.0 {
            return Err(invalid("omega", "a static mode has no Fock representation"));
        }
        Ok((self.hbar / (2.0 * self.omega)).sqrt())
    }
}

/// `G_R(t,t') = θ(t−t') sin(ω(t−t'))/ω` with `θ(0) = 0`.
pub fn retarded_single_mode(grid: &TimeGrid, mode: ModeSpec) -> Result<CausalKernel> {
    if grid.n_modes() != 1 {
        return Err(invalid(
            "grid",
            format!("expected one mode, got {}", grid.n_modes()),
        ));
    }
    retarded_diagonal(grid, &[mode])
}

/// Mode-diagonal retarded propagator, one free oscillator per grid mode.
pub fn retarded_diagonal(grid: &TimeGrid, modes: &[ModeSpec]) -> Result<CausalKernel> {
    if modes.len() != grid.n_modes() {
        return Err(invalid(
            "modes",
            format!(
                "{} mode specs for a grid with {} modes",
                modes.len(),
                grid.n_modes()
            ),
        ));
    }
    let dt = grid.dt();
    CausalKernel::stationary_diagonal(*grid, Strictness::Strict, |k, lag| {
        modes[k].response(lag as f64 * dt)
    })
}

/// Free-field operator `Â(t) = √(ħ/2ω)(a e^{−iωt} + a† e^{iωt})` on each grid step.
pub(crate) fn free_field_operators(
    grid: &TimeGrid,
    mode: ModeSpec,
    space: FockSpace,
) -> Result<Vec<DMatrix<Complex64>>> {
    let scale = mode.field_scale()?;
    let a = space.annihilation();
    let ad = space.creation();
    Ok((0..grid.n_steps())
        .map(|n| {
            let phase = Complex64::from_polar(scale, -mode.omega() * grid.time(n));
            &a * phase + &ad * phase.conj()
        })
        .collect())
}

/// Kubo's relation evaluated on truncated ladder matrices:
/// `G_R(t,t') = (i/ħ) θ(t−t') ⟨[Â(t), Â(t')]⟩`, averaged in the vacuum.
pub fn fock_commutator_propagator(
    grid: &TimeGrid,
    mode: ModeSpec,
    n_max: usize,
) -> Result<CausalKernel> {
    if grid.n_modes() != 1 {
        return Err(invalid(
            "grid",
            format!("expected one mode, got {}", grid.n_modes()),
        ));
    }
    let space = FockSpace::new(n_max)?;
    let ops = free_field_operators(grid, mode, space)?;
    let rho = FieldState::Vacuum.density_matrix(space)?;
    let factor = Complex64::new(0.0, 1.0 / mode.hbar());
    CausalKernel::from_fn(*grid, Strictness::Strict, |n, _, m, _| {
        let comm = &ops[n] * &ops[m] - &ops[m] * &ops[n];
        (factor * expectation(&rho, &comm)).re
    })
}

/// Largest deviation between the Fock-commutator propagator and
/// [`retarded_single_mode`].
pub fn kubo_check(grid: &TimeGrid, mode: ModeSpec, n_max: usize) -> Result<f64> {
    let analytic = retarded_single_mode(grid, mode)?;
    let quantum = fock_commutator_propagator(grid, mode, n_max)?;
    Ok((analytic.matrix() - quantum.matrix()).amax())
}

/// Absorbs a strictly causal medium susceptibility `Π` into the propagator by
/// solving `G' = G + G Π G'` in time order.
///
/// With kernel products carrying `dt`, this is the unit lower-triangular
/// system `(I − dt² G Π) G' = G`.
pub fn dyson_absorb(g: &CausalKernel, pi: &CausalKernel) -> Result<CausalKernel> {
    g.grid().ensure_same(pi.grid(), "dyson_absorb")?;
    if !g.is_strict() || !pi.is_strict() {
        return Err(Error::SameTimeSelfAction);
    }
    let dt = g.grid().dt();
    let gp = g.matrix() * pi.matrix() * (dt * dt);
    let mut out = g.matrix().clone();
    let l = DMatrix::identity(gp.nrows(), gp.ncols()) - gp;
    solve_unit_lower_in_place(&l, &mut out);
    CausalKernel::new(*g.grid(), out, Strictness::Strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn quarter_period_entry_is_one() {
        let dt = FRAC_PI_2 / 4.0;
        let g = TimeGrid::uniform(dt, 6).unwrap();
        let k = retarded_single_mode(&g, ModeSpec::with_omega(1.0).unwrap()).unwrap();
        assert!((k.get(4, 0, 0, 0) - 1.0).abs() < 1e-15);
        for n in 0..6 {
            for m in n..6 {
                assert_eq!(k.get(n, 0, m, 0), 0.0);
            }
        }
    }

    #[test]
    fn static_limit_is_the_lag() {
        let g = TimeGrid::uniform(0.3, 5).unwrap();
        let k = retarded_single_mode(&g, ModeSpec::with_omega(0.0).unwrap()).unwrap();
        assert!((k.get(4, 0, 1, 0) - 0.9).abs() < 1e-15);
        let tiny = retarded_single_mode(&g, ModeSpec::with_omega(1e-9).unwrap()).unwrap();
        // series oracle: sin(ωτ)/ω = τ − ω²τ³/6 + …
        assert!((tiny.get(4, 0, 1, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn propagator_is_independent_of_hbar() {
        let g = TimeGrid::uniform(0.1, 16).unwrap();
        let base = retarded_single_mode(&g, ModeSpec::new(1.3, 1.0).unwrap()).unwrap();
        for hbar in [0.5, 2.0] {
            let k = retarded_single_mode(&g, ModeSpec::new(1.3, hbar).unwrap()).unwrap();
            assert!(base
                .matrix()
                .iter()
                .zip(k.matrix().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn kubo_relation_on_truncated_fock_space() {
        let g = TimeGrid::uniform(0.1, 32).unwrap();
        let mode = ModeSpec::with_omega(1.0).unwrap();
        assert!(kubo_check(&g, mode, 2).unwrap() < 1e-8);
        let low = fock_commutator_propagator(&g, mode, 2).unwrap();
        let high = fock_commutator_propagator(&g, mode, 10).unwrap();
        assert!((low.matrix() - high.matrix()).amax() < 1e-12);
        let a = fock_commutator_propagator(&g, ModeSpec::new(1.0, 0.5).unwrap(), 4).unwrap();
        let b = fock_commutator_propagator(&g, ModeSpec::new(1.0, 2.0).unwrap(), 4).unwrap();
        assert!((a.matrix() - b.matrix()).amax() < 1e-12);
    }

    #[test]
    fn kubo_check_rejects_static_mode() {
        let g = TimeGrid::uniform(0.1, 4).unwrap();
        assert!(kubo_check(&g, ModeSpec::with_omega(0.0).unwrap(), 3).is_err());
    }

    fn ones(n: usize) -> CausalKernel {
        let g = TimeGrid::uniform(1.0, n).unwrap();
        CausalKernel::from_fn(g, Strictness::Strict, |_, _, _, _| 1.0).unwrap()
    }

    #[test]
    fn dyson_examples() {
        let g = ones(5);
        let zero = CausalKernel::zeros(*g.grid(), Strictness::Strict);
        assert_eq!(dyson_absorb(&g, &zero).unwrap(), g);

        // Dense LU oracle: G' = (I − G Π)⁻¹ G with dt = 1.
        let dense = |n: usize| {
            let m = ones(n).matrix().clone();
            let lhs = DMatrix::identity(n, n) - &m * &m;
            lhs.lu().solve(&m).unwrap()
        };
        let three = dyson_absorb(&ones(3), &ones(3)).unwrap();
        assert!((three.matrix() - dense(3)).amax() < 1e-14);
        assert_eq!(three.matrix(), ones(3).matrix());

        let four = dyson_absorb(&ones(4), &ones(4)).unwrap();
        assert!((four.matrix() - dense(4)).amax() < 1e-14);
        assert_eq!(four.get(3, 0, 0, 0), 2.0);
    }

    #[test]
    fn dyson_rejects_same_time_kernels() {
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let same = CausalKernel::zeros(g, Strictness::SameTimeAllowed);
        let strict = CausalKernel::zeros(g, Strictness::Strict);
        assert_eq!(dyson_absorb(&strict, &same), Err(Error::SameTimeSelfAction));
    }
}
