//! Truncated single-mode Fock space: ladder operators and Gaussian states.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{invalid, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Occupation numbers `0..=n_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FockSpace {
    n_max: usize,
}

impl FockSpace {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max < 2 {
            return Err(invalid(
                "n_max",
                format!("Fock cutoff must be at least 2, got {n_max}"),
            ));
        }
        Ok(Self { n_max })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.n_max + 1
    }

    /// `a|n⟩ = √n |n−1⟩`.
    pub fn annihilation(&self) -> CMatrix {
        let d = self.dim();
        let mut a = CMatrix::zeros(d, d);
        for n in 1..d {
            a[(n - 1, n)] = Complex64::new((n as f64).sqrt(), 0.0);
        }
        a
    }

    pub fn creation(&self) -> CMatrix {
        self.annihilation().adjoint()
    }
}

/// Gaussian states of one free mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldState {
    Vacuum,
    Coherent(Complex64),
    Thermal { mean_occupation: f64 },
}

impl FieldState {
    /// Probability mass above the cutoff before renormalisation.
    pub fn truncated_population(&self, space: FockSpace) -> f64 {
        match *self {
            FieldState::Vacuum => 0.0,
            FieldState::Coherent(alpha) => {
                let mean = alpha.norm_sqr();
                let kept: f64 = poisson_weights(mean, space.n_max()).iter().sum();
                (1.0 - kept).max(0.0)
            }
            FieldState::Thermal { mean_occupation } => {
                let ratio = mean_occupation / (1.0 + mean_occupation);
                ratio.powi(space.n_max() as i32 + 1)
            }
        }
    }

    /// Density matrix, truncated and renormalised to unit trace.
    pub fn density_matrix(&self, space: FockSpace) -> Result<CMatrix> {
        let d = space.dim();
        let mut rho = CMatrix::zeros(d, d);
        match *self {
            FieldState::Vacuum => rho[(0, 0)] = Complex64::new(1.0, 0.0),
            FieldState::Coherent(alpha) => {
                if !(alpha.re.is_finite() && alpha.im.is_finite()) {
                    return Err(invalid("alpha", "coherent amplitude must be finite"));
                }
                // ⟨n|α⟩ ∝ αⁿ/√n!
                let mut amp = Vec::with_capacity(d);
                let mut c = Complex64::new(1.0, 0.0);
                for n in 0..d {
                    if n > 0 {
                        c = c * alpha / (n as f64).sqrt();
                    }
                    amp.push(c);
                }
                let norm: f64 = amp.iter().map(|z| z.norm_sqr()).sum();
                for i in 0..d {
                    for j in 0..d {
                        rho[(i, j)] = amp[i] * amp[j].conj() / norm;
                    }
                }
            }
            FieldState::Thermal { mean_occupation } => {
                if !(mean_occupation >= 0.0 && mean_occupation.is_finite()) {
                    return Err(invalid(
                        "mean_occupation",
                        format!("must be non-negative, got {mean_occupation}"),
                    ));
                }
                let ratio = mean_occupation / (1.0 + mean_occupation);
                let weights: Vec<f64> = (0..d).map(|n| ratio.powi(n as i32)).collect();
                let norm: f64 = weights.iter().sum();
                for (n, w) in weights.iter().enumerate() {
                    rho[(n, n)] = Complex64::new(w / norm, 0.0);
                }
            }
        }
        Ok(rho)
    }
}

fn poisson_weights(mean: f64, n_max: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n_max + 1);
    let mut p = (-mean).exp();
    for n in 0..=n_max {
        if n > 0 {
            p *= mean / n as f64;
        }
        w.push(p);
    }
    w
}

/// `Tr(ρ X)`.
pub fn expectation(rho: &CMatrix, op: &CMatrix) -> Complex64 {
    (rho * op).trace()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_commutator_is_identity_below_the_edge() {
        let s = FockSpace::new(6).unwrap();
        let a = s.annihilation();
        let comm = &a * s.creation() - s.creation() * &a;
        for n in 0..s.n_max() {
            assert!((comm[(n, n)] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        }
        // The truncation edge carries the compensating −n_max.
        assert!((comm[(6, 6)].re + 6.0).abs() < 1e-12);
    }

    #[test]
    fn states_have_unit_trace_and_expected_occupation() {
        let s = FockSpace::new(40).unwrap();
        let n_op = s.creation() * s.annihilation();
        for (state, n_bar) in [
            (FieldState::Vacuum, 0.0),
            (FieldState::Coherent(Complex64::new(1.0, -0.5)), 1.25),
            (
                FieldState::Thermal {
                    mean_occupation: 1.0,
                },
                1.0,
            ),
        ] {
            let rho = state.density_matrix(s).unwrap();
            assert!((rho.trace().re - 1.0).abs() < 1e-13);
            assert!((expectation(&rho, &n_op).re - n_bar).abs() < 1e-10);
        }
    }

    #[test]
    fn cutoff_below_two_is_rejected() {
        assert!(FockSpace::new(1).is_err());
    }
}
