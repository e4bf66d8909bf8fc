//! Discretised time and mode bookkeeping.
//!
//! Time integrals are left-point sums, `∫dt f(t) → dt Σₙ f(tₙ)`. Kernels are
//! dense matrices over the flattened `(step, mode)` index `step * n_modes + mode`,
//! so "earlier in time" always means "smaller flattened index block".

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_steps: usize,
    n_modes: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize, n_modes: usize) -> Result<Self> {
        if !t0.is_finite() {
            return Err(Error::InvalidGrid(format!("t0 must be finite, got {t0}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if n_modes == 0 {
            return Err(Error::InvalidGrid("n_modes must be at least 1".into()));
        }
        Ok(Self {
            t0,
            dt,
            n_steps,
            n_modes,
        })
    }

    /// Single-mode grid starting at zero.
    pub fn uniform(dt: f64, n_steps: usize) -> Result<Self> {
        Self::new(0.0, dt, n_steps, 1)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// Number of `(step, mode)` entries.
    pub fn dim(&self) -> usize {
        self.n_steps * self.n_modes
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    /// Step whose time is closest to `t`, if it lies on the grid.
    pub fn step_of(&self, t: f64) -> Option<usize> {
        let x = ((t - self.t0) / self.dt).round();
        (x >= 0.0 && (x as usize) < self.n_steps).then_some(x as usize)
    }

    pub fn index(&self, step: usize, mode: usize) -> usize {
        debug_assert!(step < self.n_steps && mode < self.n_modes);
        step * self.n_modes + mode
    }

    /// Inverse of [`TimeGrid::index`].
    pub fn split_index(&self, index: usize) -> (usize, usize) {
        (index / self.n_modes, index % self.n_modes)
    }

    /// Same grid with a different number of modes.
    pub fn with_modes(&self, n_modes: usize) -> Result<Self> {
        Self::new(self.t0, self.dt, self.n_steps, n_modes)
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )))
        }
    }
}

/// A real time series over a grid, stored `[step][mode]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.dim() {
            return Err(Error::Shape {
                expected: grid.dim(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.dim()],
        }
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.dim()],
        }
    }

    /// Builds a trajectory from `f(step, mode)`.
    ///
    /// Panics if `f` returns a non-finite value.
    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.dim());
        for n in 0..grid.n_steps() {
            for k in 0..grid.n_modes() {
                let v = f(n, k);
                assert!(v.is_finite(), "non-finite trajectory value at ({n}, {k})");
                values.push(v);
            }
        }
        Self { grid, values }
    }

    /// Unit impulse at `(step, mode)`.
    pub fn impulse(grid: TimeGrid, step: usize, mode: usize) -> Self {
        let mut t = Self::zeros(grid);
        t.values[grid.index(step, mode)] = 1.0;
        t
    }

    pub fn from_vector(grid: TimeGrid, v: &DVector<f64>) -> Result<Self> {
        Self::new(grid, v.iter().copied().collect())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn get(&self, step: usize, mode: usize) -> f64 {
        self.values[self.grid.index(step, mode)]
    }

    pub fn set(&mut self, step: usize, mode: usize, value: f64) {
        assert!(value.is_finite(), "non-finite trajectory value");
        let i = self.grid.index(step, mode);
        self.values[i] = value;
    }

    pub fn row(&self, step: usize) -> &[f64] {
        let m = self.grid.n_modes();
        &self.values[step * m..(step + 1) * m]
    }

    /// Rows `0..=step`, flattened.
    pub fn history(&self, step: usize) -> &[f64] {
        &self.values[..(step + 1) * self.grid.n_modes()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Trajectory) -> Result<Trajectory> {
        self.grid.ensure_same(&other.grid, "add")?;
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

    pub fn scale(&self, factor: f64) -> Trajectory {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// Exact equality of every bit, so `0.0` and `-0.0` differ.
    pub fn bit_eq(&self, other: &Trajectory) -> bool {
        self.grid == other.grid
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strictness {
    /// Entry `(n, m)` vanishes for `m ≥ n`.
    Strict,
    /// Entry `(n, m)` vanishes for `m > n`.
    SameTimeAllowed,
}

impl Strictness {
    /// Whether a kernel of this kind may couple step `col_step` into `row_step`.
    pub fn allows(self, row_step: usize, col_step: usize) -> bool {
        match self {
            Strictness::Strict => col_step < row_step,
            Strictness::SameTimeAllowed => col_step <= row_step,
        }
    }
}

/// Causal response kernel over the flattened `(step, mode)` index.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalKernel {
    grid: TimeGrid,
    values: DMatrix<f64>,
    strictness: Strictness,
}

impl CausalKernel {
    pub fn new(grid: TimeGrid, values: DMatrix<f64>, strictness: Strictness) -> Result<Self> {
        let dim = grid.dim();
        if values.nrows() != dim || values.ncols() != dim {
            return Err(Error::Shape {
                expected: dim * dim,
                got: values.len(),
            });
        }
        for j in 0..dim {
            for i in 0..dim {
                let v = values[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonFinite(i * dim + j));
                }
                if v != 0.0 && !strictness.allows(i / grid.n_modes(), j / grid.n_modes()) {
                    return Err(Error::Acausal {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            grid,
            values,
            strictness,
        })
    }

    /// Skips the causality check. Only for negative-control fixtures that
    /// must be able to represent a broken kernel.
    pub fn new_unchecked(grid: TimeGrid, values: DMatrix<f64>, strictness: Strictness) -> Self {
        assert_eq!(values.shape(), (grid.dim(), grid.dim()));
        Self {
            grid,
            values,
            strictness,
        }
    }

    pub fn zeros(grid: TimeGrid, strictness: Strictness) -> Self {
        Self {
            grid,
            values: DMatrix::zeros(grid.dim(), grid.dim()),
            strictness,
        }
    }

    /// Builds a kernel from `f(n, k, m, k')`; entries outside the causal
    /// region are never evaluated.
    pub fn from_fn(
        grid: TimeGrid,
        strictness: Strictness,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let dim = grid.dim();
        let mut values = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let (n, k) = grid.split_index(i);
            for j in 0..dim {
                let (m, kp) = grid.split_index(j);
                if strictness.allows(n, m) {
                    values[(i, j)] = f(n, k, m, kp);
                }
            }
        }
        Self::new(grid, values, strictness)
    }

    /// Mode-diagonal kernel that depends on the step lag only:
    /// `K[(n,k)][(m,k)] = f(k, n − m)`.
    pub fn stationary_diagonal(
        grid: TimeGrid,
        strictness: Strictness,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        Self::from_fn(
            grid,
            strictness,
            |n, k, m, kp| {
                if k == kp {
                    f(k, n - m)
                } else {
                    0.0
                }
            },
        )
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn strictness(&self) -> Strictness {
        self.strictness
    }

    pub fn is_strict(&self) -> bool {
        self.strictness == Strictness::Strict
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, n: usize, k: usize, m: usize, kp: usize) -> f64 {
        self.values[(self.grid.index(n, k), self.grid.index(m, kp))]
    }

    /// Whether the kernel ever couples a step to itself.
    pub fn has_same_time_terms(&self) -> bool {
        let modes = self.grid.n_modes();
        (0..self.grid.dim()).any(|i| {
            let n = i / modes;
            (n * modes..(n + 1) * modes).any(|j| self.values[(i, j)] != 0.0)
        })
    }

    /// Whether every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Kernel product `(A·B)(t,t') = ∫dt'' A(t,t'') B(t'',t')`, i.e. `dt · A B`.
    pub fn product(&self, rhs: &CausalKernel) -> Result<CausalKernel> {
        self.grid.ensure_same(&rhs.grid, "kernel product")?;
        let strictness = if self.is_strict() || rhs.is_strict() {
            Strictness::Strict
        } else {
            Strictness::SameTimeAllowed
        };
        Ok(Self {
            grid: self.grid,
            values: (&self.values * &rhs.values) * self.grid.dt(),
            strictness,
        })
    }

    pub fn sum(&self, rhs: &CausalKernel) -> Result<CausalKernel> {
        self.grid.ensure_same(&rhs.grid, "kernel sum")?;
        let strictness = if self.is_strict() && rhs.is_strict() {
            Strictness::Strict
        } else {
            Strictness::SameTimeAllowed
        };
        Ok(Self {
            grid: self.grid,
            values: &self.values + &rhs.values,
            strictness,
        })
    }
}

/// `fg = ∫dt f(t) g(t)`, summed over modes.
pub fn inner(f: &Trajectory, g: &Trajectory) -> Result<f64> {
    f.grid.ensure_same(&g.grid, "inner")?;
    let s: f64 = f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum();
    Ok(f.grid.dt() * s)
}

/// `(K g)(t) = ∫dt' K(t,t') g(t')`.
pub fn apply_kernel(kernel: &CausalKernel, g: &Trajectory) -> Result<Trajectory> {
    kernel.grid.ensure_same(&g.grid, "apply_kernel")?;
    let dim = kernel.grid.dim();
    let dt = kernel.grid.dt();
    let k = &kernel.values;
    let mut out = vec![0.0; dim];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, gj) in g.values.iter().enumerate() {
            acc += k[(i, j)] * gj;
        }
        *o = dt * acc;
    }
    Trajectory::new(kernel.grid, out)
}

/// `f K g = ∫dt ∫dt' f(t) K(t,t') g(t')`.
pub fn bilinear(f: &Trajectory, kernel: &CausalKernel, g: &Trajectory) -> Result<f64> {
    inner(f, &apply_kernel(kernel, g)?)
}
