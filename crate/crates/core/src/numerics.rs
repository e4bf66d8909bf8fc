//! Numerical building blocks shared by the simulator and its oracles.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Correctly rounded floating-point sum of an arbitrary multiset of terms.
///
/// The result does not depend on the order in which terms are added, so two
/// loops that accumulate the same terms in a different order produce
/// bit-identical fields. Shewchuk's non-overlapping partials with a final
/// round-half-even correction.
#[derive(Clone, Debug, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            partials: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    pub fn add(&mut self, value: f64) {
        let mut x = value;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round half to even across the remaining partials.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

/// Order-independent sum of a sequence.
pub fn exact_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut acc = ExactSum::new();
    acc.extend(terms);
    acc.value()
}

/// Solves `L X = B` in place for unit lower-triangular `L`.
///
/// Only the strictly lower part of `l` is read; its diagonal is taken as 1.
pub fn solve_unit_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    debug_assert_eq!(l.ncols(), n);
    debug_assert_eq!(b.nrows(), n);
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut acc = b[(i, c)];
            for j in 0..i {
                let lij = l[(i, j)];
                if lij != 0.0 {
                    acc -= lij * b[(j, c)];
                }
            }
            b[(i, c)] = acc;
        }
    }
}

/// Returns true when every entry on or above the diagonal is exactly zero.
pub fn is_strictly_lower(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (i..m.ncols()).all(|j| m[(i, j)] == 0.0))
}

/// Lower-triangular factor `L` with `L Lᵀ = cov` for a positive semidefinite
/// matrix, computed without pivoting so that row order (time order) is kept.
///
/// Eigenvalues below `-tol` are rejected; slightly negative ones are clipped to
/// zero before factorisation. Zero pivots produce zero columns.
pub fn psd_cholesky(cov: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::Shape {
            expected: n * n,
            got: cov.len(),
        });
    }
    if let Some(i) = cov.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let c = if n == 0 {
        sym
    } else {
        let eig = sym.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min < -tol {
            return Err(Error::NotPositiveSemidefinite(min));
        }
        if min < 0.0 {
            let clipped = eig.eigenvalues.map(|v| v.max(0.0));
            let v = &eig.eigenvectors;
            v * DMatrix::from_diagonal(&clipped) * v.transpose()
        } else {
            sym
        }
    };
    let scale = c
        .diagonal()
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()))
        .max(1.0);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = c[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol * scale {
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut s = c[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    Ok(l)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for nodes 1, 3, 5 and the centre.
const GK_GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * GK_KRONROD_WEIGHTS[7];
    let mut gauss = fc * GK_GAUSS_WEIGHTS[3];
    for (i, &x) in GK_NODES[..7].iter().enumerate() {
        let dx = half * x;
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += GK_KRONROD_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GK_GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of `f` over `[a, b]` to absolute
/// tolerance `tol`, bisecting until each panel meets its share.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: FnMut(f64) -> f64>(
        f: &mut F,
        a: f64,
        b: f64,
        tol: f64,
        whole: (f64, f64),
        depth: u32,
    ) -> f64 {
        let (value, err) = whole;
        if err <= tol || depth == 0 {
            return value;
        }
        let mid = 0.5 * (a + b);
        let left = gk15(f, a, mid);
        let right = gk15(f, mid, b);
        recurse(f, a, mid, 0.5 * tol, left, depth - 1)
            + recurse(f, mid, b, 0.5 * tol, right, depth - 1)
    }
    let whole = gk15(&mut f, a, b);
    recurse(&mut f, a, b, tol, whole, 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_order_independent() {
        let terms = [1e16, 1.0, -1e16, 3.5, 1e-3, -2.25e15, 2.25e15];
        let forward = exact_sum(terms);
        let backward = exact_sum(terms.iter().rev().copied());
        assert_eq!(forward.to_bits(), backward.to_bits());
        assert_eq!(forward, 4.501);
    }

    #[test]
    fn exact_sum_of_nothing_is_zero() {
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn unit_lower_solve_matches_dense_inverse() {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, -2.0, 0.25, 1.0]);
        let mut b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0]);
        let expected = l.clone().try_inverse().unwrap() * &b;
        solve_unit_lower_in_place(&l, &mut b);
        assert!((b - expected).amax() < 1e-14);
    }

    #[test]
    fn psd_cholesky_handles_singular_and_rejects_indefinite() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_cholesky(&singular, 1e-10).unwrap();
        assert!((&l * l.transpose() - &singular).amax() < 1e-12);
        assert_eq!(l[(1, 1)], 0.0);

        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            psd_cholesky(&indefinite, 1e-10),
            Err(Error::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn quadrature_of_gaussian() {
        let norm = integrate(
            |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -12.0,
            12.0,
            1e-12,
        );
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
