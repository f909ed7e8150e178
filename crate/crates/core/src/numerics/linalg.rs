//! Regularized symmetric positive-definite solves.

use super::Matrix;
use crate::error::{Error, Result};

/// Symmetry tolerance applied before factorizing.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `k + lambda·I`. Only the lower triangle of `k` is read
    /// once the symmetry check has passed.
    pub fn factor(k: &Matrix, lambda: f64) -> Result<Self> {
        let (n, m) = k.shape();
        if n != m {
            return Err(Error::shape("cholesky", "square matrix", format!("{n}x{m}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Input(format!("ridge lambda must be >= 0, got {lambda}")));
        }
        let (gap, row, col) = k.asymmetry();
        if gap > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { row, col, gap });
        }
        let mut lower = vec![0.0; n * n];
        for j in 0..n {
            let mut d = k.get(j, j) + lambda;
            for p in 0..j {
                d -= lower[j * n + p] * lower[j * n + p];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Decomposition {
                    minor: j + 1,
                    pivot: d,
                });
            }
            let djj = d.sqrt();
            lower[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = k.get(i, j);
                for p in 0..j {
                    s -= lower[i * n + p] * lower[j * n + p];
                }
                lower[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Solves `A·Z = Y` column by column with forward/back substitution.
    pub fn solve(&self, y: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if y.rows() != n {
            return Err(Error::shape("cholesky solve", format!("{n} rows"), y.rows()));
        }
        let m = y.cols();
        let mut z = y.clone();
        let l = &self.lower;
        for c in 0..m {
            // L·w = y
            for i in 0..n {
                let mut s = z.get(i, c);
                for p in 0..i {
                    s -= l[i * n + p] * z.get(p, c);
                }
                z.set(i, c, s / l[i * n + i]);
            }
            // Lᵀ·z = w
            for i in (0..n).rev() {
                let mut s = z.get(i, c);
                for p in (i + 1)..n {
                    s -= l[p * n + i] * z.get(p, c);
                }
                z.set(i, c, s / l[i * n + i]);
            }
        }
        Ok(z)
    }
}

/// `(K + λI)⁻¹·Y` without forming the inverse.
pub fn solve_spd_regularized(k: &Matrix, lambda: f64, y: &Matrix) -> Result<Matrix> {
    Cholesky::factor(k, lambda)?.solve(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve() {
        let z = solve_spd_regularized(
            &Matrix::identity(2),
            0.0,
            &Matrix::from_rows(&[[3.0], [5.0]]),
        )
        .unwrap();
        assert_eq!(z, Matrix::from_rows(&[[3.0], [5.0]]));
    }

    #[test]
    fn diagonal_ridge_solve() {
        let k = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]);
        let z = solve_spd_regularized(&k, 1.0, &Matrix::from_rows(&[[3.0], [6.0]])).unwrap();
        assert!((z.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((z.get(1, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn names_failing_minor() {
        let k = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        match Cholesky::factor(&k, 0.0) {
            Err(Error::Decomposition { minor, .. }) => assert_eq!(minor, 3),
            other => panic!("expected decomposition failure, got {other:?}"),
        }
        // singular in the second minor
        let k = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        match Cholesky::factor(&k, 0.0) {
            Err(Error::Decomposition { minor, .. }) => assert_eq!(minor, 2),
            other => panic!("expected decomposition failure, got {other:?}"),
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let k = Matrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(matches!(
            Cholesky::factor(&k, 0.0),
            Err(Error::NotSymmetric { .. })
        ));
    }
}
