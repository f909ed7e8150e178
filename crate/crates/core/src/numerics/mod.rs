//! Dense matrices, reverse-mode differentiation, ridge-regularized SPD solves
//! and softmax losses. All arithmetic is `f64`.

mod linalg;
mod loss;
mod matrix;
mod tape;

pub use linalg::{solve_spd_regularized, Cholesky, SYMMETRY_TOL};
pub use loss::{loss_ce_softmax, loss_kl_softmax, softmax};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

pub(crate) use matrix::dot;

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of a matrix.
///
/// Entry `(i, j)` is `(f(X + h·E_ij) − f(X − h·E_ij)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fd_of_squared_norm() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        let g = finite_diff_gradient(|m| Ok(m.frobenius_sq()), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Matrix::from_rows(&[[0.5, -3.0], [2.0, 7.0]]);
        let g = finite_diff_gradient(|m| Ok(m.sum()), &x, 1e-5).unwrap();
        for v in g.as_slice() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        assert!(finite_diff_gradient(|m| Ok(m.sum()), &Matrix::zeros(1, 1), 0.0).is_err());
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of the
    /// Cholesky path.
    fn dense_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = a.get(i, j);
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[x][col].abs().partial_cmp(&aug[y][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    for c in 0..2 * n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv.set(i, j, aug[i][n + j]);
            }
        }
        inv
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let b = Matrix::new(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        b.matmul_nt(&b).unwrap()
    }

    #[test]
    fn solve_matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = random_spd(&mut rng, 5);
        let y = Matrix::new(5, 2, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lambda = 0.01;
        let z = solve_spd_regularized(&k, lambda, &y).unwrap();
        let a = k.add(&Matrix::identity(5).scale(lambda)).unwrap();
        let expect = dense_inverse(&a).matmul(&y).unwrap();
        assert!(z.sub(&expect).unwrap().max_abs() < 1e-8);
        let residual = a.matmul(&z).unwrap().sub(&y).unwrap().frobenius();
        assert!(residual <= 1e-8 * (1.0 + y.frobenius()));
    }

    #[test]
    fn solve_gradient_wrt_y_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_spd(&mut rng, 4);
        let y0 = Matrix::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Matrix::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        // f(Y) = ½‖W ⊙-free projection‖: ½‖(K+λI)⁻¹Y − W‖²
        let f = |y: &Matrix| -> Result<f64> {
            let z = solve_spd_regularized(&k, 0.1, y)?;
            Ok(0.5 * z.sub(&w)?.frobenius_sq())
        };
        let mut tape = Tape::new();
        let kv = tape.leaf(k.clone());
        let yv = tape.leaf(y0.clone());
        let wv = tape.leaf(w.clone());
        let z = tape.solve_spd(kv, 0.1, yv).unwrap();
        let d = tape.sub(z, wv).unwrap();
        let l = tape.half_sum_sq(d);
        let g = tape.backward(l).unwrap();
        let fd = finite_diff_gradient(f, &y0, 1e-5).unwrap();
        let err = g.get(yv).unwrap().sub(&fd).unwrap().frobenius() / fd.frobenius();
        assert!(err < 1e-4, "rel err {err}");
        // closed form: ∇_Y = A⁻¹ (Z − W)
        let zval = tape.value(z).sub(&w).unwrap();
        let closed = solve_spd_regularized(&k, 0.1, &zval).unwrap();
        assert!(g.get(yv).unwrap().sub(&closed).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn solve_gradient_wrt_k_through_gram_matches_fd() {
        // K = P·Pᵀ keeps K symmetric under every perturbation of P.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p0 = Matrix::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Matrix::new(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = |p: &Matrix| -> Result<f64> {
            let k = p.matmul_nt(p)?;
            Ok(0.5 * solve_spd_regularized(&k, 0.05, &y)?.frobenius_sq())
        };
        let mut tape = Tape::new();
        let pv = tape.leaf(p0.clone());
        let yv = tape.leaf(y.clone());
        let k = tape.matmul_nt(pv, pv).unwrap();
        let z = tape.solve_spd(k, 0.05, yv).unwrap();
        let l = tape.half_sum_sq(z);
        let g = tape.backward(l).unwrap();
        let fd = finite_diff_gradient(f, &p0, 1e-5).unwrap();
        let err = g.get(pv).unwrap().sub(&fd).unwrap().frobenius() / fd.frobenius();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn operations_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_spd(&mut rng, 6);
        let y = Matrix::new(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = solve_spd_regularized(&k, 0.3, &y).unwrap();
        let b = solve_spd_regularized(&k, 0.3, &y).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
