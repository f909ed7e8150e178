use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `params` in place. Moments are allocated on the
    /// first call and the parameter shapes must not change afterwards.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam step", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam step",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::Input("optimizer state does not match parameters".into()));
        }

        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let before = p.clone();
        let mut adam = Adam::new();
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Matrix::zeros(1, 2)], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = Matrix::zeros(1, 3);
        let g = Matrix::from_rows(&[[0.3, -40.0, 1e-3]]);
        Adam::new().step(&mut [&mut p], &[g], 0.01).unwrap();
        let expect = [-0.01, 0.01, -0.01];
        for (a, b) in p.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(p) = ½ Σ a_i (p_i - c_i)², minimum 0 at c
        let a = [1.0, 4.0, 0.5];
        let c = [0.7, -0.3, 0.2];
        let mut p = Matrix::zeros(1, 3);
        let mut adam = Adam::new();
        let loss = |p: &Matrix| {
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(i, x)| 0.5 * a[i] * (x - c[i]).powi(2))
                .sum::<f64>()
        };
        for _ in 0..200 {
            let g = Matrix::new(
                1,
                3,
                p.as_slice().iter().enumerate().map(|(i, x)| a[i] * (x - c[i])).collect(),
            )
            .unwrap();
            adam.step(&mut [&mut p], &[g], 0.05).unwrap();
        }
        assert!(loss(&p) < 1e-3, "loss {}", loss(&p));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Matrix::zeros(1, 2);
        assert!(Adam::new().step(&mut [&mut p], &[Matrix::zeros(2, 1)], 0.1).is_err());
    }
}
