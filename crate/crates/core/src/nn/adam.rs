//! Adam optimizer with bias correction.

use ndarray::Array2;

use crate::error::{Error, Result};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the ordered parameter list. Moment buffers are
    /// allocated on first use and keyed by position, so callers must pass
    /// parameters in a stable order.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Argument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Argument("parameter count changed between steps".into()));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), (v, g)) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grads.iter()))
        {
            if p.dim() != g.dim() {
                return Err(Error::Argument("gradient shape mismatch".into()));
            }
            for ((pv, mv), (vv, gv)) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g.iter()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = Array2::from_elem((2, 2), 1.5);
        let g = Array2::from_elem((2, 2), 0.3);
        let mut opt = Adam::new(0.0);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!(p.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn quadratic_toy_converges() {
        // f(x) = (x - 3)^2, df = 2(x - 3); 200 steps should land within 1e-2.
        let mut x = Array2::from_elem((1, 1), 0.0);
        let mut opt = Adam::new(0.05);
        for _ in 0..200 {
            let g = Array2::from_elem((1, 1), 2.0 * (x[[0, 0]] - 3.0));
            opt.step(&mut [&mut x], &[g]).unwrap();
        }
        assert!((x[[0, 0]] - 3.0).abs() <= 1e-2, "x = {}", x[[0, 0]]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = Array2::zeros((1, 1));
        let g = Array2::from_elem((1, 1), f64::NAN);
        let mut opt = Adam::new(0.1);
        assert!(matches!(opt.step(&mut [&mut p], &[g]), Err(Error::Numeric(_))));
    }
}
