use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update `params` in place from `grads` (same order and shapes).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::with_lr(0.1);
        for _ in 0..5 {
            adam.step(&mut p, &[Tensor::zeros(&[3])]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![Tensor::zeros(&[3])];
        let mut adam = Adam::with_lr(0.01);
        adam.step(&mut p, &[Tensor::from_vec(&[3], g.to_vec()).unwrap()]);
        for (w, g) in p[0].data().iter().zip(g) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            assert!((w.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2
        let mut p = vec![Tensor::scalar(-5.0)];
        let mut adam = Adam::with_lr(0.1);
        let mut reached = None;
        for k in 0..2000 {
            let x = p[0].data()[0];
            if (x - 3.0).abs() < 1e-6 {
                reached = Some(k);
                break;
            }
            adam.step(&mut p, &[Tensor::scalar(2.0 * (x - 3.0))]);
        }
        assert!(reached.is_some(), "final x = {}", p[0].data()[0]);
    }
}
