//! Adam with bias correction over flat parameter vectors.

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected update. `params` and `grads` must match the length
    /// given at construction.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.update(&mut p, &[0.0, 0.0, 0.0], 0.01);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_magnitude() {
        // With bias correction the first update is -lr * g / (|g| + eps'),
        // so a unit gradient moves the parameter by ~lr.
        let mut adam = AdamState::new(1);
        let mut p = vec![0.0];
        adam.update(&mut p, &[1.0], 0.01);
        let m_hat = 0.1 / (1.0 - 0.9f64);
        let v_hat = 0.001 / (1.0 - 0.999f64);
        let expect = -0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] + 0.01).abs() < 1e-6, "first step ~ -lr, got {}", p[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // min 0.5 * sum(c_i * x_i^2) over 10 dims
        let c: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.3).collect();
        let mut x: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * 0.4).collect();
        let mut adam = AdamState::new(10);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().zip(c.iter()).map(|(&xi, &ci)| ci * xi).collect();
            adam.update(&mut x, &g, 0.01);
        }
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "|x| = {norm}");
    }
}
