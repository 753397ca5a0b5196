//! Adam with per-parameter learning rates.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    rates: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_rates(vec![lr; len])
    }

    pub fn with_rates(rates: Vec<f64>) -> Self {
        let n = rates.len();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, rates, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates the moments with `grad` and returns the bias-corrected step to
    /// subtract from the parameters.
    pub fn step_direction(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.rates.len(), "gradient length does not match optimizer");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                self.rates[i] * m_hat / (v_hat.sqrt() + self.eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let d = self.step_direction(grad);
        for (p, s) in params.iter_mut().zip(d) {
            *p -= s;
        }
    }
}
