//! Minimal Adam optimizer over flat parameter vectors.
//!
//! The training loop keeps one instance per player. State is the usual pair of
//! exponential moving averages with bias correction; there is no weight decay
//! or schedule — learning rates are passed per step so the caller owns any
//! scheduling.

/// Adam moment-decay and stabilization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    /// First-moment decay β₁.
    pub beta1: f64,
    /// Second-moment decay β₂.
    pub beta2: f64,
    /// Denominator stabilizer ε.
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    /// Fresh optimizer for `dim` parameters.
    pub fn new(dim: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Consume one gradient and write the additive update
    /// `δ = −lr · m̂ / (√v̂ + ε)` into `delta` (a minimization step; negate the
    /// gradient beforehand to ascend).
    pub fn step_into(&mut self, grad: &[f64], lr: f64, delta: &mut [f64]) {
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        assert_eq!(delta.len(), self.m.len(), "update length");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..grad.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            delta[i] = -lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
        }
    }
}
