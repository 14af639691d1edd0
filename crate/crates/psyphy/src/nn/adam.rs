//! Adam optimizer over flat parameter slices.

use super::{cast, Element};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state; one `(m, v)` moment pair per parameter tensor, identified
/// by its position in the slice list passed to `step`.
#[derive(Debug)]
pub struct Adam<F: Element> {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Element> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, moments: Vec::new() }
    }

    /// One update. `params` and `grads` must list the same tensors in the same
    /// order on every call.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]]) {
        assert_eq!(params.len(), grads.len());
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![F::zero(); p.len()], vec![F::zero(); p.len()]))
                .collect();
        }
        self.t += 1;
        let b1: F = cast(self.cfg.beta1);
        let b2: F = cast(self.cfg.beta2);
        let eps: F = cast(self.cfg.epsilon);
        let bc1: F = cast(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2: F = cast(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr: F = cast(self.cfg.learning_rate);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3).
        let mut x = [0.0f64];
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 3.0)];
            opt.step(&mut [&mut x], &[&g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "converged to {}", x[0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the first Adam step has magnitude ~lr.
        let mut x = [1.0f64];
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() });
        let g = [42.0];
        opt.step(&mut [&mut x], &[&g]);
        assert!((x[0] - (1.0 - 0.05)).abs() < 1e-6);
    }
}
