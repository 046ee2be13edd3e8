//! Adam with bias-corrected moment estimates.

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment buffer per parameter tensor, sized like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let first: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`; `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        debug_assert_eq!(params.len(), self.first.len());
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        let g = Tensor::vector(vec![0.3, -5.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &[&p]);
        adam.step(&mut [&mut p], &[&g]);
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 0.5));
            adam.step(&mut [&mut p], &[&g]);
        }
        assert!(p.data().iter().all(|x| (x - 0.5).abs() < 1e-3), "{p:?}");
    }
}
