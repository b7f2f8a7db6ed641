//! Adam, plateau learning-rate scheduling and early stopping.

use crate::error::{Error, Result};
use crate::params::Variable;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are created on the first step and are keyed
/// by parameter position, so the parameter list must keep a stable order.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn with_lr(lr: f64) -> Result<Self> {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// One update of every trainable parameter. Gradients are left as they are.
    pub fn step(&mut self, params: &mut [&mut Variable<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.trainable() {
                p.grad_data()?;
            }
            if self.first[i].shape() != p.value().shape() {
                return Err(Error::shape("adam", format!("parameter `{}` changed shape", p.name())));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let g = p.grad().expect("checked above").data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            let w = p.value_mut();
            for ((wi, &mi), &vi) in w.iter_mut().zip(m.iter()).zip(v.iter()) {
                *wi -= step_size * mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// evaluations without improvement.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
    best: f64,
    bad_rounds: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            min_lr: 1e-7,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_rounds: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feeds one validation loss; returns the (possibly reduced) learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold.copysign(self.best)) {
            self.best = loss;
            self.bad_rounds = 0;
            return lr;
        }
        self.bad_rounds += 1;
        if self.bad_rounds > self.patience {
            self.bad_rounds = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Stops after `patience` evaluations without a new best; remembers the best step.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_round: usize,
    rounds: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_round: 0,
            rounds: 0,
        }
    }

    /// Returns `true` when this evaluation is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.rounds += 1;
        if loss < self.best {
            self.best = loss;
            self.best_round = self.rounds;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.rounds - self.best_round >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Variable<f64> {
        Variable::new("p", Tensor::new(&[values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(&[1.0, -2.0]);
        p.zero_grad();
        let mut adam = Adam::with_lr(0.1).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value().data(), &[1.0, -2.0]);
        assert!(adam.first_moments()[0].data().iter().all(|&m| m == 0.0));
        assert!(adam.second_moments()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² at t=1, so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        let mut p = param(&[0.0, 0.0, 0.0]);
        p.accumulate_grad(&Tensor::new(&[3], vec![0.5, -3.0, 100.0]).unwrap()).unwrap();
        let mut adam = Adam::with_lr(1e-3).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        for (&w, s) in p.value().data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - s * 1e-3).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn two_step_trace_matches_scalar_reference() {
        let (lr, b1, b2, eps, g) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64, 0.3f64);
        // scalar reference evaluation of the bias-corrected rule
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = param(&[1.0]);
        let mut adam = Adam::with_lr(lr).unwrap();
        for _ in 0..2 {
            p.zero_grad();
            p.accumulate_grad(&Tensor::new(&[1], vec![g]).unwrap()).unwrap();
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!((p.value().data()[0] - w).abs() < 1e-10);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = param(&[1.0]);
        let mut adam = Adam::with_lr(0.1).unwrap();
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(0.5, 2);
        let mut lr = 1.0;
        lr = s.observe(1.0, lr);
        for _ in 0..2 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 1.0);
        }
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn early_stopping_counts_rounds_since_best() {
        let mut e = EarlyStopping::new(2);
        assert!(e.observe(3.0));
        assert!(!e.observe(3.5));
        assert!(!e.should_stop());
        assert!(!e.observe(4.0));
        assert!(e.should_stop());
    }
}
