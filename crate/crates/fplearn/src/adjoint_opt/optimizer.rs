//! First-order optimizers for the training loop.

use crate::error::{Error, Result};
use crate::scalar::{real, Scalar};

/// Optimizer selector with hyperparameters.
#[derive(Debug, Clone)]
pub enum OptimizerKind<T> {
    Adam {
        learning_rate: T,
        beta1: T,
        beta2: T,
        epsilon: T,
    },
    GradientDescent {
        learning_rate: T,
    },
}

impl<T: Scalar> OptimizerKind<T> {
    /// Adam with the stock moment constants (0.9, 0.999) and eps 1e-8.
    pub fn adam(learning_rate: T) -> Self {
        OptimizerKind::Adam {
            learning_rate,
            beta1: real(0.9),
            beta2: real(0.999),
            epsilon: real(1e-8),
        }
    }

    pub fn gradient_descent(learning_rate: T) -> Self {
        OptimizerKind::GradientDescent { learning_rate }
    }

    pub fn learning_rate(&self) -> T {
        match self {
            OptimizerKind::Adam { learning_rate, .. }
            | OptimizerKind::GradientDescent { learning_rate } => *learning_rate,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.learning_rate() > T::zero()) {
            return Err(Error::InvalidArgument(
                "learning rate must be > 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Optimizer state bound to one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind<T>,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind<T>, n_params: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            m: if moments { vec![T::zero(); n_params] } else { Vec::new() },
            v: if moments { vec![T::zero(); n_params] } else { Vec::new() },
            t: 0,
        }
    }

    /// In-place parameter update.
    pub fn step(&mut self, theta: &mut [T], grad: &[T]) {
        debug_assert_eq!(theta.len(), grad.len());
        match self.kind {
            OptimizerKind::GradientDescent { learning_rate } => {
                for (t, &g) in theta.iter_mut().zip(grad) {
                    *t -= learning_rate * g;
                }
            }
            OptimizerKind::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                self.t += 1;
                let bc1 = T::one() - beta1.powi(self.t);
                let bc2 = T::one() - beta2.powi(self.t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (T::one() - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (T::one() - beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    theta[i] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_descent_moves_against_the_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::gradient_descent(0.1), 2);
        let mut theta = vec![1.0, -1.0];
        opt.step(&mut theta, &[2.0, -4.0]);
        assert_eq!(theta, vec![0.8, -0.6]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1), 3);
        let mut theta = vec![3.0, -2.0, 1.0];
        for _ in 0..500 {
            let grad: Vec<f64> = theta.iter().map(|&t| 2.0 * t).collect();
            opt.step(&mut theta, &grad);
        }
        for t in theta {
            assert!(t.abs() < 1e-3);
        }
    }

    #[test]
    fn adam_first_step_size_is_the_learning_rate() {
        // With bias correction the first update has magnitude lr regardless
        // of the gradient scale.
        let mut opt = Optimizer::new(OptimizerKind::adam(0.05), 1);
        let mut theta = vec![0.0f64];
        opt.step(&mut theta, &[1234.5]);
        assert!((theta[0] + 0.05).abs() < 1e-9);
    }
}
