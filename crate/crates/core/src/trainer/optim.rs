use crate::scalar::Scalar;

use super::config::TrainConfig;

/// Step-decayed learning rate: `lr · decay^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// RMSprop without momentum:
/// `v ← α v + (1 − α) g²`, `θ ← θ − lr · g / (√v + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub alpha: T,
    pub eps: T,
    square_avg: Vec<T>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(len: usize, alpha: f64, eps: f64) -> Self {
        RmsProp {
            alpha: T::of(alpha),
            eps: T::of(eps),
            square_avg: vec![T::zero(); len],
        }
    }

    pub fn with_state(square_avg: Vec<T>, alpha: f64, eps: f64) -> Self {
        RmsProp {
            alpha: T::of(alpha),
            eps: T::of(eps),
            square_avg,
        }
    }

    pub fn state(&self) -> &[T] {
        &self.square_avg
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.square_avg.len());
        let lr = T::of(lr);
        let one_minus = T::one() - self.alpha;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            *v = self.alpha * *v + one_minus * g * g;
            *p -= lr * g / (v.sqrt() + self.eps);
        }
    }
}
