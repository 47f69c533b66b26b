//! AdamW, reduce-on-plateau and early stopping.

use circuits_autodiff::Tensor;
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
/// Absolute validation improvement that counts as progress.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub skipped: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
            skipped: 0,
        }
    }

    /// Applies one update; returns `false` (leaving everything untouched)
    /// when any gradient entry is not finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> bool {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            self.skipped += 1;
            log::warn!("non-finite gradient, optimizer step {} skipped", self.step + 1);
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *x *= 1.0 - lr * weight_decay;
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        true
    }
}

/// Multiplies the learning rate by `factor` once more than `patience`
/// consecutive epochs fail to improve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Returns `true` when `loss` is a new best (the caller should keep the
    /// current parameters).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_only_step() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(&p);
        assert!(opt.step(&mut p, &[Tensor::scalar(0.0)], 1e-3, 1e-3));
        assert!((p[0].item() - 0.999999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut p = vec![Tensor::scalar(0.5)];
            let mut opt = AdamW::new(&p);
            opt.step(&mut p, &[Tensor::scalar(g)], 1e-3, 0.0);
            let moved = p[0].item() - 0.5;
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-9);
        }
    }

    #[test]
    fn nan_gradient_skips() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut opt = AdamW::new(&p);
        assert!(!opt.step(&mut p, &[Tensor::scalar(f64::NAN)], 1e-3, 1e-3));
        assert_eq!(p[0].item(), 2.0);
        assert_eq!((opt.step, opt.skipped), (0, 1));
    }

    #[test]
    fn plateau_halves_after_six_flat_epochs() {
        let mut s = Plateau::new(1e-3, 0.5, 5);
        let lrs: Vec<f64> = (0..7).map(|_| s.observe(1.0)).collect();
        // Epoch 1 sets the best; epochs 2..=7 are flat, the sixth of them decays.
        assert_eq!(lrs[..6], [1e-3; 6]);
        assert_eq!(lrs[6], 5e-4);
        let mut s = Plateau::new(1e-3, 0.5, 5);
        s.best = 0.0;
        let lrs: Vec<f64> = (0..6).map(|_| s.observe(1.0)).collect();
        assert_eq!(lrs[5], 5e-4);
        assert_eq!(lrs[4], 1e-3);
    }

    #[test]
    fn strictly_improving_never_decays() {
        let mut s = Plateau::new(1e-3, 0.5, 5);
        for i in 0..50 {
            assert_eq!(s.observe(-(i as f64) * 0.01), 1e-3);
        }
    }

    #[test]
    fn early_stopping_counts_bad_epochs() {
        let mut e = EarlyStopping::new(3);
        assert!(e.observe(0, 1.0));
        assert!(!e.observe(1, 0.99995));
        assert!(!e.observe(2, 1.2));
        assert!(!e.should_stop());
        assert!(!e.observe(3, 1.0));
        assert!(e.should_stop());
        assert_eq!(e.best_epoch, Some(0));
    }
}
