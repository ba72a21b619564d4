use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and coupled (L2) weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, lr: f64, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau for a metric that should go down.
///
/// A validation counts as an improvement when it beats the best value so far
/// by a relative margin of `threshold`. After more than `patience`
/// consecutive non-improving validations the rate is multiplied by `factor`
/// (never below `min_lr`) and the counter restarts.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feeds one validation value; returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_by_hand() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let g = [Tensor::vector(vec![0.5]).unwrap()];
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(0.1, vec![&mut p], &g).unwrap();
        // v = 0.5 + 0.1 = 0.6; p = 1 - 0.06
        assert!((p.data()[0] - 0.94).abs() < 1e-15);
        opt.step(0.1, vec![&mut p], &g).unwrap();
        // v = 0.54 + 0.5 + 0.094 = 1.134
        assert!((p.data()[0] - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_shrinks_norm() {
        let mut p = Tensor::vector(vec![3.0, -4.0, 0.5]).unwrap();
        let zero = [Tensor::zeros(&[3])];
        let mut opt = Sgd::new(0.9, 1e-3);
        let mut last = p.norm();
        for _ in 0..200 {
            opt.step(0.5, vec![&mut p], &zero).unwrap();
            assert!(p.norm() < last);
            last = p.norm();
        }
    }

    #[test]
    fn plateau_waits_for_patience() {
        let mut s = PlateauScheduler::new(0.1, 2, 1e-6);
        let mut lr = 0.1;
        lr = s.observe(1.0, lr);
        lr = s.observe(1.0, lr);
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 0.1);
        lr = s.observe(1.0, lr);
        assert!((lr - 0.01).abs() < 1e-15);
        // improvement resets the counter
        lr = s.observe(0.5, lr);
        lr = s.observe(0.6, lr);
        lr = s.observe(0.6, lr);
        assert!((lr - 0.01).abs() < 1e-15);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = PlateauScheduler::new(0.1, 0, 1e-6);
        let mut lr = 3e-6;
        s.observe(1.0, lr);
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 1e-6);
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 1e-6);
    }
}
