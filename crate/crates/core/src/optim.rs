//! AdamW and a reduce-on-plateau learning rate schedule.

use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `params`, then
    /// clears them. Weight decay is decoupled from the adaptive step.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((_, _, t), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (data, grad) = t.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let w = data[i].as_f64();
                data[i] = T::from_f64(w - self.lr * (update + self.weight_decay * w));
                grad[i] = T::zero();
            }
        }
    }
}

/// Halves (by default) the learning rate after `patience` epochs without
/// improvement of a minimized metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Default for ReduceOnPlateau {
    fn default() -> Self {
        ReduceOnPlateau {
            factor: 0.5,
            patience: 5,
            min_lr: 0.0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl ReduceOnPlateau {
    /// Records an epoch's metric and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is g / |g| = sign(g), plus decay.
        let mut p = ParamStore::<f64>::new();
        let id = p.register("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        p.get_mut(id).accumulate_grad(&[0.5, -3.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut p);
        let w = p.get(id).data();
        assert!((w[0] - (1.0 - 0.1 * (1.0 + 0.01))).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.1 * (1.0 + 0.01 * 2.0))).abs() < 1e-6);
        assert_eq!(p.get(id).grad().unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        let id = p.register("w", Tensor::new(&[1], vec![5.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let w = p.get(id).data()[0];
            p.get_mut(id).accumulate_grad(&[2.0 * (w - 1.0)]).unwrap();
            opt.step(&mut p);
        }
        assert!((p.get(id).data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = ReduceOnPlateau::default();
        let mut lr = 0.01;
        lr = s.observe(1.0, lr);
        for _ in 0..5 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 0.01);
        }
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 0.005);
        assert_eq!(s.observe(0.5, lr), 0.005);
    }
}
